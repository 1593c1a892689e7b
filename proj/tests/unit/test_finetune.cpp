#include <doctest.h>

#include <nlohmann/json.hpp>
#include <sstream>

#include "helpers.hpp"
#include "pcisr/finetune.hpp"
#include "pcisr/metrics.hpp"
#include "pcisr/ops.hpp"
#include "pcisr/recon.hpp"
#include "pcisr/training.hpp"

using namespace pcisr;

namespace {

UNetConfig small_net() {
  UNetConfig c;
  c.depth = 2;
  c.base_channels = 4;
  return c;
}

std::vector<std::size_t> frozen_layers(const UNetParams& p) {
  std::vector<std::size_t> v;
  for (std::size_t i = 0; i < p.layers.size(); ++i)
    if (std::find(p.finetune_subset.begin(), p.finetune_subset.end(), i) == p.finetune_subset.end()) v.push_back(i);
  return v;
}

FinetuneConfig quick(std::size_t steps = 15) {
  FinetuneConfig cfg;
  cfg.max_steps = steps;
  cfg.learning_rate = 1e-3;
  return cfg;
}

}  // namespace

TEST_SUITE("finetune") {

TEST_CASE("only the fine-tune subset changes") {
  const auto params = init_params(1, small_net());
  const auto masks = MaskSet::random(3, {4, 4}, 1);
  const auto otf = perturb_otf(make_ideal_otf({16, 16}, {4, 4}), {1.0, 1.0, 0, 1, 0.5, 0}, 0);
  const auto x = make_synthetic_dataset(2, {16, 16}, 1)[1];
  const auto y = pci_measure(otf, masks, x, {});
  const auto r = finetune_region(params, masks, otf, y, quick());
  CHECK(r.steps == 15);
  CHECK(checksum(r.params.tensors(frozen_layers(params))) == checksum(params.tensors(frozen_layers(params))));
  CHECK(checksum(r.params.tensors(params.finetune_subset)) != checksum(params.tensors(params.finetune_subset)));
  CHECK(checksum(params.tensors()) == checksum(init_params(1, small_net()).tensors()));
  CHECK(r.history.size() == 16);
  CHECK(r.history.back() <= r.history.front());
  CHECK(r.t2_seconds > 0.0);
}

TEST_CASE("zero learning rate reproduces the reconstruction without fine-tuning") {
  const auto params = init_params(2, small_net());
  const auto masks = MaskSet::random(3, {4, 4}, 2);
  const auto otf = make_ideal_otf({16, 16}, {4, 4});
  const auto y = pci_measure(otf, masks, make_synthetic_dataset(2, {16, 16}, 2)[1], {0.3, true, 1});
  auto cfg = quick(5);
  cfg.learning_rate = 0.0;
  const auto r = finetune_region(params, masks, otf, y, cfg);
  CHECK(checksum(r.params.tensors()) == checksum(params.tensors()));
  CHECK(r.images[0].to_vector() == reconstruct_net(params, masks, otf, y.frames).to_vector());
  for (double h : r.history) CHECK(h == r.history.front());
}

TEST_CASE("history starts at the consistency loss of the base parameters") {
  const auto params = init_params(3, small_net());
  const auto masks = MaskSet::random(3, {4, 4}, 3);
  const auto otf = make_ideal_otf({16, 16}, {4, 4});
  const auto y = pci_measure(otf, masks, make_synthetic_dataset(2, {16, 16}, 3)[1], {});
  const auto r = finetune_region(params, masks, otf, y, quick(3));
  const Tensor bin = masks.binary({16, 16});
  CHECK(r.history.front() == consistency_loss(params, bin, otf, y.frames));
  // Independent evaluation of the objective.
  const Tensor out = reconstruct_net(params, masks, otf, y.frames);
  const Tensor resim = pci_measure(otf, bin, reshape(out, {16, 16}), {});
  double ref = 0;
  for (std::size_t i = 0; i < resim.numel(); ++i) ref += (resim[i] - y.frames[i]) * (resim[i] - y.frames[i]);
  CHECK(testing::rel_err(r.history.front(), ref) <= 1e-12);
  CHECK(testing::rel_err(consistency_loss(r.params, bin, otf, y.frames), *std::min_element(r.history.begin(), r.history.end())) <= 1e-12);
}

TEST_CASE("final loss never exceeds the initial loss across seeded runs") {
  const auto otf = perturb_otf(make_ideal_otf({16, 16}, {4, 4}), {0.5, -1.0, 0, 1, 0.5, 0}, 0);
  const auto data = make_synthetic_dataset(11, {16, 16}, 4);
  int ok = 0;
  for (std::uint64_t s = 1; s <= 10; ++s) {
    const auto params = init_params(s, small_net());
    const auto masks = MaskSet::random(3, {4, 4}, s);
    auto cfg = quick(10);
    cfg.learning_rate = 5e-3;
    const auto r = finetune_region(params, masks, otf, pci_measure(otf, masks, data[s], {0.3, true, s}), cfg);
    const Tensor bin = masks.binary({16, 16});
    ok += consistency_loss(r.params, bin, otf, pci_measure(otf, masks, data[s], {0.3, true, s}).frames) <= r.history.front();
  }
  CHECK(ok == 10);
}

TEST_CASE("line-search mode has a non-increasing history") {
  const auto params = init_params(5, small_net());
  const auto masks = MaskSet::random(3, {4, 4}, 5);
  const auto otf = make_ideal_otf({16, 16}, {4, 4});
  const auto y = pci_measure(otf, masks, make_synthetic_dataset(2, {16, 16}, 5)[1], {});
  auto cfg = quick(20);
  cfg.learning_rate = 2e-2;
  cfg.line_search = true;
  const auto r = finetune_region(params, masks, otf, y, cfg);
  for (std::size_t k = 1; k < r.history.size(); ++k) CHECK(r.history[k] <= r.history[k - 1]);
}

TEST_CASE("early stop triggers when the loss stalls") {
  const auto params = init_params(6, small_net());
  const auto masks = MaskSet::random(3, {4, 4}, 6);
  const auto otf = make_ideal_otf({16, 16}, {4, 4});
  const auto y = pci_measure(otf, masks, make_synthetic_dataset(2, {16, 16}, 6)[1], {});
  auto cfg = quick(100);
  cfg.learning_rate = 1e-12;
  cfg.patience = 5;
  const auto r = finetune_region(params, masks, otf, y, cfg);
  CHECK(r.early_stopped);
  CHECK(r.steps == 5);
}

TEST_CASE("matched control: a well-fit network barely moves") {
  const auto data = make_synthetic_dataset(2, {16, 16}, 7);
  const auto otf = make_ideal_otf({16, 16}, {4, 4});
  TrainConfig tc;
  tc.unet = small_net();
  tc.unet.base_channels = 8;
  tc.learning_rate = 3e-3;
  tc.batch_size = 1;
  tc.epochs = 600;
  tc.noise_sigma = 0.0;
  tc.select_best = false;
  const auto trained = train({data[1]}, {}, otf, tc);
  const auto y = pci_measure(otf, trained.masks, data[1], {});
  const double before = psnr(data[1], reconstruct_net(trained.params, trained.masks, otf, y.frames));
  REQUIRE(before > 35.0);
  const auto r = finetune_region(trained.params, trained.masks, otf, y, FinetuneConfig{});
  CHECK(std::abs(psnr(data[1], r.images[0]) - before) < 0.5);
}

TEST_CASE("per-region mode adapts once for all sets; per-measurement once per set") {
  const auto params = init_params(8, small_net());
  const auto masks = MaskSet::random(3, {4, 4}, 8);
  const auto otf = make_ideal_otf({16, 16}, {4, 4});
  const auto data = make_synthetic_dataset(4, {16, 16}, 8);
  std::vector<MeasurementSet> sets;
  for (std::size_t i = 1; i < 4; ++i) sets.push_back(pci_measure(otf, masks, data[i], {}));
  auto cfg = quick(4);
  const auto per_set = finetune_sets(params, masks, otf, sets, cfg);
  REQUIRE(per_set.size() == 3);
  CHECK(per_set[1].images[0].to_vector() == finetune_region(params, masks, otf, sets[1], cfg).images[0].to_vector());
  cfg.mode = FinetuneMode::per_region;
  const auto joint = finetune_sets(params, masks, otf, sets, cfg);
  REQUIRE(joint.size() == 1);
  CHECK(joint[0].images.size() == 3);
  CHECK(joint[0].mode == FinetuneMode::per_region);
  CHECK(per_set[0].mode == FinetuneMode::per_measurement);
  CHECK(parse_finetune_mode(to_string(FinetuneMode::per_region)) == FinetuneMode::per_region);
  CHECK_THROWS_AS(parse_finetune_mode("sometimes"), ConfigError);
}

TEST_CASE("FOV stitching, region independence and the timing ratio") {
  const auto params = init_params(9, small_net());
  const auto masks = MaskSet::random(3, {4, 4}, 9);
  const RegionSpec fov{{0, 0}, {32, 32}, {0, 0}, {8, 8}};
  const auto full = perturb_otf(make_ideal_otf({32, 32}, {4, 4}), {0.5, 0.5, 0, 1, 0.5, 0}, 0);
  const auto regions = split_fov(fov, {16, 16});
  const auto data = make_synthetic_dataset(5, {16, 16}, 9);
  std::vector<MeasurementSet> sets;
  std::vector<SparseOTF> otfs;
  for (std::size_t k = 0; k < 4; ++k) {
    otfs.push_back(extract_region(full, regions[k]).otf);
    sets.push_back(pci_measure(otfs[k], masks, data[k + 1], {}, regions[k]));
  }
  const auto cfg = quick(3);
  const auto res = reconstruct_fov(fov, {16, 16}, full, masks, params, sets, cfg, 100.0);
  REQUIRE(res.results.size() == 4);
  for (std::size_t k = 0; k < 4; ++k) {
    const auto solo = finetune_region(params, masks, otfs[k], sets[k], cfg);
    CHECK(solo.images[0].to_vector() == res.results[k].images[0].to_vector());
    for (std::size_t r = 0; r < 16; ++r)
      for (std::size_t c = 0; c < 16; ++c)
        CHECK(res.mosaic.at({regions[k].origin.row + r, regions[k].origin.col + c}) == solo.images[0].at({r, c}));
  }
  std::vector<MeasurementSet> reversed(sets.rbegin(), sets.rend());
  CHECK(reconstruct_fov(fov, {16, 16}, full, masks, params, reversed, cfg, 100.0).mosaic.to_vector() ==
        res.mosaic.to_vector());

  double total = 100.0;
  for (double t : res.timing.t2) total += t;
  CHECK(res.timing.ratio == total / (4 * 100.0));
  CHECK(res.timing.t1 == 100.0);
  std::ostringstream out;
  write_timing_json(out, res.timing);
  const auto j = nlohmann::json::parse(out.str());
  CHECK(j.at("T1").get<double>() == 100.0);
  CHECK(j.at("T2_list").get<std::vector<double>>() == res.timing.t2);
  CHECK(j.at("ratio").get<double>() == res.timing.ratio);

  std::vector<MeasurementSet> missing(sets.begin(), sets.begin() + 3);
  CHECK_THROWS_AS(reconstruct_fov(fov, {16, 16}, full, masks, params, missing, cfg, 1.0), ConfigError);
  missing.push_back(sets[0]);
  CHECK_THROWS_AS(reconstruct_fov(fov, {16, 16}, full, masks, params, missing, cfg, 1.0), ConfigError);
}

TEST_CASE("single-region FOV reduces to one fine-tune") {
  const auto params = init_params(10, small_net());
  const auto masks = MaskSet::random(3, {4, 4}, 10);
  const RegionSpec fov{{0, 0}, {16, 16}, {0, 0}, {4, 4}};
  const auto otf = make_ideal_otf({16, 16}, {4, 4});
  const auto set = pci_measure(otf, masks, make_synthetic_dataset(2, {16, 16}, 10)[1], {}, fov);
  const auto res = reconstruct_fov(fov, {16, 16}, otf, masks, params, {set}, quick(3), 5.0);
  CHECK(res.mosaic.to_vector() == finetune_region(params, masks, otf, set, quick(3)).images[0].to_vector());
}

TEST_CASE("timing ratio arithmetic and validation") {
  CHECK(timing_ratio(10.0, {1.0, 2.0}) == 13.0 / 20.0);
  CHECK_THROWS_AS(timing_ratio(0.0, {1.0}), ConfigError);
  CHECK_THROWS_AS(timing_ratio(1.0, {}), ConfigError);
  const auto params = init_params(11, small_net());
  const auto masks = MaskSet::random(3, {4, 4}, 11);
  MeasurementSet bad;
  bad.frames = Tensor::zeros({3, 2, 2});
  CHECK_THROWS_AS(finetune_region(params, masks, make_ideal_otf({16, 16}, {4, 4}), bad, quick()), ShapeError);
  FinetuneConfig c;
  c.max_steps = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

}  // TEST_SUITE
