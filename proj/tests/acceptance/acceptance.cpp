// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <nlohmann/json.hpp>
#include <optional>
#include <random>
#include <sstream>
#include <sys/wait.h>
#include <unistd.h>

#include "pcisr/cli.hpp"
#include "pcisr/finetune.hpp"
#include "pcisr/io.hpp"
#include "pcisr/metrics.hpp"
#include "pcisr/ops.hpp"
#include "pcisr/recon.hpp"
#include "pcisr/training.hpp"

using namespace pcisr;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Tensor random_uniform(Shape shape, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v));
}

Tensor random_binary(Shape shape, std::mt19937_64& rng) {
  std::bernoulli_distribution coin(0.5);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = coin(rng) ? 1.0 : 0.0;
  return Tensor(std::move(shape), std::move(v));
}

Tensor normalize_range(const Tensor& t) {
  auto v = t.to_vector();
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double a = *lo, b = *hi;
  for (auto& x : v) x = b > a ? (x - a) / (b - a) : 0.0;
  return Tensor(t.shape(), std::move(v));
}

double max_abs(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

double normwise_rel(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d / std::max(max_abs(b), 1e-300);
}

// ------------------------------------------------------------ shared model

const SparseOTF& trained_otf() {
  static const SparseOTF otf = make_ideal_otf({32, 32}, {4, 4});
  return otf;
}

struct Trained {
  UNetParams params;
  MaskSet masks;
  double t1;
};

const Trained& trained() {
  static std::optional<Trained> model;
  if (!model) {
    const auto images = make_synthetic_dataset(200, {32, 32}, 7);
    const auto split = split_dataset(images, 7);
    TrainConfig cfg;
    cfg.seed = 3;
    const auto t = Clock::now();
    auto r = train(split.train, split.validation, trained_otf(), cfg);
    std::cout << "  trained " << split.train.size() << " images, " << cfg.epochs << " epochs, best epoch "
              << r.report.best_epoch << ", T1 " << fmt("%.1f", r.report.t1_seconds) << " s ("
              << fmt("%.1f", std::chrono::duration<double>(Clock::now() - t).count()) << " s wall)" << std::endl;
    model = Trained{std::move(r.params), std::move(r.masks), r.report.t1_seconds};
  }
  return *model;
}

// ------------------------------------------------------------ criteria

Verdict gradient_integrity() {
  const auto otf = make_ideal_otf({16, 16}, {4, 4});
  UNetConfig uc;
  uc.depth = 2;
  uc.base_channels = 4;
  const UNetParams params = init_params(21, uc).clone(true);
  MaskSet masks = MaskSet::random(3, {4, 4}, 21);
  masks.logits().set_requires_grad(true);
  const Tensor object = make_synthetic_dataset(2, {16, 16}, 21)[1];
  const NoiseConfig noise{};

  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = pipeline_loss(params, masks, otf, object, noise);
  }
  tape.backward(loss);
  auto tensors = params.tensors();
  std::vector<std::vector<double>> grads;
  for (const auto& t : tensors) grads.push_back(t.grad().to_vector());
  const auto logit_grad = masks.logits().grad().to_vector();

  // Mask entries: the loss as a function of the realized (continuous) masks.
  const Tensor realized = masks.binary({16, 16});
  auto mask_loss = [&](const Tensor& m) {
    return squared_error(unet_forward(params, gi_reconstruct(otf, m, pci_measure(otf, m, object, noise))), object);
  };
  std::vector<double> mask_grad;
  {
    Tensor m = realized.clone(true);
    Tape t2;
    Tensor l;
    {
      TapeScope scope(t2);
      l = mask_loss(m);
    }
    t2.backward(l);
    mask_grad = m.grad().to_vector();
  }
  NoGradScope no_grad;
  const double h = 1e-5, floor = 1e-6;
  double worst = 0.0;
  std::size_t checked = 0;
  for (std::size_t j = 0; j < tensors.size(); ++j) {
    auto data = tensors[j].mutable_data();
    for (std::size_t k = 0; k < data.size(); ++k) {
      const double orig = data[k];
      data[k] = orig + h;
      const double fp = pipeline_loss(params, masks, otf, object, noise).item();
      data[k] = orig - h;
      const double fm = pipeline_loss(params, masks, otf, object, noise).item();
      data[k] = orig;
      const double fd = (fp - fm) / (2 * h);
      worst = std::max(worst, std::abs(grads[j][k] - fd) / std::max({std::abs(grads[j][k]), std::abs(fd), floor}));
      ++checked;
    }
  }

  double worst_mask = 0.0;
  for (std::size_t k = 0; k < realized.numel(); ++k) {
    Tensor mp = realized.detach(), mm = realized.detach();
    mp.mutable_data()[k] += h;
    mm.mutable_data()[k] -= h;
    const double fd = (mask_loss(mp).item() - mask_loss(mm).item()) / (2 * h);
    worst_mask = std::max(worst_mask, std::abs(mask_grad[k] - fd) / std::max({std::abs(mask_grad[k]), std::abs(fd), floor}));
    ++checked;
  }
  // Logits receive the realized-mask gradient summed over tiles times sigmoid'.
  double worst_chain = 0.0;
  const auto logits = masks.logits().to_vector();
  for (std::size_t m = 0; m < 3; ++m)
    for (std::size_t a = 0; a < 4; ++a)
      for (std::size_t b = 0; b < 4; ++b) {
        double s = 0.0;
        for (std::size_t r = a; r < 16; r += 4)
          for (std::size_t c = b; c < 16; c += 4) s += mask_grad[(m * 16 + r) * 16 + c];
        const std::size_t e = (m * 4 + a) * 4 + b;
        const double sg = 1.0 / (1.0 + std::exp(-logits[e]));
        const double expect = s * sg * (1.0 - sg);
        worst_chain = std::max(worst_chain, std::abs(logit_grad[e] - expect) / std::max({std::abs(expect), 1e-12}));
      }
  const double all = std::max({worst, worst_mask, worst_chain});
  return {all <= 1e-4, std::to_string(checked) + " entries; worst rel err network " + fmt("%.2e", worst) + ", masks " +
                           fmt("%.2e", worst_mask) + ", logit chain " + fmt("%.2e", worst_chain)};
}

Verdict oracle_equivalence() {
  std::mt19937_64 rng(2);
  double worst_y = 0.0, worst_gi = 0.0;
  for (int inst = 0; inst < 20; ++inst) {
    std::uniform_int_distribution<std::size_t> f(1, 4), d(1, 3), n(1, 5);
    const Extent2 factor{f(rng), f(rng)};
    const Extent2 det{std::max<std::size_t>(1, std::min(d(rng), 12 / factor.rows)),
                      std::max<std::size_t>(1, std::min(d(rng), 12 / factor.cols))};
    const Extent2 dmd{det.rows * factor.rows, det.cols * factor.cols};
    std::uniform_real_distribution<double> u(-0.8, 0.8);
    const OTFPerturbation pert{u(rng), u(rng), 0.1 * u(rng), 1.0, std::abs(u(rng)), 0.05};
    const SparseOTF otf = perturb_otf(make_ideal_otf(dmd, factor), pert, inst);
    const std::size_t nm = n(rng);
    const Tensor masks = inst % 2 ? random_binary({nm, dmd.rows, dmd.cols}, rng) : random_uniform({nm, dmd.rows, dmd.cols}, rng);
    const Tensor object = random_uniform({dmd.rows, dmd.cols}, rng);
    const NoiseConfig noise{inst % 3 == 0 ? 0.3 : 0.0, inst % 4 != 1, static_cast<std::uint64_t>(100 + inst)};

    const auto dense = otf.dense();
    const std::size_t rows = det.count(), cols = dmd.count();
    std::vector<double> y(nm * rows, 0.0);
    for (std::size_t m = 0; m < nm; ++m)
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) y[m * rows + i] += dense[i * cols + j] * masks[m * cols + j] * object[j];
    if (noise.sigma > 0) {
      double mean = 0.0;
      for (double v : y) mean += v;
      mean /= static_cast<double>(y.size());
      const double scale = (noise.squared_convention ? noise.sigma * noise.sigma : noise.sigma) * mean;
      const Tensor draws = noise_draws(nm, det, noise.seed);
      for (std::size_t k = 0; k < y.size(); ++k) y[k] += scale * draws[k];
    }
    const Tensor frames = pci_measure(otf, masks, object, noise);
    worst_y = std::max(worst_y, normwise_rel(frames.to_vector(), y));

    std::vector<double> gi(cols, 0.0);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t m = 0; m < nm; ++m)
        for (std::size_t j = 0; j < cols; ++j) gi[j] += y[m * rows + i] * dense[i * cols + j] * masks[m * cols + j];
    for (auto& v : gi) v /= static_cast<double>(rows);
    worst_gi = std::max(worst_gi, normwise_rel(gi_reconstruct(otf, masks, Tensor(frames.shape(), y)).to_vector(), gi));
  }
  return {worst_y <= 1e-12 && worst_gi <= 1e-12,
          "20 instances; worst rel err measure " + fmt("%.2e", worst_y) + ", GI " + fmt("%.2e", worst_gi)};
}

double frobenius_rel(const SparseOTF& a, const SparseOTF& b) {
  const auto da = a.dense(), db = b.dense();
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < da.size(); ++i) {
    num += (da[i] - db[i]) * (da[i] - db[i]);
    den += db[i] * db[i];
  }
  return std::sqrt(num / den);
}

Verdict calibration_recovery() {
  const auto truth = perturb_otf(make_ideal_otf({16, 16}, {4, 4}), {0.4, -0.6, 0.0, 1.0, 0.5, 0.05}, 2);
  const auto windows = default_windows(truth.detector_shape(), truth.dmd_shape(), 4);
  std::size_t wmax = 0;
  for (const auto& w : windows) wmax = std::max(wmax, w.size());
  const Tensor ones = Tensor::full(Shape{16, 16}, 1.0);
  std::mt19937_64 rng(3);
  const Tensor masks = random_binary({3 * wmax, 16, 16}, rng);
  const double noiseless = frobenius_rel(calibrate_otf(masks, pci_measure(truth, masks, ones, {}), windows, 0.0).otf, truth);

  const std::vector<std::size_t> sizes{100, 200, 400, 800, 1600};
  std::vector<double> mean(sizes.size(), 0.0);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 r(1000 + seed);
    const Tensor all = random_binary({sizes.back(), 16, 16}, r);
    const Tensor frames_all = pci_measure(truth, all, ones, NoiseConfig{0.3, true, 2000 + seed});
    for (std::size_t k = 0; k < sizes.size(); ++k) {
      const std::size_t n = sizes[k], len = n * 256, dlen = n * 16;
      const Tensor m(Shape{n, 16, 16}, std::vector<double>(all.data().begin(), all.data().begin() + len));
      const Tensor f(Shape{n, 4, 4}, std::vector<double>(frames_all.data().begin(), frames_all.data().begin() + dlen));
      mean[k] += frobenius_rel(calibrate_otf(m, f, windows).otf, truth) / 10.0;
    }
  }
  bool monotone = true;
  std::string curve;
  for (std::size_t k = 0; k < sizes.size(); ++k) {
    if (k > 0 && !(mean[k] < mean[k - 1])) monotone = false;
    curve += (k ? ", " : "") + std::to_string(sizes[k]) + ":" + fmt("%.4f", mean[k]);
  }
  return {noiseless <= 1e-6 && monotone,
          "noiseless N=" + std::to_string(3 * wmax) + " err " + fmt("%.2e", noiseless) + "; sigma 0.3 mean err " + curve};
}

Verdict method_ordering() {
  const auto& model = trained();
  const SparseOTF& otf = trained_otf();
  const Tensor bin = model.masks.binary({32, 32});
  const auto images = make_synthetic_dataset(21, {32, 32}, 99);
  const std::vector<double> lambdas{1e-4, 1e-3, 1e-2, 1e-1};
  const std::vector<double> sigmas{0.0, 0.3, 0.5};
  std::vector<std::array<double, 4>> mean(sigmas.size(), {0, 0, 0, 0});  // gi, wo-ft, w-ft, tv
  for (std::size_t s = 0; s < sigmas.size(); ++s) {
    for (std::size_t i = 1; i <= 20; ++i) {
      const Tensor& x = images[i];
      MeasurementSet y;
      y.frames = pci_measure(otf, bin, x, NoiseConfig{sigmas[s], true, 1000 + i});
      double best_tv = -1e300;
      {
        NoGradScope no_grad;
        const Tensor gi = gi_reconstruct(otf, bin, y.frames);
        mean[s][0] += psnr(x, normalize_range(gi)) / 20;
        mean[s][1] += psnr(x, reshape(unet_forward(model.params, gi), x.shape())) / 20;
        for (double l : lambdas) {
          TVConfig tc;
          tc.lambda = l;
          best_tv = std::max(best_tv, psnr(x, tv_reconstruct(otf, bin, y.frames, tc).image));
        }
      }
      mean[s][2] += psnr(x, finetune_region(model.params, model.masks, otf, y, FinetuneConfig{}).images[0]) / 20;
      mean[s][3] += best_tv / 20;
    }
  }
  bool ok = true;
  std::string detail;
  for (std::size_t s = 0; s < sigmas.size(); ++s) {
    ok = ok && mean[s][2] >= mean[s][1] && mean[s][1] >= mean[s][0];
    detail += "sigma " + fmt("%.1f", sigmas[s]) + ": GI " + fmt("%.2f", mean[s][0]) + " W/O-FT " + fmt("%.2f", mean[s][1]) +
              " W/FT " + fmt("%.2f", mean[s][2]) + " TV " + fmt("%.2f", mean[s][3]) + "; ";
  }
  const double drop_net = mean[0][1] - mean[2][1], drop_tv = mean[0][3] - mean[2][3];
  ok = ok && drop_net < drop_tv;
  return {ok, detail + "drop W/O-FT " + fmt("%.2f", drop_net) + " dB vs TV " + fmt("%.2f", drop_tv) + " dB"};
}

Verdict region_mismatch() {
  const auto& model = trained();
  const SparseOTF& phi = trained_otf();
  OTFPerturbation p;
  p.shift_y = 1.0;
  p.shift_x = 1.0;
  p.blur_sigma = 0.5;
  const SparseOTF mu = perturb_otf(phi, p, 1);
  const Tensor bin = model.masks.binary({32, 32});
  int good = 0;
  std::string detail;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto phantoms = make_synthetic_dataset(21, {32, 32}, 500 + seed);
    double matched = 0, mismatched = 0, tuned = 0;
    for (std::size_t i = 1; i <= 20; ++i) {
      const Tensor& x = phantoms[i];
      MeasurementSet y;
      y.frames = pci_measure(mu, bin, x, {});
      {
        NoGradScope no_grad;
        matched += psnr(x, reshape(unet_forward(model.params, gi_reconstruct(phi, bin, pci_measure(phi, bin, x, {}))), x.shape())) / 20;
        mismatched += psnr(x, reshape(unet_forward(model.params, gi_reconstruct(mu, bin, y.frames)), x.shape())) / 20;
      }
      tuned += psnr(x, finetune_region(model.params, model.masks, mu, y, FinetuneConfig{}).images[0]) / 20;
    }
    const double drop = matched - mismatched, recovery = drop > 0 ? (tuned - mismatched) / drop : 0.0;
    const bool ok = drop >= 1.0 && recovery >= 0.5;
    good += ok;
    detail += (seed ? " " : "") + fmt("%.2f", drop) + "/" + fmt("%.0f%%", 100 * recovery) + (ok ? "" : "*");
  }
  return {good >= 8, std::to_string(good) + "/10 seeds; drop/recovery per seed: " + detail};
}

Verdict efficiency() {
  const auto& model = trained();
  const Extent2 fov_size{64, 64}, region{32, 32};
  const SparseOTF full = make_ideal_otf(fov_size, {4, 4});
  const RegionSpec fov{{0, 0}, fov_size, {0, 0}, full.detector_shape()};
  const auto regions = split_fov(fov, region);
  const auto tiles = make_synthetic_dataset(regions.size() + 1, region, 77);
  std::vector<MeasurementSet> sets;
  for (std::size_t k = 0; k < regions.size(); ++k) {
    const SparseOTF otf = extract_region(full, regions[k]).otf;
    sets.push_back(pci_measure(otf, model.masks, tiles[k + 1], NoiseConfig{0.3, true, 50 + k}, regions[k]));
  }
  const auto res = reconstruct_fov(fov, region, full, model.masks, model.params, sets, FinetuneConfig{}, model.t1);
  double total = res.timing.t1;
  for (double t : res.timing.t2) total += t;
  const double n = static_cast<double>(regions.size());
  std::ostringstream out;
  write_timing_json(out, res.timing);
  const auto j = json::parse(out.str());
  const auto t2 = j.at("T2_list").get<std::vector<double>>();
  double recomputed = j.at("T1").get<double>();
  for (double t : t2) recomputed += t;
  recomputed /= static_cast<double>(t2.size()) * j.at("T1").get<double>();
  const bool exact = recomputed == j.at("ratio").get<double>() && res.timing.ratio == total / (n * res.timing.t1);
  return {total < n * res.timing.t1 && exact,
          "T1 " + fmt("%.1f", res.timing.t1) + " s, sum T2 " + fmt("%.1f", total - res.timing.t1) + " s, T1+sum T2 " +
              fmt("%.1f", total) + " s < n*T1 " + fmt("%.1f", n * res.timing.t1) + " s; ratio " +
              fmt("%.4f", res.timing.ratio) + (exact ? " recomputes exactly" : " does NOT recompute")};
}

Verdict resolution() {
  const auto& model = trained();
  const SparseOTF& otf = trained_otf();
  const Tensor chart = render_chart({32, 32});
  const Tensor detector = otf_apply(otf, reshape(chart, {1, 32, 32}));
  std::vector<double> up(32 * 32);
  for (std::size_t r = 0; r < 32; ++r)
    for (std::size_t c = 0; c < 32; ++c) up[r * 32 + c] = detector[(r / 4) * 8 + c / 4] / 16.0;
  const auto base = stripe_resolvability(Tensor(Shape{32, 32}, up));
  bool fine_unresolved = true;
  for (const auto& s : base)
    if (s.group.period <= 3 && !(s.contrast < 0.2)) fine_unresolved = false;
  const auto y = pci_measure(otf, model.masks, chart, {});
  const auto ft = stripe_resolvability(finetune_region(model.params, model.masks, otf, y, FinetuneConfig{}).images[0]);
  std::string periods;
  for (const auto& s : ft)
    if (s.resolved) periods += (periods.empty() ? "" : ",") + std::to_string(s.group.period) + (s.group.vertical ? "v" : "h");
  const std::size_t nb = count_resolved(base), nf = count_resolved(ft);
  return {fine_unresolved && nf > nb, "upsampled detector resolves " + std::to_string(nb) + " groups (period<=3 " +
                                          (fine_unresolved ? "unresolved" : "RESOLVED") + "), W/FT resolves " +
                                          std::to_string(nf) + " [" + periods + "]"};
}

Verdict sampling_rate() {
  const auto masks = MaskSet::random(3, {4, 4}, 8);
  bool ok = true;
  std::string detail;
  const SparseOTF region = make_ideal_otf({32, 32}, {4, 4});
  const auto y = pci_measure(region, masks, make_synthetic_dataset(2, {32, 32}, 8)[1], {});
  ok = ok && y.frames.numel() == 3 * 8 * 8 && static_cast<double>(y.frames.numel()) / 1024.0 == 3.0 / 16.0;
  detail = "32x32 region: " + std::to_string(y.frames.numel()) + " values, ratio " +
           fmt("%.6f", static_cast<double>(y.frames.numel()) / 1024.0);
  const SparseOTF full = make_ideal_otf({64, 96}, {4, 4});
  const auto regions = split_fov({{0, 0}, {64, 96}, {0, 0}, full.detector_shape()}, {32, 32});
  for (const auto& r : regions) {
    const auto e = extract_region(full, r).otf;
    const auto yr = pci_measure(e, masks, Tensor::full(Shape{32, 32}, 0.5), {});
    ok = ok && yr.frames.numel() == 3 * r.detector_size.count() &&
         static_cast<double>(yr.frames.numel()) / static_cast<double>(r.size.count()) == 3.0 / 16.0;
  }
  return {ok, detail + "; all " + std::to_string(regions.size()) + " FOV regions give 3pq values and 3/16"};
}

// --- determinism and formats

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int run_tool(const std::string& args) {
  const std::string cmd = std::string(PCISR_BINARY) + " " + args + " > /dev/null 2>&1";
  const int raw = std::system(cmd.c_str());
  return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
}

bool cli_pipeline(const fs::path& root) {
  const std::string r = root.string();
  const std::vector<std::string> steps{
      "make-otf --dmd 16x16 --factor 4x4 --out " + r + "/otf",
      "perturb-otf --otf " + r + "/otf/otf.pcio --shift-x 1 --blur 0.5 --gain-jitter 0.05 --seed 4 --out " + r + "/mu",
      "calibrate --otf " + r + "/mu/otf.pcio --n-cal 300 --sigma 0.3 --seed 5 --out " + r + "/cal",
      "make-dataset --n 16 --size 16x16 --seed 1 --out " + r + "/data",
      "train --dataset " + r + "/data/dataset.pcit --split " + r + "/data/split.json --otf " + r +
          "/otf/otf.pcio --depth 2 --base-channels 4 --epochs 2 --batch-size 4 --seed 2 --out " + r + "/train",
      "measure --otf " + r + "/cal/otf.pcio --object " + r + "/object.pgm --masks " + r +
          "/train/masks.pcit --sigma 0.3 --seed 6 --out " + r + "/meas",
      "reconstruct --method net-ft --ft-max-steps 5 --otf " + r + "/cal/otf.pcio --masks " + r +
          "/train/masks.pcit --measurements " + r + "/meas/measurements --net " + r + "/train/unet --out " + r + "/ft",
      "reconstruct --method tv --max-iters 30 --otf " + r + "/cal/otf.pcio --masks " + r +
          "/train/masks.pcit --measurements " + r + "/meas/measurements --out " + r + "/tv",
      "fov-run --train-run " + r + "/train --fov 32x32 --region 16x16 --ft-max-steps 3 --seed 7 --out " + r + "/fov",
  };
  for (const auto& s : steps)
    if (run_tool(s) != 0) {
      std::cout << "  command failed: pcisr " << s << std::endl;
      return false;
    }
  return true;
}

Verdict determinism_and_formats() {
  const fs::path tmp = fs::temp_directory_path() / ("pcisr_accept_" + std::to_string(::getpid()));
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  std::vector<std::string> failures;

  // Repeated seeded CLI runs.
  std::size_t compared = 0;
  {
    const auto a = tmp / "a", b = tmp / "b";
    bool ran = true;
    for (const auto& root : {a, b}) {
      fs::create_directories(root);
      write_pgm(root / "object.pgm", make_synthetic_dataset(2, {16, 16}, 1)[1], 16);
      ran = ran && cli_pipeline(root);
    }
    if (!ran) failures.push_back("cli pipeline");
    for (const auto& stage : {"otf", "mu", "cal", "data", "train", "meas", "ft", "tv", "fov"}) {
      if (!ran) break;
      const auto ma = json::parse(slurp(a / stage / "manifest.json")).at("artifacts");
      const auto mb = json::parse(slurp(b / stage / "manifest.json")).at("artifacts");
      for (const auto& [name, sum] : ma.items()) {
        if (name == "timing.json") continue;  // wall-clock record
        ++compared;
        if (!mb.contains(name) || mb.at(name) != sum || slurp(a / stage / name) != slurp(b / stage / name))
          failures.push_back(std::string(stage) + "/" + name);
      }
    }
  }

  // In-process repeats.
  {
    const auto otf = make_ideal_otf({16, 16}, {4, 4});
    const auto data = make_synthetic_dataset(9, {16, 16}, 5);
    TrainConfig tc;
    tc.unet.depth = 2;
    tc.unet.base_channels = 4;
    tc.epochs = 2;
    tc.batch_size = 3;
    tc.seed = 9;
    const std::vector<Tensor> tr(data.begin() + 1, data.begin() + 7), va(data.begin() + 7, data.end());
    const auto r1 = train(tr, va, otf, tc), r2 = train(tr, va, otf, tc);
    if (checksum(r1.params.tensors()) != checksum(r2.params.tensors()) ||
        r1.masks.logits().to_vector() != r2.masks.logits().to_vector())
      failures.push_back("train repeat");
    const auto y = pci_measure(otf, r1.masks, data[1], NoiseConfig{0.5, true, 3});
    FinetuneConfig fc;
    fc.max_steps = 10;
    if (finetune_region(r1.params, r1.masks, otf, y, fc).images[0].to_vector() !=
        finetune_region(r2.params, r2.masks, otf, y, fc).images[0].to_vector())
      failures.push_back("finetune repeat");
  }

  // Container round trips.
  std::mt19937_64 rng(9);
  {
    Tensor t = random_uniform({3, 5, 7}, rng, -1e3, 1e3);
    t.mutable_data()[0] = 5e-324;
    t.mutable_data()[1] = -0.0;
    save_tensor(tmp / "t.pcit", t);
    const Tensor back = load_tensor(tmp / "t.pcit");
    save_tensor(tmp / "t2.pcit", back);
    if (std::memcmp(back.data().data(), t.data().data(), t.numel() * sizeof(double)) != 0 || back.shape() != t.shape() ||
        slurp(tmp / "t.pcit") != slurp(tmp / "t2.pcit"))
      failures.push_back("PCIT");
  }
  {
    const auto o = perturb_otf(make_ideal_otf({24, 16}, {4, 4}), {0.3, -0.7, 0.05, 1.02, 0.6, 0.1}, 4);
    save_otf(tmp / "o.pcio", o);
    const auto back = load_otf(tmp / "o.pcio");
    save_otf(tmp / "o2.pcio", back);
    if (back.dense() != o.dense() || slurp(tmp / "o.pcio") != slurp(tmp / "o2.pcio")) failures.push_back("PCIO");
  }
  for (int depth : {8, 16}) {
    const double maxval = depth == 8 ? 255.0 : 65535.0;
    std::uniform_int_distribution<int> level(0, static_cast<int>(maxval));
    std::vector<double> v(13 * 11);
    for (auto& x : v) x = level(rng) / maxval;
    const Tensor img(Shape{13, 11}, v);
    write_pgm(tmp / "i.pgm", img, depth);
    const Tensor back = read_pgm(tmp / "i.pgm");
    write_pgm(tmp / "i2.pgm", back, depth);
    if (back.to_vector() != v || slurp(tmp / "i.pgm") != slurp(tmp / "i2.pgm"))
      failures.push_back("PGM" + std::to_string(depth));
  }
  {
    const Tensor m = random_binary({3, 9, 13}, rng);
    write_pbm(tmp / "m.pbm", m);
    const Tensor back = read_pbm(tmp / "m.pbm");
    write_pbm(tmp / "m2.pbm", back);
    if (back.to_vector() != m.to_vector() || back.shape() != m.shape() || slurp(tmp / "m.pbm") != slurp(tmp / "m2.pbm"))
      failures.push_back("PBM");
  }
  fs::remove_all(tmp);
  std::string detail = std::to_string(compared) + " CLI artifacts compared across two seeded runs; train/finetune repeats; PCIT/PCIO/PGM8/PGM16/PBM round trips";
  if (!failures.empty()) {
    detail += "; mismatches:";
    for (const auto& f : failures) detail += " " + f;
  }
  return {failures.empty(), detail};
}

Verdict metric_correctness() {
  std::mt19937_64 rng(10);
  bool ok = true;
  std::vector<std::string> failed;
  auto expect = [&](bool cond, const char* what) {
    if (!cond) failed.push_back(what);
    ok = ok && cond;
  };
  MetricConfig printed;
  printed.convention = PsnrConvention::as_printed;
  for (int k = 0; k < 20; ++k) {
    const Tensor x = random_uniform({8, 8}, rng), y = random_uniform({8, 8}, rng);
    expect(psnr(x, y) == psnr(y, x), "psnr symmetry");
    expect(ssim(x, y) == ssim(y, x), "ssim symmetry");
    expect(ssim(x, x) == 1.0, "ssim self");
    expect(psnr(x, x) == 99.0, "psnr cap");
    expect(std::abs(psnr(x, y) - psnr(x, y, printed) - 10.0 * std::log10(64.0)) <= 1e-12, "convention gap");
    const Tensor z = random_uniform({8, 8}, rng);
    expect((psnr(x, y) < psnr(x, z)) == (psnr(x, y, printed) < psnr(x, z, printed)), "ordering");
  }
  expect(std::abs(psnr(Tensor::zeros({8, 8}), Tensor::full(Shape{8, 8}, 1.0))) <= 1e-12, "0 dB extreme");
  const Tensor flat = Tensor::full(Shape{8, 8}, 0.4);
  expect(ssim(flat, flat) == 1.0, "constant ssim");
  const Tensor x = random_uniform({16, 16}, rng);
  std::normal_distribution<double> n01;
  std::vector<double> noise(256);
  for (auto& v : noise) v = n01(rng);
  double prev = 1e300;
  for (double amp : {0.001, 0.01, 0.03, 0.1, 0.3}) {
    std::vector<double> y(256);
    for (std::size_t i = 0; i < 256; ++i) y[i] = x[i] + amp * noise[i];
    const double p = psnr(x, Tensor(Shape{16, 16}, y));
    expect(p < prev, "noise monotonicity");
    prev = p;
  }
  std::string detail = "symmetry, self-similarity, 99 dB cap, 0 dB extreme, convention gap 10*log10(64), ordering, noise sweep";
  if (!failed.empty()) detail += "; failed: " + failed.front();
  return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"gradient integrity", gradient_integrity},
      {"oracle equivalence", oracle_equivalence},
      {"calibration recovery", calibration_recovery},
      {"method ordering", method_ordering},
      {"region mismatch", region_mismatch},
      {"efficiency", efficiency},
      {"resolution enhancement", resolution},
      {"sampling rate", sampling_rate},
      {"determinism and formats", determinism_and_formats},
      {"metric correctness", metric_correctness},
  };
  int failed = 0;
  std::vector<bool> selected(criteria.size(), argc == 1);
  for (int a = 1; a < argc; ++a) {
    const auto k = std::strtoul(argv[a], nullptr, 10);
    if (k < 1 || k > criteria.size()) {
      std::cerr << "usage: pcisr_acceptance [criterion numbers 1-" << criteria.size() << "]\n";
      return 2;
    }
    selected[k - 1] = true;
  }
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    if (!selected[k]) continue;
    const auto t = Clock::now();
    Verdict v;
    try {
      v = criteria[k].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(Clock::now() - t).count();
    failed += !v.pass;
    std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << (k + 1) << " (" << criteria[k].first << "): " << v.detail
              << " [" << fmt("%.1f", secs) << " s]" << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
