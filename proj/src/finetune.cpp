#include "pcisr/finetune.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <nlohmann/json.hpp>
#include <ostream>

#include "pcisr/ops.hpp"
#include "pcisr/optim.hpp"
#include "pcisr/recon.hpp"

namespace pcisr {

std::string to_string(FinetuneMode m) { return m == FinetuneMode::per_region ? "per-region" : "per-measurement"; }

FinetuneMode parse_finetune_mode(const std::string& s) {
  if (s == "per-region") return FinetuneMode::per_region;
  if (s == "per-measurement") return FinetuneMode::per_measurement;
  throw ConfigError("unknown fine-tune mode '" + s + "' (expected per-measurement or per-region)");
}

void FinetuneConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be nonnegative");
  if (max_steps < 1) throw ConfigError("max_steps must be at least 1");
  if (!(tol >= 0.0)) throw ConfigError("tol must be nonnegative");
  if (patience < 1) throw ConfigError("patience must be at least 1");
}

namespace {

Tensor consistency(const UNetParams& params, const Tensor& binary, const SparseOTF& otf, const Tensor& xgi,
                   const Tensor& frames) {
  return squared_error(pci_measure(otf, binary, unet_forward(params, xgi), NoiseConfig{}), frames);
}

std::vector<std::vector<double>> snapshot(const std::vector<Tensor>& tensors) {
  std::vector<std::vector<double>> out;
  for (const auto& t : tensors) out.push_back(t.to_vector());
  return out;
}

void restore(std::vector<Tensor>& tensors, const std::vector<std::vector<double>>& values) {
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    auto w = tensors[k].mutable_data();
    std::copy(values[k].begin(), values[k].end(), w.begin());
  }
}

FinetuneResult run(const UNetParams& params, const MaskSet& masks, const SparseOTF& otf,
                   const std::vector<MeasurementSet>& sets, const FinetuneConfig& cfg) {
  cfg.validate();
  if (sets.empty()) throw ConfigError("fine-tuning needs at least one measurement set");
  for (const auto& y : sets) {
    if (y.frames.ndim() != 3 || y.n_masks() != masks.n_masks() || y.detector_shape() != otf.detector_shape()) {
      throw ShapeError("measurement frames " + shape_string(y.frames.shape()) + " do not match " +
                       std::to_string(masks.n_masks()) + " masks and the region OTF detector " +
                       std::to_string(otf.detector_shape().rows) + "x" + std::to_string(otf.detector_shape().cols));
    }
  }
  const auto start = std::chrono::steady_clock::now();

  FinetuneView view = select_finetune(params);
  const Tensor binary = masks.binary(otf.dmd_shape());
  std::vector<Tensor> xgi;
  for (const auto& y : sets) xgi.push_back(gi_reconstruct(otf, binary, y.frames));

  auto evaluate = [&]() {
    NoGradScope no_grad;
    double total = 0.0;
    for (std::size_t k = 0; k < sets.size(); ++k) total += consistency(view.params, binary, otf, xgi[k], sets[k].frames).item();
    return total;
  };

  FinetuneResult result;
  result.mode = cfg.mode;
  Adam adam(view.trainable, AdamConfig{cfg.learning_rate});
  double best = std::numeric_limits<double>::infinity();
  auto best_values = snapshot(view.trainable);

  for (std::size_t step = 0;; ++step) {
    adam.zero_grad();
    double value = 0.0;
    {
      Tape tape;
      TapeScope scope(tape);
      Tensor loss = consistency(view.params, binary, otf, xgi[0], sets[0].frames);
      for (std::size_t k = 1; k < sets.size(); ++k) loss = add(loss, consistency(view.params, binary, otf, xgi[k], sets[k].frames));
      value = loss.item();
      if (!std::isfinite(value)) throw NumericError("fine-tuning loss is not finite at step " + std::to_string(step));
      if (step < cfg.max_steps) tape.backward(loss);
    }
    result.history.push_back(value);
    if (value < best) {
      best = value;
      best_values = snapshot(view.trainable);
    }
    if (step == cfg.max_steps) break;
    if (step >= cfg.patience) {
      const double before = result.history[step - cfg.patience];
      if (before - value < cfg.tol * before) {
        result.early_stopped = true;
        break;
      }
    }
    if (!cfg.line_search) {
      adam.step();
      ++result.steps;
      continue;
    }
    const auto old = snapshot(view.trainable);
    adam.step();
    double trial = evaluate();
    for (int halving = 0; halving < 30 && !(trial <= value); ++halving) {
      for (std::size_t k = 0; k < view.trainable.size(); ++k) {
        auto w = view.trainable[k].mutable_data();
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = old[k][i] + 0.5 * (w[i] - old[k][i]);
      }
      trial = evaluate();
    }
    if (!(trial <= value)) {
      restore(view.trainable, old);
      result.early_stopped = true;
      break;
    }
    ++result.steps;
  }

  restore(view.trainable, best_values);
  {
    NoGradScope no_grad;
    for (const auto& x : xgi) result.images.push_back(reshape(unet_forward(view.params, x), Shape{x.extent(0), x.extent(1)}));
  }
  view.params.set_trainable(true);
  result.params = std::move(view.params);
  result.t2_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace

double consistency_loss(const UNetParams& params, const Tensor& binary_masks, const SparseOTF& otf_mu,
                        const Tensor& frames) {
  NoGradScope no_grad;
  return consistency(params, binary_masks, otf_mu, gi_reconstruct(otf_mu, binary_masks, frames), frames).item();
}

FinetuneResult finetune_region(const UNetParams& params, const MaskSet& masks, const SparseOTF& otf_mu,
                               const MeasurementSet& y_star, const FinetuneConfig& cfg) {
  return run(params, masks, otf_mu, {y_star}, cfg);
}

std::vector<FinetuneResult> finetune_sets(const UNetParams& params, const MaskSet& masks, const SparseOTF& otf_mu,
                                          const std::vector<MeasurementSet>& y_star, const FinetuneConfig& cfg) {
  if (cfg.mode == FinetuneMode::per_region) return {run(params, masks, otf_mu, y_star, cfg)};
  std::vector<FinetuneResult> out;
  for (const auto& y : y_star) out.push_back(run(params, masks, otf_mu, {y}, cfg));
  return out;
}

double timing_ratio(double t1, const std::vector<double>& t2) {
  if (!(t1 > 0.0)) throw ConfigError("T1 must be positive");
  if (t2.empty()) throw ConfigError("timing ratio needs at least one region");
  double total = t1;
  for (double t : t2) total += t;
  return total / (static_cast<double>(t2.size()) * t1);
}

FovResult reconstruct_fov(const RegionSpec& fov, Extent2 region_size, const SparseOTF& full_otf, const MaskSet& masks,
                          const UNetParams& params, const std::vector<MeasurementSet>& measurements,
                          const FinetuneConfig& cfg, double t1_seconds) {
  FovResult out;
  out.regions = split_fov(fov, region_size);
  std::vector<double> mosaic(fov.size.count(), 0.0);
  for (const auto& region : out.regions) {
    const MeasurementSet* match = nullptr;
    for (const auto& m : measurements) {
      if (m.region == region) {
        if (match) throw ConfigError("duplicate measurements for a region");
        match = &m;
      }
    }
    if (!match) {
      throw ConfigError("missing measurements for region at DMD (" + std::to_string(region.origin.row) + ", " +
                        std::to_string(region.origin.col) + ")");
    }
    const SparseOTF otf = extract_region(full_otf, region).otf;
    out.results.push_back(finetune_region(params, masks, otf, *match, cfg));
    const Tensor& img = out.results.back().images.front();
    const std::size_t r0 = region.origin.row - fov.origin.row, c0 = region.origin.col - fov.origin.col;
    for (std::size_t r = 0; r < region.size.rows; ++r) {
      for (std::size_t c = 0; c < region.size.cols; ++c) {
        mosaic[(r0 + r) * fov.size.cols + c0 + c] = img[r * region.size.cols + c];
      }
    }
    out.timing.t2.push_back(out.results.back().t2_seconds);
  }
  out.mosaic = Tensor(Shape{fov.size.rows, fov.size.cols}, std::move(mosaic));
  out.timing.t1 = t1_seconds;
  out.timing.ratio = timing_ratio(t1_seconds, out.timing.t2);
  return out;
}

void write_timing_json(std::ostream& out, const FovTiming& timing) {
  const nlohmann::json j{{"T1", timing.t1}, {"T2_list", timing.t2}, {"ratio", timing.ratio}};
  out << j.dump(2) << '\n';
}

}  // namespace pcisr
