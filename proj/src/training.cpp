#include "pcisr/training.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>

#include "pcisr/ops.hpp"
#include "pcisr/optim.hpp"
#include "pcisr/recon.hpp"

namespace pcisr {

std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> parts) {
  std::vector<std::uint32_t> words{static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(base >> 32)};
  for (auto p : parts) {
    words.push_back(static_cast<std::uint32_t>(p));
    words.push_back(static_cast<std::uint32_t>(p >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

namespace {

class Canvas {
 public:
  Canvas(Extent2 size, double background) : size_(size), px_(size.count(), background) {}

  void set(long r, long c, double v) {
    if (r < 0 || c < 0 || r >= static_cast<long>(size_.rows) || c >= static_cast<long>(size_.cols)) return;
    px_[static_cast<std::size_t>(r) * size_.cols + static_cast<std::size_t>(c)] = v;
  }
  Tensor finish() && {
    for (auto& v : px_) v = std::clamp(v, 0.0, 1.0);
    return Tensor(Shape{size_.rows, size_.cols}, std::move(px_));
  }
  Extent2 size() const { return size_; }

 private:
  Extent2 size_;
  std::vector<double> px_;
};

using Rng = std::mt19937_64;

long uniform_int(Rng& rng, long lo, long hi) { return std::uniform_int_distribution<long>(lo, hi)(rng); }
double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

void draw_rect(Canvas& cv, Rng& rng) {
  const long rows = static_cast<long>(cv.size().rows), cols = static_cast<long>(cv.size().cols);
  const long h = uniform_int(rng, 2, std::max(2L, rows / 2)), w = uniform_int(rng, 2, std::max(2L, cols / 2));
  const long r0 = uniform_int(rng, -h / 2, rows - 1), c0 = uniform_int(rng, -w / 2, cols - 1);
  const double v = uniform(rng, 0.3, 1.0);
  for (long r = r0; r < r0 + h; ++r)
    for (long c = c0; c < c0 + w; ++c) cv.set(r, c, v);
}

void draw_disk(Canvas& cv, Rng& rng) {
  const long rows = static_cast<long>(cv.size().rows), cols = static_cast<long>(cv.size().cols);
  const double radius = uniform(rng, 1.5, std::max(2.0, std::min(rows, cols) / 4.0));
  const double cy = uniform(rng, 0.0, static_cast<double>(rows)), cx = uniform(rng, 0.0, static_cast<double>(cols));
  const double v = uniform(rng, 0.3, 1.0);
  for (long r = 0; r < rows; ++r)
    for (long c = 0; c < cols; ++c) {
      const double dy = r + 0.5 - cy, dx = c + 0.5 - cx;
      if (dy * dy + dx * dx <= radius * radius) cv.set(r, c, v);
    }
}

void draw_grating(Canvas& cv, Rng& rng) {
  const long rows = static_cast<long>(cv.size().rows), cols = static_cast<long>(cv.size().cols);
  const long period = uniform_int(rng, 2, 8);
  const bool vertical = uniform_int(rng, 0, 1) == 1;
  const long h = uniform_int(rng, std::min(rows, 2 * period), std::max(std::min(rows, 2 * period), rows / 2));
  const long w = uniform_int(rng, std::min(cols, 2 * period), std::max(std::min(cols, 2 * period), cols / 2));
  const long r0 = uniform_int(rng, 0, rows - h), c0 = uniform_int(rng, 0, cols - w);
  const double hi = uniform(rng, 0.6, 1.0), lo = uniform(rng, 0.0, 0.2);
  for (long r = 0; r < h; ++r)
    for (long c = 0; c < w; ++c) {
      const long t = vertical ? c : r;
      cv.set(r0 + r, c0 + c, 2 * (t % period) < period ? hi : lo);
    }
}

// A few connected strokes resembling a character.
void draw_glyph(Canvas& cv, Rng& rng) {
  const long rows = static_cast<long>(cv.size().rows), cols = static_cast<long>(cv.size().cols);
  const long span = std::max(4L, std::min(rows, cols) / 3);
  double y = uniform(rng, 0.0, static_cast<double>(rows - 1)), x = uniform(rng, 0.0, static_cast<double>(cols - 1));
  const double v = uniform(rng, 0.5, 1.0);
  const long thickness = uniform_int(rng, 1, 2);
  const long strokes = uniform_int(rng, 2, 4);
  for (long s = 0; s < strokes; ++s) {
    const double ty = std::clamp(y + uniform(rng, -span, span), 0.0, static_cast<double>(rows - 1));
    const double tx = std::clamp(x + uniform(rng, -span, span), 0.0, static_cast<double>(cols - 1));
    const long steps = static_cast<long>(std::ceil(std::max(std::abs(ty - y), std::abs(tx - x)))) + 1;
    for (long k = 0; k <= steps; ++k) {
      const double f = static_cast<double>(k) / static_cast<double>(steps);
      const long r = std::lround(y + f * (ty - y)), c = std::lround(x + f * (tx - x));
      for (long a = 0; a < thickness; ++a)
        for (long b = 0; b < thickness; ++b) cv.set(r + a, c + b, v);
    }
    y = ty;
    x = tx;
  }
}

Tensor synthetic_image(Extent2 size, Rng& rng) {
  Canvas cv(size, uniform(rng, 0.0, 0.3));
  const long shapes = uniform_int(rng, 2, 6);
  for (long s = 0; s < shapes; ++s) {
    switch (uniform_int(rng, 0, 3)) {
      case 0: draw_rect(cv, rng); break;
      case 1: draw_disk(cv, rng); break;
      case 2: draw_grating(cv, rng); break;
      default: draw_glyph(cv, rng); break;
    }
  }
  return std::move(cv).finish();
}

}  // namespace

std::vector<Tensor> make_synthetic_dataset(std::size_t n, Extent2 size, std::uint64_t seed) {
  if (n == 0) throw ConfigError("dataset size must be at least 1");
  if (size.rows < 4 || size.cols < 4) throw ConfigError("dataset images must be at least 4 x 4");
  std::vector<Tensor> images;
  images.reserve(n);
  std::size_t first = 0;
  if (size.rows >= 32 && size.cols >= 32) {
    images.push_back(render_chart(size));
    first = 1;
  }
  for (std::size_t i = first; i < n; ++i) {
    Rng rng(derive_seed(seed, {i}));
    images.push_back(synthetic_image(size, rng));
  }
  return images;
}

DatasetSplit split_dataset(const std::vector<Tensor>& images, std::uint64_t seed, double train_fraction,
                           double validation_fraction) {
  if (images.empty()) throw ConfigError("cannot split an empty dataset");
  if (!(train_fraction >= 0.0 && validation_fraction >= 0.0 && train_fraction + validation_fraction <= 1.0)) {
    throw ConfigError("split fractions must be nonnegative and sum to at most 1");
  }
  std::vector<std::size_t> order(images.size() - 1);
  std::iota(order.begin(), order.end(), std::size_t{1});
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n = static_cast<double>(images.size());
  const auto n_train = std::min(order.size(), static_cast<std::size_t>(std::floor(train_fraction * n)));
  const auto n_val = std::min(order.size() - n_train, static_cast<std::size_t>(std::floor(validation_fraction * n)));
  DatasetSplit split;
  split.test_ids.push_back(0);
  for (std::size_t k = 0; k < order.size(); ++k) {
    auto& ids = k < n_train ? split.train_ids : k < n_train + n_val ? split.validation_ids : split.test_ids;
    ids.push_back(order[k]);
  }
  for (auto i : split.train_ids) split.train.push_back(images[i]);
  for (auto i : split.validation_ids) split.validation.push_back(images[i]);
  for (auto i : split.test_ids) split.test.push_back(images[i]);
  return split;
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be nonnegative");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (n_masks < 1) throw ConfigError("n_masks must be at least 1");
  if (mask_element.count() == 0) throw ConfigError("mask element must be non-empty");
  NoiseConfig{noise_sigma, squared_convention, 0}.validate();
  unet.validate();
}

Tensor reconstruct_net(const UNetParams& params, const MaskSet& masks, const SparseOTF& otf, const Tensor& frames) {
  return unet_forward(params, gi_reconstruct(otf, masks.realize(otf.dmd_shape()), frames));
}

Tensor pipeline_loss(const UNetParams& params, const MaskSet& masks, const SparseOTF& otf, const Tensor& object,
                     const NoiseConfig& noise) {
  const Tensor m = masks.realize(otf.dmd_shape());
  const Tensor frames = pci_measure(otf, m, object, noise);
  return squared_error(unet_forward(params, gi_reconstruct(otf, m, frames)), object);
}

double batch_loss(const UNetParams& params, const MaskSet& masks, const SparseOTF& otf,
                  const std::vector<Tensor>& batch, double sigma, bool squared_convention, std::uint64_t noise_seed) {
  if (batch.empty()) throw ConfigError("empty batch");
  NoGradScope no_grad;
  double total = 0.0;
  for (std::size_t k = 0; k < batch.size(); ++k) {
    total += pipeline_loss(params, masks, otf, batch[k], NoiseConfig{sigma, squared_convention, noise_seed + k}).item();
  }
  return total / static_cast<double>(batch.size());
}

namespace {

void check_images(const std::vector<Tensor>& images, Extent2 dmd, const char* what) {
  for (const auto& img : images) {
    if (img.shape() != Shape{dmd.rows, dmd.cols}) {
      throw ShapeError(std::string(what) + " image " + shape_string(img.shape()) + " does not match the OTF DMD shape");
    }
  }
}

}  // namespace

TrainResult train(const std::vector<Tensor>& train_set, const std::vector<Tensor>& validation_set,
                  const SparseOTF& otf, const TrainConfig& cfg, MaskSet masks, UNetParams params) {
  cfg.validate();
  if (train_set.empty()) throw ConfigError("training set is empty");
  const Extent2 dmd = otf.dmd_shape();
  check_images(train_set, dmd, "training");
  check_images(validation_set, dmd, "validation");
  const auto start = std::chrono::steady_clock::now();

  masks = masks.clone();
  masks.logits().set_requires_grad(true);
  params = params.clone(true);
  std::vector<Tensor> trainable{masks.logits()};
  for (const auto& t : params.tensors()) trainable.push_back(t);
  Adam adam(trainable, AdamConfig{cfg.learning_rate});

  TrainResult result{masks.clone(), params.clone(true), {}};
  double best_psnr = -std::numeric_limits<double>::infinity();
  const MetricConfig metric;
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const double inv_batch = 1.0 / static_cast<double>(std::min(cfg.batch_size, train_set.size()));

  bool done = false;
  for (std::size_t epoch = 1; epoch <= cfg.epochs && !done; ++epoch) {
    Rng shuffle_rng(derive_seed(cfg.seed, {1, epoch}));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_total = 0.0;
    std::size_t seen = 0;
    for (std::size_t b = 0; b * cfg.batch_size < order.size(); ++b) {
      const std::size_t end = std::min(order.size(), (b + 1) * cfg.batch_size);
      adam.zero_grad();
      for (std::size_t k = b * cfg.batch_size; k < end; ++k) {
        const NoiseConfig noise{cfg.noise_sigma, cfg.squared_convention, derive_seed(cfg.seed, {2, epoch, b, k})};
        Tape tape;
        double value = 0.0;
        try {
          TapeScope scope(tape);
          const Tensor loss = pipeline_loss(params, masks, otf, train_set[order[k]], noise);
          value = loss.item();
          tape.backward(mul(loss, inv_batch));
        } catch (const NumericError& e) {
          throw NumericError("training diverged at epoch " + std::to_string(epoch) + ": " + e.what());
        }
        if (!std::isfinite(value)) throw NumericError("training loss is NaN at epoch " + std::to_string(epoch));
        epoch_total += value;
        ++seen;
      }
      adam.step();
      ++result.report.steps;
      if (cfg.max_steps > 0 && result.report.steps >= cfg.max_steps) {
        done = true;
        break;
      }
    }
    result.report.epoch_loss.push_back(epoch_total / static_cast<double>(seen));

    double vp = std::numeric_limits<double>::quiet_NaN(), vs = vp;
    if (!validation_set.empty()) {
      NoGradScope no_grad;
      const Tensor binary = masks.binary(dmd);
      double sp = 0.0, ss = 0.0;
      for (std::size_t i = 0; i < validation_set.size(); ++i) {
        const NoiseConfig noise{cfg.noise_sigma, cfg.squared_convention, derive_seed(cfg.seed, {3, i})};
        const Tensor frames = pci_measure(otf, binary, validation_set[i], noise);
        const Tensor out = unet_forward(params, gi_reconstruct(otf, binary, frames));
        sp += psnr(validation_set[i], out, metric);
        ss += ssim(validation_set[i], out, metric);
      }
      vp = sp / static_cast<double>(validation_set.size());
      vs = ss / static_cast<double>(validation_set.size());
    }
    result.report.val_psnr.push_back(vp);
    result.report.val_ssim.push_back(vs);
    const bool better = !cfg.select_best || validation_set.empty() || vp > best_psnr;
    if (better) {
      if (!validation_set.empty()) best_psnr = vp;
      result.report.best_epoch = epoch;
      result.masks = masks.clone();
      result.params = params.clone(true);
    }
  }
  result.report.t1_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

TrainResult train(const std::vector<Tensor>& train_set, const std::vector<Tensor>& validation_set,
                  const SparseOTF& otf, const TrainConfig& cfg) {
  cfg.validate();
  return train(train_set, validation_set, otf, cfg,
               MaskSet::random(cfg.n_masks, cfg.mask_element, derive_seed(cfg.seed, {10})),
               init_params(derive_seed(cfg.seed, {11}), cfg.unet));
}

void write_report_csv(std::ostream& out, const TrainReport& report) {
  out << "epoch,train_loss,val_psnr,val_ssim\n";
  const auto old_precision = out.precision(10);
  for (std::size_t e = 0; e < report.epoch_loss.size(); ++e) {
    out << e + 1 << ',' << report.epoch_loss[e] << ',' << report.val_psnr[e] << ',' << report.val_ssim[e] << '\n';
  }
  out.precision(old_precision);
}

}  // namespace pcisr
