#include "pcisr/recon.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "pcisr/ops.hpp"

namespace pcisr {

namespace {

void check_gi_shapes(const SparseOTF& otf, const Tensor& masks, const Tensor& frames) {
  if (masks.ndim() != 3 || frames.ndim() != 3) {
    throw ShapeError("GI expects masks [N x P x Q] and frames [N x p x q]");
  }
  if (masks.extent(0) != frames.extent(0)) {
    throw ShapeError("GI: " + std::to_string(masks.extent(0)) + " masks but " + std::to_string(frames.extent(0)) +
                     " frames");
  }
  if (Extent2{masks.extent(1), masks.extent(2)} != otf.dmd_shape() ||
      Extent2{frames.extent(1), frames.extent(2)} != otf.detector_shape()) {
    throw ShapeError("GI: masks " + shape_string(masks.shape()) + " / frames " + shape_string(frames.shape()) +
                     " do not match the OTF");
  }
}

}  // namespace

Tensor gi_reconstruct(const SparseOTF& otf, const Tensor& masks, const Tensor& frames) {
  check_gi_shapes(otf, masks, frames);
  const double norm = 1.0 / static_cast<double>(otf.rows());
  return mul(sum_leading(mul(masks, otf_apply_transpose(otf, frames))), norm);
}

Tensor gi_reconstruct(const SparseOTF& otf, const MaskSet& masks, const MeasurementSet& y) {
  return gi_reconstruct(otf, masks.realize(otf.dmd_shape()), y.frames);
}

Tensor gi_reconstruct_centered(const SparseOTF& otf, const Tensor& masks, const Tensor& frames) {
  check_gi_shapes(otf, masks, frames);
  const std::size_t n = frames.extent(0);
  if (n < 2) throw ShapeError("centered GI needs at least two masks");
  const Tensor mean_frame = div(sum_leading(frames), static_cast<double>(n));
  return gi_reconstruct(otf, masks, sub(frames, expand_leading(mean_frame, n)));
}

Tensor gi_reconstruct_centered(const SparseOTF& otf, const MaskSet& masks, const MeasurementSet& y) {
  return gi_reconstruct_centered(otf, masks.realize(otf.dmd_shape()), y.frames);
}

MeasurementOperator::MeasurementOperator(SparseOTF otf, Tensor masks)
    : otf_(std::move(otf)), masks_(std::move(masks)), n_(0) {
  if (masks_.ndim() != 3 || Extent2{masks_.extent(1), masks_.extent(2)} != otf_.dmd_shape()) {
    throw ShapeError("measurement operator: masks " + shape_string(masks_.shape()) + " do not match the OTF");
  }
  n_ = masks_.extent(0);
}

void MeasurementOperator::apply(std::span<const double> x, std::span<double> y) const {
  const std::size_t np = otf_.cols(), nd = otf_.rows();
  std::vector<double> tmp(np);
  const auto m = masks_.data();
  for (std::size_t k = 0; k < n_; ++k) {
    for (std::size_t j = 0; j < np; ++j) tmp[j] = m[k * np + j] * x[j];
    otf_.apply(tmp, y.subspan(k * nd, nd));
  }
}

void MeasurementOperator::adjoint(std::span<const double> y, std::span<double> x) const {
  const std::size_t np = otf_.cols(), nd = otf_.rows();
  std::vector<double> tmp(np);
  const auto m = masks_.data();
  std::fill(x.begin(), x.end(), 0.0);
  for (std::size_t k = 0; k < n_; ++k) {
    std::fill(tmp.begin(), tmp.end(), 0.0);
    otf_.apply_transpose_add(y.subspan(k * nd, nd), tmp);
    for (std::size_t j = 0; j < np; ++j) x[j] += m[k * np + j] * tmp[j];
  }
}

void TVConfig::validate() const {
  if (!(lambda >= 0.0)) throw ConfigError("TV lambda must be nonnegative");
  if (max_iters < 1) throw ConfigError("TV max_iters must be at least 1");
  if (!(tol > 0.0)) throw ConfigError("TV tol must be positive");
  if (!(step_size > 0.0)) throw ConfigError("TV step size must be positive");
  if (prox_iters < 1) throw ConfigError("TV prox_iters must be at least 1");
}

double total_variation(std::span<const double> x, Extent2 size) {
  double tv = 0.0;
  for (std::size_t i = 0; i < size.rows; ++i) {
    for (std::size_t j = 0; j < size.cols; ++j) {
      const double v = x[i * size.cols + j];
      const double dy = i + 1 < size.rows ? x[(i + 1) * size.cols + j] - v : 0.0;
      const double dx = j + 1 < size.cols ? x[i * size.cols + j + 1] - v : 0.0;
      tv += std::sqrt(dy * dy + dx * dx);
    }
  }
  return tv;
}

namespace {

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

// Box-constrained TV denoising, argmin_x 1/2 ||x - b||^2 + mu TV(x) with x in
// [0, 1], by fast gradient projection on the dual.
std::vector<double> tv_prox(std::span<const double> b, double mu, Extent2 size, std::size_t iters) {
  const std::size_t m = size.rows, n = size.cols, len = m * n;
  std::vector<double> x(len);
  if (mu == 0.0) {
    for (std::size_t k = 0; k < len; ++k) x[k] = clamp01(b[k]);
    return x;
  }
  std::vector<double> p(len, 0.0), q(len, 0.0), p_old(len), q_old(len), r(len, 0.0), s(len, 0.0);
  auto primal = [&](const std::vector<double>& pp, const std::vector<double>& qq) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t k = i * n + j;
        double l = pp[k] + qq[k];
        if (i > 0) l -= pp[k - n];
        if (j > 0) l -= qq[k - 1];
        x[k] = clamp01(b[k] - mu * l);
      }
    }
  };
  double t = 1.0;
  const double step = 1.0 / (8.0 * mu);
  for (std::size_t it = 0; it < iters; ++it) {
    primal(r, s);
    p_old = p;
    q_old = q;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t k = i * n + j;
        double pv = i + 1 < m ? r[k] + step * (x[k] - x[k + n]) : 0.0;
        double qv = j + 1 < n ? s[k] + step * (x[k] - x[k + 1]) : 0.0;
        const double norm = std::max(1.0, std::sqrt(pv * pv + qv * qv));
        p[k] = pv / norm;
        q[k] = qv / norm;
      }
    }
    const double t_next = (1.0 + std::sqrt(1.0 + 4.0 * t * t)) / 2.0;
    const double w = (t - 1.0) / t_next;
    for (std::size_t k = 0; k < len; ++k) {
      r[k] = p[k] + w * (p[k] - p_old[k]);
      s[k] = q[k] + w * (q[k] - q_old[k]);
    }
    t = t_next;
  }
  primal(p, q);
  return x;
}

}  // namespace

TVResult tv_reconstruct(const SparseOTF& otf, const Tensor& masks, const Tensor& frames, const TVConfig& cfg) {
  cfg.validate();
  check_gi_shapes(otf, masks, frames);
  const MeasurementOperator op(otf, masks);
  const Extent2 size = otf.dmd_shape();
  const std::size_t np = op.image_size(), nm = op.measurement_size();
  const auto y = frames.data();

  std::vector<double> x(np, 0.0), z(np), grad(np), residual(nm), trial(np);
  auto data_term = [&](std::span<const double> v) {
    op.apply(v, residual);
    double f = 0.0;
    for (std::size_t k = 0; k < nm; ++k) {
      residual[k] -= y[k];
      f += residual[k] * residual[k];
    }
    return 0.5 * f;
  };

  double f = data_term(x);
  double objective = f + cfg.lambda * total_variation(x, size);
  double step = cfg.step_size;
  TVResult result;
  result.history.push_back({0, objective, step});

  for (std::size_t it = 1; it <= cfg.max_iters; ++it) {
    op.apply(x, residual);
    for (std::size_t k = 0; k < nm; ++k) residual[k] -= y[k];
    op.adjoint(residual, grad);

    bool accepted = false;
    double fz = 0.0, objective_z = 0.0;
    while (step > 1e-14) {
      for (std::size_t k = 0; k < np; ++k) trial[k] = x[k] - step * grad[k];
      z = tv_prox(trial, step * cfg.lambda, size, cfg.prox_iters);
      fz = data_term(z);
      double lin = 0.0, dist = 0.0;
      for (std::size_t k = 0; k < np; ++k) {
        const double d = z[k] - x[k];
        lin += grad[k] * d;
        dist += d * d;
      }
      objective_z = fz + cfg.lambda * total_variation(z, size);
      if (fz <= f + lin + dist / (2.0 * step) + 1e-12 * std::abs(f) && objective_z <= objective) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      result.converged = true;  // no descent step exists at machine precision
      break;
    }
    const double decrease = objective - objective_z;
    x.swap(z);
    f = fz;
    objective = objective_z;
    result.history.push_back({it, objective, step});
    if (decrease <= cfg.tol * std::max(objective + decrease, 1e-300)) {
      result.converged = true;
      break;
    }
    step = std::min(step * 1.2, cfg.step_size);
  }
  result.image = Tensor(Shape{size.rows, size.cols}, std::move(x));
  return result;
}

TVResult tv_reconstruct(const SparseOTF& otf, const MaskSet& masks, const MeasurementSet& y, const TVConfig& cfg) {
  return tv_reconstruct(otf, masks.binary(otf.dmd_shape()), y.frames, cfg);
}

void write_history_csv(std::ostream& out, const std::vector<TVIteration>& history) {
  out << "iteration,objective,step_size\n";
  const auto old_precision = out.precision(17);
  for (const auto& h : history) out << h.iteration << ',' << h.objective << ',' << h.step_size << '\n';
  out.precision(old_precision);
}

}  // namespace pcisr
