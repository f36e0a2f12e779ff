#include "psr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

namespace psr {

MetricReport evaluate(const Tensor& pred, const Tensor& truth) {
  if (pred.shape() != truth.shape()) {
    throw ShapeError("evaluate: prediction " + shape_str(pred.shape()) + " vs truth " +
                     shape_str(truth.shape()));
  }
  const auto& p = pred.values();
  const auto& t = truth.values();
  const int64_t n = pred.numel();

  MetricReport r;
  r.n_slots = pred.dim(0);
  r.n_cells = n / pred.dim(0);

  double se = 0, ae = 0, ape = 0, t_sum = 0;
  int64_t positive = 0;
  for (int64_t i = 0; i < n; ++i) {
    if (t[static_cast<size_t>(i)] < 0) throw DataError("evaluate: ground truth must be >= 0");
    const double d = p[static_cast<size_t>(i)] - t[static_cast<size_t>(i)];
    se += d * d;
    ae += std::abs(d);
    t_sum += t[static_cast<size_t>(i)];
    if (t[static_cast<size_t>(i)] > 0) {
      ape += std::abs(d) / t[static_cast<size_t>(i)];
      ++positive;
    }
  }
  r.rmse = std::sqrt(se / static_cast<double>(n));
  r.mae = ae / static_cast<double>(n);
  const double t_mean = t_sum / static_cast<double>(n);
  r.nrmse = t_mean > 0 ? r.rmse / t_mean : 0.0;
  if (positive > 0) {
    r.mape = ape / static_cast<double>(positive);
    r.mape_defined = true;
  }

  double p_mean = 0;
  for (int64_t i = 0; i < n; ++i) p_mean += p[static_cast<size_t>(i)];
  p_mean /= static_cast<double>(n);
  double cov = 0, vp = 0, vt = 0;
  for (int64_t i = 0; i < n; ++i) {
    const double dp = p[static_cast<size_t>(i)] - p_mean;
    const double dt = t[static_cast<size_t>(i)] - t_mean;
    cov += dp * dt;
    vp += dp * dp;
    vt += dt * dt;
  }
  r.corr = (vp > 0 && vt > 0) ? cov / std::sqrt(vp * vt) : 0.0;
  return r;
}

double cubic_kernel(double d) {
  constexpr double a = -0.5;  // Catmull-Rom
  d = std::abs(d);
  if (d <= 1.0) return ((a + 2.0) * d - (a + 3.0)) * d * d + 1.0;
  if (d < 2.0) return ((a * d - 5.0 * a) * d + 8.0 * a) * d - 4.0 * a;
  return 0.0;
}

namespace {

double sample_clamped(const std::vector<double>& img, int64_t H, int64_t W, int64_t h, int64_t w) {
  h = std::clamp<int64_t>(h, 0, H - 1);
  w = std::clamp<int64_t>(w, 0, W - 1);
  return img[static_cast<size_t>(h * W + w)];
}

}  // namespace

Tensor bicubic_upsample(const Tensor& coarse, int n) {
  if (coarse.rank() != 3 || coarse.dim(0) != 1) throw ShapeError("bicubic expects [1, H, W]");
  const int64_t H = coarse.dim(1), W = coarse.dim(2);
  const bool cubic = H >= 4 && W >= 4;
  if (!cubic) {
    std::cerr << "bicubic_upsample: grid " << H << "x" << W
              << " too small for cubic support; falling back to bilinear\n";
  }

  // Interpolate density so a constant coarse field splits uniformly.
  std::vector<double> density(static_cast<size_t>(H * W));
  const double inv_n2 = 1.0 / (static_cast<double>(n) * n);
  for (int64_t i = 0; i < H * W; ++i)
    density[static_cast<size_t>(i)] = coarse.values()[static_cast<size_t>(i)] * inv_n2;

  Tensor out = Tensor::zeros({1, H * n, W * n});
  auto& ov = out.values();
  const int64_t nW = W * n;
  for (int64_t fh = 0; fh < H * n; ++fh) {
    const double u = (static_cast<double>(fh) + 0.5) / n - 0.5;
    const int64_t h0 = static_cast<int64_t>(std::floor(u));
    const double fu = u - static_cast<double>(h0);
    for (int64_t fw = 0; fw < W * n; ++fw) {
      const double v = (static_cast<double>(fw) + 0.5) / n - 0.5;
      const int64_t w0 = static_cast<int64_t>(std::floor(v));
      const double fv = v - static_cast<double>(w0);
      double acc = 0.0;
      if (cubic) {
        for (int dh = -1; dh <= 2; ++dh) {
          const double wy = cubic_kernel(static_cast<double>(dh) - fu);
          if (wy == 0.0) continue;
          for (int dw = -1; dw <= 2; ++dw) {
            const double wx = cubic_kernel(static_cast<double>(dw) - fv);
            if (wx == 0.0) continue;
            acc += wy * wx * sample_clamped(density, H, W, h0 + dh, w0 + dw);
          }
        }
      } else {
        for (int dh = 0; dh <= 1; ++dh) {
          const double wy = dh == 0 ? 1.0 - fu : fu;
          for (int dw = 0; dw <= 1; ++dw) {
            const double wx = dw == 0 ? 1.0 - fv : fv;
            acc += wy * wx * sample_clamped(density, H, W, h0 + dh, w0 + dw);
          }
        }
      }
      ov[static_cast<size_t>(fh * nW + fw)] = std::max(0.0, acc);
    }
  }
  return out;
}

}  // namespace psr
