#pragma once

#include "psr/tensor.hpp"

namespace psr {

struct MetricReport {
  double rmse = 0;
  double nrmse = 0;
  double mae = 0;
  double mape = 0;       // masked to cells with truth > 0
  bool mape_defined = false;
  double corr = 0;       // Pearson; 0 when either side is constant
  int64_t n_cells = 0;
  int64_t n_slots = 0;
};

// Metrics over all cells of all slots, flattened. Shapes must match and the
// truth must be nonnegative.
MetricReport evaluate(const Tensor& pred, const Tensor& truth);

// Catmull-Rom bicubic interpolation of the per-cell density (coarse / n^2),
// clamped at zero. Grids smaller than 4x4 fall back to bilinear.
Tensor bicubic_upsample(const Tensor& coarse, int n);  // [1,H,W] -> [1,nH,nW]

// Catmull-Rom kernel value at distance d (support |d| < 2).
double cubic_kernel(double d);

}  // namespace psr
