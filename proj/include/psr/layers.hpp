#pragma once

#include <optional>
#include <vector>

#include "psr/tensor.hpp"

namespace psr {

// Parameter collection in a stable order; the same order is used by
// optimizers and checkpoints.
using NamedParams = std::vector<std::pair<std::string, Tensor>>;

struct Conv2dParams {
  Tensor weight;  // [C_out, C_in, k, k]
  Tensor bias;    // [C_out]
  int stride = 1;
  int pad = 0;
};

Conv2dParams make_conv2d(int c_in, int c_out, int k, int stride, int pad, Rng& rng);

// Cross-correlation with zero padding (no kernel flip).
Tensor conv2d(const Tensor& x, const Conv2dParams& p);

struct Conv3dTemporalParams {
  Tensor weight;  // [C_out, C_in, kT, ks, ks]
  Tensor bias;    // [C_out]
  int stride_t = 1;  // temporal kernel == temporal stride (non-overlapping merge)
  int pad_s = 0;
};

Conv3dTemporalParams make_conv3d_temporal(int c_in, int c_out, int stride_t, int k_spatial,
                                          Rng& rng);

// x: [B, C_in, T, H, W] -> [B, C_out, T/stride_t, H, W]; spatial dims kept by padding.
Tensor conv3d_temporal(const Tensor& x, const Conv3dTemporalParams& p);

struct BatchNormParams {
  Tensor gamma;  // [C]
  Tensor beta;   // [C]
  Tensor running_mean, running_var;  // [C], state buffers (not trained)
  double momentum = 0.1;
  double eps = 1e-5;
};

BatchNormParams make_batch_norm(int channels);

// Train mode normalizes with batch statistics (and, when update_running is
// set, folds them into the running estimates); eval mode uses running stats.
Tensor batch_norm2d(const Tensor& x, BatchNormParams& p, bool training, bool update_running = true);

// [B, r^2*C, H, W] -> [B, C, rH, rW]; out[b,c,r*h+i,r*w+j] = in[b, c*r^2+i*r+j, h, w].
Tensor pixel_shuffle(const Tensor& x, int r);

// Non-overlapping n*n block sum: [B, C, nH, nW] -> [B, C, H, W].
Tensor sum_pool2d(const Tensor& x, int n);

// Repeat each cell n*n times: [B, C, H, W] -> [B, C, nH, nW].
Tensor upsample_nearest2d(const Tensor& x, int n);

struct DenseBlockParams {
  Conv2dParams conv1, conv2;  // both 3x3
  BatchNormParams bn;         // after conv1
};

DenseBlockParams make_dense_block(int c_in, int width, Rng& rng);

// concat(inputs) -> conv3x3 -> BN -> ReLU -> conv3x3 -> ReLU.
Tensor dense_block_forward(const std::vector<Tensor>& inputs, DenseBlockParams& p, bool training,
                           bool update_running = true);

struct LstmParams {
  int input_dim = 0;
  int hidden_dim = 0;
  // Gate order: input, forget, output, candidate.
  Tensor wx_i, wh_i, b_i;
  Tensor wx_f, wh_f, b_f;
  Tensor wx_o, wh_o, b_o;
  Tensor wx_g, wh_g, b_g;
};

LstmParams make_lstm(int input_dim, int hidden_dim, Rng& rng);

// Runs the full recursion from zero state; returns the final hidden state [hidden_dim].
Tensor lstm_sequence(const Tensor& embeds, const LstmParams& p);

// Row `index` of table [V, E]; gradient scatters into that row only.
Tensor embedding_lookup(const Tensor& table, int64_t index);

// Sum-constrained disaggregation: raw weights are ReLU'd, floored at eps,
// normalized per aligned n*n block, then scaled by the upsampled coarse map.
// sum_pool2d(result, n) reproduces `coarse` to ~1e-6 relative.
Tensor n2_normalize(const Tensor& raw, const Tensor& coarse, int n);

constexpr double kN2WeightFloor = 1e-9;

enum class LossKind { Mse, Bce };

Tensor loss(LossKind kind, const Tensor& pred, const Tensor& target);
Tensor mse_loss(const Tensor& pred, const Tensor& target);
// Predictions clamped to [1e-7, 1 - 1e-7].
Tensor bce_loss(const Tensor& pred, const Tensor& target);

struct LinearParams {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
};

LinearParams make_linear(int in_dim, int out_dim, Rng& rng);
Tensor linear(const Tensor& x, const LinearParams& p);  // [B, in] -> [B, out]

// Two 3x3 convs with a skip; the first conv carries the stride, and the skip
// becomes a strided 1x1 projection whenever stride or channel count changes.
struct ResBlockParams {
  Conv2dParams conv1, conv2;
  std::optional<Conv2dParams> proj;
};

ResBlockParams make_res_block(int c_in, int c_out, int stride, Rng& rng);
Tensor res_block(const Tensor& x, const ResBlockParams& p);

// Parameter registration. collect() gathers trainable tensors;
// collect_state() additionally gathers non-trained buffers (BN running stats)
// so checkpoints capture the full module state.
void collect(Conv2dParams& p, const std::string& prefix, NamedParams& out);
void collect(Conv3dTemporalParams& p, const std::string& prefix, NamedParams& out);
void collect(BatchNormParams& p, const std::string& prefix, NamedParams& out);
void collect(DenseBlockParams& p, const std::string& prefix, NamedParams& out);
void collect(LstmParams& p, const std::string& prefix, NamedParams& out);
void collect(LinearParams& p, const std::string& prefix, NamedParams& out);
void collect(ResBlockParams& p, const std::string& prefix, NamedParams& out);

void collect_state(BatchNormParams& p, const std::string& prefix, NamedParams& out);
void collect_state(DenseBlockParams& p, const std::string& prefix, NamedParams& out);

std::vector<Tensor> tensors_of(const NamedParams& params);
int64_t param_count(const NamedParams& params);

}  // namespace psr
