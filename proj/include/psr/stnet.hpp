#pragma once

#include <json.hpp>

#include "psr/checkpoint.hpp"
#include "psr/grid.hpp"
#include "psr/layers.hpp"
#include "psr/metrics.hpp"

namespace psr {

struct StnetConfig {
  int T = 48;    // input sequence length
  int T_S = 6;   // temporal merge stride (3d conv kernel == stride)
  int C_B = 64;  // base channels
  int C_T = 16;  // temporal conv channels
  int n = 4;     // upscale factor, one of {2, 4, 8}
  int block_width = 0;  // dense block width; 0 means C_B

  int layers() const { return T / T_S; }
  int width() const { return block_width > 0 ? block_width : C_B; }
  int up_stages() const;
  void validate() const;

  nlohmann::json to_json() const;
  static StnetConfig from_json(const nlohmann::json& j);
};

struct UpsampleStage {
  Conv2dParams conv;  // 3x3, C_B -> 4*C_B (feeds pixel shuffle x2)
  BatchNormParams bn;
};

struct StnetParams {
  // Preliminary extraction unit (two 5x5 convs).
  Conv2dParams pre1, pre2;
  // TNet: temporal merge + shared per-period extraction unit.
  Conv3dTemporalParams merge3d;
  Conv2dParams tunit1, tunit2;
  // Densely connected conv blocks; block i also receives temporal feature i.
  std::vector<DenseBlockParams> blocks;
  Conv2dParams fuse;  // 1x1 over [preliminary + all block outputs]
  std::vector<UpsampleStage> up;
  Conv2dParams head;  // 3x3 -> 1 channel

  NamedParams trainable();
  NamedParams state();  // trainable + BN running buffers
  // Feature Extractor / Predictor split at the 1x1 fusion conv output.
  NamedParams extractor_trainable();
  NamedParams predictor_trainable();
  int64_t count() { return param_count(trainable()); }
};

StnetParams make_stnet(const StnetConfig& cfg, Rng& rng);

struct ForwardMode {
  bool training = false;
  bool update_running = true;
};

// TNet: merge T slots into L = T/T_S frames, then map each through the shared
// extraction unit. Outputs are ordered earliest first, each [B, C_B, H, W].
std::vector<Tensor> tnet_features(const Tensor& coarse_seq, StnetParams& p,
                                  const StnetConfig& cfg, ForwardMode mode = {});

// Front of the network up to the 1x1 fusion conv: the Feature Extractor /
// Predictor boundary. `temporal` false feeds zero maps in place of TNet
// features (the SNet ablation).
Tensor extract_features(const Tensor& coarse_seq, StnetParams& p, const StnetConfig& cfg,
                        ForwardMode mode = {}, bool temporal = true);

// Upsampling stages + head + sum-constrained normalization against the final
// coarse frame.
Tensor predict_from_features(const Tensor& features, const Tensor& coarse_last, StnetParams& p,
                             const StnetConfig& cfg, ForwardMode mode = {});

// Full pipeline; optionally reports the fused feature map.
Tensor stnet_forward(const Tensor& coarse_seq, StnetParams& p, const StnetConfig& cfg,
                     ForwardMode mode = {}, Tensor* features_out = nullptr);

// Spatial-only ablation: last coarse frame in, zero temporal features.
Tensor snet_forward(const Tensor& coarse_last, StnetParams& p, const StnetConfig& cfg,
                    ForwardMode mode = {});

Tensor last_frame(const Tensor& coarse_seq);  // [B,T,H,W] -> [B,1,H,W]

// Batch assembly from window samples.
Tensor stack_coarse(const std::vector<WindowSample>& samples, const std::vector<int64_t>& idx);
Tensor stack_fine(const std::vector<WindowSample>& samples, const std::vector<int64_t>& idx);

struct TrainConfig {
  int batch = 4;
  int max_steps = 400;
  int eval_every = 25;
  int patience = 10;  // evals without val improvement before stopping
  double lr = 1e-3;
  uint64_t seed = 1;

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct TrainResult {
  double best_val_rmse = 0;
  int best_step = 0;
  std::vector<double> losses;
};

// Minimizes MSE with Adam, early-stops on validation RMSE, and leaves the
// best-validation weights in `params`. `temporal` false trains the SNet
// ablation (last frame only).
TrainResult train_stnet(StnetParams& params, const StnetConfig& cfg,
                        const std::vector<WindowSample>& samples, const DatasetSplit& split,
                        const TrainConfig& tc, bool temporal = true);

// Validation / test RMSE of the current weights (eval mode).
MetricReport evaluate_stnet(StnetParams& params, const StnetConfig& cfg,
                            const std::vector<WindowSample>& samples,
                            const std::vector<int64_t>& idx, bool temporal = true);

// Stacked eval-mode predictions [S, nH, nW] over the given sample indices.
Tensor predict_stnet(StnetParams& params, const StnetConfig& cfg,
                     const std::vector<WindowSample>& samples, const std::vector<int64_t>& idx,
                     bool temporal = true);

Checkpoint stnet_checkpoint(StnetParams& params, const StnetConfig& cfg,
                            const nlohmann::json& extra);
StnetParams stnet_from_checkpoint(const Checkpoint& ck, StnetConfig* cfg_out = nullptr);

}  // namespace psr
