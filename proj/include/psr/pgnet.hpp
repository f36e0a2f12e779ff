#pragma once

#include <json.hpp>

#include "psr/checkpoint.hpp"
#include "psr/grid.hpp"
#include "psr/layers.hpp"
#include "psr/stnet.hpp"

namespace psr {

struct PgnetConfig {
  int C_G = 64;            // generator base channels
  int F = 9;               // synthesized frames, reference included
  double alpha = 1e-3;     // MSE weight: L = gan_weight * L_C + alpha * L_MSE
  double gan_weight = 1.0; // 0 disables the adversarial term (pure MSE mode)
  int lstm_context = 8;    // slots preceding t fed to the LSTM
  int embed_dim = 16;
  int disc_layers = 3;     // res blocks in the discriminator trunk
  int disc_stride = 4;     // S_S, applied in each block's first conv
  int C_D = 1;             // discriminator base channels
  int poi_channels = 14;
  int n = 4;               // block factor for the normalization layer
  int time_slots = kSlotsPerDay;
  int gan_horizon = 2;     // max flow-accumulation steps for fake frames
  int fine_h = 0, fine_w = 0;  // discriminator input dims (set from data)

  // Frames besides the reference: forward count and backward count.
  int forward_frames() const { return (F - 1) / 2; }
  int backward_frames() const { return F - 1 - forward_frames(); }
  void validate() const;

  nlohmann::json to_json() const;
  static PgnetConfig from_json(const nlohmann::json& j);
};

struct PgGeneratorParams {
  Tensor embed_table;  // [time_slots, embed_dim]
  LstmParams lstm;     // embed_dim -> C_G
  Conv2dParams f1_conv;          // 5x5, poi_channels -> C_G
  ResBlockParams f1_rb1, f1_rb2;
  ResBlockParams f2_rb1, f2_rb2, f2_rb3, f2_rb4;
  Conv2dParams f2_conv;          // 5x5, C_G -> 1

  NamedParams trainable();
};

struct PgDiscriminatorParams {
  Conv2dParams stem;                   // 3x3, 1 -> C_D
  std::vector<ResBlockParams> blocks;  // channel-doubling, strided
  LinearParams fc;
  int64_t flat_dim = 0;

  NamedParams trainable();
};

struct PgnetParams {
  PgGeneratorParams gen;
  PgDiscriminatorParams disc;

  NamedParams state();  // gen + disc (no extra buffers)
};

PgnetParams make_pgnet(const PgnetConfig& cfg, Rng& rng);

// Crowd flow between consecutive slots: delta[t] = series[t+1] - series[t].
Tensor flow_targets(const Tensor& series);  // [T, nH, nW] -> [T-1, nH, nW]

// Time-conditioned POI-to-flow generator for the slot-of-day `slot`.
Tensor pg_generator_forward(int slot, const Tensor& poi, PgGeneratorParams& p,
                            const PgnetConfig& cfg);  // -> [1, nH, nW]

// Whole-frame realness score per batch element, in (0, 1).
Tensor pg_discriminator_forward(const Tensor& fine, PgDiscriminatorParams& p,
                                const PgnetConfig& cfg);  // [B,1,nH,nW] -> [B]

// Accumulates flows onto the reference in both directions, normalizing every
// frame against the real coarse observation of its absolute slot.
// coarse_frames are time-ascending, one [1, H, W] per output frame; the
// reference sits at index backward_count. Output: [F, nH, nW] time-ascending.
Tensor synthesize_series(const Tensor& ref, const std::vector<Tensor>& flows_forward,
                         const std::vector<Tensor>& flows_backward,
                         const std::vector<Tensor>& coarse_frames, int n);

struct PgLossRecord {
  double total = 0, gan = 0, mse = 0;
};

struct PgTrainResult {
  double best_val_flow_mse = 0;
  int best_step = 0;
  std::vector<PgLossRecord> losses;
  std::vector<double> disc_scores_real;  // last-eval scores on held-out real frames
};

// Alternating GAN training on source-domain data. Leaves best-validation
// generator weights in `params`.
PgTrainResult train_pgnet(PgnetParams& params, const PgnetConfig& cfg, const Tensor& fine_series,
                          const PoiMap& poi, const TrainConfig& tc);

// Generates F - 1 flows around the reference slot, synthesizes frames, and
// pairs each with its real coarse window.
std::vector<WindowSample> augment_target(const ReferenceSnapshot& ref, const PoiMap& poi,
                                         const Tensor& target_coarse, PgGeneratorParams& gen,
                                         const PgnetConfig& cfg, int t_window, int F);

Checkpoint pgnet_checkpoint(PgnetParams& params, const PgnetConfig& cfg,
                            const nlohmann::json& extra);
PgnetParams pgnet_from_checkpoint(const Checkpoint& ck, PgnetConfig* cfg_out = nullptr);

}  // namespace psr
