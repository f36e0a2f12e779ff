#include "psr/stnet.hpp"

#include <cmath>
#include <limits>

namespace psr {

int StnetConfig::up_stages() const {
  switch (n) {
    case 2: return 1;
    case 4: return 2;
    case 8: return 3;
    default: throw ConfigError("upscale factor must be 2, 4 or 8");
  }
}

void StnetConfig::validate() const {
  if (T < 1 || T_S < 1 || T % T_S != 0) {
    throw ConfigError("T=" + std::to_string(T) + " must be divisible by T_S=" + std::to_string(T_S));
  }
  if (C_B < 1 || C_T < 1) throw ConfigError("channel counts must be positive");
  up_stages();
}

nlohmann::json StnetConfig::to_json() const {
  return {{"T", T},   {"T_S", T_S}, {"C_B", C_B},
          {"C_T", C_T}, {"n", n},   {"block_width", block_width}};
}

StnetConfig StnetConfig::from_json(const nlohmann::json& j) {
  StnetConfig cfg;
  cfg.T = j.value("T", cfg.T);
  cfg.T_S = j.value("T_S", cfg.T_S);
  cfg.C_B = j.value("C_B", cfg.C_B);
  cfg.C_T = j.value("C_T", cfg.C_T);
  cfg.n = j.value("n", cfg.n);
  cfg.block_width = j.value("block_width", cfg.block_width);
  cfg.validate();
  return cfg;
}

StnetParams make_stnet(const StnetConfig& cfg, Rng& rng) {
  cfg.validate();
  StnetParams p;
  p.pre1 = make_conv2d(1, cfg.C_B, 5, 1, 2, rng);
  p.pre2 = make_conv2d(cfg.C_B, cfg.C_B, 5, 1, 2, rng);
  p.merge3d = make_conv3d_temporal(1, cfg.C_T, cfg.T_S, 3, rng);
  p.tunit1 = make_conv2d(cfg.C_T, cfg.C_B, 5, 1, 2, rng);
  p.tunit2 = make_conv2d(cfg.C_B, cfg.C_B, 5, 1, 2, rng);
  const int w = cfg.width();
  for (int i = 0; i < cfg.layers(); ++i) {
    // Dense input: preliminary features + prior block outputs + temporal map.
    const int c_in = cfg.C_B + i * w + cfg.C_B;
    p.blocks.push_back(make_dense_block(c_in, w, rng));
  }
  p.fuse = make_conv2d(cfg.C_B + cfg.layers() * w, cfg.C_B, 1, 1, 0, rng);
  for (int s = 0; s < cfg.up_stages(); ++s) {
    UpsampleStage st;
    st.conv = make_conv2d(cfg.C_B, 4 * cfg.C_B, 3, 1, 1, rng);
    st.bn = make_batch_norm(4 * cfg.C_B);
    p.up.push_back(std::move(st));
  }
  p.head = make_conv2d(cfg.C_B, 1, 3, 1, 1, rng);
  return p;
}

NamedParams StnetParams::trainable() {
  NamedParams out;
  collect(pre1, "pre1", out);
  collect(pre2, "pre2", out);
  collect(merge3d, "merge3d", out);
  collect(tunit1, "tunit1", out);
  collect(tunit2, "tunit2", out);
  for (size_t i = 0; i < blocks.size(); ++i) collect(blocks[i], "block" + std::to_string(i), out);
  collect(fuse, "fuse", out);
  for (size_t i = 0; i < up.size(); ++i) {
    collect(up[i].conv, "up" + std::to_string(i) + ".conv", out);
    collect(up[i].bn, "up" + std::to_string(i) + ".bn", out);
  }
  collect(head, "head", out);
  return out;
}

NamedParams StnetParams::state() {
  NamedParams out = trainable();
  for (size_t i = 0; i < blocks.size(); ++i)
    collect_state(blocks[i], "block" + std::to_string(i), out);
  for (size_t i = 0; i < up.size(); ++i)
    collect_state(up[i].bn, "up" + std::to_string(i) + ".bn", out);
  return out;
}

NamedParams StnetParams::extractor_trainable() {
  NamedParams out;
  collect(pre1, "pre1", out);
  collect(pre2, "pre2", out);
  collect(merge3d, "merge3d", out);
  collect(tunit1, "tunit1", out);
  collect(tunit2, "tunit2", out);
  for (size_t i = 0; i < blocks.size(); ++i) collect(blocks[i], "block" + std::to_string(i), out);
  collect(fuse, "fuse", out);
  return out;
}

NamedParams StnetParams::predictor_trainable() {
  NamedParams out;
  for (size_t i = 0; i < up.size(); ++i) {
    collect(up[i].conv, "up" + std::to_string(i) + ".conv", out);
    collect(up[i].bn, "up" + std::to_string(i) + ".bn", out);
  }
  collect(head, "head", out);
  return out;
}

Tensor last_frame(const Tensor& coarse_seq) {
  if (coarse_seq.rank() != 4) throw ShapeError("expected [B,T,H,W]");
  return slice_axis(coarse_seq, 1, coarse_seq.dim(1) - 1, 1);
}

std::vector<Tensor> tnet_features(const Tensor& coarse_seq, StnetParams& p,
                                  const StnetConfig& cfg, ForwardMode mode) {
  (void)mode;
  if (coarse_seq.rank() != 4) throw ShapeError("tnet_features expects [B,T,H,W]");
  if (coarse_seq.dim(1) != cfg.T) {
    throw ShapeError("tnet_features: sequence length " + std::to_string(coarse_seq.dim(1)) +
                     " != configured T=" + std::to_string(cfg.T));
  }
  const int64_t B = coarse_seq.dim(0), H = coarse_seq.dim(2), W = coarse_seq.dim(3);
  Tensor x5 = reshape(coarse_seq, {B, 1, cfg.T, H, W});
  Tensor merged = conv3d_temporal(x5, p.merge3d);  // [B, C_T, L, H, W]
  std::vector<Tensor> features;
  features.reserve(static_cast<size_t>(cfg.layers()));
  for (int l = 0; l < cfg.layers(); ++l) {
    Tensor frame = reshape(slice_axis(merged, 2, l, 1), {B, cfg.C_T, H, W});
    Tensor f = relu(conv2d(frame, p.tunit1));
    f = relu(conv2d(f, p.tunit2));
    features.push_back(std::move(f));
  }
  return features;
}

namespace {

Tensor features_from_last(const Tensor& coarse_last, const std::vector<Tensor>& temporal,
                          StnetParams& p, const StnetConfig& cfg, ForwardMode mode) {
  const int64_t B = coarse_last.dim(0), H = coarse_last.dim(2), W = coarse_last.dim(3);
  Tensor f0 = relu(conv2d(coarse_last, p.pre1));
  f0 = relu(conv2d(f0, p.pre2));
  std::vector<Tensor> outputs{f0};
  for (int i = 0; i < cfg.layers(); ++i) {
    std::vector<Tensor> inputs = outputs;
    inputs.push_back(temporal.empty() ? Tensor::zeros({B, cfg.C_B, H, W})
                                      : temporal[static_cast<size_t>(i)]);
    outputs.push_back(dense_block_forward(inputs, p.blocks[static_cast<size_t>(i)], mode.training,
                                          mode.update_running));
  }
  return conv2d(concat(outputs, 1), p.fuse);
}

}  // namespace

Tensor extract_features(const Tensor& coarse_seq, StnetParams& p, const StnetConfig& cfg,
                        ForwardMode mode, bool temporal) {
  if (!temporal) {
    Tensor lastc = coarse_seq.dim(1) == 1 ? coarse_seq : last_frame(coarse_seq);
    return features_from_last(lastc, {}, p, cfg, mode);
  }
  std::vector<Tensor> tf = tnet_features(coarse_seq, p, cfg, mode);
  return features_from_last(last_frame(coarse_seq), tf, p, cfg, mode);
}

Tensor predict_from_features(const Tensor& features, const Tensor& coarse_last, StnetParams& p,
                             const StnetConfig& cfg, ForwardMode mode) {
  Tensor h = features;
  for (auto& stage : p.up) {
    h = conv2d(h, stage.conv);
    h = batch_norm2d(h, stage.bn, mode.training, mode.update_running);
    h = pixel_shuffle(h, 2);
    h = relu(h);
  }
  Tensor raw = conv2d(h, p.head);
  return n2_normalize(raw, coarse_last, cfg.n);
}

Tensor stnet_forward(const Tensor& coarse_seq, StnetParams& p, const StnetConfig& cfg,
                     ForwardMode mode, Tensor* features_out) {
  Tensor features = extract_features(coarse_seq, p, cfg, mode, true);
  if (features_out) *features_out = features;
  return predict_from_features(features, last_frame(coarse_seq), p, cfg, mode);
}

Tensor snet_forward(const Tensor& coarse_last, StnetParams& p, const StnetConfig& cfg,
                    ForwardMode mode) {
  Tensor lastc = coarse_last.dim(1) == 1 ? coarse_last : last_frame(coarse_last);
  Tensor features = features_from_last(lastc, {}, p, cfg, mode);
  return predict_from_features(features, lastc, p, cfg, mode);
}

Tensor stack_coarse(const std::vector<WindowSample>& samples, const std::vector<int64_t>& idx) {
  if (idx.empty()) throw DataError("empty batch");
  const Tensor& first = samples[static_cast<size_t>(idx[0])].coarse_seq;
  const int64_t T = first.dim(0), H = first.dim(1), W = first.dim(2);
  Tensor out = Tensor::zeros({static_cast<int64_t>(idx.size()), T, H, W});
  for (size_t b = 0; b < idx.size(); ++b) {
    const auto& src = samples[static_cast<size_t>(idx[b])].coarse_seq.values();
    std::copy(src.begin(), src.end(), out.values().begin() + static_cast<int64_t>(b) * T * H * W);
  }
  return out;
}

Tensor stack_fine(const std::vector<WindowSample>& samples, const std::vector<int64_t>& idx) {
  if (idx.empty()) throw DataError("empty batch");
  const Tensor& first = samples[static_cast<size_t>(idx[0])].fine_target;
  const int64_t nH = first.dim(1), nW = first.dim(2);
  Tensor out = Tensor::zeros({static_cast<int64_t>(idx.size()), 1, nH, nW});
  for (size_t b = 0; b < idx.size(); ++b) {
    const auto& src = samples[static_cast<size_t>(idx[b])].fine_target.values();
    std::copy(src.begin(), src.end(), out.values().begin() + static_cast<int64_t>(b) * nH * nW);
  }
  return out;
}

nlohmann::json TrainConfig::to_json() const {
  return {{"batch", batch},         {"max_steps", max_steps}, {"eval_every", eval_every},
          {"patience", patience},   {"lr", lr},               {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig tc;
  tc.batch = j.value("batch", tc.batch);
  tc.max_steps = j.value("max_steps", tc.max_steps);
  tc.eval_every = j.value("eval_every", tc.eval_every);
  tc.patience = j.value("patience", tc.patience);
  tc.lr = j.value("lr", tc.lr);
  tc.seed = j.value("seed", tc.seed);
  return tc;
}

Tensor predict_stnet(StnetParams& params, const StnetConfig& cfg,
                     const std::vector<WindowSample>& samples, const std::vector<int64_t>& idx,
                     bool temporal) {
  if (idx.empty()) throw DataError("predict_stnet: no samples");
  NoTape guard;
  ForwardMode mode{false, false};
  const Tensor& f0 = samples[static_cast<size_t>(idx[0])].fine_target;
  const int64_t nH = f0.dim(1), nW = f0.dim(2);
  Tensor out = Tensor::zeros({static_cast<int64_t>(idx.size()), nH, nW});
  constexpr size_t kChunk = 16;
  for (size_t at = 0; at < idx.size(); at += kChunk) {
    std::vector<int64_t> chunk(idx.begin() + static_cast<int64_t>(at),
                               idx.begin() + static_cast<int64_t>(std::min(at + kChunk, idx.size())));
    Tensor coarse = stack_coarse(samples, chunk);
    Tensor pred = temporal ? stnet_forward(coarse, params, cfg, mode)
                           : snet_forward(coarse, params, cfg, mode);
    std::copy(pred.values().begin(), pred.values().end(),
              out.values().begin() + static_cast<int64_t>(at) * nH * nW);
  }
  return out;
}

MetricReport evaluate_stnet(StnetParams& params, const StnetConfig& cfg,
                            const std::vector<WindowSample>& samples,
                            const std::vector<int64_t>& idx, bool temporal) {
  Tensor pred = predict_stnet(params, cfg, samples, idx, temporal);
  Tensor truth = reshape(stack_fine(samples, idx), pred.shape());
  return evaluate(pred, truth);
}

TrainResult train_stnet(StnetParams& params, const StnetConfig& cfg,
                        const std::vector<WindowSample>& samples, const DatasetSplit& split,
                        const TrainConfig& tc, bool temporal) {
  if (split.train.empty()) throw DataError("train_stnet: empty training set");
  Rng data_rng = Rng(tc.seed).fork(101);
  NamedParams named = params.trainable();
  Adam opt(tensors_of(named), tc.lr);

  TrainResult result;
  double best = std::numeric_limits<double>::infinity();
  auto best_snap = snapshot_values(params.state());
  int stale = 0;

  for (int step = 1; step <= tc.max_steps; ++step) {
    std::vector<int64_t> batch;
    batch.reserve(static_cast<size_t>(tc.batch));
    for (int b = 0; b < tc.batch; ++b) {
      batch.push_back(split.train[static_cast<size_t>(data_rng.below(split.train.size()))]);
    }
    Tensor coarse = stack_coarse(samples, batch);
    Tensor fine = stack_fine(samples, batch);

    opt.zero_grad();
    Tape tape;
    ForwardMode mode{true, true};
    Tensor pred = temporal ? stnet_forward(coarse, params, cfg, mode)
                           : snet_forward(coarse, params, cfg, mode);
    Tensor l = mse_loss(pred, fine);
    const double lv = l.item();
    if (!std::isfinite(lv)) {
      throw TrainError("stnet training diverged at step " + std::to_string(step) +
                       " (loss=" + std::to_string(lv) + ")");
    }
    result.losses.push_back(lv);
    backward(l);
    opt.step();

    if (step % tc.eval_every == 0 || step == tc.max_steps) {
      const double val_rmse = split.val.empty()
                                  ? lv
                                  : evaluate_stnet(params, cfg, samples, split.val, temporal).rmse;
      if (val_rmse < best) {
        best = val_rmse;
        best_snap = snapshot_values(params.state());
        result.best_step = step;
        stale = 0;
      } else if (++stale >= tc.patience) {
        break;
      }
    }
  }
  restore_values(params.state(), best_snap);
  result.best_val_rmse = best;
  return result;
}

Checkpoint stnet_checkpoint(StnetParams& params, const StnetConfig& cfg,
                            const nlohmann::json& extra) {
  Checkpoint ck;
  ck.meta = extra;
  ck.meta["kind"] = "stnet";
  ck.meta["config"] = cfg.to_json();
  ck.meta["param_count"] = params.count();
  ck.tensors = params.state();
  return ck;
}

StnetParams stnet_from_checkpoint(const Checkpoint& ck, StnetConfig* cfg_out) {
  if (ck.meta.value("kind", "") != "stnet") throw StateError("not an stnet checkpoint");
  StnetConfig cfg = StnetConfig::from_json(ck.meta.at("config"));
  Rng rng(0);
  StnetParams params = make_stnet(cfg, rng);
  load_into(params.state(), ck);
  if (cfg_out) *cfg_out = cfg;
  return params;
}

}  // namespace psr
