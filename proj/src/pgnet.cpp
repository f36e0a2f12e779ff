#include "psr/pgnet.hpp"

#include <cmath>
#include <limits>

namespace psr {

void PgnetConfig::validate() const {
  if (F < 1) throw ConfigError("F must be >= 1");
  if (C_G < 1 || C_D < 1) throw ConfigError("channel counts must be positive");
  if (lstm_context < 1) throw ConfigError("lstm_context must be >= 1");
  if (disc_layers < 1) throw ConfigError("discriminator needs at least one block");
  if (fine_h < 1 || fine_w < 1) throw ConfigError("pgnet fine dims unset");
}

nlohmann::json PgnetConfig::to_json() const {
  return {{"C_G", C_G},
          {"F", F},
          {"alpha", alpha},
          {"gan_weight", gan_weight},
          {"lstm_context", lstm_context},
          {"embed_dim", embed_dim},
          {"disc_layers", disc_layers},
          {"disc_stride", disc_stride},
          {"C_D", C_D},
          {"poi_channels", poi_channels},
          {"n", n},
          {"time_slots", time_slots},
          {"gan_horizon", gan_horizon},
          {"fine_h", fine_h},
          {"fine_w", fine_w}};
}

PgnetConfig PgnetConfig::from_json(const nlohmann::json& j) {
  PgnetConfig cfg;
  cfg.C_G = j.value("C_G", cfg.C_G);
  cfg.F = j.value("F", cfg.F);
  cfg.alpha = j.value("alpha", cfg.alpha);
  cfg.gan_weight = j.value("gan_weight", cfg.gan_weight);
  cfg.lstm_context = j.value("lstm_context", cfg.lstm_context);
  cfg.embed_dim = j.value("embed_dim", cfg.embed_dim);
  cfg.disc_layers = j.value("disc_layers", cfg.disc_layers);
  cfg.disc_stride = j.value("disc_stride", cfg.disc_stride);
  cfg.C_D = j.value("C_D", cfg.C_D);
  cfg.poi_channels = j.value("poi_channels", cfg.poi_channels);
  cfg.n = j.value("n", cfg.n);
  cfg.time_slots = j.value("time_slots", cfg.time_slots);
  cfg.gan_horizon = j.value("gan_horizon", cfg.gan_horizon);
  cfg.fine_h = j.value("fine_h", cfg.fine_h);
  cfg.fine_w = j.value("fine_w", cfg.fine_w);
  cfg.validate();
  return cfg;
}

NamedParams PgGeneratorParams::trainable() {
  NamedParams out;
  out.emplace_back("embed_table", embed_table);
  collect(lstm, "lstm", out);
  collect(f1_conv, "f1_conv", out);
  collect(f1_rb1, "f1_rb1", out);
  collect(f1_rb2, "f1_rb2", out);
  collect(f2_rb1, "f2_rb1", out);
  collect(f2_rb2, "f2_rb2", out);
  collect(f2_rb3, "f2_rb3", out);
  collect(f2_rb4, "f2_rb4", out);
  collect(f2_conv, "f2_conv", out);
  return out;
}

NamedParams PgDiscriminatorParams::trainable() {
  NamedParams out;
  collect(stem, "disc.stem", out);
  for (size_t i = 0; i < blocks.size(); ++i) collect(blocks[i], "disc.block" + std::to_string(i), out);
  collect(fc, "disc.fc", out);
  return out;
}

NamedParams PgnetParams::state() {
  NamedParams out = gen.trainable();
  NamedParams d = disc.trainable();
  out.insert(out.end(), d.begin(), d.end());
  return out;
}

PgnetParams make_pgnet(const PgnetConfig& cfg, Rng& rng) {
  cfg.validate();
  PgnetParams p;
  p.gen.embed_table =
      Tensor::uniform({cfg.time_slots, cfg.embed_dim}, rng, -0.5, 0.5).set_requires_grad(true);
  p.gen.lstm = make_lstm(cfg.embed_dim, cfg.C_G, rng);
  p.gen.f1_conv = make_conv2d(cfg.poi_channels, cfg.C_G, 5, 1, 2, rng);
  p.gen.f1_rb1 = make_res_block(cfg.C_G, cfg.C_G, 1, rng);
  p.gen.f1_rb2 = make_res_block(cfg.C_G, cfg.C_G, 1, rng);
  p.gen.f2_rb1 = make_res_block(cfg.C_G, cfg.C_G, 1, rng);
  p.gen.f2_rb2 = make_res_block(cfg.C_G, cfg.C_G, 1, rng);
  p.gen.f2_rb3 = make_res_block(cfg.C_G, cfg.C_G, 1, rng);
  p.gen.f2_rb4 = make_res_block(cfg.C_G, cfg.C_G, 1, rng);
  p.gen.f2_conv = make_conv2d(cfg.C_G, 1, 5, 1, 2, rng);

  p.disc.stem = make_conv2d(1, cfg.C_D, 3, 1, 1, rng);
  int64_t h = cfg.fine_h, w = cfg.fine_w;
  int c = cfg.C_D;
  for (int i = 0; i < cfg.disc_layers; ++i) {
    p.disc.blocks.push_back(make_res_block(c, 2 * c, cfg.disc_stride, rng));
    h = (h + 2 - 3) / cfg.disc_stride + 1;
    w = (w + 2 - 3) / cfg.disc_stride + 1;
    if (h < 1 || w < 1) throw ConfigError("discriminator stride collapses the input");
    c *= 2;
  }
  p.disc.flat_dim = static_cast<int64_t>(c) * h * w;
  p.disc.fc = make_linear(static_cast<int>(p.disc.flat_dim), 1, rng);
  return p;
}

Tensor flow_targets(const Tensor& series) {
  if (series.rank() != 3) throw ShapeError("flow_targets expects [T, nH, nW]");
  const int64_t T = series.dim(0);
  if (T < 2) throw ShapeError("flow_targets needs at least 2 slots");
  const int64_t frame = series.dim(1) * series.dim(2);
  Tensor out = Tensor::zeros({T - 1, series.dim(1), series.dim(2)});
  const auto& v = series.values();
  auto& o = out.values();
  for (int64_t t = 0; t + 1 < T; ++t)
    for (int64_t i = 0; i < frame; ++i)
      o[static_cast<size_t>(t * frame + i)] =
          v[static_cast<size_t>((t + 1) * frame + i)] - v[static_cast<size_t>(t * frame + i)];
  return out;
}

Tensor pg_generator_forward(int slot, const Tensor& poi, PgGeneratorParams& p,
                            const PgnetConfig& cfg) {
  if (poi.rank() != 3 || poi.dim(0) != cfg.poi_channels) {
    throw ShapeError("generator expects POI [C=" + std::to_string(cfg.poi_channels) + ", nH, nW]");
  }
  const int64_t nH = poi.dim(1), nW = poi.dim(2);

  // Time path: embeddings of the context window ending at `slot`, LSTM-encoded.
  std::vector<Tensor> embeds;
  embeds.reserve(static_cast<size_t>(cfg.lstm_context));
  for (int k = cfg.lstm_context - 1; k >= 0; --k) {
    const int s = ((slot - k) % cfg.time_slots + cfg.time_slots) % cfg.time_slots;
    embeds.push_back(reshape(embedding_lookup(p.embed_table, s), {1, cfg.embed_dim}));
  }
  Tensor seq = embeds.size() == 1 ? embeds[0] : concat(embeds, 0);
  Tensor te = lstm_sequence(seq, p.lstm);          // [C_G]
  te = reshape(te, {1, cfg.C_G, 1, 1});

  // Spatial path: POI pre-net, time gating, post-net.
  Tensor x = reshape(poi, {1, cfg.poi_channels, nH, nW});
  Tensor f = relu(conv2d(x, p.f1_conv));
  f = res_block(f, p.f1_rb1);
  f = res_block(f, p.f1_rb2);
  f = mul(f, te);  // per-channel scalar gate over every pixel
  f = res_block(f, p.f2_rb1);
  f = res_block(f, p.f2_rb2);
  f = res_block(f, p.f2_rb3);
  f = res_block(f, p.f2_rb4);
  Tensor flow = conv2d(f, p.f2_conv);  // [1, 1, nH, nW]
  return reshape(flow, {1, nH, nW});
}

Tensor pg_discriminator_forward(const Tensor& fine, PgDiscriminatorParams& p,
                                const PgnetConfig& cfg) {
  if (fine.rank() != 4 || fine.dim(1) != 1) throw ShapeError("discriminator expects [B,1,nH,nW]");
  if (fine.dim(2) != cfg.fine_h || fine.dim(3) != cfg.fine_w) {
    throw ShapeError("discriminator built for " + std::to_string(cfg.fine_h) + "x" +
                     std::to_string(cfg.fine_w) + ", got " + shape_str(fine.shape()));
  }
  const int64_t B = fine.dim(0);
  Tensor h = relu(conv2d(fine, p.stem));
  for (auto& block : p.blocks) h = res_block(h, block);
  h = reshape(h, {B, p.flat_dim});
  Tensor score = sigmoid(linear(h, p.fc));
  return reshape(score, {B});
}

Tensor synthesize_series(const Tensor& ref, const std::vector<Tensor>& flows_forward,
                         const std::vector<Tensor>& flows_backward,
                         const std::vector<Tensor>& coarse_frames, int n) {
  if (ref.rank() != 3 || ref.dim(0) != 1) throw ShapeError("reference must be [1, nH, nW]");
  const int64_t nH = ref.dim(1), nW = ref.dim(2);
  const size_t F = flows_forward.size() + flows_backward.size() + 1;
  if (coarse_frames.size() != F) {
    throw DataError("synthesize_series: need " + std::to_string(F) + " coarse frames, got " +
                    std::to_string(coarse_frames.size()));
  }
  const size_t ref_pos = flows_backward.size();
  auto coarse4 = [&](size_t i) -> Tensor {
    const Tensor& c = coarse_frames[i];
    if (c.rank() != 3 || c.dim(0) != 1 || c.dim(1) * n != nH || c.dim(2) * n != nW) {
      throw DataError("synthesize_series: coarse frame " + std::to_string(i) +
                      " does not match the fine grid");
    }
    return reshape(c, {1, 1, c.dim(1), c.dim(2)});
  };

  std::vector<Tensor> frames(F);
  Tensor ref4 = reshape(ref, {1, 1, nH, nW});
  frames[ref_pos] = n2_normalize(ref4, coarse4(ref_pos), n);

  Tensor acc = ref4;
  for (size_t k = 0; k < flows_forward.size(); ++k) {
    acc = add(acc, reshape(flows_forward[k], {1, 1, nH, nW}));
    frames[ref_pos + 1 + k] = n2_normalize(acc, coarse4(ref_pos + 1 + k), n);
  }
  acc = ref4;
  for (size_t k = 0; k < flows_backward.size(); ++k) {
    acc = sub(acc, reshape(flows_backward[k], {1, 1, nH, nW}));
    frames[ref_pos - 1 - k] = n2_normalize(acc, coarse4(ref_pos - 1 - k), n);
  }

  std::vector<Tensor> stacked;
  stacked.reserve(F);
  for (Tensor& f : frames) stacked.push_back(reshape(f, {1, nH, nW}));
  return concat(stacked, 0);  // [F, nH, nW]
}

namespace {

Tensor frame_of(const Tensor& series, int64_t t) {
  return slice0(series, t, 1);  // [1, H, W]
}

// Fake frame: accumulate `horizon` generated flows from the real frame at
// `anchor`, then project onto the coarse observation of the landing slot.
Tensor make_fake_frame(const Tensor& fine_series, const Tensor& coarse_series, const Tensor& poi,
                       PgGeneratorParams& gen, const PgnetConfig& cfg, int64_t anchor,
                       int horizon) {
  Tensor acc = reshape(frame_of(fine_series, anchor),
                       {1, 1, fine_series.dim(1), fine_series.dim(2)});
  for (int k = 0; k < horizon; ++k) {
    const int slot = static_cast<int>((anchor + k) % cfg.time_slots);
    Tensor flow = pg_generator_forward(slot, poi, gen, cfg);
    acc = add(acc, reshape(flow, acc.shape()));
  }
  Tensor coarse = frame_of(coarse_series, anchor + horizon);
  Tensor c4 = reshape(coarse, {1, 1, coarse.dim(1), coarse.dim(2)});
  return n2_normalize(acc, c4, cfg.n);  // [1, 1, nH, nW]
}

double val_flow_mse(const Tensor& flows, const std::vector<int64_t>& val_slots, const Tensor& poi,
                    PgGeneratorParams& gen, const PgnetConfig& cfg) {
  NoTape guard;
  const size_t cap = std::min<size_t>(val_slots.size(), 64);
  double acc = 0.0;
  for (size_t i = 0; i < cap; ++i) {
    const int64_t s = val_slots[i];
    Tensor pred = pg_generator_forward(static_cast<int>(s % cfg.time_slots), poi, gen, cfg);
    Tensor target = frame_of(flows, s);
    acc += mse_loss(pred, target).item();
  }
  return acc / static_cast<double>(cap);
}

}  // namespace

PgTrainResult train_pgnet(PgnetParams& params, const PgnetConfig& cfg, const Tensor& fine_series,
                          const PoiMap& poi, const TrainConfig& tc) {
  cfg.validate();
  if (fine_series.dim(1) != cfg.fine_h || fine_series.dim(2) != cfg.fine_w) {
    throw ShapeError("train_pgnet: series dims disagree with config fine dims");
  }
  const int64_t T = fine_series.dim(0);
  Tensor flows = flow_targets(fine_series);
  Tensor coarse_series = coarsen(fine_series, cfg.n);
  DatasetSplit split = split_source(static_cast<size_t>(T - 1), tc.seed);

  Rng data_rng = Rng(tc.seed).fork(201);
  std::vector<Tensor> gen_tensors = tensors_of(params.gen.trainable());
  std::vector<Tensor> disc_tensors = tensors_of(params.disc.trainable());
  Adam g_opt(gen_tensors, tc.lr);
  Adam d_opt(disc_tensors, tc.lr);

  PgTrainResult result;
  double best = std::numeric_limits<double>::infinity();
  auto best_snap = snapshot_values(params.state());
  int stale = 0;

  // Anchors for fake synthesis must leave room for the accumulation horizon.
  auto draw_anchor = [&](int horizon) {
    return static_cast<int64_t>(data_rng.below(static_cast<uint64_t>(T - horizon)));
  };

  for (int step = 1; step <= tc.max_steps; ++step) {
    // Generator step.
    zero_grad(gen_tensors);
    PgLossRecord rec;
    {
      Tape tape;
      Tensor mse_acc = Tensor::scalar(0.0);
      for (int b = 0; b < tc.batch; ++b) {
        const int64_t s = split.train[static_cast<size_t>(data_rng.below(split.train.size()))];
        Tensor pred = pg_generator_forward(static_cast<int>(s % cfg.time_slots), poi.counts,
                                           params.gen, cfg);
        mse_acc = add(mse_acc, mse_loss(pred, frame_of(flows, s)));
      }
      Tensor l_mse = mul_scalar(mse_acc, 1.0 / tc.batch);
      Tensor total;
      if (cfg.gan_weight > 0) {
        const int horizon = 1 + static_cast<int>(data_rng.below(
                                static_cast<uint64_t>(std::max(1, cfg.gan_horizon))));
        const int64_t anchor = draw_anchor(horizon);
        FreezeParams freeze(disc_tensors);
        Tensor fake = make_fake_frame(fine_series, coarse_series, poi.counts, params.gen, cfg,
                                      anchor, horizon);
        Tensor score = pg_discriminator_forward(fake, params.disc, cfg);
        // Non-saturating generator objective: push D(fake) toward 1.
        Tensor l_c = bce_loss(score, Tensor::full({1}, 1.0));
        total = add(mul_scalar(l_c, cfg.gan_weight), mul_scalar(l_mse, cfg.alpha));
        rec.gan = l_c.item();
      } else {
        total = mul_scalar(l_mse, cfg.alpha);
      }
      rec.mse = l_mse.item();
      rec.total = total.item();
      if (!std::isfinite(rec.total)) {
        throw TrainError("pgnet generator diverged at step " + std::to_string(step));
      }
      backward(total);
      g_opt.step();
    }
    result.losses.push_back(rec);

    // Discriminator step.
    if (cfg.gan_weight > 0) {
      zero_grad(disc_tensors);
      Tape tape;
      const int64_t real_slot = 1 + static_cast<int64_t>(data_rng.below(static_cast<uint64_t>(T - 1)));
      Tensor real = reshape(frame_of(fine_series, real_slot), {1, 1, cfg.fine_h, cfg.fine_w});
      const int horizon = 1 + static_cast<int>(data_rng.below(
                              static_cast<uint64_t>(std::max(1, cfg.gan_horizon))));
      const int64_t anchor = draw_anchor(horizon);
      Tensor fake;
      {
        NoTape detach;  // generator receives no gradient from the D step
        fake = make_fake_frame(fine_series, coarse_series, poi.counts, params.gen, cfg, anchor,
                               horizon);
      }
      Tensor score_real = pg_discriminator_forward(real, params.disc, cfg);
      Tensor score_fake = pg_discriminator_forward(fake, params.disc, cfg);
      Tensor l_d = add(bce_loss(score_real, Tensor::full({1}, 1.0)),
                       bce_loss(score_fake, Tensor::full({1}, 0.0)));
      if (!std::isfinite(l_d.item())) {
        throw TrainError("pgnet discriminator diverged at step " + std::to_string(step));
      }
      backward(l_d);
      d_opt.step();
    }

    if (step % tc.eval_every == 0 || step == tc.max_steps) {
      const double val = val_flow_mse(flows, split.val, poi.counts, params.gen, cfg);
      if (val < best) {
        best = val;
        best_snap = snapshot_values(params.state());
        result.best_step = step;
        stale = 0;
      } else if (++stale >= tc.patience) {
        break;
      }
    }
  }
  restore_values(params.state(), best_snap);
  result.best_val_flow_mse = best;

  // Scores on held-out real frames (degenerate-discriminator diagnostics).
  {
    NoTape guard;
    for (size_t i = 0; i < std::min<size_t>(split.test.size(), 16); ++i) {
      const int64_t s = split.test[i] + 1;  // flow index -> frame index
      Tensor frame = reshape(frame_of(fine_series, std::min(s, T - 1)),
                             {1, 1, cfg.fine_h, cfg.fine_w});
      result.disc_scores_real.push_back(
          pg_discriminator_forward(frame, params.disc, cfg).item());
    }
  }
  return result;
}

std::vector<WindowSample> augment_target(const ReferenceSnapshot& ref, const PoiMap& poi,
                                         const Tensor& target_coarse, PgGeneratorParams& gen,
                                         const PgnetConfig& cfg, int t_window, int F) {
  if (F < 1) throw ConfigError("augment_target: F must be >= 1");
  const int64_t T = target_coarse.dim(0);
  const int ell_f = (F - 1) / 2;
  const int ell_b = F - 1 - ell_f;
  const int64_t r = ref.slot_index;
  if (r - ell_b < t_window - 1 || r + ell_f > T - 1) {
    throw DataError("augment_target: reference slot " + std::to_string(r) +
                    " too near the series boundary for F=" + std::to_string(F));
  }

  NoTape guard;
  std::vector<Tensor> flows_fwd, flows_bwd;
  for (int k = 0; k < ell_f; ++k) {
    const int slot = static_cast<int>((r + k) % cfg.time_slots);
    flows_fwd.push_back(pg_generator_forward(slot, poi.counts, gen, cfg));
  }
  for (int k = 0; k < ell_b; ++k) {
    const int slot = static_cast<int>(((r - 1 - k) % cfg.time_slots + cfg.time_slots) %
                                      cfg.time_slots);
    flows_bwd.push_back(pg_generator_forward(slot, poi.counts, gen, cfg));
  }
  std::vector<Tensor> coarse_frames;
  coarse_frames.reserve(static_cast<size_t>(F));
  for (int o = -ell_b; o <= ell_f; ++o) coarse_frames.push_back(slice0(target_coarse, r + o, 1));

  Tensor synth = synthesize_series(ref.values, flows_fwd, flows_bwd, coarse_frames, cfg.n);

  const int64_t H = target_coarse.dim(1), W = target_coarse.dim(2);
  const int64_t nH = ref.values.dim(1), nW = ref.values.dim(2);
  std::vector<WindowSample> samples;
  samples.reserve(static_cast<size_t>(F));
  for (int i = 0; i < F; ++i) {
    const int64_t s = r - ell_b + i;
    WindowSample ws;
    ws.coarse_seq = Tensor::zeros({t_window, H, W});
    std::copy(target_coarse.values().begin() + (s - t_window + 1) * H * W,
              target_coarse.values().begin() + (s + 1) * H * W, ws.coarse_seq.values().begin());
    ws.fine_target = Tensor::zeros({1, nH, nW});
    std::copy(synth.values().begin() + i * nH * nW, synth.values().begin() + (i + 1) * nH * nW,
              ws.fine_target.values().begin());
    ws.t_of_day = static_cast<int>(s % kSlotsPerDay);
    ws.end_slot = s;
    samples.push_back(std::move(ws));
  }
  return samples;
}

Checkpoint pgnet_checkpoint(PgnetParams& params, const PgnetConfig& cfg,
                            const nlohmann::json& extra) {
  Checkpoint ck;
  ck.meta = extra;
  ck.meta["kind"] = "pgnet";
  ck.meta["config"] = cfg.to_json();
  ck.meta["param_count"] = param_count(params.state());
  ck.tensors = params.state();
  return ck;
}

PgnetParams pgnet_from_checkpoint(const Checkpoint& ck, PgnetConfig* cfg_out) {
  if (ck.meta.value("kind", "") != "pgnet") throw StateError("not a pgnet checkpoint");
  PgnetConfig cfg = PgnetConfig::from_json(ck.meta.at("config"));
  Rng rng(0);
  PgnetParams params = make_pgnet(cfg, rng);
  load_into(params.state(), ck);
  if (cfg_out) *cfg_out = cfg;
  return params;
}

}  // namespace psr
