#include "psr/pada.hpp"

#include <cmath>

namespace psr {

nlohmann::json PadaConfig::to_json() const {
  return {{"lambda_adv", lambda_adv}, {"steps", steps},   {"batch", batch},
          {"lr", lr},                 {"cls_lr", cls_lr}, {"cls_channels", cls_channels},
          {"cls_blocks", cls_blocks}, {"seed", seed}};
}

PadaConfig PadaConfig::from_json(const nlohmann::json& j) {
  PadaConfig pc;
  pc.lambda_adv = j.value("lambda_adv", pc.lambda_adv);
  pc.steps = j.value("steps", pc.steps);
  pc.batch = j.value("batch", pc.batch);
  pc.lr = j.value("lr", pc.lr);
  pc.cls_lr = j.value("cls_lr", pc.cls_lr);
  pc.cls_channels = j.value("cls_channels", pc.cls_channels);
  pc.cls_blocks = j.value("cls_blocks", pc.cls_blocks);
  pc.seed = j.value("seed", pc.seed);
  if (pc.lambda_adv < 0) throw ConfigError("lambda_adv must be >= 0");
  return pc;
}

NamedParams DomainClassifierParams::trainable() {
  NamedParams out;
  collect(stem, "cls.stem", out);
  for (size_t i = 0; i < blocks.size(); ++i) collect(blocks[i], "cls.block" + std::to_string(i), out);
  collect(mlp1, "cls.mlp1", out);
  collect(mlp2, "cls.mlp2", out);
  return out;
}

DomainClassifierParams make_domain_classifier(int c_feat, const PadaConfig& cfg, Rng& rng) {
  DomainClassifierParams p;
  p.stem = make_conv2d(c_feat, cfg.cls_channels, 3, 1, 1, rng);
  for (int i = 0; i < cfg.cls_blocks; ++i) {
    p.blocks.push_back(make_res_block(cfg.cls_channels, cfg.cls_channels, 1, rng));
  }
  p.mlp1 = make_conv2d(cfg.cls_channels, cfg.cls_channels, 1, 1, 0, rng);
  p.mlp2 = make_conv2d(cfg.cls_channels, 1, 1, 1, 0, rng);
  return p;
}

Tensor domain_classifier_forward(const Tensor& features, DomainClassifierParams& p) {
  if (features.rank() != 4) throw ShapeError("domain classifier expects [B, C, H, W]");
  Tensor h = relu(conv2d(features, p.stem));
  for (auto& block : p.blocks) h = res_block(h, block);
  h = relu(conv2d(h, p.mlp1));
  return sigmoid(conv2d(h, p.mlp2));  // [B, 1, H, W]
}

namespace {

std::vector<int64_t> draw_batch(Rng& rng, size_t pool, int count) {
  std::vector<int64_t> idx;
  idx.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) idx.push_back(static_cast<int64_t>(rng.below(pool)));
  return idx;
}

double pixel_accuracy(const Tensor& pred, double label) {
  int64_t hit = 0;
  for (double v : pred.values()) {
    if ((v >= 0.5 ? 1.0 : 0.0) == label) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(pred.numel());
}

double mse_step(StnetParams& params, const StnetConfig& cfg,
                const std::vector<WindowSample>& source,
                const std::vector<int64_t>& source_idx,
                const std::vector<WindowSample>& target,
                const std::vector<int64_t>& target_idx, Adam& opt, bool temporal, int step) {
  opt.zero_grad();
  Tape tape;
  ForwardMode mode{true, true};
  Tensor coarse_t = stack_coarse(target, target_idx);
  Tensor fine_t = stack_fine(target, target_idx);
  Tensor pred_t = temporal ? stnet_forward(coarse_t, params, cfg, mode)
                           : snet_forward(coarse_t, params, cfg, mode);
  Tensor l = mse_loss(pred_t, fine_t);
  if (!source_idx.empty()) {
    Tensor coarse_s = stack_coarse(source, source_idx);
    Tensor fine_s = stack_fine(source, source_idx);
    Tensor pred_s = temporal ? stnet_forward(coarse_s, params, cfg, mode)
                             : snet_forward(coarse_s, params, cfg, mode);
    l = mul_scalar(add(l, mse_loss(pred_s, fine_s)), 0.5);
  }
  const double lv = l.item();
  if (!std::isfinite(lv)) {
    throw TrainError("fine-tune diverged at step " + std::to_string(step));
  }
  backward(l);
  opt.step();
  return lv;
}

}  // namespace

PadaResult pada_finetune(StnetParams& params, const StnetConfig& cfg,
                         const std::vector<WindowSample>& source_samples,
                         const std::vector<WindowSample>& target_samples, const PadaConfig& pc,
                         bool temporal) {
  if (target_samples.empty()) throw DataError("pada_finetune: no target samples");
  const bool adversarial = pc.lambda_adv > 0 && !source_samples.empty();

  Rng data_rng = Rng(pc.seed).fork(301);
  Rng cls_rng = Rng(pc.seed).fork(302);

  Adam opt_main(tensors_of(params.trainable()), pc.lr);
  DomainClassifierParams cls = make_domain_classifier(cfg.C_B, pc, cls_rng);
  std::vector<Tensor> cls_tensors = tensors_of(cls.trainable());
  std::vector<Tensor> extractor_tensors = tensors_of(params.extractor_trainable());
  Adam opt_cls(cls_tensors, pc.cls_lr);
  Adam opt_adv(extractor_tensors, pc.lr);

  PadaResult result;
  for (int step = 1; step <= pc.steps; ++step) {
    PadaStepLog log;
    std::vector<int64_t> target_idx = draw_batch(data_rng, target_samples.size(), pc.batch);
    std::vector<int64_t> source_idx;
    if (adversarial) source_idx = draw_batch(data_rng, source_samples.size(), pc.batch);

    // (a) prediction task on the mixed batch.
    log.mse = mse_step(params, cfg, source_samples, source_idx, target_samples, target_idx,
                       opt_main, temporal, step);

    if (adversarial) {
      ForwardMode feat_mode{true, false};
      // (b) classifier with true labels on detached features.
      Tensor feat_t, feat_s;
      {
        NoTape detach;
        feat_t = extract_features(stack_coarse(target_samples, target_idx), params, cfg,
                                  feat_mode, temporal);
        feat_s = extract_features(stack_coarse(source_samples, source_idx), params, cfg,
                                  feat_mode, temporal);
      }
      {
        zero_grad(cls_tensors);
        Tape tape;
        Tensor pred_t = domain_classifier_forward(feat_t, cls);
        Tensor pred_s = domain_classifier_forward(feat_s, cls);
        Tensor l_cls = mul_scalar(add(bce_loss(pred_t, Tensor::full(pred_t.shape(), 1.0)),
                                      bce_loss(pred_s, Tensor::full(pred_s.shape(), 0.0))),
                                  0.5);
        log.cls_loss = l_cls.item();
        log.cls_acc = 0.5 * (pixel_accuracy(pred_t, 1.0) + pixel_accuracy(pred_s, 0.0));
        if (!std::isfinite(log.cls_loss)) {
          throw TrainError("domain classifier diverged at step " + std::to_string(step));
        }
        backward(l_cls);
        opt_cls.step();
      }

      // (c) extractor against the classifier: inverted labels.
      {
        zero_grad(extractor_tensors);
        Tape tape;
        FreezeParams freeze(cls_tensors);
        Tensor ft = extract_features(stack_coarse(target_samples, target_idx), params, cfg,
                                     feat_mode, temporal);
        Tensor fs = extract_features(stack_coarse(source_samples, source_idx), params, cfg,
                                     feat_mode, temporal);
        Tensor pred_t = domain_classifier_forward(ft, cls);
        Tensor pred_s = domain_classifier_forward(fs, cls);
        Tensor l_adv = mul_scalar(add(bce_loss(pred_t, Tensor::full(pred_t.shape(), 0.0)),
                                      bce_loss(pred_s, Tensor::full(pred_s.shape(), 1.0))),
                                  0.5 * pc.lambda_adv);
        log.adv_loss = l_adv.item();
        if (!std::isfinite(log.adv_loss)) {
          throw TrainError("adversarial step diverged at step " + std::to_string(step));
        }
        backward(l_adv);
        opt_adv.step();
      }
    }
    result.steps.push_back(log);
  }
  return result;
}

PadaResult finetune_naive(StnetParams& params, const StnetConfig& cfg,
                          const std::vector<WindowSample>& target_samples, const PadaConfig& pc,
                          bool temporal) {
  if (target_samples.empty()) throw DataError("finetune_naive: no target samples");
  Rng data_rng = Rng(pc.seed).fork(301);
  Adam opt(tensors_of(params.trainable()), pc.lr);
  const std::vector<WindowSample> no_source;

  PadaResult result;
  for (int step = 1; step <= pc.steps; ++step) {
    PadaStepLog log;
    std::vector<int64_t> target_idx = draw_batch(data_rng, target_samples.size(), pc.batch);
    log.mse = mse_step(params, cfg, no_source, {}, target_samples, target_idx, opt, temporal, step);
    result.steps.push_back(log);
  }
  return result;
}

}  // namespace psr
