#pragma once

#include <json.hpp>

#include "psr/stnet.hpp"

namespace psr {

struct PadaConfig {
  double lambda_adv = 0.1;  // 0 plus an empty source stream degrades to a
                            // plain fine-tune, bitwise
  int steps = 150;
  int batch = 4;      // per-domain batch size (source:target drawn 1:1)
  double lr = 1e-4;   // extractor + predictor
  double cls_lr = 1e-3;
  int cls_channels = 8;
  int cls_blocks = 1;  // trunk depth (discriminator-style blocks, stride 1)
  uint64_t seed = 1;

  nlohmann::json to_json() const;
  static PadaConfig from_json(const nlohmann::json& j);
};

// Per-pixel domain classifier: conv trunk + 1x1-conv MLP head, sigmoid out.
// Fully convolutional, so source and target feature maps of different spatial
// dims pass through the same weights (batched per domain).
struct DomainClassifierParams {
  Conv2dParams stem;  // 3x3
  std::vector<ResBlockParams> blocks;
  Conv2dParams mlp1, mlp2;  // 1x1 per-pixel MLP

  NamedParams trainable();
};

DomainClassifierParams make_domain_classifier(int c_feat, const PadaConfig& cfg, Rng& rng);

Tensor domain_classifier_forward(const Tensor& features, DomainClassifierParams& p);

struct PadaStepLog {
  double mse = 0;
  double cls_loss = -1;  // -1 when the adversarial steps were skipped
  double cls_acc = -1;   // pixel accuracy with true labels
  double adv_loss = -1;
};

struct PadaResult {
  std::vector<PadaStepLog> steps;
};

// Adversarial fine-tune: (a) MSE on mixed source+target batches updates
// extractor+predictor; (b) per-pixel BCE with true domain labels on detached
// features updates the classifier; (c) inverted-label BCE scaled by
// lambda_adv updates the extractor alone. (b) and (c) are skipped entirely
// when lambda_adv is 0 or the source stream is empty.
PadaResult pada_finetune(StnetParams& params, const StnetConfig& cfg,
                         const std::vector<WindowSample>& source_samples,
                         const std::vector<WindowSample>& target_samples, const PadaConfig& pc,
                         bool temporal = true);

// Plain fine-tune on the target samples only; the reference behavior for the
// degradation identity.
PadaResult finetune_naive(StnetParams& params, const StnetConfig& cfg,
                          const std::vector<WindowSample>& target_samples, const PadaConfig& pc,
                          bool temporal = true);

}  // namespace psr
