#pragma once

#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "psr/metrics.hpp"
#include "psr/pada.hpp"
#include "psr/pgnet.hpp"
#include "psr/stnet.hpp"
#include "psr/synth.hpp"

namespace psr {

enum class Scenario { CrossCity, CrossGranularity };
enum class Variant { Snet, Stnet, SnetPgnet, StnetPgnet, Psrnet };

std::string to_string(Scenario s);
std::string to_string(Variant v);
Scenario scenario_from_string(const std::string& s);
Variant variant_from_string(const std::string& s);

struct ExperimentConfig {
  Scenario scenario = Scenario::CrossCity;
  std::vector<Variant> variants = {Variant::Stnet, Variant::StnetPgnet, Variant::Psrnet};
  uint64_t seed = 1;
  std::string profile = "desk";
  std::string out_dir = "out";

  CitySpec source_city, target_city;
  StnetConfig stnet;
  TrainConfig stnet_train;
  PgnetConfig pgnet;
  TrainConfig pgnet_train;
  PadaConfig pada;
  int t_window = 24;
  int week_slots = 336;
  int augment_frames = 9;
  int png_slots = 4;

  void validate() const;
  nlohmann::json to_json() const;
  // Starts from the profile named in j (default "desk"), then applies
  // overrides field by field (RFC 7386 merge semantics).
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig desk_defaults(uint64_t seed);
  static ExperimentConfig paper_defaults(uint64_t seed);
};

// Deterministic content hashes for manifests.
std::string fnv1a64_hex(const unsigned char* data, size_t len);
std::string hash_bytes(const std::string& bytes);
std::string hash_tensor(const Tensor& t);
std::string hash_json(const nlohmann::json& j);

// All data derived from a config, shared by the pipeline stages.
struct ExperimentContext {
  ExperimentConfig cfg;
  SynthCity source, target;

  std::vector<WindowSample> source_windows;  // pre-training task
  DatasetSplit source_split;
  std::vector<WindowSample> target_windows;  // evaluation task
  TargetSplit target_split;

  Tensor aug_coarse_series;  // constraint series for synthesized frames
  PoiMap aug_poi;            // POI at the augmentation granularity
  Tensor pgnet_series;       // PGNet pre-training series
  PoiMap pgnet_poi;
  PgnetConfig pgnet_train_cfg, pgnet_aug_cfg;
  StnetConfig stnet_cfg;
};

ExperimentContext prepare_context(const ExperimentConfig& cfg);

struct VariantRow {
  std::string name;
  MetricReport metrics;
  int64_t params = 0;
};

struct RunOutput {
  std::vector<VariantRow> rows;  // Bicubic first, then variants in order
  std::string report_md_path, report_json_path, manifest_path;
};

// Full pipeline: pre-train, augment, fine-tune per variant, evaluate against
// Bicubic, and write report.md / report.json / manifest.json / PNG dumps
// under cfg.out_dir.
RunOutput run_experiment(const ExperimentConfig& cfg);

// Stage entry points used by the CLI; all deterministic given the config.
void stage_synth(const ExperimentConfig& cfg, const std::string& out_dir);
Checkpoint stage_pretrain_stnet(ExperimentContext& ctx, bool temporal);
Checkpoint stage_pretrain_pgnet(ExperimentContext& ctx);
std::vector<WindowSample> stage_augment(ExperimentContext& ctx, PgnetParams& pgnet_params);

}  // namespace psr
