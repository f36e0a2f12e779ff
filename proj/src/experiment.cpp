#include "psr/experiment.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "psr/png.hpp"

namespace psr {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Scenario s) {
  return s == Scenario::CrossCity ? "cross_city" : "cross_granularity";
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::Snet: return "snet";
    case Variant::Stnet: return "stnet";
    case Variant::SnetPgnet: return "snet+pgnet";
    case Variant::StnetPgnet: return "stnet+pgnet";
    case Variant::Psrnet: return "psrnet";
  }
  throw ConfigError("unknown variant");
}

Scenario scenario_from_string(const std::string& s) {
  if (s == "cross_city") return Scenario::CrossCity;
  if (s == "cross_granularity") return Scenario::CrossGranularity;
  throw ConfigError("unknown scenario: " + s);
}

Variant variant_from_string(const std::string& s) {
  if (s == "snet") return Variant::Snet;
  if (s == "stnet") return Variant::Stnet;
  if (s == "snet+pgnet") return Variant::SnetPgnet;
  if (s == "stnet+pgnet") return Variant::StnetPgnet;
  if (s == "psrnet") return Variant::Psrnet;
  throw ConfigError("unknown variant: " + s);
}

// ---------------------------------------------------------------------------
// hashing

std::string fnv1a64_hex(const unsigned char* data, size_t len) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (size_t i = 0; i < len; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

std::string hash_bytes(const std::string& bytes) {
  return fnv1a64_hex(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size());
}

std::string hash_tensor(const Tensor& t) {
  std::ostringstream os(std::ios::binary);
  write_grid_stream(os, t);
  return hash_bytes(os.str());
}

std::string hash_json(const json& j) { return hash_bytes(j.dump()); }

// ---------------------------------------------------------------------------
// config

void ExperimentConfig::validate() const {
  if (variants.empty()) throw ConfigError("no variants requested");
  source_city.validate();
  target_city.validate();
  stnet.validate();
  if (t_window != stnet.T) throw ConfigError("t_window must equal stnet.T");
  if (augment_frames < 1) throw ConfigError("augment_frames must be >= 1");
  if (week_slots < 1) throw ConfigError("week_slots must be >= 1");
}

static json city_to_json(const CitySpec& c) {
  return {{"seed", c.seed},       {"nH", c.nH},
          {"nW", c.nW},           {"n", c.n},
          {"days", c.days},       {"n_centers", c.n_centers},
          {"shift", c.shift},     {"base_intensity", c.base_intensity},
          {"noise_scale", c.noise_scale}};
}

static CitySpec city_from_json(const json& j, CitySpec base) {
  base.seed = j.value("seed", base.seed);
  base.nH = j.value("nH", base.nH);
  base.nW = j.value("nW", base.nW);
  base.n = j.value("n", base.n);
  base.days = j.value("days", base.days);
  base.n_centers = j.value("n_centers", base.n_centers);
  base.shift = j.value("shift", base.shift);
  base.base_intensity = j.value("base_intensity", base.base_intensity);
  base.noise_scale = j.value("noise_scale", base.noise_scale);
  return base;
}

json ExperimentConfig::to_json() const {
  json v = json::array();
  for (Variant var : variants) v.push_back(to_string(var));
  return {{"scenario", to_string(scenario)},
          {"variants", v},
          {"seed", seed},
          {"profile", profile},
          {"out_dir", out_dir},
          {"source_city", city_to_json(source_city)},
          {"target_city", city_to_json(target_city)},
          {"stnet", stnet.to_json()},
          {"stnet_train", stnet_train.to_json()},
          {"pgnet", pgnet.to_json()},
          {"pgnet_train", pgnet_train.to_json()},
          {"pada", pada.to_json()},
          {"t_window", t_window},
          {"week_slots", week_slots},
          {"augment_frames", augment_frames},
          {"png_slots", png_slots}};
}

ExperimentConfig ExperimentConfig::desk_defaults(uint64_t seed) {
  ExperimentConfig cfg;
  cfg.seed = seed;
  cfg.profile = "desk";

  cfg.source_city.seed = seed;
  cfg.source_city.nH = cfg.source_city.nW = 32;
  cfg.source_city.n = 4;
  cfg.source_city.days = 14;
  cfg.source_city.shift = 0.0;

  cfg.target_city = cfg.source_city;
  cfg.target_city.shift = 0.55;

  cfg.stnet.T = 24;
  cfg.stnet.T_S = 6;
  cfg.stnet.C_B = 16;
  cfg.stnet.C_T = 8;
  cfg.stnet.n = 4;
  cfg.t_window = 24;

  cfg.stnet_train.batch = 4;
  cfg.stnet_train.max_steps = 320;
  cfg.stnet_train.eval_every = 40;
  cfg.stnet_train.patience = 6;
  cfg.stnet_train.lr = 2e-3;
  cfg.stnet_train.seed = seed;

  cfg.pgnet.C_G = 12;
  cfg.pgnet.F = 9;
  cfg.pgnet.alpha = 1e-2;
  cfg.pgnet.gan_weight = 1.0;
  cfg.pgnet.lstm_context = 8;
  cfg.pgnet.embed_dim = 8;
  cfg.pgnet.disc_layers = 3;
  cfg.pgnet.disc_stride = 4;
  cfg.pgnet.C_D = 2;
  cfg.pgnet.n = 4;
  cfg.pgnet.gan_horizon = 2;

  cfg.pgnet_train.batch = 3;
  cfg.pgnet_train.max_steps = 200;
  cfg.pgnet_train.eval_every = 25;
  cfg.pgnet_train.patience = 8;
  cfg.pgnet_train.lr = 2e-3;
  cfg.pgnet_train.seed = seed;

  cfg.pada.lambda_adv = 0.1;
  cfg.pada.steps = 120;
  cfg.pada.batch = 3;
  cfg.pada.lr = 3e-4;
  cfg.pada.cls_lr = 1e-3;
  cfg.pada.cls_channels = 8;
  cfg.pada.cls_blocks = 1;
  cfg.pada.seed = seed;

  cfg.week_slots = 336;
  cfg.augment_frames = 9;
  return cfg;
}

ExperimentConfig ExperimentConfig::paper_defaults(uint64_t seed) {
  ExperimentConfig cfg = desk_defaults(seed);
  cfg.profile = "paper";
  cfg.stnet.T = 48;
  cfg.stnet.T_S = 6;
  cfg.stnet.C_B = 64;
  cfg.stnet.C_T = 16;
  cfg.t_window = 48;
  cfg.pgnet.C_G = 64;
  cfg.pgnet.alpha = 1e-3;
  cfg.pgnet.C_D = 1;
  cfg.pgnet.disc_layers = 3;
  cfg.pgnet.disc_stride = 4;
  cfg.pgnet.embed_dim = 16;
  cfg.source_city.days = 30;
  cfg.target_city.days = 30;
  cfg.stnet_train.max_steps = 4000;
  cfg.pgnet_train.max_steps = 2000;
  cfg.pada.steps = 600;
  return cfg;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  const std::string profile = j.value("profile", "desk");
  const uint64_t seed = j.value("seed", uint64_t{1});
  ExperimentConfig cfg =
      profile == "paper" ? paper_defaults(seed) : desk_defaults(seed);
  if (profile != "paper" && profile != "desk") throw ConfigError("unknown profile: " + profile);

  if (j.contains("scenario")) cfg.scenario = scenario_from_string(j.at("scenario"));
  if (j.contains("variants")) {
    cfg.variants.clear();
    for (const auto& v : j.at("variants")) cfg.variants.push_back(variant_from_string(v));
  } else if (j.contains("variant")) {
    cfg.variants = {variant_from_string(j.at("variant"))};
  }
  cfg.out_dir = j.value("out_dir", cfg.out_dir);
  if (j.contains("source_city")) cfg.source_city = city_from_json(j.at("source_city"), cfg.source_city);
  if (j.contains("target_city")) cfg.target_city = city_from_json(j.at("target_city"), cfg.target_city);
  if (j.contains("stnet")) {
    json merged = cfg.stnet.to_json();
    merged.merge_patch(j.at("stnet"));
    cfg.stnet = StnetConfig::from_json(merged);
  }
  if (j.contains("stnet_train")) {
    json merged = cfg.stnet_train.to_json();
    merged.merge_patch(j.at("stnet_train"));
    cfg.stnet_train = TrainConfig::from_json(merged);
  }
  if (j.contains("pgnet")) {
    json merged = cfg.pgnet.to_json();
    merged.merge_patch(j.at("pgnet"));
    // Dims are filled from data later; skip validation here.
    PgnetConfig pg;
    pg.C_G = merged.value("C_G", pg.C_G);
    pg.F = merged.value("F", pg.F);
    pg.alpha = merged.value("alpha", pg.alpha);
    pg.gan_weight = merged.value("gan_weight", pg.gan_weight);
    pg.lstm_context = merged.value("lstm_context", pg.lstm_context);
    pg.embed_dim = merged.value("embed_dim", pg.embed_dim);
    pg.disc_layers = merged.value("disc_layers", pg.disc_layers);
    pg.disc_stride = merged.value("disc_stride", pg.disc_stride);
    pg.C_D = merged.value("C_D", pg.C_D);
    pg.poi_channels = merged.value("poi_channels", pg.poi_channels);
    pg.n = merged.value("n", pg.n);
    pg.time_slots = merged.value("time_slots", pg.time_slots);
    pg.gan_horizon = merged.value("gan_horizon", pg.gan_horizon);
    pg.fine_h = merged.value("fine_h", pg.fine_h);
    pg.fine_w = merged.value("fine_w", pg.fine_w);
    cfg.pgnet = pg;
  }
  if (j.contains("pgnet_train")) {
    json merged = cfg.pgnet_train.to_json();
    merged.merge_patch(j.at("pgnet_train"));
    cfg.pgnet_train = TrainConfig::from_json(merged);
  }
  if (j.contains("pada")) {
    json merged = cfg.pada.to_json();
    merged.merge_patch(j.at("pada"));
    cfg.pada = PadaConfig::from_json(merged);
  }
  cfg.t_window = j.value("t_window", cfg.stnet.T);
  cfg.week_slots = j.value("week_slots", cfg.week_slots);
  cfg.augment_frames = j.value("augment_frames", cfg.augment_frames);
  cfg.png_slots = j.value("png_slots", cfg.png_slots);

  // Seed overrides cascade into stage seeds unless explicitly set.
  if (!j.contains("stnet_train") || !j.at("stnet_train").contains("seed"))
    cfg.stnet_train.seed = cfg.seed;
  if (!j.contains("pgnet_train") || !j.at("pgnet_train").contains("seed"))
    cfg.pgnet_train.seed = cfg.seed;
  if (!j.contains("pada") || !j.at("pada").contains("seed")) cfg.pada.seed = cfg.seed;
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// context

ExperimentContext prepare_context(const ExperimentConfig& cfg) {
  cfg.validate();
  ExperimentContext ctx;
  ctx.cfg = cfg;
  ctx.stnet_cfg = cfg.stnet;

  if (cfg.scenario == Scenario::CrossCity) {
    ctx.source = generate_city(cfg.source_city);
    ctx.target = generate_city(cfg.target_city);
    const int n = cfg.stnet.n;
    ctx.source_windows = make_windows(ctx.source.population, n, cfg.t_window);
    ctx.source_split = split_source(ctx.source_windows.size(), cfg.seed);
    ctx.target_windows = make_windows(ctx.target.population, n, cfg.t_window);
    ctx.target_split = split_target(ctx.target_windows, ctx.target.population, cfg.week_slots);

    ctx.aug_coarse_series = coarsen(ctx.target.population.values, n);
    ctx.aug_poi = ctx.target.poi;
    ctx.pgnet_series = ctx.source.population.values;
    ctx.pgnet_poi = ctx.source.poi;

    ctx.pgnet_train_cfg = cfg.pgnet;
    ctx.pgnet_train_cfg.n = n;
    ctx.pgnet_train_cfg.fine_h = static_cast<int>(ctx.pgnet_series.dim(1));
    ctx.pgnet_train_cfg.fine_w = static_cast<int>(ctx.pgnet_series.dim(2));
    ctx.pgnet_aug_cfg = ctx.pgnet_train_cfg;
    ctx.pgnet_aug_cfg.fine_h = static_cast<int>(ctx.target.population.values.dim(1));
    ctx.pgnet_aug_cfg.fine_w = static_cast<int>(ctx.target.population.values.dim(2));
    return ctx;
  }

  // Cross-granularity: both stages live in the target city at n=2.
  // Pre-training maps coarse (n^2-pooled) to mid; fine-tuning maps mid to fine.
  ctx.target = generate_city(cfg.target_city);
  ctx.source = ctx.target;
  if (cfg.stnet.n != 2) {
    throw ConfigError("cross_granularity runs the two-stage x2 protocol; set stnet.n = 2");
  }
  Tensor mid = coarsen(ctx.target.population.values, 2);
  PopulationSeries mid_series;
  mid_series.values = mid;
  mid_series.cell_meters = ctx.target.population.cell_meters * 2;

  ctx.source_windows = make_windows(mid_series, 2, cfg.t_window);
  ctx.source_split = split_source(ctx.source_windows.size(), cfg.seed);
  ctx.target_windows = make_windows(ctx.target.population, 2, cfg.t_window);
  ctx.target_split = split_target(ctx.target_windows, ctx.target.population, cfg.week_slots);

  ctx.aug_coarse_series = mid;
  ctx.aug_poi = ctx.target.poi;
  ctx.pgnet_series = mid;
  ctx.pgnet_poi.counts = coarsen_poi(ctx.target.poi.counts, 2);
  ctx.pgnet_poi.categories = ctx.target.poi.categories;

  ctx.pgnet_train_cfg = cfg.pgnet;
  ctx.pgnet_train_cfg.n = 2;
  ctx.pgnet_train_cfg.fine_h = static_cast<int>(mid.dim(1));
  ctx.pgnet_train_cfg.fine_w = static_cast<int>(mid.dim(2));
  ctx.pgnet_aug_cfg = ctx.pgnet_train_cfg;
  ctx.pgnet_aug_cfg.fine_h = static_cast<int>(ctx.target.population.values.dim(1));
  ctx.pgnet_aug_cfg.fine_w = static_cast<int>(ctx.target.population.values.dim(2));
  return ctx;
}

// ---------------------------------------------------------------------------
// stages

Checkpoint stage_pretrain_stnet(ExperimentContext& ctx, bool temporal) {
  Rng rng = Rng(ctx.cfg.seed).fork(temporal ? 1 : 2);
  StnetParams params = make_stnet(ctx.stnet_cfg, rng);
  TrainResult tr = train_stnet(params, ctx.stnet_cfg, ctx.source_windows, ctx.source_split,
                               ctx.cfg.stnet_train, temporal);
  json extra = {{"seed", ctx.cfg.seed},
                {"temporal", temporal},
                {"best_val_rmse", tr.best_val_rmse},
                {"best_step", tr.best_step}};
  return stnet_checkpoint(params, ctx.stnet_cfg, extra);
}

Checkpoint stage_pretrain_pgnet(ExperimentContext& ctx) {
  Rng rng = Rng(ctx.cfg.seed).fork(3);
  PgnetParams params = make_pgnet(ctx.pgnet_train_cfg, rng);
  PgTrainResult tr =
      train_pgnet(params, ctx.pgnet_train_cfg, ctx.pgnet_series, ctx.pgnet_poi, ctx.cfg.pgnet_train);
  json extra = {{"seed", ctx.cfg.seed},
                {"best_val_flow_mse", tr.best_val_flow_mse},
                {"best_step", tr.best_step}};
  return pgnet_checkpoint(params, ctx.pgnet_train_cfg, extra);
}

std::vector<WindowSample> stage_augment(ExperimentContext& ctx, PgnetParams& pgnet_params) {
  return augment_target(ctx.target_split.reference, ctx.aug_poi, ctx.aug_coarse_series,
                        pgnet_params.gen, ctx.pgnet_aug_cfg, ctx.cfg.t_window,
                        ctx.cfg.augment_frames);
}

void stage_synth(const ExperimentConfig& cfg, const std::string& out_dir) {
  fs::create_directories(out_dir);
  SynthCity source = generate_city(cfg.source_city);
  SynthCity target = generate_city(cfg.target_city);
  const int cm = 500;
  save_population(out_dir + "/source_pop.pgrd", source.population, "source");
  save_poi(out_dir + "/source_poi.pgrd", source.poi, "source", cm);
  save_population(out_dir + "/target_pop.pgrd", target.population, "target");
  save_poi(out_dir + "/target_poi.pgrd", target.poi, "target", cm);

  json manifest = {{"stage", "synth"},
                   {"config", cfg.to_json()},
                   {"config_hash", hash_json(cfg.to_json())},
                   {"seed", cfg.seed},
                   {"outputs",
                    {{"source_pop.pgrd", hash_tensor(source.population.values)},
                     {"source_poi.pgrd", hash_tensor(source.poi.counts)},
                     {"target_pop.pgrd", hash_tensor(target.population.values)},
                     {"target_poi.pgrd", hash_tensor(target.poi.counts)}}}};
  std::ofstream ms(out_dir + "/manifest.json");
  ms << manifest.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// evaluation and reporting

namespace {

MetricReport evaluate_variant(StnetParams& params, ExperimentContext& ctx, bool temporal,
                              Tensor* pred_out) {
  Tensor pred =
      predict_stnet(params, ctx.stnet_cfg, ctx.target_windows, ctx.target_split.test, temporal);
  Tensor truth = reshape(stack_fine(ctx.target_windows, ctx.target_split.test), pred.shape());
  if (pred_out) *pred_out = pred;
  return evaluate(pred, truth);
}

MetricReport evaluate_bicubic(ExperimentContext& ctx, Tensor* pred_out) {
  const int n = ctx.stnet_cfg.n;
  const auto& windows = ctx.target_windows;
  const auto& idx = ctx.target_split.test;
  const Tensor& f0 = windows[static_cast<size_t>(idx[0])].fine_target;
  Tensor pred = Tensor::zeros({static_cast<int64_t>(idx.size()), f0.dim(1), f0.dim(2)});
  const int64_t frame = f0.dim(1) * f0.dim(2);
  for (size_t i = 0; i < idx.size(); ++i) {
    const WindowSample& s = windows[static_cast<size_t>(idx[i])];
    Tensor lastc = slice0(s.coarse_seq, s.coarse_seq.dim(0) - 1, 1);
    Tensor up = bicubic_upsample(lastc, n);
    std::copy(up.values().begin(), up.values().end(),
              pred.values().begin() + static_cast<int64_t>(i) * frame);
  }
  Tensor truth = reshape(stack_fine(windows, idx), pred.shape());
  if (pred_out) *pred_out = pred;
  return evaluate(pred, truth);
}

std::string format3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3f", v);
  return std::string(buf);
}

void dump_pngs(const std::string& dir, const std::string& name, const Tensor& pred,
               ExperimentContext& ctx) {
  const auto& idx = ctx.target_split.test;
  const int count = std::min<int>(ctx.cfg.png_slots, static_cast<int>(idx.size()));
  const int64_t frame = pred.dim(1) * pred.dim(2);
  for (int i = 0; i < count; ++i) {
    const int64_t slot = ctx.target_windows[static_cast<size_t>(idx[static_cast<size_t>(i)])].end_slot;
    Tensor one = Tensor::zeros({pred.dim(1), pred.dim(2)});
    std::copy(pred.values().begin() + i * frame, pred.values().begin() + (i + 1) * frame,
              one.values().begin());
    write_gray_png(dir + "/" + name + "_slot" + std::to_string(slot) + ".png", one);
  }
}

json row_to_json(const VariantRow& row) {
  json j = {{"name", row.name},
            {"rmse", row.metrics.rmse},
            {"nrmse", row.metrics.nrmse},
            {"mae", row.metrics.mae},
            {"corr", row.metrics.corr},
            {"param_count", row.params},
            {"n_cells", row.metrics.n_cells},
            {"n_slots", row.metrics.n_slots}};
  if (row.metrics.mape_defined) {
    j["mape"] = row.metrics.mape;
  } else {
    j["mape"] = nullptr;
  }
  return j;
}

}  // namespace

RunOutput run_experiment(const ExperimentConfig& cfg) {
  ExperimentContext ctx = prepare_context(cfg);
  fs::create_directories(cfg.out_dir);
  fs::create_directories(cfg.out_dir + "/png");

  const auto needs = [&](Variant v) {
    for (Variant have : cfg.variants) {
      if (have == v) return true;
    }
    return false;
  };
  const bool need_stnet = needs(Variant::Stnet) || needs(Variant::StnetPgnet) || needs(Variant::Psrnet);
  const bool need_snet = needs(Variant::Snet) || needs(Variant::SnetPgnet);
  const bool need_pgnet =
      needs(Variant::SnetPgnet) || needs(Variant::StnetPgnet) || needs(Variant::Psrnet);

  json stage_log;

  std::optional<Checkpoint> stnet_ck, snet_ck, pgnet_ck;
  if (need_stnet) {
    stnet_ck = stage_pretrain_stnet(ctx, true);
    stage_log["stnet_pretrain"] = {{"best_val_rmse", stnet_ck->meta.at("best_val_rmse")},
                                   {"best_step", stnet_ck->meta.at("best_step")}};
  }
  if (need_snet) {
    snet_ck = stage_pretrain_stnet(ctx, false);
    stage_log["snet_pretrain"] = {{"best_val_rmse", snet_ck->meta.at("best_val_rmse")},
                                  {"best_step", snet_ck->meta.at("best_step")}};
  }
  std::vector<WindowSample> augmented;
  if (need_pgnet) {
    pgnet_ck = stage_pretrain_pgnet(ctx);
    stage_log["pgnet_pretrain"] = {{"best_val_flow_mse", pgnet_ck->meta.at("best_val_flow_mse")},
                                   {"best_step", pgnet_ck->meta.at("best_step")}};
    PgnetParams pg = pgnet_from_checkpoint(*pgnet_ck);
    // Generation runs at the augmentation granularity.
    augmented = stage_augment(ctx, pg);
    stage_log["augment"] = {{"frames", augmented.size()},
                            {"reference_slot", ctx.target_split.reference.slot_index}};
  }

  // Source stream for PADA: the pre-training task's training windows.
  std::vector<WindowSample> source_train;
  if (needs(Variant::Psrnet)) {
    source_train.reserve(ctx.source_split.train.size());
    for (int64_t i : ctx.source_split.train)
      source_train.push_back(ctx.source_windows[static_cast<size_t>(i)]);
  }

  RunOutput out;
  {
    VariantRow row;
    row.name = "Bicubic";
    Tensor pred;
    row.metrics = evaluate_bicubic(ctx, &pred);
    row.params = 0;
    dump_pngs(cfg.out_dir + "/png", "bicubic", pred, ctx);
    out.rows.push_back(row);

    // Ground-truth frames once.
    Tensor truth = reshape(stack_fine(ctx.target_windows, ctx.target_split.test), pred.shape());
    dump_pngs(cfg.out_dir + "/png", "truth", truth, ctx);
  }

  for (Variant v : cfg.variants) {
    VariantRow row;
    row.name = to_string(v);
    const bool temporal = v != Variant::Snet && v != Variant::SnetPgnet;
    const Checkpoint& base = temporal ? *stnet_ck : *snet_ck;
    StnetParams params = stnet_from_checkpoint(base);
    row.params = params.count();

    if (v == Variant::SnetPgnet || v == Variant::StnetPgnet) {
      PadaConfig naive = ctx.cfg.pada;
      naive.lambda_adv = 0.0;
      finetune_naive(params, ctx.stnet_cfg, augmented, naive, temporal);
    } else if (v == Variant::Psrnet) {
      pada_finetune(params, ctx.stnet_cfg, source_train, augmented, ctx.cfg.pada, temporal);
    }

    Tensor pred;
    row.metrics = evaluate_variant(params, ctx, temporal, &pred);
    dump_pngs(cfg.out_dir + "/png", row.name, pred, ctx);
    out.rows.push_back(row);

    if (v == Variant::Psrnet || v == Variant::StnetPgnet || v == Variant::SnetPgnet) {
      Checkpoint finetuned = stnet_checkpoint(params, ctx.stnet_cfg,
                                              {{"seed", cfg.seed}, {"variant", row.name}});
      finetuned.save(cfg.out_dir + "/" + row.name + ".ck");
    }
  }

  // Reports: full precision in JSON, 3-decimal display in Markdown.
  json report;
  report["scenario"] = to_string(cfg.scenario);
  report["seed"] = cfg.seed;
  report["n"] = ctx.stnet_cfg.n;
  report["config_hash"] = hash_json(cfg.to_json());
  report["rows"] = json::array();
  for (const VariantRow& row : out.rows) report["rows"].push_back(row_to_json(row));
  report["stages"] = stage_log;

  out.report_json_path = cfg.out_dir + "/report.json";
  {
    std::ofstream os(out.report_json_path);
    os << report.dump(2) << "\n";
  }

  out.report_md_path = cfg.out_dir + "/report.md";
  {
    std::ostringstream md;
    md << "# " << to_string(cfg.scenario) << " (x" << ctx.stnet_cfg.n << ", seed " << cfg.seed
       << ")\n\n";
    md << "| Model | RMSE | NRMSE | MAE | MAPE | Corr | Params |\n";
    md << "|---|---|---|---|---|---|---|\n";
    for (const VariantRow& row : out.rows) {
      md << "| " << row.name << " | " << format3(row.metrics.rmse) << " | "
         << format3(row.metrics.nrmse) << " | " << format3(row.metrics.mae) << " | "
         << (row.metrics.mape_defined ? format3(row.metrics.mape) : std::string("n/a")) << " | "
         << format3(row.metrics.corr) << " | " << row.params << " |\n";
    }
    std::ofstream os(out.report_md_path);
    os << md.str();
  }

  out.manifest_path = cfg.out_dir + "/manifest.json";
  {
    json manifest = {{"stage", "run-all"},
                     {"config", cfg.to_json()},
                     {"config_hash", hash_json(cfg.to_json())},
                     {"seed", cfg.seed},
                     {"inputs",
                      {{"source_pop", hash_tensor(ctx.source.population.values)},
                       {"source_poi", hash_tensor(ctx.source.poi.counts)},
                       {"target_pop", hash_tensor(ctx.target.population.values)},
                       {"target_poi", hash_tensor(ctx.target.poi.counts)}}},
                     {"stages", stage_log}};
    std::ofstream os(out.manifest_path);
    os << manifest.dump(2) << "\n";
  }
  return out;
}

}  // namespace psr
