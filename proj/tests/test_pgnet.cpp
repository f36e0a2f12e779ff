#include <doctest.h>

#include <cmath>

#include "psr/pgnet.hpp"
#include "psr/synth.hpp"

using namespace psr;

namespace {

PgnetConfig tiny_cfg(int nH = 8, int nW = 8) {
  PgnetConfig cfg;
  cfg.C_G = 6;
  cfg.F = 5;
  cfg.alpha = 1.0;
  cfg.lstm_context = 4;
  cfg.embed_dim = 4;
  cfg.disc_layers = 2;
  cfg.disc_stride = 2;
  cfg.C_D = 2;
  cfg.n = 2;
  cfg.fine_h = nH;
  cfg.fine_w = nW;
  return cfg;
}

Tensor random_poi(Rng& rng, int C, int nH, int nW) {
  Tensor t = Tensor::zeros({C, nH, nW});
  for (double& v : t.values()) v = static_cast<double>(rng.below(20));
  return t;
}

}  // namespace

TEST_CASE("flow_targets basics") {
  SUBCASE("constant series has zero flows") {
    Tensor s = Tensor::full({4, 2, 2}, 3.0);
    Tensor f = flow_targets(s);
    CHECK(f.shape() == Shape{3, 2, 2});
    for (double v : f.values()) CHECK(v == 0.0);
  }

  SUBCASE("per-cell [1,3,2] gives flows [2,-1]") {
    Tensor s = Tensor::from_data({3, 1, 1}, {1, 3, 2});
    Tensor f = flow_targets(s);
    CHECK(f.values() == std::vector<double>{2, -1});
  }

  SUBCASE("prefix-sum accumulation reconstructs integer series exactly") {
    Rng rng(1);
    Tensor s = Tensor::zeros({12, 3, 3});
    for (double& v : s.values()) v = static_cast<double>(rng.below(500));
    Tensor f = flow_targets(s);
    const int64_t frame = 9;
    for (int64_t t = 0; t < 12; ++t) {
      for (int64_t i = 0; i < frame; ++i) {
        double acc = s.values()[static_cast<size_t>(i)];
        for (int64_t u = 0; u < t; ++u) acc += f.values()[static_cast<size_t>(u * frame + i)];
        CHECK(acc == s.values()[static_cast<size_t>(t * frame + i)]);
      }
    }
  }

  SUBCASE("too-short series throws") {
    CHECK_THROWS_AS(flow_targets(Tensor::zeros({1, 2, 2})), ShapeError);
  }
}

TEST_CASE("generator output shape and zero-gate behavior") {
  Rng rng(2);
  PgnetConfig cfg = tiny_cfg();
  PgnetParams p = make_pgnet(cfg, rng);
  Tensor poi = random_poi(rng, cfg.poi_channels, 8, 8);

  Tensor flow = pg_generator_forward(7, poi, p.gen, cfg);
  CHECK(flow.shape() == Shape{1, 8, 8});

  // Zeroed LSTM kills the time gate, so the flow is constant across slots.
  NamedParams lstm_params;
  collect(p.gen.lstm, "lstm", lstm_params);
  for (auto& [name, t] : lstm_params) std::fill(t.values().begin(), t.values().end(), 0.0);
  Tensor f1 = pg_generator_forward(3, poi, p.gen, cfg);
  Tensor f2 = pg_generator_forward(29, poi, p.gen, cfg);
  CHECK(f1.values() == f2.values());
}

TEST_CASE("generator gradient reaches the embedding table") {
  Rng rng(3);
  PgnetConfig cfg = tiny_cfg();
  PgnetParams p = make_pgnet(cfg, rng);
  Tensor poi = random_poi(rng, cfg.poi_channels, 8, 8);
  zero_grad(tensors_of(p.gen.trainable()));
  Tape tape;
  Tensor flow = pg_generator_forward(5, poi, p.gen, cfg);
  backward(sum_all(flow));
  double norm = 0;
  for (double g : p.gen.embed_table.grad()) norm += g * g;
  CHECK(norm > 0.0);
}

TEST_CASE("synthesize_series zero flows reproduce the normalized reference") {
  Rng rng(4);
  Tensor ref = Tensor::zeros({1, 4, 4});
  for (double& v : ref.values()) v = static_cast<double>(rng.below(30));
  std::vector<Tensor> fwd(2, Tensor::zeros({1, 4, 4}));
  std::vector<Tensor> bwd(1, Tensor::zeros({1, 4, 4}));
  std::vector<Tensor> coarse;
  for (int i = 0; i < 4; ++i) {
    Tensor c = Tensor::zeros({1, 2, 2});
    for (double& v : c.values()) v = static_cast<double>(rng.below(100) + 1);
    coarse.push_back(c);
  }
  Tensor out = synthesize_series(ref, fwd, bwd, coarse, 2);
  CHECK(out.shape() == Shape{4, 4, 4});
  for (int i = 0; i < 4; ++i) {
    Tensor expect = n2_normalize(reshape(ref, {1, 1, 4, 4}), reshape(coarse[static_cast<size_t>(i)], {1, 1, 2, 2}), 2);
    for (int64_t j = 0; j < 16; ++j) {
      CHECK(out.values()[static_cast<size_t>(i * 16 + j)] ==
            doctest::Approx(expect.values()[static_cast<size_t>(j)]).epsilon(1e-12));
    }
  }
}

TEST_CASE("synthesize_series frame ordering and coarse consistency") {
  Rng rng(5);
  Tensor ref = Tensor::full({1, 2, 2}, 10.0);
  // Distinct constant flows so each output frame is identifiable.
  std::vector<Tensor> fwd = {Tensor::full({1, 2, 2}, 1.0), Tensor::full({1, 2, 2}, 2.0)};
  std::vector<Tensor> bwd = {Tensor::full({1, 2, 2}, 4.0)};
  std::vector<Tensor> coarse;
  for (int i = 0; i < 4; ++i) coarse.push_back(Tensor::full({1, 1, 1}, 40.0 + 4 * i));
  Tensor out = synthesize_series(ref, fwd, bwd, coarse, 2);
  CHECK(out.shape() == Shape{4, 2, 2});
  // offsets: [-1, ref, +1, +2]; pre-normalization cell values 6, 10, 11, 13.
  // Uniform cells survive normalization as coarse/4.
  CHECK(out.values()[0] == doctest::Approx(10.0));   // 40/4
  CHECK(out.values()[4] == doctest::Approx(11.0));   // 44/4
  CHECK(out.values()[8] == doctest::Approx(12.0));   // 48/4
  CHECK(out.values()[12] == doctest::Approx(13.0));  // 52/4

  // Every frame sums to its slot's coarse value.
  for (int i = 0; i < 4; ++i) {
    double sum = 0;
    for (int j = 0; j < 4; ++j) sum += out.values()[static_cast<size_t>(i * 4 + j)];
    CHECK(sum == doctest::Approx(40.0 + 4 * i).epsilon(1e-9));
  }

  coarse.pop_back();
  CHECK_THROWS_AS(synthesize_series(ref, fwd, bwd, coarse, 2), DataError);
}

TEST_CASE("synthesizing with true flows reproduces the true series up to the projection") {
  CitySpec spec;
  spec.seed = 6;
  spec.nH = 8;
  spec.nW = 8;
  spec.n = 2;
  spec.days = 2;
  SynthCity city = generate_city(spec);
  const Tensor& series = city.population.values;
  Tensor flows = flow_targets(series);
  Tensor coarse_series = coarsen(series, 2);

  const int64_t r = 50;
  const int ell_f = 2, ell_b = 2;
  Tensor ref = slice0(series, r, 1);
  std::vector<Tensor> fwd, bwd, coarse;
  for (int k = 0; k < ell_f; ++k) fwd.push_back(slice0(flows, r + k, 1));
  for (int k = 0; k < ell_b; ++k) bwd.push_back(slice0(flows, r - 1 - k, 1));
  for (int o = -ell_b; o <= ell_f; ++o) coarse.push_back(slice0(coarse_series, r + o, 1));
  Tensor out = synthesize_series(ref, fwd, bwd, coarse, 2);

  // True accumulations equal the true frames, and those already satisfy the
  // coarse constraint, so the projection moves nothing beyond its eps floor.
  for (int i = 0; i < 5; ++i) {
    const int64_t slot = r - ell_b + i;
    for (int64_t j = 0; j < 64; ++j) {
      const double expect = series.values()[static_cast<size_t>(slot * 64 + j)];
      CHECK(out.values()[static_cast<size_t>(i * 64 + j)] ==
            doctest::Approx(expect).epsilon(1e-6));
    }
  }
}

TEST_CASE("discriminator scores lie in (0,1), one per batch element") {
  Rng rng(7);
  PgnetConfig cfg = tiny_cfg();
  PgnetParams p = make_pgnet(cfg, rng);
  Tensor batch = Tensor::uniform({3, 1, 8, 8}, rng, 0, 50);
  Tensor scores = pg_discriminator_forward(batch, p.disc, cfg);
  CHECK(scores.shape() == Shape{3});
  for (double v : scores.values()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
}

TEST_CASE("gradient check through the full discriminator") {
  Rng rng(8);
  PgnetConfig cfg = tiny_cfg(4, 4);
  PgnetParams p = make_pgnet(cfg, rng);
  Tensor x = Tensor::uniform({1, 1, 4, 4}, rng, 0, 5);
  auto f = [&](const Tensor& t) {
    PgnetParams q = p;
    Tensor s = pg_discriminator_forward(t, q.disc, cfg);
    return bce_loss(s, Tensor::full({1}, 1.0));
  };
  CHECK(grad_check(f, x, 1e-6) <= 1e-4);
}

TEST_CASE("gradient check through generator, synthesis and discriminator") {
  Rng rng(9);
  PgnetConfig cfg = tiny_cfg(4, 4);
  cfg.lstm_context = 2;
  PgnetParams p = make_pgnet(cfg, rng);
  // Default-init weights attenuate input gradients to ~1e-9, below what
  // central differences at eps=1e-6 can resolve against an O(1) loss value;
  // amplifying the weights keeps the check well conditioned without changing
  // what it verifies.
  for (auto& [name, t] : p.gen.trainable())
    for (double& v : t.values()) v *= 3.0;
  for (auto& [name, t] : p.disc.trainable())
    for (double& v : t.values()) v *= 2.0;
  Tensor ref = Tensor::uniform({1, 4, 4}, rng, 1, 10);
  Tensor coarse = Tensor::uniform({1, 2, 2}, rng, 5, 40);
  Tensor w = Tensor::uniform({2, 4, 4}, rng, -1, 1);
  auto f = [&](const Tensor& poi) {
    PgnetParams q = p;
    Tensor flow = pg_generator_forward(3, poi, q.gen, cfg);
    Tensor frame = synthesize_series(ref, {flow}, {}, {coarse, coarse}, cfg.n);
    Tensor score = pg_discriminator_forward(reshape(slice0(frame, 1, 1), {1, 1, 4, 4}), q.disc, cfg);
    return add(sum_all(mul(frame, w)), mul_scalar(bce_loss(score, Tensor::full({1}, 1.0)), 3.0));
  };
  Tensor poi = Tensor::uniform({cfg.poi_channels, 4, 4}, rng, 0, 3);
  CHECK(grad_check(f, poi, 1e-6) <= 1e-4);
}

TEST_CASE("pure-MSE training reduces validation flow error") {
  CitySpec spec;
  spec.seed = 10;
  spec.nH = 8;
  spec.nW = 8;
  spec.n = 2;
  spec.days = 4;
  SynthCity city = generate_city(spec);

  PgnetConfig cfg = tiny_cfg();
  cfg.gan_weight = 0.0;
  Rng prng(10);
  PgnetParams p = make_pgnet(cfg, prng);

  // Validation error of the untrained generator.
  Tensor flows = flow_targets(city.population.values);
  DatasetSplit split = split_source(static_cast<size_t>(flows.dim(0)), 11);
  auto val_mse = [&]() {
    NoTape guard;
    double acc = 0;
    for (size_t i = 0; i < split.val.size(); ++i) {
      Tensor pred =
          pg_generator_forward(static_cast<int>(split.val[i] % 48), city.poi.counts, p.gen, cfg);
      acc += mse_loss(pred, slice0(flows, split.val[i], 1)).item();
    }
    return acc / static_cast<double>(split.val.size());
  };
  const double before = val_mse();

  TrainConfig tc;
  tc.batch = 2;
  tc.max_steps = 60;
  tc.eval_every = 20;
  tc.lr = 2e-3;
  tc.seed = 11;
  PgTrainResult r = train_pgnet(p, cfg, city.population.values, city.poi, tc);
  const double after = val_mse();
  CHECK(after < before);
  CHECK(r.best_val_flow_mse < before);
}

TEST_CASE("adversarial training keeps loss bookkeeping and a live discriminator") {
  CitySpec spec;
  spec.seed = 12;
  spec.nH = 8;
  spec.nW = 8;
  spec.n = 2;
  spec.days = 3;
  SynthCity city = generate_city(spec);

  PgnetConfig cfg = tiny_cfg();
  cfg.gan_weight = 1.0;
  cfg.alpha = 0.5;
  Rng prng(12);
  PgnetParams p = make_pgnet(cfg, prng);
  TrainConfig tc;
  tc.batch = 2;
  tc.max_steps = 30;
  tc.eval_every = 10;
  tc.seed = 12;
  PgTrainResult r = train_pgnet(p, cfg, city.population.values, city.poi, tc);

  REQUIRE(!r.losses.empty());
  for (const auto& rec : r.losses) {
    CHECK(rec.total ==
          doctest::Approx(cfg.gan_weight * rec.gan + cfg.alpha * rec.mse).epsilon(1e-12));
  }

  REQUIRE(r.disc_scores_real.size() > 1);
  double mean = 0;
  for (double s : r.disc_scores_real) {
    CHECK(s > 0.0);
    CHECK(s < 1.0);
    mean += s;
  }
  mean /= static_cast<double>(r.disc_scores_real.size());
  double var = 0;
  for (double s : r.disc_scores_real) var += (s - mean) * (s - mean);
  const double stddev = std::sqrt(var / static_cast<double>(r.disc_scores_real.size()));
  CHECK(stddev > 1e-6);
}

TEST_CASE("augment_target produces consistent window samples") {
  CitySpec spec;
  spec.seed = 13;
  spec.nH = 8;
  spec.nW = 8;
  spec.n = 2;
  spec.days = 3;
  SynthCity city = generate_city(spec);
  Tensor coarse_series = coarsen(city.population.values, 2);

  PgnetConfig cfg = tiny_cfg();
  Rng prng(13);
  PgnetParams p = make_pgnet(cfg, prng);

  ReferenceSnapshot ref;
  const int64_t r = 70;
  ref.values = slice0(city.population.values, r, 1);
  ref.slot_index = r;

  SUBCASE("F=1 keeps only the reference sample") {
    auto samples = augment_target(ref, city.poi, coarse_series, p.gen, cfg, 12, 1);
    CHECK(samples.size() == 1);
    CHECK(samples[0].end_slot == r);
  }

  SUBCASE("F=9 gives nine contiguous slots around the reference") {
    auto samples = augment_target(ref, city.poi, coarse_series, p.gen, cfg, 12, 9);
    CHECK(samples.size() == 9);
    for (int i = 0; i < 9; ++i) CHECK(samples[static_cast<size_t>(i)].end_slot == r - 4 + i);
  }

  SUBCASE("every sample passes the coarsen-consistency invariant") {
    auto samples = augment_target(ref, city.poi, coarse_series, p.gen, cfg, 12, 5);
    for (const auto& s : samples) {
      Tensor back = coarsen(s.fine_target, 2);
      const int64_t frame = back.dim(1) * back.dim(2);
      for (int64_t i = 0; i < frame; ++i) {
        const double c =
            s.coarse_seq.values()[static_cast<size_t>((s.coarse_seq.dim(0) - 1) * frame + i)];
        CHECK(std::abs(back.values()[static_cast<size_t>(i)] - c) <=
              1e-6 * std::max(1.0, std::abs(c)));
      }
      for (double v : s.fine_target.values()) CHECK(v >= 0.0);
    }
  }

  SUBCASE("reference too near the boundary throws") {
    ReferenceSnapshot early;
    early.values = ref.values;
    early.slot_index = 5;
    CHECK_THROWS_AS(augment_target(early, city.poi, coarse_series, p.gen, cfg, 12, 9), DataError);
    ReferenceSnapshot late;
    late.values = ref.values;
    late.slot_index = coarse_series.dim(0) - 1;
    CHECK_THROWS_AS(augment_target(late, city.poi, coarse_series, p.gen, cfg, 12, 9), DataError);
  }
}

TEST_CASE("pgnet checkpoint round trip") {
  Rng rng(14);
  PgnetConfig cfg = tiny_cfg();
  PgnetParams p = make_pgnet(cfg, rng);
  Tensor poi = random_poi(rng, cfg.poi_channels, 8, 8);
  Tensor before = pg_generator_forward(9, poi, p.gen, cfg);

  const auto path = std::filesystem::temp_directory_path() / "psr_pgnet_ck.bin";
  pgnet_checkpoint(p, cfg, {{"seed", 14}}).save(path.string());
  PgnetConfig cfg2;
  PgnetParams p2 = pgnet_from_checkpoint(Checkpoint::load(path.string()), &cfg2);
  Tensor after = pg_generator_forward(9, poi, p2.gen, cfg2);
  CHECK(before.values() == after.values());
  std::filesystem::remove(path);
}
