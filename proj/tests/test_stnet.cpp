#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "psr/stnet.hpp"
#include "psr/synth.hpp"

using namespace psr;

namespace {

StnetConfig tiny_cfg() {
  StnetConfig cfg;
  cfg.T = 12;
  cfg.T_S = 3;
  cfg.C_B = 6;
  cfg.C_T = 4;
  cfg.n = 2;
  return cfg;
}

void zero_temporal_path(StnetParams& p) {
  for (Tensor* t : {&p.merge3d.weight, &p.merge3d.bias, &p.tunit1.weight, &p.tunit1.bias,
                    &p.tunit2.weight, &p.tunit2.bias}) {
    std::fill(t->values().begin(), t->values().end(), 0.0);
  }
}

std::vector<WindowSample> tiny_samples(uint64_t seed, const StnetConfig& cfg, int days = 2) {
  CitySpec spec;
  spec.seed = seed;
  spec.nH = 12;
  spec.nW = 12;
  spec.n = cfg.n;
  spec.days = days;
  SynthCity city = generate_city(spec);
  return make_windows(city.population, cfg.n, cfg.T);
}

}  // namespace

TEST_CASE("tnet_features counts and shapes") {
  Rng rng(1);
  StnetConfig cfg = tiny_cfg();
  StnetParams p = make_stnet(cfg, rng);

  SUBCASE("T == T_S gives a single feature map") {
    StnetConfig c1 = cfg;
    c1.T = 3;
    c1.T_S = 3;
    StnetParams p1 = make_stnet(c1, rng);
    Tensor x = Tensor::uniform({2, 3, 4, 4}, rng, 0, 1);
    auto f = tnet_features(x, p1, c1);
    CHECK(f.size() == 1);
  }

  SUBCASE("T=12, T_S=3 gives 4 maps of [B, C_B, H, W]") {
    Tensor x = Tensor::uniform({2, 12, 5, 4}, rng, 0, 1);
    auto f = tnet_features(x, p, cfg);
    CHECK(f.size() == 4);
    for (const Tensor& t : f) CHECK(t.shape() == Shape{2, 6, 5, 4});
  }

  SUBCASE("wrong sequence length throws") {
    Tensor x = Tensor::uniform({1, 9, 4, 4}, rng, 0, 1);
    CHECK_THROWS_AS(tnet_features(x, p, cfg), ShapeError);
  }
}

TEST_CASE("shared unit processes frames independently of batch order") {
  Rng rng(2);
  StnetConfig cfg = tiny_cfg();
  StnetParams p = make_stnet(cfg, rng);
  Tensor a = Tensor::uniform({1, 12, 4, 4}, rng, 0, 5);
  Tensor b = Tensor::uniform({1, 12, 4, 4}, rng, 0, 5);
  Tensor ab = concat({a, b}, 0);
  Tensor ba = concat({b, a}, 0);
  auto f_ab = tnet_features(ab, p, cfg);
  auto f_ba = tnet_features(ba, p, cfg);
  const int64_t half = f_ab[0].numel() / 2;
  for (size_t l = 0; l < f_ab.size(); ++l) {
    for (int64_t i = 0; i < half; ++i) {
      CHECK(f_ab[l].values()[static_cast<size_t>(i)] ==
            f_ba[l].values()[static_cast<size_t>(half + i)]);
      CHECK(f_ab[l].values()[static_cast<size_t>(half + i)] ==
            f_ba[l].values()[static_cast<size_t>(i)]);
    }
  }
}

TEST_CASE("stnet output satisfies the sum constraint for random parameters") {
  Rng rng(3);
  StnetConfig cfg = tiny_cfg();
  for (int trial = 0; trial < 5; ++trial) {
    Rng prng(100 + static_cast<uint64_t>(trial));
    StnetParams p = make_stnet(cfg, prng);
    Tensor x = Tensor::uniform({2, 12, 4, 4}, rng, 0, 20);
    Tensor y = stnet_forward(x, p, cfg, {true, true});
    CHECK(y.shape() == Shape{2, 1, 8, 8});
    for (double v : y.values()) {
      CHECK(std::isfinite(v));
      CHECK(v >= 0.0);
    }
    Tensor back = sum_pool2d(y, cfg.n);
    Tensor lastc = last_frame(x);
    for (int64_t i = 0; i < back.numel(); ++i) {
      const double c = lastc.values()[static_cast<size_t>(i)];
      CHECK(std::abs(back.values()[static_cast<size_t>(i)] - c) <=
            1e-6 * std::max(1.0, std::abs(c)));
    }
  }
}

TEST_CASE("stnet output shape for H=W=8, n=4") {
  Rng rng(4);
  StnetConfig cfg = tiny_cfg();
  cfg.n = 4;
  StnetParams p = make_stnet(cfg, rng);
  Tensor x = Tensor::uniform({3, 12, 8, 8}, rng, 0, 10);
  Tensor y = stnet_forward(x, p, cfg);
  CHECK(y.shape() == Shape{3, 1, 32, 32});
}

TEST_CASE("snet equals stnet with zeroed temporal path, bitwise") {
  Rng rng(5);
  StnetConfig cfg = tiny_cfg();
  StnetParams p = make_stnet(cfg, rng);
  zero_temporal_path(p);
  Tensor x = Tensor::uniform({2, 12, 4, 4}, rng, 0, 10);
  Tensor via_stnet = stnet_forward(x, p, cfg, {false, false});
  Tensor via_snet = snet_forward(x, p, cfg, {false, false});
  CHECK(via_stnet.values() == via_snet.values());
}

TEST_CASE("snet constraint and shape") {
  Rng rng(6);
  StnetConfig cfg = tiny_cfg();
  StnetParams p = make_stnet(cfg, rng);
  Tensor lastc = Tensor::uniform({1, 1, 4, 4}, rng, 0, 9);
  Tensor y = snet_forward(lastc, p, cfg);
  CHECK(y.shape() == Shape{1, 1, 8, 8});
  Tensor back = sum_pool2d(y, cfg.n);
  for (int64_t i = 0; i < back.numel(); ++i) {
    CHECK(std::abs(back.values()[static_cast<size_t>(i)] -
                   lastc.values()[static_cast<size_t>(i)]) <=
          1e-6 * std::max(1.0, lastc.values()[static_cast<size_t>(i)]));
  }
}

TEST_CASE("extract_features matches the tensor observed inside stnet_forward") {
  Rng rng(7);
  StnetConfig cfg = tiny_cfg();
  StnetParams p = make_stnet(cfg, rng);
  Tensor x = Tensor::uniform({2, 12, 4, 4}, rng, 0, 10);
  Tensor hook;
  (void)stnet_forward(x, p, cfg, {false, false}, &hook);
  Tensor direct = extract_features(x, p, cfg, {false, false});
  CHECK(hook.shape() == Shape{2, cfg.C_B, 4, 4});
  CHECK(direct.values() == hook.values());
}

TEST_CASE("full stnet gradient check on a tiny configuration") {
  Rng rng(8);
  StnetConfig cfg;
  cfg.T = 4;
  cfg.T_S = 2;
  cfg.C_B = 3;
  cfg.C_T = 2;
  cfg.n = 2;
  StnetParams p = make_stnet(cfg, rng);
  Tensor x = Tensor::uniform({1, 4, 2, 2}, rng, 0.5, 10.0);
  Tensor target = Tensor::uniform({1, 1, 4, 4}, rng, 0, 5);
  auto f = [&](const Tensor& t) {
    StnetParams q = p;
    return mse_loss(stnet_forward(t, q, cfg, {true, false}), target);
  };
  CHECK(grad_check(f, x, 1e-6) <= 1e-4);
}

TEST_CASE("training loss decreases over 50 steps (3-seed mean)") {
  StnetConfig cfg = tiny_cfg();
  double first = 0, last = 0;
  for (uint64_t seed = 1; seed <= 3; ++seed) {
    auto samples = tiny_samples(seed, cfg);
    DatasetSplit split = split_source(samples.size(), seed);
    Rng prng(seed);
    StnetParams p = make_stnet(cfg, prng);
    TrainConfig tc;
    tc.batch = 3;
    tc.max_steps = 50;
    tc.eval_every = 50;
    tc.lr = 1e-3;
    tc.seed = seed;
    TrainResult r = train_stnet(p, cfg, samples, split, tc);
    first += r.losses.front();
    last += r.losses.back();
  }
  CHECK(last / 3.0 < first / 3.0);
}

TEST_CASE("training is deterministic given a seed") {
  StnetConfig cfg = tiny_cfg();
  auto samples = tiny_samples(7, cfg);
  DatasetSplit split = split_source(samples.size(), 7);
  TrainConfig tc;
  tc.batch = 2;
  tc.max_steps = 10;
  tc.eval_every = 5;
  tc.seed = 7;

  auto run = [&]() {
    Rng prng(7);
    StnetParams p = make_stnet(cfg, prng);
    train_stnet(p, cfg, samples, split, tc);
    NamedParams st = p.state();
    std::vector<double> flat;
    for (auto& [name, t] : st) flat.insert(flat.end(), t.values().begin(), t.values().end());
    return flat;
  };
  CHECK(run() == run());
}

TEST_CASE("checkpoint round trip preserves forward outputs bitwise") {
  Rng rng(9);
  StnetConfig cfg = tiny_cfg();
  StnetParams p = make_stnet(cfg, rng);
  // Perturb BN running stats so the state path is exercised.
  Tensor x = Tensor::uniform({2, 12, 4, 4}, rng, 0, 10);
  (void)stnet_forward(x, p, cfg, {true, true});

  const auto path = std::filesystem::temp_directory_path() / "psr_stnet_ck.bin";
  Checkpoint ck = stnet_checkpoint(p, cfg, {{"seed", 9}});
  ck.save(path.string());
  Checkpoint loaded = Checkpoint::load(path.string());
  CHECK(loaded.meta.at("seed") == 9);
  CHECK(loaded.meta.at("param_count") == p.count());
  StnetConfig cfg2;
  StnetParams p2 = stnet_from_checkpoint(loaded, &cfg2);
  CHECK(cfg2.n == cfg.n);
  Tensor y1 = stnet_forward(x, p, cfg, {false, false});
  Tensor y2 = stnet_forward(x, p2, cfg2, {false, false});
  CHECK(y1.values() == y2.values());
  std::filesystem::remove(path);
}
