#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "psr/grid.hpp"

using namespace psr;

namespace {

PopulationSeries series_from(const Tensor& t) {
  PopulationSeries s;
  s.values = t;
  s.cell_meters = 500;
  return s;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("coarsen n=1 is identity") {
  Rng rng(1);
  Tensor x = Tensor::uniform({3, 4, 4}, rng, 0, 9);
  CHECK(coarsen(x, 1).values() == x.values());
}

TEST_CASE("coarsen sums 2x2 blocks") {
  Tensor x = Tensor::from_data({1, 2, 2}, {1, 2, 3, 4});
  Tensor c = coarsen(x, 2);
  CHECK(c.shape() == Shape{1, 1, 1});
  CHECK(c.item() == 10.0);
}

TEST_CASE("coarsen matches naive loop exactly on integer data") {
  Rng rng(2);
  Tensor x = Tensor::zeros({2, 8, 8});
  for (double& v : x.values()) v = static_cast<double>(rng.below(100));
  Tensor c = coarsen(x, 4);
  auto expect = oracles::coarsen(x.values(), 2, 8, 8, 4);
  CHECK(c.values() == expect);
}

TEST_CASE("coarsen conserves mass") {
  Rng rng(3);
  Tensor x = Tensor::uniform({4, 8, 8}, rng, 0, 50);
  Tensor c = coarsen(x, 2);
  double before = 0, after = 0;
  for (double v : x.values()) before += v;
  for (double v : c.values()) after += v;
  CHECK(after == doctest::Approx(before).epsilon(1e-9));
}

TEST_CASE("coarsen rejects indivisible dims") {
  Tensor x = Tensor::zeros({1, 6, 6});
  CHECK_THROWS_AS(coarsen(x, 4), ShapeError);
}

TEST_CASE("make_windows counts and internal consistency") {
  Rng rng(4);
  Tensor values = Tensor::zeros({50, 4, 4});
  for (double& v : values.values()) v = static_cast<double>(rng.below(30));

  SUBCASE("T == T_w gives exactly one sample") {
    Tensor v = Tensor::uniform({6, 4, 4}, rng, 0, 5);
    auto samples = make_windows(series_from(v), 2, 6);
    CHECK(samples.size() == 1);
  }

  SUBCASE("T=50, T_w=48 gives 3 samples") {
    auto samples = make_windows(series_from(values), 2, 48);
    CHECK(samples.size() == 3);
    CHECK(samples[0].end_slot == 47);
    CHECK(samples[0].t_of_day == 47);
    CHECK(samples[2].end_slot == 49);
    CHECK(samples[2].t_of_day == 1);
  }

  SUBCASE("coarsen of target equals last coarse frame exactly") {
    auto samples = make_windows(series_from(values), 2, 10);
    for (const auto& s : samples) {
      Tensor back = coarsen(s.fine_target, 2);
      const int64_t frame = s.coarse_seq.dim(1) * s.coarse_seq.dim(2);
      for (int64_t i = 0; i < frame; ++i) {
        CHECK(back.values()[static_cast<size_t>(i)] ==
              s.coarse_seq.values()[static_cast<size_t>((s.coarse_seq.dim(0) - 1) * frame + i)]);
      }
    }
  }

  SUBCASE("series shorter than window throws") {
    Tensor v = Tensor::zeros({5, 4, 4});
    CHECK_THROWS_AS(make_windows(series_from(v), 2, 6), DataError);
  }
}

TEST_CASE("split_source produces 70/15/15 disjoint reproducible partitions") {
  DatasetSplit a = split_source(100, 9);
  CHECK(a.train.size() == 70);
  CHECK(a.val.size() == 15);
  CHECK(a.test.size() == 15);

  DatasetSplit b = split_source(100, 9);
  CHECK(a.train == b.train);
  CHECK(a.val == b.val);
  CHECK(a.test == b.test);

  DatasetSplit c = split_source(100, 10);
  CHECK(a.train != c.train);

  std::vector<bool> seen(100, false);
  for (auto& part : {a.train, a.val, a.test})
    for (int64_t i : part) {
      CHECK_FALSE(seen[static_cast<size_t>(i)]);
      seen[static_cast<size_t>(i)] = true;
    }
  for (bool s : seen) CHECK(s);
}

TEST_CASE("split_target takes the final week and its first slot as reference") {
  Rng rng(5);
  Tensor values = Tensor::uniform({400 + 23, 4, 4}, rng, 0, 9);
  PopulationSeries fine = series_from(values);
  auto samples = make_windows(fine, 2, 24);
  CHECK(samples.size() == 400);
  TargetSplit ts = split_target(samples, fine, 336);
  CHECK(ts.test.size() == 336);
  const int64_t first_slot = 423 - 336;
  CHECK(samples[static_cast<size_t>(ts.test.front())].end_slot == first_slot);
  CHECK(ts.reference.slot_index == first_slot);
  for (int64_t i = 0; i < 16; ++i) {
    CHECK(ts.reference.values.values()[static_cast<size_t>(i)] ==
          values.values()[static_cast<size_t>(first_slot * 16 + i)]);
  }
  CHECK_THROWS_AS(split_target(samples, fine, 100000), DataError);
}

TEST_CASE("PGRD round trip is bit exact") {
  Rng rng(6);
  Tensor t = Tensor::uniform({3, 4, 5}, rng, -1e6, 1e6);
  t.values()[0] = 0.1 + 0.2;  // not exactly representable; must survive
  GridMeta meta;
  meta.city = "alpha";
  meta.cell_meters = 500;
  meta.categories = {"food", "residence"};
  const auto path = temp_file("psr_roundtrip.pgrd");
  save_grid(path.string(), t, meta);
  auto [back, meta2] = load_grid(path.string());
  CHECK(back.shape() == t.shape());
  CHECK(back.values() == t.values());
  CHECK(meta2.city == "alpha");
  CHECK(meta2.cell_meters == 500);
  CHECK(meta2.categories == meta.categories);

  // Re-saving yields identical bytes.
  const auto path2 = temp_file("psr_roundtrip2.pgrd");
  save_grid(path2.string(), back, meta2);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(b1 == b2);
  std::filesystem::remove(path);
  std::filesystem::remove(path.string() + ".json");
  std::filesystem::remove(path2);
  std::filesystem::remove(path2.string() + ".json");
}

TEST_CASE("PGRD rejects bad magic") {
  const auto path = temp_file("psr_badmagic.pgrd");
  std::ofstream os(path, std::ios::binary);
  os << "NOPE" << std::string(64, '\0');
  os.close();
  CHECK_THROWS_AS(load_grid(path.string()), FormatError);
  std::filesystem::remove(path);
}

TEST_CASE("PGRD rejects truncated payload and dim mismatch") {
  Rng rng(7);
  Tensor t = Tensor::uniform({2, 3}, rng, 0, 1);
  GridMeta meta;
  const auto path = temp_file("psr_trunc.pgrd");
  save_grid(path.string(), t, meta);

  // Truncate the payload.
  const auto trunc = temp_file("psr_trunc2.pgrd");
  {
    std::ifstream is(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    std::ofstream os(trunc, std::ios::binary);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 9));
  }
  CHECK_THROWS_AS(load_grid(trunc.string()), FormatError);

  // Extend the payload: header dims now disagree with length.
  const auto extended = temp_file("psr_ext.pgrd");
  {
    std::ifstream is(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    bytes += std::string(8, 'x');
    std::ofstream os(extended, std::ios::binary);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  CHECK_THROWS_AS(load_grid(extended.string()), FormatError);

  for (auto p : {path, trunc, extended}) std::filesystem::remove(p);
  std::filesystem::remove(path.string() + ".json");
}

TEST_CASE("population and poi wrappers round trip") {
  Rng rng(8);
  PopulationSeries s;
  s.values = Tensor::uniform({4, 4, 4}, rng, 0, 10);
  s.cell_meters = 500;
  const auto path = temp_file("psr_pop.pgrd");
  save_population(path.string(), s, "beta");
  PopulationSeries back = load_population(path.string());
  CHECK(back.values.values() == s.values.values());
  CHECK(back.cell_meters == 500);
  std::filesystem::remove(path);
  std::filesystem::remove(path.string() + ".json");
}
