#include "psr/grid.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <json.hpp>

namespace psr {

namespace {

using nlohmann::json;

void block_sum(const double* in, double* out, int64_t frames, int64_t nH, int64_t nW, int64_t n) {
  const int64_t H = nH / n, W = nW / n;
  for (int64_t f = 0; f < frames; ++f) {
    const double* imap = in + f * nH * nW;
    double* omap = out + f * H * W;
    for (int64_t h = 0; h < H; ++h)
      for (int64_t w = 0; w < W; ++w) {
        double acc = 0.0;
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < n; ++j) acc += imap[(h * n + i) * nW + w * n + j];
        omap[h * W + w] = acc;
      }
  }
}

}  // namespace

Tensor coarsen(const Tensor& fine, int n) {
  if (fine.rank() != 3) throw ShapeError("coarsen expects [T, nH, nW]");
  const int64_t T = fine.dim(0), nH = fine.dim(1), nW = fine.dim(2);
  if (nH % n != 0 || nW % n != 0) {
    throw ShapeError("coarsen: dims " + shape_str(fine.shape()) + " not divisible by n=" +
                     std::to_string(n));
  }
  Tensor out = Tensor::zeros({T, nH / n, nW / n});
  block_sum(fine.values().data(), out.values().data(), T, nH, nW, n);
  return out;
}

Tensor coarsen_poi(const Tensor& counts, int n) {
  if (counts.rank() != 3) throw ShapeError("coarsen_poi expects [C, nH, nW]");
  return coarsen(counts, n);
}

std::vector<WindowSample> make_windows(const PopulationSeries& fine, int n, int t_window) {
  const Tensor& values = fine.values;
  if (values.rank() != 3) throw ShapeError("make_windows expects series values [T, nH, nW]");
  const int64_t T = values.dim(0), nH = values.dim(1), nW = values.dim(2);
  if (T < t_window) {
    throw DataError("series of " + std::to_string(T) + " slots shorter than window " +
                    std::to_string(t_window));
  }
  Tensor coarse = coarsen(values, n);
  const int64_t H = coarse.dim(1), W = coarse.dim(2);
  std::vector<WindowSample> samples;
  samples.reserve(static_cast<size_t>(T - t_window + 1));
  for (int64_t t = t_window - 1; t < T; ++t) {
    WindowSample s;
    s.coarse_seq = Tensor::zeros({t_window, H, W});
    std::copy(coarse.values().begin() + (t - t_window + 1) * H * W,
              coarse.values().begin() + (t + 1) * H * W, s.coarse_seq.values().begin());
    s.fine_target = Tensor::zeros({1, nH, nW});
    std::copy(values.values().begin() + t * nH * nW, values.values().begin() + (t + 1) * nH * nW,
              s.fine_target.values().begin());
    s.t_of_day = static_cast<int>(t % kSlotsPerDay);
    s.end_slot = t;
    samples.push_back(std::move(s));
  }
  return samples;
}

DatasetSplit split_source(size_t n_samples, uint64_t seed) {
  if (n_samples < 3) throw DataError("split_source needs at least 3 samples");
  std::vector<int64_t> idx(n_samples);
  for (size_t i = 0; i < n_samples; ++i) idx[i] = static_cast<int64_t>(i);
  Rng rng(seed);
  shuffle_indices(idx, rng);
  const size_t n_train = n_samples * 70 / 100;
  const size_t n_val = n_samples * 15 / 100;
  DatasetSplit split;
  split.train.assign(idx.begin(), idx.begin() + n_train);
  split.val.assign(idx.begin() + n_train, idx.begin() + n_train + n_val);
  split.test.assign(idx.begin() + n_train + n_val, idx.end());
  if (split.val.empty() || split.test.empty()) throw DataError("split_source: too few samples");
  return split;
}

TargetSplit split_target(const std::vector<WindowSample>& samples, const PopulationSeries& fine,
                         int week_slots) {
  const int64_t T = fine.values.dim(0);
  if (week_slots < 1 || week_slots >= T) {
    throw DataError("split_target: test week of " + std::to_string(week_slots) +
                    " slots does not fit a series of " + std::to_string(T));
  }
  const int64_t first_test_slot = T - week_slots;
  TargetSplit out;
  for (size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].end_slot >= first_test_slot) out.test.push_back(static_cast<int64_t>(i));
  }
  if (out.test.empty()) throw DataError("split_target: no samples fall in the test week");
  const int64_t ref_slot = samples[static_cast<size_t>(out.test.front())].end_slot;
  const int64_t nH = fine.values.dim(1), nW = fine.values.dim(2);
  out.reference.values = Tensor::zeros({1, nH, nW});
  std::copy(fine.values.values().begin() + ref_slot * nH * nW,
            fine.values.values().begin() + (ref_slot + 1) * nH * nW,
            out.reference.values.values().begin());
  out.reference.slot_index = ref_slot;
  return out;
}

// ---------------------------------------------------------------------------
// PGRD i/o

namespace {

constexpr char kMagic[4] = {'P', 'G', 'R', 'D'};
constexpr uint16_t kVersion = 1;

template <typename T>
void write_le(std::ostream& os, T v) {
  unsigned char buf[sizeof(T)];
  for (size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  unsigned char buf[sizeof(T)];
  is.read(reinterpret_cast<char*>(buf), sizeof(T));
  if (!is) throw FormatError("truncated PGRD payload");
  T v = 0;
  for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(buf[i]) << (8 * i);
  return v;
}

}  // namespace

void write_grid_stream(std::ostream& os, const Tensor& tensor) {
  os.write(kMagic, 4);
  write_le<uint16_t>(os, kVersion);
  os.put(0);  // dtype f64
  os.put(static_cast<char>(tensor.rank()));
  for (int i = 0; i < tensor.rank(); ++i) {
    const int64_t d = tensor.dim(i);
    if (d > UINT32_MAX) throw FormatError("dimension overflows u32");
    write_le<uint32_t>(os, static_cast<uint32_t>(d));
  }
  for (double v : tensor.values()) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    write_le<uint64_t>(os, bits);
  }
}

Tensor read_grid_stream(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad PGRD magic");
  const uint16_t version = read_le<uint16_t>(is);
  if (version != kVersion) throw FormatError("unsupported PGRD version " + std::to_string(version));
  const int dtype = is.get();
  if (dtype != 0) throw FormatError("unsupported PGRD dtype");
  const int rank = is.get();
  if (rank < 1 || rank > 8) throw FormatError("bad PGRD rank");
  Shape shape(static_cast<size_t>(rank));
  int64_t total = 1;
  for (int i = 0; i < rank; ++i) {
    shape[static_cast<size_t>(i)] = read_le<uint32_t>(is);
    if (shape[static_cast<size_t>(i)] < 1) throw FormatError("bad PGRD dim");
    total *= shape[static_cast<size_t>(i)];
    if (total > (int64_t{1} << 34)) throw FormatError("PGRD dims overflow");
  }
  std::vector<double> data(static_cast<size_t>(total));
  for (int64_t i = 0; i < total; ++i) {
    const uint64_t bits = read_le<uint64_t>(is);
    std::memcpy(&data[static_cast<size_t>(i)], &bits, 8);
  }
  return Tensor::from_data(shape, std::move(data));
}

void save_grid(const std::string& path, const Tensor& tensor, const GridMeta& meta) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  write_grid_stream(os, tensor);
  os.close();

  json sidecar;
  sidecar["city"] = meta.city;
  sidecar["cell_meters"] = meta.cell_meters;
  sidecar["slot_minutes"] = meta.slot_minutes;
  sidecar["categories"] = meta.categories;
  std::ofstream ms(path + ".json");
  if (!ms) throw FormatError("cannot open sidecar for " + path);
  ms << sidecar.dump(2) << "\n";
}

std::pair<Tensor, GridMeta> load_grid(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  Tensor tensor = read_grid_stream(is);
  // A standalone grid file ends exactly after the payload.
  is.peek();
  if (!is.eof()) throw FormatError("PGRD payload longer than header dims in " + path);

  GridMeta meta;
  std::ifstream ms(path + ".json");
  if (ms) {
    json sidecar = json::parse(ms, nullptr, false);
    if (sidecar.is_discarded()) throw FormatError("unparseable sidecar for " + path);
    meta.city = sidecar.value("city", "");
    meta.cell_meters = sidecar.value("cell_meters", 0);
    meta.slot_minutes = sidecar.value("slot_minutes", 30);
    meta.categories = sidecar.value("categories", std::vector<std::string>{});
  }
  return {tensor, meta};
}

void save_population(const std::string& path, const PopulationSeries& series,
                     const std::string& city) {
  GridMeta meta;
  meta.city = city;
  meta.cell_meters = series.cell_meters;
  meta.slot_minutes = series.slot_minutes;
  save_grid(path, series.values, meta);
}

PopulationSeries load_population(const std::string& path) {
  auto [tensor, meta] = load_grid(path);
  if (tensor.rank() != 3) throw FormatError("population grid must be rank 3");
  PopulationSeries s;
  s.values = tensor;
  s.slot_minutes = meta.slot_minutes;
  s.cell_meters = meta.cell_meters;
  return s;
}

void save_poi(const std::string& path, const PoiMap& poi, const std::string& city,
              int cell_meters) {
  GridMeta meta;
  meta.city = city;
  meta.cell_meters = cell_meters;
  meta.categories = poi.categories;
  save_grid(path, poi.counts, meta);
}

PoiMap load_poi(const std::string& path) {
  auto [tensor, meta] = load_grid(path);
  if (tensor.rank() != 3) throw FormatError("poi grid must be rank 3");
  PoiMap p;
  p.counts = tensor;
  p.categories = meta.categories;
  return p;
}

}  // namespace psr
