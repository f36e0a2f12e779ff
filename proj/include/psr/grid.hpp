#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "psr/tensor.hpp"

namespace psr {

struct GridMeta {
  std::string city;
  int cell_meters = 0;
  int slot_minutes = 30;
  std::vector<std::string> categories;
};

constexpr int kSlotsPerDay = 48;

struct PopulationSeries {
  Tensor values;  // [T, H, W], persons per cell per slot
  int slot_minutes = 30;
  int cell_meters = 0;
};

struct PoiMap {
  Tensor counts;  // [C, nH, nW], integer-valued
  std::vector<std::string> categories;
};

struct ReferenceSnapshot {
  Tensor values;  // [1, nH, nW]
  int64_t slot_index = 0;
};

struct WindowSample {
  Tensor coarse_seq;   // [T_w, H, W]
  Tensor fine_target;  // [1, nH, nW]
  int t_of_day = 0;    // end slot mod 48
  int64_t end_slot = 0;
};

struct DatasetSplit {
  std::vector<int64_t> train, val, test;
};

struct TargetSplit {
  ReferenceSnapshot reference;
  std::vector<int64_t> test;
};

// Non-overlapping n*n sum pooling per slot; mass conserving.
Tensor coarsen(const Tensor& fine, int n);  // [T, nH, nW] -> [T, H, W]

// Per-category block sums for POI maps: [C, nH, nW] -> [C, H, W].
Tensor coarsen_poi(const Tensor& counts, int n);

// One sample per window end index t in [t_window-1, T-1].
std::vector<WindowSample> make_windows(const PopulationSeries& fine, int n, int t_window);

// Seeded shuffle then 70/15/15 partition of sample indices.
DatasetSplit split_source(size_t n_samples, uint64_t seed);

// Test = samples whose end slot falls in the final `week_slots` slots;
// reference = the fine frame at the first test slot.
TargetSplit split_target(const std::vector<WindowSample>& samples, const PopulationSeries& fine,
                         int week_slots = 336);

// PGRD container: magic "PGRD", u16 version=1, u8 dtype (0 = f64), u8 rank,
// rank x u32 dims, little-endian f64 payload. A JSON sidecar at <path>.json
// carries {city, cell_meters, slot_minutes, categories}.
void save_grid(const std::string& path, const Tensor& tensor, const GridMeta& meta);
std::pair<Tensor, GridMeta> load_grid(const std::string& path);

// Raw PGRD blob (no sidecar); checkpoints embed tensors with these.
void write_grid_stream(std::ostream& os, const Tensor& tensor);
Tensor read_grid_stream(std::istream& is);

void save_population(const std::string& path, const PopulationSeries& series,
                     const std::string& city);
PopulationSeries load_population(const std::string& path);
void save_poi(const std::string& path, const PoiMap& poi, const std::string& city,
              int cell_meters);
PoiMap load_poi(const std::string& path);

}  // namespace psr
