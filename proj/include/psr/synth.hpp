#pragma once

#include "psr/grid.hpp"

namespace psr {

// Knobs for one synthetic city. `shift` in [0, 1] displaces the activity
// hotspots away from the seed's base layout, so two specs sharing a seed but
// differing in shift form a source/target pair with shared physics and
// different spatial structure.
struct CitySpec {
  uint64_t seed = 1;
  int nH = 32, nW = 32;
  int n = 4;  // upscale factor (nH, nW must be divisible)
  int days = 14;
  int n_centers = 6;
  double shift = 0.0;
  double base_intensity = 40.0;
  double noise_scale = 0.12;

  void validate() const;
};

struct SynthCity {
  PopulationSeries population;  // fine granularity, integer-valued
  PoiMap poi;
};

extern const std::vector<std::string> kPoiCategories;  // 14 entries
extern const int kResidenceCategory;                   // index into kPoiCategories

// Deterministic generator: Gaussian residential/work intensity fields,
// a 48-slot diurnal mix between them, bounded noise, and POI maps derived
// from softmax-weighted mixtures of the same fields.
SynthCity generate_city(const CitySpec& spec);

}  // namespace psr
