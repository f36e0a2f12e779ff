#include "psr/synth.hpp"

#include <algorithm>
#include <cmath>

namespace psr {

const std::vector<std::string> kPoiCategories = {
    "food",        "hotel",    "culture",  "sports",      "shopping",
    "factory",     "recreation", "institution", "medical_care", "scenic_spot",
    "education",   "landmark", "residence", "transport"};
const int kResidenceCategory = 12;

void CitySpec::validate() const {
  if (nH % n != 0 || nW % n != 0) throw ConfigError("city dims must be divisible by n");
  if (days < 2) throw ConfigError("city needs at least 2 days");
  if (n_centers < 1) throw ConfigError("city needs at least 1 hotspot");
  if (shift < 0.0 || shift > 1.0) throw ConfigError("shift must lie in [0, 1]");
}

namespace {

constexpr double kTwoPi = 6.283185307179586476925287;

struct Hotspot {
  double y, x, sigma, amp;
};

// Gaussian bump field over the fine grid, normalized to peak 1.
std::vector<double> intensity_field(const std::vector<Hotspot>& spots, int nH, int nW) {
  std::vector<double> field(static_cast<size_t>(nH) * nW, 0.0);
  for (int h = 0; h < nH; ++h)
    for (int w = 0; w < nW; ++w) {
      double v = 0.0;
      for (const Hotspot& s : spots) {
        const double dy = (h - s.y) / s.sigma;
        const double dx = (w - s.x) / s.sigma;
        v += s.amp * std::exp(-0.5 * (dy * dy + dx * dx));
      }
      field[static_cast<size_t>(h) * nW + w] = v;
    }
  double peak = 0.0;
  for (double v : field) peak = std::max(peak, v);
  if (peak > 0) {
    for (double& v : field) v /= peak;
  }
  return field;
}

std::vector<Hotspot> sample_hotspots(Rng& rng, const CitySpec& spec) {
  std::vector<Hotspot> spots;
  spots.reserve(static_cast<size_t>(spec.n_centers));
  const double max_dim = static_cast<double>(std::max(spec.nH, spec.nW));
  for (int i = 0; i < spec.n_centers; ++i) {
    Hotspot s;
    s.y = rng.uniform(0.1 * spec.nH, 0.9 * spec.nH);
    s.x = rng.uniform(0.1 * spec.nW, 0.9 * spec.nW);
    s.sigma = rng.uniform(0.06, 0.16) * max_dim;
    s.amp = rng.uniform(0.5, 1.0);
    // Structural dissimilarity: displace each center by up to shift * 40% of
    // the grid. The displacement draws always happen so that shift=0 and
    // shift>0 cities share every other random decision.
    const double dy = rng.uniform(-0.4 * spec.nH, 0.4 * spec.nH);
    const double dx = rng.uniform(-0.4 * spec.nW, 0.4 * spec.nW);
    s.y = std::clamp(s.y + spec.shift * dy, 0.0, spec.nH - 1.0);
    s.x = std::clamp(s.x + spec.shift * dx, 0.0, spec.nW - 1.0);
    spots.push_back(s);
  }
  return spots;
}

}  // namespace

SynthCity generate_city(const CitySpec& spec) {
  spec.validate();
  Rng root(spec.seed);
  Rng field_rng = root.fork(1);
  Rng noise_rng = root.fork(2);
  Rng poi_rng = root.fork(3);

  const std::vector<Hotspot> res_spots = sample_hotspots(field_rng, spec);
  const std::vector<Hotspot> work_spots = sample_hotspots(field_rng, spec);
  const std::vector<double> residential = intensity_field(res_spots, spec.nH, spec.nW);
  const std::vector<double> work = intensity_field(work_spots, spec.nH, spec.nW);

  const int64_t cells = static_cast<int64_t>(spec.nH) * spec.nW;
  const int64_t T = static_cast<int64_t>(spec.days) * kSlotsPerDay;

  SynthCity city;
  city.population.values = Tensor::zeros({T, spec.nH, spec.nW});
  city.population.cell_meters = 500;
  auto& pop = city.population.values.values();
  for (int64_t t = 0; t < T; ++t) {
    const double phase = kTwoPi * static_cast<double>(t % kSlotsPerDay) / kSlotsPerDay;
    // Residential activity peaks at midnight, work at noon; a floor keeps
    // every active cell inhabited around the clock.
    const double w_home = 0.25 + 0.75 * 0.5 * (1.0 + std::cos(phase));
    const double w_work = 0.25 + 0.75 * 0.5 * (1.0 - std::cos(phase));
    for (int64_t c = 0; c < cells; ++c) {
      const double mean = spec.base_intensity * (residential[static_cast<size_t>(c)] * w_home +
                                                 work[static_cast<size_t>(c)] * w_work);
      // Poisson-like noise: variance proportional to the mean, clipped so a
      // single draw cannot flip the diurnal signal.
      double eta = noise_rng.normal();
      eta = std::clamp(eta, -2.5, 2.5);
      double v = mean + spec.noise_scale * std::sqrt(std::max(mean, 0.0)) * eta;
      pop[static_cast<size_t>(t * cells + c)] = std::max(0.0, std::round(v));
    }
  }

  const int C = static_cast<int>(kPoiCategories.size());
  city.poi.categories = kPoiCategories;
  city.poi.counts = Tensor::zeros({C, spec.nH, spec.nW});
  auto& poi = city.poi.counts.values();
  for (int cat = 0; cat < C; ++cat) {
    // Softmax over (residential, work, uniform) affinities decides how this
    // category tracks the latent fields; "residence" is pinned to the
    // residential field so POI/population correlation is guaranteed.
    double logit_r = poi_rng.uniform(-1.0, 1.0);
    double logit_w = poi_rng.uniform(-1.0, 1.0);
    double logit_u = poi_rng.uniform(-1.5, 0.0);
    if (cat == kResidenceCategory) {
      logit_r = 3.0;
      logit_w = -1.0;
      logit_u = -1.0;
    }
    const double zr = std::exp(logit_r), zw = std::exp(logit_w), zu = std::exp(logit_u);
    const double z = zr + zw + zu;
    const double wr = zr / z, ww = zw / z, wu = zu / z;
    const double scale = poi_rng.uniform(8.0, 24.0);
    for (int64_t c = 0; c < cells; ++c) {
      const double intensity = wr * residential[static_cast<size_t>(c)] +
                               ww * work[static_cast<size_t>(c)] + wu * 0.3;
      double eta = std::clamp(poi_rng.normal(), -2.5, 2.5);
      const double v = scale * intensity * (1.0 + 0.15 * eta);
      poi[static_cast<size_t>(cat) * cells + c] = std::max(0.0, std::round(v));
    }
  }
  return city;
}

}  // namespace psr
