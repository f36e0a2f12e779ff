#pragma once

#include <json.hpp>
#include <string>
#include <utility>
#include <vector>

#include "psr/layers.hpp"

namespace psr {

// Named tensor collection plus a JSON manifest (config, seed, metrics).
// On disk: magic "PCK1", u32 manifest length, manifest bytes, then one PGRD
// blob per tensor in manifest order. Round trips are bit exact.
struct Checkpoint {
  nlohmann::json meta;
  NamedParams tensors;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

  const Tensor& tensor(const std::string& name) const;
};

// Copies values from `src` into identically named tensors of `dst`
// (shape-checked). Throws StateError on missing names.
void load_into(const NamedParams& dst, const Checkpoint& src);

// Deep snapshot of parameter values (used to stash best-so-far weights).
std::vector<std::vector<double>> snapshot_values(const NamedParams& params);
void restore_values(const NamedParams& params, const std::vector<std::vector<double>>& snap);

}  // namespace psr
