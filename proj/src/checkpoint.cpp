#include "psr/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "psr/grid.hpp"

namespace psr {

namespace {
constexpr char kMagic[4] = {'P', 'C', 'K', '1'};
}

void Checkpoint::save(const std::string& path) const {
  nlohmann::json manifest = meta;
  nlohmann::json names = nlohmann::json::array();
  for (const auto& [name, t] : tensors) names.push_back(name);
  manifest["tensor_names"] = names;
  const std::string blob = manifest.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open checkpoint " + path + " for writing");
  os.write(kMagic, 4);
  const uint32_t len = static_cast<uint32_t>(blob.size());
  unsigned char lenb[4];
  for (int i = 0; i < 4; ++i) lenb[i] = static_cast<unsigned char>((len >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(lenb), 4);
  os.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  for (const auto& [name, t] : tensors) write_grid_stream(os, t);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad checkpoint magic");
  unsigned char lenb[4];
  is.read(reinterpret_cast<char*>(lenb), 4);
  if (!is) throw FormatError("truncated checkpoint header");
  uint32_t len = 0;
  for (int i = 0; i < 4; ++i) len |= static_cast<uint32_t>(lenb[i]) << (8 * i);
  std::string blob(len, '\0');
  is.read(blob.data(), len);
  if (!is) throw FormatError("truncated checkpoint manifest");

  Checkpoint ck;
  ck.meta = nlohmann::json::parse(blob, nullptr, false);
  if (ck.meta.is_discarded()) throw FormatError("unparseable checkpoint manifest");
  const auto names = ck.meta.value("tensor_names", std::vector<std::string>{});
  ck.meta.erase("tensor_names");
  for (const std::string& name : names) {
    ck.tensors.emplace_back(name, read_grid_stream(is));
  }
  is.peek();
  if (!is.eof()) throw FormatError("checkpoint has trailing bytes");
  return ck;
}

const Tensor& Checkpoint::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw StateError("checkpoint tensor not found: " + name);
}

void load_into(const NamedParams& dst, const Checkpoint& src) {
  for (const auto& [name, t] : dst) {
    const Tensor& loaded = src.tensor(name);
    if (loaded.shape() != t.shape()) {
      throw StateError("checkpoint tensor " + name + " has shape " + shape_str(loaded.shape()) +
                       ", expected " + shape_str(t.shape()));
    }
    const_cast<Tensor&>(t).values() = loaded.values();
  }
}

std::vector<std::vector<double>> snapshot_values(const NamedParams& params) {
  std::vector<std::vector<double>> snap;
  snap.reserve(params.size());
  for (const auto& [name, t] : params) snap.push_back(t.values());
  return snap;
}

void restore_values(const NamedParams& params, const std::vector<std::vector<double>>& snap) {
  if (snap.size() != params.size()) throw StateError("snapshot/param count mismatch");
  for (size_t i = 0; i < snap.size(); ++i) {
    const_cast<Tensor&>(params[i].second).values() = snap[i];
  }
}

}  // namespace psr
