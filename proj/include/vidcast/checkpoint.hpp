#pragma once

// Single-file checkpoint: a magic line, a little-endian u64 manifest length,
// the JSON manifest, then every array's float64 payload back to back in
// manifest order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vidcast/nn.hpp"
#include "vidcast/tensor.hpp"

namespace vidcast {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is written in host byte order");

inline constexpr char kCheckpointMagic[] = "VIDCAST-CKPT-1\n";
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor>> arrays;

  void put(const std::string& name, Tensor t) {
    for (auto& [n, v] : arrays)
      if (n == name) {
        v = std::move(t);
        return;
      }
    arrays.emplace_back(name, std::move(t));
  }
  bool has(const std::string& name) const {
    for (const auto& [n, v] : arrays)
      if (n == name) return true;
    return false;
  }
  const Tensor& get(const std::string& name) const {
    for (const auto& [n, v] : arrays)
      if (n == name) return v;
    throw CheckpointError("checkpoint has no array '" + name + "'");
  }

  void put_parameters(const nn::ParameterSet& ps, const std::string& prefix = "") {
    for (const auto& e : ps.entries()) put(prefix + e.name, e.var.value());
  }
  // Copy stored arrays into an existing parameter set; shapes must match.
  void load_parameters(nn::ParameterSet& ps, const std::string& prefix = "") const {
    for (auto& e : ps.entries()) {
      const Tensor& t = get(prefix + e.name);
      if (t.shape() != e.var.shape())
        throw CheckpointError("shape mismatch for " + e.name + ": stored " +
                              shape_str(t.shape()) + ", model " + shape_str(e.var.shape()));
      e.var.mutable_value() = t;
    }
  }

  void put_optimizer(nn::Adam& opt, const std::string& prefix) {
    for (std::size_t k = 0; k < opt.params().size(); ++k) {
      put(prefix + ".m." + std::to_string(k), opt.first_moments()[k]);
      put(prefix + ".v." + std::to_string(k), opt.second_moments()[k]);
    }
    meta["optimizers"][prefix] = opt.steps();
  }
  void load_optimizer(nn::Adam& opt, const std::string& prefix) const {
    for (std::size_t k = 0; k < opt.params().size(); ++k) {
      opt.first_moments()[k] = get(prefix + ".m." + std::to_string(k));
      opt.second_moments()[k] = get(prefix + ".v." + std::to_string(k));
    }
    opt.set_steps(meta.at("optimizers").at(prefix).get<long long>());
  }
};

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  nlohmann::json manifest;
  manifest["version"] = kCheckpointVersion;
  manifest["meta"] = ck.meta;
  manifest["arrays"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : ck.arrays) {
    manifest["arrays"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.size();
  }
  const std::string text = manifest.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic) - 1);
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : ck.arrays)
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!out) throw CheckpointError("short write on checkpoint " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::string magic(sizeof(kCheckpointMagic) - 1, '\0');
  in.read(magic.data(), static_cast<std::streamsize>(magic.size()));
  if (magic != kCheckpointMagic) throw CheckpointError("not a checkpoint: " + path.string());
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw CheckpointError("truncated checkpoint manifest: " + path.string());
  const auto manifest = nlohmann::json::parse(text);
  if (manifest.at("version").get<int>() != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version");
  Checkpoint ck;
  ck.meta = manifest.at("meta");
  for (const auto& a : manifest.at("arrays")) {
    Tensor t(a.at("shape").get<Shape>());
    in.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!in) throw CheckpointError("truncated checkpoint payload: " + path.string());
    ck.arrays.emplace_back(a.at("name").get<std::string>(), std::move(t));
  }
  return ck;
}

}  // namespace vidcast
