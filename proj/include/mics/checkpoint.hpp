#pragma once

// Versioned binary checkpoint container.
//
// Layout (little-endian):
//   "MICSCKPT" | u32 version | u64 header length | header JSON (sorted keys)
//   u64 array count, then per array:
//   u32 name length | name | u64 rows | u64 cols | rows*cols f64 (row-major)
// Arrays are written in lexicographic name order, so save -> load -> save is
// byte-identical.

#include "mics/autodiff.hpp"
#include "mics/networks.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>

namespace mics::io {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class Stage { pretrain, finetune };
const char* to_string(Stage s);
Stage stage_from_string(const std::string& s);

struct SeedBlock {
  std::uint64_t data = 0;
  std::uint64_t model = 0;
  std::uint64_t mask = 0;
  std::uint64_t svd = 0;
  std::uint64_t shifts = 0;
  bool operator==(const SeedBlock&) const = default;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  Stage stage = Stage::pretrain;
  net::NetConfig net;
  std::string config_hash;
  SeedBlock seeds;
  nlohmann::json settings = nlohmann::json::object();  // stage-specific flags
  std::map<std::string, ad::Matrix> arrays;

  /// Throws std::invalid_argument naming the expected and actual stage.
  void require_stage(Stage expected) const;
};

nlohmann::json to_json(const net::NetConfig& c);
net::NetConfig net_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SeedBlock& s);
SeedBlock seed_block_from_json(const nlohmann::json& j);

/// 64-bit FNV-1a, rendered as 16 lowercase hex digits by hash_hex.
std::uint64_t fnv1a(std::string_view bytes);
std::string hash_hex(std::uint64_t h);
/// Hash of the canonical NetConfig JSON; recorded in every artifact.
std::string net_config_hash(const net::NetConfig& c);

std::string serialize(const Checkpoint& ckpt);
Checkpoint deserialize(std::string_view bytes);

/// Writes to "<path>.tmp" then renames, so readers never see a partial file.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies every parameter into arrays under `prefix` + name.
void store_parameters(std::map<std::string, ad::Matrix>& arrays, const std::string& prefix,
                      const std::map<std::string, ad::Var>& params);
/// Overwrites each parameter from arrays[prefix + name]; missing names or
/// shape mismatches throw std::invalid_argument.
void load_parameters(const std::map<std::string, ad::Matrix>& arrays, const std::string& prefix,
                     const std::map<std::string, ad::Var>& params);
/// Sub-map of arrays under `prefix`, keys stripped of it.
std::map<std::string, ad::Matrix> arrays_with_prefix(const std::map<std::string, ad::Matrix>& arrays,
                                                     const std::string& prefix);

/// Model whose online parameters come from the "param/" arrays.
net::Model model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace mics::io
