#pragma once

// Run configuration: one JSON document holding every block of a pipeline run.
// Missing keys keep their defaults; unknown keys are rejected by name.

#include "mics/checkpoint.hpp"
#include "mics/datamodel.hpp"
#include "mics/finetune.hpp"
#include "mics/networks.hpp"
#include "mics/pretraining.hpp"
#include "mics/shiftdict.hpp"

#include "json.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace mics::config {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DatasetConfig {
  std::string root;  // empty -> synthetic data
  int per_class = 100;
  data::SplitRatios ratios = data::kDefaultRatios;
  double label_fraction = 0.1;
};

struct RunConfig {
  net::NetConfig net;
  pretrain::PretrainConfig pretrain;
  finetune::FinetuneConfig finetune;
  svd::SvdConfig svd;
  DatasetConfig dataset;
  io::SeedBlock seeds;
  std::string out = "run";

  void validate() const;
  /// Fine-tuning settings with the label fraction taken from the dataset block.
  finetune::FinetuneConfig finetune_settings() const;
};

nlohmann::json to_json(const RunConfig& c);

/// Overlays `j` on the defaults. Throws ConfigError naming the first unknown
/// key (dotted path) or ill-typed value.
RunConfig from_json(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);

/// Applies "dotted.key=value" overrides; the value is parsed as JSON, falling
/// back to a plain string.
RunConfig apply_overrides(const RunConfig& base, const std::vector<std::string>& assignments);

/// Sets every stream of the seed block to `seed`.
void set_all_seeds(RunConfig& c, std::uint64_t seed);

/// Loads dataset.root, or generates the synthetic set, then splits it with
/// seeds.data.
data::DatasetSplits load_splits(const RunConfig& c);

}  // namespace mics::config
