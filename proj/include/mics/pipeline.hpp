#pragma once

// End-to-end commands behind the CLI. Each writes its artifacts into
// cfg.out under an exclusive lockfile; files are written atomically.

#include "mics/config.hpp"

#include <filesystem>
#include <string>

namespace mics::pipeline {

namespace fs = std::filesystem;

/// Holds `<dir>/.lock` (created with O_EXCL) for its lifetime.
class OutputLock {
 public:
  explicit OutputLock(const fs::path& dir);
  ~OutputLock();
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  fs::path path_;
};

struct Paths {
  fs::path dir;
  fs::path pretrain_ckpt() const { return dir / "pretrain.ckpt"; }
  fs::path pretrain_metrics() const { return dir / "pretrain_metrics.jsonl"; }
  fs::path svd() const { return dir / "svd.bin"; }
  fs::path finetune_ckpt() const { return dir / "finetune.ckpt"; }
  fs::path finetune_metrics() const { return dir / "finetune_metrics.jsonl"; }
  fs::path report(const std::string& split) const { return dir / ("report_" + split + ".txt"); }
  fs::path embeddings(const std::string& split) const { return dir / ("embeddings_" + split + ".tsv"); }
  fs::path config() const { return dir / "config.json"; }
};

enum class Split { val, test };
Split split_from_string(const std::string& s);
const char* to_string(Split s);

/// Returns the checkpoint path.
fs::path cmd_pretrain(const config::RunConfig& cfg);
fs::path cmd_build_svd(const config::RunConfig& cfg, const fs::path& checkpoint);
/// `svd_path` may be empty when finetune.use_svd is off.
fs::path cmd_finetune(const config::RunConfig& cfg, const fs::path& checkpoint, const fs::path& svd_path);
fs::path cmd_evaluate(const config::RunConfig& cfg, const fs::path& checkpoint, Split split);
fs::path cmd_export_embeddings(const config::RunConfig& cfg, const fs::path& checkpoint, Split split);

}  // namespace mics::pipeline
