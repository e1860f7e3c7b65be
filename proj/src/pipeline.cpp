#include "mics/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace mics::pipeline {

using nlohmann::json;

namespace {

// Line-delimited records, flushed after every line.
class MetricsWriter {
 public:
  explicit MetricsWriter(const fs::path& path) : out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw std::runtime_error("cannot open metrics file " + path.string());
  }
  void write(const json& record) {
    out_ << record.dump() << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

void prepare(const config::RunConfig& cfg) {
  fs::create_directories(cfg.out);
  io::write_file_atomic(Paths{cfg.out}.config(), config::to_json(cfg).dump(2) + "\n");
}

io::Checkpoint load_matching(const config::RunConfig& cfg, const fs::path& path, io::Stage stage) {
  auto ckpt = io::load_checkpoint(path);
  ckpt.require_stage(stage);
  if (ckpt.config_hash != io::net_config_hash(cfg.net))
    throw std::invalid_argument("checkpoint " + path.string() + " was trained with a different network configuration");
  return ckpt;
}

const std::vector<data::PairedSample>& pick(const data::DatasetSplits& s, Split split) {
  return split == Split::val ? s.val : s.test;
}

}  // namespace

OutputLock::OutputLock(const fs::path& dir) : path_(dir / ".lock") {
  fs::create_directories(dir);
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    if (errno == EEXIST) throw std::runtime_error("output directory " + dir.string() + " is locked by another run");
    throw std::runtime_error("cannot create lockfile " + path_.string() + ": " + std::strerror(errno));
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

OutputLock::~OutputLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

Split split_from_string(const std::string& s) {
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw std::invalid_argument("split must be val or test, got " + s);
}

const char* to_string(Split s) { return s == Split::val ? "val" : "test"; }

fs::path cmd_pretrain(const config::RunConfig& cfg) {
  OutputLock lock(cfg.out);
  prepare(cfg);
  const Paths paths{cfg.out};
  const auto splits = config::load_splits(cfg);
  MetricsWriter metrics(paths.pretrain_metrics());
  auto ckpt = pretrain::pretrain_loop(splits, cfg.net, cfg.pretrain, cfg.seeds, [&](const pretrain::EpochRecord& r) {
    metrics.write({{"epoch", r.epoch},
                   {"L_dis", r.losses.dis},
                   {"L_res", r.losses.res},
                   {"L_a", r.losses.a},
                   {"L_pre", r.losses.pre},
                   {"lr", r.lr}});
  });
  io::save_checkpoint(paths.pretrain_ckpt(), ckpt);
  return paths.pretrain_ckpt();
}

fs::path cmd_build_svd(const config::RunConfig& cfg, const fs::path& checkpoint) {
  OutputLock lock(cfg.out);
  prepare(cfg);
  const Paths paths{cfg.out};
  const auto ckpt = load_matching(cfg, checkpoint, io::Stage::pretrain);
  const auto dict = svd::build_svd(ckpt, config::load_splits(cfg), cfg.svd, cfg.seeds.svd);
  svd::save_svd(paths.svd(), dict);
  return paths.svd();
}

fs::path cmd_finetune(const config::RunConfig& cfg, const fs::path& checkpoint, const fs::path& svd_path) {
  OutputLock lock(cfg.out);
  prepare(cfg);
  const Paths paths{cfg.out};
  const auto init = load_matching(cfg, checkpoint, io::Stage::pretrain);
  svd::ShiftVectorDictionary dict;
  const bool need_svd = cfg.finetune.use_svd && cfg.finetune.modalities == finetune::ModalityMode::both;
  if (need_svd) {
    if (svd_path.empty()) throw std::invalid_argument("finetune.use_svd is on but no shift dictionary was given");
    dict = svd::load_svd(svd_path);
    if (dict.checkpoint_hash != io::fnv1a(io::serialize(init)))
      throw std::invalid_argument("shift dictionary " + svd_path.string() + " was built from a different checkpoint");
  }
  const auto splits = config::load_splits(cfg);
  const auto settings = cfg.finetune_settings();
  const auto view = data::make_label_fraction_view(splits, settings.label_fraction, cfg.seeds.data);
  MetricsWriter metrics(paths.finetune_metrics());
  auto ckpt = finetune::finetune_loop(
      splits, view, init, need_svd ? &dict : nullptr, settings, cfg.seeds,
      [&](const finetune::EpochRecord& r, const net::Model&) {
        metrics.write({{"epoch", r.epoch},
                       {"L_f", r.losses.f},
                       {"L_wn", r.losses.wn},
                       {"L_fuse", r.losses.fuse},
                       {"L_total", r.losses.total},
                       {"val_acc", r.val_acc},
                       {"mean_nu", r.mean_uncertainty},
                       {"lr", r.lr}});
      });
  io::save_checkpoint(paths.finetune_ckpt(), ckpt);
  return paths.finetune_ckpt();
}

fs::path cmd_evaluate(const config::RunConfig& cfg, const fs::path& checkpoint, Split split) {
  OutputLock lock(cfg.out);
  prepare(cfg);
  const Paths paths{cfg.out};
  const auto ckpt = load_matching(cfg, checkpoint, io::Stage::finetune);
  const auto report = finetune::evaluate(ckpt, pick(config::load_splits(cfg), split));
  io::write_file_atomic(paths.report(to_string(split)), "split: " + std::string(to_string(split)) + "\n" + report.to_text());
  return paths.report(to_string(split));
}

fs::path cmd_export_embeddings(const config::RunConfig& cfg, const fs::path& checkpoint, Split split) {
  OutputLock lock(cfg.out);
  prepare(cfg);
  const Paths paths{cfg.out};
  const auto ckpt = load_matching(cfg, checkpoint, io::Stage::finetune);
  const auto splits = config::load_splits(cfg);
  const auto& samples = pick(splits, split);
  const auto pred = finetune::predict(io::model_from_checkpoint(ckpt), samples, finetune::settings_of(ckpt));
  std::ostringstream os;
  os << "id\tlabel";
  for (Eigen::Index k = 0; k < pred.embeddings.cols(); ++k) os << "\tf" << k;
  os << '\n';
  char buf[32];
  for (std::size_t i = 0; i < samples.size(); ++i) {
    os << samples[i].id << '\t' << (samples[i].label ? std::to_string(*samples[i].label) : std::string("-1"));
    for (Eigen::Index k = 0; k < pred.embeddings.cols(); ++k) {
      std::snprintf(buf, sizeof buf, "%.17g", pred.embeddings(static_cast<Eigen::Index>(i), k));
      os << '\t' << buf;
    }
    os << '\n';
  }
  io::write_file_atomic(paths.embeddings(to_string(split)), os.str());
  return paths.embeddings(to_string(split));
}

}  // namespace mics::pipeline
