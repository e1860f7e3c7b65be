#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "mics/config.hpp"
#include "mics/pipeline.hpp"

#include <unistd.h>

#include <fstream>

using namespace mics;
using namespace mics::config;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("mics_config_" + std::to_string(::getpid()) + "_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

RunConfig tiny_run(const fs::path& out) {
  RunConfig c;
  c.net.image_side = 32;
  c.net.patch_size = 16;
  c.net.embed_dim = 8;
  c.net.proj_dim = 4;
  c.net.glo_dim = 12;
  c.net.fusion_heads = 2;
  c.net.encoder_heads = 2;
  c.net.depth = 1;
  c.net.num_classes = 3;
  c.pretrain.epochs = 1;
  c.pretrain.batch_size = 4;
  c.pretrain.queue_size = 8;
  c.finetune.epochs = 2;
  c.finetune.batch_size = 4;
  c.svd.per_cluster = 4;
  c.dataset.per_class = 6;
  c.dataset.label_fraction = 0.5;
  set_all_seeds(c, 4);
  c.out = out.string();
  return c;
}

std::string message_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("unknown keys are rejected by name") {
  CHECK(message_of([] { from_json(json{{"lrr", 1}}); }).find("lrr") != std::string::npos);
  const auto nested = message_of([] { from_json(json{{"finetune", {{"lrr", 1e-3}}}}); });
  CHECK(nested.find("finetune.lrr") != std::string::npos);
  CHECK_THROWS_AS(from_json(json{{"pretrain", {{"epochs", "ten"}}}}), ConfigError);
  CHECK_THROWS_AS(from_json(json{{"pretrain", {{"epochs", 1.5}}}}), ConfigError);
  CHECK_THROWS_AS(from_json(json{{"seeds", {{"data", -1}}}}), ConfigError);
  CHECK_THROWS_AS(from_json(json{{"finetune", {{"modalities", "nbi"}}}}), ConfigError);
  CHECK_THROWS_AS(from_json(json{{"dataset", {{"ratios", {0.5, 0.5}}}}}), ConfigError);
  CHECK_THROWS_AS(from_json(json{{"net", {{"patch_size", 7}}}}), ConfigError);
}

TEST_CASE("defaults, file values and overrides") {
  const auto d = from_json(json::object());
  CHECK(d.pretrain.tau == 0.07);
  CHECK(d.finetune_settings().label_fraction == 0.1);
  CHECK(d.seeds.data == 0);
  CHECK(to_json(from_json(to_json(d))) == to_json(d));

  const auto dir = scratch_dir("precedence");
  std::ofstream(dir / "run.json") << R"({"finetune": {"epochs": 7, "lr_max": 0.01}, "dataset": {"label_fraction": 0.25}})";
  const auto file = load_config(dir / "run.json");
  CHECK(file.finetune.epochs == 7);
  CHECK(file.finetune_settings().label_fraction == 0.25);
  CHECK(file.pretrain.epochs == d.pretrain.epochs);

  auto flagged = apply_overrides(file, {"finetune.epochs=3", "finetune.modalities=wli", "out=elsewhere"});
  CHECK(flagged.finetune.epochs == 3);
  CHECK(flagged.finetune.lr_max == 0.01);
  CHECK(flagged.finetune.modalities == finetune::ModalityMode::wli);
  CHECK(flagged.out == "elsewhere");
  CHECK_THROWS_AS(apply_overrides(file, {"finetune.lrr=1"}), ConfigError);
  CHECK_THROWS_AS(apply_overrides(file, {"noequals"}), ConfigError);

  std::ofstream(dir / "broken.json") << "{";
  CHECK_THROWS_AS(load_config(dir / "broken.json"), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("lockfile excludes a second writer") {
  const auto dir = scratch_dir("lock");
  {
    pipeline::OutputLock first(dir);
    CHECK(fs::exists(dir / ".lock"));
    CHECK_THROWS_AS(pipeline::OutputLock{dir}, std::runtime_error);
  }
  CHECK_FALSE(fs::exists(dir / ".lock"));
  fs::remove_all(dir);
}

TEST_CASE("pipeline commands, stage gates and reproducibility") {
  const auto dir = scratch_dir("pipeline");
  auto run = [&](const std::string& name) {
    auto cfg = tiny_run(dir / name);
    const auto ckpt = pipeline::cmd_pretrain(cfg);
    const auto dict = pipeline::cmd_build_svd(cfg, ckpt);
    const auto tuned = pipeline::cmd_finetune(cfg, ckpt, dict);
    pipeline::cmd_evaluate(cfg, tuned, pipeline::Split::val);
    pipeline::cmd_export_embeddings(cfg, tuned, pipeline::Split::test);
    return pipeline::Paths{cfg.out};
  };
  const auto a = run("a"), b = run("b");
  for (auto f : {&pipeline::Paths::pretrain_metrics, &pipeline::Paths::finetune_metrics, &pipeline::Paths::svd,
                 &pipeline::Paths::finetune_ckpt})
    CHECK(io::read_file((a.*f)()) == io::read_file((b.*f)()));

  std::ifstream metrics(a.finetune_metrics());
  std::string line;
  int lines = 0;
  while (std::getline(metrics, line)) {
    const auto rec = json::parse(line);
    for (const char* key : {"epoch", "L_f", "L_wn", "L_fuse", "L_total", "val_acc", "mean_nu"}) CHECK(rec.contains(key));
    ++lines;
  }
  CHECK(lines == 2);

  std::ifstream emb(a.embeddings("test"));
  std::getline(emb, line);
  CHECK(line.rfind("id\tlabel\tf0", 0) == 0);
  CHECK(line.find("\tf7") != std::string::npos);
  CHECK(io::read_file(a.report("val")).find("confusion:") != std::string::npos);
  CHECK_FALSE(fs::exists(a.dir / ".lock"));

  auto cfg = tiny_run(dir / "a");
  const auto stage = message_of([&] { pipeline::cmd_evaluate(cfg, a.pretrain_ckpt(), pipeline::Split::test); });
  CHECK(stage.find("stage mismatch") != std::string::npos);
  CHECK_THROWS_AS(pipeline::cmd_build_svd(cfg, a.finetune_ckpt()), std::invalid_argument);

  auto other = cfg;
  other.net.embed_dim = 12;
  CHECK_THROWS_AS(pipeline::cmd_evaluate(other, a.finetune_ckpt(), pipeline::Split::test), std::invalid_argument);

  auto reseeded = tiny_run(dir / "c");
  set_all_seeds(reseeded, 5);
  const auto ck5 = pipeline::cmd_pretrain(reseeded);
  CHECK_THROWS_AS(pipeline::cmd_finetune(reseeded, ck5, a.svd()), std::invalid_argument);
  fs::remove_all(dir);
}
