// Experiment front-end: pretrain, build-svd, finetune, evaluate and
// export-embeddings over a JSON run configuration.

#include "mics/pipeline.hpp"

#include "CLI11.hpp"

#include <iostream>
#include <optional>

namespace {

using namespace mics;
namespace fs = std::filesystem;

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config, "JSON run configuration")->check(CLI::ExistingFile);
    cmd->add_option("--out", out, "Output directory (overrides the config)");
    cmd->add_option("--seed", seed, "Sets every seed stream (overrides the config)");
    cmd->add_option("--set", sets, "Override a config key, e.g. --set finetune.epochs=5");
  }

  // flags > file > defaults
  config::RunConfig resolve() const {
    auto cfg = config.empty() ? config::RunConfig{} : config::load_config(config);
    cfg = config::apply_overrides(cfg, sets);
    if (seed) config::set_all_seeds(cfg, *seed);
    if (!out.empty()) cfg.out = out;
    cfg.validate();
    return cfg;
  }
};

fs::path or_default(const std::string& given, const fs::path& fallback) { return given.empty() ? fallback : fs::path(given); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal pretraining, shift-vector augmentation and evidential fine-tuning"};
  app.require_subcommand(1);

  Common pre_opts, svd_opts, ft_opts, eval_opts, emb_opts;
  std::string svd_ckpt, ft_ckpt, ft_svd, eval_ckpt, emb_ckpt;
  std::string eval_split = "test", emb_split = "test";

  auto* pre = app.add_subcommand("pretrain", "Self-supervised pretraining");
  pre_opts.attach(pre);

  auto* bsvd = app.add_subcommand("build-svd", "Build the shift-vector dictionary from a pretrain checkpoint");
  svd_opts.attach(bsvd);
  bsvd->add_option("--checkpoint", svd_ckpt, "Pretrain checkpoint (default <out>/pretrain.ckpt)");

  auto* ft = app.add_subcommand("finetune", "Labeled fine-tuning");
  ft_opts.attach(ft);
  ft->add_option("--checkpoint", ft_ckpt, "Pretrain checkpoint (default <out>/pretrain.ckpt)");
  ft->add_option("--svd", ft_svd, "Shift dictionary (default <out>/svd.bin)");

  auto* ev = app.add_subcommand("evaluate", "Score a finetune checkpoint");
  eval_opts.attach(ev);
  ev->add_option("--checkpoint", eval_ckpt, "Finetune checkpoint (default <out>/finetune.ckpt)");
  ev->add_option("--split", eval_split, "val or test")->check(CLI::IsMember({"val", "test"}));

  auto* emb = app.add_subcommand("export-embeddings", "Write per-sample fused features as TSV");
  emb_opts.attach(emb);
  emb->add_option("--checkpoint", emb_ckpt, "Finetune checkpoint (default <out>/finetune.ckpt)");
  emb->add_option("--split", emb_split, "val or test")->check(CLI::IsMember({"val", "test"}));

  CLI11_PARSE(app, argc, argv);

  try {
    fs::path written;
    if (*pre) {
      written = pipeline::cmd_pretrain(pre_opts.resolve());
    } else if (*bsvd) {
      auto cfg = svd_opts.resolve();
      written = pipeline::cmd_build_svd(cfg, or_default(svd_ckpt, pipeline::Paths{cfg.out}.pretrain_ckpt()));
    } else if (*ft) {
      auto cfg = ft_opts.resolve();
      const pipeline::Paths paths{cfg.out};
      const fs::path svd_path = cfg.finetune.use_svd ? or_default(ft_svd, paths.svd()) : fs::path();
      written = pipeline::cmd_finetune(cfg, or_default(ft_ckpt, paths.pretrain_ckpt()), svd_path);
    } else if (*ev) {
      auto cfg = eval_opts.resolve();
      written = pipeline::cmd_evaluate(cfg, or_default(eval_ckpt, pipeline::Paths{cfg.out}.finetune_ckpt()),
                                       pipeline::split_from_string(eval_split));
    } else if (*emb) {
      auto cfg = emb_opts.resolve();
      written = pipeline::cmd_export_embeddings(cfg, or_default(emb_ckpt, pipeline::Paths{cfg.out}.finetune_ckpt()),
                                                pipeline::split_from_string(emb_split));
    }
    std::cout << written.string() << "\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
