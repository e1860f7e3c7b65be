// Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
// failure.

#include "mics/config.hpp"
#include "mics/finetune.hpp"
#include "mics/pipeline.hpp"
#include "mics/pretraining.hpp"
#include "mics/shiftdict.hpp"
#include "oracles.hpp"
#include "stats.hpp"

#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

using namespace mics;
using ad::Matrix;
using ad::Var;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& name, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  failures += !o.pass;
  std::printf("[%s] %2d %s: %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), o.detail.c_str(), secs);
  std::fflush(stdout);
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

double time_command(const std::string& cmd, int& status) {
  const auto t0 = std::chrono::steady_clock::now();
  status = std::system((cmd + " > /dev/null 2>&1").c_str());
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string quoted(const std::string& s) { return "'" + s + "'"; }

io::SeedBlock all(std::uint64_t s) { return {s, s, s, s, s}; }

// Small ViT setting used by the training experiments.
net::NetConfig experiment_net() {
  net::NetConfig c;
  c.image_side = 32;
  c.patch_size = 8;
  c.embed_dim = 32;
  c.proj_dim = 16;
  c.glo_dim = 64;
  c.fusion_heads = 2;
  c.encoder_heads = 2;
  c.depth = 1;
  c.num_classes = 6;
  return c;
}

pretrain::PretrainConfig experiment_pretrain(int epochs) {
  pretrain::PretrainConfig pc;
  pc.epochs = epochs;
  pc.batch_size = 32;
  pc.queue_size = 256;
  pc.lr_max = 1e-3;
  pc.lr_min = 1e-4;
  return pc;
}

finetune::FinetuneConfig experiment_finetune(double fraction, finetune::ModalityMode mode) {
  finetune::FinetuneConfig fc;
  fc.epochs = 100;
  fc.batch_size = 16;
  fc.lr_max = 1e-3;
  fc.lr_min = 1e-5;
  fc.label_fraction = fraction;
  fc.modalities = mode;
  return fc;
}

data::DatasetSplits experiment_splits(std::uint64_t seed) {
  data::SyntheticSpec spec{6, 100, 32, 8, seed};
  return data::split_dataset(data::generate_synthetic_dataset(spec), 6, data::kDefaultRatios, seed);
}

double test_accuracy(const data::DatasetSplits& splits, const io::Checkpoint& init, double fraction,
                     finetune::ModalityMode mode, std::uint64_t seed) {
  const auto fc = experiment_finetune(fraction, mode);
  const auto view = data::make_label_fraction_view(splits, fraction, seed);
  const auto dict = svd::build_svd(init, splits, {}, seed);
  const auto ckpt = finetune::finetune_loop(splits, view, init, &dict, fc, all(seed));
  return finetune::evaluate(ckpt, splits.test).accuracy;
}

struct SeedRun {
  double pretrained = 0, scratch = 0;  // both modalities, 10% labels
  double fused = 0, wli = 0;           // pretrained init, 50% labels
  double ablation_seconds = 0;         // time spent on the pretraining ablation
};

std::vector<SeedRun> run_ablations() {
  std::vector<SeedRun> runs;
  for (std::uint64_t seed : {1, 2, 3}) {
    SeedRun r;
    const auto t0 = std::chrono::steady_clock::now();
    const auto splits = experiment_splits(seed);
    const auto pretrained = pretrain::pretrain_loop(splits, experiment_net(), experiment_pretrain(30), all(seed));
    const auto scratch = pretrain::pretrain_loop(splits, experiment_net(), experiment_pretrain(0), all(seed));
    r.pretrained = test_accuracy(splits, pretrained, 0.1, finetune::ModalityMode::both, seed);
    r.scratch = test_accuracy(splits, scratch, 0.1, finetune::ModalityMode::both, seed);
    r.ablation_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.fused = test_accuracy(splits, pretrained, 0.5, finetune::ModalityMode::both, seed);
    r.wli = test_accuracy(splits, pretrained, 0.5, finetune::ModalityMode::wli, seed);
    runs.push_back(r);
  }
  return runs;
}

bool same_file(const fs::path& a, const fs::path& b) { return io::read_file(a) == io::read_file(b); }

}  // namespace

int main() {
  report(1, "evidential algebra suite", [] {
    int status = 0;
    const double t = time_command(quoted(MICS_TEST_EVIDENTIAL), status);
    return Outcome{status == 0 && t < 5.0, fmt("exit %.0f, %.2fs of 5s budget", status, t)};
  });

  report(2, "gradient suite", [] {
    const std::vector<std::string> cmds{
        quoted(MICS_TEST_AUTODIFF),
        quoted(MICS_TEST_EVIDENTIAL) + " -tc='*finite*,*evidential_nll*,*kl_regularizer*'",
        quoted(MICS_TEST_NETWORKS) + " -tc='*finite*'",
        quoted(MICS_TEST_PRETRAINING) + " -tc='*finite*'",
        quoted(MICS_TEST_FINETUNE) + " -tc='*finite*'",
    };
    double total = 0;
    int bad = 0;
    for (const auto& c : cmds) {
      int status = 0;
      total += time_command(c, status);
      bad += status != 0;
    }
    return Outcome{bad == 0 && total < 120.0, fmt("%.0f of 5 suites failed (rel err < 1e-4), %.1fs of 120s budget", bad, total)};
  });

  report(3, "k-means oracle", [] {
    std::mt19937_64 rng(2024);
    std::uniform_int_distribution<int> qd(3, 8), cd(2, 3), dd(1, 2);
    std::normal_distribution<double> n(0.0, 1.0);
    int optimal = 0, monotone = 0;
    for (int trial = 0; trial < 100; ++trial) {
      const int C = cd(rng), D = dd(rng), Q = std::max(qd(rng), C);
      Matrix pts(Q, D);
      for (ad::Index i = 0; i < pts.size(); ++i) pts.data()[i] = n(rng);
      const auto r = svd::kmeans(pts, C, static_cast<std::uint64_t>(trial));
      optimal += std::abs(r.objective - testing::brute_force_optimum(pts, C)) <= 1e-9;
      bool mono = true;
      for (std::size_t k = 1; k < r.objective_trace.size(); ++k)
        mono = mono && r.objective_trace[k] <= r.objective_trace[k - 1];
      monotone += mono;
    }
    return Outcome{optimal >= 90 && monotone == 100, fmt("optimal %.0f/100, monotone %.0f/100", optimal, monotone)};
  });

  report(4, "shift-vector sampling statistics", [] {
    Eigen::VectorXd mu(2);
    mu << 3, -1;
    Matrix sigma = Matrix::Zero(2, 2);
    sigma(0, 0) = 4;
    sigma(1, 1) = 1;
    const int P = 10000;
    const Matrix s = svd::sample_shift_vectors(mu, sigma, P, 42);
    const Eigen::RowVectorXd mean = s.colwise().mean();
    const double e0 = std::abs(mean(0) - 3.0) / (2.0 / std::sqrt(P)), e1 = std::abs(mean(1) + 1.0) / (1.0 / std::sqrt(P));
    const Matrix centered = s.rowwise() - mean;
    const Matrix emp = centered.transpose() * centered / (P - 1);
    const double frob = (emp - sigma).norm() / sigma.norm();
    double pmin = 1.0;
    for (int k = 0; k < 2; ++k) {
      std::vector<double> white;
      for (ad::Index p = 0; p < P; ++p) white.push_back((s(p, k) - mu(k)) / std::sqrt(sigma(k, k)));
      pmin = std::min(pmin, testing::ks_normal_pvalue(white));
    }
    return Outcome{e0 < 3 && e1 < 3 && frob < 0.05 && pmin > 0.01,
                   fmt("mean error %.2f and %.2f sigma/sqrt(P), cov rel err %.4f, min KS p %.3f", e0, e1, frob, pmin)};
  });

  report(5, "masking exactness", [] {
    int wrong_count = 0;
    std::vector<int> freq(16, 0);
    for (std::uint64_t s = 0; s < 10000; ++s) {
      const auto m = pretrain::random_mask(16, 0.75, s);
      wrong_count += std::count(m.begin(), m.end(), true) != 12;
      for (int t = 0; t < 16; ++t) freq[t] += m[t];
    }
    double worst = 0;
    for (int f : freq) worst = std::max(worst, std::abs(f / 10000.0 - 0.75));
    return Outcome{wrong_count == 0 && worst <= 0.02,
                   fmt("%.0f masks without exactly 12 of 16, max |freq - 0.75| %.4f", wrong_count, worst)};
  });

  report(6, "overfit 60 labeled pairs", [] {
    data::SyntheticSpec spec{6, 10, 32, 8, 5};
    auto splits = data::split_dataset(data::generate_synthetic_dataset(spec), 6, {1.0, 0.0, 0.0}, 5);
    const auto view = data::make_label_fraction_view(splits, 1.0, 5);
    const auto init = pretrain::pretrain_loop(splits, experiment_net(), experiment_pretrain(0), all(5));
    const auto dict = svd::build_svd(init, splits, {}, 5);
    auto fc = experiment_finetune(1.0, finetune::ModalityMode::both);
    fc.epochs = 200;
    fc.lr_min = 1e-4;
    struct Reached {
      int epoch;
    };
    int reached = -1;
    double last = 0;
    try {
      finetune::finetune_loop(splits, view, init, &dict, fc, all(5), [&](const finetune::EpochRecord& r, const net::Model& m) {
        last = finetune::evaluate(m, view.labeled, {}).accuracy;
        if (last >= 0.95) throw Reached{r.epoch};
      });
    } catch (const Reached& hit) {
      reached = hit.epoch;
    }
    return Outcome{reached >= 0, fmt("%.0f labeled, train accuracy %.3f at epoch %.0f", view.labeled.size(), last,
                                     reached >= 0 ? reached + 1 : 200)};
  });

  std::vector<SeedRun> runs;
  report(7, "pretraining beats random init (10% labels, 3 seeds)", [&] {
    runs = run_ablations();
    double pre = 0, scr = 0, secs = 0;
    for (const auto& r : runs) {
      pre += r.pretrained / 3;
      scr += r.scratch / 3;
      secs += r.ablation_seconds;
    }
    return Outcome{pre > scr && secs < 1800,
                   fmt("pretrained %.4f vs random init %.4f, ablation time %.0fs of 1800s", pre, scr, secs)};
  });

  report(8, "fused beats white-light only by 10 points (3 seeds)", [&] {
    if (runs.size() != 3) return Outcome{false, "ablation runs missing"};
    double fused = 0, wli = 0;
    for (const auto& r : runs) {
      fused += r.fused / 3;
      wli += r.wli / 3;
    }
    return Outcome{fused - wli >= 0.10, fmt("fused %.4f vs white-light %.4f, margin %.1f points", fused, wli, 100 * (fused - wli))};
  });

  report(9, "determinism and bit-exact round trips", [] {
    const fs::path root = fs::temp_directory_path() / ("mics_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(root);
    fs::create_directories(root);
    config::RunConfig cfg;
    cfg.net.image_side = 32;
    cfg.net.patch_size = 16;
    cfg.net.embed_dim = 8;
    cfg.net.proj_dim = 4;
    cfg.net.glo_dim = 12;
    cfg.net.fusion_heads = 2;
    cfg.net.encoder_heads = 2;
    cfg.net.depth = 1;
    cfg.pretrain.epochs = 2;
    cfg.pretrain.batch_size = 8;
    cfg.pretrain.queue_size = 32;
    cfg.pretrain.lr_max = 1e-3;
    cfg.finetune.epochs = 3;
    cfg.finetune.batch_size = 8;
    cfg.finetune.lr_max = 1e-3;
    cfg.svd.per_cluster = 8;
    cfg.dataset.per_class = 10;
    cfg.dataset.label_fraction = 0.5;
    io::write_file_atomic(root / "run.json", config::to_json(cfg).dump(2));
    for (const char* run : {"a", "b"}) {
      const std::string base = quoted(MICS_CLI) + " %s --config " + quoted((root / "run.json").string()) +
                               " --out " + quoted((root / run).string()) + " --seed 11";
      for (const char* sub : {"pretrain", "build-svd", "finetune", "evaluate", "export-embeddings"}) {
        char cmd[2048];
        std::snprintf(cmd, sizeof cmd, base.c_str(), sub);
        int status = 0;
        time_command(cmd, status);
        if (status != 0) return Outcome{false, std::string("cli ") + sub + " failed"};
      }
    }
    const pipeline::Paths a{root / "a"}, b{root / "b"};
    const bool metrics = same_file(a.pretrain_metrics(), b.pretrain_metrics()) &&
                         same_file(a.finetune_metrics(), b.finetune_metrics()) &&
                         same_file(a.report("test"), b.report("test")) &&
                         same_file(a.embeddings("test"), b.embeddings("test"));
    const bool artifacts = same_file(a.pretrain_ckpt(), b.pretrain_ckpt()) && same_file(a.svd(), b.svd()) &&
                           same_file(a.finetune_ckpt(), b.finetune_ckpt());
    bool round_trip = true;
    for (const fs::path& p : {a.pretrain_ckpt(), a.finetune_ckpt()}) {
      const auto bytes = io::read_file(p);
      const auto ckpt = io::load_checkpoint(p);
      io::save_checkpoint(root / "again.ckpt", ckpt);
      round_trip = round_trip && io::serialize(ckpt) == bytes && io::read_file(root / "again.ckpt") == bytes;
    }
    const auto svd_bytes = io::read_file(a.svd());
    svd::save_svd(root / "again.svd", svd::load_svd(a.svd()));
    round_trip = round_trip && io::read_file(root / "again.svd") == svd_bytes;
    fs::remove_all(root);
    return Outcome{metrics && artifacts && round_trip,
                   std::string("metrics identical: ") + (metrics ? "yes" : "no") +
                       ", artifacts identical: " + (artifacts ? "yes" : "no") +
                       ", round trips bit-exact: " + (round_trip ? "yes" : "no")};
  });

  report(10, "zero shifts collapse to the plain fusion loss", [] {
    auto net_cfg = experiment_net();
    net_cfg.image_side = 32;
    net_cfg.patch_size = 16;
    net_cfg.embed_dim = 8;
    net_cfg.proj_dim = 4;
    net_cfg.glo_dim = 12;
    data::SyntheticSpec spec{6, 4, 32, 16, 9};
    const auto splits = data::split_dataset(data::generate_synthetic_dataset(spec), 6, data::kDefaultRatios, 9);
    const auto init = pretrain::pretrain_loop(splits, net_cfg, experiment_pretrain(0), all(9));
    auto model = io::model_from_checkpoint(init);

    std::mt19937_64 rng(3);
    std::normal_distribution<double> n(0.0, 1.0);
    std::uniform_int_distribution<int> cls(0, 5);
    double worst = 0;
    for (int trial = 0; trial < 20; ++trial) {
      Matrix z(7, 8);
      for (ad::Index i = 0; i < z.size(); ++i) z.data()[i] = 3 * n(rng);
      std::vector<int> y(7);
      for (int& v : y) v = cls(rng);
      const Var zf = Var::constant(z);
      auto [zw, zn] = finetune::shift_augment(zf, Matrix::Zero(1, 8), Matrix::Zero(1, 8));
      const double lf = finetune::fusion_classification_loss(zf, zw, zn, y, model.cls).item();
      worst = std::max(worst, std::abs(lf - 3 * ad::cross_entropy(model.cls(zf), y).item()));
    }

    finetune::FinetuneConfig on, off;
    on.use_svd = true;
    off.use_svd = false;
    const auto zero = svd::ShiftVectorDictionary::zeros(6, 4, 8);
    std::vector<data::PairedSample> batch(splits.train.begin(), splits.train.begin() + 6);
    auto trace = [&](const finetune::FinetuneConfig& cfg, const svd::ShiftVectorDictionary* dict) {
      auto st = finetune::FinetuneState::init(io::model_from_checkpoint(init), cfg);
      std::mt19937_64 shift_rng(1);
      std::vector<double> out;
      for (int step = 0; step < 10; ++step)
        out.push_back(finetune::finetune_step(st, batch, dict, cfg, step, 1e-3, shift_rng).total);
      for (const auto& [name, p] : net::named_parameters(st.model)) out.push_back(p.value().sum());
      return out;
    };
    const bool identical = trace(on, &zero) == trace(off, nullptr);
    return Outcome{worst <= 1e-10 && identical,
                   fmt("max |L_f - 3 CE| %.2e, ", worst) + "zero-shift and use_svd-off runs identical: " +
                       (identical ? "yes" : "no")};
  });

  std::printf("%d of 10 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
