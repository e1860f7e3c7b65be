#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "gradcheck.hpp"
#include "mics/finetune.hpp"
#include "mics/pretraining.hpp"

#include <cmath>
#include <random>

using namespace mics;
using namespace mics::finetune;
using ad::Matrix;
using ad::Var;

namespace {

net::NetConfig tiny_config() {
  net::NetConfig c;
  c.image_side = 32;
  c.patch_size = 16;
  c.embed_dim = 8;
  c.proj_dim = 4;
  c.glo_dim = 12;
  c.fusion_heads = 2;
  c.encoder_heads = 2;
  c.depth = 1;
  c.num_classes = 3;
  return c;
}

data::DatasetSplits tiny_splits(int per_class = 4) {
  data::SyntheticSpec spec{3, per_class, 32, 16, 3};
  return data::split_dataset(data::generate_synthetic_dataset(spec), 3, data::kDefaultRatios, 3);
}

io::Checkpoint scratch_checkpoint(const data::DatasetSplits& splits, std::uint64_t seed = 1) {
  pretrain::PretrainConfig pc;
  pc.epochs = 0;
  io::SeedBlock seeds;
  seeds.model = seed;
  return pretrain::pretrain_loop(splits, tiny_config(), pc, seeds);
}

// Cross-entropy of logits x W + b computed entry by entry.
double ce_oracle(const Matrix& z, const Matrix& W, const Matrix& b, const std::vector<int>& y) {
  double total = 0;
  for (Index i = 0; i < z.rows(); ++i) {
    std::vector<double> logit(static_cast<std::size_t>(W.cols()));
    double mx = -1e300;
    for (Index c = 0; c < W.cols(); ++c) {
      double s = b(0, c);
      for (Index k = 0; k < z.cols(); ++k) s += z(i, k) * W(k, c);
      logit[c] = s;
      mx = std::max(mx, s);
    }
    double den = 0;
    for (double l : logit) den += std::exp(l - mx);
    total += -(logit[y[i]] - mx - std::log(den));
  }
  return total / static_cast<double>(z.rows());
}

}  // namespace

TEST_CASE("shift_augment") {
  Matrix z(1, 2);
  z << 1, 2;
  Matrix sw(1, 2), zero = Matrix::Zero(1, 2);
  sw << 0.5, -1;
  auto [a, b] = shift_augment(Var::constant(z), sw, zero);
  CHECK(a.value() == (Matrix(1, 2) << 1.5, 1).finished());
  CHECK(b.value() == z);
  CHECK_THROWS_AS(shift_augment(Var::constant(z), Matrix::Zero(1, 3), zero), std::invalid_argument);
  Matrix batch = Matrix::Ones(3, 2);
  auto [c, d] = shift_augment(Var::constant(batch), Matrix::Ones(3, 2), zero);
  CHECK(c.value() == Matrix::Constant(3, 2, 2.0));
}

TEST_CASE("fusion classification loss") {
  std::mt19937_64 rng(4);
  auto model = net::Model::init(tiny_config(), 2);
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix z(5, 8), sw(1, 8), sn(1, 8);
  for (Matrix* m : {&z, &sw, &sn})
    for (Index i = 0; i < m->size(); ++i) m->data()[i] = n(rng);
  std::vector<int> y{0, 2, 1, 1, 0};
  Var zf = Var::constant(z);
  auto [zwf0, znf0] = shift_augment(zf, Matrix::Zero(1, 8), Matrix::Zero(1, 8));
  const double collapsed = fusion_classification_loss(zf, zwf0, znf0, y, model.cls).item();
  CHECK(std::abs(collapsed - 3 * cross_entropy(model.cls(zf), y).item()) < 1e-10);

  auto [zwf, znf] = shift_augment(zf, sw, sn);
  const Matrix W = model.cls.weight.value(), b = model.cls.bias.value();
  const double oracle = ce_oracle(z, W, b, y) + ce_oracle(z.rowwise() + sw.row(0), W, b, y) +
                        ce_oracle(z.rowwise() + sn.row(0), W, b, y);
  CHECK(std::abs(fusion_classification_loss(zf, zwf, znf, y, model.cls).item() - oracle) < 1e-10);

  // perfect logits: a head that maps each one-hot feature to a huge target logit
  net::Linear sharp{Var::constant(Matrix::Identity(3, 3) * 1e3), Var::constant(Matrix::Zero(1, 3))};
  Matrix onehot = ad::one_hot(y, 3);
  Var zo = Var::constant(onehot);
  CHECK(fusion_classification_loss(zo, zo, zo, y, sharp).item() < 1e-12);
}

TEST_CASE("finite-difference gradients of the fine-tuning objective") {
  auto splits = tiny_splits();
  auto model = net::Model::init(tiny_config(), 8);
  std::vector<data::PairedSample> batch(splits.train.begin(), splits.train.begin() + 3);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 0.3);
  Matrix sw(1, 8), sn(1, 8);
  for (Matrix* m : {&sw, &sn})
    for (Index i = 0; i < m->size(); ++i) m->data()[i] = n(rng);
  FinetuneConfig cfg;
  auto params = finetune_parameters(model, cfg);
  std::vector<std::pair<std::string, Var>> list(params.begin(), params.end());
  for (const char* name : {"cls.weight", "enc_wli.embed.weight", "enc_nbi.pos", "fusion.fc1.weight", "evid_nbi.weight"})
    REQUIRE(params.count(name));
  CHECK_FALSE(params.count("decoder.mask_token"));
  auto rep = testing::check_gradients([&] { return finetune_objective(model, batch, sw, sn, cfg, 0.5).total; }, list);
  INFO(rep.worst);
  CHECK(rep.max_rel_error < 1e-4);

  cfg.use_tmc = false;
  auto g = finetune_objective(model, batch, sw, sn, cfg, 0.5);
  CHECK(g.total.item() == g.l_f.item());
  CHECK(g.l_wn.item() == 0.0);
}

TEST_CASE("shift augmentation adds no parameters and zero shifts equal use_svd off") {
  auto splits = tiny_splits();
  auto init = scratch_checkpoint(splits);
  FinetuneConfig on, off;
  on.use_svd = true;
  off.use_svd = false;
  auto a = io::model_from_checkpoint(init), b = io::model_from_checkpoint(init);
  CHECK(net::parameter_count(finetune_parameters(a, on)) == net::parameter_count(finetune_parameters(b, off)));
  CHECK(net::parameter_count(finetune_parameters(a, on)) > 0);
  FinetuneConfig frozen;
  frozen.freeze_encoders = true;
  CHECK_FALSE(finetune_parameters(a, frozen).count("enc_wli.embed.weight"));

  auto zero = svd::ShiftVectorDictionary::zeros(3, 4, 8);
  std::vector<data::PairedSample> batch(splits.train.begin(), splits.train.begin() + 4);
  auto trace = [&](const FinetuneConfig& cfg, const svd::ShiftVectorDictionary* dict) {
    auto st = FinetuneState::init(io::model_from_checkpoint(init), cfg);
    std::mt19937_64 rng(3);
    std::vector<double> out;
    for (int step = 0; step < 4; ++step) out.push_back(finetune_step(st, batch, dict, cfg, step, 1e-3, rng).total);
    return out;
  };
  const auto t_on = trace(on, &zero), t_off = trace(off, nullptr);
  CHECK(t_on == t_off);
  CHECK(t_on[3] != t_on[0]);
  CHECK_THROWS_AS(trace(on, nullptr), std::invalid_argument);
}

TEST_CASE("EMA with decay 0 equals the online weights") {
  auto splits = tiny_splits();
  FinetuneConfig cfg;
  cfg.ema_decay = 0.0;
  cfg.use_svd = false;
  auto st = FinetuneState::init(io::model_from_checkpoint(scratch_checkpoint(splits)), cfg);
  std::vector<data::PairedSample> batch(splits.train.begin(), splits.train.begin() + 4);
  std::mt19937_64 rng(1);
  finetune_step(st, batch, nullptr, cfg, 0, 1e-2, rng);
  CHECK(st.model.cls.weight.value() != io::model_from_checkpoint(scratch_checkpoint(splits)).cls.weight.value());
  auto ema = st.ema_model();
  auto online = net::named_parameters(st.model);
  for (auto& [name, p] : net::named_parameters(ema)) CHECK(p.value() == online.at(name).value());

  auto unlabeled = batch;
  unlabeled[1].label.reset();
  CHECK_THROWS_AS(finetune_step(st, unlabeled, nullptr, cfg, 0, 1e-2, rng), std::invalid_argument);
}

TEST_CASE("theta schedule") {
  CHECK(theta_schedule(0, 10) == 0.0);
  CHECK(theta_schedule(5, 10) == 0.5);
  CHECK(theta_schedule(25, 10) == 1.0);
}

TEST_CASE("scoring") {
  std::vector<int> truth{0, 1, 2, 2, 1, 0};
  Predictions all{truth, std::vector<double>(6, 0.5), Matrix()};
  auto r = score(truth, all, 3);
  CHECK(r.accuracy == 1.0);
  CHECK(r.mean_uncertainty == 0.5);
  for (int c = 0; c < 3; ++c) CHECK(r.confusion.row(c).sum() == r.per_class_count[c]);

  std::mt19937_64 rng(12);
  std::uniform_int_distribution<int> cls(0, 5);
  std::vector<int> t, p;
  for (int i = 0; i < 6000; ++i) {
    t.push_back(cls(rng));
    p.push_back(cls(rng));
  }
  auto chance = score(t, Predictions{p, std::vector<double>(6000, 1.0), Matrix()}, 6);
  // binomial standard error at p = 1/6, n = 6000 is about 0.0048
  CHECK(std::abs(chance.accuracy - 1.0 / 6) < 4 * 0.0048);
  for (int c = 0; c < 6; ++c) CHECK(chance.confusion.row(c).sum() == chance.per_class_count[c]);
  const auto text = chance.to_text();
  CHECK(text.find("confusion:\n") != std::string::npos);
}

TEST_CASE("finetune loop and evaluation gates") {
  auto splits = tiny_splits(6);
  auto init = scratch_checkpoint(splits);
  auto view = data::make_label_fraction_view(splits, 0.5, 1);
  svd::SvdConfig sc;
  sc.per_cluster = 4;
  auto dict = svd::build_svd(init, splits, sc, 2);
  FinetuneConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 4;
  cfg.lr_max = 1e-3;
  std::vector<EpochRecord> recs;
  auto ckpt = finetune_loop(splits, view, init, &dict, cfg, {1, 2, 3, 4, 5},
                            [&](const EpochRecord& r, const net::Model&) { recs.push_back(r); });
  CHECK(recs.size() == 3);
  CHECK(ckpt.stage == io::Stage::finetune);
  CHECK(ckpt.settings.at("best_epoch").get<int>() >= 0);
  auto report = evaluate(ckpt, splits.test);
  CHECK(report.samples == static_cast<int>(splits.test.size()));
  CHECK(report.mean_uncertainty > 0);
  CHECK_THROWS_AS(evaluate(init, splits.test), std::invalid_argument);
  CHECK_THROWS_AS(finetune_loop(splits, view, ckpt, &dict, cfg, {}), std::invalid_argument);

  auto again = finetune_loop(splits, view, init, &dict, cfg, {1, 2, 3, 4, 5});
  CHECK(io::serialize(again) == io::serialize(ckpt));

  cfg.modalities = ModalityMode::wli;
  auto wli = finetune_loop(splits, view, init, nullptr, cfg, {});
  CHECK(settings_of(wli).modalities == ModalityMode::wli);
  CHECK(evaluate(wli, splits.test).samples == static_cast<int>(splits.test.size()));
}
