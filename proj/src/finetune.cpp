#include "mics/finetune.hpp"

#include "mics/evidential.hpp"
#include "mics/random.hpp"

#include <algorithm>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace mics::finetune {

namespace {

constexpr std::uint64_t kShuffleTag = 0x4654'5348ULL;
constexpr std::uint64_t kShiftTag = 0x4654'5346ULL;

std::vector<const data::Image*> images_of(std::span<const data::PairedSample> batch, data::Modality m) {
  std::vector<const data::Image*> out;
  out.reserve(batch.size());
  for (const auto& s : batch) out.push_back(&s.image(m));
  return out;
}

std::vector<int> labels_of(std::span<const data::PairedSample> batch) {
  std::vector<int> out;
  out.reserve(batch.size());
  for (const auto& s : batch) {
    if (!s.label) throw std::invalid_argument("fine-tuning sample " + s.id + " has no label");
    out.push_back(*s.label);
  }
  return out;
}

int argmax_row(const Matrix& m, Index r) {
  Index best = 0;
  for (Index c = 1; c < m.cols(); ++c)
    if (m(r, c) > m(r, best)) best = c;
  return static_cast<int>(best);
}

// Deep copy: Model copies share parameter nodes, so values are cloned into a
// freshly initialised model.
net::Model clone_with(const net::Model& src, const std::map<std::string, Matrix>* overrides) {
  auto out = net::Model::init(src.cfg, 0);
  auto from = net::named_parameters(const_cast<net::Model&>(src));
  for (auto& [name, p] : net::named_parameters(out)) {
    const Matrix* value = &from.at(name).value();
    if (overrides)
      if (auto it = overrides->find(name); it != overrides->end()) value = &it->second;
    Var v = p;
    v.mutable_value() = *value;
  }
  return out;
}

}  // namespace

const char* to_string(ModalityMode m) { return m == ModalityMode::both ? "both" : "wli"; }

ModalityMode modality_mode_from_string(const std::string& s) {
  if (s == "both") return ModalityMode::both;
  if (s == "wli") return ModalityMode::wli;
  throw std::invalid_argument("unknown modality mode: " + s);
}

void FinetuneConfig::validate() const {
  if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
  if (batch_size <= 0) throw std::invalid_argument("batch_size must be positive");
  if (!(lr_max >= lr_min && lr_min >= 0)) throw std::invalid_argument("need lr_max >= lr_min >= 0");
  if (weight_decay < 0) throw std::invalid_argument("weight_decay must be >= 0");
  if (!(ema_decay >= 0 && ema_decay <= 1)) throw std::invalid_argument("ema_decay must lie in [0, 1]");
  if (theta_horizon <= 0) throw std::invalid_argument("theta_horizon must be positive");
  if (!(label_fraction > 0 && label_fraction <= 1)) throw std::invalid_argument("label_fraction must lie in (0, 1]");
}

double theta_schedule(int epoch, int horizon) {
  return std::min(1.0, static_cast<double>(epoch) / static_cast<double>(horizon));
}

std::pair<Var, Var> shift_augment(const Var& z_f, const Matrix& s_w, const Matrix& s_n) {
  for (const Matrix* s : {&s_w, &s_n})
    if (s->cols() != z_f.cols() || (s->rows() != 1 && s->rows() != z_f.rows()))
      throw std::invalid_argument("shift_augment: shift shape does not match the fused features");
  return {add(z_f, Var::constant(s_w)), add(z_f, Var::constant(s_n))};
}

Var fusion_classification_loss(const Var& z_f, const Var& z_wf, const Var& z_nf, std::span<const int> labels,
                               const net::Linear& cls) {
  return add(add(cross_entropy(cls(z_f), labels), cross_entropy(cls(z_wf), labels)), cross_entropy(cls(z_nf), labels));
}

StepGraph finetune_objective(const net::Model& model, std::span<const data::PairedSample> batch, const Matrix& s_w,
                             const Matrix& s_n, const FinetuneConfig& cfg, double theta) {
  if (batch.empty()) throw std::invalid_argument("finetune: empty batch");
  const auto labels = labels_of(batch);
  const Index B = static_cast<Index>(batch.size());
  const int p = model.cfg.patch_size;
  const auto ew = model.enc_wli(net::patchify(images_of(batch, data::Modality::wli), p), B);
  StepGraph g;
  if (cfg.modalities == ModalityMode::wli) {
    g.l_f = cross_entropy(model.cls(ew.pooled), labels);
    g.l_wn = g.l_fuse = Var::scalar(0.0);
    g.total = g.l_f;
    return g;
  }
  const auto en = model.enc_nbi(net::patchify(images_of(batch, data::Modality::nbi), p), B);
  Var z_f = model.fusion(ew.pooled, en.pooled, ew.tokens, en.tokens);
  auto [z_wf, z_nf] = shift_augment(z_f, s_w, s_n);
  g.l_f = fusion_classification_loss(z_f, z_wf, z_nf, labels, model.cls);
  if (cfg.use_tmc) {
    auto ev = evidential::batched::loss_bundle(model.evid_wli(ew.pooled), model.evid_nbi(en.pooled), labels, theta);
    g.l_wn = ev.wn;
    g.l_fuse = ev.fuse;
    g.total = add(add(g.l_f, g.l_wn), g.l_fuse);
  } else {
    g.l_wn = g.l_fuse = Var::scalar(0.0);
    g.total = g.l_f;
  }
  return g;
}

std::map<std::string, Var> finetune_parameters(net::Model& model, const FinetuneConfig& cfg) {
  std::vector<std::string> prefixes{"cls"};
  if (!cfg.freeze_encoders) prefixes.push_back("enc_wli");
  if (cfg.modalities == ModalityMode::both) {
    if (!cfg.freeze_encoders) prefixes.push_back("enc_nbi");
    prefixes.push_back("fusion");
    if (cfg.use_tmc) {
      prefixes.push_back("evid_wli");
      prefixes.push_back("evid_nbi");
    }
  }
  return net::parameters_with_prefix(model, prefixes);
}

FinetuneState FinetuneState::init(net::Model model, const FinetuneConfig& cfg) {
  auto params = finetune_parameters(model, cfg);
  std::map<std::string, Matrix> ema;
  for (const auto& [name, p] : net::named_parameters(model)) ema[name] = p.value();
  optim::AdamW opt(std::move(params), optim::AdamWConfig{.weight_decay = cfg.weight_decay});
  return FinetuneState{std::move(model), std::move(opt), std::move(ema), 0};
}

net::Model FinetuneState::ema_model() const { return clone_with(model, &ema); }

FinetuneLosses finetune_step(FinetuneState& st, std::span<const data::PairedSample> batch,
                             const svd::ShiftVectorDictionary* svd, const FinetuneConfig& cfg, int epoch, double lr,
                             std::mt19937_64& shift_rng) {
  const Index D = st.model.cfg.embed_dim;
  const Index B = static_cast<Index>(batch.size());
  Matrix s_w = Matrix::Zero(1, D), s_n = Matrix::Zero(1, D);
  if (cfg.modalities == ModalityMode::both && cfg.use_svd) {
    if (svd == nullptr || svd->empty()) throw std::invalid_argument("finetune: use_svd requires a shift dictionary");
    if (svd->dim != D) throw std::invalid_argument("finetune: shift dictionary width differs from the feature width");
    const Index draws = cfg.per_sample_shift ? B : 1;
    s_w.resize(draws, D);
    s_n.resize(draws, D);
    for (Index i = 0; i < draws; ++i) {
      auto [a, b] = svd::draw_shift(*svd, shift_rng, cfg.centered_shift);
      s_w.row(i) = a.transpose();
      s_n.row(i) = b.transpose();
    }
  }
  auto g = finetune_objective(st.model, batch, s_w, s_n, cfg, theta_schedule(epoch, cfg.theta_horizon));
  st.optimizer.zero_grad();
  ad::backward(g.total);
  st.optimizer.step(lr);
  const double t = static_cast<double>(st.step);
  const double decay = cfg.ema_warmup ? std::min(cfg.ema_decay, (1.0 + t) / (10.0 + t)) : cfg.ema_decay;
  for (const auto& [name, p] : st.optimizer.params()) st.ema[name] = decay * st.ema[name] + (1.0 - decay) * p.value();
  ++st.step;
  return {g.l_f.item(), g.l_wn.item(), g.l_fuse.item(), g.total.item()};
}

Predictions predict(const net::Model& model, const std::vector<data::PairedSample>& samples,
                    const PredictSettings& settings, Index batch_size) {
  Predictions out;
  const Index n = static_cast<Index>(samples.size());
  out.embeddings.resize(n, model.cfg.embed_dim);
  const int p = model.cfg.patch_size;
  for (Index start = 0; start < n; start += batch_size) {
    const Index b = std::min(batch_size, n - start);
    std::span<const data::PairedSample> chunk(samples.data() + start, static_cast<std::size_t>(b));
    const auto ew = model.enc_wli(net::patchify(images_of(chunk, data::Modality::wli), p), b);
    Matrix logits, lambda;
    if (settings.modalities == ModalityMode::wli) {
      out.embeddings.middleRows(start, b) = ew.pooled.value();
      logits = model.cls(ew.pooled).value();
      lambda = evidential::batched::concentration(model.evid_wli(ew.pooled)).value();
    } else {
      const auto en = model.enc_nbi(net::patchify(images_of(chunk, data::Modality::nbi), p), b);
      Var z_f = model.fusion(ew.pooled, en.pooled, ew.tokens, en.tokens);
      out.embeddings.middleRows(start, b) = z_f.value();
      logits = model.cls(z_f).value();
      lambda = evidential::batched::fused_concentration(
                   evidential::batched::concentration(model.evid_wli(ew.pooled)),
                   evidential::batched::concentration(model.evid_nbi(en.pooled)))
                   .value();
    }
    const bool use_lambda = settings.modalities == ModalityMode::both && settings.use_tmc;
    for (Index i = 0; i < b; ++i) {
      out.labels.push_back(argmax_row(use_lambda ? lambda : logits, i));
      out.uncertainty.push_back(static_cast<double>(lambda.cols()) / lambda.row(i).sum());
    }
  }
  return out;
}

MetricsReport score(const std::vector<int>& truth, const Predictions& pred, int num_classes) {
  if (truth.size() != pred.labels.size()) throw std::invalid_argument("score: prediction count mismatch");
  MetricsReport r;
  r.samples = static_cast<int>(truth.size());
  r.confusion = Eigen::MatrixXi::Zero(num_classes, num_classes);
  int correct = 0;
  double nu = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || truth[i] >= num_classes) throw std::invalid_argument("score: label out of range");
    ++r.confusion(truth[i], pred.labels[i]);
    correct += truth[i] == pred.labels[i];
    nu += pred.uncertainty[i];
  }
  r.accuracy = truth.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(truth.size());
  r.mean_uncertainty = truth.empty() ? 0.0 : nu / static_cast<double>(truth.size());
  for (int c = 0; c < num_classes; ++c) {
    const int count = r.confusion.row(c).sum();
    r.per_class_count.push_back(count);
    r.per_class_accuracy.push_back(count == 0 ? 0.0 : static_cast<double>(r.confusion(c, c)) / count);
  }
  return r;
}

MetricsReport evaluate(const net::Model& model, const std::vector<data::PairedSample>& samples,
                       const PredictSettings& settings) {
  std::vector<int> truth;
  for (const auto& s : samples) {
    if (!s.label) throw std::invalid_argument("evaluate: sample " + s.id + " has no label");
    truth.push_back(*s.label);
  }
  return score(truth, predict(model, samples, settings), model.cfg.num_classes);
}

PredictSettings settings_of(const io::Checkpoint& ckpt) {
  PredictSettings s;
  s.modalities = modality_mode_from_string(ckpt.settings.value("modalities", std::string("both")));
  s.use_tmc = ckpt.settings.value("use_tmc", true);
  return s;
}

MetricsReport evaluate(const io::Checkpoint& ckpt, const std::vector<data::PairedSample>& samples) {
  ckpt.require_stage(io::Stage::finetune);
  if (ckpt.config_hash != io::net_config_hash(ckpt.net))
    throw std::invalid_argument("checkpoint config hash does not match its network configuration");
  return evaluate(io::model_from_checkpoint(ckpt), samples, settings_of(ckpt));
}

std::string MetricsReport::to_text() const {
  std::ostringstream os;
  os << std::setprecision(10);
  os << "samples: " << samples << "\n";
  os << "accuracy: " << accuracy << "\n";
  os << "mean_uncertainty: " << mean_uncertainty << "\n";
  os << "per_class_accuracy:";
  for (double a : per_class_accuracy) os << " " << a;
  os << "\nper_class_count:";
  for (int c : per_class_count) os << " " << c;
  os << "\nconfusion:\n";
  for (Index r = 0; r < confusion.rows(); ++r) {
    for (Index c = 0; c < confusion.cols(); ++c) os << (c ? " " : "") << confusion(r, c);
    os << "\n";
  }
  return os.str();
}

io::Checkpoint finetune_loop(const data::DatasetSplits& splits, const data::LabelFractionView& view,
                             const io::Checkpoint& init, const svd::ShiftVectorDictionary* svd,
                             const FinetuneConfig& cfg, const io::SeedBlock& seeds,
                             const std::function<void(const EpochRecord&, const net::Model&)>& on_epoch) {
  cfg.validate();
  init.require_stage(io::Stage::pretrain);
  if (view.labeled.empty()) throw std::invalid_argument("finetune_loop: no labeled samples");
  auto st = FinetuneState::init(io::model_from_checkpoint(init), cfg);
  const PredictSettings settings{cfg.modalities, cfg.use_tmc};
  auto shuffle_rng = make_rng(seeds.data, kShuffleTag);
  auto shift_rng = make_rng(seeds.shifts, kShiftTag);
  std::vector<std::size_t> order(view.labeled.size());
  std::iota(order.begin(), order.end(), 0);

  std::map<std::string, Matrix> best = st.ema;
  int best_epoch = -1;
  double best_acc = -1;
  std::vector<data::PairedSample> batch;
  const double n = static_cast<double>(order.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = optim::cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      batch.clear();
      for (std::size_t i = start; i < end; ++i) batch.push_back(view.labeled[order[i]]);
      const auto l = finetune_step(st, batch, svd, cfg, epoch, lr, shift_rng);
      const double w = static_cast<double>(end - start) / n;
      rec.losses.f += w * l.f;
      rec.losses.wn += w * l.wn;
      rec.losses.fuse += w * l.fuse;
      rec.losses.total += w * l.total;
    }
    if (!splits.val.empty()) {
      const auto report = evaluate(st.ema_model(), splits.val, settings);
      rec.val_acc = report.accuracy;
      rec.mean_uncertainty = report.mean_uncertainty;
    }
    // best validation accuracy wins; without a validation split the latest weights do
    if (splits.val.empty() || rec.val_acc > best_acc) {
      best_acc = rec.val_acc;
      best_epoch = epoch;
      best = st.ema;
    }
    if (on_epoch) on_epoch(rec, st.model);
  }

  io::Checkpoint out;
  out.stage = io::Stage::finetune;
  out.net = init.net;
  out.config_hash = io::net_config_hash(out.net);
  out.seeds = seeds;
  out.settings = {{"modalities", to_string(cfg.modalities)},
                  {"use_tmc", cfg.use_tmc},
                  {"use_svd", cfg.use_svd},
                  {"label_fraction", cfg.label_fraction},
                  {"best_epoch", best_epoch},
                  {"best_val_acc", best_acc},
                  {"svd_checkpoint_hash", svd ? io::hash_hex(svd->checkpoint_hash) : std::string()}};
  for (const auto& [name, m] : best) out.arrays["param/" + name] = m;
  for (const auto& [name, m] : st.optimizer.state()) out.arrays["optim/" + name] = m;
  return out;
}

}  // namespace mics::finetune
