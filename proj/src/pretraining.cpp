#include "mics/pretraining.hpp"

#include "mics/random.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace mics::pretrain {

namespace {

constexpr std::uint64_t kShuffleTag = 0x5052'4554'5348ULL;
constexpr std::uint64_t kMaskTag = 0x5052'4554'4d53ULL;
constexpr std::uint64_t kInitTag = 0x5052'4554'494eULL;

Matrix softmax_rows(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const double mx = x.row(i).maxCoeff();
    out.row(i) = (x.row(i).array() - mx).exp();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

// One direction of the consistency loss: features of one modality scored
// against the other modality's momentum keys.
Var directional(const Var& z, const Matrix& zm_self, const Matrix& zm_other, const Matrix& queue_other, double tau,
                double alpha) {
  const Index B = z.rows();
  Matrix keys(B + queue_other.rows(), zm_other.cols());
  keys.topRows(B) = zm_other;
  keys.bottomRows(queue_other.rows()) = queue_other;
  Var sim = scale(matmul(z, Var::constant(keys.transpose())), 1.0 / tau);
  Matrix target = alpha * softmax_rows(zm_self * keys.transpose() / tau);
  for (Index i = 0; i < B; ++i) target(i, i) += 1.0 - alpha;
  return soft_cross_entropy(sim, target);
}

std::vector<const data::Image*> images_of(std::span<const data::PairedSample> batch, data::Modality m) {
  std::vector<const data::Image*> out;
  out.reserve(batch.size());
  for (const auto& s : batch) out.push_back(&s.image(m));
  return out;
}

}  // namespace

MomentumQueue MomentumQueue::create(Index capacity, Index dim) {
  if (capacity <= 0 || dim <= 0) throw std::invalid_argument("queue capacity and dim must be positive");
  MomentumQueue q;
  q.entries = Matrix::Zero(capacity, dim);
  return q;
}

void MomentumQueue::push(const Matrix& feats) {
  if (feats.cols() != entries.cols()) throw std::invalid_argument("queue_push: feature width mismatch");
  if (feats.rows() > capacity()) throw std::invalid_argument("queue_push: batch larger than queue capacity");
  for (Index i = 0; i < feats.rows(); ++i)
    if (std::abs(feats.row(i).norm() - 1.0) > 1e-6) throw std::invalid_argument("queue_push: rows must be unit-norm");
  for (Index i = 0; i < feats.rows(); ++i) {
    entries.row(cursor) = feats.row(i);
    cursor = (cursor + 1) % capacity();
  }
  filled = std::min(capacity(), filled + feats.rows());
}

void PretrainConfig::validate() const {
  if (!(tau > 0)) throw std::invalid_argument("tau must be > 0");
  if (!(alpha >= 0 && alpha <= 1)) throw std::invalid_argument("alpha must lie in [0, 1]");
  if (!(mask_ratio > 0 && mask_ratio < 1)) throw std::invalid_argument("mask_ratio must lie in (0, 1)");
  if (queue_size <= 0) throw std::invalid_argument("queue_size must be positive");
  if (alpha_dis < 0 || alpha_res < 0 || alpha_a < 0) throw std::invalid_argument("loss weights must be >= 0");
  if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
  if (batch_size <= 0) throw std::invalid_argument("batch_size must be positive");
  if (!(lr_max >= lr_min && lr_min >= 0)) throw std::invalid_argument("need lr_max >= lr_min >= 0");
  if (weight_decay < 0) throw std::invalid_argument("weight_decay must be >= 0");
  if (!(momentum >= 0 && momentum <= 1)) throw std::invalid_argument("momentum must lie in [0, 1]");
}

Var consistency_loss(const Var& z_w, const Var& z_n, const Matrix& zm_w, const Matrix& zm_n, const Matrix& queue_w,
                     const Matrix& queue_n, double tau, double alpha) {
  if (!(tau > 0)) throw std::invalid_argument("consistency_loss: tau must be > 0");
  if (z_w.rows() == 0) throw std::invalid_argument("consistency_loss: empty batch");
  const Index B = z_w.rows(), d = z_w.cols();
  for (const Matrix* m : {&zm_w, &zm_n})
    if (m->rows() != B || m->cols() != d) throw std::invalid_argument("consistency_loss: momentum feature shape");
  if (z_n.rows() != B || z_n.cols() != d) throw std::invalid_argument("consistency_loss: feature shape mismatch");
  if ((queue_w.rows() > 0 && queue_w.cols() != d) || (queue_n.rows() > 0 && queue_n.cols() != d))
    throw std::invalid_argument("consistency_loss: queue width mismatch");
  Matrix qw = queue_w.rows() > 0 ? queue_w : Matrix(0, d);
  Matrix qn = queue_n.rows() > 0 ? queue_n : Matrix(0, d);
  Var l_wn = directional(z_w, zm_w, zm_n, qn, tau, alpha);
  Var l_nw = directional(z_n, zm_n, zm_w, qw, tau, alpha);
  return scale(add(l_wn, l_nw), 0.5);
}

std::vector<bool> random_mask(int T, double sigma, std::uint64_t seed) {
  if (!(sigma > 0 && sigma < 1)) throw std::invalid_argument("random_mask: sigma must lie in (0, 1)");
  const int masked = static_cast<int>(std::lround(sigma * T));
  if (masked <= 0 || masked >= T) throw std::invalid_argument("random_mask: round(sigma*T) must lie strictly in (0, T)");
  std::mt19937_64 rng(seed);
  // partial Fisher-Yates: the first `masked` slots of the permutation are masked
  std::vector<int> order(T);
  std::iota(order.begin(), order.end(), 0);
  for (int i = 0; i < masked; ++i) {
    std::uniform_int_distribution<int> pick(i, T - 1);
    std::swap(order[i], order[pick(rng)]);
  }
  std::vector<bool> mask(T, false);
  for (int i = 0; i < masked; ++i) mask[order[i]] = true;
  return mask;
}

Var reconstruction_loss(const Matrix& w, const Matrix& n, const Var& recon_w, const Var& recon_n,
                        const std::vector<bool>& masked_only) {
  if (w.rows() != recon_w.rows() || w.cols() != recon_w.cols() || n.rows() != recon_n.rows() ||
      n.cols() != recon_n.cols())
    throw std::invalid_argument("reconstruction_loss: shape mismatch");
  auto term = [&](const Matrix& orig, const Var& recon) {
    if (masked_only.empty()) return mean(square(sub(recon, Var::constant(orig))));
    const Index T = static_cast<Index>(masked_only.size());
    if (orig.rows() % T != 0) throw std::invalid_argument("reconstruction_loss: mask length does not divide rows");
    std::vector<Index> rows;
    for (Index r = 0; r < orig.rows(); ++r)
      if (masked_only[static_cast<std::size_t>(r % T)]) rows.push_back(r);
    Matrix sel(static_cast<Index>(rows.size()), orig.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) sel.row(static_cast<Index>(i)) = orig.row(rows[i]);
    return mean(square(sub(gather_rows(recon, rows), Var::constant(sel))));
  };
  return add(term(w, recon_w), term(n, recon_n));
}

Var alignment_loss(const Var& Z_w, const Var& Z_n, double tau) {
  if (!(tau > 0)) throw std::invalid_argument("alignment_loss: tau must be > 0");
  if (Z_w.rows() == 0 || Z_w.rows() != Z_n.rows() || Z_w.cols() != Z_n.cols())
    throw std::invalid_argument("alignment_loss: need matching non-empty batches");
  std::vector<int> diag(static_cast<std::size_t>(Z_w.rows()));
  std::iota(diag.begin(), diag.end(), 0);
  Var sim = scale(matmul(Z_w, transpose(Z_n)), 1.0 / tau);
  return add(cross_entropy(sim, diag), cross_entropy(transpose(sim), diag));
}

std::map<std::string, Var> pretrain_parameters(net::Model& model) {
  static const std::vector<std::string> prefixes{"enc_wli", "enc_nbi", "decoder", "proj", "glo"};
  return net::parameters_with_prefix(model, prefixes);
}

PretrainState PretrainState::init(const net::NetConfig& cfg, const PretrainConfig& pc, std::uint64_t model_seed,
                                  Index train_size) {
  auto state = net::ModelState::init(cfg, model_seed, pc.momentum);
  const Index K = std::max<Index>(pc.batch_size, std::min<Index>(pc.queue_size, train_size));
  optim::AdamW opt(pretrain_parameters(state.model), optim::AdamWConfig{.weight_decay = pc.weight_decay});
  return PretrainState{std::move(state), MomentumQueue::create(K, cfg.proj_dim), MomentumQueue::create(K, cfg.proj_dim),
                       std::move(opt)};
}

PretrainLosses pretrain_step(PretrainState& st, std::span<const data::PairedSample> batch, const PretrainConfig& cfg,
                             double lr, std::mt19937_64& mask_rng) {
  if (batch.empty()) throw std::invalid_argument("pretrain_step: empty batch");
  auto& model = st.state.model;
  auto& mom = st.state.momentum;
  const auto& nc = model.cfg;
  const Index B = static_cast<Index>(batch.size());
  const auto img_w = images_of(batch, data::Modality::wli);
  const auto img_n = images_of(batch, data::Modality::nbi);
  const Matrix pw = net::patchify(img_w, nc.patch_size);
  const Matrix pn = net::patchify(img_n, nc.patch_size);

  // consistency + alignment on full images
  const auto ew = model.enc_wli(pw, B);
  const auto en = model.enc_nbi(pn, B);
  const Matrix zm_w = mom.proj(mom.enc_wli(pw, B).pooled).value();
  const Matrix zm_n = mom.proj(mom.enc_nbi(pn, B).pooled).value();
  Var l_dis = consistency_loss(model.proj(ew.pooled), model.proj(en.pooled), zm_w, zm_n, st.queue_w.active(),
                               st.queue_n.active(), cfg.tau, cfg.alpha);
  Var l_a = alignment_loss(model.glo(ew.pooled), model.glo(en.pooled), cfg.tau);

  // masked reconstruction, one mask shared by the batch and both modalities
  const auto mask = random_mask(nc.tokens(), cfg.mask_ratio, mask_rng());
  std::vector<Index> visible;
  for (int t = 0; t < nc.tokens(); ++t)
    if (!mask[static_cast<std::size_t>(t)]) visible.push_back(t);
  Var recon_w = model.decoder(model.enc_wli(pw, B, visible).tokens, mask, B);
  Var recon_n = model.decoder(model.enc_nbi(pn, B, visible).tokens, mask, B);
  Var l_res = reconstruction_loss(pw, pn, recon_w, recon_n, cfg.masked_only ? mask : std::vector<bool>{});

  Var l_pre = add(add(scale(l_dis, cfg.alpha_dis), scale(l_res, cfg.alpha_res)), scale(l_a, cfg.alpha_a));
  st.optimizer.zero_grad();
  ad::backward(l_pre);
  st.optimizer.step(lr);
  net::momentum_update(model, mom);
  st.queue_w.push(zm_w);
  st.queue_n.push(zm_n);
  return {l_dis.item(), l_res.item(), l_a.item(), l_pre.item()};
}

io::Checkpoint to_checkpoint(PretrainState& st, const io::SeedBlock& seeds, const PretrainConfig& cfg) {
  io::Checkpoint ckpt;
  ckpt.stage = io::Stage::pretrain;
  ckpt.net = st.state.model.cfg;
  ckpt.config_hash = io::net_config_hash(ckpt.net);
  ckpt.seeds = seeds;
  ckpt.settings = {{"tau", cfg.tau},         {"alpha", cfg.alpha},       {"mask_ratio", cfg.mask_ratio},
                   {"momentum", cfg.momentum}, {"epochs", cfg.epochs}, {"steps", st.optimizer.steps()}};
  io::store_parameters(ckpt.arrays, "param/", net::named_parameters(st.state.model));
  io::store_parameters(ckpt.arrays, "momentum/", net::named_parameters(st.state.momentum));
  for (const auto& [name, m] : st.optimizer.state()) ckpt.arrays["optim/" + name] = m;
  for (const auto& [tag, q] : {std::pair<const char*, const MomentumQueue*>{"wli", &st.queue_w}, {"nbi", &st.queue_n}}) {
    ckpt.arrays[std::string("queue/") + tag] = q->entries;
    Matrix meta(1, 2);
    meta << static_cast<double>(q->cursor), static_cast<double>(q->filled);
    ckpt.arrays[std::string("queue/") + tag + ".meta"] = meta;
  }
  return ckpt;
}

io::Checkpoint pretrain_loop(const data::DatasetSplits& splits, const net::NetConfig& net_cfg,
                             const PretrainConfig& cfg, const io::SeedBlock& seeds,
                             const std::function<void(const EpochRecord&)>& on_epoch) {
  cfg.validate();
  net_cfg.validate();
  if (splits.train.empty()) throw std::invalid_argument("pretrain_loop: empty training split");
  const Index n = static_cast<Index>(splits.train.size());
  auto st = PretrainState::init(net_cfg, cfg, derive_seed(seeds.model, kInitTag), n);
  auto shuffle_rng = make_rng(seeds.data, kShuffleTag);
  auto mask_rng = make_rng(seeds.mask, kMaskTag);
  std::vector<std::size_t> order(splits.train.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<data::PairedSample> batch;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = optim::cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    EpochRecord rec{epoch, {}, lr};
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      batch.clear();
      for (std::size_t i = start; i < end; ++i) batch.push_back(splits.train[order[i]]);
      const auto l = pretrain_step(st, batch, cfg, lr, mask_rng);
      const double w = static_cast<double>(end - start) / static_cast<double>(n);
      rec.losses.dis += w * l.dis;
      rec.losses.res += w * l.res;
      rec.losses.a += w * l.a;
      rec.losses.pre += w * l.pre;
    }
    if (on_epoch) on_epoch(rec);
  }
  return to_checkpoint(st, seeds, cfg);
}

}  // namespace mics::pretrain
