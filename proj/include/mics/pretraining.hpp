#pragma once

// Label-free pretraining: momentum-queue consistency learning, masked
// reconstruction and high-dimensional cross-modal alignment.

#include "mics/autodiff.hpp"
#include "mics/checkpoint.hpp"
#include "mics/datamodel.hpp"
#include "mics/networks.hpp"
#include "mics/optim.hpp"

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

namespace mics::pretrain {

using ad::Index;
using ad::Matrix;
using ad::Var;

/// Fixed-capacity FIFO of unit-norm feature rows.
struct MomentumQueue {
  Matrix entries;  // K x dim
  Index cursor = 0;
  Index filled = 0;

  static MomentumQueue create(Index capacity, Index dim);
  Index capacity() const { return entries.rows(); }
  /// Overwrites the oldest rows cyclically. Throws if B > K or a row is not unit-norm.
  void push(const Matrix& feats);
  /// Filled rows (storage order; the loss is invariant to key order).
  Matrix active() const { return entries.topRows(filled); }
};

struct PretrainConfig {
  double tau = 0.07;
  double alpha = 0.4;
  double mask_ratio = 0.75;
  int queue_size = 1024;
  double alpha_dis = 1.0;
  double alpha_res = 1.0;
  double alpha_a = 1.0;
  int epochs = 100;
  int batch_size = 16;
  double lr_max = 1e-4;
  double lr_min = 1e-5;
  double weight_decay = 0.02;
  double momentum = 0.995;
  bool masked_only = false;  // reconstruction on masked patches only

  void validate() const;
};

/// Soft-target consistency loss between each modality's projected features
/// and the other modality's momentum keys (batch keys first, then the queue).
Var consistency_loss(const Var& z_w, const Var& z_n, const Matrix& zm_w, const Matrix& zm_n, const Matrix& queue_w,
                     const Matrix& queue_n, double tau, double alpha);

/// Exactly round(sigma * T) masked positions (true = masked), uniform
/// without replacement, deterministic per seed.
std::vector<bool> random_mask(int T, double sigma, std::uint64_t seed);

/// Sum over modalities of the per-modality mean squared error. With a
/// non-empty mask only masked patch rows (per sample) contribute.
Var reconstruction_loss(const Matrix& w, const Matrix& n, const Var& recon_w, const Var& recon_n,
                        const std::vector<bool>& masked_only = {});

/// Symmetric InfoNCE: (1/B) sum_i [H(y_i, S(w_i, n)) + H(y_i, S(n_i, w))].
Var alignment_loss(const Var& Z_w, const Var& Z_n, double tau);

struct PretrainLosses {
  double dis = 0, res = 0, a = 0, pre = 0;
};

struct PretrainState {
  net::ModelState state;
  MomentumQueue queue_w, queue_n;
  optim::AdamW optimizer;

  static PretrainState init(const net::NetConfig& cfg, const PretrainConfig& pc, std::uint64_t model_seed,
                            Index train_size);
};

/// Parameters updated during pretraining (encoders, decoder, heads used by
/// the three losses).
std::map<std::string, Var> pretrain_parameters(net::Model& model);

/// One optimizer step on the combined objective; `mask_rng` supplies the
/// batch mask seed.
PretrainLosses pretrain_step(PretrainState& st, std::span<const data::PairedSample> batch, const PretrainConfig& cfg,
                             double lr, std::mt19937_64& mask_rng);

struct EpochRecord {
  int epoch = 0;
  PretrainLosses losses;  // batch-size weighted means
  double lr = 0;
};

io::Checkpoint to_checkpoint(PretrainState& st, const io::SeedBlock& seeds, const PretrainConfig& cfg);

/// Trains on splits.train (labels ignored) with a cosine lr schedule and
/// returns a pretrain-stage checkpoint. `on_epoch` receives each record.
io::Checkpoint pretrain_loop(const data::DatasetSplits& splits, const net::NetConfig& net_cfg,
                             const PretrainConfig& cfg, const io::SeedBlock& seeds,
                             const std::function<void(const EpochRecord&)>& on_epoch = {});

}  // namespace mics::pretrain
