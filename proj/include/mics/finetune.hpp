#pragma once

// Labeled fine-tuning: fused classification with shift-vector augmentation,
// two-branch evidential heads combined by Dempster's rule, EMA weights and
// evaluation reports.

#include "mics/autodiff.hpp"
#include "mics/checkpoint.hpp"
#include "mics/datamodel.hpp"
#include "mics/networks.hpp"
#include "mics/optim.hpp"
#include "mics/shiftdict.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace mics::finetune {

using ad::Index;
using ad::Matrix;
using ad::Var;

/// `wli` trains and predicts from the white-light encoder alone (no fusion,
/// shifts or evidential terms).
enum class ModalityMode { both, wli };
const char* to_string(ModalityMode m);
ModalityMode modality_mode_from_string(const std::string& s);

struct FinetuneConfig {
  int epochs = 50;
  int batch_size = 16;
  double lr_max = 1e-4;
  double lr_min = 1e-6;
  double weight_decay = 0.02;
  double ema_decay = 0.999;
  bool ema_warmup = true;  // decay_t = min(decay, (1 + t) / (10 + t))
  int theta_horizon = 10;
  bool use_svd = true;
  bool use_tmc = true;
  bool freeze_encoders = false;
  bool per_sample_shift = false;
  bool centered_shift = false;
  double label_fraction = 0.1;
  ModalityMode modalities = ModalityMode::both;

  void validate() const;
};

/// theta = min(1, epoch / horizon).
double theta_schedule(int epoch, int horizon);

/// Elementwise z_f + s for s given as 1 x D (broadcast) or B x D.
std::pair<Var, Var> shift_augment(const Var& z_f, const Matrix& s_w, const Matrix& s_n);

/// CE(cls(z_f)) + CE(cls(z_wf)) + CE(cls(z_nf)), each a batch mean.
Var fusion_classification_loss(const Var& z_f, const Var& z_wf, const Var& z_nf, std::span<const int> labels,
                               const net::Linear& cls);

struct FinetuneLosses {
  double f = 0, wn = 0, fuse = 0, total = 0;
};

/// Differentiable forward pass of the fine-tuning objective.
struct StepGraph {
  Var l_f, l_wn, l_fuse, total;
};
StepGraph finetune_objective(const net::Model& model, std::span<const data::PairedSample> batch,
                             const Matrix& s_w, const Matrix& s_n, const FinetuneConfig& cfg, double theta);

std::map<std::string, Var> finetune_parameters(net::Model& model, const FinetuneConfig& cfg);

struct FinetuneState {
  net::Model model;
  optim::AdamW optimizer;
  std::map<std::string, Matrix> ema;
  std::int64_t step = 0;

  static FinetuneState init(net::Model model, const FinetuneConfig& cfg);
  /// Model carrying the EMA weights.
  net::Model ema_model() const;
};

/// One optimizer step. Shifts come from `svd` via `shift_rng` when use_svd,
/// else they are zero vectors.
FinetuneLosses finetune_step(FinetuneState& st, std::span<const data::PairedSample> batch,
                             const svd::ShiftVectorDictionary* svd, const FinetuneConfig& cfg, int epoch, double lr,
                             std::mt19937_64& shift_rng);

struct PredictSettings {
  ModalityMode modalities = ModalityMode::both;
  bool use_tmc = true;
};

struct Predictions {
  std::vector<int> labels;
  std::vector<double> uncertainty;
  Matrix embeddings;  // fused feature (or white-light feature in wli mode)
};

Predictions predict(const net::Model& model, const std::vector<data::PairedSample>& samples,
                    const PredictSettings& settings, Index batch_size = 64);

struct MetricsReport {
  int samples = 0;
  double accuracy = 0;
  std::vector<double> per_class_accuracy;
  std::vector<int> per_class_count;
  double mean_uncertainty = 0;
  Eigen::MatrixXi confusion;  // rows true class, cols predicted

  std::string to_text() const;
};

MetricsReport score(const std::vector<int>& truth, const Predictions& pred, int num_classes);
MetricsReport evaluate(const net::Model& model, const std::vector<data::PairedSample>& samples,
                       const PredictSettings& settings);
/// Requires a finetune-stage checkpoint; settings are read from its header.
MetricsReport evaluate(const io::Checkpoint& ckpt, const std::vector<data::PairedSample>& samples);
PredictSettings settings_of(const io::Checkpoint& ckpt);

struct EpochRecord {
  int epoch = 0;
  FinetuneLosses losses;  // batch-size weighted means
  double val_acc = 0;
  double mean_uncertainty = 0;
  double lr = 0;
};

/// Trains on view.labeled starting from a pretrain-stage checkpoint and
/// returns a finetune-stage checkpoint holding the best-validation EMA
/// weights. `on_epoch` receives each record and the current online model.
io::Checkpoint finetune_loop(const data::DatasetSplits& splits, const data::LabelFractionView& view,
                             const io::Checkpoint& init, const svd::ShiftVectorDictionary* svd,
                             const FinetuneConfig& cfg, const io::SeedBlock& seeds,
                             const std::function<void(const EpochRecord&, const net::Model&)>& on_epoch = {});

}  // namespace mics::finetune
