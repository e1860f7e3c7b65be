#pragma once

// Shift Vector Dictionary: per-modality clustering of pretrained features,
// per-cluster Gaussian fits and sampled shift vectors.

#include "mics/autodiff.hpp"
#include "mics/checkpoint.hpp"
#include "mics/datamodel.hpp"

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace mics::svd {

using ad::Index;
using ad::Matrix;
using Vector = Eigen::VectorXd;
using FloatMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Pooled encoder features (Q x D) of a pretrain-stage checkpoint.
Matrix extract_features(const io::Checkpoint& ckpt, const std::vector<data::PairedSample>& samples,
                        data::Modality m, Index batch_size = 64);

struct KMeansResult {
  std::vector<int> assignments;
  Matrix prototypes;  // C x D
  double objective = 0;
  std::vector<double> objective_trace;  // after every assignment step
  int iterations = 0;
};

/// Sum of squared distances of every point to its assigned prototype.
double kmeans_objective(const Matrix& points, const std::vector<int>& assignments, const Matrix& prototypes);

/// Lloyd's algorithm with k-means++ seeding. Stops when no prototype moves
/// by more than `tol` or after `max_iter` iterations. Assignment ties go to
/// the lowest cluster index; an empty cluster is re-seeded at the point
/// farthest from its current prototype. `restarts` independent seedings are
/// run and the lowest final objective kept (earliest on ties).
KMeansResult kmeans(const Matrix& points, int C, std::uint64_t seed, int max_iter = 100, double tol = 1e-10,
                    int restarts = 10);

/// Relative shrinkage floor 1e-4 * trace / D, never below 1e-10.
double default_shrinkage(const Matrix& covariance);

/// Unbiased covariance of cluster j plus epsilon * I (epsilon * I alone for a
/// singleton). A negative epsilon selects default_shrinkage.
Matrix cluster_covariance(const Matrix& points, const std::vector<int>& assignments, int j, double epsilon = -1.0);

/// Lower-triangular L with L * L^T = Sigma for symmetric PSD Sigma; zero
/// pivots give zero columns, negative pivots throw std::domain_error.
Matrix psd_cholesky(const Matrix& sigma);

/// P draws mu + L g, g ~ N(0, I).
Matrix sample_shift_vectors(const Vector& mu, const Matrix& sigma, int P, std::uint64_t seed);

struct ModalityDictionary {
  FloatMatrix prototypes;             // C x D
  std::vector<FloatMatrix> shifts;    // C entries of P x D
};

struct ShiftVectorDictionary {
  int clusters = 0;
  int per_cluster = 0;
  int dim = 0;
  std::uint64_t build_seed = 0;
  std::uint64_t checkpoint_hash = 0;
  std::array<ModalityDictionary, 2> modalities;  // indexed by data::Modality

  bool empty() const { return clusters == 0 || per_cluster == 0; }
  const ModalityDictionary& operator[](data::Modality m) const { return modalities[static_cast<int>(m)]; }
  /// A dictionary of zero vectors (shift-free augmentation).
  static ShiftVectorDictionary zeros(int clusters, int per_cluster, int dim);
};

struct SvdConfig {
  int clusters = 0;  // 0 -> number of classes
  int per_cluster = 64;
  double epsilon = -1.0;  // < 0 -> relative default
  int max_iter = 100;
  double tol = 1e-8;
  int restarts = 10;
};

ShiftVectorDictionary build_svd(const io::Checkpoint& ckpt, const data::DatasetSplits& splits, const SvdConfig& cfg,
                                std::uint64_t seed);

/// Uniform cluster and vector index per modality, drawn independently.
/// `centered` returns s - mu_j instead of s.
std::pair<Vector, Vector> draw_shift(const ShiftVectorDictionary& svd, std::mt19937_64& rng, bool centered = false);

std::string serialize(const ShiftVectorDictionary& svd);
ShiftVectorDictionary deserialize(std::string_view bytes);
void save_svd(const std::filesystem::path& path, const ShiftVectorDictionary& svd);
ShiftVectorDictionary load_svd(const std::filesystem::path& path);

}  // namespace mics::svd
