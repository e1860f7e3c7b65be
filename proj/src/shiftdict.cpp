#include "mics/shiftdict.hpp"

#include "mics/networks.hpp"
#include "mics/random.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>

namespace mics::svd {

static_assert(std::endian::native == std::endian::little, "SVD I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'M', 'I', 'C', 'S', 'S', 'V', 'D', '1'};
constexpr std::uint64_t kClusterTag = 0x5356'444b'4dULL;
constexpr std::uint64_t kSampleTag = 0x5356'4453'4dULL;

double sq_dist(const Matrix& a, Index i, const Matrix& b, Index j) { return (a.row(i) - b.row(j)).squaredNorm(); }

std::vector<int> assign(const Matrix& points, const Matrix& protos) {
  std::vector<int> out(static_cast<std::size_t>(points.rows()));
  for (Index i = 0; i < points.rows(); ++i) {
    int best = 0;
    double best_d = sq_dist(points, i, protos, 0);
    for (Index j = 1; j < protos.rows(); ++j) {
      const double d = sq_dist(points, i, protos, j);
      if (d < best_d) {  // strict: ties keep the lowest index
        best_d = d;
        best = static_cast<int>(j);
      }
    }
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

Matrix plus_plus_seed(const Matrix& points, int C, std::mt19937_64& rng) {
  const Index Q = points.rows();
  Matrix protos(C, points.cols());
  std::uniform_int_distribution<Index> first(0, Q - 1);
  protos.row(0) = points.row(first(rng));
  std::vector<double> d2(static_cast<std::size_t>(Q), std::numeric_limits<double>::infinity());
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int c = 1; c < C; ++c) {
    double total = 0;
    for (Index i = 0; i < Q; ++i) {
      auto& d = d2[static_cast<std::size_t>(i)];
      d = std::min(d, sq_dist(points, i, protos, c - 1));
      total += d;
    }
    Index pick = Q - 1;
    if (total > 0) {
      const double r = u(rng) * total;
      double acc = 0;
      for (Index i = 0; i < Q; ++i) {
        acc += d2[static_cast<std::size_t>(i)];
        if (r < acc) {
          pick = i;
          break;
        }
      }
    } else {
      pick = std::uniform_int_distribution<Index>(0, Q - 1)(rng);
    }
    protos.row(c) = points.row(pick);
  }
  return protos;
}

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

void put_floats(std::string& out, const FloatMatrix& m) {
  out.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(float));
}

}  // namespace

Matrix extract_features(const io::Checkpoint& ckpt, const std::vector<data::PairedSample>& samples,
                        data::Modality m, Index batch_size) {
  ckpt.require_stage(io::Stage::pretrain);
  if (samples.empty()) throw std::invalid_argument("extract_features: no samples");
  const auto model = io::model_from_checkpoint(ckpt);
  const auto& enc = model.encoder(m);
  Matrix out(static_cast<Index>(samples.size()), ckpt.net.embed_dim);
  for (Index start = 0; start < out.rows(); start += batch_size) {
    const Index n = std::min(batch_size, out.rows() - start);
    std::vector<const data::Image*> imgs;
    for (Index i = 0; i < n; ++i) imgs.push_back(&samples[static_cast<std::size_t>(start + i)].image(m));
    out.middleRows(start, n) = enc(net::patchify(imgs, ckpt.net.patch_size), n).pooled.value();
  }
  return out;
}

double kmeans_objective(const Matrix& points, const std::vector<int>& assignments, const Matrix& prototypes) {
  double total = 0;
  for (Index i = 0; i < points.rows(); ++i) total += sq_dist(points, i, prototypes, assignments[static_cast<std::size_t>(i)]);
  return total;
}

namespace {

KMeansResult lloyd(const Matrix& points, int C, std::mt19937_64& rng, int max_iter, double tol) {
  const Index Q = points.rows();
  KMeansResult res;
  res.prototypes = plus_plus_seed(points, C, rng);
  for (int it = 0; it < max_iter; ++it) {
    res.assignments = assign(points, res.prototypes);
    res.objective_trace.push_back(kmeans_objective(points, res.assignments, res.prototypes));
    ++res.iterations;
    Matrix next = Matrix::Zero(C, points.cols());
    std::vector<Index> count(static_cast<std::size_t>(C), 0);
    for (Index i = 0; i < Q; ++i) {
      const int a = res.assignments[static_cast<std::size_t>(i)];
      next.row(a) += points.row(i);
      ++count[static_cast<std::size_t>(a)];
    }
    std::vector<bool> taken(static_cast<std::size_t>(Q), false);
    for (int j = 0; j < C; ++j) {
      if (count[static_cast<std::size_t>(j)] > 0) {
        next.row(j) /= static_cast<double>(count[static_cast<std::size_t>(j)]);
        continue;
      }
      // empty cluster: move it onto the point worst served by its own prototype
      Index far = -1;
      double far_d = -1;
      for (Index i = 0; i < Q; ++i) {
        if (taken[static_cast<std::size_t>(i)]) continue;
        const double d = sq_dist(points, i, res.prototypes, res.assignments[static_cast<std::size_t>(i)]);
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      taken[static_cast<std::size_t>(far)] = true;
      next.row(j) = points.row(far);
    }
    const double move = (next - res.prototypes).rowwise().norm().maxCoeff();
    res.prototypes = std::move(next);
    if (move <= tol) break;
  }
  res.assignments = assign(points, res.prototypes);
  res.objective = kmeans_objective(points, res.assignments, res.prototypes);
  res.objective_trace.push_back(res.objective);
  return res;
}

}  // namespace

KMeansResult kmeans(const Matrix& points, int C, std::uint64_t seed, int max_iter, double tol, int restarts) {
  if (C <= 0) throw std::invalid_argument("kmeans: C must be positive");
  if (points.rows() < C) throw std::invalid_argument("kmeans: fewer points than clusters");
  if (restarts <= 0) throw std::invalid_argument("kmeans: restarts must be positive");
  std::mt19937_64 rng(seed);
  KMeansResult best = lloyd(points, C, rng, max_iter, tol);
  for (int r = 1; r < restarts; ++r) {
    auto cand = lloyd(points, C, rng, max_iter, tol);
    if (cand.objective < best.objective) best = std::move(cand);
  }
  return best;
}

double default_shrinkage(const Matrix& covariance) {
  return std::max(1e-4 * covariance.trace() / static_cast<double>(covariance.rows()), 1e-10);
}

Matrix cluster_covariance(const Matrix& points, const std::vector<int>& assignments, int j, double epsilon) {
  if (static_cast<Index>(assignments.size()) != points.rows())
    throw std::invalid_argument("cluster_covariance: assignment count mismatch");
  std::vector<Index> members;
  for (Index i = 0; i < points.rows(); ++i)
    if (assignments[static_cast<std::size_t>(i)] == j) members.push_back(i);
  if (members.empty()) throw std::invalid_argument("cluster_covariance: cluster " + std::to_string(j) + " is empty");
  const Index D = points.cols();
  Matrix cov = Matrix::Zero(D, D);
  if (members.size() > 1) {
    Eigen::RowVectorXd mu = Eigen::RowVectorXd::Zero(D);
    for (Index i : members) mu += points.row(i);
    mu /= static_cast<double>(members.size());
    for (Index i : members) {
      const Eigen::RowVectorXd d = points.row(i) - mu;
      cov.noalias() += d.transpose() * d;
    }
    cov /= static_cast<double>(members.size() - 1);
  }
  const double eps = epsilon < 0 ? default_shrinkage(cov) : epsilon;
  cov.diagonal().array() += eps;
  return cov;
}

Matrix psd_cholesky(const Matrix& sigma) {
  const Index D = sigma.rows();
  if (sigma.cols() != D) throw std::invalid_argument("psd_cholesky: matrix must be square");
  const double scale = std::max(sigma.diagonal().cwiseAbs().maxCoeff(), 1.0);
  const double tol = 1e-12 * scale;
  Matrix L = Matrix::Zero(D, D);
  for (Index j = 0; j < D; ++j) {
    double pivot = sigma(j, j) - L.row(j).head(j).squaredNorm();
    if (pivot < -tol) throw std::domain_error("psd_cholesky: matrix is not positive semi-definite");
    if (pivot <= tol) continue;  // rank-deficient direction: zero column
    L(j, j) = std::sqrt(pivot);
    for (Index i = j + 1; i < D; ++i) L(i, j) = (sigma(i, j) - L.row(i).head(j).dot(L.row(j).head(j))) / L(j, j);
  }
  return L;
}

Matrix sample_shift_vectors(const Vector& mu, const Matrix& sigma, int P, std::uint64_t seed) {
  if (sigma.rows() != mu.size() || sigma.cols() != mu.size())
    throw std::invalid_argument("sample_shift_vectors: dimension mismatch");
  if (P <= 0) throw std::invalid_argument("sample_shift_vectors: P must be positive");
  const Matrix L = psd_cholesky(sigma);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  Matrix out(P, mu.size());
  Vector g(mu.size());
  for (int p = 0; p < P; ++p) {
    for (Index k = 0; k < g.size(); ++k) g(k) = n01(rng);
    out.row(p) = (mu + L * g).transpose();
  }
  return out;
}

ShiftVectorDictionary ShiftVectorDictionary::zeros(int clusters, int per_cluster, int dim) {
  ShiftVectorDictionary s;
  s.clusters = clusters;
  s.per_cluster = per_cluster;
  s.dim = dim;
  for (auto& m : s.modalities) {
    m.prototypes = FloatMatrix::Zero(clusters, dim);
    m.shifts.assign(static_cast<std::size_t>(clusters), FloatMatrix::Zero(per_cluster, dim));
  }
  return s;
}

ShiftVectorDictionary build_svd(const io::Checkpoint& ckpt, const data::DatasetSplits& splits, const SvdConfig& cfg,
                                std::uint64_t seed) {
  ckpt.require_stage(io::Stage::pretrain);
  const int C = cfg.clusters > 0 ? cfg.clusters : splits.num_classes;
  if (C <= 0) throw std::invalid_argument("build_svd: cluster count must be positive");
  ShiftVectorDictionary out;
  out.clusters = C;
  out.per_cluster = cfg.per_cluster;
  out.dim = ckpt.net.embed_dim;
  out.build_seed = seed;
  out.checkpoint_hash = io::fnv1a(io::serialize(ckpt));
  for (auto m : {data::Modality::wli, data::Modality::nbi}) {
    const auto tag = static_cast<std::uint64_t>(m);
    const Matrix feats = extract_features(ckpt, splits.train, m);
    const auto km = kmeans(feats, C, derive_seed(seed, kClusterTag + tag), cfg.max_iter, cfg.tol, cfg.restarts);
    auto& dict = out.modalities[static_cast<std::size_t>(m)];
    dict.prototypes = km.prototypes.cast<float>();
    for (int j = 0; j < C; ++j) {
      const bool populated = std::count(km.assignments.begin(), km.assignments.end(), j) > 0;
      // a cluster can stay empty only for duplicate features; fall back to a floor-only covariance
      const Matrix sigma = populated ? cluster_covariance(feats, km.assignments, j, cfg.epsilon)
                                     : Matrix(Matrix::Identity(out.dim, out.dim) * 1e-10);
      const Vector mu = km.prototypes.row(j).transpose();
      const auto s = sample_shift_vectors(mu, sigma, cfg.per_cluster,
                                          derive_seed(derive_seed(seed, kSampleTag + tag), static_cast<std::uint64_t>(j)));
      dict.shifts.push_back(s.cast<float>());
    }
  }
  return out;
}

std::pair<Vector, Vector> draw_shift(const ShiftVectorDictionary& svd, std::mt19937_64& rng, bool centered) {
  if (svd.empty()) throw std::invalid_argument("draw_shift: empty dictionary");
  std::uniform_int_distribution<int> cluster(0, svd.clusters - 1);
  std::uniform_int_distribution<int> index(0, svd.per_cluster - 1);
  auto one = [&](data::Modality m) {
    const auto& d = svd[m];
    const int j = cluster(rng);
    const int p = index(rng);
    Vector s = d.shifts[static_cast<std::size_t>(j)].row(p).transpose().cast<double>();
    if (centered) s -= d.prototypes.row(j).transpose().cast<double>();
    return s;
  };
  Vector s_w = one(data::Modality::wli);
  Vector s_n = one(data::Modality::nbi);
  return {std::move(s_w), std::move(s_n)};
}

std::string serialize(const ShiftVectorDictionary& svd) {
  std::string out(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, 2);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(svd.clusters));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(svd.per_cluster));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(svd.dim));
  put<std::uint64_t>(out, svd.build_seed);
  put<std::uint64_t>(out, svd.checkpoint_hash);
  for (const auto& m : svd.modalities) {
    if (m.prototypes.rows() != svd.clusters || m.prototypes.cols() != svd.dim ||
        static_cast<int>(m.shifts.size()) != svd.clusters)
      throw std::invalid_argument("serialize: dictionary shape inconsistent with header");
    put_floats(out, m.prototypes);
    for (const auto& s : m.shifts) {
      if (s.rows() != svd.per_cluster || s.cols() != svd.dim)
        throw std::invalid_argument("serialize: shift block shape inconsistent with header");
      put_floats(out, s);
    }
  }
  return out;
}

ShiftVectorDictionary deserialize(std::string_view bytes) {
  std::size_t pos = 0;
  auto take = [&](std::size_t n) {
    if (n > bytes.size() - pos) throw std::runtime_error("SVD file truncated");
    auto v = bytes.substr(pos, n);
    pos += n;
    return v;
  };
  auto get_u32 = [&] {
    std::uint32_t v;
    std::memcpy(&v, take(4).data(), 4);
    return v;
  };
  auto get_u64 = [&] {
    std::uint64_t v;
    std::memcpy(&v, take(8).data(), 8);
    return v;
  };
  if (take(sizeof kMagic) != std::string_view(kMagic, sizeof kMagic)) throw std::runtime_error("not an SVD file");
  if (get_u32() != 2) throw std::runtime_error("SVD file must hold two modalities");
  ShiftVectorDictionary svd;
  svd.clusters = static_cast<int>(get_u32());
  svd.per_cluster = static_cast<int>(get_u32());
  svd.dim = static_cast<int>(get_u32());
  svd.build_seed = get_u64();
  svd.checkpoint_hash = get_u64();
  auto read_block = [&](Index rows, Index cols) {
    FloatMatrix m(rows, cols);
    const auto raw = take(static_cast<std::size_t>(rows * cols) * sizeof(float));
    std::memcpy(m.data(), raw.data(), raw.size());
    return m;
  };
  for (auto& m : svd.modalities) {
    m.prototypes = read_block(svd.clusters, svd.dim);
    for (int j = 0; j < svd.clusters; ++j) m.shifts.push_back(read_block(svd.per_cluster, svd.dim));
  }
  if (pos != bytes.size()) throw std::runtime_error("trailing bytes in SVD file");
  return svd;
}

void save_svd(const std::filesystem::path& path, const ShiftVectorDictionary& svd) {
  io::write_file_atomic(path, serialize(svd));
}

ShiftVectorDictionary load_svd(const std::filesystem::path& path) { return deserialize(io::read_file(path)); }

}  // namespace mics::svd
