#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "mics/pretraining.hpp"
#include "mics/shiftdict.hpp"
#include "oracles.hpp"
#include "stats.hpp"

#include <cmath>
#include <limits>
#include <random>
#include <set>

using namespace mics;
using namespace mics::svd;

namespace {

Matrix covariance_oracle(const std::vector<Eigen::VectorXd>& xs) {
  const Index D = xs[0].size();
  Eigen::VectorXd mu = Eigen::VectorXd::Zero(D);
  for (auto& x : xs) mu += x;
  mu /= static_cast<double>(xs.size());
  Matrix c = Matrix::Zero(D, D);
  for (Index a = 0; a < D; ++a)
    for (Index b = 0; b < D; ++b) {
      double s = 0;
      for (auto& x : xs) s += (x(a) - mu(a)) * (x(b) - mu(b));
      c(a, b) = s / static_cast<double>(xs.size() - 1);
    }
  return c;
}

}  // namespace

TEST_CASE("kmeans examples") {
  Matrix pts(4, 1);
  pts << 0, 1, 10, 11;
  auto r = kmeans(pts, 2, 3);
  CHECK(std::abs(r.objective - 1.0) < 1e-12);
  CHECK(std::abs(testing::brute_force_optimum(pts, 2) - 1.0) < 1e-12);
  std::set<double> protos{r.prototypes(0, 0), r.prototypes(1, 0)};
  CHECK(protos == std::set<double>{0.5, 10.5});

  Matrix distinct(3, 2);
  distinct << 0, 0, 5, 1, -3, 4;
  auto d = kmeans(distinct, 3, 1);
  CHECK(d.objective == 0.0);

  Matrix same = Matrix::Constant(5, 2, 1.5);
  auto s = kmeans(same, 2, 1);
  CHECK(s.objective == 0.0);
  CHECK(s.assignments.size() == 5);

  CHECK_THROWS_AS(kmeans(distinct, 4, 1), std::invalid_argument);
}

TEST_CASE("kmeans against brute force on small instances") {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> qd(3, 8), cd(2, 3), dd(1, 2);
  std::normal_distribution<double> n(0.0, 1.0);
  int optimal = 0, monotone = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int C = cd(rng), D = dd(rng), Q = std::max(qd(rng), C);
    Matrix pts(Q, D);
    for (Index i = 0; i < pts.size(); ++i) pts.data()[i] = n(rng);
    auto r = kmeans(pts, C, static_cast<std::uint64_t>(trial));
    if (std::abs(r.objective - testing::brute_force_optimum(pts, C)) <= 1e-9) ++optimal;
    bool mono = true;
    for (std::size_t k = 1; k < r.objective_trace.size(); ++k)
      mono = mono && r.objective_trace[k] <= r.objective_trace[k - 1] + 1e-12;
    monotone += mono;
    // prototypes are the means of their members
    for (int j = 0; j < C; ++j) {
      Eigen::RowVectorXd mu = Eigen::RowVectorXd::Zero(D);
      int cnt = 0;
      for (Index i = 0; i < Q; ++i)
        if (r.assignments[i] == j) {
          mu += pts.row(i);
          ++cnt;
        }
      if (cnt > 0) CHECK((mu / cnt - r.prototypes.row(j)).norm() < 1e-9);
    }
  }
  CHECK(optimal >= 90);
  CHECK(monotone == 100);
}

TEST_CASE("cluster covariance") {
  Matrix pts(3, 2);
  pts << 0, 0, 2, 0, 7, 7;
  std::vector<int> a{0, 0, 1};
  Matrix c = cluster_covariance(pts, a, 0, 0.0);
  CHECK(c == (Matrix(2, 2) << 2, 0, 0, 0).finished());
  CHECK(cluster_covariance(pts, a, 1, 0.25) == Matrix(Matrix::Identity(2, 2) * 0.25));
  CHECK_THROWS_AS(cluster_covariance(pts, a, 2, 0.1), std::invalid_argument);
  Matrix shrunk = cluster_covariance(pts, a, 0);
  CHECK(std::abs(shrunk(1, 1) - 1e-4 * 2.0 / 2.0) < 1e-18);

  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix big(60, 4);
  for (Index i = 0; i < big.size(); ++i) big.data()[i] = n(rng);
  std::vector<int> assign(60);
  std::vector<Eigen::VectorXd> members;
  for (int i = 0; i < 60; ++i) {
    assign[i] = i < 50 ? 2 : 0;
    if (i < 50) members.push_back(big.row(i).transpose());
  }
  Matrix got = cluster_covariance(big, assign, 2, 0.0);
  CHECK((got - covariance_oracle(members)).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((got - got.transpose()).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("shift vector sampling") {
  Eigen::VectorXd mu(2);
  mu << 3, -1;
  Matrix zero = Matrix::Zero(2, 2);
  Matrix s0 = sample_shift_vectors(mu, zero, 5, 1);
  for (Index p = 0; p < 5; ++p) CHECK(s0.row(p) == mu.transpose());

  Matrix sigma = Matrix::Zero(2, 2);
  sigma(0, 0) = 4;
  sigma(1, 1) = 1;
  const int P = 10000;
  Matrix s = sample_shift_vectors(mu, sigma, P, 42);
  CHECK(s == sample_shift_vectors(mu, sigma, P, 42));
  Eigen::RowVectorXd mean = s.colwise().mean();
  CHECK(std::abs(mean(0) - 3.0) < 3 * 2.0 / std::sqrt(P));
  CHECK(std::abs(mean(1) + 1.0) < 3 * 1.0 / std::sqrt(P));
  Matrix centered = s.rowwise() - mean;
  Matrix emp = centered.transpose() * centered / (P - 1);
  CHECK((emp - sigma).norm() / sigma.norm() < 0.05);
  Matrix L = psd_cholesky(sigma);
  for (int k = 0; k < 2; ++k) {
    std::vector<double> white;
    for (Index p = 0; p < P; ++p) {
      Eigen::VectorXd w = L.triangularView<Eigen::Lower>().solve((s.row(p).transpose() - mu).eval());
      white.push_back(w(k));
    }
    CHECK(testing::ks_normal_pvalue(white) > 0.01);
  }

  Matrix bad(2, 2);
  bad << 1, 2, 2, 1;
  CHECK_THROWS_AS(sample_shift_vectors(mu, bad, 3, 1), std::domain_error);
}

TEST_CASE("draw_shift uniformity and determinism") {
  auto dict = ShiftVectorDictionary::zeros(6, 4, 2);
  for (int m = 0; m < 2; ++m)
    for (int j = 0; j < 6; ++j)
      for (int p = 0; p < 4; ++p) dict.modalities[m].shifts[j](p, 0) = static_cast<float>(j * 4 + p);
  std::mt19937_64 rng(5);
  std::vector<int> cells(24, 0);
  const int N = 10000;
  for (int i = 0; i < N; ++i) {
    auto [sw, sn] = draw_shift(dict, rng);
    ++cells[static_cast<int>(sw(0))];
  }
  for (int c : cells) CHECK(std::abs(c / double(N) - 1.0 / 24) <= 0.01);

  std::mt19937_64 a(9), b(9);
  for (int i = 0; i < 10; ++i) CHECK(draw_shift(dict, a).first == draw_shift(dict, b).first);

  auto single = ShiftVectorDictionary::zeros(1, 1, 3);
  single.modalities[0].shifts[0] << 1, 2, 3;
  single.modalities[0].prototypes << 1, 1, 1;
  auto [w, n] = draw_shift(single, rng);
  CHECK(w == Eigen::Vector3d(1, 2, 3));
  CHECK(n == Eigen::Vector3d::Zero());
  CHECK(draw_shift(single, rng, true).first == Eigen::Vector3d(0, 1, 2));
  CHECK_THROWS_AS(draw_shift(ShiftVectorDictionary{}, rng), std::invalid_argument);
}

TEST_CASE("build_svd end to end with bit-exact round trip") {
  net::NetConfig cfg;
  cfg.image_side = 32;
  cfg.patch_size = 8;
  cfg.embed_dim = 8;
  cfg.proj_dim = 4;
  cfg.glo_dim = 12;
  cfg.fusion_heads = 2;
  cfg.encoder_heads = 2;
  cfg.depth = 1;
  cfg.num_classes = 3;
  data::SyntheticSpec spec{3, 5, 32, 8, 1};
  auto splits = data::split_dataset(data::generate_synthetic_dataset(spec), 3, data::kDefaultRatios, 1);
  pretrain::PretrainConfig pc;
  pc.epochs = 0;
  auto ckpt = pretrain::pretrain_loop(splits, cfg, pc, {});
  auto feats = extract_features(ckpt, splits.train, data::Modality::nbi);
  CHECK(feats.rows() == static_cast<Index>(splits.train.size()));
  CHECK(feats == extract_features(ckpt, splits.train, data::Modality::nbi));

  SvdConfig sc;
  sc.per_cluster = 5;
  auto dict = build_svd(ckpt, splits, sc, 7);
  CHECK(dict.clusters == 3);
  CHECK(dict.dim == 8);
  CHECK(dict[data::Modality::wli].shifts[2].rows() == 5);
  const auto bytes = serialize(dict);
  CHECK(bytes.size() == 8 + 16 + 16 + 2 * 4 * (3 * 8 + 3 * 5 * 8));
  CHECK(serialize(deserialize(bytes)) == bytes);
  CHECK(serialize(build_svd(ckpt, splits, sc, 7)) == bytes);
  CHECK_THROWS(deserialize(bytes.substr(0, 30)));

  auto finetuned = ckpt;
  finetuned.stage = io::Stage::finetune;
  CHECK_THROWS_AS(extract_features(finetuned, splits.train, data::Modality::wli), std::invalid_argument);
}
