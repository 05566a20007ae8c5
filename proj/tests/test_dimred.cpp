#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include <Eigen/Eigenvalues>
#include <nlohmann/json.hpp>

#include "cowlab/dimred.hpp"
#include "cowlab/linalg.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace cowlab;

namespace {

Mat random_symmetric(int n, std::mt19937_64& rng) {
  const Mat m = testutil::random_matrix(n, n, rng);
  return 0.5 * (m + m.transpose());
}

Mat cov_oracle(const Mat& x) {
  Mat c = Mat::Zero(x.cols(), x.cols());
  const Vec mu = x.colwise().mean();
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Vec d = x.row(i).transpose() - mu;
    c += d * d.transpose();
  }
  return c / static_cast<double>(x.rows() - 1);
}

double fisher_criterion(const Mat& p, const Mat& sw, const Mat& sb) {
  const Mat w = p * sw * p.transpose();
  const Mat b = p * sb * p.transpose();
  return (w.ldlt().solve(b)).trace();
}

void scatter(const Mat& x, const std::vector<ClassTag>& y, Mat& sw, Mat& sb) {
  const Eigen::Index d = x.cols();
  sw = Mat::Zero(d, d);
  sb = Mat::Zero(d, d);
  const Vec mu = x.colwise().mean();
  for (int t = 0; t < kNumClasses; ++t) {
    std::vector<Eigen::Index> rows;
    for (std::size_t i = 0; i < y.size(); ++i)
      if (index_of(y[i]) == t) rows.push_back(static_cast<Eigen::Index>(i));
    if (rows.empty()) continue;
    const Vec mc = x(rows, Eigen::all).colwise().mean();
    for (auto r : rows) sw += (x.row(r).transpose() - mc) * (x.row(r).transpose() - mc).transpose();
    sb += static_cast<double>(rows.size()) * (mc - mu) * (mc - mu).transpose();
  }
}

// Gaussian clusters around random class means.
void class_data(int classes, int per_class, int d, std::mt19937_64& rng, Mat& x, std::vector<ClassTag>& y,
                double spread = 3.0) {
  const Mat means = testutil::random_matrix(classes, d, rng, spread);
  x = testutil::random_matrix(classes * per_class, d, rng);
  y.clear();
  for (int c = 0; c < classes; ++c)
    for (int i = 0; i < per_class; ++i) {
      x.row(c * per_class + i) += means.row(c);
      y.push_back(tag_from_index(c));
    }
}

Mat floyd_warshall_knn(const Mat& x, int k_nn) {
  const Eigen::Index n = x.rows();
  Mat e(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) e(i, j) = (x.row(i) - x.row(j)).norm();
  const double inf = std::numeric_limits<double>::infinity();
  Mat g = Mat::Constant(n, n, inf);
  for (Eigen::Index i = 0; i < n; ++i) {
    g(i, i) = 0;
    std::vector<std::pair<double, Eigen::Index>> row;
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i) row.emplace_back(e(i, j), j);
    std::sort(row.begin(), row.end());
    for (int q = 0; q < k_nn; ++q) {
      g(i, row[q].second) = row[q].first;
      g(row[q].second, i) = row[q].first;
    }
  }
  auto closure = [&](Mat m) {
    for (Eigen::Index k = 0; k < n; ++k)
      for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) m(i, j) = std::min(m(i, j), m(i, k) + m(k, j));
    return m;
  };
  Mat c = closure(g);
  // Join components with their shortest cross edge until connected.
  for (;;) {
    double best = inf;
    Eigen::Index ba = -1, bb = -1;
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j)
        if (std::isinf(c(i, j)) && e(i, j) < best) {
          best = e(i, j);
          ba = i;
          bb = j;
        }
    if (ba < 0) break;
    g(ba, bb) = g(bb, ba) = best;
    c = closure(g);
  }
  return c;
}

}  // namespace

TEST_SUITE("dimred") {
  TEST_CASE("Jacobi eigenvalues match characteristic-polynomial roots on 3x3") {
    std::mt19937_64 rng(1);
    for (int t = 0; t < 200; ++t) {
      const Mat a = random_symmetric(3, rng);
      const auto roots = oracle::cubic_eigenvalues(a);
      const SymmetricEigen e = jacobi_eigen(a);
      for (int i = 0; i < 3; ++i) CHECK(e.values(i) == doctest::Approx(roots[i]).epsilon(1e-10));
    }
  }

  TEST_CASE("Jacobi eigenpairs reconstruct and follow the sign rule") {
    std::mt19937_64 rng(2);
    for (int n : {1, 2, 5, 12, 40}) {
      const Mat a = random_symmetric(n, rng);
      const SymmetricEigen e = jacobi_eigen(a);
      CHECK((e.vectors * e.values.asDiagonal() * e.vectors.transpose() - a).norm() < 1e-10 * (1 + a.norm()));
      CHECK((e.vectors.transpose() * e.vectors - Mat::Identity(n, n)).norm() < 1e-10);
      for (int i = 1; i < n; ++i) CHECK(e.values(i) <= e.values(i - 1));
      for (int c = 0; c < n; ++c) {
        Eigen::Index r;
        e.vectors.col(c).cwiseAbs().maxCoeff(&r);
        CHECK(e.vectors(r, c) > 0.0);
      }
      const Eigen::SelfAdjointEigenSolver<Mat> oracle(a);
      for (int i = 0; i < n; ++i) CHECK(e.values(i) == doctest::Approx(oracle.eigenvalues()(n - 1 - i)).epsilon(1e-10));
      const SymmetricEigen t = tridiagonal_eigen(a);
      for (int i = 0; i < n; ++i) CHECK(t.values(i) == doctest::Approx(e.values(i)).epsilon(1e-10));
    }
  }

  TEST_CASE("PCA on collinear points") {
    Mat x(3, 2);
    x << 0, 0, 1, 2, 2, 4;
    const PcaModel m = pca_fit(x, 1);
    CHECK(m.components(0, 0) == doctest::Approx(1.0 / std::sqrt(5.0)).epsilon(1e-9));
    CHECK(m.components(0, 1) == doctest::Approx(2.0 / std::sqrt(5.0)).epsilon(1e-9));
    CHECK(std::abs(m.all_eigenvalues(1)) < 1e-12);
    CHECK_THROWS_AS(pca_fit(x, 3), DataError);
    CHECK_THROWS_AS(pca_fit(x.topRows(1), 1), DataError);
  }

  TEST_CASE("PCA of isotropic data has near-equal eigenvalues") {
    std::mt19937_64 rng(3);
    const Mat x = testutil::random_matrix(20000, 4, rng);
    const PcaModel m = pca_fit(x, 4);
    const Eigen::SelfAdjointEigenSolver<Mat> oracle(cov_oracle(x));
    for (int i = 0; i < 4; ++i) {
      CHECK(m.eigenvalues(i) == doctest::Approx(1.0).epsilon(0.05));
      CHECK(m.eigenvalues(i) == doctest::Approx(oracle.eigenvalues()(3 - i)).epsilon(1e-9));
    }
  }

  TEST_CASE("PCA structure, variance conservation and full-rank reconstruction") {
    std::mt19937_64 rng(4);
    for (int t = 0; t < 20; ++t) {
      const Mat x = testutil::random_matrix(30, 7, rng) * testutil::random_matrix(7, 7, rng);
      const PcaModel m = pca_fit(x, 7);
      CHECK((m.components * m.components.transpose() - Mat::Identity(7, 7)).norm() < 1e-8);
      for (int i = 1; i < 7; ++i) CHECK(m.eigenvalues(i) <= m.eigenvalues(i - 1));
      CHECK(m.all_eigenvalues.sum() == doctest::Approx(cov_oracle(x).trace()).epsilon(1e-8));
      for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const Vec row = x.row(r).transpose();
        CHECK((pca_inverse_transform(m, pca_transform(m, row)) - row).norm() < 1e-8 * (1 + row.norm()));
      }
    }
  }

  TEST_CASE("PCA truncation error equals the discarded eigenvalues") {
    std::mt19937_64 rng(5);
    for (int t = 0; t < 50; ++t) {
      const Mat x = testutil::random_matrix(20, 6, rng) * testutil::random_matrix(6, 6, rng);
      for (int k = 1; k <= 5; ++k) {
        const PcaModel m = pca_fit(x, k);
        double sq = 0.0;
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
          const Vec row = x.row(r).transpose();
          sq += (pca_inverse_transform(m, pca_transform(m, row)) - row).squaredNorm();
        }
        const double mse = sq / static_cast<double>(x.rows() - 1);
        CHECK(mse == doctest::Approx(m.all_eigenvalues.tail(6 - k).sum()).epsilon(1e-6));
      }
    }
  }

  TEST_CASE("LDA on two spherical classes points along the mean difference") {
    std::mt19937_64 rng(6);
    Mat x = testutil::random_matrix(400, 2, rng, 0.1);
    std::vector<ClassTag> y;
    for (int i = 0; i < 400; ++i) {
      if (i >= 200) x(i, 0) += 1.0;
      y.push_back(i < 200 ? ClassTag::A : ClassTag::B);
    }
    const LdaModel m = lda_fit(x, y, 1);
    CHECK(std::abs(m.projection(0, 0)) > 0.99);
    // Sign rule puts the positive entry on x.
    CHECK(m.projection(0, 0) > 0.0);
    const double threshold = (m.projection * (Vec(Eigen::Vector2d(0.5, 0.0)) - m.global_mean))(0);
    int errors = 0;
    for (int i = 0; i < 400; ++i) {
      const double z = lda_transform(m, Vec(x.row(i).transpose()))(0);
      errors += (z > threshold) != (i >= 200);
    }
    CHECK(errors == 0);
  }

  TEST_CASE("LDA rejects bad component counts and degenerate classes") {
    std::mt19937_64 rng(7);
    Mat x;
    std::vector<ClassTag> y;
    class_data(14, 5, 20, rng, x, y);
    CHECK_NOTHROW(lda_fit(x, y, 13));
    CHECK_THROWS_AS(lda_fit(x, y, 14), DataError);
    CHECK_THROWS_AS(lda_fit(x, std::vector<ClassTag>(y.size(), ClassTag::A), 1), DataError);
    std::vector<ClassTag> single = y;
    for (auto& t : single)
      if (t == ClassTag::BN) t = ClassTag::M;
    single[0] = ClassTag::BN;  // BN appears once
    CHECK_THROWS_AS(lda_fit(x, single, 2), DataError);
  }

  TEST_CASE("LDA is invariant to a common translation") {
    std::mt19937_64 rng(8);
    Mat x;
    std::vector<ClassTag> y;
    class_data(5, 30, 6, rng, x, y);
    const Vec shift = testutil::random_matrix(6, 1, rng, 10.0);
    const Mat xs = x.rowwise() + shift.transpose();
    const LdaModel a = lda_fit(x, y, 4), b = lda_fit(xs, y, 4);
    CHECK((lda_transform(a, x) - lda_transform(b, xs)).norm() < 1e-8 * (1 + lda_transform(a, x).norm()));
  }

  TEST_CASE("LDA maximizes the Fisher criterion over random projections") {
    std::mt19937_64 rng(9);
    for (int t = 0; t < 5; ++t) {
      Mat x;
      std::vector<ClassTag> y;
      class_data(6, 25, 8, rng, x, y, 1.5);
      const int k = 3;
      const LdaModel m = lda_fit(x, y, k);
      Mat sw, sb;
      scatter(x, y, sw, sb);
      const double best = fisher_criterion(m.projection, sw, sb);
      for (int trial = 0; trial < 100; ++trial)
        CHECK(fisher_criterion(testutil::random_matrix(k, 8, rng), sw, sb) <= best * (1 + 1e-9));
    }
  }

  TEST_CASE("geodesics match Floyd-Warshall on the kNN graph, including bridged components") {
    std::mt19937_64 rng(10);
    Mat x = testutil::random_matrix(40, 3, rng);
    for (int i = 20; i < 40; ++i) x(i, 0) += 25.0;
    for (int k_nn : {3, 5, 10}) {
      const Mat g = geodesic_distances(x, k_nn);
      const Mat o = floyd_warshall_knn(x, k_nn);
      CHECK((g - o).cwiseAbs().maxCoeff() < 1e-9);
    }
    CHECK_THROWS_AS(geodesic_distances(x.topRows(5), 5), DataError);
  }

  TEST_CASE("Isomap on a straight line keeps consecutive gaps") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(0.2, 1.5);
    Mat x(25, 3);
    const Vec3 dir = Vec3(1, 2, -0.5).normalized();
    double t = 0.0;
    std::vector<double> ts;
    for (int i = 0; i < 25; ++i) {
      x.row(i) = (t * dir).transpose();
      ts.push_back(t);
      t += u(rng);
    }
    const IsomapModel m = isomap_fit(x, 1, 4);
    for (int i = 1; i < 25; ++i)
      CHECK(std::abs(m.embedding(i, 0) - m.embedding(i - 1, 0)) == doctest::Approx(ts[i] - ts[i - 1]).epsilon(1e-8));
    CHECK(std::abs(m.embedding.col(0).mean()) < 1e-8);
  }

  TEST_CASE("Isomap on a circular arc recovers arc length") {
    const double r = 5.0, sweep = 2.0 * std::numbers::pi / 3.0;
    const int n = 120;
    Mat x(n, 2);
    for (int i = 0; i < n; ++i) x.row(i) << r * std::cos(sweep * i / (n - 1)), r * std::sin(sweep * i / (n - 1));
    const IsomapModel m = isomap_fit(x, 1, 6);
    for (int i = 0; i < n; i += 7)
      for (int j = i + 11; j < n; j += 13) {
        const double arc = r * sweep * (j - i) / (n - 1);
        CHECK(std::abs(m.embedding(i, 0) - m.embedding(j, 0)) == doctest::Approx(arc).epsilon(0.02));
      }
  }

  TEST_CASE("Isomap embedding is the best rank-k approximation") {
    std::mt19937_64 rng(12);
    for (int t = 0; t < 5; ++t) {
      const Mat x = testutil::random_matrix(28, 5, rng);
      const int k = 3;
      const IsomapModel m = isomap_fit(x, k, 6);
      const Mat g = geodesic_distances(x, 6);
      const Eigen::Index n = g.rows();
      const Mat j = Mat::Identity(n, n) - Mat::Constant(n, n, 1.0 / n);
      const Mat b = -0.5 * j * g.array().square().matrix() * j;
      const Eigen::SelfAdjointEigenSolver<Mat> oracle(b);
      Mat best = Mat::Zero(n, n);
      for (int c = 0; c < k; ++c) {
        const double lam = oracle.eigenvalues()(n - 1 - c);
        CHECK(m.eigenvalues(c) == doctest::Approx(lam).epsilon(1e-8));
        best += lam * oracle.eigenvectors().col(n - 1 - c) * oracle.eigenvectors().col(n - 1 - c).transpose();
      }
      CHECK((m.embedding * m.embedding.transpose() - best).norm() < 1e-8 * (1 + best.norm()));
      for (int c = 0; c < k; ++c) CHECK(std::abs(m.embedding.col(c).mean()) < 1e-8);
    }
  }

  TEST_CASE("Isomap out-of-sample transform") {
    std::mt19937_64 rng(13);
    const Mat x = testutil::random_matrix(30, 4, rng);
    const IsomapModel m = isomap_fit(x, 2, 5);
    for (int i = 0; i < 30; ++i) CHECK(isomap_transform(m, Vec(x.row(i).transpose())) == Vec(m.embedding.row(i).transpose()));
    // Inverse-distance average of the five nearest embeddings.
    const Vec q = testutil::random_matrix(4, 1, rng);
    std::vector<std::pair<double, int>> d;
    for (int i = 0; i < 30; ++i) d.emplace_back((x.row(i).transpose() - q).norm(), i);
    std::sort(d.begin(), d.end());
    Vec acc = Vec::Zero(2);
    double ws = 0;
    for (int i = 0; i < 5; ++i) {
      acc += m.embedding.row(d[i].second).transpose() / (d[i].first + 1e-12);
      ws += 1 / (d[i].first + 1e-12);
    }
    CHECK((isomap_transform(m, q) - acc / ws).norm() < 1e-12);
    CHECK_THROWS_AS(isomap_fit(x.topRows(6), 2, 10), DataError);
  }

  TEST_CASE("fits are deterministic") {
    std::mt19937_64 rng(14);
    Mat x;
    std::vector<ClassTag> y;
    class_data(4, 15, 6, rng, x, y);
    for (DrMethod method : {DrMethod::pca, DrMethod::lda, DrMethod::isomap}) {
      const auto a = FeatureReducer::fit(method, 3, x, y), b = FeatureReducer::fit(method, 3, x, y);
      CHECK(a.transform(x) == b.transform(x));
    }
  }

  TEST_CASE("standardizer z-scores with unit scale on constant columns") {
    Mat x(4, 2);
    x << 1, 5, 2, 5, 3, 5, 4, 5;
    const Standardizer s = Standardizer::fit(x);
    CHECK(s.scale(1) == 1.0);
    const Mat z = s.transform(x);
    CHECK(z.col(0).mean() == doctest::Approx(0.0));
    CHECK(std::sqrt(z.col(0).squaredNorm() / 3.0) == doctest::Approx(1.0));
    CHECK(z.col(1).isZero());
  }

  TEST_CASE("reducer survives a JSON round trip") {
    std::mt19937_64 rng(15);
    Mat x;
    std::vector<ClassTag> y;
    class_data(5, 12, 7, rng, x, y);
    for (DrMethod method : {DrMethod::none, DrMethod::pca, DrMethod::lda, DrMethod::isomap}) {
      const int k = method == DrMethod::none ? 0 : 3;
      const auto r = FeatureReducer::fit(method, k, x, y);
      const auto back = FeatureReducer::from_json(nlohmann::json::parse(r.to_json().dump()));
      CHECK(back.method() == method);
      CHECK((back.transform(x) - r.transform(x)).norm() < 1e-12);
    }
  }

  TEST_CASE("reducer LDA fit ignores singleton classes") {
    std::mt19937_64 rng(16);
    Mat x;
    std::vector<ClassTag> y;
    class_data(4, 10, 5, rng, x, y);
    y.back() = ClassTag::BN;
    const auto r = FeatureReducer::fit(DrMethod::lda, 3, x, y);
    CHECK(r.transform(x).cols() == 3);
  }

  TEST_CASE("method names parse") {
    CHECK(parse_dr_method("lda") == DrMethod::lda);
    CHECK(parse_dr_method("Isomap") == DrMethod::isomap);
    CHECK_THROWS_AS(parse_dr_method("tsne"), ConfigError);
    CHECK(default_components(DrMethod::lda) == 8);
    CHECK(default_components(DrMethod::pca) == 10);
    CHECK(default_components(DrMethod::isomap) == 6);
  }
}
