#include "cowlab/dimred.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <queue>

#include "cowlab/json_util.hpp"
#include "cowlab/linalg.hpp"

namespace cowlab {

using nlohmann::json;

namespace {

// Above this size the Jacobi sweeps get slow; MDS switches to tridiagonal QR.
constexpr Eigen::Index kJacobiMaxSize = 150;

SymmetricEigen eigen_auto(const Mat& a) {
  return a.rows() <= kJacobiMaxSize ? jacobi_eigen(a) : tridiagonal_eigen(a);
}

Mat pairwise_distances(const Mat& x) {
  const Eigen::Index n = x.rows();
  Mat d(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    d(i, i) = 0.0;
    for (Eigen::Index j = i + 1; j < n; ++j) d(i, j) = d(j, i) = (x.row(i) - x.row(j)).norm();
  }
  return d;
}

}  // namespace

Standardizer Standardizer::fit(const Mat& x) {
  if (x.rows() < 1) throw DataError("cannot standardize an empty matrix");
  Standardizer s;
  s.mean = x.colwise().mean();
  s.scale = Vec::Ones(x.cols());
  if (x.rows() > 1) {
    const Mat c = x.rowwise() - s.mean.transpose();
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const double sd = std::sqrt(c.col(j).squaredNorm() / static_cast<double>(x.rows() - 1));
      if (sd > 1e-12) s.scale(j) = sd;
    }
  }
  return s;
}

Mat Standardizer::transform(const Mat& x) const {
  if (x.cols() != mean.size()) throw DataError("standardizer dimension mismatch");
  return (x.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array();
}

PcaModel pca_fit(const Mat& x, int k) {
  if (x.rows() < 2) throw DataError("PCA needs n >= 2");
  if (k < 1 || k > std::min<Eigen::Index>(x.rows() - 1, x.cols()))
    throw DataError("PCA component count must satisfy 1 <= k <= min(n-1, d)");
  PcaModel m;
  const Mat cov = sample_covariance(x, &m.mean);
  const SymmetricEigen eig = jacobi_eigen(cov);
  m.all_eigenvalues = eig.values.cwiseMax(0.0);
  m.eigenvalues = m.all_eigenvalues.head(k);
  m.components = eig.vectors.leftCols(k).transpose();
  return m;
}

Vec pca_transform(const PcaModel& m, const Vec& x) {
  if (x.size() != m.mean.size()) throw DataError("PCA input dimension mismatch");
  return m.components * (x - m.mean);
}

Mat pca_transform(const PcaModel& m, const Mat& x) {
  if (x.cols() != m.mean.size()) throw DataError("PCA input dimension mismatch");
  return (x.rowwise() - m.mean.transpose()) * m.components.transpose();
}

Vec pca_inverse_transform(const PcaModel& m, const Vec& z) { return m.components.transpose() * z + m.mean; }

LdaModel lda_fit(const Mat& x, const std::vector<ClassTag>& y, int k, double eps_rel) {
  if (static_cast<Eigen::Index>(y.size()) != x.rows()) throw DataError("LDA label count mismatch");
  std::map<ClassTag, std::vector<Eigen::Index>> groups;
  for (Eigen::Index i = 0; i < x.rows(); ++i) groups[y[static_cast<std::size_t>(i)]].push_back(i);
  const auto n_classes = static_cast<int>(groups.size());
  if (n_classes < 2) throw DataError("LDA needs at least two classes");
  for (const auto& [tag, rows] : groups)
    if (rows.size() < 2) throw DataError("LDA needs >= 2 samples per class");
  if (k < 1 || k > std::min<Eigen::Index>(n_classes - 1, x.cols()))
    throw DataError("LDA component count must satisfy 1 <= k <= min(C-1, d)");

  const Eigen::Index d = x.cols();
  LdaModel m;
  m.global_mean = x.colwise().mean();
  m.class_means.resize(n_classes, d);
  Mat sw = Mat::Zero(d, d), sb = Mat::Zero(d, d);
  int c = 0;
  for (const auto& [tag, rows] : groups) {
    Vec mu = Vec::Zero(d);
    for (auto r : rows) mu += x.row(r).transpose();
    mu /= static_cast<double>(rows.size());
    for (auto r : rows) {
      const Vec diff = x.row(r).transpose() - mu;
      sw.noalias() += diff * diff.transpose();
    }
    const Vec dm = mu - m.global_mean;
    sb.noalias() += static_cast<double>(rows.size()) * dm * dm.transpose();
    m.class_means.row(c++) = mu.transpose();
    m.classes.push_back(tag);
  }
  m.epsilon = eps_rel * sw.trace() / static_cast<double>(d);
  if (!(m.epsilon > 0.0)) m.epsilon = eps_rel;
  const Mat reg = sw + m.epsilon * Mat::Identity(d, d);
  Eigen::LLT<Mat> llt(reg);
  if (llt.info() != Eigen::Success) throw NumericError("within-class scatter is not positive definite");
  const Mat l = llt.matrixL();
  // Whitened between-class scatter: L^-1 Sb L^-T.
  const Mat linv_sb = l.triangularView<Eigen::Lower>().solve(sb);
  const Mat whitened = l.triangularView<Eigen::Lower>().solve(linv_sb.transpose()).transpose();
  const SymmetricEigen eig = jacobi_eigen(whitened);
  Mat directions = l.transpose().triangularView<Eigen::Upper>().solve(eig.vectors.leftCols(k));
  for (Eigen::Index j = 0; j < directions.cols(); ++j) directions.col(j).normalize();
  fix_signs(directions);
  m.projection = directions.transpose();
  m.eigenvalues = eig.values.head(k);
  return m;
}

Vec lda_transform(const LdaModel& m, const Vec& x) {
  if (x.size() != m.global_mean.size()) throw DataError("LDA input dimension mismatch");
  return m.projection * (x - m.global_mean);
}

Mat lda_transform(const LdaModel& m, const Mat& x) {
  if (x.cols() != m.global_mean.size()) throw DataError("LDA input dimension mismatch");
  return (x.rowwise() - m.global_mean.transpose()) * m.projection.transpose();
}

Mat geodesic_distances(const Mat& x, int k_nn) {
  const Eigen::Index n = x.rows();
  if (k_nn < 1 || n < k_nn + 1) throw DataError("Isomap needs n >= k_nn + 1");
  const Mat euclid = pairwise_distances(x);

  std::vector<std::vector<std::pair<Eigen::Index, double>>> adj(static_cast<std::size_t>(n));
  std::vector<std::vector<bool>> linked(static_cast<std::size_t>(n), std::vector<bool>(static_cast<std::size_t>(n), false));
  auto link = [&](Eigen::Index a, Eigen::Index b) {
    if (a == b || linked[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)]) return;
    linked[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)] = linked[static_cast<std::size_t>(b)][static_cast<std::size_t>(a)] = true;
    adj[static_cast<std::size_t>(a)].emplace_back(b, euclid(a, b));
    adj[static_cast<std::size_t>(b)].emplace_back(a, euclid(a, b));
  };
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::partial_sort(order.begin(), order.begin() + k_nn + 1, order.end(), [&](Eigen::Index a, Eigen::Index b) {
      if (euclid(i, a) != euclid(i, b)) return euclid(i, a) < euclid(i, b);
      return a < b;
    });
    int taken = 0;
    for (Eigen::Index j : order) {
      if (j == i) continue;
      link(i, j);
      if (++taken == k_nn) break;
    }
  }

  // Bridge components with their shortest inter-component edge until connected.
  for (;;) {
    std::vector<int> comp(static_cast<std::size_t>(n), -1);
    int n_comp = 0;
    for (Eigen::Index s = 0; s < n; ++s) {
      if (comp[static_cast<std::size_t>(s)] >= 0) continue;
      std::vector<Eigen::Index> stack{s};
      comp[static_cast<std::size_t>(s)] = n_comp;
      while (!stack.empty()) {
        const auto u = stack.back();
        stack.pop_back();
        for (const auto& [v, w] : adj[static_cast<std::size_t>(u)])
          if (comp[static_cast<std::size_t>(v)] < 0) {
            comp[static_cast<std::size_t>(v)] = n_comp;
            stack.push_back(v);
          }
      }
      ++n_comp;
    }
    if (n_comp == 1) break;
    Eigen::Index best_a = -1, best_b = -1;
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index a = 0; a < n; ++a)
      for (Eigen::Index b = a + 1; b < n; ++b)
        if (comp[static_cast<std::size_t>(a)] != comp[static_cast<std::size_t>(b)] && euclid(a, b) < best) {
          best = euclid(a, b);
          best_a = a;
          best_b = b;
        }
    link(best_a, best_b);
  }

  Mat geo = Mat::Constant(n, n, std::numeric_limits<double>::infinity());
  using Item = std::pair<double, Eigen::Index>;
  for (Eigen::Index s = 0; s < n; ++s) {
    std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
    geo(s, s) = 0.0;
    pq.emplace(0.0, s);
    while (!pq.empty()) {
      const auto [du, u] = pq.top();
      pq.pop();
      if (du > geo(s, u)) continue;
      for (const auto& [v, w] : adj[static_cast<std::size_t>(u)]) {
        const double nd = du + w;
        if (nd < geo(s, v)) {
          geo(s, v) = nd;
          pq.emplace(nd, v);
        }
      }
    }
  }
  // Symmetrize away floating-point path-order differences.
  return 0.5 * (geo + geo.transpose());
}

Mat classical_mds(const Mat& distances, int k, Vec* eigenvalues_out) {
  const Eigen::Index n = distances.rows();
  if (k < 1 || k > n) throw DataError("MDS dimension out of range");
  const Mat d2 = distances.array().square().matrix();
  const Vec row_mean = d2.rowwise().mean();
  const Vec col_mean = d2.colwise().mean();
  const double all_mean = d2.mean();
  Mat b(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) b(i, j) = -0.5 * (d2(i, j) - row_mean(i) - col_mean(j) + all_mean);
  const SymmetricEigen eig = eigen_auto(b);
  Mat emb(n, k);
  for (int c = 0; c < k; ++c) emb.col(c) = eig.vectors.col(c) * std::sqrt(std::max(eig.values(c), 0.0));
  if (eigenvalues_out) *eigenvalues_out = eig.values.head(k);
  return emb;
}

IsomapModel isomap_fit(const Mat& x, int k, int k_nn) {
  if (x.rows() < k_nn + 1) throw DataError("Isomap needs n >= k_nn + 1");
  IsomapModel m;
  m.k_nn = k_nn;
  m.training_points = x;
  m.embedding = classical_mds(geodesic_distances(x, k_nn), k, &m.eigenvalues);
  m.embedding.rowwise() -= m.embedding.colwise().mean();
  return m;
}

Vec isomap_transform(const IsomapModel& m, const Vec& x) {
  const Eigen::Index n = m.training_points.rows();
  if (x.size() != m.training_points.cols()) throw DataError("Isomap input dimension mismatch");
  std::vector<std::pair<double, Eigen::Index>> dist(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) dist[static_cast<std::size_t>(i)] = {(m.training_points.row(i).transpose() - x).norm(), i};
  const auto take = std::min<std::size_t>(5, dist.size());
  std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(take), dist.end());
  if (dist.front().first == 0.0) return m.embedding.row(dist.front().second).transpose();
  Vec acc = Vec::Zero(m.embedding.cols());
  double wsum = 0.0;
  for (std::size_t q = 0; q < take; ++q) {
    const double w = 1.0 / (dist[q].first + 1e-12);
    acc += w * m.embedding.row(dist[q].second).transpose();
    wsum += w;
  }
  return acc / wsum;
}

Mat isomap_transform(const IsomapModel& m, const Mat& x) {
  Mat out(x.rows(), m.embedding.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) out.row(i) = isomap_transform(m, Vec(x.row(i).transpose())).transpose();
  return out;
}

std::string to_string(DrMethod m) {
  switch (m) {
    case DrMethod::none: return "none";
    case DrMethod::pca: return "PCA";
    case DrMethod::lda: return "LDA";
    case DrMethod::isomap: return "Isomap";
  }
  return "none";
}

DrMethod parse_dr_method(const std::string& s) {
  std::string l = s;
  std::transform(l.begin(), l.end(), l.begin(), [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
  if (l == "none") return DrMethod::none;
  if (l == "pca") return DrMethod::pca;
  if (l == "lda") return DrMethod::lda;
  if (l == "isomap") return DrMethod::isomap;
  throw ConfigError("unknown dimensionality reduction method: " + s);
}

int default_components(DrMethod m) {
  switch (m) {
    case DrMethod::pca: return 10;
    case DrMethod::lda: return 8;
    case DrMethod::isomap: return 6;
    case DrMethod::none: return 0;
  }
  return 0;
}

FeatureReducer FeatureReducer::fit(DrMethod method, int k, const Mat& x, const std::vector<ClassTag>& y) {
  FeatureReducer r;
  r.method_ = method;
  r.standardizer_ = Standardizer::fit(x);
  const Mat z = r.standardizer_.transform(x);
  switch (method) {
    case DrMethod::none: break;
    case DrMethod::pca: r.model_ = pca_fit(z, k); break;
    case DrMethod::lda: {
      // Singleton classes have no within-class scatter; the fit skips them.
      std::map<ClassTag, int> count;
      for (auto t : y) ++count[t];
      std::vector<Eigen::Index> keep;
      for (std::size_t i = 0; i < y.size(); ++i)
        if (count[y[i]] >= 2) keep.push_back(static_cast<Eigen::Index>(i));
      if (keep.size() == y.size()) {
        r.model_ = lda_fit(z, y, k);
      } else {
        std::vector<ClassTag> ys;
        for (auto i : keep) ys.push_back(y[static_cast<std::size_t>(i)]);
        r.model_ = lda_fit(z(keep, Eigen::all), ys, k);
      }
      break;
    }
    case DrMethod::isomap: r.model_ = isomap_fit(z, k); break;
  }
  return r;
}

Mat FeatureReducer::transform(const Mat& x) const {
  const Mat z = standardizer_.transform(x);
  switch (method_) {
    case DrMethod::none: return z;
    case DrMethod::pca: return pca_transform(std::get<PcaModel>(model_), z);
    case DrMethod::lda: return lda_transform(std::get<LdaModel>(model_), z);
    case DrMethod::isomap: return isomap_transform(std::get<IsomapModel>(model_), z);
  }
  return z;
}

json FeatureReducer::to_json() const {
  json j{{"format_version", kModelFormatVersion},
         {"method", to_string(method_)},
         {"standardizer", {{"mean", vector_to_json(standardizer_.mean)}, {"scale", vector_to_json(standardizer_.scale)}}}};
  if (const auto* p = std::get_if<PcaModel>(&model_)) {
    j["model"] = {{"mean", vector_to_json(p->mean)},
                  {"components", matrix_to_json(p->components)},
                  {"eigenvalues", vector_to_json(p->eigenvalues)},
                  {"all_eigenvalues", vector_to_json(p->all_eigenvalues)}};
  } else if (const auto* l = std::get_if<LdaModel>(&model_)) {
    std::vector<std::string> classes;
    for (auto c : l->classes) classes.emplace_back(cowlab::to_string(c));
    j["model"] = {{"projection", matrix_to_json(l->projection)},
                  {"global_mean", vector_to_json(l->global_mean)},
                  {"class_means", matrix_to_json(l->class_means)},
                  {"classes", classes},
                  {"eigenvalues", vector_to_json(l->eigenvalues)},
                  {"epsilon", l->epsilon}};
  } else if (const auto* s = std::get_if<IsomapModel>(&model_)) {
    j["model"] = {{"training_points", matrix_to_json(s->training_points)},
                  {"embedding", matrix_to_json(s->embedding)},
                  {"eigenvalues", vector_to_json(s->eigenvalues)},
                  {"k_nn", s->k_nn}};
  }
  return j;
}

FeatureReducer FeatureReducer::from_json(const json& j) {
  FeatureReducer r;
  try {
    if (j.at("format_version").get<int>() != kModelFormatVersion) throw DataError("unsupported reducer format version");
    r.method_ = parse_dr_method(j.at("method").get<std::string>());
    r.standardizer_.mean = vector_from_json(j.at("standardizer").at("mean"));
    r.standardizer_.scale = vector_from_json(j.at("standardizer").at("scale"));
    const auto& m = j.contains("model") ? j["model"] : json();
    switch (r.method_) {
      case DrMethod::none: break;
      case DrMethod::pca:
        r.model_ = PcaModel{vector_from_json(m.at("mean")), matrix_from_json(m.at("components")),
                            vector_from_json(m.at("eigenvalues")), vector_from_json(m.at("all_eigenvalues"))};
        break;
      case DrMethod::lda: {
        LdaModel l;
        l.projection = matrix_from_json(m.at("projection"));
        l.global_mean = vector_from_json(m.at("global_mean"));
        l.class_means = matrix_from_json(m.at("class_means"));
        for (const auto& c : m.at("classes")) l.classes.push_back(parse_class_tag(c.get<std::string>()).value());
        l.eigenvalues = vector_from_json(m.at("eigenvalues"));
        l.epsilon = m.at("epsilon").get<double>();
        r.model_ = std::move(l);
        break;
      }
      case DrMethod::isomap:
        r.model_ = IsomapModel{matrix_from_json(m.at("training_points")), matrix_from_json(m.at("embedding")),
                               vector_from_json(m.at("eigenvalues")), m.at("k_nn").get<int>()};
        break;
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed reducer JSON: ") + e.what());
  } catch (const std::bad_optional_access&) {
    throw DataError("reducer JSON holds an unknown class tag");
  }
  return r;
}

}  // namespace cowlab
