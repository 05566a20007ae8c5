#include "cowlab/classify.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <nlohmann/json.hpp>

#include "cowlab/json_util.hpp"
#include "cowlab/rng.hpp"

namespace cowlab {

using nlohmann::json;

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

std::vector<ClassTag> present_classes(const std::vector<ClassTag>& y) {
  std::array<bool, kNumClasses> seen{};
  for (auto t : y) seen[static_cast<std::size_t>(index_of(t))] = true;
  std::vector<ClassTag> out;
  for (int c = 0; c < kNumClasses; ++c)
    if (seen[static_cast<std::size_t>(c)]) out.push_back(tag_from_index(c));
  return out;
}

std::vector<int> class_indices(const std::vector<ClassTag>& classes, const std::vector<ClassTag>& y) {
  std::array<int, kNumClasses> pos{};
  pos.fill(-1);
  for (std::size_t c = 0; c < classes.size(); ++c) pos[static_cast<std::size_t>(index_of(classes[c]))] = static_cast<int>(c);
  std::vector<int> out;
  out.reserve(y.size());
  for (auto t : y) out.push_back(pos[static_cast<std::size_t>(index_of(t))]);
  return out;
}

ClassTag majority(const std::array<int, kNumClasses>& counts) {
  int best = -1;
  ClassTag tag = ClassTag::BN;
  for (int c = 0; c < kNumClasses; ++c) {
    const int n = counts[static_cast<std::size_t>(c)];
    if (n > best || (n == best && n > 0 && alphabetically_before(tag_from_index(c), tag))) {
      best = n;
      tag = tag_from_index(c);
    }
  }
  return tag;
}

void check_finite(const Mat& x) {
  if (!x.allFinite()) throw DataError("non-finite feature values");
}

// ---- CART -----------------------------------------------------------------

struct SplitScore {
  // Weighted child purity sum(cl^2)/nl + sum(cr^2)/nr as an exact fraction.
  __int128 num = -1;
  __int128 den = 1;
  bool better_than(const SplitScore& o) const { return num * o.den > o.num * den; }
};

class TreeBuilder {
 public:
  TreeBuilder(const Mat& x, const std::vector<ClassTag>& y, const TreeOptions& opt, std::mt19937_64* rng)
      : x_(x), y_(y), opt_(opt), rng_(rng) {}

  DecisionTree build(const std::vector<Eigen::Index>& rows) {
    grow(rows, 0);
    return std::move(tree_);
  }

 private:
  int grow(const std::vector<Eigen::Index>& rows, int depth) {
    std::array<int, kNumClasses> counts{};
    for (auto r : rows) ++counts[static_cast<std::size_t>(index_of(y_[static_cast<std::size_t>(r)]))];
    const int id = static_cast<int>(tree_.nodes.size());
    tree_.nodes.push_back(TreeNode{-1, 0.0, -1, -1, majority(counts)});
    const auto total = static_cast<int>(rows.size());
    const bool pure = std::count_if(counts.begin(), counts.end(), [](int c) { return c > 0; }) <= 1;
    if (pure || (opt_.max_depth >= 0 && depth >= opt_.max_depth) || total < opt_.min_samples_split) return id;

    int best_feature = -1;
    double best_threshold = 0.0;
    SplitScore best;
    auto consider = [&](int f) {
      double thr = 0.0;
      const SplitScore s = best_split(rows, f, &thr);
      if (s.num >= 0 && (best_feature < 0 || s.better_than(best))) {
        best = s;
        best_feature = f;
        best_threshold = thr;
      }
    };
    const auto d = static_cast<int>(x_.cols());
    if (opt_.max_features > 0 && opt_.max_features < d && rng_) {
      std::vector<int> order(static_cast<std::size_t>(d));
      std::iota(order.begin(), order.end(), 0);
      shuffle_in_place(order, *rng_);
      std::vector<int> first(order.begin(), order.begin() + opt_.max_features);
      std::sort(first.begin(), first.end());
      for (int f : first) consider(f);
      // Keep drawing past the quota only while every candidate was constant.
      for (std::size_t q = static_cast<std::size_t>(opt_.max_features); q < order.size() && best_feature < 0; ++q)
        consider(order[q]);
    } else {
      for (int f = 0; f < d; ++f) consider(f);
    }
    if (best_feature < 0) return id;

    std::vector<Eigen::Index> left, right;
    for (auto r : rows) (x_(r, best_feature) <= best_threshold ? left : right).push_back(r);
    const int l = grow(left, depth + 1);
    const int rr = grow(right, depth + 1);
    TreeNode& node = tree_.nodes[static_cast<std::size_t>(id)];
    node.feature = best_feature;
    node.threshold = best_threshold;
    node.left = l;
    node.right = rr;
    return id;
  }

  SplitScore best_split(const std::vector<Eigen::Index>& rows, int f, double* threshold) const {
    std::vector<std::pair<double, int>> v;
    v.reserve(rows.size());
    for (auto r : rows) v.emplace_back(x_(r, f), index_of(y_[static_cast<std::size_t>(r)]));
    std::sort(v.begin(), v.end());
    std::array<long long, kNumClasses> cl{}, cr{};
    for (const auto& [val, c] : v) ++cr[static_cast<std::size_t>(c)];
    long long sum_l = 0, sum_r = 0;
    for (auto c : cr) sum_r += c * c;
    const auto n = static_cast<long long>(v.size());
    SplitScore best;
    for (long long i = 0; i + 1 < n; ++i) {
      const auto c = static_cast<std::size_t>(v[static_cast<std::size_t>(i)].second);
      sum_l += 2 * cl[c] + 1;
      sum_r -= 2 * cr[c] - 1;
      ++cl[c];
      --cr[c];
      const double a = v[static_cast<std::size_t>(i)].first;
      const double b = v[static_cast<std::size_t>(i + 1)].first;
      if (!(a < b)) continue;
      const long long nl = i + 1, nr = n - nl;
      const SplitScore s{static_cast<__int128>(sum_l) * nr + static_cast<__int128>(sum_r) * nl,
                         static_cast<__int128>(nl) * nr};
      if (best.num < 0 || s.better_than(best)) {
        best = s;
        double mid = 0.5 * a + 0.5 * b;
        if (!(mid < b)) mid = a;
        *threshold = mid;
      }
    }
    return best;
  }

  const Mat& x_;
  const std::vector<ClassTag>& y_;
  TreeOptions opt_;
  std::mt19937_64* rng_;
  DecisionTree tree_;
};

json tree_to_json(const DecisionTree& t, int id) {
  const TreeNode& n = t.nodes[static_cast<std::size_t>(id)];
  if (n.feature < 0) return {{"label", std::string(to_string(n.label))}};
  return {{"feature", n.feature},
          {"threshold", n.threshold},
          {"label", std::string(to_string(n.label))},
          {"left", tree_to_json(t, n.left)},
          {"right", tree_to_json(t, n.right)}};
}

int tree_from_json(const json& j, DecisionTree& t) {
  const int id = static_cast<int>(t.nodes.size());
  TreeNode node;
  node.label = parse_class_tag(j.at("label").get<std::string>()).value();
  t.nodes.push_back(node);
  if (j.contains("feature")) {
    const int f = j.at("feature").get<int>();
    const double thr = j.at("threshold").get<double>();
    const int l = tree_from_json(j.at("left"), t);
    const int r = tree_from_json(j.at("right"), t);
    TreeNode& n = t.nodes[static_cast<std::size_t>(id)];
    n.feature = f;
    n.threshold = thr;
    n.left = l;
    n.right = r;
  }
  return id;
}

json tags_to_json(const std::vector<ClassTag>& tags) {
  std::vector<std::string> s;
  for (auto t : tags) s.emplace_back(to_string(t));
  return s;
}

std::vector<ClassTag> tags_from_json(const json& j) {
  std::vector<ClassTag> out;
  for (const auto& s : j) out.push_back(parse_class_tag(s.get<std::string>()).value());
  return out;
}

// ---- SVM ------------------------------------------------------------------

double kernel_value(SvmKernel k, double gamma, const Eigen::Ref<const Vec>& a, const Eigen::Ref<const Vec>& b) {
  if (k == SvmKernel::linear) return a.dot(b);
  return std::exp(-gamma * (a - b).squaredNorm());
}

class Smo {
 public:
  Smo(const Mat& k, const Vec& y, double c, double tol) : k_(k), y_(y), c_(c), tol_(tol) {
    const auto n = y.size();
    alpha_ = Vec::Zero(n);
    err_ = -y;
  }

  BinarySmoResult run(int max_passes, int max_iterations) {
    const auto n = static_cast<int>(y_.size());
    bool examine_all = true;
    int quiet = 0, passes = 0;
    while (passes < max_iterations) {
      int changed = 0;
      ++passes;
      for (int i = 0; i < n; ++i)
        if (examine_all || is_free(i)) changed += examine(i);
      if (changed == 0) {
        // Passes are deterministic, so a quiet full pass is a fixed point.
        if (examine_all || ++quiet >= max_passes) break;
        examine_all = true;
      } else {
        quiet = 0;
        if (examine_all) examine_all = false;
      }
    }
    return {alpha_, b_, passes};
  }

 private:
  bool is_free(int i) const { return alpha_(i) > 0.0 && alpha_(i) < c_; }

  int examine(int i2) {
    const double r2 = err_(i2) * y_(i2);
    if (!((r2 < -tol_ && alpha_(i2) < c_) || (r2 > tol_ && alpha_(i2) > 0.0))) return 0;
    const auto n = static_cast<int>(y_.size());
    int i1 = -1;
    double gap = -1.0;
    for (int i = 0; i < n; ++i)
      if (is_free(i) && std::abs(err_(i) - err_(i2)) > gap) {
        gap = std::abs(err_(i) - err_(i2));
        i1 = i;
      }
    if (i1 >= 0 && step(i1, i2)) return 1;
    for (int q = 0; q < n; ++q) {
      const int i = (i2 + 1 + q) % n;
      if (is_free(i) && step(i, i2)) return 1;
    }
    for (int q = 0; q < n; ++q) {
      const int i = (i2 + 1 + q) % n;
      if (step(i, i2)) return 1;
    }
    return 0;
  }

  bool step(int i1, int i2) {
    if (i1 == i2) return false;
    const double a1 = alpha_(i1), a2 = alpha_(i2), y1 = y_(i1), y2 = y_(i2);
    const double e1 = err_(i1), e2 = err_(i2), s = y1 * y2;
    double lo, hi;
    if (y1 != y2) {
      lo = std::max(0.0, a2 - a1);
      hi = std::min(c_, c_ + a2 - a1);
    } else {
      lo = std::max(0.0, a1 + a2 - c_);
      hi = std::min(c_, a1 + a2);
    }
    if (lo >= hi) return false;
    const double k11 = k_(i1, i1), k12 = k_(i1, i2), k22 = k_(i2, i2);
    const double eta = k11 + k22 - 2.0 * k12;
    double a2n;
    if (eta > 1e-12) {
      a2n = std::clamp(a2 + y2 * (e1 - e2) / eta, lo, hi);
    } else {
      const double f1 = y1 * (e1 - b_) - a1 * k11 - s * a2 * k12;
      const double f2 = y2 * (e2 - b_) - s * a1 * k12 - a2 * k22;
      auto objective = [&](double a2x) {
        const double a1x = a1 + s * (a2 - a2x);
        return a1x * f1 + a2x * f2 + 0.5 * a1x * a1x * k11 + 0.5 * a2x * a2x * k22 + s * a2x * a1x * k12;
      };
      const double lobj = objective(lo), hobj = objective(hi);
      if (lobj < hobj - kEps) a2n = lo;
      else if (lobj > hobj + kEps) a2n = hi;
      else a2n = a2;
    }
    if (std::abs(a2n - a2) < kEps * (a2n + a2 + kEps)) return false;
    const double a1n = std::clamp(a1 + s * (a2 - a2n), 0.0, c_);
    const double d1 = y1 * (a1n - a1), d2 = y2 * (a2n - a2);
    const double b1 = b_ - e1 - d1 * k11 - d2 * k12;
    const double b2 = b_ - e2 - d1 * k12 - d2 * k22;
    double bn;
    if (a1n > 0.0 && a1n < c_) bn = b1;
    else if (a2n > 0.0 && a2n < c_) bn = b2;
    else bn = 0.5 * (b1 + b2);
    err_ += d1 * k_.col(i1) + d2 * k_.col(i2);
    err_.array() += bn - b_;
    b_ = bn;
    alpha_(i1) = a1n;
    alpha_(i2) = a2n;
    return true;
  }

  static constexpr double kEps = 1e-3;
  const Mat& k_;
  const Vec& y_;
  double c_, tol_;
  Vec alpha_, err_;
  double b_ = 0.0;
};

// ---- MLP ------------------------------------------------------------------

struct Adam {
  Vec m, v;
  int t = 0;
  void step(Vec& params, const Vec& grad, double lr) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    if (m.size() == 0) {
      m = Vec::Zero(params.size());
      v = Vec::Zero(params.size());
    }
    ++t;
    m = b1 * m + (1.0 - b1) * grad;
    v = b2 * v + (1.0 - b2) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(b1, t), c2 = 1.0 - std::pow(b2, t);
    params.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
};

Mat take_rows(const Mat& x, const std::vector<Eigen::Index>& rows) {
  Mat out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(rows[i]);
  return out;
}

MlpModel fit_mlp(const ClassifierConfig& cfg, const LabeledDataset& train, std::uint64_t seed) {
  const auto classes = present_classes(train.y);
  MlpModel m = mlp_init(static_cast<int>(train.dims()), cfg.mlp_hidden, classes, derive_seed(seed, 0));
  const auto target = class_indices(classes, train.y);
  const auto n = static_cast<std::size_t>(train.size());

  std::vector<Eigen::Index> order(n);
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::mt19937_64 split_rng(derive_seed(seed, 1));
  shuffle_in_place(order, split_rng);
  std::size_t n_val = 0;
  if (cfg.mlp_validation_fraction > 0.0 && n >= 10)
    n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(cfg.mlp_validation_fraction * static_cast<double>(n))));
  std::vector<Eigen::Index> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<Eigen::Index> fit_rows(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(val.begin(), val.end());
  std::sort(fit_rows.begin(), fit_rows.end());
  const Mat x_val = take_rows(train.x, val);
  std::vector<int> t_val;
  for (auto r : val) t_val.push_back(target[static_cast<std::size_t>(r)]);

  Vec params = mlp_flatten(m);
  Vec best_params = params;
  double best_loss = std::numeric_limits<double>::infinity();
  int wait = 0;
  Adam adam;
  std::mt19937_64 batch_rng(derive_seed(seed, 2));
  const auto batch = static_cast<std::size_t>(cfg.mlp_batch);
  for (int epoch = 1; epoch <= cfg.mlp_max_epochs; ++epoch) {
    shuffle_in_place(fit_rows, batch_rng);
    for (std::size_t s = 0; s < fit_rows.size(); s += batch) {
      const std::vector<Eigen::Index> rows(fit_rows.begin() + static_cast<std::ptrdiff_t>(s),
                                           fit_rows.begin() + static_cast<std::ptrdiff_t>(std::min(s + batch, fit_rows.size())));
      std::vector<int> t;
      for (auto r : rows) t.push_back(target[static_cast<std::size_t>(r)]);
      Vec grad;
      mlp_loss_and_gradient(m, take_rows(train.x, rows), t, &grad);
      adam.step(params, grad, cfg.mlp_learning_rate);
      mlp_unflatten(m, params);
    }
    m.epochs_run = epoch;
    if (n_val == 0) {
      best_params = params;
      m.best_epoch = epoch;
      continue;
    }
    const double loss = mlp_loss_and_gradient(m, x_val, t_val, nullptr);
    if (!std::isfinite(loss)) throw NumericError("MLP validation loss diverged at epoch " + std::to_string(epoch));
    if (loss < best_loss) {
      best_loss = loss;
      best_params = params;
      m.best_epoch = epoch;
      wait = 0;
    } else if (++wait >= cfg.mlp_patience) {
      break;
    }
  }
  mlp_unflatten(m, best_params);
  return m;
}

}  // namespace

// ---- Dataset and config -----------------------------------------------------

void LabeledDataset::validate() const {
  if (static_cast<Eigen::Index>(y.size()) != x.rows()) throw DataError("label count does not match row count");
  check_finite(x);
}

LabeledDataset LabeledDataset::subset(const std::vector<Eigen::Index>& rows) const {
  LabeledDataset out;
  out.provenance = provenance;
  out.x = take_rows(x, rows);
  for (auto r : rows) out.y.push_back(y[static_cast<std::size_t>(r)]);
  return out;
}

std::string to_string(Algorithm a) {
  switch (a) {
    case Algorithm::DT: return "DT";
    case Algorithm::RF: return "RF";
    case Algorithm::NB: return "NB";
    case Algorithm::QDA: return "QDA";
    case Algorithm::SVM: return "SVM";
    case Algorithm::MLP: return "MLP";
  }
  return "DT";
}

Algorithm parse_algorithm(const std::string& s) {
  std::string u = s;
  std::transform(u.begin(), u.end(), u.begin(), [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  for (auto a : kAllAlgorithms)
    if (to_string(a) == u) return a;
  throw ConfigError("unknown classifier: " + s);
}

void ClassifierConfig::validate() const {
  if (dt_max_depth < -1 || dt_max_depth == 0) throw ConfigError("dt_max_depth must be -1 or positive");
  if (dt_min_samples_split < 2) throw ConfigError("dt_min_samples_split must be >= 2");
  if (rf_n_trees < 1) throw ConfigError("rf_n_trees must be >= 1");
  if (!(nb_var_floor_rel > 0.0)) throw ConfigError("nb_var_floor_rel must be positive");
  if (!(qda_shrinkage >= 0.0)) throw ConfigError("qda_shrinkage must be >= 0");
  if (!(svm_c > 0.0) || !(svm_gamma >= 0.0) || !(svm_tol > 0.0)) throw ConfigError("invalid SVM parameters");
  if (svm_max_passes < 1 || svm_max_iterations < 1) throw ConfigError("SVM pass limits must be positive");
  if (mlp_hidden < 1 || mlp_batch < 1 || mlp_max_epochs < 1 || mlp_patience < 1)
    throw ConfigError("MLP sizes must be positive");
  if (!(mlp_learning_rate > 0.0)) throw ConfigError("mlp_learning_rate must be positive");
  if (!(mlp_validation_fraction >= 0.0 && mlp_validation_fraction < 1.0))
    throw ConfigError("mlp_validation_fraction must be in [0,1)");
}

json ClassifierConfig::to_json() const {
  return {{"dt_max_depth", dt_max_depth},
          {"dt_min_samples_split", dt_min_samples_split},
          {"rf_n_trees", rf_n_trees},
          {"nb_var_floor_rel", nb_var_floor_rel},
          {"qda_shrinkage", qda_shrinkage},
          {"svm_kernel", svm_kernel == SvmKernel::rbf ? "rbf" : "linear"},
          {"svm_c", svm_c},
          {"svm_gamma", svm_gamma},
          {"svm_tol", svm_tol},
          {"svm_max_passes", svm_max_passes},
          {"svm_max_iterations", svm_max_iterations},
          {"mlp_hidden", mlp_hidden},
          {"mlp_learning_rate", mlp_learning_rate},
          {"mlp_batch", mlp_batch},
          {"mlp_max_epochs", mlp_max_epochs},
          {"mlp_patience", mlp_patience},
          {"mlp_validation_fraction", mlp_validation_fraction}};
}

ClassifierConfig ClassifierConfig::from_json(const json& j) {
  ClassifierConfig c;
  if (!j.is_object()) throw ConfigError("classifier config must be an object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "dt_max_depth") c.dt_max_depth = v.get<int>();
      else if (key == "dt_min_samples_split") c.dt_min_samples_split = v.get<int>();
      else if (key == "rf_n_trees") c.rf_n_trees = v.get<int>();
      else if (key == "nb_var_floor_rel") c.nb_var_floor_rel = v.get<double>();
      else if (key == "qda_shrinkage") c.qda_shrinkage = v.get<double>();
      else if (key == "svm_kernel") {
        const auto s = v.get<std::string>();
        if (s == "rbf") c.svm_kernel = SvmKernel::rbf;
        else if (s == "linear") c.svm_kernel = SvmKernel::linear;
        else throw ConfigError("unknown SVM kernel: " + s);
      } else if (key == "svm_c") c.svm_c = v.get<double>();
      else if (key == "svm_gamma") c.svm_gamma = v.get<double>();
      else if (key == "svm_tol") c.svm_tol = v.get<double>();
      else if (key == "svm_max_passes") c.svm_max_passes = v.get<int>();
      else if (key == "svm_max_iterations") c.svm_max_iterations = v.get<int>();
      else if (key == "mlp_hidden") c.mlp_hidden = v.get<int>();
      else if (key == "mlp_learning_rate") c.mlp_learning_rate = v.get<double>();
      else if (key == "mlp_batch") c.mlp_batch = v.get<int>();
      else if (key == "mlp_max_epochs") c.mlp_max_epochs = v.get<int>();
      else if (key == "mlp_patience") c.mlp_patience = v.get<int>();
      else if (key == "mlp_validation_fraction") c.mlp_validation_fraction = v.get<double>();
      else throw ConfigError("unknown classifier config key: " + key);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad classifier config value: ") + e.what());
  }
  c.validate();
  return c;
}

int argmax_tag(const std::vector<ClassTag>& classes, const Vec& scores) {
  int best = 0;
  for (int c = 1; c < static_cast<int>(classes.size()); ++c) {
    if (scores(c) > scores(best) ||
        (scores(c) == scores(best) &&
         alphabetically_before(classes[static_cast<std::size_t>(c)], classes[static_cast<std::size_t>(best)])))
      best = c;
  }
  return best;
}

// ---- Trees ------------------------------------------------------------------

double gini(const std::array<int, kNumClasses>& counts, int total) {
  if (total <= 0) return 0.0;
  double s = 0.0;
  for (int c : counts) {
    const double p = static_cast<double>(c) / total;
    s += p * p;
  }
  return 1.0 - s;
}

ClassTag DecisionTree::predict(const Vec& x) const {
  int id = 0;
  while (nodes[static_cast<std::size_t>(id)].feature >= 0) {
    const TreeNode& n = nodes[static_cast<std::size_t>(id)];
    id = x(n.feature) <= n.threshold ? n.left : n.right;
  }
  return nodes[static_cast<std::size_t>(id)].label;
}

int DecisionTree::depth() const {
  std::vector<int> d(nodes.size(), 0);
  int best = 0;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    best = std::max(best, d[i]);
    if (nodes[i].feature >= 0) {
      d[static_cast<std::size_t>(nodes[i].left)] = d[i] + 1;
      d[static_cast<std::size_t>(nodes[i].right)] = d[i] + 1;
    }
  }
  return best;
}

DecisionTree fit_tree(const Mat& x, const std::vector<ClassTag>& y, const std::vector<Eigen::Index>& rows,
                      const TreeOptions& opt, std::mt19937_64* feature_rng) {
  if (rows.empty()) throw DataError("cannot grow a tree on zero rows");
  return TreeBuilder(x, y, opt, feature_rng).build(rows);
}

ForestTreeStream forest_tree_stream(std::uint64_t seed, int tree, Eigen::Index n) {
  ForestTreeStream s;
  std::mt19937_64 rng(derive_seed(seed, 2 * static_cast<std::uint64_t>(tree)));
  s.bootstrap.resize(static_cast<std::size_t>(n));
  for (auto& r : s.bootstrap) r = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::uint64_t>(n)));
  s.feature_seed = derive_seed(seed, 2 * static_cast<std::uint64_t>(tree) + 1);
  return s;
}

// ---- NB / QDA / SVM / MLP scoring ---------------------------------------------

Vec nb_log_joint(const NbModel& m, const Vec& x) {
  Vec out(static_cast<Eigen::Index>(m.classes.size()));
  for (Eigen::Index c = 0; c < out.size(); ++c) {
    const auto diff = (x.transpose() - m.mean.row(c)).array();
    out(c) = m.log_prior(c) - 0.5 * ((kLog2Pi + m.var.row(c).array().log()).sum() + (diff.square() / m.var.row(c).array()).sum());
  }
  return out;
}

Vec nb_posterior(const NbModel& m, const Vec& x) {
  const Vec lj = nb_log_joint(m, x);
  const Vec e = (lj.array() - lj.maxCoeff()).exp();
  return e / e.sum();
}

Vec qda_log_joint(const QdaModel& m, const Vec& x) {
  Vec out(static_cast<Eigen::Index>(m.classes.size()));
  for (Eigen::Index c = 0; c < out.size(); ++c) {
    const Vec diff = x - m.mean.row(c).transpose();
    const Vec z = m.chol[static_cast<std::size_t>(c)].triangularView<Eigen::Lower>().solve(diff);
    out(c) = m.log_prior(c) - 0.5 * (m.log_det(c) + z.squaredNorm());
  }
  return out;
}

Vec svm_decision(const SvmModel& m, const Vec& x) {
  Vec k(m.support.rows());
  for (Eigen::Index i = 0; i < k.size(); ++i) k(i) = kernel_value(m.kernel, m.gamma, m.support.row(i).transpose(), x);
  return m.coef.transpose() * k + m.bias;
}

BinarySmoResult smo_solve(const Mat& kernel, const Vec& labels, double c, double tol, int max_passes,
                          int max_iterations) {
  return Smo(kernel, labels, c, tol).run(max_passes, max_iterations);
}

Vec mlp_logits(const MlpModel& m, const Vec& x) {
  const Vec h = (m.w1 * x + m.b1).cwiseMax(0.0);
  return m.w2 * h + m.b2;
}

MlpModel mlp_init(int d, int hidden, const std::vector<ClassTag>& classes, std::uint64_t seed) {
  MlpModel m;
  m.classes = classes;
  const auto c = static_cast<int>(classes.size());
  std::mt19937_64 rng(seed);
  auto glorot = [&](int rows, int cols) {
    const double lim = std::sqrt(6.0 / (rows + cols));
    Mat w(rows, cols);
    for (int j = 0; j < cols; ++j)
      for (int i = 0; i < rows; ++i) w(i, j) = uniform(rng, -lim, lim);
    return w;
  };
  m.w1 = glorot(hidden, d);
  m.b1 = Vec::Zero(hidden);
  m.w2 = glorot(c, hidden);
  m.b2 = Vec::Zero(c);
  return m;
}

Vec mlp_flatten(const MlpModel& m) {
  Vec p(m.w1.size() + m.b1.size() + m.w2.size() + m.b2.size());
  Eigen::Index o = 0;
  p.segment(o, m.w1.size()) = m.w1.reshaped();
  o += m.w1.size();
  p.segment(o, m.b1.size()) = m.b1;
  o += m.b1.size();
  p.segment(o, m.w2.size()) = m.w2.reshaped();
  o += m.w2.size();
  p.segment(o, m.b2.size()) = m.b2;
  return p;
}

void mlp_unflatten(MlpModel& m, const Vec& p) {
  Eigen::Index o = 0;
  m.w1.reshaped() = p.segment(o, m.w1.size());
  o += m.w1.size();
  m.b1 = p.segment(o, m.b1.size());
  o += m.b1.size();
  m.w2.reshaped() = p.segment(o, m.w2.size());
  o += m.w2.size();
  m.b2 = p.segment(o, m.b2.size());
}

double mlp_loss_and_gradient(const MlpModel& m, const Mat& x, const std::vector<int>& target, Vec* grad) {
  const Eigen::Index n = x.rows();
  if (n == 0) throw DataError("MLP loss over zero rows");
  const Mat pre = (x * m.w1.transpose()).rowwise() + m.b1.transpose();
  const Mat h = pre.cwiseMax(0.0);
  Mat z = (h * m.w2.transpose()).rowwise() + m.b2.transpose();
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mx = z.row(i).maxCoeff();
    z.row(i).array() = (z.row(i).array() - mx).exp();
    const double s = z.row(i).sum();
    z.row(i) /= s;
    loss -= std::log(std::max(z(i, target[static_cast<std::size_t>(i)]), 1e-300));
  }
  loss /= static_cast<double>(n);
  if (grad) {
    Mat dz = z;
    for (Eigen::Index i = 0; i < n; ++i) dz(i, target[static_cast<std::size_t>(i)]) -= 1.0;
    dz /= static_cast<double>(n);
    const Mat dw2 = dz.transpose() * h;
    const Vec db2 = dz.colwise().sum().transpose();
    Mat dh = dz * m.w2;
    dh.array() *= (pre.array() > 0.0).cast<double>();
    const Mat dw1 = dh.transpose() * x;
    const Vec db1 = dh.colwise().sum().transpose();
    MlpModel g{m.classes, dw1, db1, dw2, db2, 0, 0};
    *grad = mlp_flatten(g);
  }
  return loss;
}

double mlp_gradient_check(const Mat& x, const std::vector<ClassTag>& y, int hidden, std::uint64_t seed, double step) {
  const auto classes = present_classes(y);
  MlpModel m = mlp_init(static_cast<int>(x.cols()), hidden, classes, seed);
  const auto t = class_indices(classes, y);
  Vec analytic;
  mlp_loss_and_gradient(m, x, t, &analytic);
  const Vec p0 = mlp_flatten(m);
  double worst = 0.0;
  for (Eigen::Index i = 0; i < p0.size(); ++i) {
    Vec p = p0;
    p(i) = p0(i) + step;
    mlp_unflatten(m, p);
    const double up = mlp_loss_and_gradient(m, x, t, nullptr);
    p(i) = p0(i) - step;
    mlp_unflatten(m, p);
    const double down = mlp_loss_and_gradient(m, x, t, nullptr);
    const double numeric = (up - down) / (2.0 * step);
    const double scale = std::max({std::abs(numeric), std::abs(analytic(i)), 1e-7});
    worst = std::max(worst, std::abs(numeric - analytic(i)) / scale);
  }
  return worst;
}

// ---- Fit / predict ------------------------------------------------------------

ClassifierModel fit(Algorithm a, const ClassifierConfig& cfg, const LabeledDataset& train, std::uint64_t seed) {
  cfg.validate();
  train.validate();
  const auto classes = present_classes(train.y);
  if (classes.size() < 2) throw DataError("classifier needs at least two classes in training data");
  const Eigen::Index n = train.size(), d = train.dims();
  if (d == 0) throw DataError("classifier needs at least one feature");
  const auto target = class_indices(classes, train.y);
  const auto n_classes = static_cast<Eigen::Index>(classes.size());
  Vec counts = Vec::Zero(n_classes);
  for (int t : target) counts(t) += 1.0;

  TreeOptions topt;
  topt.max_depth = cfg.dt_max_depth;
  topt.min_samples_split = cfg.dt_min_samples_split;

  switch (a) {
    case Algorithm::DT: {
      std::vector<Eigen::Index> rows(static_cast<std::size_t>(n));
      std::iota(rows.begin(), rows.end(), Eigen::Index{0});
      return {a, d, cfg, DtModel{fit_tree(train.x, train.y, rows, topt)}};
    }
    case Algorithm::RF: {
      RfModel rf;
      topt.max_features = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(d))));
      for (int t = 0; t < cfg.rf_n_trees; ++t) {
        const ForestTreeStream s = forest_tree_stream(seed, t, n);
        std::mt19937_64 frng(s.feature_seed);
        rf.trees.push_back(fit_tree(train.x, train.y, s.bootstrap, topt, &frng));
      }
      return {a, d, cfg, std::move(rf)};
    }
    case Algorithm::NB: {
      NbModel nb;
      nb.classes = classes;
      nb.log_prior = (counts / static_cast<double>(n)).array().log();
      const Vec gmean = train.x.colwise().mean();
      const double max_var = (train.x.rowwise() - gmean.transpose()).array().square().colwise().mean().maxCoeff();
      const double floor = cfg.nb_var_floor_rel * (max_var > 0.0 ? max_var : 1.0);
      nb.mean = Mat::Zero(n_classes, d);
      nb.var = Mat::Zero(n_classes, d);
      for (Eigen::Index i = 0; i < n; ++i) nb.mean.row(target[static_cast<std::size_t>(i)]) += train.x.row(i);
      for (Eigen::Index c = 0; c < n_classes; ++c) nb.mean.row(c) /= counts(c);
      for (Eigen::Index i = 0; i < n; ++i) {
        const int c = target[static_cast<std::size_t>(i)];
        nb.var.row(c).array() += (train.x.row(i) - nb.mean.row(c)).array().square();
      }
      for (Eigen::Index c = 0; c < n_classes; ++c) nb.var.row(c) = (nb.var.row(c) / counts(c)).cwiseMax(floor);
      return {a, d, cfg, std::move(nb)};
    }
    case Algorithm::QDA: {
      QdaModel q;
      q.classes = classes;
      q.log_prior = (counts / static_cast<double>(n)).array().log();
      q.mean = Mat::Zero(n_classes, d);
      q.log_det = Vec::Zero(n_classes);
      for (Eigen::Index i = 0; i < n; ++i) q.mean.row(target[static_cast<std::size_t>(i)]) += train.x.row(i);
      for (Eigen::Index c = 0; c < n_classes; ++c) q.mean.row(c) /= counts(c);
      std::vector<Mat> cov(static_cast<std::size_t>(n_classes), Mat::Zero(d, d));
      for (Eigen::Index i = 0; i < n; ++i) {
        const int c = target[static_cast<std::size_t>(i)];
        const Vec diff = (train.x.row(i) - q.mean.row(c)).transpose();
        cov[static_cast<std::size_t>(c)].noalias() += diff * diff.transpose();
      }
      for (Eigen::Index c = 0; c < n_classes; ++c) {
        Mat& s = cov[static_cast<std::size_t>(c)];
        s /= std::max(counts(c) - 1.0, 1.0);
        const double tr = s.trace() / static_cast<double>(d);
        s.diagonal().array() += cfg.qda_shrinkage * (tr > 0.0 ? tr : 1.0);
        Eigen::LLT<Mat> llt(s);
        if (llt.info() != Eigen::Success) throw NumericError("QDA covariance is not positive definite");
        q.chol.push_back(llt.matrixL());
        q.log_det(c) = 2.0 * q.chol.back().diagonal().array().log().sum();
      }
      return {a, d, cfg, std::move(q)};
    }
    case Algorithm::SVM: {
      SvmModel s;
      s.classes = classes;
      s.kernel = cfg.svm_kernel;
      s.gamma = cfg.svm_gamma;
      if (s.kernel == SvmKernel::rbf && s.gamma <= 0.0) {
        const Vec gmean = train.x.colwise().mean();
        const double mean_var = (train.x.rowwise() - gmean.transpose()).array().square().colwise().mean().mean();
        s.gamma = mean_var > 0.0 ? 1.0 / (static_cast<double>(d) * mean_var) : 1.0 / static_cast<double>(d);
      }
      Mat k(n, n);
      for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = i; j < n; ++j)
          k(i, j) = k(j, i) = kernel_value(s.kernel, s.gamma, train.x.row(i).transpose(), train.x.row(j).transpose());
      Mat coef = Mat::Zero(n, n_classes);
      s.bias = Vec::Zero(n_classes);
      for (Eigen::Index c = 0; c < n_classes; ++c) {
        Vec lab(n);
        for (Eigen::Index i = 0; i < n; ++i) lab(i) = target[static_cast<std::size_t>(i)] == c ? 1.0 : -1.0;
        const BinarySmoResult r = smo_solve(k, lab, cfg.svm_c, cfg.svm_tol, cfg.svm_max_passes, cfg.svm_max_iterations);
        coef.col(c) = r.alpha.cwiseProduct(lab);
        s.bias(c) = r.bias;
      }
      std::vector<Eigen::Index> sv;
      for (Eigen::Index i = 0; i < n; ++i)
        if ((coef.row(i).array() != 0.0).any()) sv.push_back(i);
      s.support = take_rows(train.x, sv);
      s.coef = take_rows(coef, sv);
      return {a, d, cfg, std::move(s)};
    }
    case Algorithm::MLP: return {a, d, cfg, fit_mlp(cfg, train, seed)};
  }
  throw ConfigError("unknown classifier");
}

ClassTag ClassifierModel::predict(const Vec& x) const {
  if (x.size() != dims_) throw DataError("classifier input dimension mismatch");
  return std::visit(
      [&](const auto& m) -> ClassTag {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, DtModel>) {
          return m.tree.predict(x);
        } else if constexpr (std::is_same_v<T, RfModel>) {
          std::array<int, kNumClasses> votes{};
          for (const auto& t : m.trees) ++votes[static_cast<std::size_t>(index_of(t.predict(x)))];
          return majority(votes);
        } else if constexpr (std::is_same_v<T, NbModel>) {
          return m.classes[static_cast<std::size_t>(argmax_tag(m.classes, nb_log_joint(m, x)))];
        } else if constexpr (std::is_same_v<T, QdaModel>) {
          return m.classes[static_cast<std::size_t>(argmax_tag(m.classes, qda_log_joint(m, x)))];
        } else if constexpr (std::is_same_v<T, SvmModel>) {
          return m.classes[static_cast<std::size_t>(argmax_tag(m.classes, svm_decision(m, x)))];
        } else {
          return m.classes[static_cast<std::size_t>(argmax_tag(m.classes, mlp_logits(m, x)))];
        }
      },
      model_);
}

std::vector<ClassTag> ClassifierModel::predict_batch(const Mat& x) const {
  if (x.rows() > 0 && x.cols() != dims_) throw DataError("classifier input dimension mismatch");
  std::vector<ClassTag> out;
  out.reserve(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index i = 0; i < x.rows(); ++i) out.push_back(predict(x.row(i).transpose()));
  return out;
}

json ClassifierModel::to_json() const {
  json j{{"format_version", kModelFormatVersion},
         {"algorithm", to_string(algorithm_)},
         {"dims", dims_},
         {"config", config_.to_json()}};
  std::visit(
      [&](const auto& m) {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, DtModel>) {
          j["model"] = {{"tree", tree_to_json(m.tree, 0)}};
        } else if constexpr (std::is_same_v<T, RfModel>) {
          json trees = json::array();
          for (const auto& t : m.trees) trees.push_back(tree_to_json(t, 0));
          j["model"] = {{"trees", trees}};
        } else if constexpr (std::is_same_v<T, NbModel>) {
          j["model"] = {{"classes", tags_to_json(m.classes)},
                        {"log_prior", vector_to_json(m.log_prior)},
                        {"mean", matrix_to_json(m.mean)},
                        {"var", matrix_to_json(m.var)}};
        } else if constexpr (std::is_same_v<T, QdaModel>) {
          json chol = json::array();
          for (const auto& l : m.chol) chol.push_back(matrix_to_json(l));
          j["model"] = {{"classes", tags_to_json(m.classes)},
                        {"log_prior", vector_to_json(m.log_prior)},
                        {"mean", matrix_to_json(m.mean)},
                        {"chol", chol},
                        {"log_det", vector_to_json(m.log_det)}};
        } else if constexpr (std::is_same_v<T, SvmModel>) {
          j["model"] = {{"classes", tags_to_json(m.classes)},
                        {"kernel", m.kernel == SvmKernel::rbf ? "rbf" : "linear"},
                        {"gamma", m.gamma},
                        {"support", matrix_to_json(m.support)},
                        {"coef", matrix_to_json(m.coef)},
                        {"bias", vector_to_json(m.bias)}};
        } else {
          j["model"] = {{"classes", tags_to_json(m.classes)},
                        {"w1", matrix_to_json(m.w1)},
                        {"b1", vector_to_json(m.b1)},
                        {"w2", matrix_to_json(m.w2)},
                        {"b2", vector_to_json(m.b2)},
                        {"epochs_run", m.epochs_run},
                        {"best_epoch", m.best_epoch}};
        }
      },
      model_);
  return j;
}

ClassifierModel ClassifierModel::from_json(const json& j) {
  try {
    if (j.at("format_version").get<int>() != kModelFormatVersion) throw DataError("unsupported classifier format version");
    const Algorithm a = parse_algorithm(j.at("algorithm").get<std::string>());
    const auto d = j.at("dims").get<Eigen::Index>();
    const ClassifierConfig cfg = ClassifierConfig::from_json(j.at("config"));
    const json& m = j.at("model");
    switch (a) {
      case Algorithm::DT: {
        DtModel dt;
        tree_from_json(m.at("tree"), dt.tree);
        return {a, d, cfg, std::move(dt)};
      }
      case Algorithm::RF: {
        RfModel rf;
        for (const auto& t : m.at("trees")) {
          rf.trees.emplace_back();
          tree_from_json(t, rf.trees.back());
        }
        return {a, d, cfg, std::move(rf)};
      }
      case Algorithm::NB:
        return {a, d, cfg,
                NbModel{tags_from_json(m.at("classes")), vector_from_json(m.at("log_prior")),
                        matrix_from_json(m.at("mean")), matrix_from_json(m.at("var"))}};
      case Algorithm::QDA: {
        QdaModel q{tags_from_json(m.at("classes")), vector_from_json(m.at("log_prior")), matrix_from_json(m.at("mean")),
                   {}, vector_from_json(m.at("log_det"))};
        for (const auto& l : m.at("chol")) q.chol.push_back(matrix_from_json(l));
        return {a, d, cfg, std::move(q)};
      }
      case Algorithm::SVM:
        return {a, d, cfg,
                SvmModel{tags_from_json(m.at("classes")),
                         m.at("kernel").get<std::string>() == "rbf" ? SvmKernel::rbf : SvmKernel::linear,
                         m.at("gamma").get<double>(), matrix_from_json(m.at("support")), matrix_from_json(m.at("coef")),
                         vector_from_json(m.at("bias"))}};
      case Algorithm::MLP:
        return {a, d, cfg,
                MlpModel{tags_from_json(m.at("classes")), matrix_from_json(m.at("w1")), vector_from_json(m.at("b1")),
                         matrix_from_json(m.at("w2")), vector_from_json(m.at("b2")), m.at("epochs_run").get<int>(),
                         m.at("best_epoch").get<int>()}};
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed classifier JSON: ") + e.what());
  } catch (const std::bad_optional_access&) {
    throw DataError("classifier JSON holds an unknown class tag");
  }
  throw DataError("unknown classifier in JSON");
}

std::map<Algorithm, std::vector<ClassTag>> fit_predict_all(const std::vector<Algorithm>& algorithms,
                                                           const ClassifierConfig& cfg, const LabeledDataset& train,
                                                           const Mat& test, std::uint64_t seed) {
  std::map<Algorithm, std::vector<ClassTag>> out;
  for (auto a : algorithms) out[a] = fit(a, cfg, train, seed).predict_batch(test);
  return out;
}

}  // namespace cowlab
