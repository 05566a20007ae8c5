#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "cowlab/common.hpp"

namespace cowlab {

enum class FeatureProvenance { geometric, latent };

struct LabeledDataset {
  Mat x;
  std::vector<ClassTag> y;
  FeatureProvenance provenance = FeatureProvenance::geometric;

  Eigen::Index size() const { return x.rows(); }
  Eigen::Index dims() const { return x.cols(); }
  /// Throws DataError on row-count mismatch or non-finite entries.
  void validate() const;
  LabeledDataset subset(const std::vector<Eigen::Index>& rows) const;
};

enum class Algorithm { DT, RF, NB, QDA, SVM, MLP };
inline constexpr std::array<Algorithm, 6> kAllAlgorithms = {Algorithm::DT, Algorithm::RF, Algorithm::NB,
                                                            Algorithm::QDA, Algorithm::SVM, Algorithm::MLP};
std::string to_string(Algorithm a);
Algorithm parse_algorithm(const std::string& s);

enum class SvmKernel { linear, rbf };

struct ClassifierConfig {
  int dt_max_depth = -1;  // -1: unbounded
  int dt_min_samples_split = 2;
  int rf_n_trees = 100;
  double nb_var_floor_rel = 1e-9;
  double qda_shrinkage = 1e-4;
  SvmKernel svm_kernel = SvmKernel::rbf;
  double svm_c = 1.0;
  double svm_gamma = 0.0;  // 0: 1 / (d * mean feature variance)
  double svm_tol = 1e-3;
  int svm_max_passes = 200;
  int svm_max_iterations = 100000;
  int mlp_hidden = 64;
  double mlp_learning_rate = 1e-3;
  int mlp_batch = 32;
  int mlp_max_epochs = 300;
  int mlp_patience = 20;
  double mlp_validation_fraction = 0.1;

  void validate() const;
  nlohmann::json to_json() const;
  static ClassifierConfig from_json(const nlohmann::json& j);
};

/// Index of the best score; exact ties go to the alphabetically first tag.
int argmax_tag(const std::vector<ClassTag>& classes, const Vec& scores);

// ---- Decision tree ----------------------------------------------------------

struct TreeNode {
  int feature = -1;  // -1: leaf
  double threshold = 0.0;  // x[feature] <= threshold goes left
  int left = -1;
  int right = -1;
  ClassTag label = ClassTag::BN;
};

struct DecisionTree {
  std::vector<TreeNode> nodes;  // nodes[0] is the root
  ClassTag predict(const Vec& x) const;
  int depth() const;
};

struct TreeOptions {
  int max_depth = -1;
  int min_samples_split = 2;
  int max_features = 0;  // 0: all features at every split
};

double gini(const std::array<int, kNumClasses>& counts, int total);

/// CART on the given rows (duplicates allowed). `feature_rng` is drawn from
/// only when max_features restricts the candidate set.
DecisionTree fit_tree(const Mat& x, const std::vector<ClassTag>& y, const std::vector<Eigen::Index>& rows,
                      const TreeOptions& opt, std::mt19937_64* feature_rng = nullptr);

/// The random stream consumed by one forest tree: its bootstrap rows and the
/// seed of its feature-subsampling generator.
struct ForestTreeStream {
  std::vector<Eigen::Index> bootstrap;
  std::uint64_t feature_seed = 0;
};
ForestTreeStream forest_tree_stream(std::uint64_t seed, int tree, Eigen::Index n);

// ---- Fitted models ----------------------------------------------------------

struct DtModel {
  DecisionTree tree;
};

struct RfModel {
  std::vector<DecisionTree> trees;
};

struct NbModel {
  std::vector<ClassTag> classes;
  Vec log_prior;
  Mat mean;  // C x d
  Mat var;  // C x d, floored
};
Vec nb_log_joint(const NbModel& m, const Vec& x);
/// Normalized posterior over m.classes, computed in log space.
Vec nb_posterior(const NbModel& m, const Vec& x);

struct QdaModel {
  std::vector<ClassTag> classes;
  Vec log_prior;
  Mat mean;  // C x d
  std::vector<Mat> chol;  // lower Cholesky factor of each shrunk covariance
  Vec log_det;
};
Vec qda_log_joint(const QdaModel& m, const Vec& x);

struct SvmModel {
  std::vector<ClassTag> classes;
  SvmKernel kernel = SvmKernel::rbf;
  double gamma = 1.0;
  Mat support;  // nsv x d
  Mat coef;  // nsv x C, alpha_i * y_i per one-vs-rest problem
  Vec bias;  // C
};
Vec svm_decision(const SvmModel& m, const Vec& x);

struct BinarySmoResult {
  Vec alpha;
  double bias = 0.0;
  int passes = 0;
};
/// One binary soft-margin problem (labels +-1) over a precomputed kernel.
BinarySmoResult smo_solve(const Mat& kernel, const Vec& labels, double c, double tol, int max_passes,
                          int max_iterations);

struct MlpModel {
  std::vector<ClassTag> classes;
  Mat w1;  // h x d
  Vec b1;
  Mat w2;  // C x h
  Vec b2;
  int epochs_run = 0;
  int best_epoch = 0;
};
Vec mlp_logits(const MlpModel& m, const Vec& x);

/// Glorot-uniform initialization with zero biases.
MlpModel mlp_init(int d, int hidden, const std::vector<ClassTag>& classes, std::uint64_t seed);
/// Mean cross-entropy over the rows and its analytic gradient, flattened as
/// [w1, b1, w2, b2] (column-major within each matrix).
double mlp_loss_and_gradient(const MlpModel& m, const Mat& x, const std::vector<int>& class_index, Vec* grad);
Vec mlp_flatten(const MlpModel& m);
void mlp_unflatten(MlpModel& m, const Vec& params);
/// Max relative error between analytic and central-difference gradients at
/// initialization.
double mlp_gradient_check(const Mat& x, const std::vector<ClassTag>& y, int hidden, std::uint64_t seed,
                          double step = 1e-4);

class ClassifierModel {
 public:
  using Variant = std::variant<DtModel, RfModel, NbModel, QdaModel, SvmModel, MlpModel>;

  ClassifierModel() = default;
  ClassifierModel(Algorithm a, Eigen::Index dims, ClassifierConfig cfg, Variant model)
      : algorithm_(a), dims_(dims), config_(cfg), model_(std::move(model)) {}

  Algorithm algorithm() const { return algorithm_; }
  Eigen::Index dims() const { return dims_; }
  const ClassifierConfig& config() const { return config_; }
  const Variant& model() const { return model_; }

  ClassTag predict(const Vec& x) const;
  std::vector<ClassTag> predict_batch(const Mat& x) const;

  nlohmann::json to_json() const;
  static ClassifierModel from_json(const nlohmann::json& j);

 private:
  Algorithm algorithm_ = Algorithm::DT;
  Eigen::Index dims_ = 0;
  ClassifierConfig config_;
  Variant model_;
};

ClassifierModel fit(Algorithm a, const ClassifierConfig& cfg, const LabeledDataset& train, std::uint64_t seed);

std::map<Algorithm, std::vector<ClassTag>> fit_predict_all(const std::vector<Algorithm>& algorithms,
                                                           const ClassifierConfig& cfg, const LabeledDataset& train,
                                                           const Mat& test, std::uint64_t seed);

}  // namespace cowlab
