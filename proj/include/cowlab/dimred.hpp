#pragma once

#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "cowlab/common.hpp"

namespace cowlab {

/// Per-dimension z-score. Zero-variance dimensions keep scale 1.
struct Standardizer {
  Vec mean;
  Vec scale;

  static Standardizer fit(const Mat& x);
  Mat transform(const Mat& x) const;
};

struct PcaModel {
  Vec mean;
  Mat components;  // k x d, orthonormal rows
  Vec eigenvalues;  // k, non-increasing
  Vec all_eigenvalues;  // d, for variance accounting
};

PcaModel pca_fit(const Mat& x, int k);
Vec pca_transform(const PcaModel& m, const Vec& x);
Mat pca_transform(const PcaModel& m, const Mat& x);
Vec pca_inverse_transform(const PcaModel& m, const Vec& z);

struct LdaModel {
  Mat projection;  // k x d
  Vec global_mean;
  Mat class_means;  // C x d
  std::vector<ClassTag> classes;
  Vec eigenvalues;
  double epsilon = 0.0;
};

LdaModel lda_fit(const Mat& x, const std::vector<ClassTag>& y, int k, double eps_rel = 1e-6);
Vec lda_transform(const LdaModel& m, const Vec& x);
Mat lda_transform(const LdaModel& m, const Mat& x);

struct IsomapModel {
  Mat training_points;  // n x d
  Mat embedding;  // n x k, column-centered
  Vec eigenvalues;  // k
  int k_nn = 10;
};

/// All-pairs shortest-path distances over the symmetric kNN graph, with
/// disconnected components bridged by their shortest Euclidean edge.
Mat geodesic_distances(const Mat& x, int k_nn);

/// Top-k classical MDS of a distance matrix.
Mat classical_mds(const Mat& distances, int k, Vec* eigenvalues_out = nullptr);

IsomapModel isomap_fit(const Mat& x, int k, int k_nn = 10);
Vec isomap_transform(const IsomapModel& m, const Vec& x);
Mat isomap_transform(const IsomapModel& m, const Mat& x);

enum class DrMethod { none, pca, lda, isomap };

std::string to_string(DrMethod m);
DrMethod parse_dr_method(const std::string& s);
int default_components(DrMethod m);

/// Standardization followed by one of the reducers, fitted on training rows.
class FeatureReducer {
 public:
  static FeatureReducer fit(DrMethod method, int k, const Mat& x, const std::vector<ClassTag>& y);
  Mat transform(const Mat& x) const;
  DrMethod method() const { return method_; }

  nlohmann::json to_json() const;
  static FeatureReducer from_json(const nlohmann::json& j);

 private:
  DrMethod method_ = DrMethod::none;
  Standardizer standardizer_;
  std::variant<std::monostate, PcaModel, LdaModel, IsomapModel> model_;
};

}  // namespace cowlab
