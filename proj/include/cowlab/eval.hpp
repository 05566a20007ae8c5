#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "cowlab/classify.hpp"
#include "cowlab/dimred.hpp"

namespace cowlab {

/// Indices (ascending) of all BoIs plus a seeded uniform subset of BNs of the
/// same size.
std::vector<std::size_t> balance_dataset(const std::vector<ClassTag>& labels, std::uint64_t seed);

struct FoldPlan {
  int k = 10;
  std::vector<std::vector<Eigen::Index>> folds;  // each ascending
  std::uint64_t seed = 0;
  /// Classes with fewer samples than folds, so some folds lack them.
  std::vector<ClassTag> sparse_classes;
};

FoldPlan stratified_folds(const std::vector<ClassTag>& y, int k, std::uint64_t seed);

/// Stratified split; returns (train, test) ascending index lists.
std::pair<std::vector<Eigen::Index>, std::vector<Eigen::Index>> train_test_split(const std::vector<ClassTag>& y,
                                                                                 double test_fraction,
                                                                                 std::uint64_t seed);

struct ConfusionMatrix {
  std::array<std::array<long long, kNumClasses>, kNumClasses> counts{};  // [true][predicted]

  void add(ClassTag truth, ClassTag predicted) { ++counts[index_of(truth)][index_of(predicted)]; }
  ConfusionMatrix& operator+=(const ConfusionMatrix& o);
  long long total() const;
  long long trace() const;
  long long support(int c) const;
  long long predicted(int c) const;
  double accuracy() const;
};

struct ClassScores {
  std::array<double, kNumClasses> precision{};
  std::array<double, kNumClasses> recall{};
  std::array<double, kNumClasses> f1{};
  std::array<long long, kNumClasses> support{};
  double macro_f1 = 0.0;
  double micro_f1 = 0.0;
  std::vector<ClassTag> excluded;  // zero support, left out of macro-F1
};

ClassScores class_scores(const ConfusionMatrix& cm);

struct PipelineConfig {
  Algorithm algorithm = Algorithm::DT;
  DrMethod dr = DrMethod::none;
  int n_components = 0;
  ClassifierConfig classifier;
  std::uint64_t seed = 0;
  FeatureProvenance provenance = FeatureProvenance::geometric;

  /// e.g. "DT_LDA8", "SVM_none", "MLP_CAE".
  std::string label() const;
  std::string dr_label() const;
};

struct FittedPipeline {
  FeatureReducer reducer;
  ClassifierModel model;
  std::vector<ClassTag> predict(const Mat& x) const;
};

/// Standardization, reduction and classifier fitted on `train` alone.
FittedPipeline fit_pipeline(const PipelineConfig& cfg, const LabeledDataset& train, std::uint64_t seed);

struct CvReport {
  PipelineConfig config;
  std::vector<double> fold_accuracy;
  std::vector<double> fold_macro_f1;
  double mean_accuracy = 0.0;
  double mean_macro_f1 = 0.0;
  double std_accuracy = 0.0;
  double std_macro_f1 = 0.0;
  ConfusionMatrix confusion;  // summed over folds
  ClassScores scores;  // from the summed confusion
  /// Classes that had test rows in a fold whose training rows lacked them.
  std::vector<ClassTag> absent_from_training;
  long long n_samples = 0;

  nlohmann::json to_json() const;
  static CvReport from_json(const nlohmann::json& j);
};

/// k-fold evaluation; folds run on up to `jobs` threads and are reduced in
/// fold order. `fitted` receives each fold's pipeline when non-null.
CvReport cross_validate(const PipelineConfig& cfg, const LabeledDataset& data, const FoldPlan& plan, int jobs = 1,
                        std::vector<FittedPipeline>* fitted = nullptr);

/// summary.csv, report.json, confusion_<label>.csv and .svg per report, a
/// grouped bar chart for two or more reports and a radar chart per DR
/// method with three or more algorithms. Returns the written paths.
std::vector<std::filesystem::path> emit_report(const std::vector<CvReport>& reports, const std::filesystem::path& out_dir);

std::string summary_csv(const std::vector<CvReport>& reports);
std::string confusion_csv(const ConfusionMatrix& cm);
std::string confusion_svg(const CvReport& r);
std::string bar_chart_svg(const std::vector<CvReport>& reports);
std::string radar_svg(const std::vector<CvReport>& reports, const std::string& dr);

}  // namespace cowlab
