#include "cowlab/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <random>
#include <thread>

#include <nlohmann/json.hpp>

#include "cowlab/rng.hpp"

namespace cowlab {

using nlohmann::json;

namespace {

std::array<std::vector<Eigen::Index>, kNumClasses> by_class(const std::vector<ClassTag>& y) {
  std::array<std::vector<Eigen::Index>, kNumClasses> groups;
  for (std::size_t i = 0; i < y.size(); ++i) groups[static_cast<std::size_t>(index_of(y[i]))].push_back(static_cast<Eigen::Index>(i));
  return groups;
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

json tag_list(const std::vector<ClassTag>& tags) {
  json out = json::array();
  for (auto t : tags) out.push_back(std::string(to_string(t)));
  return out;
}

}  // namespace

std::vector<std::size_t> balance_dataset(const std::vector<ClassTag>& labels, std::uint64_t seed) {
  std::vector<std::size_t> boi, bn;
  for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] == ClassTag::BN ? bn : boi).push_back(i);
  if (bn.size() < boi.size())
    throw DataError("not enough BNs to balance: " + std::to_string(bn.size()) + " BNs for " + std::to_string(boi.size()) +
                    " BoIs");
  std::mt19937_64 rng(seed);
  shuffle_in_place(bn, rng);
  bn.resize(boi.size());
  std::vector<std::size_t> out = boi;
  out.insert(out.end(), bn.begin(), bn.end());
  std::sort(out.begin(), out.end());
  return out;
}

FoldPlan stratified_folds(const std::vector<ClassTag>& y, int k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("fold count must be >= 2");
  if (static_cast<int>(y.size()) < k) throw DataError("fewer samples than folds");
  FoldPlan plan;
  plan.k = k;
  plan.seed = seed;
  plan.folds.resize(static_cast<std::size_t>(k));
  auto groups = by_class(y);
  for (int c = 0; c < kNumClasses; ++c) {
    auto& g = groups[static_cast<std::size_t>(c)];
    if (g.empty()) continue;
    if (static_cast<int>(g.size()) < k) plan.sparse_classes.push_back(tag_from_index(c));
    std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(c)));
    shuffle_in_place(g, rng);
    for (std::size_t i = 0; i < g.size(); ++i) plan.folds[i % static_cast<std::size_t>(k)].push_back(g[i]);
  }
  for (auto& f : plan.folds) std::sort(f.begin(), f.end());
  return plan;
}

std::pair<std::vector<Eigen::Index>, std::vector<Eigen::Index>> train_test_split(const std::vector<ClassTag>& y,
                                                                                 double test_fraction,
                                                                                 std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("test fraction must be in (0,1)");
  std::vector<Eigen::Index> train, test;
  auto groups = by_class(y);
  for (int c = 0; c < kNumClasses; ++c) {
    auto& g = groups[static_cast<std::size_t>(c)];
    std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(c)));
    shuffle_in_place(g, rng);
    const auto n_test = static_cast<std::size_t>(std::lround(test_fraction * static_cast<double>(g.size())));
    test.insert(test.end(), g.begin(), g.begin() + static_cast<std::ptrdiff_t>(n_test));
    train.insert(train.end(), g.begin() + static_cast<std::ptrdiff_t>(n_test), g.end());
  }
  if (train.empty() || test.empty()) throw DataError("train/test split produced an empty side");
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {train, test};
}

// ---- Confusion and scores -----------------------------------------------------

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& o) {
  for (int i = 0; i < kNumClasses; ++i)
    for (int j = 0; j < kNumClasses; ++j) counts[i][j] += o.counts[i][j];
  return *this;
}

long long ConfusionMatrix::total() const {
  long long t = 0;
  for (const auto& r : counts)
    for (auto v : r) t += v;
  return t;
}

long long ConfusionMatrix::trace() const {
  long long t = 0;
  for (int i = 0; i < kNumClasses; ++i) t += counts[i][i];
  return t;
}

long long ConfusionMatrix::support(int c) const {
  return std::accumulate(counts[c].begin(), counts[c].end(), 0LL);
}

long long ConfusionMatrix::predicted(int c) const {
  long long t = 0;
  for (int i = 0; i < kNumClasses; ++i) t += counts[i][c];
  return t;
}

double ConfusionMatrix::accuracy() const {
  const long long t = total();
  return t == 0 ? 0.0 : static_cast<double>(trace()) / static_cast<double>(t);
}

ClassScores class_scores(const ConfusionMatrix& cm) {
  ClassScores s;
  double f1_sum = 0.0;
  int n = 0;
  for (int c = 0; c < kNumClasses; ++c) {
    const double tp = static_cast<double>(cm.counts[c][c]);
    const long long sup = cm.support(c), pred = cm.predicted(c);
    s.support[c] = sup;
    s.precision[c] = pred > 0 ? tp / static_cast<double>(pred) : 0.0;
    s.recall[c] = sup > 0 ? tp / static_cast<double>(sup) : 0.0;
    const double pr = s.precision[c] + s.recall[c];
    s.f1[c] = pr > 0.0 ? 2.0 * s.precision[c] * s.recall[c] / pr : 0.0;
    if (sup == 0) {
      s.excluded.push_back(tag_from_index(c));
    } else {
      f1_sum += s.f1[c];
      ++n;
    }
  }
  s.macro_f1 = n > 0 ? f1_sum / n : 0.0;
  // Single-label classification: micro-F1 coincides with accuracy.
  s.micro_f1 = cm.accuracy();
  return s;
}

// ---- Pipelines ----------------------------------------------------------------

std::string PipelineConfig::dr_label() const {
  const std::string dr_part = dr == DrMethod::none ? "none" : to_string(dr) + std::to_string(n_components);
  if (provenance == FeatureProvenance::latent) return dr == DrMethod::none ? "CAE" : "CAE-" + dr_part;
  return dr_part;
}

std::string PipelineConfig::label() const { return to_string(algorithm) + "_" + dr_label(); }

std::vector<ClassTag> FittedPipeline::predict(const Mat& x) const { return model.predict_batch(reducer.transform(x)); }

FittedPipeline fit_pipeline(const PipelineConfig& cfg, const LabeledDataset& train, std::uint64_t seed) {
  train.validate();
  FittedPipeline p{FeatureReducer::fit(cfg.dr, cfg.n_components, train.x, train.y), {}};
  LabeledDataset reduced{p.reducer.transform(train.x), train.y, train.provenance};
  p.model = fit(cfg.algorithm, cfg.classifier, reduced, seed);
  return p;
}

namespace {

struct FoldOutcome {
  ConfusionMatrix cm;
  std::vector<ClassTag> absent;
  FittedPipeline fitted;
};

FoldOutcome run_fold(const PipelineConfig& cfg, const LabeledDataset& data, const FoldPlan& plan, int f) {
  std::vector<Eigen::Index> train_rows;
  for (int g = 0; g < plan.k; ++g)
    if (g != f) train_rows.insert(train_rows.end(), plan.folds[static_cast<std::size_t>(g)].begin(), plan.folds[static_cast<std::size_t>(g)].end());
  std::sort(train_rows.begin(), train_rows.end());
  const auto& test_rows = plan.folds[static_cast<std::size_t>(f)];
  const LabeledDataset train = data.subset(train_rows);
  const LabeledDataset test = data.subset(test_rows);

  FoldOutcome out{{}, {}, fit_pipeline(cfg, train, derive_seed(cfg.seed, static_cast<std::uint64_t>(f)))};
  const auto pred = out.fitted.predict(test.x);
  std::array<bool, kNumClasses> in_train{};
  for (auto t : train.y) in_train[static_cast<std::size_t>(index_of(t))] = true;
  std::array<bool, kNumClasses> flagged{};
  for (std::size_t i = 0; i < pred.size(); ++i) {
    out.cm.add(test.y[i], pred[i]);
    const auto c = static_cast<std::size_t>(index_of(test.y[i]));
    if (!in_train[c] && !flagged[c]) {
      flagged[c] = true;
      out.absent.push_back(test.y[i]);
    }
  }
  return out;
}

}  // namespace

CvReport cross_validate(const PipelineConfig& cfg, const LabeledDataset& data, const FoldPlan& plan, int jobs,
                        std::vector<FittedPipeline>* fitted) {
  data.validate();
  std::size_t covered = 0;
  for (const auto& f : plan.folds) {
    covered += f.size();
    for (auto r : f)
      if (r < 0 || r >= data.size()) throw DataError("fold plan refers to rows outside the dataset");
  }
  if (static_cast<int>(plan.folds.size()) != plan.k || covered != static_cast<std::size_t>(data.size()))
    throw DataError("fold plan does not partition the dataset");

  std::vector<FoldOutcome> outcomes(static_cast<std::size_t>(plan.k));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(plan.k));
  std::atomic<int> next{0};
  auto worker = [&] {
    for (int f = next++; f < plan.k; f = next++) {
      try {
        outcomes[static_cast<std::size_t>(f)] = run_fold(cfg, data, plan, f);
      } catch (...) {
        errors[static_cast<std::size_t>(f)] = std::current_exception();
      }
    }
  };
  const int n_threads = std::clamp(jobs, 1, plan.k);
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  CvReport r;
  r.config = cfg;
  std::array<bool, kNumClasses> absent{};
  for (auto& o : outcomes) {
    r.fold_accuracy.push_back(o.cm.accuracy());
    r.fold_macro_f1.push_back(class_scores(o.cm).macro_f1);
    r.confusion += o.cm;
    for (auto t : o.absent) absent[static_cast<std::size_t>(index_of(t))] = true;
  }
  for (int c = 0; c < kNumClasses; ++c)
    if (absent[static_cast<std::size_t>(c)]) r.absent_from_training.push_back(tag_from_index(c));
  r.mean_accuracy = mean_of(r.fold_accuracy);
  r.mean_macro_f1 = mean_of(r.fold_macro_f1);
  r.std_accuracy = std_of(r.fold_accuracy);
  r.std_macro_f1 = std_of(r.fold_macro_f1);
  r.scores = class_scores(r.confusion);
  r.n_samples = r.confusion.total();
  if (fitted) {
    fitted->clear();
    for (auto& o : outcomes) fitted->push_back(std::move(o.fitted));
  }
  return r;
}

json CvReport::to_json() const {
  json per_class = json::object();
  for (int c = 0; c < kNumClasses; ++c)
    per_class[std::string(kClassNames[c])] = {{"precision", scores.precision[c]},
                                              {"recall", scores.recall[c]},
                                              {"f1", scores.f1[c]},
                                              {"support", scores.support[c]}};
  json cm = json::array();
  for (const auto& row : confusion.counts) cm.push_back(row);
  return {{"label", config.label()},
          {"algorithm", to_string(config.algorithm)},
          {"dr_method", config.dr_label()},
          {"n_components", config.n_components},
          {"features", config.provenance == FeatureProvenance::latent ? "latent" : "geometric"},
          {"seed", config.seed},
          {"classifier_config", config.classifier.to_json()},
          {"fold_accuracy", fold_accuracy},
          {"fold_macro_f1", fold_macro_f1},
          {"mean_accuracy", mean_accuracy},
          {"mean_macro_f1", mean_macro_f1},
          {"std_accuracy", std_accuracy},
          {"std_macro_f1", std_macro_f1},
          {"micro_f1", scores.micro_f1},
          {"pooled_macro_f1", scores.macro_f1},
          {"per_class", per_class},
          {"excluded_from_macro_f1", tag_list(scores.excluded)},
          {"absent_from_training", tag_list(absent_from_training)},
          {"class_order", std::vector<std::string>(kClassNames.begin(), kClassNames.end())},
          {"confusion", cm},
          {"n_samples", n_samples}};
}

CvReport CvReport::from_json(const json& j) {
  CvReport r;
  try {
    auto& c = r.config;
    c.algorithm = parse_algorithm(j.at("algorithm").get<std::string>());
    c.provenance = j.at("features").get<std::string>() == "latent" ? FeatureProvenance::latent : FeatureProvenance::geometric;
    std::string dr = j.at("dr_method").get<std::string>();
    if (dr.rfind("CAE", 0) == 0) dr = dr.size() > 4 ? dr.substr(4) : "none";
    const auto digits = dr.find_first_of("0123456789");
    c.dr = parse_dr_method(dr.substr(0, digits));
    c.n_components = j.at("n_components").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.classifier = ClassifierConfig::from_json(j.at("classifier_config"));
    r.fold_accuracy = j.at("fold_accuracy").get<std::vector<double>>();
    r.fold_macro_f1 = j.at("fold_macro_f1").get<std::vector<double>>();
    r.mean_accuracy = j.at("mean_accuracy").get<double>();
    r.mean_macro_f1 = j.at("mean_macro_f1").get<double>();
    r.std_accuracy = j.at("std_accuracy").get<double>();
    r.std_macro_f1 = j.at("std_macro_f1").get<double>();
    const auto& cm = j.at("confusion");
    if (cm.size() != kNumClasses) throw DataError("confusion matrix must be 14 x 14");
    for (int i = 0; i < kNumClasses; ++i) {
      if (cm[i].size() != kNumClasses) throw DataError("confusion matrix must be 14 x 14");
      for (int k = 0; k < kNumClasses; ++k) r.confusion.counts[i][k] = cm[i][k].get<long long>();
    }
    for (const auto& t : j.at("absent_from_training")) {
      auto tag = parse_class_tag(t.get<std::string>());
      if (!tag) throw DataError("unknown class tag in report");
      r.absent_from_training.push_back(*tag);
    }
    r.n_samples = j.at("n_samples").get<long long>();
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed report entry: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("malformed report entry: ") + e.what());
  }
  r.scores = class_scores(r.confusion);
  return r;
}

}  // namespace cowlab
