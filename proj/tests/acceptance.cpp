#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "cowlab/cae.hpp"
#include "cowlab/classify.hpp"
#include "cowlab/dimred.hpp"
#include "cowlab/eval.hpp"
#include "cowlab/experiment.hpp"
#include "cowlab/geomfeat.hpp"
#include "cowlab/linalg.hpp"
#include "cowlab/phantom.hpp"
#include "cowlab/vesselgraph.hpp"
#include "geom_fixtures.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace cowlab;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// Collects sub-checks of one criterion.
struct Verdict {
  bool pass = true;
  std::vector<std::string> notes;

  void check(bool ok, const std::string& what) {
    if (!ok) pass = false;
    notes.push_back(std::string(ok ? "ok   " : "MISS ") + what);
  }
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream ss;
  ss.precision(prec);
  ss << std::fixed << v;
  return ss.str();
}

std::string sci(double v) {
  std::ostringstream ss;
  ss.precision(2);
  ss << std::scientific << v;
  return ss.str();
}

bool close_rel(double got, double want, double tol) {
  return std::abs(got - want) <= tol * std::max(1.0, std::abs(want));
}

int index_from_id(const std::string& id) { return std::stoi(id.substr(id.find('_') + 1)); }

Volume3D phantom_volume(const ExperimentConfig& cfg, int i) {
  const PhantomSpec spec = phantom_spec(cfg, i);
  return rasterize(realize(spec).graph, spec.raster, spec.rng_seed);
}

// ---- 1 ---------------------------------------------------------------------------------

Verdict pipeline_recovery(int jobs) {
  Verdict v;
  const auto t0 = Clock::now();
  ExperimentConfig cfg;
  cfg.variability = {0.0, 0.0, 0.0, 0.0};
  cfg.noise_sigma = 0.0;
  int detected = 0, labeled = 0, mask_mismatch = 0;
  std::vector<int> det(20, 0), mism(20, 0), lab(20, 0);
  std::vector<std::string> errors(20);
  std::vector<std::thread> pool;
  std::atomic<int> next{0};
  auto work = [&] {
    for (int i = next++; i < 20; i = next++) {
      try {
        const PhantomSpec spec = phantom_spec(cfg, i);
        const GroundTruth gt = realize(spec);
        const Volume3D vol = rasterize(gt.graph, spec.raster, spec.rng_seed);
        // In-vessel set: voxel centers inside the ball of any centerline sample.
        std::vector<char> inside(vol.size(), 0);
        for (const auto& e : gt.graph.edges)
          for (std::size_t q = 0; q < e.points.size(); ++q) {
            const Vec3& p = e.points[q];
            const double r = e.radii[q];
            Index3 lo, hi;
            for (int a = 0; a < 3; ++a) {
              lo[a] = std::max(0, static_cast<int>(std::floor((p[a] - r - vol.origin()[a]) / vol.spacing()[a])));
              hi[a] = std::min(vol.dims()[a] - 1, static_cast<int>(std::ceil((p[a] + r - vol.origin()[a]) / vol.spacing()[a])));
            }
            for (int k = lo[2]; k <= hi[2]; ++k)
              for (int j = lo[1]; j <= hi[1]; ++j)
                for (int ii = lo[0]; ii <= hi[0]; ++ii)
                  if ((vol.position(ii, j, k) - p).squaredNorm() <= r * r) inside[vol.index(ii, j, k)] = 1;
          }
        const SegmentationMask m = segment(vol, cfg.threshold);
        for (std::size_t x = 0; x < vol.size(); ++x) mism[i] += (m.data[x] != 0) != (inside[x] != 0);

        const PhantomExtraction ex = extract_phantom(phantom_id(i), vol, gt, cfg);
        const double tol = 2.0 * spec.raster.spacing.minCoeff();
        for (const auto& c : gt.labeled_centers) {
          bool near = false, right = false;
          for (const auto& r : ex.rows) {
            if ((r.center - c.pos).norm() > tol) continue;
            near = true;
            right = right || r.label == c.label;
          }
          det[i] += near;
          lab[i] += right;
        }
        if (gt.labeled_centers.size() != 13) errors[i] = "expected 13 labeled centers";
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  for (int t = 0; t < std::max(1, jobs); ++t) pool.emplace_back(work);
  for (auto& t : pool) t.join();
  for (int i = 0; i < 20; ++i) {
    detected += det[i];
    labeled += lab[i];
    mask_mismatch += mism[i];
    if (!errors[i].empty()) v.check(false, phantom_id(i) + ": " + errors[i]);
  }
  const double secs = seconds_since(t0);
  v.check(detected == 260, "BoI centers detected within 2 voxels: " + std::to_string(detected) + "/260");
  v.check(labeled == 260, "BoIs labeled correctly: " + std::to_string(labeled) + "/260");
  v.check(mask_mismatch == 0, "mask voxels differing from the in-vessel set: " + std::to_string(mask_mismatch));
  v.check(secs < 300.0, "runtime " + fmt(secs, 1) + " s (limit 300 s)");
  return v;
}

// ---- 2 ---------------------------------------------------------------------------------

Verdict feature_correctness() {
  using namespace geomfix;
  Verdict v;
  {
    const double r = 1.2, r0 = std::cbrt(2.0) * r;
    const double pi = std::numbers::pi;
    Bifurcation b;
    b.center = Vec3(20, 20, 20);
    b.branches = {straight(b.center, Vec3(-1, 0, 0), 8, r0, r0),
                  straight(b.center, Vec3(std::cos(pi / 3), std::sin(pi / 3), 0), 8, r, r),
                  straight(b.center, Vec3(std::cos(pi / 3), -std::sin(pi / 3), 0), 8, r, r)};
    FeatureContext ctx;
    ctx.volume_extent = Vec3(40, 40, 40);
    ctx.all_centers = {b.center};
    const auto f = features(order_branches(b), ctx).values;
    double worst_angle = 0.0, worst_tort = 0.0;
    for (int s : {slot::angle01, slot::angle02, slot::angle12}) worst_angle = std::max(worst_angle, std::abs(f[s] - 120.0));
    for (int k = 0; k < 3; ++k) worst_tort = std::max(worst_tort, std::abs(f[slot::branch(k, slot::tortuosity)] - 1.0));
    v.check(worst_angle <= 0.5, "symmetric Y angle deviation " + sci(worst_angle) + " deg");
    v.check(worst_tort <= 1e-6, "symmetric Y tortuosity deviation " + sci(worst_tort));
    v.check(std::abs(f[slot::murray_deviation]) <= 1e-9, "symmetric Y Murray deviation " + sci(f[slot::murray_deviation]));
  }
  {
    std::mt19937_64 rng(31);
    std::uniform_real_distribution<double> u(-15.0, 15.0);
    int bad = 0;
    for (int t = 0; t < 200; ++t) {
      const Bifurcation b = random_bifurcation(rng);
      const FeatureContext ctx = random_context(b, rng);
      const Mat R = testutil::random_rotation(rng);
      const Vec3 shift(u(rng), u(rng), u(rng));
      auto f = [&](const Vec3& p) -> Vec3 { return R * p + shift; };
      FeatureContext moved = ctx;
      for (auto& c : moved.all_centers) c = f(c);
      moved.tree_centroid = f(ctx.tree_centroid);
      moved.volume_origin = f(ctx.volume_origin);
      const auto a = features(order_branches(b), ctx).values;
      const auto m = features(order_branches(map_geometry(b, f)), moved).values;
      bool ok = true;
      for (int s = 0; s < kNumGeomFeatures; ++s) {
        if (s == slot::norm_x || s == slot::norm_y || s == slot::norm_z) continue;
        ok = ok && close_rel(m[s], a[s], 1e-6);
      }
      bad += !ok;
    }
    v.check(bad == 0, "rigid-motion invariance failures: " + std::to_string(bad) + "/200");
  }
  {
    std::mt19937_64 rng(41);
    std::uniform_real_distribution<double> u(1.0, 3.0);
    int bad = 0;
    for (int t = 0; t < 200; ++t) {
      const Bifurcation b = random_bifurcation(rng);
      const FeatureContext ctx = random_context(b, rng);
      const double s = u(rng);
      auto f = [&](const Vec3& p) -> Vec3 { return s * p; };
      FeatureContext scaled = ctx;
      for (auto& c : scaled.all_centers) c = f(c);
      scaled.tree_centroid = f(ctx.tree_centroid);
      scaled.volume_extent = s * ctx.volume_extent;
      const auto a = features(order_branches(b), ctx).values;
      const auto m = features(order_branches(map_geometry(b, f, s)), scaled).values;
      bool ok = true;
      for (int k = 0; k < kNumGeomFeatures; ++k) {
        if (is_curvature_slot(k)) continue;
        ok = ok && close_rel(m[k], is_length_slot(k) ? s * a[k] : a[k], 1e-6);
      }
      bad += !ok;
    }
    v.check(bad == 0, "scaling invariance failures: " + std::to_string(bad) + "/200");
  }
  return v;
}

// ---- 3 ---------------------------------------------------------------------------------

Verdict dr_oracles() {
  Verdict v;
  {
    std::mt19937_64 rng(5);
    double worst = 0.0;
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
        const double want = m.all_eigenvalues.tail(6 - k).sum();
        worst = std::max(worst, std::abs(mse - want) / want);
      }
    }
    v.check(worst <= 1e-6, "PCA truncation worst relative error " + sci(worst) + " over 50 matrices");
  }
  {
    std::mt19937_64 rng(6);
    Mat x = testutil::random_matrix(400, 2, rng, 0.1);
    std::vector<ClassTag> y;
    for (int i = 0; i < 400; ++i) {
      if (i >= 200) x(i, 0) += 1.0;
      y.push_back(i < 200 ? ClassTag::A : ClassTag::B);
    }
    const LdaModel m = lda_fit(x, y, 1);
    // Best 1D threshold on the projected values.
    std::vector<std::pair<double, bool>> z;
    for (int i = 0; i < 400; ++i) z.push_back({lda_transform(m, Vec(x.row(i).transpose()))(0), i >= 200});
    std::sort(z.begin(), z.end());
    int best = 0;
    for (int cut = 0; cut <= 400; ++cut) {
      int agree = 0;
      for (int i = 0; i < 400; ++i) agree += (i >= cut) == z[static_cast<std::size_t>(i)].second;
      best = std::max({best, agree, 400 - agree});
    }
    v.check(best == 400, "LDA two-blob 1D separation " + fmt(100.0 * best / 400.0, 2) + "%");
  }
  {
    const double r = 5.0, sweep = 2.0 * std::numbers::pi / 3.0;
    const int n = 120;
    Mat x(n, 2);
    for (int i = 0; i < n; ++i) x.row(i) << r * std::cos(sweep * i / (n - 1)), r * std::sin(sweep * i / (n - 1));
    const IsomapModel m = isomap_fit(x, 1, 6);
    double worst = 0.0;
    for (int i = 0; i < n; i += 7)
      for (int j = i + 11; j < n; j += 13) {
        const double arc = r * sweep * (j - i) / (n - 1);
        worst = std::max(worst, std::abs(std::abs(m.embedding(i, 0) - m.embedding(j, 0)) - arc) / arc);
      }
    v.check(worst <= 0.02, "Isomap arc worst relative error " + fmt(worst, 5));
  }
  {
    std::mt19937_64 rng(1);
    double worst = 0.0;
    for (int t = 0; t < 200; ++t) {
      const Mat g = testutil::random_matrix(3, 3, rng);
      const Mat a = 0.5 * (g + g.transpose());
      const auto roots = oracle::cubic_eigenvalues(a);
      const SymmetricEigen e = jacobi_eigen(a);
      for (int i = 0; i < 3; ++i) worst = std::max(worst, std::abs(e.values(i) - roots[static_cast<std::size_t>(i)]));
    }
    v.check(worst <= 1e-10, "3x3 eigenvalues vs cubic roots, worst " + sci(worst));
  }
  return v;
}

// ---- 4 ---------------------------------------------------------------------------------

Verdict classifier_oracles() {
  Verdict v;
  {
    LabeledDataset ds;
    ds.x.resize(4, 2);
    ds.x << 0, 0, 1, 1, 0, 1, 1, 0;
    ds.y = {ClassTag::A, ClassTag::A, ClassTag::B, ClassTag::B};
    const auto m = fit(Algorithm::DT, ClassifierConfig{}, ds, 0);
    v.check(m.predict_batch(ds.x) == ds.y, "DT on XOR");
  }
  {
    std::mt19937_64 rng(9);
    const Mat x = testutil::random_matrix(5, 4, rng);
    const std::vector<ClassTag> y = {ClassTag::A, ClassTag::B, ClassTag::C, ClassTag::A, ClassTag::BN};
    double worst = 0.0;
    for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) worst = std::max(worst, mlp_gradient_check(x, y, 6, seed));
    v.check(worst < 1e-4, "MLP gradient check " + sci(worst));
  }
  {
    std::mt19937_64 rng(8);
    CaeArchitecture toy;
    toy.input_side = 8;
    toy.channels = {2, 3};
    toy.latent_dim = 5;
    std::uniform_real_distribution<double> u(0.0, 1.0), b(-0.2, 0.2);
    auto rv = [&](Eigen::Index n) {
      CaeVec<double> x(n);
      for (auto& e : x) e = u(rng);
      return x;
    };
    double worst = 0.0;
    for (std::uint64_t seed : {2ULL, 3ULL}) {
      CaeNet<double> net = cae_init<double>(toy, seed);
      for (std::size_t i = 1; i < net.slots.size(); i += 2)
        for (auto& w : net.tensor(i).reshaped()) w = b(rng);
      worst = std::max(worst, cae_gradient_check(net, {rv(512), rv(512)}, 1e-6));
    }
    v.check(worst < 1e-4, "CAE gradient check " + sci(worst));
  }
  {
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    int errors = 0;
    for (int t = 0; t < 20; ++t) {
      const double ang = u(rng) * std::numbers::pi;
      const Eigen::Vector2d n(std::cos(ang), std::sin(ang)), tv(-std::sin(ang), std::cos(ang));
      LabeledDataset ds;
      ds.x.resize(40, 2);
      for (int i = 0; i < 40; ++i) {
        const double side = i < 20 ? 1.0 : -1.0;
        ds.x.row(i) = (side * (0.5 + 2.0 * std::abs(u(rng))) * n + 4.0 * u(rng) * tv).transpose();
        ds.y.push_back(i < 20 ? ClassTag::A : ClassTag::B);
      }
      ClassifierConfig cfg;
      cfg.svm_kernel = SvmKernel::linear;
      cfg.svm_c = 100.0;
      const auto pred = fit(Algorithm::SVM, cfg, ds, 0).predict_batch(ds.x);
      for (int i = 0; i < 40; ++i) errors += pred[static_cast<std::size_t>(i)] != ds.y[static_cast<std::size_t>(i)];
    }
    v.check(errors == 0, "linear SVM training errors on separable sets: " + std::to_string(errors));
  }
  {
    std::mt19937_64 rng(7);
    const Mat means = testutil::random_matrix(4, 5, rng);
    LabeledDataset ds;
    ds.x = testutil::random_matrix(120, 5, rng);
    for (int i = 0; i < 120; ++i) {
      ds.x.row(i) += means.row(i / 30);
      ds.y.push_back(tag_from_index(i / 30));
    }
    ClassifierConfig cfg;
    cfg.rf_n_trees = 1;
    const std::uint64_t seed = 99;
    const auto rf = fit(Algorithm::RF, cfg, ds, seed);
    const ForestTreeStream s = forest_tree_stream(seed, 0, ds.size());
    std::mt19937_64 frng(s.feature_seed);
    TreeOptions opt;
    opt.max_features = 3;
    const DecisionTree tree = fit_tree(ds.x, ds.y, s.bootstrap, opt, &frng);
    bool same = std::get<RfModel>(rf.model()).trees.at(0).nodes.size() == tree.nodes.size();
    const Mat q = testutil::random_matrix(500, 5, rng, 3.0);
    for (Eigen::Index i = 0; i < q.rows() && same; ++i)
      same = rf.predict(q.row(i).transpose()) == tree.predict(q.row(i).transpose());
    v.check(same, "one-tree forest equals the tree on its shared bootstrap");
  }
  return v;
}

// ---- 5 and 6 -----------------------------------------------------------------------------

struct CorpusRun {
  ExperimentConfig cfg;
  Corpus corpus;
  LabeledDataset data;
  FoldPlan plan;
  std::vector<CvReport> dt_reports;  // in cfg.dr order
  double extract_seconds = 0.0;
};

CorpusRun run_corpus(int jobs) {
  CorpusRun r;
  r.cfg.classifiers = {Algorithm::DT};
  const auto t0 = Clock::now();
  r.corpus = build_corpus(r.cfg, jobs);
  mark_balanced(r.corpus, balance_seed(r.cfg));
  r.extract_seconds = seconds_since(t0);
  r.data = balanced_geometric_dataset(r.corpus.rows);
  r.plan = stratified_folds(r.data.y, r.cfg.folds, fold_seed(r.cfg));
  r.dt_reports = run_geometric(r.cfg, r.data, r.plan, jobs);
  return r;
}

Verdict desk_experiment(const CorpusRun& r, double secs) {
  Verdict v;
  int bois = 0;
  for (auto t : r.data.y) bois += t != ClassTag::BN;
  v.check(true, "balanced dataset " + std::to_string(r.data.y.size()) + " rows (" + std::to_string(bois) +
                    " BoIs); matched " + std::to_string(r.corpus.matched_bois) + "/" +
                    std::to_string(r.corpus.ground_truth_bois) + " ground-truth BoIs");
  std::map<DrMethod, const CvReport*> by;
  for (const auto& rep : r.dt_reports) {
    by[rep.config.dr] = &rep;
    v.notes.push_back("     " + rep.config.label() + " accuracy " + fmt(rep.mean_accuracy) + " macro-F1 " +
                      fmt(rep.mean_macro_f1));
  }
  const CvReport& lda = *by.at(DrMethod::lda);
  const CvReport& pca = *by.at(DrMethod::pca);
  const CvReport& iso = *by.at(DrMethod::isomap);
  v.check(lda.mean_accuracy >= 0.80, "LDA-8 + DT accuracy " + fmt(lda.mean_accuracy) + " >= 0.80");
  v.check(lda.mean_macro_f1 >= 0.78, "LDA-8 + DT macro-F1 " + fmt(lda.mean_macro_f1) + " >= 0.78");
  v.check(lda.mean_accuracy > pca.mean_accuracy && pca.mean_accuracy > iso.mean_accuracy,
          "ordering LDA > PCA > Isomap on DT accuracy: " + fmt(lda.mean_accuracy) + " / " + fmt(pca.mean_accuracy) +
              " / " + fmt(iso.mean_accuracy));
  v.check(secs < 1800.0, "runtime " + fmt(secs, 1) + " s (limit 1800 s)");
  return v;
}

Verdict cae_analogue(const CorpusRun& r, int jobs) {
  Verdict v;
  ExperimentConfig cfg = r.cfg;
  const auto t0 = Clock::now();
  const auto patches = balanced_patches(
      r.corpus.rows, [&](const std::string& id) { return phantom_volume(cfg, index_from_id(id)); },
      cfg.cae_arch.input_side);
  const auto subset = cae_training_subset(cfg, patches);
  const CaeTrainConfig tc = cae_train_config(cfg);
  const CaeModel model = train_cae(cfg.cae_arch, subset, tc);
  const LabeledDataset latents = encode_dataset(model, patches);
  const CvReport cae_dt = run_latent(cfg, latents, r.plan, jobs).at(0);
  const CvReport* geo_dt = nullptr;
  for (const auto& rep : r.dt_reports)
    if (rep.config.dr == DrMethod::lda) geo_dt = &rep;
  if (!geo_dt) throw DataError("no LDA run to compare against");
  v.check(subset.size() >= 500 && tc.epochs <= 50,
          "trained on " + std::to_string(subset.size()) + " patches for " + std::to_string(tc.epochs) +
              " epochs, final MSE " + fmt(model.loss_log.back(), 5) + " (" + fmt(seconds_since(t0), 0) + " s)");
  v.check(cae_dt.mean_accuracy >= 0.70, "CAE latent + DT accuracy " + fmt(cae_dt.mean_accuracy) + " >= 0.70 (macro-F1 " +
                                            fmt(cae_dt.mean_macro_f1) + ")");
  v.check(geo_dt->mean_accuracy >= cae_dt.mean_accuracy, "geometric " + geo_dt->config.label() + " accuracy " +
                                                             fmt(geo_dt->mean_accuracy) + " >= CAE-DT " +
                                                             fmt(cae_dt.mean_accuracy));

  // Single-patch overfit on a noiseless template bifurcation at corpus intensities. Raw intensities are
  // already in [0,1]; percentile normalization of a noiseless volume maps everything to zero.
  PhantomSpec spec = default_cow_template();
  spec.raster.vessel_intensity = cfg.vessel_intensity;
  spec.raster.background_intensity = cfg.background_intensity;
  const GroundTruth gt = realize(spec);
  const Volume3D vol = rasterize(gt.graph, spec.raster, spec.rng_seed);
  const Patch3D one = extract_patch(vol, vol.nearest_voxel(gt.labeled_centers.front().pos), cfg.cae_arch.input_side);
  CaeTrainConfig oc = tc;
  oc.epochs = 500;
  const auto t1 = Clock::now();
  const CaeModel over = train_cae(cfg.cae_arch, {one}, oc);
  v.check(over.loss_log.back() < 1e-3, "single-patch 500-epoch MSE " + fmt(over.loss_log.back(), 6) + " < 1e-3 (" +
                                           fmt(seconds_since(t1), 0) + " s)");
  return v;
}

// ---- 7 ---------------------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Verdict protocol_identities(const CorpusRun* corpus, const fs::path& scratch) {
  Verdict v;
  // Stratification on random label sets and on the corpus plan.
  {
    std::mt19937_64 rng(4);
    std::uniform_int_distribution<int> lab(0, kNumClasses - 1), size(20, 400), kk(2, 12);
    int bad = 0;
    auto within_one = [](const FoldPlan& plan, const std::vector<ClassTag>& y) {
      std::set<ClassTag> tags(y.begin(), y.end());
      std::vector<int> seen(y.size(), 0);
      for (const auto& f : plan.folds)
        for (auto i : f) ++seen[static_cast<std::size_t>(i)];
      if (std::any_of(seen.begin(), seen.end(), [](int s) { return s != 1; })) return false;
      for (auto t : tags) {
        int lo = std::numeric_limits<int>::max(), hi = 0;
        for (const auto& f : plan.folds) {
          int c = 0;
          for (auto i : f) c += y[static_cast<std::size_t>(i)] == t;
          lo = std::min(lo, c);
          hi = std::max(hi, c);
        }
        if (hi - lo > 1) return false;
      }
      return true;
    };
    for (int t = 0; t < 200; ++t) {
      std::vector<ClassTag> y(static_cast<std::size_t>(size(rng)));
      for (auto& x : y) x = tag_from_index(lab(rng));
      bad += !within_one(stratified_folds(y, kk(rng), static_cast<std::uint64_t>(t)), y);
    }
    if (corpus) bad += !within_one(corpus->plan, corpus->data.y);
    v.check(bad == 0, "stratification within-1 and partition failures: " + std::to_string(bad));
  }

  // Leakage audit and confusion identities on a blob problem with every DR.
  {
    std::mt19937_64 rng(9);
    LabeledDataset ds;
    ds.x = testutil::random_matrix(140, 6, rng);
    for (int i = 0; i < 140; ++i) {
      ds.x(i, i % 6) += 3.0 * (i % 7);
      ds.y.push_back(i % 7 == 6 ? ClassTag::BN : tag_from_index(i % 7));
    }
    const FoldPlan plan = stratified_folds(ds.y, 5, 2);
    int leaks = 0, identity_failures = 0;
    for (auto [dr, k] : std::vector<std::pair<DrMethod, int>>{{DrMethod::lda, 4}, {DrMethod::pca, 3}, {DrMethod::isomap, 3}}) {
      PipelineConfig pc;
      pc.dr = dr;
      pc.n_components = k;
      std::vector<FittedPipeline> fitted;
      const CvReport rep = cross_validate(pc, ds, plan, 1, &fitted);
      for (std::size_t f = 0; f < plan.folds.size(); ++f) {
        LabeledDataset poisoned = ds;
        for (auto i : plan.folds[f]) poisoned.x.row(i).setConstant(-1e6 - static_cast<double>(i));
        std::vector<FittedPipeline> refit;
        cross_validate(pc, poisoned, plan, 1, &refit);
        leaks += refit[f].reducer.to_json() != fitted[f].reducer.to_json() ||
                 refit[f].model.to_json() != fitted[f].model.to_json();
      }
      const auto& cm = rep.confusion;
      identity_failures += cm.total() != static_cast<long long>(ds.y.size());
      identity_failures += std::abs(cm.accuracy() - static_cast<double>(cm.trace()) / cm.total()) > 1e-12;
      double macro = 0.0;
      int present = 0;
      for (int c = 0; c < kNumClasses; ++c) {
        long long row = 0, col = 0;
        for (int j = 0; j < kNumClasses; ++j) {
          row += cm.counts[c][j];
          col += cm.counts[j][c];
        }
        if (row == 0) continue;
        const double tp = static_cast<double>(cm.counts[c][c]);
        const double p = col ? tp / col : 0.0, rc = tp / row;
        identity_failures += std::abs(rep.scores.recall[c] - rc) > 1e-12;
        macro += (p + rc) > 0 ? 2 * p * rc / (p + rc) : 0.0;
        ++present;
      }
      identity_failures += std::abs(rep.scores.macro_f1 - macro / present) > 1e-12;
    }
    v.check(leaks == 0, "fold fits that changed when only their test rows changed: " + std::to_string(leaks));
    v.check(identity_failures == 0, "confusion-matrix identity failures: " + std::to_string(identity_failures));
  }

  // Whole-pipeline rerun, single- and multi-threaded, must match byte for byte.
  {
    auto run = [&](const fs::path& dir, int jobs) {
      ExperimentConfig c;
      c.output_dir = dir;
      c.jobs = jobs;
      c.phantom_count = 6;
      c.folds = 3;
      c.pipelines = PipelineToggle::geometric;
      c.classifier.rf_n_trees = 20;
      c.classifier.mlp_max_epochs = 50;
      cmd_phantom(c, {});
      cmd_extract(c, {});
      cmd_run(c, {});
    };
    fs::remove_all(scratch);
    run(scratch / "a", 1);
    run(scratch / "b", 2);
    int differing = 0;
    for (const fs::path rel : {fs::path("extract/features.csv"), fs::path("extract/patches.bin"),
                               fs::path("run/cv_reports.json"), fs::path("report/summary.csv")}) {
      const std::string a = slurp(scratch / "a" / rel), b = slurp(scratch / "b" / rel);
      differing += a.empty() || a != b;
    }
    for (const auto& e : fs::directory_iterator(scratch / "a" / "report"))
      differing += slurp(e.path()) != slurp(scratch / "b" / "report" / e.path().filename());
    v.check(differing == 0, "artifacts differing between reruns: " + std::to_string(differing));
    fs::remove_all(scratch);
  }
  if (corpus) {
    const CvReport again = cross_validate(corpus->dt_reports.front().config, corpus->data, corpus->plan, 1);
    v.check(again.to_json().dump() == corpus->dt_reports.front().to_json().dump(),
            "corpus " + again.config.label() + " rerun is identical");
  }
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Runs the acceptance criteria and prints one PASS/FAIL line per criterion"};
  std::vector<int> only;
  int jobs = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  bool verbose = true;
  fs::path scratch = fs::temp_directory_path() / "cowlab_acceptance";
  app.add_option("--only", only, "Criteria to run (default all)")->check(CLI::Range(1, 7));
  app.add_option("-j,--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);
  app.add_option("--scratch", scratch, "Scratch directory for the rerun check");
  app.add_flag("!--brief", verbose, "Only print the verdict lines");
  CLI11_PARSE(app, argc, argv);
  auto wanted = [&](int c) { return only.empty() || std::find(only.begin(), only.end(), c) != only.end(); };

  const char* names[] = {"",
                         "pipeline recovery",
                         "feature correctness",
                         "DR oracles",
                         "classifier oracles",
                         "desk-scale experiment",
                         "CAE analogue",
                         "protocol identities"};
  std::map<int, Verdict> verdicts;
  auto run = [&](int c, const std::function<Verdict()>& f) {
    if (!wanted(c)) return;
    const auto t0 = Clock::now();
    Verdict v;
    try {
      v = f();
    } catch (const std::exception& e) {
      v.check(false, std::string("exception: ") + e.what());
    }
    if (verbose) {
      std::cout << "criterion " << c << " (" << names[c] << ", " << fmt(seconds_since(t0), 1) << " s)\n";
      for (const auto& n : v.notes) std::cout << "  " << n << "\n";
      std::cout.flush();
    }
    verdicts[c] = v;
  };

  run(1, [&] { return pipeline_recovery(jobs); });
  run(2, feature_correctness);
  run(3, dr_oracles);
  run(4, classifier_oracles);

  std::optional<CorpusRun> corpus;
  if (wanted(5) || wanted(6) || wanted(7)) {
    const auto t0 = Clock::now();
    try {
      corpus = run_corpus(jobs);
    } catch (const std::exception& e) {
      std::cerr << "corpus build failed: " << e.what() << "\n";
    }
    const double secs = seconds_since(t0);
    run(5, [&] {
      if (!corpus) throw DataError("no corpus");
      return desk_experiment(*corpus, secs);
    });
  }
  run(6, [&] {
    if (!corpus) throw DataError("no corpus");
    return cae_analogue(*corpus, jobs);
  });
  run(7, [&] { return protocol_identities(corpus ? &*corpus : nullptr, scratch); });

  bool all = true;
  std::cout << "\n";
  for (const auto& [c, v] : verdicts) {
    std::cout << (v.pass ? "PASS" : "FAIL") << "  criterion " << c << ": " << names[c] << "\n";
    all = all && v.pass;
  }
  return all ? 0 : 1;
}
