#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <set>

#include "cowlab/experiment.hpp"
#include "cowlab/geomfeat.hpp"
#include "cowlab/phantom.hpp"
#include "geom_fixtures.hpp"
#include "helpers.hpp"

using namespace cowlab;
using namespace geomfix;

namespace {

constexpr double kPi = std::numbers::pi;

std::vector<Vec3> arc(double r, double sweep, int n) {
  std::vector<Vec3> p;
  for (int i = 0; i < n; ++i) {
    const double t = sweep * i / (n - 1);
    p.push_back(Vec3(r * std::cos(t), r * std::sin(t), 0.0));
  }
  return p;
}

}  // namespace

TEST_SUITE("geomfeat") {
  TEST_CASE("order_branches sorts by radius then length") {
    Bifurcation b;
    b.branches = {straight(Vec3::Zero(), Vec3(1, 0, 0), 5, 1.0, 1.0), straight(Vec3::Zero(), Vec3(0, 1, 0), 5, 2.0, 2.0),
                  straight(Vec3::Zero(), Vec3(0, 0, 1), 5, 1.5, 1.5)};
    CHECK(branch_order(b) == std::array<int, 3>{1, 2, 0});
    b.branches = {straight(Vec3::Zero(), Vec3(1, 0, 0), 5, 1, 1), straight(Vec3::Zero(), Vec3(0, 1, 0), 9, 1, 1),
                  straight(Vec3::Zero(), Vec3(0, 0, 1), 7, 1, 1)};
    CHECK(branch_order(b) == std::array<int, 3>{1, 2, 0});
    const Bifurcation o = order_branches(b);
    CHECK(o.branches[0].length() == doctest::Approx(9));
    CHECK(o.branches[2].length() == doctest::Approx(5));
  }

  TEST_CASE("identical branches order by distal endpoint, independent of input order") {
    Bifurcation b;
    b.branches = {straight(Vec3::Zero(), Vec3(0, 1, 0), 5, 1, 1), straight(Vec3::Zero(), Vec3(1, 0, 0), 5, 1, 1),
                  straight(Vec3::Zero(), Vec3(0, 0, 1), 5, 1, 1)};
    const Bifurcation o = order_branches(b);
    // Endpoints (0,0,5) < (0,5,0) < (5,0,0) lexicographically.
    CHECK(o.branches[0].polyline.back().isApprox(Vec3(0, 0, 5)));
    CHECK(o.branches[1].polyline.back().isApprox(Vec3(0, 5, 0)));
    CHECK(o.branches[2].polyline.back().isApprox(Vec3(5, 0, 0)));
    std::swap(b.branches[0], b.branches[2]);
    const Bifurcation o2 = order_branches(b);
    for (int i = 0; i < 3; ++i) CHECK(o2.branches[i].polyline.back() == o.branches[i].polyline.back());
  }

  TEST_CASE("tortuosity of analytic curves") {
    CHECK(tortuosity({Vec3(0, 0, 0), Vec3(1, 1, 1), Vec3(2, 2, 2)}) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(tortuosity(arc(3.0, kPi, 2001)) == doctest::Approx(kPi / 2).epsilon(0.01));
    CHECK(tortuosity(arc(3.0, kPi / 2, 2001)) == doctest::Approx((kPi / 2) / std::sqrt(2.0)).epsilon(0.01));
    CHECK(tortuosity(arc(3.0, kPi / 2, 2001)) == doctest::Approx(1.1107).epsilon(0.01));
    CHECK_THROWS_AS(tortuosity({Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 0, 0)}), DataError);
  }

  TEST_CASE("branch tangent") {
    CHECK(branch_tangent(straight(Vec3(1, 2, 3), Vec3(1, 0, 0), 6, 1, 1)).isApprox(Vec3(1, 0, 0), 1e-12));
    std::mt19937_64 rng(12);
    for (int t = 0; t < 50; ++t) {
      const Bifurcation b = random_bifurcation(rng);
      for (const auto& br : b.branches) CHECK(branch_tangent(br).norm() == doctest::Approx(1.0).epsilon(1e-12));
    }
    // Planar arc rotated into a random plane.
    for (int t = 0; t < 20; ++t) {
      const Mat R = testutil::random_rotation(rng);
      BranchView br;
      for (const auto& p : arc(4.0, 2.0, 200)) {
        br.polyline.push_back(R * (p - Vec3(4, 0, 0)));
        br.radii.push_back(1.0);
      }
      const Vec3 normal = R.col(2);
      CHECK(std::abs(branch_tangent(br).dot(normal)) < 1e-9);
    }
    BranchView zero;
    zero.polyline = {Vec3::Zero(), Vec3::Zero()};
    zero.radii = {1, 1};
    CHECK_THROWS_AS(branch_tangent(zero), DataError);
  }

  TEST_CASE("symmetric planar Y") {
    const double r = 1.2;
    const Vec3 d0(-1, 0, 0), d1(std::cos(kPi / 3), std::sin(kPi / 3), 0), d2(std::cos(kPi / 3), -std::sin(kPi / 3), 0);
    Bifurcation b;
    b.center = Vec3(20, 20, 20);
    const double r0 = std::cbrt(2.0) * r;
    b.branches = {straight(b.center, d0, 8, r0, r0), straight(b.center, d1, 8, r, r), straight(b.center, d2, 8, r, r)};
    FeatureContext ctx;
    ctx.volume_extent = Vec3(40, 40, 40);
    ctx.all_centers = {b.center};
    const auto v = features(order_branches(b), ctx).values;
    CHECK(v[slot::angle01] == doctest::Approx(angle_between(d0, d1)).epsilon(1e-9));
    CHECK(v[slot::angle12] == doctest::Approx(angle_between(d1, d2)).epsilon(1e-9));
    CHECK(std::abs(v[slot::angle01] - 120.0) <= 0.5);
    CHECK(std::abs(v[slot::angle02] - 120.0) <= 0.5);
    CHECK(std::abs(v[slot::angle12] - 120.0) <= 0.5);
    CHECK(std::abs(v[slot::angle_sum] - 360.0) <= 1.0);
    for (int k = 0; k < 3; ++k) CHECK(std::abs(v[slot::branch(k, slot::tortuosity)] - 1.0) <= 1e-6);
    CHECK(std::abs(v[slot::murray_deviation]) <= 1e-9);
    CHECK(v[slot::asymmetry] == 0.0);
    CHECK(v[slot::planarity] == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(v[slot::norm_x] == doctest::Approx(0.5));
    CHECK(v[slot::nearest_bifurcation_distance] == 0.0);
  }

  TEST_CASE("value ranges hold on random bifurcations") {
    std::mt19937_64 rng(21);
    for (int t = 0; t < 200; ++t) {
      const Bifurcation b = order_branches(random_bifurcation(rng));
      const auto v = features(b, random_context(b, rng)).values;
      for (double x : v) CHECK(std::isfinite(x));
      for (int k = 0; k < 3; ++k) CHECK(v[slot::branch(k, slot::tortuosity)] >= 1.0 - 1e-9);
      for (int s : {slot::angle01, slot::angle02, slot::angle12}) {
        CHECK(v[s] >= 0.0);
        CHECK(v[s] <= 180.0);
      }
      for (int s = slot::radius_ratio10; s <= slot::tort_ratio21; ++s) CHECK(v[s] > 0.0);
      for (int s : {slot::norm_x, slot::norm_y, slot::norm_z}) {
        CHECK(v[s] >= 0.0);
        CHECK(v[s] <= 1.0);
      }
      CHECK(v[slot::asymmetry] >= -1.0);
      CHECK(v[slot::asymmetry] <= 1.0);
    }
  }

  TEST_CASE("rigid motion leaves all but the coordinate slots unchanged") {
    std::mt19937_64 rng(31);
    std::uniform_real_distribution<double> u(-15.0, 15.0);
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
      for (int s = 0; s < kNumGeomFeatures; ++s) {
        if (s == slot::norm_x || s == slot::norm_y || s == slot::norm_z) continue;
        INFO("slot " << s);
        CHECK(m[s] == doctest::Approx(a[s]).epsilon(1e-6));
      }
      // The coordinate slots follow the transformed center.
      const Vec3 rel = (f(b.center) - moved.volume_origin).cwiseQuotient(moved.volume_extent);
      CHECK(m[slot::norm_x] == doctest::Approx(std::clamp(rel.x(), 0.0, 1.0)).epsilon(1e-9));
      CHECK(m[slot::norm_y] == doctest::Approx(std::clamp(rel.y(), 0.0, 1.0)).epsilon(1e-9));
      CHECK(m[slot::norm_z] == doctest::Approx(std::clamp(rel.z(), 0.0, 1.0)).epsilon(1e-9));
    }
  }

  TEST_CASE("uniform scaling multiplies lengths and keeps shape slots") {
    std::mt19937_64 rng(41);
    std::uniform_real_distribution<double> u(1.0, 3.0);
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
      for (int k = 0; k < kNumGeomFeatures; ++k) {
        if (is_curvature_slot(k)) continue;
        INFO("slot " << k);
        const double expect = is_length_slot(k) ? s * a[k] : a[k];
        CHECK(m[k] == doctest::Approx(expect).epsilon(1e-6));
      }
    }
  }

  TEST_CASE("branch relabeling does not change features") {
    std::mt19937_64 rng(51);
    for (int t = 0; t < 100; ++t) {
      const Bifurcation b = random_bifurcation(rng);
      const FeatureContext ctx = random_context(b, rng);
      const auto ref = features(order_branches(b), ctx).values;
      std::array<int, 3> perm{0, 1, 2};
      while (std::next_permutation(perm.begin(), perm.end())) {
        Bifurcation p = b;
        for (int i = 0; i < 3; ++i) p.branches[i] = b.branches[perm[i]];
        CHECK(features(order_branches(p), ctx).values == ref);
      }
    }
  }

  TEST_CASE("Murray deviation and asymmetry follow their definitions") {
    Bifurcation b;
    b.center = Vec3(5, 5, 5);
    b.branches = {straight(b.center, Vec3(-1, 0, 0), 6, 2.0, 2.0), straight(b.center, Vec3(1, 1, 0), 6, 1.5, 1.5),
                  straight(b.center, Vec3(1, -1, 0), 6, 1.0, 1.0)};
    FeatureContext ctx;
    ctx.volume_extent = Vec3(10, 10, 10);
    const auto v = features(order_branches(b), ctx).values;
    CHECK(v[slot::murray_deviation] == doctest::Approx(std::abs(8.0 - 3.375 - 1.0) / 8.0).epsilon(1e-12));
    CHECK(v[slot::asymmetry] == doctest::Approx((2.25 - 1.0) / (2.25 + 1.0)).epsilon(1e-12));
    CHECK(v[slot::radius_ratio10] == doctest::Approx(0.75));
    CHECK(v[slot::branch(0, slot::taper)] == 0.0);
  }

  TEST_CASE("header lists 61 slots then label and id") {
    const std::string h = feature_csv_header();
    CHECK(h.rfind("slot_01,", 0) == 0);
    CHECK(h.find("slot_61,label,bif_id") != std::string::npos);
    CHECK(std::count(h.begin(), h.end(), ',') == 62);
  }

  TEST_CASE("wrong branch count is rejected") {
    Bifurcation b;
    b.branches = {straight(Vec3::Zero(), Vec3(1, 0, 0), 5, 1, 1)};
    CHECK_THROWS_AS(features(b, FeatureContext{}), DataError);
  }
}

TEST_SUITE("geomfeat_fuzz") {
  TEST_CASE("features are finite on every phantom bifurcation over 1000 seeds") {
    ExperimentConfig cfg;
    std::size_t rows = 0;
    for (int i = 0; i < 1000; ++i) {
      PhantomSpec spec = phantom_spec(cfg, i);
      const GroundTruth gt = realize(spec);
      const Volume3D v = rasterize(gt.graph, spec.raster, spec.rng_seed);
      const PhantomExtraction ex = extract_phantom(phantom_id(i), v, gt, cfg);
      rows += ex.rows.size();
      bool finite = true;
      for (const auto& r : ex.rows)
        for (double x : r.features) finite = finite && std::isfinite(x);
      CHECK(finite);
    }
    CHECK(rows > 1000);
  }
}
