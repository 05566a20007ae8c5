#include <doctest.h>

#include <map>
#include <random>
#include <set>

#include <nlohmann/json.hpp>

#include "cowlab/phantom.hpp"

using namespace cowlab;

namespace {

// BoI nodes that keep three non-aplastic incident arteries, read straight off
// the template wiring.
std::set<ClassTag> expected_labels(const PhantomSpec& spec, const std::map<std::string, ArteryState>& states) {
  std::map<std::string, int> degree;
  for (const auto& a : spec.arteries) {
    if (states.at(a.name) == ArteryState::aplastic) continue;
    ++degree[a.from_node];
    ++degree[a.to_node];
  }
  std::set<ClassTag> out;
  for (const auto& [node, tag] : spec.boi_labels)
    if (degree[node] == 3) out.insert(tag);
  return out;
}

std::set<ClassTag> labels_of(const GroundTruth& gt) {
  std::set<ClassTag> s;
  for (const auto& c : gt.labeled_centers) s.insert(c.label);
  return s;
}

int degree_at(const VesselGraph& g, const Vec3& p) {
  const auto deg = g.degrees();
  for (std::size_t i = 0; i < g.nodes.size(); ++i)
    if ((g.nodes[i].pos - p).norm() < 1e-9) return deg[i];
  return -1;
}

}  // namespace

TEST_SUITE("phantom") {
  TEST_CASE("template is deterministic and valid") {
    const PhantomSpec a = default_cow_template(), b = default_cow_template();
    CHECK(spec_to_json(a) == spec_to_json(b));
    CHECK_NOTHROW(a.validate());
    CHECK(a.boi_labels.size() == 13);
  }

  TEST_CASE("all-normal template yields 13 labeled degree-3 junctions") {
    const PhantomSpec spec = default_cow_template();
    const GroundTruth gt = realize(spec);
    CHECK(gt.labeled_centers.size() == 13);
    std::set<ClassTag> all;
    for (int i = 0; i < 13; ++i) all.insert(tag_from_index(i));
    CHECK(labels_of(gt) == all);
    for (const auto& c : gt.labeled_centers) CHECK(degree_at(gt.graph, c.pos) == 3);
    CHECK(gt.bn_centers.size() >= 20);
  }

  TEST_CASE("everything aplastic except BA leaves no labeled centers") {
    PhantomSpec spec = default_cow_template();
    for (auto& a : spec.arteries)
      if (a.name != "BA") a.state = ArteryState::aplastic;
    CHECK(realize(spec).labeled_centers.empty());
  }

  TEST_CASE("AcoA aplasia removes exactly the junctions the wiring predicts") {
    PhantomSpec spec = default_cow_template();
    spec.find_artery("AcoA")->state = ArteryState::aplastic;
    const GroundTruth gt = realize(spec);
    CHECK(labels_of(gt) == expected_labels(spec, gt.artery_states));
    CHECK(labels_of(gt).count(ClassTag::C) == 0);
    CHECK(labels_of(gt).count(ClassTag::D) == 0);
    CHECK(gt.labeled_centers.size() == 11);
  }

  TEST_CASE("random aplasia matches the wiring oracle and is monotone") {
    PhantomSpec base = default_cow_template();
    base.variability.p_aplasia = 0.5;
    for (std::uint64_t seed = 1; seed <= 40; ++seed) {
      base.rng_seed = seed;
      const GroundTruth gt = realize(base);
      CHECK(labels_of(gt) == expected_labels(base, gt.artery_states));
      for (const auto& c : gt.labeled_centers) CHECK(degree_at(gt.graph, c.pos) == 3);
      // Removing one more artery never adds a labeled center.
      PhantomSpec more = base;
      for (auto& a : more.arteries) {
        a.state = gt.artery_states.at(a.name);
        a.variable = false;
      }
      for (auto& a : more.arteries)
        if (a.state != ArteryState::aplastic && a.name != "BA") {
          a.state = ArteryState::aplastic;
          break;
        }
      CHECK(realize(more).labeled_centers.size() <= gt.labeled_centers.size());
    }
  }

  TEST_CASE("hypoplasia and aplasia are exclusive draws") {
    PhantomSpec spec = default_cow_template();
    spec.variability.p_hypoplasia = 1.0;
    const GroundTruth gt = realize(spec);
    for (const auto& a : spec.arteries)
      CHECK(gt.artery_states.at(a.name) == (a.variable ? ArteryState::hypoplastic : ArteryState::normal));
    spec.variability = {0.6, 0.6, 0.0, 0.0};
    CHECK_THROWS_AS(realize(spec), ConfigError);
  }

  TEST_CASE("same seed gives byte-identical ground truth") {
    PhantomSpec spec = default_cow_template();
    spec.variability = {0.2, 0.4, 0.5, 5.0};
    spec.rng_seed = 77;
    CHECK(ground_truth_to_json(realize(spec)).dump() == ground_truth_to_json(realize(spec)).dump());
    PhantomSpec other = spec;
    other.rng_seed = 78;
    CHECK(ground_truth_to_json(realize(spec)).dump() != ground_truth_to_json(realize(other)).dump());
  }

  TEST_CASE("straight tube rasterizes to the brute-force in-vessel set") {
    VesselGraph g;
    GraphEdge e;
    for (int q = 0; q <= 80; ++q) {
      e.points.push_back(Vec3(5.0 + 0.25 * q, 8.0, 8.0));
      e.radii.push_back(1.0);
    }
    g.nodes = {{0, e.points.front(), NodeKind::endpoint}, {1, e.points.back(), NodeKind::endpoint}};
    e.a = 0;
    e.b = 1;
    g.edges.push_back(e);
    RasterSpec r;
    r.dims = {64, 32, 32};
    r.spacing = Vec3(0.5, 0.5, 0.5);
    const Volume3D v = rasterize(g, r, 1);
    int inside = 0;
    for (int k = 0; k < 32; ++k)
      for (int j = 0; j < 32; ++j)
        for (int i = 0; i < 64; ++i) {
          const Vec3 c = v.position(i, j, k);
          bool near = false;
          for (const auto& p : e.points) near = near || (c - p).squaredNorm() <= 1.0;
          // Same set measured against the continuous segment.
          const double t = std::clamp(c.x(), 5.0, 25.0);
          const bool near_line = (c - Vec3(t, 8.0, 8.0)).squaredNorm() <= 1.0;
          CHECK(near == near_line);
          CHECK(v(i, j, k) == (near ? 1.0f : 0.0f));
          inside += near;
        }
    CHECK(inside > 0);
  }

  TEST_CASE("empty graph gives constant background") {
    RasterSpec r;
    r.dims = {8, 8, 8};
    r.background_intensity = 0.25;
    const Volume3D v = rasterize(VesselGraph{}, r, 3);
    for (float x : v.data()) CHECK(x == 0.25f);
  }

  TEST_CASE("rasterize is deterministic per seed and clamps to [0,1]") {
    PhantomSpec spec = default_cow_template();
    spec.raster.noise_sigma = 0.3;
    const GroundTruth gt = realize(spec);
    const Volume3D a = rasterize(gt.graph, spec.raster, 9), b = rasterize(gt.graph, spec.raster, 9);
    CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
    for (float x : a.data()) {
      CHECK(x >= 0.0f);
      CHECK(x <= 1.0f);
    }
  }

  TEST_CASE("geometry outside the grid is an error") {
    VesselGraph g;
    GraphEdge e;
    e.points = {Vec3(1, 1, 1), Vec3(100, 1, 1)};
    e.radii = {1.0, 1.0};
    g.edges.push_back(e);
    RasterSpec r;
    r.dims = {16, 16, 16};
    CHECK_THROWS_AS(rasterize(g, r, 0), DataError);
  }

  TEST_CASE("Catmull-Rom sampling keeps the step and both ends") {
    const std::vector<Vec3> ctrl = {Vec3(0, 0, 0), Vec3(3, 1, 0), Vec3(6, -1, 2), Vec3(9, 0, 1)};
    const auto [pts, params] = sample_catmull_rom(ctrl, 0.25);
    CHECK((pts.front() - ctrl.front()).norm() < 1e-9);
    CHECK((pts.back() - ctrl.back()).norm() < 1e-9);
    CHECK(pts.size() == params.size());
    for (std::size_t i = 1; i + 1 < pts.size(); ++i) CHECK((pts[i] - pts[i - 1]).norm() <= 0.25 + 1e-6);
  }

  TEST_CASE("ground truth survives a JSON round trip") {
    PhantomSpec spec = default_cow_template();
    spec.rng_seed = 4;
    spec.variability.p_aplasia = 0.3;
    const GroundTruth gt = realize(spec);
    const auto j = ground_truth_to_json(gt);
    const GroundTruth back = ground_truth_from_json(j.at("graph"), j.at("labels"));
    CHECK(back.labeled_centers.size() == gt.labeled_centers.size());
    CHECK(graph_to_json(back.graph) == graph_to_json(gt.graph));
  }
}
