#include "cowlab/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <set>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "cow_template_data.hpp"

namespace cowlab {

using nlohmann::json;

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

json vec_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

Vec3 vec_from(const json& j) {
  if (!j.is_array() || j.size() != 3) throw ConfigError("expected a 3-vector");
  return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}

ArteryState state_from_string(const std::string& s) {
  if (s == "normal") return ArteryState::normal;
  if (s == "hypoplastic") return ArteryState::hypoplastic;
  if (s == "aplastic") return ArteryState::aplastic;
  throw ConfigError("unknown artery state: " + s);
}

Vec3 catmull_rom(const Vec3& p0, const Vec3& p1, const Vec3& p2, const Vec3& p3, double t) {
  const double t2 = t * t, t3 = t2 * t;
  return 0.5 * ((2.0 * p1) + (-p0 + p2) * t + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t2 +
                (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * t3);
}

Vec3 any_perpendicular(const Vec3& d) {
  Vec3 a = std::abs(d.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
  return d.cross(a).normalized();
}

/// Working edge during realize(): named endpoints, dense samples.
struct WorkEdge {
  std::string from, to;
  std::vector<Vec3> points;
  std::vector<double> radii;
};

double interp_radius(const std::vector<double>& profile, double t) {
  const double tc = std::clamp(t, 0.0, static_cast<double>(profile.size() - 1));
  const auto i = std::min(static_cast<std::size_t>(tc), profile.size() - 2);
  const double f = tc - static_cast<double>(i);
  return profile[i] * (1.0 - f) + profile[i + 1] * f;
}

bool inside_box(const Vec3& p, double margin, const Vec3& lo, const Vec3& hi) {
  return (p.array() >= lo.array() + margin).all() && (p.array() <= hi.array() - margin).all();
}

class DistalGrower {
 public:
  DistalGrower(const PhantomSpec& spec, std::vector<WorkEdge>& edges, std::mt19937_64& rng)
      : spec_(spec), edges_(edges), rng_(rng) {
    lo_ = Vec3::Zero();
    hi_ = Vec3(spec.raster.dims[0] * spec.raster.spacing.x(), spec.raster.dims[1] * spec.raster.spacing.y(),
               spec.raster.dims[2] * spec.raster.spacing.z());
  }

  void grow(const std::string& node, const Vec3& tip, const Vec3& direction, double radius, int level,
            std::size_t parent_edge) {
    const DistalSpec& ds = spec_.distal;
    if (level > ds.levels) return;
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (int attempt = 0; attempt < ds.max_attempts; ++attempt) {
      const double alpha = (ds.angle_min_deg + (ds.angle_max_deg - ds.angle_min_deg) * unit(rng_)) * kDeg;
      const double roll = 2.0 * std::numbers::pi * unit(rng_);
      const Vec3 perp = Eigen::AngleAxisd(roll, direction) * any_perpendicular(direction);
      const double child_radius = std::max(radius * ds.radius_decay, spec_.min_radius_mm);
      std::array<WorkEdge, 2> children;
      std::array<Vec3, 2> child_dirs;
      for (int c = 0; c < 2; ++c) {
        const double sign = c == 0 ? 1.0 : -1.0;
        const Vec3 dir = (std::cos(alpha / 2) * direction + sign * std::sin(alpha / 2) * perp).normalized();
        const double len = ds.length_mm * std::pow(ds.length_decay, level - 1) * (0.85 + 0.3 * unit(rng_));
        const double bend = (-15.0 + 30.0 * unit(rng_)) * kDeg;
        const Vec3 bend_axis = dir.cross(perp).normalized();
        const Vec3 dir_mid = Eigen::AngleAxisd(bend / 2, bend_axis) * dir;
        const Vec3 dir_end = Eigen::AngleAxisd(bend, bend_axis) * dir;
        std::vector<Vec3> ctrl{tip, tip + dir * (len / 3.0), tip + dir * (len / 3.0) + dir_mid * (len / 3.0),
                               tip + dir * (len / 3.0) + dir_mid * (len / 3.0) + dir_end * (len / 3.0)};
        auto [pts, params] = sample_catmull_rom(ctrl, spec_.sample_step_mm);
        WorkEdge e;
        e.from = node;
        e.to = node + (c == 0 ? ".a" : ".b");
        e.points = std::move(pts);
        e.radii.assign(e.points.size(), child_radius);
        children[c] = std::move(e);
        child_dirs[c] = dir_end;
      }
      if (!fits(children[0], radius, parent_edge) || !fits(children[1], radius, parent_edge)) continue;
      const std::size_t first = edges_.size();
      edges_.push_back(children[0]);
      edges_.push_back(children[1]);
      for (int c = 0; c < 2; ++c) {
        const WorkEdge& e = edges_[first + c];
        grow(e.to, e.points.back(), child_dirs[c], child_radius, level + 1, first + c);
      }
      return;
    }
  }

 private:
  bool fits(const WorkEdge& child, double parent_radius, std::size_t parent_edge) const {
    const double r = child.radii.front();
    const double clearance = spec_.distal.clearance_mm;
    double s = 0.0;
    for (std::size_t i = 0; i < child.points.size(); ++i) {
      if (i > 0) s += (child.points[i] - child.points[i - 1]).norm();
      const Vec3& p = child.points[i];
      if (!inside_box(p, r + clearance, lo_, hi_)) return false;
      if (s < parent_radius + 0.5) continue;
      for (std::size_t e = 0; e < edges_.size(); ++e) {
        if (e == parent_edge) continue;
        const WorkEdge& other = edges_[e];
        for (std::size_t q = 0; q < other.points.size(); ++q) {
          const double limit = r + other.radii[q] + clearance;
          if ((other.points[q] - p).squaredNorm() < limit * limit) return false;
        }
      }
    }
    return true;
  }

  const PhantomSpec& spec_;
  std::vector<WorkEdge>& edges_;
  std::mt19937_64& rng_;
  Vec3 lo_, hi_;
};

}  // namespace

std::string to_string(ArteryState s) {
  switch (s) {
    case ArteryState::normal: return "normal";
    case ArteryState::hypoplastic: return "hypoplastic";
    case ArteryState::aplastic: return "aplastic";
  }
  return "normal";
}

const NodeSpec* PhantomSpec::find_node(const std::string& name) const {
  for (const auto& n : nodes)
    if (n.name == name) return &n;
  return nullptr;
}

ArterySpec* PhantomSpec::find_artery(const std::string& name) {
  for (auto& a : arteries)
    if (a.name == name) return &a;
  return nullptr;
}

void PhantomSpec::validate() const {
  if (boi_labels.size() != kNumBoiClasses) throw ConfigError("phantom spec needs exactly 13 BoI labels");
  std::set<ClassTag> tags;
  for (const auto& [node, tag] : boi_labels) {
    if (!find_node(node)) throw ConfigError("BoI label refers to unknown node: " + node);
    if (tag == ClassTag::BN) throw ConfigError("BoI labels must be A..M");
    tags.insert(tag);
  }
  if (tags.size() != kNumBoiClasses) throw ConfigError("BoI labels must be distinct");
  for (const auto& a : arteries) {
    if (a.control_points.size() < 4) throw ConfigError("artery " + a.name + " needs >= 4 control points");
    if (a.control_points.size() != a.radius_profile.size())
      throw ConfigError("artery " + a.name + ": control point and radius counts differ");
    if (a.state != ArteryState::aplastic)
      for (double r : a.radius_profile)
        if (!(r > 0.0)) throw ConfigError("artery " + a.name + ": radii must be positive");
    if (!find_node(a.from_node) || !find_node(a.to_node))
      throw ConfigError("artery " + a.name + " references an unknown node");
  }
  const auto& v = variability;
  auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!prob(v.p_hypoplasia) || !prob(v.p_aplasia) || v.p_hypoplasia + v.p_aplasia > 1.0)
    throw ConfigError("variability probabilities must lie in [0,1] and sum to <= 1");
  if (v.jitter_sigma_mm < 0.0 || v.global_rotation_max_deg < 0.0)
    throw ConfigError("jitter and rotation bounds must be non-negative");
  if (raster.dims[0] <= 0 || raster.dims[1] <= 0 || raster.dims[2] <= 0 || !(raster.spacing.array() > 0).all())
    throw ConfigError("raster dims and spacing must be positive");
  if (raster.noise_sigma < 0.0) throw ConfigError("noise sigma must be non-negative");
  if (!(sample_step_mm > 0.0) || !(hypoplasia_factor > 0.0)) throw ConfigError("invalid sampling parameters");
  if (distal.levels < 0 || distal.angle_min_deg > distal.angle_max_deg) throw ConfigError("invalid distal spec");
}

std::pair<std::vector<Vec3>, std::vector<double>> sample_catmull_rom(const std::vector<Vec3>& control, double step) {
  if (control.size() < 2) throw DataError("spline needs >= 2 control points");
  const std::size_t n = control.size();
  auto cp = [&](std::ptrdiff_t i) -> Vec3 {
    if (i < 0) return 2.0 * control[0] - control[1];
    if (i >= static_cast<std::ptrdiff_t>(n)) return 2.0 * control[n - 1] - control[n - 2];
    return control[static_cast<std::size_t>(i)];
  };
  constexpr int kDense = 64;
  std::vector<Vec3> dense;
  std::vector<double> dense_t;
  for (std::size_t s = 0; s + 1 < n; ++s) {
    const auto i = static_cast<std::ptrdiff_t>(s);
    for (int q = (s == 0 ? 0 : 1); q <= kDense; ++q) {
      const double t = static_cast<double>(q) / kDense;
      dense.push_back(catmull_rom(cp(i - 1), cp(i), cp(i + 1), cp(i + 2), t));
      dense_t.push_back(static_cast<double>(s) + t);
    }
  }
  std::vector<double> cum(dense.size(), 0.0);
  for (std::size_t i = 1; i < dense.size(); ++i) cum[i] = cum[i - 1] + (dense[i] - dense[i - 1]).norm();
  const double total = cum.back();

  std::vector<Vec3> pts;
  std::vector<double> params;
  std::size_t seg = 0;
  for (int k = 0;; ++k) {
    const double target = k * step;
    if (target > total - 1e-9) break;
    while (seg + 2 < cum.size() && cum[seg + 1] < target) ++seg;
    const double span = cum[seg + 1] - cum[seg];
    const double f = span > 0.0 ? (target - cum[seg]) / span : 0.0;
    pts.push_back(dense[seg] + f * (dense[seg + 1] - dense[seg]));
    params.push_back(dense_t[seg] + f * (dense_t[seg + 1] - dense_t[seg]));
  }
  pts.push_back(control.back());
  params.push_back(static_cast<double>(n - 1));
  return {std::move(pts), std::move(params)};
}

PhantomSpec default_cow_template() { return spec_from_json(json::parse(kCowTemplateJson)); }

GroundTruth realize(const PhantomSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.rng_seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const Variability& var = spec.variability;

  GroundTruth gt;
  std::vector<ArteryState> states;
  for (const auto& a : spec.arteries) {
    ArteryState s = a.state;
    if (a.variable && s == ArteryState::normal) {
      const double u = unit(rng);
      if (u < var.p_aplasia)
        s = ArteryState::aplastic;
      else if (u < var.p_aplasia + var.p_hypoplasia)
        s = ArteryState::hypoplastic;
    }
    states.push_back(s);
    gt.artery_states[a.name] = s;
  }

  // Jitter shared nodes once so arteries stay connected, then interior points.
  std::unordered_map<std::string, Vec3> node_pos;
  for (const auto& n : spec.nodes) {
    Vec3 j(gauss(rng), gauss(rng), gauss(rng));
    node_pos[n.name] = n.position + var.jitter_sigma_mm * j;
  }
  std::vector<std::vector<Vec3>> controls;
  for (const auto& a : spec.arteries) {
    std::vector<Vec3> c = a.control_points;
    c.front() = node_pos.at(a.from_node);
    c.back() = node_pos.at(a.to_node);
    for (std::size_t i = 1; i + 1 < c.size(); ++i) {
      Vec3 j(gauss(rng), gauss(rng), gauss(rng));
      c[i] += var.jitter_sigma_mm * j;
    }
    controls.push_back(std::move(c));
  }

  const Vec3 extent(spec.raster.dims[0] * spec.raster.spacing.x(), spec.raster.dims[1] * spec.raster.spacing.y(),
                    spec.raster.dims[2] * spec.raster.spacing.z());
  const Vec3 center = extent / 2.0;
  {
    Vec3 axis(gauss(rng), gauss(rng), gauss(rng));
    if (axis.norm() < 1e-12) axis = Vec3::UnitZ();
    const double angle = var.global_rotation_max_deg * kDeg * unit(rng);
    const Eigen::Matrix3d rot = Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix();
    for (auto& [name, p] : node_pos) p = center + rot * (p - center);
    for (auto& c : controls)
      for (auto& p : c) p = center + rot * (p - center);
  }

  std::vector<WorkEdge> edges;
  std::vector<std::size_t> distal_edges;
  for (std::size_t ai = 0; ai < spec.arteries.size(); ++ai) {
    const ArterySpec& a = spec.arteries[ai];
    if (states[ai] == ArteryState::aplastic) continue;
    auto [pts, params] = sample_catmull_rom(controls[ai], spec.sample_step_mm);
    WorkEdge e{a.from_node, a.to_node, std::move(pts), {}};
    for (double t : params) {
      double r = interp_radius(a.radius_profile, t);
      if (states[ai] == ArteryState::hypoplastic) r = std::max(r * spec.hypoplasia_factor, spec.min_radius_mm);
      e.radii.push_back(r);
    }
    edges.push_back(std::move(e));
    if (a.distal_tree) distal_edges.push_back(edges.size() - 1);
  }

  // Terminal ends pushed out of the field of view by the rotation are clipped.
  {
    std::unordered_map<std::string, int> deg;
    for (const auto& e : edges) {
      ++deg[e.from];
      ++deg[e.to];
    }
    for (auto& e : edges) {
      auto outside = [&](std::size_t i) { return !inside_box(e.points[i], 0.5, Vec3::Zero(), extent); };
      if (deg[e.to] == 1) {
        while (e.points.size() > 2 && outside(e.points.size() - 1)) {
          e.points.pop_back();
          e.radii.pop_back();
        }
      }
      if (deg[e.from] == 1) {
        std::size_t drop = 0;
        while (e.points.size() - drop > 2 && outside(drop)) ++drop;
        e.points.erase(e.points.begin(), e.points.begin() + static_cast<std::ptrdiff_t>(drop));
        e.radii.erase(e.radii.begin(), e.radii.begin() + static_cast<std::ptrdiff_t>(drop));
      }
    }
  }

  DistalGrower grower(spec, edges, rng);
  for (std::size_t ei : distal_edges) {
    const WorkEdge e = edges[ei];
    const std::size_t n = e.points.size();
    const Vec3 dir = (e.points[n - 1] - e.points[n - std::min<std::size_t>(n, 5)]).normalized();
    grower.grow(e.to, e.points.back(), dir, e.radii.back(), 1, ei);
  }

  // Assemble the graph, merging degree-2 pass-through nodes.
  std::unordered_map<std::string, int> deg;
  for (const auto& e : edges) {
    ++deg[e.from];
    ++deg[e.to];
  }
  std::set<std::string> pass_through;
  for (const auto& [name, d] : deg)
    if (d == 2) pass_through.insert(name);

  std::vector<bool> used(edges.size(), false);
  std::vector<WorkEdge> merged;
  for (std::size_t start = 0; start < edges.size(); ++start) {
    if (used[start]) continue;
    // Grow the chain in both directions through pass-through nodes.
    WorkEdge chain = edges[start];
    used[start] = true;
    auto extend = [&](bool forward) {
      for (;;) {
        const std::string& tip = forward ? chain.to : chain.from;
        if (!pass_through.count(tip)) return;
        bool found = false;
        for (std::size_t k = 0; k < edges.size(); ++k) {
          if (used[k]) continue;
          WorkEdge nxt = edges[k];
          if (nxt.from != tip && nxt.to != tip) continue;
          if ((forward && nxt.from != tip) || (!forward && nxt.to != tip)) {
            std::reverse(nxt.points.begin(), nxt.points.end());
            std::reverse(nxt.radii.begin(), nxt.radii.end());
            std::swap(nxt.from, nxt.to);
          }
          used[k] = true;
          found = true;
          if (forward) {
            chain.points.insert(chain.points.end(), nxt.points.begin() + 1, nxt.points.end());
            chain.radii.insert(chain.radii.end(), nxt.radii.begin() + 1, nxt.radii.end());
            chain.to = nxt.to;
          } else {
            nxt.points.insert(nxt.points.end(), chain.points.begin() + 1, chain.points.end());
            nxt.radii.insert(nxt.radii.end(), chain.radii.begin() + 1, chain.radii.end());
            nxt.to = chain.to;
            chain = std::move(nxt);
          }
          break;
        }
        if (!found) return;
        if (chain.from == chain.to) return;
      }
    };
    extend(true);
    extend(false);
    merged.push_back(std::move(chain));
  }

  std::map<std::string, int> ids;
  auto node_id = [&](const std::string& name, const Vec3& p) {
    auto it = ids.find(name);
    if (it != ids.end()) return it->second;
    const int id = static_cast<int>(gt.graph.nodes.size());
    ids[name] = id;
    gt.graph.nodes.push_back({id, p, NodeKind::endpoint});
    return id;
  };
  std::vector<std::string> names_by_id;
  for (auto& e : merged) {
    GraphEdge ge;
    ge.a = node_id(e.from, e.points.front());
    ge.b = node_id(e.to, e.points.back());
    ge.points = std::move(e.points);
    ge.radii = std::move(e.radii);
    gt.graph.edges.push_back(std::move(ge));
  }
  names_by_id.resize(gt.graph.nodes.size());
  for (const auto& [name, id] : ids) names_by_id[static_cast<std::size_t>(id)] = name;

  const auto degrees = gt.graph.degrees();
  for (auto& n : gt.graph.nodes) {
    n.kind = degrees[static_cast<std::size_t>(n.id)] >= 3 ? NodeKind::bifurcation : NodeKind::endpoint;
    if (degrees[static_cast<std::size_t>(n.id)] != 3) continue;
    auto lab = spec.boi_labels.find(names_by_id[static_cast<std::size_t>(n.id)]);
    if (lab != spec.boi_labels.end())
      gt.labeled_centers.push_back({n.pos, lab->second});
    else
      gt.bn_centers.push_back(n.pos);
  }
  std::sort(gt.labeled_centers.begin(), gt.labeled_centers.end(),
            [](const LabeledCenter& a, const LabeledCenter& b) { return index_of(a.label) < index_of(b.label); });
  return gt;
}

Volume3D rasterize(const VesselGraph& graph, const RasterSpec& raster, std::uint64_t rng_seed) {
  Volume3D vol(raster.dims, raster.spacing, Vec3::Zero(), static_cast<float>(raster.background_intensity));
  const Vec3 extent = vol.extent();
  const Vec3& sp = raster.spacing;
  std::vector<std::uint8_t> inside(vol.size(), 0);
  for (const auto& e : graph.edges) {
    for (std::size_t q = 0; q < e.points.size(); ++q) {
      const Vec3& p = e.points[q];
      // Voxel centers sit at i*spacing; the grid covers [-spacing/2, extent - spacing/2].
      if ((p.array() < -0.5 * sp.array()).any() || (p.array() > extent.array() - 0.5 * sp.array()).any())
        throw DataError("centerline leaves the raster volume");
      const double r = e.radii[q];
      const double r2 = r * r;
      Index3 lo{}, hi{};
      for (int a = 0; a < 3; ++a) {
        lo[a] = std::max(0, static_cast<int>(std::ceil((p[a] - r) / sp[a])));
        hi[a] = std::min(raster.dims[a] - 1, static_cast<int>(std::floor((p[a] + r) / sp[a])));
      }
      for (int k = lo[2]; k <= hi[2]; ++k)
        for (int j = lo[1]; j <= hi[1]; ++j)
          for (int i = lo[0]; i <= hi[0]; ++i)
            if ((vol.position(i, j, k) - p).squaredNorm() <= r2) inside[vol.index(i, j, k)] = 1;
    }
  }
  std::mt19937_64 rng(rng_seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto data = vol.data();
  for (std::size_t i = 0; i < data.size(); ++i) {
    double x = inside[i] ? raster.vessel_intensity : raster.background_intensity;
    if (raster.noise_sigma > 0.0) x += raster.noise_sigma * gauss(rng);
    data[i] = static_cast<float>(std::clamp(x, 0.0, 1.0));
  }
  return vol;
}

json spec_to_json(const PhantomSpec& spec) {
  json j;
  j["version"] = 1;
  j["nodes"] = json::array();
  for (const auto& n : spec.nodes) j["nodes"].push_back({{"name", n.name}, {"position", vec_json(n.position)}});
  j["arteries"] = json::array();
  for (const auto& a : spec.arteries) {
    json pts = json::array();
    for (const auto& p : a.control_points) pts.push_back(vec_json(p));
    j["arteries"].push_back({{"name", a.name},
                             {"from", a.from_node},
                             {"to", a.to_node},
                             {"control_points", pts},
                             {"radius_profile", a.radius_profile},
                             {"state", to_string(a.state)},
                             {"variable", a.variable},
                             {"distal_tree", a.distal_tree}});
  }
  json labels = json::object();
  for (const auto& [node, tag] : spec.boi_labels) labels[node] = std::string(to_string(tag));
  j["boi_labels"] = labels;
  j["rng_seed"] = spec.rng_seed;
  const auto& v = spec.variability;
  j["variability"] = {{"p_hypoplasia", v.p_hypoplasia},
                      {"p_aplasia", v.p_aplasia},
                      {"jitter_sigma_mm", v.jitter_sigma_mm},
                      {"global_rotation_max_deg", v.global_rotation_max_deg}};
  const auto& r = spec.raster;
  j["raster"] = {{"dims", {r.dims[0], r.dims[1], r.dims[2]}},
                 {"spacing", vec_json(r.spacing)},
                 {"noise_sigma", r.noise_sigma},
                 {"vessel_intensity", r.vessel_intensity},
                 {"background_intensity", r.background_intensity}};
  const auto& d = spec.distal;
  j["distal"] = {{"levels", d.levels},
                 {"angle_min_deg", d.angle_min_deg},
                 {"angle_max_deg", d.angle_max_deg},
                 {"radius_decay", d.radius_decay},
                 {"length_mm", d.length_mm},
                 {"length_decay", d.length_decay},
                 {"clearance_mm", d.clearance_mm},
                 {"max_attempts", d.max_attempts}};
  j["hypoplasia_factor"] = spec.hypoplasia_factor;
  j["min_radius_mm"] = spec.min_radius_mm;
  j["sample_step_mm"] = spec.sample_step_mm;
  return j;
}

PhantomSpec spec_from_json(const json& j) {
  PhantomSpec s;
  try {
    for (const auto& n : j.at("nodes")) s.nodes.push_back({n.at("name").get<std::string>(), vec_from(n.at("position"))});
    for (const auto& a : j.at("arteries")) {
      ArterySpec art;
      art.name = a.at("name").get<std::string>();
      art.from_node = a.at("from").get<std::string>();
      art.to_node = a.at("to").get<std::string>();
      for (const auto& p : a.at("control_points")) art.control_points.push_back(vec_from(p));
      art.radius_profile = a.at("radius_profile").get<std::vector<double>>();
      art.state = state_from_string(a.value("state", std::string("normal")));
      art.variable = a.value("variable", false);
      art.distal_tree = a.value("distal_tree", false);
      s.arteries.push_back(std::move(art));
    }
    for (const auto& [node, tag] : j.at("boi_labels").items()) {
      auto t = parse_class_tag(tag.get<std::string>());
      if (!t) throw ConfigError("bad BoI label: " + tag.get<std::string>());
      s.boi_labels[node] = *t;
    }
    s.rng_seed = j.value("rng_seed", std::uint64_t{0});
    if (j.contains("variability")) {
      const auto& v = j["variability"];
      s.variability.p_hypoplasia = v.value("p_hypoplasia", 0.0);
      s.variability.p_aplasia = v.value("p_aplasia", 0.0);
      s.variability.jitter_sigma_mm = v.value("jitter_sigma_mm", 0.0);
      s.variability.global_rotation_max_deg = v.value("global_rotation_max_deg", 0.0);
    }
    if (j.contains("raster")) {
      const auto& r = j["raster"];
      if (r.contains("dims"))
        for (int a = 0; a < 3; ++a) s.raster.dims[a] = r["dims"][a].get<int>();
      if (r.contains("spacing")) s.raster.spacing = vec_from(r["spacing"]);
      s.raster.noise_sigma = r.value("noise_sigma", s.raster.noise_sigma);
      s.raster.vessel_intensity = r.value("vessel_intensity", s.raster.vessel_intensity);
      s.raster.background_intensity = r.value("background_intensity", s.raster.background_intensity);
    }
    if (j.contains("distal")) {
      const auto& d = j["distal"];
      s.distal.levels = d.value("levels", s.distal.levels);
      s.distal.angle_min_deg = d.value("angle_min_deg", s.distal.angle_min_deg);
      s.distal.angle_max_deg = d.value("angle_max_deg", s.distal.angle_max_deg);
      s.distal.radius_decay = d.value("radius_decay", s.distal.radius_decay);
      s.distal.length_mm = d.value("length_mm", s.distal.length_mm);
      s.distal.length_decay = d.value("length_decay", s.distal.length_decay);
      s.distal.clearance_mm = d.value("clearance_mm", s.distal.clearance_mm);
      s.distal.max_attempts = d.value("max_attempts", s.distal.max_attempts);
    }
    s.hypoplasia_factor = j.value("hypoplasia_factor", s.hypoplasia_factor);
    s.min_radius_mm = j.value("min_radius_mm", s.min_radius_mm);
    s.sample_step_mm = j.value("sample_step_mm", s.sample_step_mm);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed phantom spec: ") + e.what());
  }
  s.validate();
  return s;
}

json labels_to_json(const GroundTruth& gt) {
  json out = json::array();
  for (const auto& c : gt.labeled_centers)
    out.push_back({{"pos", vec_json(c.pos)}, {"label", std::string(to_string(c.label))}});
  return out;
}

json ground_truth_to_json(const GroundTruth& gt) {
  json states = json::object();
  for (const auto& [name, s] : gt.artery_states) states[name] = to_string(s);
  json bn = json::array();
  for (const auto& p : gt.bn_centers) bn.push_back(vec_json(p));
  return {{"graph", graph_to_json(gt.graph)}, {"labels", labels_to_json(gt)}, {"bn_centers", bn},
          {"artery_states", states}};
}

GroundTruth ground_truth_from_json(const json& graph, const json& labels) {
  GroundTruth gt;
  try {
    gt.graph = graph_from_json(graph);
    for (const auto& l : labels) {
      auto t = parse_class_tag(l.at("label").get<std::string>());
      if (!t || *t == ClassTag::BN) throw DataError("labels file holds a non-BoI tag");
      gt.labeled_centers.push_back({vec_from(l.at("pos")), *t});
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed ground truth: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(e.what());
  }
  const auto deg = gt.graph.degrees();
  for (const auto& n : gt.graph.nodes) {
    if (deg[static_cast<std::size_t>(n.id)] != 3) continue;
    const bool labeled = std::any_of(gt.labeled_centers.begin(), gt.labeled_centers.end(),
                                     [&](const LabeledCenter& c) { return (c.pos - n.pos).norm() < 1e-9; });
    if (!labeled) gt.bn_centers.push_back(n.pos);
  }
  return gt;
}

}  // namespace cowlab
