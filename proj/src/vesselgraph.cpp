#include "cowlab/vesselgraph.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <tuple>

#include <Eigen/Eigenvalues>
#include <nlohmann/json.hpp>

#include "cowlab/geomfeat.hpp"
#include "cowlab/phantom.hpp"

namespace cowlab {

using nlohmann::json;

namespace {

struct Offset {
  int dx, dy, dz;
};

constexpr std::array<Offset, 26> make_offsets26() {
  std::array<Offset, 26> out{};
  int n = 0;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx)
        if (dx != 0 || dy != 0 || dz != 0) out[n++] = {dx, dy, dz};
  return out;
}
constexpr auto kOffsets26 = make_offsets26();

struct Voxel {
  int i, j, k;
};

Voxel unravel(const SegmentationMask& m, std::size_t idx) {
  const auto nx = static_cast<std::size_t>(m.dims[0]);
  const auto ny = static_cast<std::size_t>(m.dims[1]);
  return {static_cast<int>(idx % nx), static_cast<int>((idx / nx) % ny), static_cast<int>(idx / (nx * ny))};
}

int neighbor_count(const SegmentationMask& m, int i, int j, int k) {
  int n = 0;
  for (const auto& o : kOffsets26) n += m.at(i + o.dx, j + o.dy, k + o.dz) ? 1 : 0;
  return n;
}

/// Labels 26-connected components; returns per-voxel label (-1 background) and sizes.
std::pair<std::vector<int>, std::vector<std::size_t>> label_components(const SegmentationMask& m) {
  std::vector<int> label(m.data.size(), -1);
  std::vector<std::size_t> sizes;
  std::vector<std::size_t> stack;
  for (std::size_t s = 0; s < m.data.size(); ++s) {
    if (!m.data[s] || label[s] >= 0) continue;
    const int id = static_cast<int>(sizes.size());
    std::size_t count = 0;
    stack.push_back(s);
    label[s] = id;
    while (!stack.empty()) {
      const std::size_t cur = stack.back();
      stack.pop_back();
      ++count;
      const Voxel v = unravel(m, cur);
      for (const auto& o : kOffsets26) {
        const int a = v.i + o.dx, b = v.j + o.dy, c = v.k + o.dz;
        if (!m.at(a, b, c)) continue;
        const std::size_t n = m.index(a, b, c);
        if (label[n] >= 0) continue;
        label[n] = id;
        stack.push_back(n);
      }
    }
    sizes.push_back(count);
  }
  return {std::move(label), std::move(sizes)};
}

/// 1D squared-distance transform (lower envelope of parabolas) with grid
/// weight w = spacing^2. Positions -1 and n are implicit background.
void edt_1d(std::vector<double>& f, double w, std::vector<double>& out, std::vector<int>& v, std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  // Extended domain: index 0 is position -1, index n+1 is position n.
  const int m = n + 2;
  auto val = [&](int q) { return (q == 0 || q == m - 1) ? 0.0 : f[static_cast<std::size_t>(q - 1)]; };
  v.assign(static_cast<std::size_t>(m), 0);
  z.assign(static_cast<std::size_t>(m) + 1, 0.0);
  int kk = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  for (int q = 1; q < m; ++q) {
    double s;
    for (;;) {
      const int p = v[static_cast<std::size_t>(kk)];
      s = ((val(q) + w * q * q) - (val(p) + w * p * p)) / (2.0 * w * (q - p));
      if (s <= z[static_cast<std::size_t>(kk)]) {
        --kk;
        continue;
      }
      break;
    }
    ++kk;
    v[static_cast<std::size_t>(kk)] = q;
    z[static_cast<std::size_t>(kk)] = s;
    z[static_cast<std::size_t>(kk) + 1] = std::numeric_limits<double>::infinity();
  }
  kk = 0;
  out.resize(static_cast<std::size_t>(n));
  for (int q = 1; q <= n; ++q) {
    while (z[static_cast<std::size_t>(kk) + 1] < q) ++kk;
    const int p = v[static_cast<std::size_t>(kk)];
    out[static_cast<std::size_t>(q - 1)] = w * (q - p) * (q - p) + val(p);
  }
}

}  // namespace

std::vector<int> VesselGraph::degrees() const {
  std::vector<int> deg(nodes.size(), 0);
  for (const auto& e : edges) {
    ++deg[static_cast<std::size_t>(e.a)];
    ++deg[static_cast<std::size_t>(e.b)];
  }
  return deg;
}

int VesselGraph::cycle_rank() const {
  std::vector<int> parent(nodes.size());
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](int x) {
    while (parent[static_cast<std::size_t>(x)] != x) x = parent[static_cast<std::size_t>(x)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(x)])];
    return x;
  };
  int components = static_cast<int>(nodes.size());
  for (const auto& e : edges) {
    const int ra = find(e.a), rb = find(e.b);
    if (ra != rb) {
      parent[static_cast<std::size_t>(ra)] = rb;
      --components;
    }
  }
  return static_cast<int>(edges.size()) - static_cast<int>(nodes.size()) + components;
}

double arc_length(const std::vector<Vec3>& polyline) {
  double s = 0.0;
  for (std::size_t i = 1; i < polyline.size(); ++i) s += (polyline[i] - polyline[i - 1]).norm();
  return s;
}

double BranchView::mean_radius() const {
  if (radii.empty()) return 0.0;
  return std::accumulate(radii.begin(), radii.end(), 0.0) / static_cast<double>(radii.size());
}

std::size_t SegmentationMask::count() const {
  return static_cast<std::size_t>(std::count_if(data.begin(), data.end(), [](std::uint8_t x) { return x != 0; }));
}

json graph_to_json(const VesselGraph& g) {
  json nodes = json::array();
  for (const auto& n : g.nodes)
    nodes.push_back({{"id", n.id},
                     {"pos", {n.pos.x(), n.pos.y(), n.pos.z()}},
                     {"kind", n.kind == NodeKind::bifurcation ? "bifurcation" : "endpoint"}});
  json edges = json::array();
  for (const auto& e : g.edges) {
    json pts = json::array();
    for (const auto& p : e.points) pts.push_back({p.x(), p.y(), p.z()});
    edges.push_back({{"a", e.a}, {"b", e.b}, {"points", pts}, {"radii", e.radii}});
  }
  return {{"nodes", nodes}, {"edges", edges}};
}

VesselGraph graph_from_json(const json& j) {
  VesselGraph g;
  try {
    for (const auto& n : j.at("nodes")) {
      GraphNode node;
      node.id = n.at("id").get<int>();
      const auto& p = n.at("pos");
      node.pos = Vec3(p[0].get<double>(), p[1].get<double>(), p[2].get<double>());
      node.kind = n.at("kind").get<std::string>() == "bifurcation" ? NodeKind::bifurcation : NodeKind::endpoint;
      if (node.id != static_cast<int>(g.nodes.size())) throw DataError("graph node ids must be 0..n-1 in order");
      g.nodes.push_back(node);
    }
    for (const auto& e : j.at("edges")) {
      GraphEdge edge;
      edge.a = e.at("a").get<int>();
      edge.b = e.at("b").get<int>();
      for (const auto& p : e.at("points")) edge.points.emplace_back(p[0].get<double>(), p[1].get<double>(), p[2].get<double>());
      edge.radii = e.at("radii").get<std::vector<double>>();
      if (edge.points.size() != edge.radii.size() || edge.points.size() < 2)
        throw DataError("graph edge needs >= 2 points with one radius each");
      if (edge.a < 0 || edge.b < 0 || edge.a >= static_cast<int>(g.nodes.size()) || edge.b >= static_cast<int>(g.nodes.size()))
        throw DataError("graph edge references an unknown node");
      g.edges.push_back(std::move(edge));
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed graph JSON: ") + e.what());
  }
  return g;
}

SegmentationMask remove_small_components(const SegmentationMask& m, std::size_t min_size) {
  auto [label, sizes] = label_components(m);
  SegmentationMask out = m;
  for (std::size_t i = 0; i < out.data.size(); ++i)
    if (label[i] >= 0 && sizes[static_cast<std::size_t>(label[i])] < min_size) out.data[i] = 0;
  return out;
}

int count_components(const SegmentationMask& m) { return static_cast<int>(label_components(m).second.size()); }

SegmentationMask segment(const Volume3D& v, double threshold) {
  SegmentationMask m(v.dims(), v.spacing(), v.origin());
  auto d = v.data();
  for (std::size_t i = 0; i < d.size(); ++i) m.data[i] = d[i] >= threshold ? 1 : 0;
  return remove_small_components(m, 27);
}

std::vector<double> distance_transform(const SegmentationMask& m) {
  const int nx = m.dims[0], ny = m.dims[1], nz = m.dims[2];
  constexpr double kFar = 1e20;
  std::vector<double> d2(m.data.size());
  for (std::size_t i = 0; i < d2.size(); ++i) d2[i] = m.data[i] ? kFar : 0.0;
  std::vector<double> line, out, z;
  std::vector<int> v;
  const double wx = m.spacing.x() * m.spacing.x(), wy = m.spacing.y() * m.spacing.y(),
               wz = m.spacing.z() * m.spacing.z();
  for (int k = 0; k < nz; ++k)
    for (int j = 0; j < ny; ++j) {
      line.resize(static_cast<std::size_t>(nx));
      for (int i = 0; i < nx; ++i) line[static_cast<std::size_t>(i)] = d2[m.index(i, j, k)];
      edt_1d(line, wx, out, v, z);
      for (int i = 0; i < nx; ++i) d2[m.index(i, j, k)] = out[static_cast<std::size_t>(i)];
    }
  for (int k = 0; k < nz; ++k)
    for (int i = 0; i < nx; ++i) {
      line.resize(static_cast<std::size_t>(ny));
      for (int j = 0; j < ny; ++j) line[static_cast<std::size_t>(j)] = d2[m.index(i, j, k)];
      edt_1d(line, wy, out, v, z);
      for (int j = 0; j < ny; ++j) d2[m.index(i, j, k)] = out[static_cast<std::size_t>(j)];
    }
  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < nx; ++i) {
      line.resize(static_cast<std::size_t>(nz));
      for (int k = 0; k < nz; ++k) line[static_cast<std::size_t>(k)] = d2[m.index(i, j, k)];
      edt_1d(line, wz, out, v, z);
      for (int k = 0; k < nz; ++k) d2[m.index(i, j, k)] = out[static_cast<std::size_t>(k)];
    }
  for (auto& x : d2) x = std::sqrt(x);
  return d2;
}

bool is_simple_point(const SegmentationMask& m, int i, int j, int k) {
  // 3x3x3 cube, index = (dx+1) + 3(dy+1) + 9(dz+1); 13 is the center.
  std::array<bool, 27> fg{};
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) fg[static_cast<std::size_t>((dx + 1) + 3 * (dy + 1) + 9 * (dz + 1))] = m.at(i + dx, j + dy, k + dz);
  fg[13] = false;

  auto coords = [](int c) { return std::array<int, 3>{c % 3 - 1, (c / 3) % 3 - 1, c / 9 - 1}; };
  auto taxicab = [&](int c) {
    auto a = coords(c);
    return std::abs(a[0]) + std::abs(a[1]) + std::abs(a[2]);
  };

  // Foreground: exactly one 26-component in N26 \ {p}.
  {
    std::array<bool, 27> seen{};
    int components = 0;
    for (int s = 0; s < 27; ++s) {
      if (!fg[static_cast<std::size_t>(s)] || seen[static_cast<std::size_t>(s)]) continue;
      if (++components > 1) return false;
      std::array<int, 27> stack{};
      int top = 0;
      stack[top++] = s;
      seen[static_cast<std::size_t>(s)] = true;
      while (top > 0) {
        const int c = stack[--top];
        const auto a = coords(c);
        for (int t = 0; t < 27; ++t) {
          if (!fg[static_cast<std::size_t>(t)] || seen[static_cast<std::size_t>(t)]) continue;
          const auto b = coords(t);
          if (std::abs(a[0] - b[0]) <= 1 && std::abs(a[1] - b[1]) <= 1 && std::abs(a[2] - b[2]) <= 1) {
            seen[static_cast<std::size_t>(t)] = true;
            stack[top++] = t;
          }
        }
      }
    }
    if (components != 1) return false;
  }

  // Background: exactly one 6-component in N18 \ {p} that touches a face neighbor.
  {
    std::array<bool, 27> bg{};
    for (int c = 0; c < 27; ++c) bg[static_cast<std::size_t>(c)] = c != 13 && taxicab(c) <= 2 && !fg[static_cast<std::size_t>(c)];
    std::array<bool, 27> seen{};
    int components = 0;
    for (int s = 0; s < 27; ++s) {
      if (taxicab(s) != 1 || !bg[static_cast<std::size_t>(s)] || seen[static_cast<std::size_t>(s)]) continue;
      if (++components > 1) return false;
      std::array<int, 27> stack{};
      int top = 0;
      stack[top++] = s;
      seen[static_cast<std::size_t>(s)] = true;
      while (top > 0) {
        const int c = stack[--top];
        const auto a = coords(c);
        for (int t = 0; t < 27; ++t) {
          if (!bg[static_cast<std::size_t>(t)] || seen[static_cast<std::size_t>(t)]) continue;
          const auto b = coords(t);
          if (std::abs(a[0] - b[0]) + std::abs(a[1] - b[1]) + std::abs(a[2] - b[2]) == 1) {
            seen[static_cast<std::size_t>(t)] = true;
            stack[top++] = t;
          }
        }
      }
    }
    if (components != 1) return false;
  }
  return true;
}

SegmentationMask skeletonize(const SegmentationMask& mask) {
  SegmentationMask s = mask;
  std::vector<std::size_t> fg;
  for (std::size_t i = 0; i < s.data.size(); ++i)
    if (s.data[i]) fg.push_back(i);

  constexpr std::array<Offset, 6> kDirs{{{0, -1, 0}, {0, 1, 0}, {1, 0, 0}, {-1, 0, 0}, {0, 0, 1}, {0, 0, -1}}};
  std::vector<std::size_t> candidates;
  bool changed = true;
  while (changed) {
    changed = false;
    for (const auto& d : kDirs) {
      candidates.clear();
      for (std::size_t idx : fg) {
        if (!s.data[idx]) continue;
        const Voxel v = unravel(s, idx);
        if (s.at(v.i + d.dx, v.j + d.dy, v.k + d.dz)) continue;
        if (neighbor_count(s, v.i, v.j, v.k) <= 1) continue;
        if (!is_simple_point(s, v.i, v.j, v.k)) continue;
        candidates.push_back(idx);
      }
      // Sequential re-check keeps parallel deletions from breaking topology.
      for (std::size_t idx : candidates) {
        const Voxel v = unravel(s, idx);
        if (neighbor_count(s, v.i, v.j, v.k) <= 1) continue;
        if (!is_simple_point(s, v.i, v.j, v.k)) continue;
        s.data[idx] = 0;
        changed = true;
      }
    }
    std::erase_if(fg, [&](std::size_t idx) { return !s.data[idx]; });
  }
  return s;
}

namespace {

struct RawEdge {
  int a, b;
  std::vector<Vec3> points;
  std::vector<double> radii;
};

/// Replaces degree-2 nodes by concatenating their two edges, drops removed
/// nodes and renumbers.
VesselGraph compact_graph(std::vector<GraphNode> nodes, std::vector<RawEdge> edges, std::vector<bool> keep_node) {
  for (bool merged = true; merged;) {
    merged = false;
    std::vector<int> deg(nodes.size(), 0);
    for (const auto& e : edges) {
      ++deg[static_cast<std::size_t>(e.a)];
      ++deg[static_cast<std::size_t>(e.b)];
    }
    for (std::size_t n = 0; n < nodes.size() && !merged; ++n) {
      if (!keep_node[n] || deg[n] != 2) continue;
      std::vector<std::size_t> inc;
      for (std::size_t e = 0; e < edges.size(); ++e)
        if (edges[e].a == static_cast<int>(n) || edges[e].b == static_cast<int>(n)) inc.push_back(e);
      if (inc.size() != 2) continue;  // self-loop on an isolated cycle
      RawEdge e1 = edges[inc[0]], e2 = edges[inc[1]];
      if (e1.b != static_cast<int>(n)) {
        std::reverse(e1.points.begin(), e1.points.end());
        std::reverse(e1.radii.begin(), e1.radii.end());
        std::swap(e1.a, e1.b);
      }
      if (e2.a != static_cast<int>(n)) {
        std::reverse(e2.points.begin(), e2.points.end());
        std::reverse(e2.radii.begin(), e2.radii.end());
        std::swap(e2.a, e2.b);
      }
      e1.points.insert(e1.points.end(), e2.points.begin() + 1, e2.points.end());
      e1.radii.insert(e1.radii.end(), e2.radii.begin() + 1, e2.radii.end());
      e1.b = e2.b;
      edges.erase(edges.begin() + static_cast<std::ptrdiff_t>(std::max(inc[0], inc[1])));
      edges.erase(edges.begin() + static_cast<std::ptrdiff_t>(std::min(inc[0], inc[1])));
      edges.push_back(std::move(e1));
      keep_node[n] = false;
      merged = true;
    }
  }
  VesselGraph g;
  std::vector<int> remap(nodes.size(), -1);
  for (std::size_t n = 0; n < nodes.size(); ++n) {
    if (!keep_node[n]) continue;
    remap[n] = static_cast<int>(g.nodes.size());
    GraphNode gn = nodes[n];
    gn.id = remap[n];
    g.nodes.push_back(gn);
  }
  for (auto& e : edges) {
    g.edges.push_back({remap[static_cast<std::size_t>(e.a)], remap[static_cast<std::size_t>(e.b)], std::move(e.points),
                       std::move(e.radii)});
  }
  const auto deg = g.degrees();
  for (auto& n : g.nodes) n.kind = deg[static_cast<std::size_t>(n.id)] >= 3 ? NodeKind::bifurcation : NodeKind::endpoint;
  return g;
}

}  // namespace

VesselGraph extract_graph(const SegmentationMask& skeleton, const SegmentationMask& mask,
                          const GraphExtractionOptions& opts) {
  if (skeleton.dims != mask.dims) throw DataError("skeleton and mask grids differ");
  const std::vector<double> edt = distance_transform(mask);

  // Node assignment per skeleton voxel: -1 path voxel, >= 0 node id.
  std::map<std::size_t, int> node_of;
  std::vector<GraphNode> nodes;
  std::vector<std::vector<std::size_t>> node_voxels;
  std::vector<double> node_radius;
  std::vector<std::size_t> skel;
  for (std::size_t i = 0; i < skeleton.data.size(); ++i)
    if (skeleton.data[i]) skel.push_back(i);
  if (skel.empty()) return {};

  std::map<std::size_t, int> nbcount;
  for (std::size_t idx : skel) {
    const Voxel v = unravel(skeleton, idx);
    nbcount[idx] = neighbor_count(skeleton, v.i, v.j, v.k);
  }
  auto new_node = [&](const std::vector<std::size_t>& voxels) {
    const int id = static_cast<int>(nodes.size());
    Vec3 c = Vec3::Zero();
    double r = 0.0;
    for (std::size_t idx : voxels) {
      const Voxel v = unravel(skeleton, idx);
      c += skeleton.position(v.i, v.j, v.k);
      r = std::max(r, edt[idx]);
      node_of[idx] = id;
    }
    c /= static_cast<double>(voxels.size());
    nodes.push_back({id, c, NodeKind::endpoint});
    node_voxels.push_back(voxels);
    node_radius.push_back(r);
    return id;
  };
  // Junction clusters.
  for (std::size_t idx : skel) {
    if (nbcount[idx] < 3 || node_of.count(idx)) continue;
    std::vector<std::size_t> cluster{idx};
    std::set<std::size_t> seen{idx};
    for (std::size_t q = 0; q < cluster.size(); ++q) {
      const Voxel v = unravel(skeleton, cluster[q]);
      for (const auto& o : kOffsets26) {
        if (!skeleton.at(v.i + o.dx, v.j + o.dy, v.k + o.dz)) continue;
        const std::size_t n = skeleton.index(v.i + o.dx, v.j + o.dy, v.k + o.dz);
        if (nbcount[n] >= 3 && seen.insert(n).second) cluster.push_back(n);
      }
    }
    std::sort(cluster.begin(), cluster.end());
    new_node(cluster);
  }
  for (std::size_t idx : skel)
    if (nbcount[idx] <= 1 && !node_of.count(idx)) new_node({idx});

  std::vector<RawEdge> edges;
  std::set<std::size_t> visited;
  std::set<std::pair<std::size_t, std::size_t>> direct_links;
  auto voxel_pos = [&](std::size_t idx) {
    const Voxel v = unravel(skeleton, idx);
    return skeleton.position(v.i, v.j, v.k);
  };

  auto trace = [&](int start_node, std::size_t from_voxel, std::size_t first) {
    RawEdge e{start_node, -1, {nodes[static_cast<std::size_t>(start_node)].pos}, {node_radius[static_cast<std::size_t>(start_node)]}};
    std::size_t prev = from_voxel, cur = first;
    for (;;) {
      auto it = node_of.find(cur);
      if (it != node_of.end()) {
        e.b = it->second;
        e.points.push_back(nodes[static_cast<std::size_t>(it->second)].pos);
        e.radii.push_back(node_radius[static_cast<std::size_t>(it->second)]);
        break;
      }
      visited.insert(cur);
      e.points.push_back(voxel_pos(cur));
      e.radii.push_back(edt[cur]);
      const Voxel v = unravel(skeleton, cur);
      std::size_t next = std::numeric_limits<std::size_t>::max();
      // Prefer stepping into a node other than the one we came from, then a fresh path voxel.
      for (const auto& o : kOffsets26) {
        if (!skeleton.at(v.i + o.dx, v.j + o.dy, v.k + o.dz)) continue;
        const std::size_t n = skeleton.index(v.i + o.dx, v.j + o.dy, v.k + o.dz);
        if (n == prev) continue;
        auto nit = node_of.find(n);
        if (nit != node_of.end()) {
          if (nit->second == start_node && e.points.size() <= 2 &&
              std::find(node_voxels[static_cast<std::size_t>(start_node)].begin(),
                        node_voxels[static_cast<std::size_t>(start_node)].end(), prev) !=
                  node_voxels[static_cast<std::size_t>(start_node)].end())
            continue;
          next = n;
          break;
        }
        if (!visited.count(n) && next == std::numeric_limits<std::size_t>::max()) next = n;
      }
      if (next == std::numeric_limits<std::size_t>::max()) {
        // Closed back onto the origin cluster through an already-walked voxel.
        e.b = start_node;
        e.points.push_back(nodes[static_cast<std::size_t>(start_node)].pos);
        e.radii.push_back(node_radius[static_cast<std::size_t>(start_node)]);
        break;
      }
      prev = cur;
      cur = next;
    }
    edges.push_back(std::move(e));
  };

  for (std::size_t nid = 0; nid < nodes.size(); ++nid) {
    for (std::size_t vox : node_voxels[nid]) {
      const Voxel v = unravel(skeleton, vox);
      for (const auto& o : kOffsets26) {
        if (!skeleton.at(v.i + o.dx, v.j + o.dy, v.k + o.dz)) continue;
        const std::size_t n = skeleton.index(v.i + o.dx, v.j + o.dy, v.k + o.dz);
        auto it = node_of.find(n);
        if (it != node_of.end()) {
          if (it->second == static_cast<int>(nid)) continue;
          const auto key = std::minmax(vox, n);
          const auto pair_key = std::minmax(static_cast<int>(nid), it->second);
          bool linked = false;
          for (const auto& e : edges)
            if (std::minmax(e.a, e.b) == pair_key && e.points.size() == 2) linked = true;
          if (linked || !direct_links.insert(key).second) continue;
          edges.push_back({static_cast<int>(nid), it->second,
                           {nodes[nid].pos, nodes[static_cast<std::size_t>(it->second)].pos},
                           {node_radius[nid], node_radius[static_cast<std::size_t>(it->second)]}});
          continue;
        }
        if (visited.count(n)) continue;
        trace(static_cast<int>(nid), vox, n);
      }
    }
  }
  // Isolated cycles carry no node yet.
  for (std::size_t idx : skel) {
    if (node_of.count(idx) || visited.count(idx)) continue;
    const int id = new_node({idx});
    const Voxel v = unravel(skeleton, idx);
    for (const auto& o : kOffsets26) {
      if (!skeleton.at(v.i + o.dx, v.j + o.dy, v.k + o.dz)) continue;
      const std::size_t n = skeleton.index(v.i + o.dx, v.j + o.dy, v.k + o.dz);
      if (visited.count(n)) continue;
      trace(id, idx, n);
      break;
    }
  }
  // Degenerate self-loops hugging a junction cluster are thinning artifacts.
  const double min_loop = 3.0 * mask.spacing.minCoeff();
  std::erase_if(edges, [&](const RawEdge& e) { return e.a == e.b && arc_length(e.points) < min_loop; });

  std::vector<bool> keep(nodes.size(), true);
  VesselGraph g = compact_graph(nodes, edges, keep);
  if (!opts.prune_spurs) return g;

  const double voxel = mask.spacing.minCoeff();
  for (bool pruned = true; pruned;) {
    pruned = false;
    const auto deg = g.degrees();
    std::vector<bool> drop_edge(g.edges.size(), false);
    std::vector<bool> keep_node(g.nodes.size(), true);
    std::vector<int> removed_at(g.nodes.size(), 0);
    for (std::size_t ei = 0; ei < g.edges.size(); ++ei) {
      const auto& e = g.edges[ei];
      int tip = -1, hub = -1;
      if (deg[static_cast<std::size_t>(e.a)] == 1 && deg[static_cast<std::size_t>(e.b)] >= 3) {
        tip = e.a;
        hub = e.b;
      } else if (deg[static_cast<std::size_t>(e.b)] == 1 && deg[static_cast<std::size_t>(e.a)] >= 3) {
        tip = e.b;
        hub = e.a;
      }
      if (tip < 0) continue;
      const double hub_radius = hub == e.a ? e.radii.front() : e.radii.back();
      if (arc_length(e.points) >= opts.spur_radius_factor * hub_radius + voxel) continue;
      // Never strip a hub below degree 2 in one pass.
      if (deg[static_cast<std::size_t>(hub)] - removed_at[static_cast<std::size_t>(hub)] <= 2) continue;
      drop_edge[ei] = true;
      keep_node[static_cast<std::size_t>(tip)] = false;
      ++removed_at[static_cast<std::size_t>(hub)];
      pruned = true;
    }
    if (!pruned) break;
    std::vector<RawEdge> kept;
    for (std::size_t ei = 0; ei < g.edges.size(); ++ei)
      if (!drop_edge[ei]) kept.push_back({g.edges[ei].a, g.edges[ei].b, g.edges[ei].points, g.edges[ei].radii});
    g = compact_graph(g.nodes, kept, keep_node);
  }
  return g;
}

namespace {

BranchView orient_branch(const GraphEdge& e, bool from_a, NodeKind far_kind, double truncate_mm) {
  BranchView b;
  b.polyline = e.points;
  b.radii = e.radii;
  if (!from_a) {
    std::reverse(b.polyline.begin(), b.polyline.end());
    std::reverse(b.radii.begin(), b.radii.end());
  }
  b.terminal = far_kind == NodeKind::bifurcation ? BranchTerminal::bifurcation : BranchTerminal::endpoint;
  double s = 0.0;
  for (std::size_t i = 1; i < b.polyline.size(); ++i) {
    const double seg = (b.polyline[i] - b.polyline[i - 1]).norm();
    if (s + seg > truncate_mm) {
      const double f = seg > 0.0 ? (truncate_mm - s) / seg : 0.0;
      const Vec3 p = b.polyline[i - 1] + f * (b.polyline[i] - b.polyline[i - 1]);
      const double r = b.radii[i - 1] + f * (b.radii[i] - b.radii[i - 1]);
      b.polyline.resize(i);
      b.radii.resize(i);
      if (f > 0.0) {
        b.polyline.push_back(p);
        b.radii.push_back(r);
      }
      b.terminal = BranchTerminal::truncated;
      break;
    }
    s += seg;
  }
  return b;
}

// Least-squares meeting point of the branch axes, each fitted just outside
// the junction hub. Skeleton junctions drift toward thin side branches.
Vec3 refine_center(const Vec3& c, const std::vector<BranchView>& branches) {
  double hub = 0.0;
  for (const auto& b : branches)
    if (!b.radii.empty()) hub = std::max(hub, b.radii.front());
  Eigen::Matrix3d a = Eigen::Matrix3d::Zero();
  Vec3 rhs = Vec3::Zero();
  int used = 0;
  for (const auto& b : branches) {
    const double len = b.length();
    const double s0 = std::min(hub, 0.5 * len);
    const double s1 = std::min(s0 + 3.0, len);
    if (s1 - s0 < 1.0) continue;
    const Vec3 p0 = point_at_arc_length(b.polyline, s0);
    const Vec3 d = (point_at_arc_length(b.polyline, s1) - p0).normalized();
    const Eigen::Matrix3d proj = Eigen::Matrix3d::Identity() - d * d.transpose();
    a += proj;
    rhs += proj * p0;
    ++used;
  }
  if (used < 2) return c;
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(a);
  if (es.eigenvalues().minCoeff() < 0.05) return c;
  const Vec3 x = a.ldlt().solve(rhs);
  return (x - c).norm() <= hub + 0.5 ? x : c;
}

}  // namespace

std::vector<Bifurcation> collect_bifurcations(const VesselGraph& g, double truncate_mm) {
  std::vector<Bifurcation> out;
  const auto deg = g.degrees();
  for (const auto& node : g.nodes) {
    if (deg[static_cast<std::size_t>(node.id)] < 3) continue;
    std::vector<BranchView> branches;
    for (const auto& e : g.edges) {
      if (e.a == node.id)
        branches.push_back(orient_branch(e, true, g.nodes[static_cast<std::size_t>(e.b)].kind, truncate_mm));
      if (e.b == node.id)
        branches.push_back(orient_branch(e, false, g.nodes[static_cast<std::size_t>(e.a)].kind, truncate_mm));
    }
    if (branches.size() == 3) {
      const Vec3 center = refine_center(node.pos, branches);
      out.push_back({node.id, center, std::move(branches), std::nullopt});
      continue;
    }
    // Degree >= 4: the most collinear pair is the through vessel; each other
    // branch forms a bifurcation with it.
    std::vector<Vec3> tangents;
    for (const auto& b : branches) tangents.push_back(branch_tangent(b));
    std::size_t bi = 0, bj = 1;
    double best = -1.0;
    for (std::size_t i = 0; i < branches.size(); ++i)
      for (std::size_t j = i + 1; j < branches.size(); ++j) {
        const double c = std::abs(tangents[i].dot(tangents[j]));
        if (c > best + 1e-12) {
          best = c;
          bi = i;
          bj = j;
        }
      }
    for (std::size_t k = 0; k < branches.size(); ++k) {
      if (k == bi || k == bj) continue;
      std::vector<BranchView> trio{branches[bi], branches[bj], branches[k]};
      const Vec3 center = refine_center(node.pos, trio);
      out.push_back({node.id, center, std::move(trio), std::nullopt});
    }
  }
  return out;
}

std::vector<MatchedBifurcation> match_to_ground_truth(const std::vector<Bifurcation>& bifs, const GroundTruth& gt,
                                                      double tol_mm) {
  if (!(tol_mm > 0.0)) throw DataError("matching tolerance must be positive");
  std::vector<std::tuple<double, std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < bifs.size(); ++i)
    for (std::size_t j = 0; j < gt.labeled_centers.size(); ++j) {
      const double d = (bifs[i].center - gt.labeled_centers[j].pos).norm();
      if (d <= tol_mm) pairs.emplace_back(d, i, j);
    }
  std::sort(pairs.begin(), pairs.end());
  std::vector<MatchedBifurcation> out;
  out.reserve(bifs.size());
  for (const auto& b : bifs) out.push_back({b, ClassTag::BN, -1.0});
  std::vector<bool> det_used(bifs.size(), false), gt_used(gt.labeled_centers.size(), false);
  for (const auto& [d, i, j] : pairs) {
    if (det_used[i] || gt_used[j]) continue;
    det_used[i] = gt_used[j] = true;
    out[i].label = gt.labeled_centers[j].label;
    out[i].match_distance_mm = d;
  }
  for (auto& m : out) m.bif.label = m.label;
  return out;
}

}  // namespace cowlab
