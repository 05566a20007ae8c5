#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "cowlab/common.hpp"
#include "cowlab/volume.hpp"

namespace cowlab {

struct GroundTruth;

enum class NodeKind { endpoint, bifurcation };

struct GraphNode {
  int id = 0;
  Vec3 pos = Vec3::Zero();
  NodeKind kind = NodeKind::endpoint;
};

/// Centerline between two nodes. points.front() sits on node a, points.back() on node b.
struct GraphEdge {
  int a = 0;
  int b = 0;
  std::vector<Vec3> points;
  std::vector<double> radii;
};

struct VesselGraph {
  std::vector<GraphNode> nodes;
  std::vector<GraphEdge> edges;

  /// Number of edge ends incident to each node (a self-loop counts twice).
  std::vector<int> degrees() const;
  /// Independent cycles: E - V + connected components.
  int cycle_rank() const;
};

double arc_length(const std::vector<Vec3>& polyline);

nlohmann::json graph_to_json(const VesselGraph& g);
VesselGraph graph_from_json(const nlohmann::json& j);

/// Binary voxel mask sharing a volume's grid.
struct SegmentationMask {
  Index3 dims{0, 0, 0};
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 origin{0.0, 0.0, 0.0};
  std::vector<std::uint8_t> data;

  SegmentationMask() = default;
  SegmentationMask(Index3 d, Vec3 s, Vec3 o)
      : dims(d), spacing(s), origin(o), data(static_cast<std::size_t>(d[0]) * d[1] * d[2], 0) {}

  std::size_t index(int i, int j, int k) const {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(dims[0]) * (static_cast<std::size_t>(j) + static_cast<std::size_t>(dims[1]) * k);
  }
  bool contains(int i, int j, int k) const {
    return i >= 0 && j >= 0 && k >= 0 && i < dims[0] && j < dims[1] && k < dims[2];
  }
  bool at(int i, int j, int k) const { return contains(i, j, k) && data[index(i, j, k)] != 0; }
  void set(int i, int j, int k, bool v) { data[index(i, j, k)] = v ? 1 : 0; }
  Vec3 position(int i, int j, int k) const {
    return origin + Vec3(i * spacing.x(), j * spacing.y(), k * spacing.z());
  }
  std::size_t count() const;
};

enum class BranchTerminal { endpoint, bifurcation, truncated };

/// One arm of a bifurcation, oriented away from the center.
struct BranchView {
  std::vector<Vec3> polyline;
  std::vector<double> radii;
  BranchTerminal terminal = BranchTerminal::endpoint;

  double mean_radius() const;
  double length() const { return arc_length(polyline); }
};

struct Bifurcation {
  int node_id = 0;
  Vec3 center = Vec3::Zero();
  std::vector<BranchView> branches;  // exactly 3
  std::optional<ClassTag> label;
};

/// intensity >= threshold, then drop 26-connected components under 27 voxels.
SegmentationMask segment(const Volume3D& v, double threshold);

/// Removes 26-connected components with fewer than `min_size` voxels.
SegmentationMask remove_small_components(const SegmentationMask& m, std::size_t min_size);

/// Number of 26-connected foreground components.
int count_components(const SegmentationMask& m);

/// Exact Euclidean distance (mm) from each foreground voxel center to the
/// nearest background voxel center; 0 on background. Voxels outside the grid
/// count as background.
std::vector<double> distance_transform(const SegmentationMask& m);

/// Topology-preserving curve thinning (6 directional sub-iterations,
/// 26/6 simple points, endpoints kept).
SegmentationMask skeletonize(const SegmentationMask& mask);

/// True when deleting (i,j,k) preserves 26/6 topology.
bool is_simple_point(const SegmentationMask& m, int i, int j, int k);

struct GraphExtractionOptions {
  /// Terminal spurs shorter than factor * junction radius + one voxel are pruned.
  double spur_radius_factor = 1.5;
  bool prune_spurs = true;
};

VesselGraph extract_graph(const SegmentationMask& skeleton, const SegmentationMask& mask,
                          const GraphExtractionOptions& opts = {});

inline constexpr double kBranchTruncationMm = 10.0;

std::vector<Bifurcation> collect_bifurcations(const VesselGraph& g, double truncate_mm = kBranchTruncationMm);

struct MatchedBifurcation {
  Bifurcation bif;
  ClassTag label = ClassTag::BN;
  double match_distance_mm = -1.0;  // < 0 when unmatched
};

std::vector<MatchedBifurcation> match_to_ground_truth(const std::vector<Bifurcation>& bifs, const GroundTruth& gt,
                                                      double tol_mm = 1.5);

}  // namespace cowlab
