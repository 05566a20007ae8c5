#pragma once

#include <array>
#include <string>
#include <vector>

#include "cowlab/common.hpp"
#include "cowlab/vesselgraph.hpp"

namespace cowlab {

inline constexpr int kNumGeomFeatures = 61;

/// 0-based slot indices of the 61-value descriptor. Slots 0..35 hold twelve
/// per-branch values for branches 0, 1, 2 in turn.
namespace slot {
inline constexpr int kPerBranch = 12;
enum BranchField : int {
  arc_length = 0,
  chord_length,
  tortuosity,
  mean_radius,
  min_radius,
  max_radius,
  radius_std,
  proximal_radius,
  distal_radius,
  taper,
  mean_curvature,
  max_curvature,
};
constexpr int branch(int b, BranchField f) { return b * kPerBranch + f; }
inline constexpr int norm_x = 36, norm_y = 37, norm_z = 38;
inline constexpr int angle01 = 39, angle02 = 40, angle12 = 41;
inline constexpr int angle_sum = 42, angle_min = 43, angle_max = 44;
inline constexpr int planarity = 45;
inline constexpr int radius_ratio10 = 46, radius_ratio20 = 47, radius_ratio21 = 48;
inline constexpr int length_ratio10 = 49, length_ratio20 = 50, length_ratio21 = 51;
inline constexpr int tort_ratio10 = 52, tort_ratio20 = 53, tort_ratio21 = 54;
inline constexpr int murray_deviation = 55;
inline constexpr int asymmetry = 56;
inline constexpr int total_length = 57;
inline constexpr int mean_of_mean_radii = 58;
inline constexpr int nearest_bifurcation_distance = 59;
inline constexpr int centroid_distance = 60;
}  // namespace slot

struct FeatureVector61 {
  std::array<double, kNumGeomFeatures> values{};
  ClassTag label = ClassTag::BN;
  std::string bif_id;
};

struct FeatureContext {
  Vec3 volume_origin = Vec3::Zero();
  Vec3 volume_extent = Vec3::Ones();
  std::vector<Vec3> all_centers;  // may include the bifurcation's own center
  Vec3 tree_centroid = Vec3::Zero();
};

/// Sorts branches: largest mean radius first, then longer arc, then
/// lexicographically smaller distal endpoint.
Bifurcation order_branches(const Bifurcation& b);
/// Permutation applied by order_branches (new position -> old index).
std::array<int, 3> branch_order(const Bifurcation& b);

/// Arc length over chord length. Throws DataError on a zero chord.
double tortuosity(const std::vector<Vec3>& polyline);

/// Unit vector from the branch start to the point at arc length
/// min(probe_mm, L/2).
Vec3 branch_tangent(const BranchView& branch, double probe_mm = 2.0);

/// Point at arc length s along the polyline (clamped to the ends).
Vec3 point_at_arc_length(const std::vector<Vec3>& polyline, double s);

/// Uniform arc-length resampling; keeps both ends.
std::vector<Vec3> resample_polyline(const std::vector<Vec3>& polyline, double step);

/// Inverse circumradius of each consecutive triple (0 for collinear triples).
std::vector<double> menger_curvatures(const std::vector<Vec3>& polyline);

FeatureVector61 features(const Bifurcation& ordered, const FeatureContext& ctx);

/// Centroid of all centerline points of a graph.
Vec3 tree_centroid(const VesselGraph& g);

std::string feature_csv_header();

}  // namespace cowlab
