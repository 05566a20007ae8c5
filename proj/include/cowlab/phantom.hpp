#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "cowlab/common.hpp"
#include "cowlab/vesselgraph.hpp"
#include "cowlab/volume.hpp"

namespace cowlab {

enum class ArteryState { normal, hypoplastic, aplastic };

/// A named point shared by the arteries that meet there.
struct NodeSpec {
  std::string name;
  Vec3 position = Vec3::Zero();
};

struct ArterySpec {
  std::string name;
  std::string from_node;
  std::string to_node;
  /// >= 4 points; first and last are overwritten by the node positions.
  std::vector<Vec3> control_points;
  std::vector<double> radius_profile;
  ArteryState state = ArteryState::normal;
  /// Whether realize() may draw hypoplasia/aplasia for this artery.
  bool variable = false;
  /// Grow a recursive BN subtree from the `to_node` end.
  bool distal_tree = false;
};

struct Variability {
  double p_hypoplasia = 0.0;
  double p_aplasia = 0.0;
  double jitter_sigma_mm = 0.0;
  double global_rotation_max_deg = 0.0;
};

struct RasterSpec {
  Index3 dims{128, 128, 96};
  Vec3 spacing{0.5, 0.5, 0.5};
  double noise_sigma = 0.0;
  double vessel_intensity = 1.0;
  double background_intensity = 0.0;
};

struct DistalSpec {
  int levels = 2;
  double angle_min_deg = 40.0;
  double angle_max_deg = 80.0;
  double radius_decay = 0.75;
  double length_mm = 6.0;
  double length_decay = 0.8;
  double clearance_mm = 1.0;
  int max_attempts = 24;
};

struct PhantomSpec {
  std::vector<NodeSpec> nodes;
  std::vector<ArterySpec> arteries;
  std::map<std::string, ClassTag> boi_labels;  // node name -> A..M
  std::uint64_t rng_seed = 0;
  Variability variability;
  RasterSpec raster;
  DistalSpec distal;
  double hypoplasia_factor = 0.3;
  double min_radius_mm = 0.45;
  double sample_step_mm = 0.25;

  /// Throws ConfigError on any invariant violation.
  void validate() const;
  const NodeSpec* find_node(const std::string& name) const;
  ArterySpec* find_artery(const std::string& name);
};

struct LabeledCenter {
  Vec3 pos = Vec3::Zero();
  ClassTag label = ClassTag::A;
};

struct GroundTruth {
  VesselGraph graph;
  std::vector<LabeledCenter> labeled_centers;
  std::vector<Vec3> bn_centers;
  /// Final state of every template artery after the variability draw.
  std::map<std::string, ArteryState> artery_states;
};

PhantomSpec default_cow_template();

/// Draws variability, jitters, rotates, samples splines, grows distal trees.
/// Pure function of the spec (seed included).
GroundTruth realize(const PhantomSpec& spec);

/// Tube rendering of every centerline sample, then seeded Gaussian noise,
/// clamped to [0,1]. Throws DataError if a centerline leaves the grid.
Volume3D rasterize(const VesselGraph& graph, const RasterSpec& raster, std::uint64_t rng_seed);

/// Catmull-Rom through `control`, resampled every `step` mm of arc length.
/// Returns points and the spline parameter (segment index + fraction) of each.
std::pair<std::vector<Vec3>, std::vector<double>> sample_catmull_rom(const std::vector<Vec3>& control, double step);

std::string to_string(ArteryState s);

nlohmann::json spec_to_json(const PhantomSpec& spec);
PhantomSpec spec_from_json(const nlohmann::json& j);
nlohmann::json labels_to_json(const GroundTruth& gt);
nlohmann::json ground_truth_to_json(const GroundTruth& gt);
GroundTruth ground_truth_from_json(const nlohmann::json& graph, const nlohmann::json& labels);

}  // namespace cowlab
