#include "cowlab/geomfeat.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace cowlab {

namespace {

constexpr double kTiny = 1e-9;

double safe_ratio(double num, double den) { return num / std::max(den, kTiny); }

double angle_deg(const Vec3& a, const Vec3& b) {
  return std::acos(std::clamp(a.dot(b), -1.0, 1.0)) * 180.0 / std::numbers::pi;
}

bool lex_less(const Vec3& a, const Vec3& b) {
  return std::lexicographical_compare(a.data(), a.data() + 3, b.data(), b.data() + 3);
}

}  // namespace

std::array<int, 3> branch_order(const Bifurcation& b) {
  if (b.branches.size() != 3) throw DataError("bifurcation must have exactly 3 branches");
  std::array<int, 3> idx{0, 1, 2};
  std::array<double, 3> radius{}, length{};
  for (int i = 0; i < 3; ++i) {
    radius[static_cast<std::size_t>(i)] = b.branches[static_cast<std::size_t>(i)].mean_radius();
    length[static_cast<std::size_t>(i)] = b.branches[static_cast<std::size_t>(i)].length();
  }
  std::stable_sort(idx.begin(), idx.end(), [&](int x, int y) {
    const auto ux = static_cast<std::size_t>(x), uy = static_cast<std::size_t>(y);
    if (radius[ux] != radius[uy]) return radius[ux] > radius[uy];
    if (length[ux] != length[uy]) return length[ux] > length[uy];
    return lex_less(b.branches[ux].polyline.back(), b.branches[uy].polyline.back());
  });
  return idx;
}

Bifurcation order_branches(const Bifurcation& b) {
  const auto idx = branch_order(b);
  Bifurcation out = b;
  for (int i = 0; i < 3; ++i) out.branches[static_cast<std::size_t>(i)] = b.branches[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])];
  return out;
}

double tortuosity(const std::vector<Vec3>& polyline) {
  if (polyline.size() < 2) throw DataError("tortuosity needs >= 2 points");
  const double chord = (polyline.back() - polyline.front()).norm();
  if (chord <= 0.0) throw DataError("tortuosity undefined for a closed branch (zero chord)");
  return arc_length(polyline) / chord;
}

Vec3 point_at_arc_length(const std::vector<Vec3>& polyline, double s) {
  if (polyline.empty()) throw DataError("empty polyline");
  if (s <= 0.0) return polyline.front();
  double acc = 0.0;
  for (std::size_t i = 1; i < polyline.size(); ++i) {
    const double seg = (polyline[i] - polyline[i - 1]).norm();
    if (acc + seg >= s && seg > 0.0) return polyline[i - 1] + (s - acc) / seg * (polyline[i] - polyline[i - 1]);
    acc += seg;
  }
  return polyline.back();
}

Vec3 branch_tangent(const BranchView& branch, double probe_mm) {
  const double len = branch.length();
  if (branch.polyline.size() < 2 || len <= 0.0) throw DataError("tangent of a zero-length branch");
  const Vec3 d = point_at_arc_length(branch.polyline, std::min(probe_mm, len / 2.0)) - branch.polyline.front();
  if (d.norm() <= 0.0) throw DataError("degenerate branch tangent");
  return d.normalized();
}

std::vector<Vec3> resample_polyline(const std::vector<Vec3>& polyline, double step) {
  const double len = arc_length(polyline);
  std::vector<Vec3> out;
  if (polyline.empty()) return out;
  const auto n = static_cast<int>(std::floor(len / step + 1e-9));
  out.reserve(static_cast<std::size_t>(n) + 2);
  for (int k = 0; k <= n; ++k) out.push_back(point_at_arc_length(polyline, k * step));
  if (len - n * step > 1e-9) out.push_back(polyline.back());
  return out;
}

std::vector<double> menger_curvatures(const std::vector<Vec3>& p) {
  std::vector<double> out;
  for (std::size_t i = 1; i + 1 < p.size(); ++i) {
    const Vec3 a = p[i] - p[i - 1], b = p[i + 1] - p[i], c = p[i + 1] - p[i - 1];
    const double denom = a.norm() * b.norm() * c.norm();
    out.push_back(denom > 0.0 ? 2.0 * a.cross(b).norm() / denom : 0.0);
  }
  return out;
}

FeatureVector61 features(const Bifurcation& b, const FeatureContext& ctx) {
  if (b.branches.size() != 3) throw DataError("bifurcation must have exactly 3 branches");
  FeatureVector61 fv;
  auto& v = fv.values;
  std::array<double, 3> L{}, T{}, R{};
  std::array<Vec3, 3> tangent;
  for (int i = 0; i < 3; ++i) {
    const BranchView& br = b.branches[static_cast<std::size_t>(i)];
    if (br.polyline.size() < 2 || br.radii.size() != br.polyline.size())
      throw DataError("branch needs >= 2 points with one radius each");
    const double len = br.length();
    const double chord = (br.polyline.back() - br.polyline.front()).norm();
    if (len <= 0.0 || chord <= 0.0) throw DataError("degenerate branch geometry");
    const double tort = len / chord;
    const auto [rmin, rmax] = std::minmax_element(br.radii.begin(), br.radii.end());
    const double rmean = br.mean_radius();
    double var = 0.0;
    for (double r : br.radii) var += (r - rmean) * (r - rmean);
    var /= static_cast<double>(br.radii.size());
    const auto curv = menger_curvatures(resample_polyline(br.polyline, 0.5));
    const double cmean = curv.empty() ? 0.0 : std::accumulate(curv.begin(), curv.end(), 0.0) / static_cast<double>(curv.size());
    const double cmax = curv.empty() ? 0.0 : *std::max_element(curv.begin(), curv.end());

    v[slot::branch(i, slot::arc_length)] = len;
    v[slot::branch(i, slot::chord_length)] = chord;
    v[slot::branch(i, slot::tortuosity)] = tort;
    v[slot::branch(i, slot::mean_radius)] = rmean;
    v[slot::branch(i, slot::min_radius)] = *rmin;
    v[slot::branch(i, slot::max_radius)] = *rmax;
    v[slot::branch(i, slot::radius_std)] = std::sqrt(var);
    v[slot::branch(i, slot::proximal_radius)] = br.radii.front();
    v[slot::branch(i, slot::distal_radius)] = br.radii.back();
    v[slot::branch(i, slot::taper)] = (br.radii.front() - br.radii.back()) / len;
    v[slot::branch(i, slot::mean_curvature)] = cmean;
    v[slot::branch(i, slot::max_curvature)] = cmax;
    L[static_cast<std::size_t>(i)] = len;
    T[static_cast<std::size_t>(i)] = tort;
    R[static_cast<std::size_t>(i)] = rmean;
    tangent[static_cast<std::size_t>(i)] = branch_tangent(br);
  }

  const Vec3 rel = (b.center - ctx.volume_origin).cwiseQuotient(ctx.volume_extent);
  v[slot::norm_x] = std::clamp(rel.x(), 0.0, 1.0);
  v[slot::norm_y] = std::clamp(rel.y(), 0.0, 1.0);
  v[slot::norm_z] = std::clamp(rel.z(), 0.0, 1.0);

  const double a01 = angle_deg(tangent[0], tangent[1]);
  const double a02 = angle_deg(tangent[0], tangent[2]);
  const double a12 = angle_deg(tangent[1], tangent[2]);
  v[slot::angle01] = a01;
  v[slot::angle02] = a02;
  v[slot::angle12] = a12;
  v[slot::angle_sum] = a01 + a02 + a12;
  v[slot::angle_min] = std::min({a01, a02, a12});
  v[slot::angle_max] = std::max({a01, a02, a12});

  const Vec3 normal = tangent[1].cross(tangent[2]);
  v[slot::planarity] = normal.norm() < kTiny
                           ? 0.0
                           : std::asin(std::clamp(std::abs(tangent[0].dot(normal.normalized())), 0.0, 1.0)) * 180.0 /
                                 std::numbers::pi;

  v[slot::radius_ratio10] = safe_ratio(R[1], R[0]);
  v[slot::radius_ratio20] = safe_ratio(R[2], R[0]);
  v[slot::radius_ratio21] = safe_ratio(R[2], R[1]);
  v[slot::length_ratio10] = safe_ratio(L[1], L[0]);
  v[slot::length_ratio20] = safe_ratio(L[2], L[0]);
  v[slot::length_ratio21] = safe_ratio(L[2], L[1]);
  v[slot::tort_ratio10] = safe_ratio(T[1], T[0]);
  v[slot::tort_ratio20] = safe_ratio(T[2], T[0]);
  v[slot::tort_ratio21] = safe_ratio(T[2], T[1]);

  const double r0c = R[0] * R[0] * R[0];
  v[slot::murray_deviation] = safe_ratio(std::abs(r0c - R[1] * R[1] * R[1] - R[2] * R[2] * R[2]), r0c);
  v[slot::asymmetry] = safe_ratio(R[1] * R[1] - R[2] * R[2], R[1] * R[1] + R[2] * R[2]);
  v[slot::total_length] = L[0] + L[1] + L[2];
  v[slot::mean_of_mean_radii] = (R[0] + R[1] + R[2]) / 3.0;

  double nearest = 0.0;
  bool found = false;
  for (const auto& c : ctx.all_centers) {
    const double d = (c - b.center).norm();
    if (d < 1e-9) continue;
    if (!found || d < nearest) nearest = d;
    found = true;
  }
  v[slot::nearest_bifurcation_distance] = nearest;
  v[slot::centroid_distance] = (b.center - ctx.tree_centroid).norm();

  for (double x : v)
    if (!std::isfinite(x)) throw NumericError("non-finite geometric feature");
  if (b.label) fv.label = *b.label;
  return fv;
}

Vec3 tree_centroid(const VesselGraph& g) {
  Vec3 c = Vec3::Zero();
  std::size_t n = 0;
  for (const auto& e : g.edges)
    for (const auto& p : e.points) {
      c += p;
      ++n;
    }
  return n ? Vec3(c / static_cast<double>(n)) : c;
}

std::string feature_csv_header() {
  std::string h;
  for (int i = 1; i <= kNumGeomFeatures; ++i) {
    h += "slot_";
    if (i < 10) h += '0';
    h += std::to_string(i);
    h += ',';
  }
  return h + "label,bif_id";
}

}  // namespace cowlab
