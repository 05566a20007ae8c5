#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cowlab/common.hpp"

namespace cowlab {

using Index3 = std::array<int, 3>;

/// Scalar voxel grid, x-fastest. Spacing and origin in mm.
class Volume3D {
 public:
  Volume3D() = default;
  Volume3D(Index3 dims, Vec3 spacing, Vec3 origin, float fill = 0.0f);
  Volume3D(Index3 dims, Vec3 spacing, Vec3 origin, std::vector<float> data);

  const Index3& dims() const { return dims_; }
  const Vec3& spacing() const { return spacing_; }
  const Vec3& origin() const { return origin_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<const float> data() const { return data_; }
  std::span<float> data() { return data_; }

  std::size_t index(int i, int j, int k) const {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(dims_[0]) *
               (static_cast<std::size_t>(j) + static_cast<std::size_t>(dims_[1]) * static_cast<std::size_t>(k));
  }
  bool contains(int i, int j, int k) const {
    return i >= 0 && j >= 0 && k >= 0 && i < dims_[0] && j < dims_[1] && k < dims_[2];
  }
  float operator()(int i, int j, int k) const { return data_[index(i, j, k)]; }
  float& operator()(int i, int j, int k) { return data_[index(i, j, k)]; }

  /// Voxel center in mm.
  Vec3 position(int i, int j, int k) const {
    return origin_ + Vec3(i * spacing_.x(), j * spacing_.y(), k * spacing_.z());
  }
  Vec3 extent() const {
    return Vec3(dims_[0] * spacing_.x(), dims_[1] * spacing_.y(), dims_[2] * spacing_.z());
  }
  /// Nearest voxel index to a point in mm (may be out of bounds).
  Index3 nearest_voxel(const Vec3& p) const;

 private:
  void validate() const;

  Index3 dims_{0, 0, 0};
  Vec3 spacing_{1.0, 1.0, 1.0};
  Vec3 origin_{0.0, 0.0, 0.0};
  std::vector<float> data_;
};

struct Patch3D {
  int side = 32;
  std::vector<float> data;  // side^3, x-fastest, values in [0,1]
  std::string source_volume_id;
  Index3 center_voxel{0, 0, 0};
  ClassTag label = ClassTag::BN;

  float at(int i, int j, int k) const {
    return data[static_cast<std::size_t>(i + side * (j + side * k))];
  }
};

inline constexpr int kPatchSide = 32;

Volume3D read_volume(const std::filesystem::path& sidecar);

/// Writes `sidecar` (.json) and a raw float32 blob next to it with the same stem.
void write_volume(const Volume3D& v, const std::filesystem::path& sidecar);

/// Crops a side^3 cube whose voxel (side/2, side/2, side/2) is `center`.
/// Out-of-bounds voxels are 0. Expects an already-normalized volume; values
/// are clamped to [0,1].
Patch3D extract_patch(const Volume3D& v, const Index3& center, int side = kPatchSide);

/// Linear-interpolated percentile (q in [0,100]) over all voxels.
double percentile(std::span<const float> values, double q);

/// (x - p1) / (p99 - p1) clamped to [0,1]; all zeros when p99 == p1.
Volume3D normalize_volume(const Volume3D& v);

}  // namespace cowlab
