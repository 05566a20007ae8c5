#include "cowlab/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include <nlohmann/json.hpp>

namespace cowlab {

using nlohmann::json;

std::optional<ClassTag> parse_class_tag(std::string_view s) {
  for (int i = 0; i < kNumClasses; ++i) {
    if (kClassNames[i] == s) return tag_from_index(i);
  }
  return std::nullopt;
}

Volume3D::Volume3D(Index3 dims, Vec3 spacing, Vec3 origin, float fill)
    : dims_(dims), spacing_(spacing), origin_(origin) {
  if (dims[0] <= 0 || dims[1] <= 0 || dims[2] <= 0) throw DataError("volume dims must be positive");
  data_.assign(static_cast<std::size_t>(dims[0]) * dims[1] * dims[2], fill);
  validate();
}

Volume3D::Volume3D(Index3 dims, Vec3 spacing, Vec3 origin, std::vector<float> data)
    : dims_(dims), spacing_(spacing), origin_(origin), data_(std::move(data)) {
  validate();
}

void Volume3D::validate() const {
  if (dims_[0] <= 0 || dims_[1] <= 0 || dims_[2] <= 0) throw DataError("volume dims must be positive");
  if (data_.size() != static_cast<std::size_t>(dims_[0]) * dims_[1] * dims_[2])
    throw DataError("volume data length does not match dims");
  if (!(spacing_.array() > 0.0).all()) throw DataError("volume spacing must be positive");
  for (float x : data_)
    if (!std::isfinite(x)) throw DataError("volume contains non-finite intensity");
}

Index3 Volume3D::nearest_voxel(const Vec3& p) const {
  Vec3 r = (p - origin_).cwiseQuotient(spacing_);
  return {static_cast<int>(std::lround(r.x())), static_cast<int>(std::lround(r.y())),
          static_cast<int>(std::lround(r.z()))};
}

namespace {

static_assert(sizeof(float) == 4);

std::uint32_t load_le32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void store_le32(unsigned char* p, std::uint32_t v) {
  p[0] = static_cast<unsigned char>(v & 0xff);
  p[1] = static_cast<unsigned char>((v >> 8) & 0xff);
  p[2] = static_cast<unsigned char>((v >> 16) & 0xff);
  p[3] = static_cast<unsigned char>((v >> 24) & 0xff);
}

Vec3 vec3_from_json(const json& j, const char* key) {
  const auto& a = j.at(key);
  if (!a.is_array() || a.size() != 3) throw DataError(std::string("sidecar field '") + key + "' must be a 3-array");
  return Vec3(a[0].get<double>(), a[1].get<double>(), a[2].get<double>());
}

}  // namespace

Volume3D read_volume(const std::filesystem::path& sidecar) {
  std::ifstream in(sidecar);
  if (!in) throw DataError("cannot open volume sidecar: " + sidecar.string());
  json meta;
  Index3 dims{};
  Vec3 spacing, origin;
  std::string data_file;
  try {
    in >> meta;
    const auto& d = meta.at("dims");
    if (!d.is_array() || d.size() != 3) throw DataError("sidecar 'dims' must be a 3-array");
    for (int a = 0; a < 3; ++a) dims[a] = d[a].get<int>();
    spacing = vec3_from_json(meta, "spacing");
    origin = vec3_from_json(meta, "origin");
    data_file = meta.at("data_file").get<std::string>();
    if (meta.contains("dtype") && meta["dtype"].get<std::string>() != "f32le")
      throw DataError("unsupported dtype: " + meta["dtype"].get<std::string>());
  } catch (const json::exception& e) {
    throw DataError("malformed volume sidecar " + sidecar.string() + ": " + e.what());
  }
  if (dims[0] <= 0 || dims[1] <= 0 || dims[2] <= 0) throw DataError("sidecar dims must be positive");

  const auto raw_path = sidecar.parent_path() / data_file;
  std::ifstream raw(raw_path, std::ios::binary);
  if (!raw) throw DataError("cannot open raw volume: " + raw_path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(raw)), std::istreambuf_iterator<char>());
  const std::size_t n = static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  if (bytes.size() != n * 4)
    throw DataError("raw size mismatch: expected " + std::to_string(n * 4) + " bytes, found " +
                    std::to_string(bytes.size()));

  std::vector<float> data(n);
  for (std::size_t i = 0; i < n; ++i) data[i] = std::bit_cast<float>(load_le32(&bytes[4 * i]));
  return Volume3D(dims, spacing, origin, std::move(data));
}

void write_volume(const Volume3D& v, const std::filesystem::path& sidecar) {
  auto raw_path = sidecar;
  raw_path.replace_extension(".raw");
  json meta = {
      {"dims", {v.dims()[0], v.dims()[1], v.dims()[2]}},
      {"spacing", {v.spacing().x(), v.spacing().y(), v.spacing().z()}},
      {"origin", {v.origin().x(), v.origin().y(), v.origin().z()}},
      {"data_file", raw_path.filename().string()},
      {"dtype", "f32le"},
  };
  std::ofstream out(sidecar);
  if (!out) throw DataError("cannot write volume sidecar: " + sidecar.string());
  out << meta.dump(2) << '\n';

  std::vector<unsigned char> bytes(v.size() * 4);
  auto d = v.data();
  for (std::size_t i = 0; i < d.size(); ++i) store_le32(&bytes[4 * i], std::bit_cast<std::uint32_t>(d[i]));
  std::ofstream raw(raw_path, std::ios::binary);
  if (!raw) throw DataError("cannot write raw volume: " + raw_path.string());
  raw.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!raw) throw DataError("short write: " + raw_path.string());
}

Patch3D extract_patch(const Volume3D& v, const Index3& center, int side) {
  if (side <= 0) throw DataError("patch side must be positive");
  if (!v.contains(center[0], center[1], center[2])) throw DataError("patch center outside volume");
  Patch3D p;
  p.side = side;
  p.center_voxel = center;
  p.data.assign(static_cast<std::size_t>(side) * side * side, 0.0f);
  const int half = side / 2;
  for (int k = 0; k < side; ++k) {
    const int vz = center[2] - half + k;
    for (int j = 0; j < side; ++j) {
      const int vy = center[1] - half + j;
      for (int i = 0; i < side; ++i) {
        const int vx = center[0] - half + i;
        if (!v.contains(vx, vy, vz)) continue;
        p.data[static_cast<std::size_t>(i + side * (j + side * k))] = std::clamp(v(vx, vy, vz), 0.0f, 1.0f);
      }
    }
  }
  return p;
}

double percentile(std::span<const float> values, double q) {
  if (values.empty()) throw DataError("percentile of empty set");
  std::vector<float> tmp(values.begin(), values.end());
  const double pos = std::clamp(q, 0.0, 100.0) / 100.0 * static_cast<double>(tmp.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const double frac = pos - static_cast<double>(lo);
  std::nth_element(tmp.begin(), tmp.begin() + static_cast<std::ptrdiff_t>(lo), tmp.end());
  const double a = tmp[lo];
  if (frac == 0.0 || lo + 1 >= tmp.size()) return a;
  const double b = *std::min_element(tmp.begin() + static_cast<std::ptrdiff_t>(lo) + 1, tmp.end());
  return a + frac * (b - a);
}

Volume3D normalize_volume(const Volume3D& v) {
  if (v.empty()) throw DataError("cannot normalize an empty volume");
  const double p1 = percentile(v.data(), 1.0);
  const double p99 = percentile(v.data(), 99.0);
  std::vector<float> out(v.size(), 0.0f);
  if (p99 > p1) {
    const double scale = 1.0 / (p99 - p1);
    auto in = v.data();
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = static_cast<float>(std::clamp((static_cast<double>(in[i]) - p1) * scale, 0.0, 1.0));
  }
  return Volume3D(v.dims(), v.spacing(), v.origin(), std::move(out));
}

}  // namespace cowlab
