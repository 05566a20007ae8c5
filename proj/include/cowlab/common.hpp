#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Dense>

namespace cowlab {

using Vec3 = Eigen::Vector3d;
using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

/// The 14 classes: 13 labeled Circle-of-Willis junctions and the catch-all BN.
enum class ClassTag : std::uint8_t { A = 0, B, C, D, E, F, G, H, I, J, K, L, M, BN };

inline constexpr int kNumClasses = 14;
inline constexpr int kNumBoiClasses = 13;

inline constexpr std::array<std::string_view, kNumClasses> kClassNames = {
    "A", "B", "C", "D", "E", "F", "G", "H", "I", "J", "K", "L", "M", "BN"};

inline std::string_view to_string(ClassTag t) { return kClassNames[static_cast<int>(t)]; }
inline int index_of(ClassTag t) { return static_cast<int>(t); }
inline ClassTag tag_from_index(int i) { return static_cast<ClassTag>(i); }

std::optional<ClassTag> parse_class_tag(std::string_view s);

/// Strict string ordering of tag names ("BN" sorts between "B" and "C").
/// Every tie-break in the library goes through this.
inline bool alphabetically_before(ClassTag a, ClassTag b) { return to_string(a) < to_string(b); }

/// SplitMix64 finalizer over (seed, stream): independent child seeds.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Error families map one-to-one onto CLI exit codes.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace cowlab
