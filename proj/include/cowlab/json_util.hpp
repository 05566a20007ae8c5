#pragma once

#include <nlohmann/json.hpp>

#include "cowlab/common.hpp"

namespace cowlab {

inline constexpr int kModelFormatVersion = 1;

/// Row-major matrix with a shape header.
inline nlohmann::json matrix_to_json(const Mat& m) {
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
}

inline Mat matrix_from_json(const nlohmann::json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (static_cast<Eigen::Index>(data.size()) != rows * cols) throw DataError("matrix JSON shape mismatch");
  Mat m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = data[static_cast<std::size_t>(r * cols + c)];
  return m;
}

inline nlohmann::json vector_to_json(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline Vec vector_from_json(const nlohmann::json& j) {
  const auto d = j.get<std::vector<double>>();
  return Eigen::Map<const Vec>(d.data(), static_cast<Eigen::Index>(d.size()));
}

}  // namespace cowlab
