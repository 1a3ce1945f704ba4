#pragma once

#include <Eigen/Core>

#include <string>

namespace factcal {

/// Dense row-major matrix; every tensor in the model is two dimensional
/// (vectors are 1 x n rows).
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

/// Run-wide floating point mode. Never mixed within one run.
enum class Precision { f32, f64 };

inline std::string precision_name(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

template <typename Scalar>
constexpr Precision precision_of() {
  return sizeof(Scalar) == 4 ? Precision::f32 : Precision::f64;
}

template <typename Derived>
std::string shape_string(const Eigen::EigenBase<Derived>& m) {
  return "[" + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + "]";
}

}  // namespace factcal
