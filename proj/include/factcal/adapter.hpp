#pragma once

#include "factcal/graph.hpp"
#include "factcal/state.hpp"

namespace factcal {

/// Calibration memory slots: row i of `key` and row i of `value` form slot i.
template <typename Scalar>
struct AdapterState {
  Matrix<Scalar> key;    ///< slots x d
  Matrix<Scalar> value;  ///< slots x d

  std::size_t parameter_count() const { return static_cast<std::size_t>(key.size() + value.size()); }
};

/// Keys ~ N(0, init_scale) from the adapter seed, values exactly zero, so a
/// freshly attached adapter leaves every model output unchanged.
template <typename Scalar>
AdapterState<Scalar> init_adapter(const AdapterConfig& config, int d);

/// GELU(H K~^T) V~ on the graph.
template <typename Scalar>
Var<Scalar> delta_ffn(Var<Scalar> h, Var<Scalar> key, Var<Scalar> value);

template <typename Scalar>
Matrix<Scalar> delta_ffn(const Matrix<Scalar>& h, const AdapterState<Scalar>& adapter);

/// FFN(H) + dFFN(H) for the layer the adapter is attached to.
template <typename Scalar>
Matrix<Scalar> calibrated_ffn(const ModelState<Scalar>& state, const Matrix<Scalar>& h, int layer);

/// Freezes every base tensor and installs a zero-value adapter.
template <typename Scalar>
void attach(ModelState<Scalar>& state, const AdapterConfig& config);

template <typename Scalar>
void attach(ModelState<Scalar>& state, const AdapterConfig& config, AdapterState<Scalar> adapter);

template <typename Scalar>
AdapterState<Scalar> adapter_of(const ModelState<Scalar>& state);

/// Copy of the state with adapter tensors removed.
template <typename Scalar>
ModelState<Scalar> without_adapter(const ModelState<Scalar>& state);

}  // namespace factcal
