#include "factcal/adapter.hpp"

#include "factcal/errors.hpp"
#include "factcal/model.hpp"

#include <random>

namespace factcal {

template <typename Scalar>
AdapterState<Scalar> init_adapter(const AdapterConfig& config, int d) {
  if (config.slots < 1) throw ConfigError("adapter needs at least one slot");
  AdapterState<Scalar> a;
  a.key.resize(config.slots, d);
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, config.init_scale);
  for (Eigen::Index i = 0; i < a.key.size(); ++i) a.key.data()[i] = static_cast<Scalar>(normal(rng));
  a.value = Matrix<Scalar>::Zero(config.slots, d);
  return a;
}

template <typename Scalar>
Var<Scalar> delta_ffn(Var<Scalar> h, Var<Scalar> key, Var<Scalar> value) {
  if (key.rows() != value.rows() || key.cols() != value.cols()) {
    throw DimensionError("adapter key " + shape_string(key.value()) + " and value " + shape_string(value.value()) +
                         " differ");
  }
  return matmul(gelu(matmul_nt(h, key)), value);
}

template <typename Scalar>
Matrix<Scalar> delta_ffn(const Matrix<Scalar>& h, const AdapterState<Scalar>& adapter) {
  if (h.cols() != adapter.key.cols()) {
    throw DimensionError("delta_ffn: input " + shape_string(h) + " vs adapter keys " + shape_string(adapter.key));
  }
  Graph<Scalar> g;
  return delta_ffn(g.constant(h), g.constant(adapter.key), g.constant(adapter.value)).value();
}

template <typename Scalar>
Matrix<Scalar> calibrated_ffn(const ModelState<Scalar>& state, const Matrix<Scalar>& h, int layer) {
  if (!state.adapter) throw std::logic_error("calibrated_ffn: model has no adapter attached");
  if (layer != state.adapter->attach_layer) {
    throw std::logic_error("calibrated_ffn: adapter is attached at layer " + std::to_string(state.adapter->attach_layer) +
                           ", not " + std::to_string(layer));
  }
  Matrix<Scalar> out = ffn_forward(state, h, layer);
  out += delta_ffn(h, adapter_of(state));
  return out;
}

template <typename Scalar>
void attach(ModelState<Scalar>& state, const AdapterConfig& config, AdapterState<Scalar> adapter) {
  config.validate(state.config);
  if (state.adapter || state.has(kAdapterKey)) throw std::logic_error("attach: model already carries an adapter");
  if (adapter.key.rows() != config.slots || adapter.key.cols() != state.config.d ||
      adapter.value.rows() != config.slots || adapter.value.cols() != state.config.d) {
    throw DimensionError("attach: adapter shapes " + shape_string(adapter.key) + "/" + shape_string(adapter.value) +
                         " do not match " + std::to_string(config.slots) + " slots x d=" + std::to_string(state.config.d));
  }
  for (auto& [name, p] : state.tensors) p.frozen = true;
  state.tensors[kAdapterKey] = {std::move(adapter.key), false};
  state.tensors[kAdapterValue] = {std::move(adapter.value), false};
  state.adapter = config;
}

template <typename Scalar>
void attach(ModelState<Scalar>& state, const AdapterConfig& config) {
  attach(state, config, init_adapter<Scalar>(config, state.config.d));
}

template <typename Scalar>
AdapterState<Scalar> adapter_of(const ModelState<Scalar>& state) {
  if (!state.adapter) throw std::logic_error("model has no adapter attached");
  return {state.at(kAdapterKey), state.at(kAdapterValue)};
}

template <typename Scalar>
ModelState<Scalar> without_adapter(const ModelState<Scalar>& state) {
  ModelState<Scalar> out;
  out.config = state.config;
  for (const auto& [name, p] : state.tensors) {
    if (name.rfind("adapter.", 0) != 0) out.tensors.emplace(name, p);
  }
  return out;
}

#define FACTCAL_INSTANTIATE(S)                                                               \
  template AdapterState<S> init_adapter<S>(const AdapterConfig&, int);                       \
  template Var<S> delta_ffn<S>(Var<S>, Var<S>, Var<S>);                                      \
  template Matrix<S> delta_ffn<S>(const Matrix<S>&, const AdapterState<S>&);                 \
  template Matrix<S> calibrated_ffn<S>(const ModelState<S>&, const Matrix<S>&, int);         \
  template void attach<S>(ModelState<S>&, const AdapterConfig&, AdapterState<S>);            \
  template void attach<S>(ModelState<S>&, const AdapterConfig&);                             \
  template AdapterState<S> adapter_of<S>(const ModelState<S>&);                              \
  template ModelState<S> without_adapter<S>(const ModelState<S>&);

FACTCAL_INSTANTIATE(float)
FACTCAL_INSTANTIATE(double)

#undef FACTCAL_INSTANTIATE

}  // namespace factcal
