#pragma once

#include "factcal/tensor.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace factcal {

struct ModelConfig {
  int d = 64;            ///< hidden size
  int d_ff = 256;        ///< FFN intermediate size (number of base key-value memories)
  int n_layers = 4;
  int n_heads = 4;
  int vocab_size = 0;    ///< filled from the world vocabulary
  int max_seq_len = 32;
  Precision precision = Precision::f32;
  std::uint64_t seed = 0;

  /// Throws ConfigError on any violated invariant.
  void validate() const;
  std::size_t parameter_count() const;
};

/// Calibration adapter placement and size.
struct AdapterConfig {
  int slots = 64;          ///< number of calibration memory slots
  int attach_layer = 3;
  double init_scale = 0.02;
  std::uint64_t seed = 0;

  void validate(const ModelConfig& model) const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const AdapterConfig& c);
void from_json(const nlohmann::json& j, AdapterConfig& c);

template <typename Scalar>
struct Parameter {
  Matrix<Scalar> value;
  bool frozen = false;
};

/// Named tensor map for the base transformer plus the optional adapter.
///
/// Base tensor names:
///   embed                    V x d (also the output projection)
///   pos                      max_seq_len x d
///   layers.<i>.attn_norm     1 x d
///   layers.<i>.attn.{q,k,v,o} d x d
///   layers.<i>.ffn_norm      1 x d
///   layers.<i>.ffn.key       d_ff x d
///   layers.<i>.ffn.value     d_ff x d
///   final_norm               1 x d
/// Adapter tensors live under "adapter." and exist only after attach().
template <typename Scalar>
struct ModelState {
  ModelConfig config;
  std::optional<AdapterConfig> adapter;
  std::map<std::string, Parameter<Scalar>> tensors;

  const Matrix<Scalar>& at(const std::string& name) const;
  Matrix<Scalar>& at(const std::string& name);
  bool has(const std::string& name) const { return tensors.count(name) != 0; }
  std::vector<std::string> trainable_names() const;
  std::size_t base_parameter_count() const;
  std::size_t adapter_parameter_count() const;
};

inline std::string layer_tensor(int layer, const std::string& leaf) {
  return "layers." + std::to_string(layer) + "." + leaf;
}

inline const std::string kAdapterKey = "adapter.key";
inline const std::string kAdapterValue = "adapter.value";

/// Seeded N(0, 0.02) weights, unit norm gains.
template <typename Scalar>
ModelState<Scalar> init_model(const ModelConfig& config);

// ---- checkpoint container ----------------------------------------------------
//
// Little-endian layout: u64 header length, JSON header of that many bytes,
// then raw tensor data. The header records the model config, the adapter
// config (if any), a namespace tag ("model" or "adapter") and for each tensor
// its shape, dtype, byte offset into the data section and frozen flag.

enum class CheckpointScope { full, base_only, adapter_only };

template <typename Scalar>
std::string serialize_checkpoint(const ModelState<Scalar>& state, CheckpointScope scope = CheckpointScope::full);

template <typename Scalar>
void save_checkpoint(const ModelState<Scalar>& state, const std::filesystem::path& path,
                     CheckpointScope scope = CheckpointScope::full);

/// Reads a checkpoint; precision must match Scalar.
template <typename Scalar>
ModelState<Scalar> load_checkpoint(const std::filesystem::path& path);

/// Loads an adapter-namespace checkpoint into an existing base state.
template <typename Scalar>
void load_adapter_into(ModelState<Scalar>& state, const std::filesystem::path& path);

/// Header of a checkpoint file without touching its data section.
nlohmann::json read_checkpoint_header(const std::filesystem::path& path);

}  // namespace factcal
