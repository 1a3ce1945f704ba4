#include "factcal/state.hpp"

#include "factcal/errors.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

namespace factcal {

using nlohmann::json;

void ModelConfig::validate() const {
  if (d <= 0 || d_ff <= 0 || n_layers <= 0 || n_heads <= 0 || vocab_size <= 0 || max_seq_len <= 0) {
    throw ConfigError("model config: all sizes must be positive");
  }
  if (d % n_heads != 0) {
    throw ConfigError("model config: d=" + std::to_string(d) + " not divisible by n_heads=" + std::to_string(n_heads));
  }
  if (d_ff < d) throw ConfigError("model config: d_ff must be >= d");
}

std::size_t ModelConfig::parameter_count() const {
  const std::size_t dd = static_cast<std::size_t>(d);
  const std::size_t per_layer = 2 * dd + 4 * dd * dd + 2 * static_cast<std::size_t>(d_ff) * dd;
  return static_cast<std::size_t>(vocab_size) * dd + static_cast<std::size_t>(max_seq_len) * dd +
         static_cast<std::size_t>(n_layers) * per_layer + dd;
}

void AdapterConfig::validate(const ModelConfig& model) const {
  if (slots < 1) throw ConfigError("adapter config: slots must be >= 1");
  if (attach_layer < 0 || attach_layer >= model.n_layers) {
    throw ConfigError("adapter config: attach_layer " + std::to_string(attach_layer) + " outside [0, " +
                      std::to_string(model.n_layers) + ")");
  }
  if (init_scale < 0) throw ConfigError("adapter config: init_scale must be >= 0");
}

void to_json(json& j, const ModelConfig& c) {
  j = json{{"d", c.d},
           {"d_ff", c.d_ff},
           {"n_layers", c.n_layers},
           {"n_heads", c.n_heads},
           {"vocab_size", c.vocab_size},
           {"max_seq_len", c.max_seq_len},
           {"precision", c.precision == Precision::f32 ? 32 : 64},
           {"seed", c.seed}};
}

void from_json(const json& j, ModelConfig& c) {
  c.d = j.value("d", c.d);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
  const int bits = j.value("precision", c.precision == Precision::f32 ? 32 : 64);
  if (bits != 32 && bits != 64) throw ConfigError("precision must be 32 or 64");
  c.precision = bits == 32 ? Precision::f32 : Precision::f64;
  c.seed = j.value("seed", c.seed);
}

void to_json(json& j, const AdapterConfig& c) {
  j = json{{"slots", c.slots}, {"attach_layer", c.attach_layer}, {"init_scale", c.init_scale}, {"seed", c.seed}};
}

void from_json(const json& j, AdapterConfig& c) {
  c.slots = j.value("slots", c.slots);
  c.attach_layer = j.value("attach_layer", c.attach_layer);
  c.init_scale = j.value("init_scale", c.init_scale);
  c.seed = j.value("seed", c.seed);
}

template <typename Scalar>
const Matrix<Scalar>& ModelState<Scalar>::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw std::out_of_range("model state has no tensor '" + name + "'");
  return it->second.value;
}

template <typename Scalar>
Matrix<Scalar>& ModelState<Scalar>::at(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw std::out_of_range("model state has no tensor '" + name + "'");
  return it->second.value;
}

template <typename Scalar>
std::vector<std::string> ModelState<Scalar>::trainable_names() const {
  std::vector<std::string> out;
  for (const auto& [name, p] : tensors) {
    if (!p.frozen) out.push_back(name);
  }
  return out;
}

template <typename Scalar>
std::size_t ModelState<Scalar>::base_parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, p] : tensors) {
    if (name.rfind("adapter.", 0) != 0) n += static_cast<std::size_t>(p.value.size());
  }
  return n;
}

template <typename Scalar>
std::size_t ModelState<Scalar>::adapter_parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, p] : tensors) {
    if (name.rfind("adapter.", 0) == 0) n += static_cast<std::size_t>(p.value.size());
  }
  return n;
}

template <typename Scalar>
ModelState<Scalar> init_model(const ModelConfig& config) {
  config.validate();
  ModelState<Scalar> state;
  state.config = config;
  state.config.precision = precision_of<Scalar>();
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  auto random = [&](int rows, int cols) {
    Matrix<Scalar> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(normal(rng));
    return m;
  };
  auto ones = [](int cols) { return Matrix<Scalar>::Ones(1, cols); };
  const int d = config.d;
  state.tensors["embed"] = {random(config.vocab_size, d), false};
  state.tensors["pos"] = {random(config.max_seq_len, d), false};
  for (int l = 0; l < config.n_layers; ++l) {
    state.tensors[layer_tensor(l, "attn_norm")] = {ones(d), false};
    for (const char* w : {"attn.q", "attn.k", "attn.v", "attn.o"}) {
      state.tensors[layer_tensor(l, w)] = {random(d, d), false};
    }
    state.tensors[layer_tensor(l, "ffn_norm")] = {ones(d), false};
    state.tensors[layer_tensor(l, "ffn.key")] = {random(config.d_ff, d), false};
    state.tensors[layer_tensor(l, "ffn.value")] = {random(config.d_ff, d), false};
  }
  state.tensors["final_norm"] = {ones(d), false};
  return state;
}

namespace {

constexpr bool kLittleEndian = std::endian::native == std::endian::little;

template <typename T>
void append_le(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  if constexpr (!kLittleEndian) std::reverse(buf, buf + sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T read_le(const char* p) {
  char buf[sizeof(T)];
  std::memcpy(buf, p, sizeof(T));
  if constexpr (!kLittleEndian) std::reverse(buf, buf + sizeof(T));
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

bool in_scope(const std::string& name, CheckpointScope scope) {
  const bool is_adapter = name.rfind("adapter.", 0) == 0;
  switch (scope) {
    case CheckpointScope::full: return true;
    case CheckpointScope::base_only: return !is_adapter;
    case CheckpointScope::adapter_only: return is_adapter;
  }
  return true;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct ParsedCheckpoint {
  json header;
  std::string data;
};

ParsedCheckpoint parse(const std::string& bytes, const std::string& origin) {
  if (bytes.size() < 8) throw ConfigError("checkpoint " + origin + " is truncated");
  const auto len = read_le<std::uint64_t>(bytes.data());
  if (bytes.size() < 8 + len) throw ConfigError("checkpoint " + origin + " header is truncated");
  ParsedCheckpoint out;
  out.header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(len));
  out.data = bytes.substr(8 + len);
  return out;
}

template <typename Scalar>
void read_tensors(const ParsedCheckpoint& ck, ModelState<Scalar>& state, const std::string& origin) {
  const std::string dtype = precision_name(precision_of<Scalar>());
  for (const auto& item : ck.header.at("tensors").items()) {
    const std::string name = item.key();
    const json& meta = item.value();
    if (meta.at("dtype") != dtype) {
      throw ConfigError("checkpoint " + origin + ": tensor " + name + " is " + meta.at("dtype").get<std::string>() +
                        ", run precision is " + dtype);
    }
    const auto rows = meta.at("shape").at(0).get<Eigen::Index>();
    const auto cols = meta.at("shape").at(1).get<Eigen::Index>();
    const auto offset = meta.at("offset").get<std::size_t>();
    const std::size_t count = static_cast<std::size_t>(rows * cols);
    if (offset + count * sizeof(Scalar) > ck.data.size()) {
      throw ConfigError("checkpoint " + origin + ": tensor " + name + " exceeds data section");
    }
    Matrix<Scalar> m(rows, cols);
    for (std::size_t i = 0; i < count; ++i) {
      m.data()[i] = read_le<Scalar>(ck.data.data() + offset + i * sizeof(Scalar));
    }
    state.tensors[name] = {std::move(m), meta.at("frozen").get<bool>()};
  }
}

}  // namespace

template <typename Scalar>
std::string serialize_checkpoint(const ModelState<Scalar>& state, CheckpointScope scope) {
  json header;
  header["format"] = "factcal-checkpoint/1";
  header["namespace"] = scope == CheckpointScope::adapter_only ? "adapter" : "model";
  header["config"] = state.config;
  header["adapter"] = state.adapter && scope != CheckpointScope::base_only ? json(*state.adapter) : json(nullptr);
  json tensors = json::object();
  std::string data;
  const std::string dtype = precision_name(precision_of<Scalar>());
  for (const auto& [name, p] : state.tensors) {
    if (!in_scope(name, scope)) continue;
    tensors[name] = json{{"shape", {p.value.rows(), p.value.cols()}},
                         {"dtype", dtype},
                         {"offset", data.size()},
                         {"frozen", p.frozen}};
    for (Eigen::Index i = 0; i < p.value.size(); ++i) append_le(data, p.value.data()[i]);
  }
  header["tensors"] = std::move(tensors);
  const std::string h = header.dump();
  std::string out;
  append_le<std::uint64_t>(out, h.size());
  out += h;
  out += data;
  return out;
}

template <typename Scalar>
void save_checkpoint(const ModelState<Scalar>& state, const std::filesystem::path& path, CheckpointScope scope) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::string bytes = serialize_checkpoint(state, scope);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

template <typename Scalar>
ModelState<Scalar> load_checkpoint(const std::filesystem::path& path) {
  const auto ck = parse(read_file(path), path.string());
  ModelState<Scalar> state;
  state.config = ck.header.at("config").get<ModelConfig>();
  if (state.config.precision != precision_of<Scalar>()) {
    throw ConfigError("checkpoint " + path.string() + " was written at " + precision_name(state.config.precision) +
                      " but the run uses " + precision_name(precision_of<Scalar>()));
  }
  if (!ck.header.at("adapter").is_null()) state.adapter = ck.header.at("adapter").get<AdapterConfig>();
  read_tensors(ck, state, path.string());
  return state;
}

template <typename Scalar>
void load_adapter_into(ModelState<Scalar>& state, const std::filesystem::path& path) {
  const auto ck = parse(read_file(path), path.string());
  if (ck.header.value("namespace", "") != "adapter" || ck.header.at("adapter").is_null()) {
    throw ConfigError(path.string() + " is not an adapter checkpoint");
  }
  if (state.adapter) throw ConfigError("model already carries an adapter");
  const auto cfg = ck.header.at("adapter").get<AdapterConfig>();
  cfg.validate(state.config);
  for (auto& [name, p] : state.tensors) p.frozen = true;
  read_tensors(ck, state, path.string());
  state.adapter = cfg;
}

json read_checkpoint_header(const std::filesystem::path& path) { return parse(read_file(path), path.string()).header; }

#define FACTCAL_INSTANTIATE(S)                                                                       \
  template struct ModelState<S>;                                                                     \
  template ModelState<S> init_model<S>(const ModelConfig&);                                          \
  template std::string serialize_checkpoint<S>(const ModelState<S>&, CheckpointScope);               \
  template void save_checkpoint<S>(const ModelState<S>&, const std::filesystem::path&, CheckpointScope); \
  template ModelState<S> load_checkpoint<S>(const std::filesystem::path&);                          \
  template void load_adapter_into<S>(ModelState<S>&, const std::filesystem::path&);

FACTCAL_INSTANTIATE(float)
FACTCAL_INSTANTIATE(double)

#undef FACTCAL_INSTANTIATE

}  // namespace factcal
