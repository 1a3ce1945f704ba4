#include "factcal/errors.hpp"
#include "factcal/pipeline.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <memory>
#include <sstream>

extern char** environ;

namespace factcal {

using nlohmann::json;

namespace {

json train_json(const TrainConfig& c) {
  json j = c;
  j.erase("seed");
  return j;
}

TrainConfig make_train(int steps, double lr, int warmup) {
  TrainConfig c;
  c.steps = steps;
  c.learning_rate = lr;
  c.warmup_steps = warmup;
  return c;
}

/// Rejects keys that the defaults do not know (typos would otherwise be silently ignored).
void check_known(const json& value, const json& reference, const std::string& path) {
  if (!value.is_object() || !reference.is_object()) return;
  for (const auto& item : value.items()) {
    if (!reference.contains(item.key())) throw ConfigError("unknown config key '" + path + item.key() + "'");
    check_known(item.value(), reference.at(item.key()), path + item.key() + ".");
  }
}

void merge_into(json& base, const json& patch) {
  for (const auto& item : patch.items()) {
    if (item.value().is_object() && base.contains(item.key()) && base[item.key()].is_object()) {
      merge_into(base[item.key()], item.value());
    } else {
      base[item.key()] = item.value();
    }
  }
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

}  // namespace

void SweepSpec::validate(const ModelConfig& model) const {
  if (axis != "fact_count" && axis != "slot_count" && axis != "attach_layer") {
    throw ConfigError("sweep: unknown axis '" + axis + "' (fact_count | slot_count | attach_layer)");
  }
  if (facts_source != "detected" && facts_source != "corrupted") {
    throw ConfigError("sweep: facts_source must be 'detected' or 'corrupted'");
  }
  if (facts < 1) throw ConfigError("sweep: facts must be positive");
  if (!(slots_per_fact > 0.0)) throw ConfigError("sweep: slots_per_fact must be positive");
  for (int v : values) {
    if (v < 1) throw ConfigError("sweep: values must be positive");
    if (axis == "attach_layer" && v > model.n_layers) {
      throw ConfigError("sweep: layer " + std::to_string(v) + " outside 1.." + std::to_string(model.n_layers));
    }
  }
}

json default_config_json() {
  const WorldSpec world;
  json world_j = world;
  world_j.erase("seed");
  const ModelConfig model;
  const AdapterConfig adapter;
  const CkaConfig cka;
  const SweepSpec sweep;
  const InterpretSpec interp;
  return json{
      {"seed", 0},
      {"precision", 32},
      {"out", "runs/default"},
      {"world_definition", ""},
      {"world", world_j},
      {"model", {{"d", model.d}, {"d_ff", model.d_ff}, {"n_layers", model.n_layers}, {"n_heads", model.n_heads},
                 {"max_seq_len", model.max_seq_len}}},
      {"adapter", {{"slots", adapter.slots}, {"attach_layer", -1}, {"init_scale", adapter.init_scale}}},
      {"pretrain", train_json(make_train(10000, 3e-4, 200))},
      {"calibrate", train_json(make_train(2000, 1e-3, 100))},
      {"continue_pretrain", train_json(make_train(2000, 3e-4, 100))},
      {"cka", cka},
      {"calibration", {{"source", "detected"}, {"count", 100}}},
      {"sweep", {{"axis", sweep.axis}, {"values", json::array()}, {"facts_source", sweep.facts_source},
                 {"facts", sweep.facts}, {"slots_per_fact", sweep.slots_per_fact}, {"parallel", sweep.parallel}}},
      {"interpret", {{"sentence", interp.sentence}, {"top_k", interp.top_k}, {"slot_top_k", interp.slot_top_k}}},
  };
}

void apply_env_overrides(json& config, const std::map<std::string, std::string>& env) {
  for (const auto& [name, raw] : env) {
    if (name.rfind(kEnvPrefix, 0) != 0) continue;
    std::vector<std::string> path;
    std::string rest = name.substr(kEnvPrefix.size());
    for (std::size_t pos; (pos = rest.find("__")) != std::string::npos; rest = rest.substr(pos + 2)) {
      path.push_back(lower(rest.substr(0, pos)));
    }
    path.push_back(lower(rest));
    json* node = &config;
    for (std::size_t i = 0; i < path.size(); ++i) {
      if (!node->is_object() || !node->contains(path[i])) {
        throw ConfigError("environment override " + name + " names no config key");
      }
      node = &(*node)[path[i]];
    }
    json value;
    try {
      value = json::parse(raw);
    } catch (const json::parse_error&) {
      value = raw;
    }
    *node = value;
  }
}

std::map<std::string, std::string> environment_overrides() {
  std::map<std::string, std::string> out;
  for (char** e = environ; e && *e; ++e) {
    const std::string entry(*e);
    const auto eq = entry.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = entry.substr(0, eq);
    if (key.rfind(kEnvPrefix, 0) == 0) out[key] = entry.substr(eq + 1);
  }
  return out;
}

json load_config_json(const std::optional<std::filesystem::path>& file, const std::map<std::string, std::string>& env) {
  json config = default_config_json();
  if (file) {
    std::ifstream in(*file);
    if (!in) throw ConfigError("cannot read config file " + file->string());
    json patch;
    try {
      patch = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError("config file " + file->string() + ": " + e.what());
    }
    check_known(patch, config, "");
    merge_into(config, patch);
  }
  apply_env_overrides(config, env);
  return config;
}

RunConfig run_config_from_json(const json& j) {
  try {
    check_known(j, default_config_json(), "");
    RunConfig c;
    c.seed = j.at("seed").get<std::uint64_t>();
    const int bits = j.at("precision").get<int>();
    if (bits != 32 && bits != 64) throw ConfigError("precision must be 32 or 64");
    c.precision = bits == 32 ? Precision::f32 : Precision::f64;
    c.out = j.at("out").get<std::string>();
    c.world_definition = j.at("world_definition").get<std::string>();
    c.world = j.at("world").get<WorldSpec>();
    c.model = j.at("model").get<ModelConfig>();
    c.adapter = j.at("adapter").get<AdapterConfig>();
    c.pretrain = j.at("pretrain").get<TrainConfig>();
    c.calibrate = j.at("calibrate").get<TrainConfig>();
    c.continue_pretrain = j.at("continue_pretrain").get<TrainConfig>();
    c.cka = j.at("cka").get<CkaConfig>();
    const auto& cal = j.at("calibration");
    c.calibration.source = cal.at("source").get<std::string>();
    c.calibration.count = cal.at("count").get<int>();
    const auto& sw = j.at("sweep");
    c.sweep.axis = sw.at("axis").get<std::string>();
    c.sweep.values = sw.at("values").get<std::vector<int>>();
    c.sweep.facts_source = sw.at("facts_source").get<std::string>();
    c.sweep.facts = sw.at("facts").get<int>();
    c.sweep.slots_per_fact = sw.at("slots_per_fact").get<double>();
    c.sweep.parallel = sw.at("parallel").get<bool>();
    const auto& in = j.at("interpret");
    c.interpret.sentence = in.at("sentence").get<std::string>();
    c.interpret.top_k = in.at("top_k").get<int>();
    c.interpret.slot_top_k = in.at("slot_top_k").get<int>();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

void RunConfig::resolve() {
  world.seed = seed;
  model.precision = precision;
  model.seed = derive_seed(seed, 101);
  adapter.seed = derive_seed(seed, 102);
  pretrain.seed = derive_seed(seed, 103);
  calibrate.seed = derive_seed(seed, 104);
  continue_pretrain.seed = derive_seed(seed, 105);
  if (adapter.attach_layer == -1) adapter.attach_layer = model.n_layers - 1;

  world.validate();
  ModelConfig probe = model;
  if (probe.vocab_size == 0) probe.vocab_size = 1;  // filled from the world later
  probe.validate();
  adapter.validate(probe);
  pretrain.validate();
  calibrate.validate();
  continue_pretrain.validate();
  cka.validate();
  if (calibration.source != "detected" && calibration.source != "corrupted") {
    throw ConfigError("calibration.source must be 'detected' or 'corrupted'");
  }
  if (calibration.count < 1) throw ConfigError("calibration.count must be positive");
  sweep.validate(model);
  if (interpret.top_k < 1 || interpret.slot_top_k < 1) throw ConfigError("interpret: top_k must be positive");
  if (!world_definition.empty() && !std::filesystem::exists(world_definition)) {
    throw ConfigError("world definition file " + world_definition.string() + " does not exist");
  }
}

json RunConfig::to_json() const {
  json model_j = model;
  model_j.erase("vocab_size");
  return json{{"seed", seed},
              {"precision", precision == Precision::f32 ? 32 : 64},
              {"world_definition", world_definition.string()},
              {"world", world},
              {"model", model_j},
              {"adapter", adapter},
              {"pretrain", pretrain},
              {"calibrate", calibrate},
              {"continue_pretrain", continue_pretrain},
              {"cka", cka},
              {"calibration", {{"source", calibration.source}, {"count", calibration.count}}},
              {"sweep", {{"axis", sweep.axis}, {"values", sweep.values}, {"facts_source", sweep.facts_source},
                         {"facts", sweep.facts}, {"slots_per_fact", sweep.slots_per_fact}, {"parallel", sweep.parallel}}},
              {"interpret", {{"sentence", interpret.sentence}, {"top_k", interpret.top_k}, {"slot_top_k", interpret.slot_top_k}}}};
}

// ---- hashing and manifests -----------------------------------------------------

std::string sha256_hex(std::string_view bytes) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 || EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1) {
    throw std::runtime_error("sha256 failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 15]);
  }
  return out;
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("missing file " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return sha256_hex(bytes);
}

Manifest::Manifest(std::string stage, const RunConfig& config) : stage_(std::move(stage)), config_(config.to_json()) {}

void Manifest::add_input(const std::filesystem::path& root, const std::filesystem::path& relative) {
  if (!hash_.empty()) throw std::logic_error("manifest inputs are sealed");
  inputs_[relative.generic_string()] = sha256_file(root / relative);
}

const std::string& Manifest::seal() {
  if (hash_.empty()) hash_ = sha256_hex(json{{"stage", stage_}, {"config", config_}, {"inputs", inputs_}}.dump());
  return hash_;
}

const std::string& Manifest::hash() const {
  if (hash_.empty()) throw std::logic_error("manifest not sealed");
  return hash_;
}

void Manifest::add_output(const std::filesystem::path& root, const std::filesystem::path& relative) {
  outputs_[relative.generic_string()] = sha256_file(root / relative);
}

void Manifest::set_metric(const std::string& key, json value) { metrics_[key] = std::move(value); }

void Manifest::write(const std::filesystem::path& root) const {
  const json j{{"stage", stage_}, {"manifest_hash", hash()}, {"config", config_},
               {"inputs", inputs_},  {"outputs", outputs_},     {"metrics", metrics_}};
  const auto path = root / stage_ / "manifest.json";
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  out << j.dump(2) << '\n';
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kExitConfig;
  if (dynamic_cast<const MissingArtifactError*>(&e)) return kExitMissingArtifact;
  if (dynamic_cast<const InvariantBreach*>(&e)) return kExitInvariantBreach;
  return kExitFailure;
}

}  // namespace factcal
