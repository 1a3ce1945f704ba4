#pragma once

#include "factcal/assess.hpp"
#include "factcal/state.hpp"
#include "factcal/trainer.hpp"
#include "factcal/world.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace factcal {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitMissingArtifact = 3,
  kExitInvariantBreach = 4,
};

/// Which facts are handed to calibration: classifier output ("detected") or
/// the world's corruption labels ("corrupted"), lowest fact ids first.
struct CalibrationSelection {
  std::string source = "detected";
  int count = 100;
};

struct SweepSpec {
  std::string axis = "fact_count";  ///< fact_count | slot_count | attach_layer
  std::vector<int> values;          ///< attach_layer values are 1-based
  std::string facts_source = "detected";
  int facts = 100;               ///< fact count for the slot and layer axes
  double slots_per_fact = 0.64;  ///< fact_count axis: slots = max(1, round(n * slots_per_fact))
  bool parallel = false;

  void validate(const ModelConfig& model) const;
};

struct InterpretSpec {
  std::string sentence;  ///< empty = canonical prompt of the first calibrated fact
  int top_k = 10;
  int slot_top_k = 30;
};

struct RunConfig {
  std::uint64_t seed = 0;
  Precision precision = Precision::f32;
  std::filesystem::path out = "runs/default";
  std::filesystem::path world_definition;  ///< empty = built-in world
  WorldSpec world;
  ModelConfig model;
  AdapterConfig adapter;  ///< attach_layer -1 means the last layer
  TrainConfig pretrain;
  TrainConfig calibrate;
  TrainConfig continue_pretrain;
  CkaConfig cka;
  CalibrationSelection calibration;
  SweepSpec sweep;
  InterpretSpec interpret;

  /// Fills derived fields (component seeds, attach layer) and validates.
  void resolve();
  /// Config as recorded in manifests; the output directory is left out so
  /// runs in different directories hash identically.
  nlohmann::json to_json() const;
};

inline constexpr std::string_view kEnvPrefix = "FACTCAL_";

nlohmann::json default_config_json();

/// Applies FACTCAL_* overrides: FACTCAL_SEED=3, FACTCAL_PRETRAIN__STEPS=500
/// ("__" separates nesting levels). Values are parsed as JSON, falling back
/// to plain strings. Unknown keys throw ConfigError.
void apply_env_overrides(nlohmann::json& config, const std::map<std::string, std::string>& env);

/// FACTCAL_* variables of the current process environment.
std::map<std::string, std::string> environment_overrides();

/// Defaults, then the optional file, then environment overrides.
nlohmann::json load_config_json(const std::optional<std::filesystem::path>& file,
                                const std::map<std::string, std::string>& env);

RunConfig run_config_from_json(const nlohmann::json& j);

// ---- artifacts ----------------------------------------------------------------

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

/// Per-stage manifest: config, inputs and outputs with their hashes, and
/// metric outcomes. The manifest hash covers stage, config and inputs, so it
/// is known before any output is written.
class Manifest {
 public:
  Manifest(std::string stage, const RunConfig& config);

  void add_input(const std::filesystem::path& root, const std::filesystem::path& relative);
  /// Freezes the inputs and returns the manifest hash.
  const std::string& seal();
  const std::string& hash() const;
  void add_output(const std::filesystem::path& root, const std::filesystem::path& relative);
  void set_metric(const std::string& key, nlohmann::json value);
  void write(const std::filesystem::path& root) const;

 private:
  std::string stage_;
  nlohmann::json config_;
  std::map<std::string, std::string> inputs_, outputs_;
  nlohmann::json metrics_ = nlohmann::json::object();
  std::string hash_;
};

// ---- reports ---------------------------------------------------------------------

struct ModelEval {
  std::string model;
  double false_rate = 0.0;
  double ori_ppl = 0.0;
  double adv_ppl = 0.0;
  double lm_ppl = 0.0;
  double em = 0.0;
  double f1 = 0.0;
  std::size_t calibration_params = 0;
};

nlohmann::json eval_table_json(const std::vector<ModelEval>& rows);
std::string eval_table_csv(const std::vector<ModelEval>& rows);
std::string eval_table_text(const std::vector<ModelEval>& rows);

struct SweepPoint {
  int value = 0;
  int facts = 0;
  int slots = 0;
  int attach_layer = 0;  ///< 1-based
  double em = 0.0;
  double f1 = 0.0;
  double false_rate = 0.0;
};

std::string sweep_csv(const std::string& axis, const std::vector<SweepPoint>& points);
/// Line chart of EM, F1 and false rate against the sweep value.
std::string sweep_svg(const std::string& axis, const std::vector<SweepPoint>& points);

// ---- commands --------------------------------------------------------------------

void cmd_worldgen(const RunConfig& config);
void cmd_pretrain(const RunConfig& config);
void cmd_assess(const RunConfig& config);
void cmd_calibrate(const RunConfig& config);
void cmd_continue_pretrain(const RunConfig& config);
void cmd_eval(const RunConfig& config);
void cmd_sweep(const RunConfig& config);
void cmd_interpret(const RunConfig& config);
/// worldgen, pretrain, assess, calibrate, continue-pretrain, eval, interpret.
void cmd_pipeline(const RunConfig& config);

/// Maps the exception hierarchy onto exit codes.
int exit_code_for(const std::exception& e);

}  // namespace factcal
