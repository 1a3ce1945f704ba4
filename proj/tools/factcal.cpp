// factcal: detect and calibrate false facts in a masked LM trained on a synthetic world.

#include "factcal/errors.hpp"
#include "factcal/pipeline.hpp"

#include <CLI11.hpp>

#include <functional>
#include <iostream>
#include <optional>
#include <string>

using namespace factcal;

int main(int argc, char** argv) {
  CLI::App app{"Detect false facts in a masked LM and calibrate them with an FFN adapter"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> precision;
  bool print_config = false;
  app.add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Run seed (component seeds derive from it)");
  app.add_option("--out", out, "Output directory");
  app.add_option("--precision", precision, "Floating-point width")->check(CLI::IsMember({32, 64}));
  app.add_flag("--print-config", print_config, "Print the resolved config before running");
  app.footer("Environment: " + std::string(kEnvPrefix) +
             "<KEY> overrides a config key, '__' separates nesting levels, e.g. FACTCAL_PRETRAIN__STEPS=500.\n"
             "Exit codes: 0 ok, 1 failure, 2 config error, 3 missing artifact, 4 invariant breach.");

  std::function<void(const RunConfig&)> command;
  auto add = [&](const std::string& name, const std::string& help, void (*fn)(const RunConfig&)) {
    auto* sub = app.add_subcommand(name, help);
    sub->callback([&command, fn] { command = fn; });
    return sub;
  };
  add("worldgen", "Generate the world, pretraining corpus and probe sets", cmd_worldgen);
  add("pretrain", "Pretrain the base masked LM on the corrupted corpus", cmd_pretrain);
  add("assess", "Score every fact with CKA and classify it", cmd_assess);
  add("calibrate", "Train the adapter on the detected false facts", cmd_calibrate);
  add("continue-pretrain", "Baseline: train all parameters on the calibration data", cmd_continue_pretrain);
  add("eval", "Vanilla vs calibrated vs continued-pretraining comparison table", cmd_eval);
  add("pipeline", "worldgen, pretrain, assess, calibrate, continue-pretrain, eval, interpret", cmd_pipeline);

  std::optional<std::string> axis;
  std::optional<std::vector<int>> values;
  std::optional<int> sweep_facts;
  bool parallel = false;
  auto* sweep = add("sweep", "Calibrate and evaluate once per sweep value", cmd_sweep);
  sweep->add_option("--axis", axis, "fact_count | slot_count | attach_layer")
      ->check(CLI::IsMember({"fact_count", "slot_count", "attach_layer"}));
  sweep->add_option("--values", values, "Sweep values (attach_layer is 1-based)")->delimiter(',');
  sweep->add_option("--facts", sweep_facts, "Fact count for the slot and layer axes");
  sweep->add_flag("--parallel", parallel, "Run sweep points on separate threads");

  std::optional<std::string> sentence;
  auto* interpret = add("interpret", "Layer trace and slot report for one masked sentence", cmd_interpret);
  interpret->add_option("--sentence", sentence, "Sentence with one [MASK] token");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    nlohmann::json j = load_config_json(config_path.empty() ? std::nullopt : std::optional<std::filesystem::path>(config_path),
                                        environment_overrides());
    if (seed) j["seed"] = *seed;
    if (out) j["out"] = *out;
    if (precision) j["precision"] = *precision;
    if (axis) j["sweep"]["axis"] = *axis;
    if (values) j["sweep"]["values"] = *values;
    if (sweep_facts) j["sweep"]["facts"] = *sweep_facts;
    if (parallel) j["sweep"]["parallel"] = true;
    if (sentence) j["interpret"]["sentence"] = *sentence;

    RunConfig config = run_config_from_json(j);
    config.resolve();
    if (print_config) std::cerr << config.to_json().dump(2) << '\n';
    command(config);
    return kExitOk;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
}
