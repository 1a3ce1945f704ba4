#include "factcal/pipeline.hpp"

#include "factcal/adapter.hpp"
#include "factcal/errors.hpp"
#include "factcal/interpret.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>
#include <thread>

namespace factcal {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kWorldDir = "worldgen";
const fs::path kPretrainDir = "pretrain";
const fs::path kAssessDir = "assess";
const fs::path kCalibrateDir = "calibrate";
const fs::path kContinueDir = "continue_pretrain";
const fs::path kEvalDir = "eval";
const fs::path kInterpretDir = "interpret";

const fs::path kBaseCkpt = kPretrainDir / "base.ckpt";
const fs::path kAdapterCkpt = kCalibrateDir / "adapter.ckpt";
const fs::path kContinueCkpt = kContinueDir / "cp.ckpt";
const fs::path kProbes = kWorldDir / "probes.jsonl";
const fs::path kAssessReport = kAssessDir / "report.json";

void log(const std::string& stage, const std::string& message) { std::cerr << "[" << stage << "] " << message << '\n'; }

void require(const fs::path& root, const fs::path& relative, const std::string& stage) {
  if (!fs::exists(root / relative)) {
    throw MissingArtifactError("missing " + relative.generic_string() + " in " + root.string() + "; run the '" + stage +
                               "' stage first");
  }
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

std::string csv_with_hash(const std::string& hash, const std::string& csv) { return "# manifest " + hash + "\n" + csv; }

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("cannot read " + path.string());
  return json::parse(in);
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s << std::setprecision(digits) << v;
  return s.str();
}

template <typename Fn>
void dispatch(Precision p, Fn&& fn) {
  if (p == Precision::f64) {
    fn(double{});
  } else {
    fn(float{});
  }
}

ProgressFn progress_logger(const std::string& stage) {
  return [stage](int step, double loss) { log(stage, "step " + std::to_string(step) + " loss " + fmt(loss)); };
}

World world_of(const fs::path& root) {
  require(root, kWorldDir / "world.json", "worldgen");
  return load_world(root / kWorldDir);
}

std::vector<ProbeSet> read_probes(const fs::path& root) {
  require(root, kProbes, "worldgen");
  std::ifstream in(root / kProbes);
  std::vector<ProbeSet> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(json::parse(line).get<ProbeSet>());
  }
  return out;
}

std::vector<ProbeSet> probes_for(const std::vector<ProbeSet>& all, const std::vector<int>& ids) {
  const std::set<int> wanted(ids.begin(), ids.end());
  std::vector<ProbeSet> out;
  for (const auto& p : all) {
    if (wanted.count(p.fact_id)) out.push_back(p);
  }
  return out;
}

/// Object-side renderings are the ones whose target is the gold object.
bool object_side(const World& world, const Example& e) {
  return e.target == world.name(world.gold.at(static_cast<std::size_t>(e.fact_id)).object);
}

/// Facts handed to calibration, lowest ids first.
std::vector<int> select_facts(const fs::path& root, const World& world, const std::string& source, int count) {
  std::vector<int> ids;
  if (source == "corrupted") {
    for (std::size_t i = 0; i < world.corrupted_label.size(); ++i) {
      if (world.corrupted_label[i]) ids.push_back(static_cast<int>(i));
    }
  } else {
    require(root, kAssessReport, "assess");
    const json report = read_json(root / kAssessReport);
    for (const auto& f : report.at("facts")) {
      if (f.at("classification").get<std::string>() == knowledge_name(Knowledge::false_fact)) {
        ids.push_back(f.at("fact_id").get<int>());
      }
    }
    std::sort(ids.begin(), ids.end());
  }
  if (static_cast<int>(ids.size()) < count) {
    throw ConfigError("requested " + std::to_string(count) + " " + source + " facts, only " +
                      std::to_string(ids.size()) + " available");
  }
  ids.resize(static_cast<std::size_t>(count));
  return ids;
}

struct EvalInputs {
  const World* world = nullptr;
  std::vector<ProbeSet> probes;  ///< probe sets of the calibrated facts
  EvalSets sets;
  std::vector<EncodedExample> original, adversarial, lm;
  std::vector<bool> object_sides;  ///< per original (and paired adversarial) example
  std::vector<bool> no_sides;

  EvalInputs(const World& w, std::vector<ProbeSet> p, EvalSets s) : world(&w), probes(std::move(p)), sets(std::move(s)) {
    for (const auto& e : sets.original) object_sides.push_back(object_side(w, e));
    no_sides.assign(sets.lm.size(), false);
    original = encode_examples(w.vocab, sets.original);
    adversarial = encode_examples(w.vocab, sets.adversarial);
    lm = encode_examples(w.vocab, sets.lm);
  }
};

EvalSets read_eval_sets(const fs::path& root) {
  EvalSets s;
  for (const char* name : {"original", "adversarial", "lm"}) require(root, kCalibrateDir / (std::string("eval_") + name + ".jsonl"), "calibrate");
  s.original = read_jsonl(root / kCalibrateDir / "eval_original.jsonl");
  s.adversarial = read_jsonl(root / kCalibrateDir / "eval_adversarial.jsonl");
  s.lm = read_jsonl(root / kCalibrateDir / "eval_lm.jsonl");
  return s;
}

std::vector<int> read_calibrated_ids(const fs::path& root) {
  require(root, kCalibrateDir / "facts.json", "calibrate");
  return read_json(root / kCalibrateDir / "facts.json").at("fact_ids").get<std::vector<int>>();
}

void write_scores(const fs::path& path, const World& world, std::span<const Example> examples,
                  const std::vector<bool>& sides, const PerplexityResult& result) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& e = examples[i];
    const auto& s = result.scores[i];
    out << json{{"index", i},
                {"fact_id", e.fact_id},
                {"template_id", e.template_id},
                {"object_side", static_cast<bool>(sides[i])},
                {"target", e.target},
                {"top1", world.vocab.token(s.top1)},
                {"nll", s.nll}}
               .dump()
        << '\n';
  }
}

struct EmF1Mean {
  double em = 0.0;
  double f1 = 0.0;
};

/// Mean EM/F1 of the top-1 prediction over object-side original examples.
EmF1Mean object_em_f1(const World& world, std::span<const Example> examples, const std::vector<bool>& sides,
                      const PerplexityResult& result) {
  double em = 0.0, f1 = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    if (!sides[i]) continue;
    const auto r = em_f1(surface_form(world.vocab.token(result.scores[i].top1)), surface_form(examples[i].target));
    em += r.em;
    f1 += r.f1;
    ++n;
  }
  if (n == 0) return {};
  return {em / static_cast<double>(n), f1 / static_cast<double>(n)};
}

/// Scores one model on the three eval sets and the calibrated facts' probes.
/// Per-example dumps go to `dumps/<prefix>_*.jsonl` unless `dumps` is empty.
template <typename Scalar>
ModelEval evaluate_model(const ModelState<Scalar>& state, const EvalInputs& in, const std::string& model,
                         std::size_t params, const fs::path& dumps, const std::string& prefix, const CkaConfig& cka) {
  const World& world = *in.world;
  ModelEval row;
  row.model = model;
  row.calibration_params = params;
  const auto ori = evaluate_perplexity(state, std::span<const EncodedExample>(in.original), "original");
  const auto adv = evaluate_perplexity(state, std::span<const EncodedExample>(in.adversarial), "adversarial");
  const auto lm = evaluate_perplexity(state, std::span<const EncodedExample>(in.lm), "lm");
  row.ori_ppl = ori.perplexity;
  row.adv_ppl = adv.perplexity;
  row.lm_ppl = lm.perplexity;
  const auto ef = object_em_f1(world, in.sets.original, in.object_sides, ori);
  row.em = ef.em;
  row.f1 = ef.f1;
  const auto report = assess_model(state, world, std::span<const ProbeSet>(in.probes), cka);
  row.false_rate = report.false_rate;
  if (!dumps.empty()) {
    write_scores(dumps / (prefix + "_original.jsonl"), world, in.sets.original, in.object_sides, ori);
    write_scores(dumps / (prefix + "_adversarial.jsonl"), world, in.sets.adversarial, in.object_sides, adv);
    write_scores(dumps / (prefix + "_lm.jsonl"), world, in.sets.lm, in.no_sides, lm);
    write_probe_dump(dumps / (prefix + "_probabilities.jsonl"), report.dump);
  }
  return row;
}

json eval_json(const ModelEval& row) { return eval_table_json({row}).at(0); }

// ---- stages -----------------------------------------------------------------------

void run_worldgen(const RunConfig& config) {
  const fs::path& root = config.out;
  Manifest manifest("worldgen", config);
  WorldDefinition definition = default_world_definition();
  if (!config.world_definition.empty()) {
    definition = read_json(config.world_definition).get<WorldDefinition>();
  }
  const World world = generate_world(definition, config.world);
  manifest.seal();
  const fs::path dir = root / kWorldDir;
  write_world_files(dir, world);
  const auto corpus = build_pretrain_corpus(world);
  write_jsonl(dir / "pretrain.jsonl", corpus);
  const auto probes = build_probe_sets(world, world.gold, config.cka.negatives);
  {
    std::ofstream out(dir / "probes.jsonl", std::ios::trunc | std::ios::binary);
    for (const auto& p : probes) out << json(p).dump() << '\n';
  }
  for (const char* f : {"world.json", "vocab.json", "kb_gold.tsv", "kb_corrupted.tsv", "pretrain.jsonl", "probes.jsonl"}) {
    manifest.add_output(root, kWorldDir / f);
  }
  const auto corrupted = std::count(world.corrupted_label.begin(), world.corrupted_label.end(), true);
  manifest.set_metric("facts", world.gold.size());
  manifest.set_metric("corrupted", corrupted);
  manifest.set_metric("vocab_size", world.vocab.size());
  manifest.set_metric("pretrain_examples", corpus.size());
  manifest.write(root);
  log("worldgen", std::to_string(world.gold.size()) + " facts, " + std::to_string(corrupted) + " corrupted, vocab " +
                      std::to_string(world.vocab.size()) + ", " + std::to_string(corpus.size()) + " pretraining sentences");
}

/// Object-masked renderings of the pretraining KB through the train templates.
std::vector<Example> seen_examples(const World& world) {
  std::vector<Example> out;
  for (const auto& f : world.corrupted) {
    for (int ti : world.templates_in(world.schema(f), Split::train)) {
      Example e = fill_template(world, f, ti, MaskSide::object);
      e.set_name = "seen";
      out.push_back(std::move(e));
    }
  }
  return out;
}

template <typename Scalar>
void run_pretrain(const RunConfig& config) {
  const fs::path& root = config.out;
  require(root, kWorldDir / "pretrain.jsonl", "worldgen");
  const World world = world_of(root);
  Manifest manifest("pretrain", config);
  manifest.add_input(root, kWorldDir / "world.json");
  manifest.add_input(root, kWorldDir / "pretrain.jsonl");
  const std::string& hash = manifest.seal();

  const auto corpus = read_jsonl(root / kWorldDir / "pretrain.jsonl");
  const auto encoded = encode_examples(world.vocab, corpus);
  ModelConfig mc = config.model;
  mc.vocab_size = world.vocab.size();
  mc.validate();
  ModelState<Scalar> state = init_model<Scalar>(mc);
  log("pretrain", std::to_string(state.base_parameter_count()) + " parameters, " + std::to_string(encoded.size()) +
                      " examples, " + std::to_string(config.pretrain.steps) + " steps");
  const TrainLog train_log = pretrain(state, std::span<const EncodedExample>(encoded), config.pretrain, progress_logger("pretrain"));

  const auto seen = seen_examples(world);
  const auto seen_encoded = encode_examples(world.vocab, seen);
  const auto seen_ppl = evaluate_perplexity(state, std::span<const EncodedExample>(seen_encoded), "seen");

  const fs::path dir = root / kPretrainDir;
  save_checkpoint(state, root / kBaseCkpt);
  write_text(dir / "loss_curve.csv", csv_with_hash(hash, train_log.to_csv()));
  write_scores(dir / "dumps" / "seen.jsonl", world, seen, std::vector<bool>(seen.size(), true), seen_ppl);
  const json summary{{"manifest_hash", hash},
                     {"initial_loss", train_log.initial_loss},
                     {"final_loss", train_log.final_loss},
                     {"seen_train_perplexity", seen_ppl.perplexity},
                     {"seen_examples", seen_ppl.count()}};
  write_json(dir / "summary.json", summary);
  for (const char* f : {"base.ckpt", "loss_curve.csv", "dumps/seen.jsonl", "summary.json"}) manifest.add_output(root, kPretrainDir / f);
  manifest.set_metric("seen_train_perplexity", seen_ppl.perplexity);
  manifest.set_metric("final_loss", train_log.final_loss);
  manifest.write(root);
  log("pretrain", "seen-template perplexity " + fmt(seen_ppl.perplexity));
}

template <typename Scalar>
void run_assess(const RunConfig& config) {
  const fs::path& root = config.out;
  require(root, kBaseCkpt, "pretrain");
  const World world = world_of(root);
  const auto probes = read_probes(root);
  Manifest manifest("assess", config);
  manifest.add_input(root, kBaseCkpt);
  manifest.add_input(root, kProbes);
  const std::string& hash = manifest.seal();

  const auto state = load_checkpoint<Scalar>(root / kBaseCkpt);
  const AssessmentReport report = assess_model(state, world, std::span<const ProbeSet>(probes), config.cka);

  int tp = 0, fp = 0, fn = 0, tn = 0;
  for (const auto& f : report.facts) {
    const bool detected = f.classification == Knowledge::false_fact;
    const bool corrupted = world.corrupted_label.at(static_cast<std::size_t>(f.fact_id));
    tp += detected && corrupted;
    fp += detected && !corrupted;
    fn += !detected && corrupted;
    tn += !detected && !corrupted;
  }
  const double precision = tp + fp ? static_cast<double>(tp) / (tp + fp) : 0.0;
  const double recall = tp + fn ? static_cast<double>(tp) / (tp + fn) : 0.0;

  const fs::path dir = root / kAssessDir;
  json j = report.to_json();
  j["manifest_hash"] = hash;
  j["cka"] = config.cka;
  j["labels"] = {{"tp", tp}, {"fp", fp}, {"fn", fn}, {"tn", tn}, {"precision", precision}, {"recall", recall}};
  write_json(dir / "report.json", j);
  write_text(dir / "report.csv", csv_with_hash(hash, report.to_csv()));
  write_probe_dump(dir / "probabilities.jsonl", report.dump);
  {
    std::ofstream out(dir / "predictions.jsonl", std::ios::trunc | std::ios::binary);
    for (const auto& f : report.facts) {
      out << json{{"fact_id", f.fact_id}, {"top1", f.top1}, {"object", f.object}}.dump() << '\n';
    }
  }
  for (const char* f : {"report.json", "report.csv", "probabilities.jsonl", "predictions.jsonl"}) manifest.add_output(root, kAssessDir / f);
  manifest.set_metric("false_rate", report.false_rate);
  manifest.set_metric("precision", precision);
  manifest.set_metric("recall", recall);
  manifest.write(root);
  log("assess", "false rate " + fmt(report.false_rate) + ", precision " + fmt(precision) + ", recall " + fmt(recall));
}

/// Hash of the base tensor values, independent of any adapter and of frozen flags.
template <typename Scalar>
std::string base_hash(const ModelState<Scalar>& state) {
  ModelState<Scalar> copy = without_adapter(state);
  for (auto& [name, p] : copy.tensors) p.frozen = false;
  return sha256_hex(serialize_checkpoint(copy, CheckpointScope::base_only));
}

template <typename Scalar>
void run_calibrate(const RunConfig& config) {
  const fs::path& root = config.out;
  require(root, kBaseCkpt, "pretrain");
  const World world = world_of(root);
  const auto ids = select_facts(root, world, config.calibration.source, config.calibration.count);
  const auto all_probes = read_probes(root);
  Manifest manifest("calibrate", config);
  manifest.add_input(root, kBaseCkpt);
  manifest.add_input(root, kProbes);
  if (config.calibration.source == "detected") manifest.add_input(root, kAssessReport);
  const std::string& hash = manifest.seal();

  const fs::path dir = root / kCalibrateDir;
  write_json(dir / "facts.json", {{"source", config.calibration.source}, {"fact_ids", ids}});
  const auto cal = build_calibration_sets(world, ids);
  write_jsonl(dir / "calibration_train.jsonl", cal.train);
  write_jsonl(dir / "calibration_valid.jsonl", cal.valid);
  write_jsonl(dir / "calibration_test.jsonl", cal.test);
  const EvalSets sets = build_eval_sets(world, ids, derive_seed(config.seed, 106));
  write_jsonl(dir / "eval_original.jsonl", sets.original);
  write_jsonl(dir / "eval_adversarial.jsonl", sets.adversarial);
  write_jsonl(dir / "eval_lm.jsonl", sets.lm);

  const std::string file_hash_before = sha256_file(root / kBaseCkpt);
  const auto base = load_checkpoint<Scalar>(root / kBaseCkpt);
  const std::string before = base_hash(base);
  ModelState<Scalar> state = base;
  attach(state, config.adapter);
  const auto train = encode_examples(world.vocab, cal.train);
  const auto valid = encode_examples(world.vocab, cal.valid);
  log("calibrate", std::to_string(ids.size()) + " facts, " + std::to_string(train.size()) + " train examples, " +
                       std::to_string(config.adapter.slots) + " slots at layer " + std::to_string(config.adapter.attach_layer));
  const TrainLog train_log = calibrate(state, std::span<const EncodedExample>(train), std::span<const EncodedExample>(valid),
                                       config.calibrate, progress_logger("calibrate"));
  if (base_hash(state) != before || sha256_file(root / kBaseCkpt) != file_hash_before) {
    throw InvariantBreach("base checkpoint changed during calibration");
  }
  save_checkpoint(state, root / kAdapterCkpt, CheckpointScope::adapter_only);
  write_text(dir / "loss_curve.csv", csv_with_hash(hash, train_log.to_csv()));

  const EvalInputs inputs(world, probes_for(all_probes, ids), sets);
  const ModelEval row = evaluate_model(state, inputs, "CaliNet", state.adapter_parameter_count(), dir / "dumps", "calinet", config.cka);
  json results = eval_json(row);
  results["manifest_hash"] = hash;
  results["best_step"] = train_log.best_step;
  results["best_valid_loss"] = train_log.best_valid_loss;
  results["base_hash"] = before;
  write_json(dir / "results.json", results);

  for (const char* f : {"facts.json", "calibration_train.jsonl", "calibration_valid.jsonl", "calibration_test.jsonl",
                        "eval_original.jsonl", "eval_adversarial.jsonl", "eval_lm.jsonl", "adapter.ckpt", "loss_curve.csv",
                        "results.json"}) {
    manifest.add_output(root, kCalibrateDir / f);
  }
  manifest.set_metric("best_step", train_log.best_step);
  manifest.set_metric("em", row.em);
  manifest.set_metric("false_rate", row.false_rate);
  manifest.set_metric("base_hash_unchanged", true);
  manifest.write(root);
  log("calibrate", "best step " + std::to_string(train_log.best_step) + ", EM " + fmt(row.em) + ", ori ppl " +
                       fmt(row.ori_ppl) + ", adv ppl " + fmt(row.adv_ppl));
}

template <typename Scalar>
void run_continue_pretrain(const RunConfig& config) {
  const fs::path& root = config.out;
  require(root, kBaseCkpt, "pretrain");
  require(root, kCalibrateDir / "calibration_train.jsonl", "calibrate");
  const World world = world_of(root);
  const auto ids = read_calibrated_ids(root);
  Manifest manifest("continue_pretrain", config);
  manifest.add_input(root, kBaseCkpt);
  manifest.add_input(root, kCalibrateDir / "calibration_train.jsonl");
  manifest.add_input(root, kCalibrateDir / "calibration_valid.jsonl");
  const std::string& hash = manifest.seal();

  const auto train = encode_examples(world.vocab, read_jsonl(root / kCalibrateDir / "calibration_train.jsonl"));
  const auto valid = encode_examples(world.vocab, read_jsonl(root / kCalibrateDir / "calibration_valid.jsonl"));
  ModelState<Scalar> state = load_checkpoint<Scalar>(root / kBaseCkpt);
  const TrainLog train_log = continue_pretrain(state, std::span<const EncodedExample>(train),
                                               std::span<const EncodedExample>(valid), config.continue_pretrain,
                                               progress_logger("continue-pretrain"));
  const fs::path dir = root / kContinueDir;
  save_checkpoint(state, root / kContinueCkpt);
  write_text(dir / "loss_curve.csv", csv_with_hash(hash, train_log.to_csv()));

  const EvalInputs inputs(world, probes_for(read_probes(root), ids), read_eval_sets(root));
  const ModelEval row = evaluate_model(state, inputs, "C.P.", state.base_parameter_count(), dir / "dumps", "cp", config.cka);
  json results = eval_json(row);
  results["manifest_hash"] = hash;
  write_json(dir / "results.json", results);
  for (const char* f : {"cp.ckpt", "loss_curve.csv", "results.json"}) manifest.add_output(root, kContinueDir / f);
  manifest.set_metric("em", row.em);
  manifest.write(root);
  log("continue-pretrain", "EM " + fmt(row.em) + ", ori ppl " + fmt(row.ori_ppl));
}

template <typename Scalar>
void run_eval(const RunConfig& config) {
  const fs::path& root = config.out;
  require(root, kBaseCkpt, "pretrain");
  require(root, kAdapterCkpt, "calibrate");
  const World world = world_of(root);
  const auto ids = read_calibrated_ids(root);
  const bool with_cp = fs::exists(root / kContinueCkpt);
  Manifest manifest("eval", config);
  manifest.add_input(root, kBaseCkpt);
  manifest.add_input(root, kAdapterCkpt);
  if (with_cp) manifest.add_input(root, kContinueCkpt);
  for (const char* f : {"eval_original.jsonl", "eval_adversarial.jsonl", "eval_lm.jsonl", "facts.json"}) {
    manifest.add_input(root, kCalibrateDir / f);
  }
  const std::string& hash = manifest.seal();

  const EvalInputs inputs(world, probes_for(read_probes(root), ids), read_eval_sets(root));
  const fs::path dir = root / kEvalDir;
  const fs::path dumps = dir / "dumps";
  std::vector<ModelEval> rows;
  const auto base = load_checkpoint<Scalar>(root / kBaseCkpt);
  rows.push_back(evaluate_model(base, inputs, "Vanilla", 0, dumps, "vanilla", config.cka));
  {
    ModelState<Scalar> calibrated = base;
    load_adapter_into(calibrated, root / kAdapterCkpt);
    rows.push_back(evaluate_model(calibrated, inputs, "CaliNet", calibrated.adapter_parameter_count(), dumps, "calinet",
                                  config.cka));
  }
  if (with_cp) {
    const auto cp = load_checkpoint<Scalar>(root / kContinueCkpt);
    rows.push_back(evaluate_model(cp, inputs, "C.P.", cp.base_parameter_count(), dumps, "cp", config.cka));
  }
  json table{{"manifest_hash", hash}, {"facts", ids.size()}, {"rows", eval_table_json(rows)}};
  write_json(dir / "table.json", table);
  write_text(dir / "table.csv", csv_with_hash(hash, eval_table_csv(rows)));
  const std::string text = eval_table_text(rows);
  write_text(dir / "table.txt", "manifest " + hash + "\n\n" + text);
  for (const char* f : {"table.json", "table.csv", "table.txt"}) manifest.add_output(root, kEvalDir / f);
  for (const auto& r : rows) manifest.set_metric(r.model, eval_json(r));
  manifest.write(root);
  std::cerr << text;
}

template <typename Scalar>
SweepPoint run_sweep_point(const RunConfig& config, const World& world, const ModelState<Scalar>& base,
                           const std::vector<ProbeSet>& all_probes, const std::vector<int>& ids, int value, int slots,
                           int layer, const fs::path& dumps) {
  SweepPoint point;
  point.value = value;
  point.facts = static_cast<int>(ids.size());
  point.slots = slots;
  point.attach_layer = layer + 1;

  AdapterConfig ac = config.adapter;
  ac.slots = slots;
  ac.attach_layer = layer;
  ac.seed = derive_seed(config.adapter.seed, 1000 + static_cast<std::uint64_t>(value));
  TrainConfig tc = config.calibrate;
  tc.seed = derive_seed(config.calibrate.seed, 1000 + static_cast<std::uint64_t>(value));

  const auto cal = build_calibration_sets(world, ids);
  const auto train = encode_examples(world.vocab, cal.train);
  const auto valid = encode_examples(world.vocab, cal.valid);
  ModelState<Scalar> state = base;
  attach(state, ac);
  calibrate(state, std::span<const EncodedExample>(train), std::span<const EncodedExample>(valid), tc);

  const EvalInputs inputs(world, probes_for(all_probes, ids), build_eval_sets(world, ids, derive_seed(config.seed, 106)));
  const ModelEval row = evaluate_model(state, inputs, "CaliNet", state.adapter_parameter_count(), dumps,
                                       "point_" + std::to_string(value), config.cka);
  point.em = row.em;
  point.f1 = row.f1;
  point.false_rate = row.false_rate;
  return point;
}

template <typename Scalar>
void run_sweep(const RunConfig& config) {
  const fs::path& root = config.out;
  const SweepSpec& spec = config.sweep;
  spec.validate(config.model);
  require(root, kBaseCkpt, "pretrain");
  const World world = world_of(root);
  const auto all_probes = read_probes(root);
  const std::string stage = "sweep/" + spec.axis;
  Manifest manifest(stage, config);
  manifest.add_input(root, kBaseCkpt);
  manifest.add_input(root, kProbes);
  if (spec.facts_source == "detected") {
    require(root, kAssessReport, "assess");
    manifest.add_input(root, kAssessReport);
  }
  const std::string& hash = manifest.seal();
  const auto base = load_checkpoint<Scalar>(root / kBaseCkpt);

  struct Job {
    std::vector<int> ids;
    int value, slots, layer;
  };
  std::vector<Job> jobs;
  for (int v : spec.values) {
    Job job{{}, v, config.adapter.slots, config.adapter.attach_layer};
    int count = spec.facts;
    if (spec.axis == "fact_count") {
      count = v;
      job.slots = std::max(1, static_cast<int>(std::lround(v * spec.slots_per_fact)));
    } else if (spec.axis == "slot_count") {
      job.slots = v;
    } else {
      job.layer = v - 1;
    }
    job.ids = select_facts(root, world, spec.facts_source, count);
    jobs.push_back(std::move(job));
  }

  const fs::path dir = root / "sweep" / spec.axis;
  std::vector<SweepPoint> points(jobs.size());
  auto run = [&](std::size_t i) {
    const Job& j = jobs[i];
    points[i] = run_sweep_point(config, world, base, all_probes, j.ids, j.value, j.slots, j.layer, dir / "dumps");
    log(stage, spec.axis + "=" + std::to_string(j.value) + " EM " + fmt(points[i].em) + " F1 " + fmt(points[i].f1) +
                   " false rate " + fmt(points[i].false_rate));
  };
  if (spec.parallel) {
    const std::size_t width = std::max(1u, std::thread::hardware_concurrency());
    for (std::size_t start = 0; start < jobs.size(); start += width) {
      std::vector<std::thread> threads;
      std::vector<std::exception_ptr> errors(jobs.size());
      for (std::size_t i = start; i < std::min(jobs.size(), start + width); ++i) {
        threads.emplace_back([&, i] {
          try {
            run(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        });
      }
      for (auto& t : threads) t.join();
      for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
      }
    }
  } else {
    for (std::size_t i = 0; i < jobs.size(); ++i) run(i);
  }

  write_text(dir / "sweep.csv", csv_with_hash(hash, sweep_csv(spec.axis, points)));
  std::string svg = sweep_svg(spec.axis, points);
  svg.insert(0, "<!-- manifest " + hash + " -->\n");
  write_text(dir / "sweep.svg", svg);
  json rows = json::array();
  for (const auto& p : points) {
    rows.push_back({{"value", p.value}, {"facts", p.facts}, {"slots", p.slots}, {"attach_layer", p.attach_layer},
                    {"em", p.em}, {"f1", p.f1}, {"false_rate", p.false_rate}});
  }
  write_json(dir / "sweep.json", {{"manifest_hash", hash}, {"axis", spec.axis}, {"points", rows}});
  for (const char* f : {"sweep.csv", "sweep.svg", "sweep.json"}) manifest.add_output(root, fs::path("sweep") / spec.axis / f);
  manifest.set_metric("points", rows);
  manifest.write(root);
}

template <typename Scalar>
void run_interpret(const RunConfig& config) {
  const fs::path& root = config.out;
  require(root, kBaseCkpt, "pretrain");
  require(root, kAdapterCkpt, "calibrate");
  const World world = world_of(root);
  Manifest manifest("interpret", config);
  manifest.add_input(root, kBaseCkpt);
  manifest.add_input(root, kAdapterCkpt);
  const std::string& hash = manifest.seal();

  std::vector<std::string> words;
  if (config.interpret.sentence.empty()) {
    const auto ids = read_calibrated_ids(root);
    if (ids.empty()) throw ConfigError("interpret: no calibrated facts and no sentence given");
    for (const auto& p : read_probes(root)) {
      if (p.fact_id == ids.front()) words = p.positive;
    }
  } else {
    words = tokenize(config.interpret.sentence);
  }
  const auto tokens = world.vocab.encode(words);
  const int mask = world.vocab.mask_id();

  const auto base = load_checkpoint<Scalar>(root / kBaseCkpt);
  ModelState<Scalar> calibrated = base;
  load_adapter_into(calibrated, root / kAdapterCkpt);
  const int k = config.interpret.top_k;
  const LayerTrace vanilla = trace_output_distribution(base, std::span<const int>(tokens), mask, k);
  const LayerTrace with_adapter = trace_output_distribution(calibrated, std::span<const int>(tokens), mask, k);
  const auto slots = slot_report(calibrated, config.interpret.slot_top_k);

  const fs::path dir = root / kInterpretDir;
  const std::string sentence = detokenize(words);
  write_json(dir / "trace.json", {{"manifest_hash", hash},
                                  {"sentence", sentence},
                                  {"vanilla", trace_to_json(vanilla, world.vocab)},
                                  {"calibrated", trace_to_json(with_adapter, world.vocab)}});
  write_text(dir / "trace.txt", "manifest " + hash + "\n" + sentence + "\n\nVanilla\n" + trace_to_text(vanilla, world.vocab) +
                                    "\nCalibrated\n" + trace_to_text(with_adapter, world.vocab));
  write_json(dir / "slots.json", {{"manifest_hash", hash}, {"slots", projections_to_json(slots, world.vocab)}});
  write_text(dir / "slots.txt", "manifest " + hash + "\n" + projections_to_text(slots, world.vocab));
  for (const char* f : {"trace.json", "trace.txt", "slots.json", "slots.txt"}) manifest.add_output(root, kInterpretDir / f);
  manifest.write(root);
  std::cerr << sentence << "\n" << trace_to_text(with_adapter, world.vocab);
}

}  // namespace

void cmd_worldgen(const RunConfig& config) { run_worldgen(config); }

void cmd_pretrain(const RunConfig& config) {
  dispatch(config.precision, [&](auto tag) { run_pretrain<decltype(tag)>(config); });
}

void cmd_assess(const RunConfig& config) {
  dispatch(config.precision, [&](auto tag) { run_assess<decltype(tag)>(config); });
}

void cmd_calibrate(const RunConfig& config) {
  dispatch(config.precision, [&](auto tag) { run_calibrate<decltype(tag)>(config); });
}

void cmd_continue_pretrain(const RunConfig& config) {
  dispatch(config.precision, [&](auto tag) { run_continue_pretrain<decltype(tag)>(config); });
}

void cmd_eval(const RunConfig& config) {
  dispatch(config.precision, [&](auto tag) { run_eval<decltype(tag)>(config); });
}

void cmd_sweep(const RunConfig& config) {
  dispatch(config.precision, [&](auto tag) { run_sweep<decltype(tag)>(config); });
}

void cmd_interpret(const RunConfig& config) {
  dispatch(config.precision, [&](auto tag) { run_interpret<decltype(tag)>(config); });
}

void cmd_pipeline(const RunConfig& config) {
  cmd_worldgen(config);
  cmd_pretrain(config);
  cmd_assess(config);
  cmd_calibrate(config);
  cmd_continue_pretrain(config);
  cmd_eval(config);
  cmd_interpret(config);
}

}  // namespace factcal
