// Acceptance runner: one PASS/FAIL line per criterion.
//
//   acceptance --work DIR --cli PATH --configs DIR [--only 1,5,6] [--reuse]
//
// Pipeline runs go through the CLI binary; everything else is checked in
// process against the library and the emitted artifacts.

#include "factcal/adapter.hpp"
#include "factcal/assess.hpp"
#include "factcal/errors.hpp"
#include "factcal/interpret.hpp"
#include "factcal/model.hpp"
#include "factcal/pipeline.hpp"
#include "factcal/trainer.hpp"
#include "factcal/world.hpp"

#include "../support/gradcheck.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace factcal;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Env {
  fs::path work;
  fs::path cli;
  fs::path configs;
  fs::path python;
  fs::path recompute_script;
  bool reuse = false;

  fs::path run_a() const { return work / "run_a"; }
  fs::path run_b() const { return work / "run_b"; }
  fs::path scale() const { return work / "scale"; }
};

std::string num(double v, int digits = 4) {
  std::ostringstream s;
  s << std::setprecision(digits) << v;
  return s.str();
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  return json::parse(in);
}

std::vector<json> read_lines(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::vector<json> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(json::parse(line));
  }
  return out;
}

void cli(const Env& env, const std::string& args) {
  const std::string cmd = "\"" + env.cli.string() + "\" " + args;
  std::cerr << "$ " << cmd << '\n';
  const int rc = std::system(cmd.c_str());
  if (rc != 0) throw std::runtime_error("command failed (" + std::to_string(rc) + "): " + cmd);
}

// markers of stages built by this process; they are reused even without --reuse
std::set<fs::path> built;

bool done(const Env& env, const fs::path& marker) {
  return (env.reuse || built.count(marker)) && fs::exists(marker);
}

void ensure_pipeline(const Env& env, const fs::path& dir) {
  if (done(env, dir / "interpret" / "manifest.json")) return;
  fs::remove_all(dir);
  cli(env, "pipeline --config \"" + (env.configs / "default.json").string() + "\" --out \"" + dir.string() + "\"");
  built.insert(dir / "interpret" / "manifest.json");
}

void ensure_sweep(const Env& env, const fs::path& dir, const fs::path& config, const std::string& axis,
                  const std::string& values) {
  if (done(env, dir / "sweep" / axis / "sweep.json")) return;
  cli(env, "sweep --config \"" + config.string() + "\" --out \"" + dir.string() + "\" --axis " + axis + " --values " + values);
  built.insert(dir / "sweep" / axis / "sweep.json");
}

void ensure_scale_world(const Env& env) {
  const fs::path dir = env.scale();
  if (done(env, dir / "assess" / "manifest.json")) return;
  fs::remove_all(dir);
  const std::string base = "--config \"" + (env.configs / "scalability.json").string() + "\" --out \"" + dir.string() + "\"";
  for (const char* stage : {"worldgen", "pretrain", "assess"}) cli(env, std::string(stage) + " " + base);
  built.insert(dir / "assess" / "manifest.json");
}

std::map<int, json> sweep_points(const fs::path& dir, const std::string& axis) {
  std::map<int, json> out;
  const json sweep = read_json(dir / "sweep" / axis / "sweep.json");
  for (const auto& p : sweep.at("points")) out[p.at("value").get<int>()] = p;
  return out;
}

// ---- 1 ---------------------------------------------------------------------------

Outcome gradients(const Env&) {
  constexpr int kProbes = 100;
  constexpr double kTol = 1e-4;
  auto cases = testing::op_cases(11);
  cases.push_back(testing::model_case(12));
  double worst = 0.0;
  std::string worst_case, failing;
  for (const auto& c : cases) {
    const auto r = testing::check_gradients(c, kProbes, 13, 1e-5);
    if (r.max_rel_error > worst) {
      worst = r.max_rel_error;
      worst_case = c.name + " " + r.worst;
    }
    if (!(r.max_rel_error <= kTol)) failing += " " + c.name;
  }
  return {failing.empty(), std::to_string(cases.size()) + " cases x " + std::to_string(kProbes) +
                               " probes, max rel error " + num(worst, 3) + " (" + worst_case + ")" +
                               (failing.empty() ? "" : ", failing:" + failing)};
}

// ---- 2 ---------------------------------------------------------------------------

double cka_direct(double p_pos, const std::vector<double>& negs, double alpha) {
  double total = 0.0;
  for (std::size_t i = 0; i < negs.size(); ++i) total = total + negs[i];
  const double mean_neg = total / static_cast<double>(negs.size());
  const double numerator = p_pos + alpha;
  const double denominator = mean_neg + alpha;
  return numerator / denominator;
}

Outcome cka_oracle(const Env&) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> count(1, 6);
  auto prob = [&] { return unit(rng) < 0.3 ? std::exp(-30.0 * unit(rng)) : unit(rng); };
  int mismatches = 0, monotone_bad = 0, scale_bad = 0;
  double worst_scale = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const double p = prob();
    std::vector<double> negs(static_cast<std::size_t>(count(rng)));
    for (auto& n : negs) n = prob();
    const double alpha = i % 4 == 0 ? 0.001 : std::pow(10.0, -8.0 + 8.0 * unit(rng));
    const double s = cka_score(p, negs, alpha);
    if (s != cka_direct(p, negs, alpha)) ++mismatches;

    // monotone up in p_pos, down in every negative
    const double up = cka_score(p + 0.1 * unit(rng), negs, alpha);
    if (up < s - 1e-12 * s) ++monotone_bad;
    auto raised = negs;
    raised[static_cast<std::size_t>(i) % raised.size()] += 0.1 * unit(rng);
    if (cka_score(p, raised, alpha) > s + 1e-12 * s) ++monotone_bad;

    // a common scale on p_pos, negatives and alpha leaves the score unchanged
    const double c = std::pow(10.0, -3.0 + 6.0 * unit(rng));
    auto scaled = negs;
    for (auto& n : scaled) n *= c;
    const double rel = std::abs(cka_score(c * p, scaled, c * alpha) - s) / std::abs(s);
    worst_scale = std::max(worst_scale, rel);
    if (rel > 1e-12) ++scale_bad;
  }
  return {mismatches == 0 && monotone_bad == 0 && scale_bad == 0,
          "10000 triples: " + std::to_string(mismatches) + " mismatches, " + std::to_string(monotone_bad) +
              " monotonicity violations, max scale deviation " + num(worst_scale, 3)};
}

// ---- 3 ---------------------------------------------------------------------------

struct Loaded {
  World world;
  EvalSets sets;
  std::vector<EncodedExample> original, adversarial, lm;
  std::vector<ProbeSet> probes;
};

Loaded load_eval_inputs(const fs::path& run) {
  Loaded l{load_world(run / "worldgen"), {}, {}, {}, {}, {}};
  l.sets.original = read_jsonl(run / "calibrate" / "eval_original.jsonl");
  l.sets.adversarial = read_jsonl(run / "calibrate" / "eval_adversarial.jsonl");
  l.sets.lm = read_jsonl(run / "calibrate" / "eval_lm.jsonl");
  l.original = encode_examples(l.world.vocab, l.sets.original);
  l.adversarial = encode_examples(l.world.vocab, l.sets.adversarial);
  l.lm = encode_examples(l.world.vocab, l.sets.lm);
  const auto ids = read_json(run / "calibrate" / "facts.json").at("fact_ids").get<std::vector<int>>();
  const std::set<int> wanted(ids.begin(), ids.end());
  for (const auto& j : read_lines(run / "worldgen" / "probes.jsonl")) {
    auto p = j.get<ProbeSet>();
    if (wanted.count(p.fact_id)) l.probes.push_back(std::move(p));
  }
  return l;
}

struct Metrics {
  double ori = 0, adv = 0, lm = 0, em = 0, f1 = 0, false_rate = 0;
};

Metrics metrics_of(const ModelState<float>& st, const Loaded& in) {
  Metrics m;
  const auto o = evaluate_perplexity(st, std::span<const EncodedExample>(in.original), "original");
  m.ori = o.perplexity;
  m.adv = evaluate_perplexity(st, std::span<const EncodedExample>(in.adversarial), "adversarial").perplexity;
  m.lm = evaluate_perplexity(st, std::span<const EncodedExample>(in.lm), "lm").perplexity;
  double n = 0;
  for (std::size_t i = 0; i < in.sets.original.size(); ++i) {
    const auto& e = in.sets.original[i];
    const auto& f = in.world.gold.at(static_cast<std::size_t>(e.fact_id));
    if (e.target != in.world.name(f.object)) continue;
    const auto r = em_f1(surface_form(in.world.vocab.token(o.scores[i].top1)), surface_form(e.target));
    m.em += r.em;
    m.f1 += r.f1;
    ++n;
  }
  m.em /= n;
  m.f1 /= n;
  m.false_rate = assess_model(st, in.world, std::span<const ProbeSet>(in.probes), CkaConfig{}).false_rate;
  return m;
}

Outcome zero_init_identity(const Env& env) {
  ensure_pipeline(env, env.run_a());
  const Loaded in = load_eval_inputs(env.run_a());
  const auto base = load_checkpoint<float>(env.run_a() / "pretrain" / "base.ckpt");
  auto fresh = base;
  AdapterConfig ac;
  ac.slots = 64;
  ac.attach_layer = base.config.n_layers - 1;
  ac.seed = 5;
  attach(fresh, ac);

  std::size_t logits_checked = 0, logits_diff = 0;
  for (const auto* set : {&in.original, &in.adversarial, &in.lm}) {
    for (const auto& e : *set) {
      ++logits_checked;
      if (forward(fresh, std::span<const int>(e.tokens)) != forward(base, std::span<const int>(e.tokens))) ++logits_diff;
    }
  }
  const Metrics a = metrics_of(base, in), b = metrics_of(fresh, in);
  const bool metrics_equal = a.ori == b.ori && a.adv == b.adv && a.lm == b.lm && a.em == b.em && a.f1 == b.f1 &&
                             a.false_rate == b.false_rate;

  std::size_t trace_diff = 0;
  const int mask = in.world.vocab.mask_id();
  for (const auto& e : in.original) {
    const auto tv = trace_output_distribution(base, std::span<const int>(e.tokens), mask, 10);
    const auto ta = trace_output_distribution(fresh, std::span<const int>(e.tokens), mask, 10);
    std::vector<TraceRow> plain;
    for (const auto& r : ta.rows) {
      if (!r.with_adapter) plain.push_back(r);
    }
    bool same = plain.size() == tv.rows.size() && ta.rows.size() == tv.rows.size() + 1;
    for (std::size_t i = 0; same && i < plain.size(); ++i) {
      for (std::size_t k = 0; k < plain[i].top.size(); ++k) {
        same = same && plain[i].top[k].token == tv.rows[i].top[k].token && plain[i].top[k].prob == tv.rows[i].top[k].prob;
      }
    }
    const auto& adapter_row = ta.rows.back().top;
    for (std::size_t k = 0; same && k < adapter_row.size(); ++k) {
      same = adapter_row[k].token == tv.rows.back().top[k].token && adapter_row[k].prob == tv.rows.back().top[k].prob;
    }
    if (!same) ++trace_diff;
  }
  return {logits_diff == 0 && metrics_equal && trace_diff == 0,
          std::to_string(logits_checked) + " logit matrices (" + std::to_string(logits_diff) + " differ), metrics " +
              (metrics_equal ? "equal" : "differ") + " (ori " + num(a.ori) + ", adv " + num(a.adv) + ", lm " + num(a.lm) +
              ", EM " + num(a.em) + "), " + std::to_string(in.original.size()) + " traces (" + std::to_string(trace_diff) +
              " differ)"};
}

// ---- 4 ---------------------------------------------------------------------------

std::string base_bytes_hash(ModelState<float> st) {
  st = without_adapter(st);
  for (auto& [name, p] : st.tensors) p.frozen = false;
  return sha256_hex(serialize_checkpoint(st, CheckpointScope::base_only));
}

Outcome frozen_base(const Env& env) {
  ensure_pipeline(env, env.run_a());
  const fs::path run = env.run_a();
  const fs::path ckpt = run / "pretrain" / "base.ckpt";
  const std::string file_before = sha256_file(ckpt);
  const World world = load_world(run / "worldgen");
  const auto base = load_checkpoint<float>(ckpt);
  const std::string before = base_bytes_hash(base);

  RunConfig config = run_config_from_json(load_config_json(env.configs / "default.json", {}));
  config.resolve();
  const auto train = encode_examples(world.vocab, read_jsonl(run / "calibrate" / "calibration_train.jsonl"));
  const auto valid = encode_examples(world.vocab, read_jsonl(run / "calibrate" / "calibration_valid.jsonl"));
  auto state = base;
  attach(state, config.adapter);
  TrainConfig tc = config.calibrate;
  tc.steps = 2000;
  const TrainLog log = calibrate(state, std::span<const EncodedExample>(train), std::span<const EncodedExample>(valid), tc);
  const std::string after = base_bytes_hash(state);
  const bool trained = !state.at(kAdapterValue).isZero(0);
  const bool unchanged = before == after && sha256_file(ckpt) == file_before;

  bool aborts = false;
  {
    auto leaky = base;
    attach(leaky, config.adapter);
    leaky.tensors.at(layer_tensor(0, "ffn.key")).frozen = false;
    TrainConfig short_run = tc;
    short_run.steps = 3;
    short_run.warmup_steps = 1;
    try {
      calibrate(leaky, std::span<const EncodedExample>(train), std::span<const EncodedExample>(valid), short_run);
    } catch (const InvariantBreach&) {
      aborts = true;
    }
  }
  bool adam_aborts = false;
  {
    Adam<float> adam(tc);
    std::map<std::string, Matrix<float>> grads{{"embed", Matrix<float>::Ones(state.at("embed").rows(), state.at("embed").cols())}};
    try {
      adam.step(state, grads, 1e-3);
    } catch (const InvariantBreach&) {
      adam_aborts = true;
    }
  }
  return {unchanged && trained && aborts && adam_aborts,
          std::to_string(tc.steps) + " steps (best " + std::to_string(log.best_step) + "), base hash " + before.substr(0, 12) + " -> " +
              after.substr(0, 12) + ", adapter " + (trained ? "trained" : "untouched") + ", frozen-gradient abort " +
              (aborts && adam_aborts ? "raised" : "missing")};
}

// ---- 5 ---------------------------------------------------------------------------

Outcome detection(const Env& env) {
  ensure_pipeline(env, env.run_a());
  const fs::path run = env.run_a();
  const double seen = read_json(run / "pretrain" / "summary.json").at("seen_train_perplexity").get<double>();
  const World world = load_world(run / "worldgen");
  const json report = read_json(run / "assess" / "report.json");
  const double alpha = report.at("cka").at("alpha").get<double>();
  const double threshold = report.at("cka").at("threshold").get<double>();
  int tp = 0, fp = 0, fn = 0;
  for (const auto& f : report.at("facts")) {
    const bool detected = f.at("classification") == "false_fact";
    const bool corrupted = world.corrupted_label.at(f.at("fact_id").get<std::size_t>());
    tp += detected && corrupted;
    fp += detected && !corrupted;
    fn += !detected && corrupted;
  }
  const double precision = tp + fp ? double(tp) / (tp + fp) : 0.0;
  const double recall = tp + fn ? double(tp) / (tp + fn) : 0.0;
  const bool setup = world.spec.corruption_rate == 0.3 && alpha == 0.001 && threshold == 1.0;
  return {setup && seen <= 1.5 && precision >= 0.8 && recall >= 0.8,
          "rho " + num(world.spec.corruption_rate) + ", seen-template ppl " + num(seen) + ", precision " + num(precision) +
              ", recall " + num(recall) + " (tp " + std::to_string(tp) + ", fp " + std::to_string(fp) + ", fn " +
              std::to_string(fn) + ")"};
}

// ---- 6 ---------------------------------------------------------------------------

Outcome efficacy(const Env& env) {
  ensure_pipeline(env, env.run_a());
  const json table = read_json(env.run_a() / "eval" / "table.json");
  json van, cal;
  for (const auto& r : table.at("rows")) {
    if (r.at("model") == "Vanilla") van = r;
    if (r.at("model") == "CaliNet") cal = r;
  }
  const auto g = [](const json& r, const char* k) { return r.at(k).get<double>(); };
  const double lm_ratio = g(cal, "lm_ppl") / g(van, "lm_ppl");
  std::vector<std::string> failed;
  if (!(g(cal, "ori_ppl") < g(van, "ori_ppl"))) failed.push_back("ori");
  if (!(g(cal, "adv_ppl") > g(van, "adv_ppl"))) failed.push_back("adv");
  if (!(lm_ratio >= 0.8 && lm_ratio <= 1.2)) failed.push_back("lm drift");
  if (!(g(cal, "em") >= 0.60 && g(van, "em") <= 0.10)) failed.push_back("em");
  if (!(g(cal, "false_rate") <= 0.5 * g(van, "false_rate"))) failed.push_back("false rate");
  std::string which;
  for (const auto& f : failed) which += (which.empty() ? "" : ", ") + f;
  return {failed.empty(), std::to_string(table.at("facts").get<int>()) + " facts: ori " + num(g(van, "ori_ppl")) + " -> " +
                              num(g(cal, "ori_ppl")) + ", adv " + num(g(van, "adv_ppl")) + " -> " + num(g(cal, "adv_ppl")) +
                              ", lm " + num(g(van, "lm_ppl")) + " -> " + num(g(cal, "lm_ppl")) + " (x" + num(lm_ratio, 3) +
                              "), EM " + num(g(van, "em")) + " -> " + num(g(cal, "em")) + ", false rate " +
                              num(g(van, "false_rate")) + " -> " + num(g(cal, "false_rate")) +
                              (failed.empty() ? "" : "; failed: " + which)};
}

// ---- 7, 8, 9 ---------------------------------------------------------------------

Outcome scalability(const Env& env) {
  ensure_scale_world(env);
  ensure_sweep(env, env.scale(), env.configs / "scalability.json", "fact_count", "10,50,100,300,500");
  const auto pts = sweep_points(env.scale(), "fact_count");
  const std::vector<int> values{10, 50, 100, 300, 500};
  std::string detail = "EM";
  bool ok = pts.count(10) && pts.at(10).at("em").get<double>() >= 0.90;
  double prev = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double em = pts.at(values[i]).at("em").get<double>();
    detail += " " + std::to_string(values[i]) + ":" + num(em, 3);
    // 5 points, with the boundary itself counted as within
    if (i > 0 && em > prev + 0.05 + 1e-12) ok = false;
    prev = em;
  }
  return {ok, detail + " (slots " + std::to_string(pts.at(10).at("slots").get<int>()) + ".." +
                  std::to_string(pts.at(500).at("slots").get<int>()) + ")"};
}

Outcome slot_count(const Env& env) {
  ensure_pipeline(env, env.run_a());
  ensure_sweep(env, env.run_a(), env.configs / "default.json", "slot_count", "16,64,256");
  const auto pts = sweep_points(env.run_a(), "slot_count");
  const double e16 = pts.at(16).at("em"), e64 = pts.at(64).at("em"), e256 = pts.at(256).at("em");
  return {e256 >= e16 + 0.05 && std::abs(e64 - e256) <= 0.10,
          std::to_string(pts.at(16).at("facts").get<int>()) + " facts, EM 16:" + num(e16, 3) + " 64:" + num(e64, 3) +
              " 256:" + num(e256, 3)};
}

Outcome layer_position(const Env& env) {
  ensure_pipeline(env, env.run_a());
  ensure_sweep(env, env.run_a(), env.configs / "default.json", "attach_layer", "1,4");
  const auto pts = sweep_points(env.run_a(), "attach_layer");
  const double first = pts.at(1).at("em"), last = pts.at(4).at("em");
  return {last >= first, std::to_string(pts.at(1).at("facts").get<int>()) + " facts, EM layer 1:" + num(first, 3) +
                             " layer 4:" + num(last, 3)};
}

// ---- 10 --------------------------------------------------------------------------
// Re-derives every reported number from the per-example dumps with code that
// shares nothing with the library's metric paths.

std::vector<std::string> words_of(const std::string& token) {
  std::string s;
  for (char c : token) s += c == '_' ? ' ' : static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

double token_f1(const std::string& pred, const std::string& gold) {
  const auto p = words_of(pred), g = words_of(gold);
  if (p.empty() || g.empty()) return p.empty() && g.empty() ? 1.0 : 0.0;
  std::vector<bool> used(g.size(), false);
  int common = 0;
  for (const auto& w : p) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!used[i] && g[i] == w) {
        used[i] = true;
        ++common;
        break;
      }
    }
  }
  if (common == 0) return 0.0;
  const double prec = static_cast<double>(common) / static_cast<double>(p.size());
  const double rec = static_cast<double>(common) / static_cast<double>(g.size());
  return 2.0 * prec * rec / (prec + rec);
}

double ppl_of(const std::vector<json>& rows) {
  double total = 0.0;
  for (const auto& r : rows) total += r.at("nll").get<double>();
  return std::exp(total / static_cast<double>(rows.size()));
}

std::pair<double, double> em_f1_of(const std::vector<json>& rows) {
  double em = 0.0, f1 = 0.0, n = 0.0;
  for (const auto& r : rows) {
    if (!r.at("object_side").get<bool>()) continue;
    const std::string pred = r.at("top1"), gold = r.at("target");
    em += words_of(pred) == words_of(gold) ? 1 : 0;
    f1 += token_f1(pred, gold);
    n += 1;
  }
  return {em / n, f1 / n};
}

double false_rate_of(const std::vector<json>& probs, double alpha, double threshold) {
  std::map<int, double> pos;
  std::map<int, std::map<int, double>> negs;
  for (const auto& r : probs) {
    const int id = r.at("fact_id");
    if (r.at("prompt_kind") == "positive") {
      pos[id] = r.at("p_object");
    } else {
      negs[id][r.at("prompt_idx").get<int>()] = r.at("p_object");
    }
  }
  std::size_t n_false = 0;
  for (const auto& [id, p] : pos) {
    double total = 0.0;
    for (const auto& [k, v] : negs.at(id)) total += v;
    const double mean = total / static_cast<double>(negs.at(id).size());
    if ((p + alpha) / (mean + alpha) < threshold) ++n_false;
  }
  return static_cast<double>(n_false) / static_cast<double>(pos.size());
}

struct Recompute {
  int checked = 0;
  std::vector<std::string> mismatches;

  void expect(const std::string& what, double reported, double derived) {
    ++checked;
    if (reported != derived) mismatches.push_back(what + " reported " + num(reported, 17) + " derived " + num(derived, 17));
  }

  void model_row(const std::string& where, const json& row, const fs::path& dumps, const std::string& prefix, double alpha,
                 double threshold) {
    const auto ori = read_lines(dumps / (prefix + "_original.jsonl"));
    const auto [em, f1] = em_f1_of(ori);
    if (row.contains("ori_ppl")) {
      expect(where + " ori_ppl", row.at("ori_ppl"), ppl_of(ori));
      expect(where + " adv_ppl", row.at("adv_ppl"), ppl_of(read_lines(dumps / (prefix + "_adversarial.jsonl"))));
      expect(where + " lm_ppl", row.at("lm_ppl"), ppl_of(read_lines(dumps / (prefix + "_lm.jsonl"))));
    }
    expect(where + " em", row.at("em"), em);
    expect(where + " f1", row.at("f1"), f1);
    expect(where + " false_rate", row.at("false_rate"),
           false_rate_of(read_lines(dumps / (prefix + "_probabilities.jsonl")), alpha, threshold));
  }
};

void recompute_run(const fs::path& run, Recompute& rc) {
  const json cfg = read_json(run / "assess" / "manifest.json").at("config");
  const double alpha = cfg.at("cka").at("alpha"), threshold = cfg.at("cka").at("threshold");

  rc.expect(run.filename().string() + " pretrain seen ppl",
            read_json(run / "pretrain" / "summary.json").at("seen_train_perplexity"),
            ppl_of(read_lines(run / "pretrain" / "dumps" / "seen.jsonl")));

  const json report = read_json(run / "assess" / "report.json");
  rc.expect(run.filename().string() + " assess false_rate", report.at("false_rate"),
            false_rate_of(read_lines(run / "assess" / "probabilities.jsonl"), alpha, threshold));
  double em = 0.0, f1 = 0.0, n = 0.0;
  for (const auto& p : read_lines(run / "assess" / "predictions.jsonl")) {
    em += words_of(p.at("top1")) == words_of(p.at("object")) ? 1 : 0;
    f1 += token_f1(p.at("top1"), p.at("object"));
    n += 1;
  }
  rc.expect(run.filename().string() + " assess mean_em", report.at("mean_em"), em / n);
  rc.expect(run.filename().string() + " assess mean_f1", report.at("mean_f1"), f1 / n);

  if (fs::exists(run / "calibrate" / "results.json")) {
    rc.model_row(run.filename().string() + " calibrate", read_json(run / "calibrate" / "results.json"),
                 run / "calibrate" / "dumps", "calinet", alpha, threshold);
  }
  if (fs::exists(run / "continue_pretrain" / "results.json")) {
    rc.model_row(run.filename().string() + " continue_pretrain", read_json(run / "continue_pretrain" / "results.json"),
                 run / "continue_pretrain" / "dumps", "cp", alpha, threshold);
  }
  if (fs::exists(run / "eval" / "table.json")) {
    const std::map<std::string, std::string> prefix{{"Vanilla", "vanilla"}, {"CaliNet", "calinet"}, {"C.P.", "cp"}};
    const json table = read_json(run / "eval" / "table.json");
    for (const auto& row : table.at("rows")) {
      const std::string model = row.at("model");
      rc.model_row(run.filename().string() + " eval " + model, row, run / "eval" / "dumps", prefix.at(model), alpha, threshold);
    }
  }
  if (fs::exists(run / "sweep")) {
    for (const auto& axis : fs::directory_iterator(run / "sweep")) {
      const json sweep = read_json(axis.path() / "sweep.json");
      for (const auto& p : sweep.at("points")) {
        const std::string value = std::to_string(p.at("value").get<int>());
        rc.model_row(run.filename().string() + " sweep " + axis.path().filename().string() + "=" + value, p,
                     axis.path() / "dumps", "point_" + value, alpha, threshold);
      }
    }
  }
}

Outcome recomputation(const Env& env) {
  ensure_pipeline(env, env.run_a());
  Recompute rc;
  for (const fs::path& run : {env.run_a(), env.scale()}) {
    if (fs::exists(run / "assess" / "report.json")) recompute_run(run, rc);
  }
  std::string detail = std::to_string(rc.checked) + " reported values re-derived, " + std::to_string(rc.mismatches.size()) +
                       " mismatches";
  for (std::size_t i = 0; i < std::min<std::size_t>(3, rc.mismatches.size()); ++i) detail += "; " + rc.mismatches[i];
  bool script_ok = true;
  if (!env.python.empty()) {
    std::string cmd = "\"" + env.python.string() + "\" \"" + env.recompute_script.string() + "\"";
    for (const fs::path& run : {env.run_a(), env.scale()}) {
      if (fs::exists(run / "assess" / "report.json")) cmd += " \"" + run.string() + "\"";
    }
    std::cerr << "$ " << cmd << '\n';
    script_ok = std::system(cmd.c_str()) == 0;
    detail += std::string(", python script ") + (script_ok ? "agrees" : "disagrees");
  }
  return {rc.mismatches.empty() && rc.checked > 0 && script_ok, detail};
}

// ---- 11 --------------------------------------------------------------------------

Outcome trace_faithfulness(const Env& env) {
  ensure_pipeline(env, env.run_a());
  const fs::path run = env.run_a();
  const World world = load_world(run / "worldgen");
  std::vector<int> ids;
  const json report = read_json(run / "assess" / "report.json");
  for (const auto& f : report.at("facts")) {
    if (f.at("classification") == "false_fact" && ids.size() < 20) ids.push_back(f.at("fact_id"));
  }
  const auto cal = build_calibration_sets(world, ids);
  const auto train = encode_examples(world.vocab, cal.train);
  const auto base = load_checkpoint<float>(run / "pretrain" / "base.ckpt");

  RunConfig config = run_config_from_json(load_config_json(env.configs / "default.json", {}));
  config.resolve();
  auto state = base;
  attach(state, config.adapter);
  TrainConfig tc = config.calibrate;
  tc.steps = 1000;
  calibrate(state, std::span<const EncodedExample>(train), std::span<const EncodedExample>(train), tc);

  const int mask = world.vocab.mask_id();
  int hits = 0, facts = 0, row_mismatch = 0;
  std::set<int> seen;
  for (std::size_t i = 0; i < cal.train.size(); ++i) {
    const auto& e = cal.train[i];
    const auto& f = world.gold.at(static_cast<std::size_t>(e.fact_id));
    if (e.target != world.name(f.object) || seen.count(e.fact_id)) continue;
    seen.insert(e.fact_id);
    ++facts;
    const auto& tokens = train[i].tokens;
    const int gold = world.vocab.id(e.target);
    const auto vanilla = trace_output_distribution(base, std::span<const int>(tokens), mask, 10);
    const auto calibrated = trace_output_distribution(state, std::span<const int>(tokens), mask, 10);
    for (const auto* t : {&vanilla, &calibrated}) {
      const auto ranked = predict_masked(t == &vanilla ? base : state, std::span<const int>(tokens), mask);
      const auto& last = t->rows.back().top;
      for (std::size_t k = 0; k < last.size(); ++k) {
        if (last[k].token != ranked[k].token || last[k].prob != ranked[k].prob) {
          ++row_mismatch;
          break;
        }
      }
    }
    auto in_top = [&](const TraceRow& r) {
      return std::any_of(r.top.begin(), r.top.end(), [&](const TokenProb& t) { return t.token == gold; });
    };
    if (calibrated.rows.back().with_adapter && in_top(calibrated.rows.back()) && !in_top(vanilla.rows.back())) ++hits;
  }
  const double share = facts ? double(hits) / facts : 0.0;
  return {row_mismatch == 0 && facts == 20 && share >= 0.8,
          std::to_string(hits) + "/" + std::to_string(facts) + " facts gain the gold token in the adapter row top-10 (" +
              num(100 * share, 3) + "%), " + std::to_string(row_mismatch) + " final rows differ from predict_masked"};
}

// ---- 12 --------------------------------------------------------------------------

std::map<std::string, std::string> tree_hashes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).generic_string()] = sha256_file(e.path());
  }
  return out;
}

Outcome determinism(const Env& env) {
  ensure_pipeline(env, env.run_a());
  ensure_pipeline(env, env.run_b());
  const auto a = tree_hashes(env.run_a()), b = tree_hashes(env.run_b());
  std::size_t compared = 0;
  std::vector<std::string> diff;
  for (const auto& [rel, h] : a) {
    // sweeps run only in the first directory
    if (rel.rfind("sweep/", 0) == 0) continue;
    ++compared;
    auto it = b.find(rel);
    if (it == b.end() || it->second != h) diff.push_back(rel);
  }
  for (const auto& [rel, h] : b) {
    if (!a.count(rel)) diff.push_back(rel);
  }
  std::string detail = std::to_string(compared) + " files compared, " + std::to_string(diff.size()) + " differ";
  for (std::size_t i = 0; i < std::min<std::size_t>(3, diff.size()); ++i) detail += "; " + diff[i];
  return {diff.empty() && compared > 0, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  Env env;
  std::vector<int> only;
  app.add_option("--work", env.work, "scratch directory for runs")->required();
  app.add_option("--cli", env.cli, "factcal executable")->required()->check(CLI::ExistingFile);
  app.add_option("--configs", env.configs, "directory with default.json and scalability.json")->required();
  app.add_option("--only", only, "criterion numbers to run")->delimiter(',');
  app.add_option("--python", env.python, "python interpreter for the recompute script");
  app.add_option("--recompute-script", env.recompute_script, "tools/recompute_metrics.py")->check(CLI::ExistingFile);
  app.add_flag("--reuse", env.reuse, "keep finished runs found in the work directory");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(env.work);

  const std::vector<std::pair<std::string, std::function<Outcome(const Env&)>>> criteria{
      {"gradient correctness", gradients},
      {"CKA formula oracle", cka_oracle},
      {"zero-init identity", zero_init_identity},
      {"frozen-base guarantee", frozen_base},
      {"detection", detection},
      {"calibration efficacy", efficacy},
      {"scalability trend", scalability},
      {"slot-count trend", slot_count},
      {"layer-position trend", layer_position},
      {"metric recomputation", recomputation},
      {"trace faithfulness", trace_faithfulness},
      {"determinism", determinism},
  };
  // recomputation last so it covers every report the other criteria produced
  const std::vector<int> order{1, 2, 3, 4, 5, 6, 8, 9, 11, 12, 7, 10};

  std::map<int, std::pair<Outcome, double>> results;
  for (int n : order) {
    if (!only.empty() && std::find(only.begin(), only.end(), n) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[static_cast<std::size_t>(n - 1)].second(env);
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << "[criterion " << n << "] " << (o.pass ? "PASS" : "FAIL") << "  " << criteria[static_cast<std::size_t>(n - 1)].first
              << ": " << o.detail << " (" << num(secs, 3) << " s)" << std::endl;
    results[n] = {o, secs};
  }

  std::cout << "\nsummary\n";
  int failed = 0;
  for (const auto& [n, r] : results) {
    std::cout << "  " << std::setw(2) << n << "  " << (r.first.pass ? "PASS" : "FAIL") << "  "
              << criteria[static_cast<std::size_t>(n - 1)].first << '\n';
    failed += !r.first.pass;
  }
  std::cout << failed << " of " << results.size() << " criteria failed" << std::endl;
  return failed == 0 ? 0 : 1;
}
