#include "factcal/assess.hpp"

#include "factcal/errors.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace factcal {

using nlohmann::json;

void CkaConfig::validate() const {
  if (!(alpha >= 0.0)) throw ConfigError("cka: alpha must be >= 0");
  if (!(threshold > 0.0)) throw ConfigError("cka: threshold must be > 0");
  if (negatives < 1) throw ConfigError("cka: need at least one negative prompt");
}

void to_json(json& j, const CkaConfig& c) {
  j = json{{"alpha", c.alpha}, {"threshold", c.threshold}, {"negatives", c.negatives}};
}

void from_json(const json& j, CkaConfig& c) {
  c.alpha = j.value("alpha", c.alpha);
  c.threshold = j.value("threshold", c.threshold);
  c.negatives = j.value("negatives", c.negatives);
}

double cka_score(double p_pos, std::span<const double> p_negs, double alpha) {
  if (p_negs.empty()) throw std::invalid_argument("cka_score: no negative probabilities");
  double sum = 0.0;
  for (double p : p_negs) sum += p;
  const double mean = sum / static_cast<double>(p_negs.size());
  return (p_pos + alpha) / (mean + alpha);
}

std::string knowledge_name(Knowledge k) { return k == Knowledge::known ? "known" : "false_fact"; }

std::string surface_form(const std::string& token) {
  std::string out = token;
  std::replace(out.begin(), out.end(), '_', ' ');
  return out;
}

namespace {

std::vector<std::string> normalized_words(const std::string& s) {
  std::string lower = s;
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  std::istringstream in(lower);
  std::vector<std::string> words;
  std::string w;
  while (in >> w) words.push_back(w);
  return words;
}

}  // namespace

EmF1 em_f1(const std::string& prediction, const std::string& gold) {
  const auto p = normalized_words(prediction);
  const auto g = normalized_words(gold);
  EmF1 out;
  out.em = p == g ? 1 : 0;
  if (p.empty() || g.empty()) {
    out.f1 = p.empty() && g.empty() ? 1.0 : 0.0;
    return out;
  }
  std::map<std::string, int> counts;
  for (const auto& w : g) ++counts[w];
  int common = 0;
  for (const auto& w : p) {
    auto it = counts.find(w);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++common;
    }
  }
  if (common == 0) return out;
  const double precision = static_cast<double>(common) / static_cast<double>(p.size());
  const double recall = static_cast<double>(common) / static_cast<double>(g.size());
  out.f1 = 2.0 * precision * recall / (precision + recall);
  return out;
}

void to_json(json& j, const ProbeRecord& r) {
  j = json{{"fact_id", r.fact_id}, {"prompt_kind", r.prompt_kind}, {"prompt_idx", r.prompt_idx}, {"p_object", r.p_object}};
}

void from_json(const json& j, ProbeRecord& r) {
  r.fact_id = j.at("fact_id").get<int>();
  r.prompt_kind = j.at("prompt_kind").get<std::string>();
  r.prompt_idx = j.at("prompt_idx").get<int>();
  r.p_object = j.at("p_object").get<double>();
}

std::vector<int> AssessmentReport::false_fact_ids() const {
  std::vector<int> out;
  for (const auto& f : facts) {
    if (f.classification == Knowledge::false_fact) out.push_back(f.fact_id);
  }
  return out;
}

json AssessmentReport::to_json() const {
  json rows = json::array();
  for (const auto& f : facts) {
    rows.push_back({{"fact_id", f.fact_id},
                    {"p_positive", f.p_positive},
                    {"mean_negative", f.mean_negative},
                    {"cka", f.cka},
                    {"classification", knowledge_name(f.classification)},
                    {"top1", f.top1},
                    {"object", f.object},
                    {"em", f.em},
                    {"f1", f.f1}});
  }
  return json{{"facts", rows},
              {"false_rate", false_rate},
              {"mean_em", mean_em},
              {"mean_f1", mean_f1},
              {"relation_mean_negative", relation_mean_negative}};
}

std::string AssessmentReport::to_csv() const {
  std::ostringstream out;
  out << std::setprecision(17);
  out << "fact_id,p_positive,mean_negative,cka,classification,top1,object,em,f1\n";
  for (const auto& f : facts) {
    out << f.fact_id << ',' << f.p_positive << ',' << f.mean_negative << ',' << f.cka << ','
        << knowledge_name(f.classification) << ',' << f.top1 << ',' << f.object << ',' << f.em << ',' << f.f1 << '\n';
  }
  return out.str();
}

AssessmentReport assemble_report(std::span<const ProbeRecord> dump, const std::map<int, std::string>& top1,
                                 const std::map<int, std::string>& objects,
                                 const std::map<int, std::string>& relation_of, const CkaConfig& config) {
  config.validate();
  struct Reads {
    double pos = 0.0;
    bool has_pos = false;
    std::map<int, double> negs;
  };
  std::map<int, Reads> by_fact;
  for (const auto& r : dump) {
    auto& reads = by_fact[r.fact_id];
    if (r.prompt_kind == "positive") {
      reads.pos = r.p_object;
      reads.has_pos = true;
    } else if (r.prompt_kind == "negative") {
      reads.negs[r.prompt_idx] = r.p_object;
    } else {
      throw ConfigError("probability dump: unknown prompt kind '" + r.prompt_kind + "'");
    }
  }
  AssessmentReport report;
  report.dump.assign(dump.begin(), dump.end());
  std::map<std::string, std::pair<double, int>> rel_neg;
  double em_sum = 0.0, f1_sum = 0.0;
  std::size_t n_false = 0;
  for (const auto& [fact_id, reads] : by_fact) {
    if (!reads.has_pos || reads.negs.empty()) {
      throw ConfigError("probability dump: fact " + std::to_string(fact_id) + " lacks positive or negative reads");
    }
    std::vector<double> negs;
    for (const auto& [idx, p] : reads.negs) negs.push_back(p);
    FactAssessment fa;
    fa.fact_id = fact_id;
    fa.p_positive = reads.pos;
    double s = 0.0;
    for (double p : negs) s += p;
    fa.mean_negative = s / static_cast<double>(negs.size());
    fa.cka = cka_score(reads.pos, negs, config.alpha);
    fa.classification = classify(fa.cka, config.threshold);
    fa.top1 = top1.at(fact_id);
    fa.object = objects.at(fact_id);
    const EmF1 m = em_f1(surface_form(fa.top1), surface_form(fa.object));
    fa.em = m.em;
    fa.f1 = m.f1;
    em_sum += m.em;
    f1_sum += m.f1;
    if (fa.classification == Knowledge::false_fact) ++n_false;
    auto& acc = rel_neg[relation_of.at(fact_id)];
    acc.first += fa.mean_negative;
    acc.second += 1;
    report.facts.push_back(std::move(fa));
  }
  const double n = static_cast<double>(report.facts.size());
  if (!report.facts.empty()) {
    report.false_rate = static_cast<double>(n_false) / n;
    report.mean_em = em_sum / n;
    report.mean_f1 = f1_sum / n;
  }
  for (const auto& [rel, acc] : rel_neg) report.relation_mean_negative[rel] = acc.first / acc.second;
  return report;
}

template <typename Scalar>
AssessmentReport assess_model(const ModelState<Scalar>& state, const World& world, std::span<const ProbeSet> probes,
                              const CkaConfig& config) {
  config.validate();
  const Vocabulary& vocab = world.vocab;
  std::vector<std::vector<int>> prompts;
  std::vector<ProbeRecord> dump;
  std::vector<int> object_ids;
  for (const auto& p : probes) {
    const int obj = vocab.id(p.object);
    if (static_cast<int>(p.negatives.size()) < config.negatives) {
      throw ConfigError("probe set for fact " + std::to_string(p.fact_id) + " has too few negative prompts");
    }
    prompts.push_back(vocab.encode(p.positive));
    dump.push_back({p.fact_id, "positive", 0, 0.0});
    object_ids.push_back(obj);
    for (int k = 0; k < config.negatives; ++k) {
      prompts.push_back(vocab.encode(p.negatives[static_cast<std::size_t>(k)]));
      dump.push_back({p.fact_id, "negative", k, 0.0});
      object_ids.push_back(obj);
    }
  }
  const Matrix<Scalar> probs = mask_distributions(state, std::span<const std::vector<int>>(prompts), vocab.mask_id());
  std::map<int, std::string> top1, objects, relation_of;
  for (std::size_t i = 0; i < dump.size(); ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    dump[i].p_object = static_cast<double>(probs(row, object_ids[i]));
    if (dump[i].prompt_kind == "positive") {
      Eigen::Index best = 0;
      probs.row(row).maxCoeff(&best);
      top1[dump[i].fact_id] = vocab.token(static_cast<int>(best));
    }
  }
  for (const auto& p : probes) {
    objects[p.fact_id] = p.object;
    relation_of[p.fact_id] = world.schema(world.gold.at(static_cast<std::size_t>(p.fact_id))).name;
  }
  return assemble_report(dump, top1, objects, relation_of, config);
}

void write_probe_dump(const std::filesystem::path& path, std::span<const ProbeRecord> dump) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  for (const auto& r : dump) out << json(r).dump() << '\n';
}

std::vector<ProbeRecord> read_probe_dump(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("missing probability dump " + path.string());
  std::vector<ProbeRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(json::parse(line).get<ProbeRecord>());
  }
  return out;
}

template AssessmentReport assess_model<float>(const ModelState<float>&, const World&, std::span<const ProbeSet>,
                                              const CkaConfig&);
template AssessmentReport assess_model<double>(const ModelState<double>&, const World&, std::span<const ProbeSet>,
                                               const CkaConfig&);

}  // namespace factcal
