#pragma once

#include "factcal/model.hpp"
#include "factcal/world.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace factcal {

struct CkaConfig {
  double alpha = 0.001;     ///< smoothing factor
  double threshold = 1.0;   ///< scores strictly below are false knowledge
  int negatives = 3;        ///< negative prompts per fact

  void validate() const;
};

void to_json(nlohmann::json& j, const CkaConfig& c);
void from_json(const nlohmann::json& j, CkaConfig& c);

/// (p_pos + alpha) / (mean(p_negs) + alpha), arithmetic mean over the negatives.
double cka_score(double p_pos, std::span<const double> p_negs, double alpha);

enum class Knowledge { known, false_fact };

inline Knowledge classify(double score, double threshold) {
  return score < threshold ? Knowledge::false_fact : Knowledge::known;
}

std::string knowledge_name(Knowledge k);

struct EmF1 {
  int em = 0;
  double f1 = 0.0;
};

/// Reading-comprehension style answer comparison: lowercase, collapse
/// whitespace, then exact match and bag-of-words F1.
EmF1 em_f1(const std::string& prediction, const std::string& gold);

/// Display form of an entity token (underscores become spaces).
std::string surface_form(const std::string& token);

/// One raw probability read: p(object) under one prompt of one fact.
struct ProbeRecord {
  int fact_id = 0;
  std::string prompt_kind;  ///< "positive" | "negative"
  int prompt_idx = 0;
  double p_object = 0.0;
};

void to_json(nlohmann::json& j, const ProbeRecord& r);
void from_json(const nlohmann::json& j, ProbeRecord& r);

struct FactAssessment {
  int fact_id = 0;
  double p_positive = 0.0;
  double mean_negative = 0.0;
  double cka = 0.0;
  Knowledge classification = Knowledge::known;
  std::string top1;
  std::string object;
  int em = 0;
  double f1 = 0.0;
};

struct AssessmentReport {
  std::vector<FactAssessment> facts;  ///< sorted by fact id
  double false_rate = 0.0;
  double mean_em = 0.0;
  double mean_f1 = 0.0;
  /// Mean negative-prompt probability per relation, for auditing negative templates.
  std::map<std::string, double> relation_mean_negative;
  std::vector<ProbeRecord> dump;

  std::vector<int> false_fact_ids() const;
  nlohmann::json to_json() const;
  std::string to_csv() const;
};

/// Builds a report from raw probabilities plus each fact's top-1 positive
/// prediction. `relation_of` maps fact id to relation name.
AssessmentReport assemble_report(std::span<const ProbeRecord> dump, const std::map<int, std::string>& top1,
                                 const std::map<int, std::string>& objects,
                                 const std::map<int, std::string>& relation_of, const CkaConfig& config);

/// Scores every probe set with the model: reads p(object) under the positive
/// and each negative prompt, computes CKA and the rank-based EM/F1 of the
/// top-1 positive prediction over the open vocabulary.
template <typename Scalar>
AssessmentReport assess_model(const ModelState<Scalar>& state, const World& world, std::span<const ProbeSet> probes,
                              const CkaConfig& config);

void write_probe_dump(const std::filesystem::path& path, std::span<const ProbeRecord> dump);
std::vector<ProbeRecord> read_probe_dump(const std::filesystem::path& path);

}  // namespace factcal
