#pragma once

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace factcal {

inline constexpr const char* kMaskToken = "[MASK]";

/// Word-level vocabulary: [MASK], template words (sorted), then entities.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> tokens);

  int id(const std::string& token) const;  ///< throws std::out_of_range naming the token
  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  int size() const { return static_cast<int>(tokens_.size()); }
  int mask_id() const { return id(kMaskToken); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<int> encode(std::span<const std::string> words) const;

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int> index_;
};

struct EntityType {
  std::string name;
  std::vector<std::string> entities;
};

/// Positive templates in split order (canonical probe template first);
/// negative templates contradict the relation while asking for the same
/// object type.
struct RelationSchema {
  std::string name;
  std::string subject_type;
  std::string object_type;
  std::vector<std::string> positive_templates;
  std::vector<std::string> negative_templates;
};

struct WorldDefinition {
  std::vector<EntityType> types;
  std::vector<RelationSchema> relations;

  void validate() const;
  int type_index(const std::string& name) const;
};

void to_json(nlohmann::json& j, const WorldDefinition& w);
void from_json(const nlohmann::json& j, WorldDefinition& w);

/// Built-in desk-scale world: 5 entity types, 10 person-subject relations.
WorldDefinition default_world_definition();

struct WorldSpec {
  int facts = 1000;
  int relations = 0;              ///< 0 = every relation in the definition
  int max_entities_per_type = 0;  ///< 0 = no cap
  double corruption_rate = 0.3;
  int renders_per_fact = 8;
  double word_mask_rate = 0.15;  ///< pretraining renders that mask a template word instead of an entity
  /// Pretraining sentences that render negative templates over random
  /// same-type pairs, so negative prompts carry a subject-independent prior.
  int background_statements = 2000;
  /// Template-word-masked renderings added per train/valid calibration rendering.
  int calibration_word_masks = 1;
  int train_templates = 4;
  int valid_templates = 1;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const WorldSpec& s);
void from_json(const nlohmann::json& j, WorldSpec& s);

struct Fact {
  int id = 0;
  int subject = 0;  ///< global entity index
  int relation = 0;
  int object = 0;
  int subject_type = 0;
  int object_type = 0;

  bool operator==(const Fact&) const = default;
};

enum class MaskSide { subject, object };
enum class Split { train, valid, test };

std::string split_name(Split s);

/// One masked sentence and the token that fills the mask.
struct Example {
  std::vector<std::string> source;
  std::string target;
  int fact_id = -1;
  std::string template_id;
  std::string split;
  std::string set_name;

  bool operator==(const Example&) const = default;
};

void to_json(nlohmann::json& j, const Example& e);
void from_json(const nlohmann::json& j, Example& e);

struct ProbeSet {
  int fact_id = 0;
  std::vector<std::string> positive;
  std::vector<std::vector<std::string>> negatives;
  std::string object;
};

void to_json(nlohmann::json& j, const ProbeSet& p);
void from_json(const nlohmann::json& j, ProbeSet& p);

struct World {
  WorldDefinition definition;
  WorldSpec spec;
  std::vector<std::string> entity_names;  ///< global entity index -> token
  std::vector<int> entity_types;          ///< global entity index -> type index
  std::vector<int> relations;             ///< definition indices of relations in use
  std::vector<Fact> gold;
  std::vector<Fact> corrupted;
  std::vector<bool> corrupted_label;
  Vocabulary vocab;

  const RelationSchema& schema(const Fact& f) const { return definition.relations.at(static_cast<std::size_t>(f.relation)); }
  const std::string& name(int entity) const { return entity_names.at(static_cast<std::size_t>(entity)); }
  std::vector<int> entities_of_type(int type) const;
  Split template_split(int template_index) const;
  std::vector<int> templates_in(const RelationSchema& r, Split s) const;
  bool is_entity(const std::string& token) const;
};

/// Splits a sentence on whitespace and peels trailing punctuation off words.
std::vector<std::string> tokenize(const std::string& text);
/// Inverse of tokenize for display: punctuation re-attached to the previous word.
std::string detokenize(std::span<const std::string> tokens);

/// Samples the gold KB and its corrupted copy. Pure function of (definition, spec).
World generate_world(const WorldDefinition& definition, const WorldSpec& spec);

/// Substitutes the entities into a [X]/[Y] template, masking one side.
Example fill_template(const std::string& subject, const std::string& object, const std::string& templ, MaskSide side);
Example fill_template(const World& world, const Fact& fact, int template_index, MaskSide side);

std::string template_id(const RelationSchema& r, int template_index);

/// Masked-LM corpus rendered from the corrupted KB through train-split
/// templates, plus the background statements.
std::vector<Example> build_pretrain_corpus(const World& world);

/// Canonical positive prompt plus the first k_neg negative prompts, object side masked.
std::vector<ProbeSet> build_probe_sets(const World& world, std::span<const Fact> facts, int k_neg = 3);

struct CalibrationSets {
  std::vector<Example> train;
  std::vector<Example> valid;
  std::vector<Example> test;
};

/// Gold-object renderings of the selected facts through each split's templates,
/// both sides masked. Train and valid also get `calibration_word_masks`
/// renderings with a template word masked.
CalibrationSets build_calibration_sets(const World& world, std::span<const int> fact_ids);

struct EvalSets {
  std::vector<Example> original;
  std::vector<Example> adversarial;
  std::vector<Example> lm;

  bool operator==(const EvalSets&) const = default;
};

/// Held-out-template evaluation sets for the selected facts. Adversarial
/// targets are wrong same-type entities; object-side targets of corrupted
/// facts use the corrupted object seen in pretraining.
EvalSets build_eval_sets(const World& world, std::span<const int> fact_ids, std::uint64_t seed);

// ---- files -------------------------------------------------------------------

void write_jsonl(const std::filesystem::path& path, std::span<const Example> examples);
std::vector<Example> read_jsonl(const std::filesystem::path& path);
void write_kb_tsv(const std::filesystem::path& path, const World& world, std::span<const Fact> kb);
/// Writes world.json, vocab.json, kb_gold.tsv, kb_corrupted.tsv into `dir`.
void write_world_files(const std::filesystem::path& dir, const World& world);

/// Rebuilds a world from the files written by write_world_files (regenerates and checks the KBs).
World load_world(const std::filesystem::path& dir);

/// Deterministic 64-bit stream derivation for independent seeded sub-streams.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace factcal
