#include "factcal/world.hpp"

#include "factcal/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

namespace factcal {

using nlohmann::json;

namespace {

bool is_punct(const std::string& t) { return t == "." || t == "," || t == ";" || t == ":" || t == "!" || t == "?"; }

bool is_slot(const std::string& t) { return t == "[X]" || t == "[Y]"; }

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finaliser over (seed, stream)
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// ---- vocabulary ----------------------------------------------------------------

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) {
      throw ConfigError("vocabulary token '" + tokens_[i] + "' appears twice");
    }
  }
}

int Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  if (it == index_.end()) throw std::out_of_range("token '" + token + "' is not in the vocabulary");
  return it->second;
}

std::vector<int> Vocabulary::encode(std::span<const std::string> words) const {
  std::vector<int> out;
  out.reserve(words.size());
  for (const auto& w : words) out.push_back(id(w));
  return out;
}

// ---- tokenisation ----------------------------------------------------------------

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string word;
  while (in >> word) {
    std::vector<std::string> trailing;
    while (word.size() > 1 && is_punct(std::string(1, word.back())) && word != "[MASK]") {
      trailing.push_back(std::string(1, word.back()));
      word.pop_back();
    }
    out.push_back(word);
    out.insert(out.end(), trailing.rbegin(), trailing.rend());
  }
  return out;
}

std::string detokenize(std::span<const std::string> tokens) {
  std::string out;
  for (const auto& t : tokens) {
    if (!out.empty() && !is_punct(t)) out += ' ';
    out += t;
  }
  return out;
}

// ---- definition -------------------------------------------------------------------

int WorldDefinition::type_index(const std::string& name) const {
  for (std::size_t i = 0; i < types.size(); ++i) {
    if (types[i].name == name) return static_cast<int>(i);
  }
  throw ConfigError("unknown entity type '" + name + "'");
}

void WorldDefinition::validate() const {
  if (types.empty() || relations.empty()) throw ConfigError("world definition needs entity types and relations");
  std::set<std::string> seen;
  for (const auto& t : types) {
    for (const auto& e : t.entities) {
      if (!seen.insert(e).second) throw ConfigError("entity '" + e + "' is defined twice");
      if (e.find(' ') != std::string::npos) throw ConfigError("entity '" + e + "' must be a single token");
    }
  }
  for (const auto& r : relations) {
    type_index(r.subject_type);
    type_index(r.object_type);
    std::set<std::string> distinct(r.positive_templates.begin(), r.positive_templates.end());
    if (distinct.size() != r.positive_templates.size()) {
      throw ConfigError("relation " + r.name + ": positive templates must be pairwise distinct");
    }
    for (const auto& t : r.negative_templates) {
      if (distinct.count(t)) throw ConfigError("relation " + r.name + ": negative template equals a positive one");
    }
  }
}

void to_json(json& j, const WorldDefinition& w) {
  j = json::object();
  json types = json::array();
  for (const auto& t : w.types) types.push_back({{"name", t.name}, {"entities", t.entities}});
  json rels = json::array();
  for (const auto& r : w.relations) {
    rels.push_back({{"name", r.name},
                    {"subject_type", r.subject_type},
                    {"object_type", r.object_type},
                    {"positive_templates", r.positive_templates},
                    {"negative_templates", r.negative_templates}});
  }
  j["entity_types"] = std::move(types);
  j["relations"] = std::move(rels);
}

void from_json(const json& j, WorldDefinition& w) {
  w.types.clear();
  w.relations.clear();
  for (const auto& t : j.at("entity_types")) {
    w.types.push_back({t.at("name").get<std::string>(), t.at("entities").get<std::vector<std::string>>()});
  }
  for (const auto& r : j.at("relations")) {
    w.relations.push_back({r.at("name").get<std::string>(), r.at("subject_type").get<std::string>(),
                           r.at("object_type").get<std::string>(),
                           r.at("positive_templates").get<std::vector<std::string>>(),
                           r.at("negative_templates").get<std::vector<std::string>>()});
  }
}

WorldDefinition default_world_definition() {
  WorldDefinition w;
  auto cross = [](std::initializer_list<const char*> heads, std::initializer_list<const char*> tails) {
    std::vector<std::string> out;
    for (const char* h : heads) {
      for (const char* t : tails) out.push_back(std::string(h) + "_" + t);
    }
    return out;
  };
  w.types.push_back({"person", cross({"ada", "boris", "clara", "dmitri", "elena", "farid", "greta", "hugo", "ines", "jonas",
                                      "kira", "luca", "mira", "nils", "olga", "pavel", "rosa", "sven", "tomas", "vera"},
                                     {"arden", "brandt", "castell", "dorn", "ellery", "falk", "grimm", "holt", "ivers",
                                      "jansen"})});
  w.types.push_back({"city", cross({"port", "new", "san", "fort", "lake", "north", "west", "old"},
                                   {"alba", "kessel", "marin", "ostra", "velde"})});
  w.types.push_back({"country", cross({"north", "south", "east", "west", "upper"},
                                      {"vandria", "korvel", "estmar", "lunavia", "taldor", "myrene", "ostval", "quarn"})});
  w.types.push_back({"language", cross({"old", "high", "low", "coastal", "classical"},
                                       {"vandic", "korvish", "estmaric", "lunavian", "taldic", "myrenic", "ostvalic",
                                        "quarnish"})});
  w.types.push_back({"profession", cross({"chief", "junior", "senior", "master", "field"},
                                         {"chemist", "painter", "surveyor", "architect", "botanist", "sculptor",
                                          "linguist", "navigator"})});

  // Seven sentence frames; relation r lists them rotated by r so every frame
  // is a train-split frame for some relation.
  const std::vector<std::string> frames = {
      "[X] {} [Y] .",
      "[X] , who {} [Y] .",
      "the person [X] {} [Y] .",
      "records show that [X] {} [Y] .",
      "it is known that [X] {} [Y] .",
      "reportedly , [X] {} [Y] .",
      "indeed , [X] {} [Y] .",
  };
  const std::map<std::string, std::vector<std::string>> negatives = {
      {"city", {"has never visited", "was banned from", "has no link to"}},
      {"country", {"was expelled from", "is a foreigner to", "has no passport of"}},
      {"language", {"cannot read", "has never heard", "refuses to learn"}},
      {"profession", {"failed as a", "was rejected as a", "has no skill as a"}},
      {"person", {"has never met", "is a rival of", "refused to meet"}},
  };
  const std::vector<std::tuple<std::string, std::string, std::string>> relations = {
      {"born_in", "city", "was born in"},
      {"died_in", "city", "died in"},
      {"works_in", "city", "works in"},
      {"citizen_of", "country", "is a citizen of"},
      {"studied_in", "country", "studied in"},
      {"native_language", "language", "natively speaks"},
      {"translates", "language", "translates from"},
      {"occupation", "profession", "is employed as a"},
      {"trained_as", "profession", "trained as a"},
      {"mentored_by", "person", "was mentored by"},
  };
  auto fill = [](const std::string& frame, const std::string& phrase) {
    std::string out = frame;
    out.replace(out.find("{}"), 2, phrase);
    return out;
  };
  for (std::size_t r = 0; r < relations.size(); ++r) {
    const auto& [name, object_type, phrase] = relations[r];
    RelationSchema schema{name, "person", object_type, {}, {}};
    for (std::size_t i = 0; i < frames.size(); ++i) schema.positive_templates.push_back(fill(frames[(r + i) % frames.size()], phrase));
    for (const auto& neg : negatives.at(object_type)) schema.negative_templates.push_back("[X] " + neg + " [Y] .");
    w.relations.push_back(std::move(schema));
  }
  return w;
}

// ---- spec -----------------------------------------------------------------------

void WorldSpec::validate() const {
  if (facts <= 0) throw ConfigError("world spec: facts must be positive");
  if (!(corruption_rate >= 0.0 && corruption_rate < 1.0)) throw ConfigError("world spec: corruption rate must lie in [0, 1)");
  if (renders_per_fact <= 0) throw ConfigError("world spec: renders_per_fact must be positive");
  if (!(word_mask_rate >= 0.0 && word_mask_rate < 1.0)) throw ConfigError("world spec: word_mask_rate must lie in [0, 1)");
  if (train_templates < 1 || valid_templates < 1) throw ConfigError("world spec: need >= 1 train and >= 1 valid template");
  if (relations < 0 || max_entities_per_type < 0 || background_statements < 0 || calibration_word_masks < 0) {
    throw ConfigError("world spec: counts must be non-negative");
  }
}

void to_json(json& j, const WorldSpec& s) {
  j = json{{"facts", s.facts},
           {"relations", s.relations},
           {"max_entities_per_type", s.max_entities_per_type},
           {"corruption_rate", s.corruption_rate},
           {"renders_per_fact", s.renders_per_fact},
           {"word_mask_rate", s.word_mask_rate},
           {"background_statements", s.background_statements},
           {"calibration_word_masks", s.calibration_word_masks},
           {"train_templates", s.train_templates},
           {"valid_templates", s.valid_templates},
           {"seed", s.seed}};
}

void from_json(const json& j, WorldSpec& s) {
  s.facts = j.value("facts", s.facts);
  s.relations = j.value("relations", s.relations);
  s.max_entities_per_type = j.value("max_entities_per_type", s.max_entities_per_type);
  s.corruption_rate = j.value("corruption_rate", s.corruption_rate);
  s.renders_per_fact = j.value("renders_per_fact", s.renders_per_fact);
  s.word_mask_rate = j.value("word_mask_rate", s.word_mask_rate);
  s.background_statements = j.value("background_statements", s.background_statements);
  s.calibration_word_masks = j.value("calibration_word_masks", s.calibration_word_masks);
  s.train_templates = j.value("train_templates", s.train_templates);
  s.valid_templates = j.value("valid_templates", s.valid_templates);
  s.seed = j.value("seed", s.seed);
}

std::string split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
  }
  return "?";
}

void to_json(json& j, const Example& e) {
  j = json{{"source", e.source},           {"target", e.target}, {"fact_id", e.fact_id},
           {"template_id", e.template_id}, {"split", e.split},   {"set_name", e.set_name}};
}

void from_json(const json& j, Example& e) {
  e.source = j.at("source").get<std::vector<std::string>>();
  e.target = j.at("target").get<std::string>();
  e.fact_id = j.at("fact_id").get<int>();
  e.template_id = j.at("template_id").get<std::string>();
  e.split = j.at("split").get<std::string>();
  e.set_name = j.at("set_name").get<std::string>();
}

void to_json(json& j, const ProbeSet& p) {
  j = json{{"fact_id", p.fact_id}, {"positive", p.positive}, {"negatives", p.negatives}, {"object", p.object}};
}

void from_json(const json& j, ProbeSet& p) {
  p.fact_id = j.at("fact_id").get<int>();
  p.positive = j.at("positive").get<std::vector<std::string>>();
  p.negatives = j.at("negatives").get<std::vector<std::vector<std::string>>>();
  p.object = j.at("object").get<std::string>();
}

// ---- world ----------------------------------------------------------------------

std::vector<int> World::entities_of_type(int type) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < entity_types.size(); ++i) {
    if (entity_types[i] == type) out.push_back(static_cast<int>(i));
  }
  return out;
}

Split World::template_split(int template_index) const {
  if (template_index < spec.train_templates) return Split::train;
  if (template_index < spec.train_templates + spec.valid_templates) return Split::valid;
  return Split::test;
}

std::vector<int> World::templates_in(const RelationSchema& r, Split s) const {
  std::vector<int> out;
  for (int i = 0; i < static_cast<int>(r.positive_templates.size()); ++i) {
    if (template_split(i) == s) out.push_back(i);
  }
  return out;
}

bool World::is_entity(const std::string& token) const {
  return std::find(entity_names.begin(), entity_names.end(), token) != entity_names.end();
}

std::string template_id(const RelationSchema& r, int template_index) { return r.name + "#" + std::to_string(template_index); }

World generate_world(const WorldDefinition& definition, const WorldSpec& spec) {
  definition.validate();
  spec.validate();
  World w;
  w.definition = definition;
  w.spec = spec;

  for (std::size_t t = 0; t < definition.types.size(); ++t) {
    const auto& ents = definition.types[t].entities;
    const std::size_t n =
        spec.max_entities_per_type > 0 ? std::min<std::size_t>(ents.size(), static_cast<std::size_t>(spec.max_entities_per_type)) : ents.size();
    for (std::size_t i = 0; i < n; ++i) {
      w.entity_names.push_back(ents[i]);
      w.entity_types.push_back(static_cast<int>(t));
    }
  }

  const int n_rel = spec.relations > 0 ? spec.relations : static_cast<int>(definition.relations.size());
  if (n_rel > static_cast<int>(definition.relations.size())) {
    throw ConfigError("world spec asks for " + std::to_string(n_rel) + " relations, definition has " +
                      std::to_string(definition.relations.size()));
  }
  for (int r = 0; r < n_rel; ++r) {
    const auto& rel = definition.relations[static_cast<std::size_t>(r)];
    const int needed = spec.train_templates + spec.valid_templates + 1;
    if (static_cast<int>(rel.positive_templates.size()) < needed) {
      throw ConfigError("relation " + rel.name + " has " + std::to_string(rel.positive_templates.size()) +
                        " positive templates, splits need at least " + std::to_string(needed));
    }
    if (spec.corruption_rate > 0 && w.entities_of_type(definition.type_index(rel.object_type)).size() < 2) {
      throw ConfigError("entity type " + rel.object_type + " has fewer than 2 entities and cannot host corruption");
    }
    w.relations.push_back(r);
  }

  std::mt19937_64 rng(derive_seed(spec.seed, 1));
  int fact_id = 0;
  for (int ri = 0; ri < n_rel; ++ri) {
    const int count = spec.facts / n_rel + (ri < spec.facts % n_rel ? 1 : 0);
    const auto& rel = definition.relations[static_cast<std::size_t>(ri)];
    const int st = definition.type_index(rel.subject_type), ot = definition.type_index(rel.object_type);
    std::vector<int> subjects = w.entities_of_type(st);
    if (static_cast<int>(subjects.size()) < count) {
      throw ConfigError("relation " + rel.name + " needs " + std::to_string(count) + " distinct subjects, type " +
                        rel.subject_type + " has " + std::to_string(subjects.size()));
    }
    std::shuffle(subjects.begin(), subjects.end(), rng);
    subjects.resize(static_cast<std::size_t>(count));
    std::sort(subjects.begin(), subjects.end());
    const std::vector<int> objects = w.entities_of_type(ot);
    for (int s : subjects) {
      std::vector<int> pool;
      for (int o : objects) {
        if (o != s) pool.push_back(o);
      }
      if (pool.empty()) throw ConfigError("relation " + rel.name + " has no admissible object for a subject");
      std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
      w.gold.push_back({fact_id++, s, ri, pool[pick(rng)], st, ot});
    }
  }

  w.corrupted = w.gold;
  w.corrupted_label.assign(w.gold.size(), false);
  const auto n_corrupt = static_cast<std::size_t>(std::floor(spec.corruption_rate * static_cast<double>(w.gold.size()) + 1e-9));
  std::vector<int> order(w.gold.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::mt19937_64 crng(derive_seed(spec.seed, 2));
  std::shuffle(order.begin(), order.end(), crng);
  order.resize(n_corrupt);
  std::sort(order.begin(), order.end());
  for (int idx : order) {
    Fact& f = w.corrupted[static_cast<std::size_t>(idx)];
    std::vector<int> pool;
    for (int o : w.entities_of_type(f.object_type)) {
      if (o != f.object && o != f.subject) pool.push_back(o);
    }
    if (pool.empty()) throw ConfigError("entity type " + definition.types[static_cast<std::size_t>(f.object_type)].name + " cannot host corruption");
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    f.object = pool[pick(crng)];
    w.corrupted_label[static_cast<std::size_t>(idx)] = true;
  }

  std::set<std::string> words;
  for (int ri : w.relations) {
    const auto& rel = definition.relations[static_cast<std::size_t>(ri)];
    for (const auto* list : {&rel.positive_templates, &rel.negative_templates}) {
      for (const auto& t : *list) {
        for (const auto& tok : tokenize(t)) {
          if (!is_slot(tok)) words.insert(tok);
        }
      }
    }
  }
  std::vector<std::string> tokens{kMaskToken};
  for (const auto& word : words) {
    if (std::find(w.entity_names.begin(), w.entity_names.end(), word) != w.entity_names.end()) {
      throw ConfigError("template word '" + word + "' collides with an entity name");
    }
    tokens.push_back(word);
  }
  tokens.insert(tokens.end(), w.entity_names.begin(), w.entity_names.end());
  w.vocab = Vocabulary(std::move(tokens));
  return w;
}

Example fill_template(const std::string& subject, const std::string& object, const std::string& templ, MaskSide side) {
  const auto toks = tokenize(templ);
  if (std::count(toks.begin(), toks.end(), "[X]") != 1 || std::count(toks.begin(), toks.end(), "[Y]") != 1) {
    throw ConfigError("template '" + templ + "' must contain exactly one [X] and one [Y]");
  }
  Example e;
  for (const auto& t : toks) {
    if (t == "[X]") {
      e.source.push_back(side == MaskSide::subject ? kMaskToken : subject);
    } else if (t == "[Y]") {
      e.source.push_back(side == MaskSide::object ? kMaskToken : object);
    } else {
      e.source.push_back(t);
    }
  }
  e.target = side == MaskSide::subject ? subject : object;
  return e;
}

Example fill_template(const World& world, const Fact& fact, int template_index, MaskSide side) {
  const auto& rel = world.schema(fact);
  Example e = fill_template(world.name(fact.subject), world.name(fact.object),
                            rel.positive_templates.at(static_cast<std::size_t>(template_index)), side);
  e.fact_id = fact.id;
  e.template_id = template_id(rel, template_index);
  e.split = split_name(world.template_split(template_index));
  return e;
}

namespace {

/// Unmasks `e` (a rendering of `f` through template `ti`) and returns the
/// positions of its template words.
std::vector<std::size_t> template_word_positions(const World& world, const Fact& f, int ti, Example& e) {
  const auto toks = tokenize(world.schema(f).positive_templates[static_cast<std::size_t>(ti)]);
  std::vector<std::size_t> words;
  for (std::size_t i = 0; i < toks.size(); ++i) {
    e.source[i] = toks[i] == "[X]" ? world.name(f.subject) : toks[i] == "[Y]" ? world.name(f.object) : toks[i];
    if (!is_slot(toks[i]) && !is_punct(toks[i])) words.push_back(i);
  }
  return words;
}

void mask_at(Example& e, std::size_t pos) {
  e.target = e.source[pos];
  e.source[pos] = kMaskToken;
}

}  // namespace

std::vector<Example> build_pretrain_corpus(const World& world) {
  std::mt19937_64 rng(derive_seed(world.spec.seed, 3));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<Example> corpus;
  for (const Fact& f : world.corrupted) {
    const auto train = world.templates_in(world.schema(f), Split::train);
    std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);
    for (int k = 0; k < world.spec.renders_per_fact; ++k) {
      const int ti = train[pick(rng)];
      const MaskSide side = unit(rng) < 0.5 ? MaskSide::subject : MaskSide::object;
      Example e = fill_template(world, f, ti, side);
      if (unit(rng) < world.spec.word_mask_rate) {
        // mask a template word instead of an entity
        const auto words = template_word_positions(world, f, ti, e);
        std::uniform_int_distribution<std::size_t> wpick(0, words.size() - 1);
        mask_at(e, words[wpick(rng)]);
      }
      e.split = "train";
      e.set_name = "pretrain";
      corpus.push_back(std::move(e));
    }
  }
  // negative-template statements about random same-type pairs
  std::mt19937_64 brng(derive_seed(world.spec.seed, 6));
  std::uniform_int_distribution<std::size_t> rel_pick(0, world.relations.size() - 1);
  for (int k = 0; k < world.spec.background_statements; ++k) {
    const int r = world.relations[rel_pick(brng)];
    const auto& schema = world.definition.relations[static_cast<std::size_t>(r)];
    const auto subjects = world.entities_of_type(world.definition.type_index(schema.subject_type));
    const auto objects = world.entities_of_type(world.definition.type_index(schema.object_type));
    std::uniform_int_distribution<std::size_t> spick(0, subjects.size() - 1), opick(0, objects.size() - 1);
    std::uniform_int_distribution<std::size_t> npick(0, schema.negative_templates.size() - 1);
    const std::size_t ni = npick(brng);
    const int subj = subjects[spick(brng)];
    int obj = objects[opick(brng)];
    if (objects.size() == 1 && obj == subj) continue;
    while (obj == subj) obj = objects[opick(brng)];
    Example e = fill_template(world.name(subj), world.name(obj), schema.negative_templates[ni], MaskSide::object);
    e.template_id = schema.name + "#neg" + std::to_string(ni);
    e.split = "train";
    e.set_name = "pretrain";
    corpus.push_back(std::move(e));
  }
  std::mt19937_64 srng(derive_seed(world.spec.seed, 4));
  std::shuffle(corpus.begin(), corpus.end(), srng);
  return corpus;
}

std::vector<ProbeSet> build_probe_sets(const World& world, std::span<const Fact> facts, int k_neg) {
  if (k_neg < 1) throw ConfigError("probe sets need at least one negative prompt");
  std::vector<ProbeSet> out;
  for (const Fact& f : facts) {
    const auto& rel = world.schema(f);
    if (static_cast<int>(rel.negative_templates.size()) < k_neg) {
      throw ConfigError("relation " + rel.name + " has " + std::to_string(rel.negative_templates.size()) +
                        " negative templates, " + std::to_string(k_neg) + " required");
    }
    ProbeSet p;
    p.fact_id = f.id;
    p.object = world.name(f.object);
    p.positive = fill_template(world.name(f.subject), p.object, rel.positive_templates.front(), MaskSide::object).source;
    for (int k = 0; k < k_neg; ++k) {
      p.negatives.push_back(
          fill_template(world.name(f.subject), p.object, rel.negative_templates[static_cast<std::size_t>(k)], MaskSide::object).source);
    }
    out.push_back(std::move(p));
  }
  return out;
}

namespace {

std::vector<int> canonical_ids(const World& world, std::span<const int> fact_ids) {
  std::vector<int> ids(fact_ids.begin(), fact_ids.end());
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  for (int id : ids) {
    if (id < 0 || id >= static_cast<int>(world.gold.size())) throw std::out_of_range("fact id " + std::to_string(id) + " not in the KB");
  }
  return ids;
}

}  // namespace

CalibrationSets build_calibration_sets(const World& world, std::span<const int> fact_ids) {
  CalibrationSets out;
  for (int id : canonical_ids(world, fact_ids)) {
    const Fact& f = world.gold[static_cast<std::size_t>(id)];
    std::mt19937_64 rng(derive_seed(derive_seed(world.spec.seed, 7), static_cast<std::uint64_t>(id)));
    for (Split s : {Split::train, Split::valid, Split::test}) {
      auto& dst = s == Split::train ? out.train : s == Split::valid ? out.valid : out.test;
      for (int ti : world.templates_in(world.schema(f), s)) {
        for (MaskSide side : {MaskSide::subject, MaskSide::object}) {
          Example e = fill_template(world, f, ti, side);
          e.set_name = "calibration_" + split_name(s);
          dst.push_back(std::move(e));
        }
        if (s == Split::test) continue;
        // template-word masks keep the objective the pretraining one
        Example base = fill_template(world, f, ti, MaskSide::object);
        base.set_name = "calibration_" + split_name(s);
        auto words = template_word_positions(world, f, ti, base);
        std::shuffle(words.begin(), words.end(), rng);
        const auto n = std::min<std::size_t>(words.size(), static_cast<std::size_t>(world.spec.calibration_word_masks));
        for (std::size_t k = 0; k < n; ++k) {
          Example e = base;
          mask_at(e, words[k]);
          dst.push_back(std::move(e));
        }
      }
    }
  }
  return out;
}

EvalSets build_eval_sets(const World& world, std::span<const int> fact_ids, std::uint64_t seed) {
  EvalSets out;
  std::mt19937_64 rng(derive_seed(seed, 5));
  for (int id : canonical_ids(world, fact_ids)) {
    const Fact& f = world.gold[static_cast<std::size_t>(id)];
    const auto& rel = world.schema(f);
    for (int ti : world.templates_in(rel, Split::test)) {
      for (MaskSide side : {MaskSide::subject, MaskSide::object}) {
        Example e = fill_template(world, f, ti, side);
        e.set_name = "original";
        Example adv = e;
        adv.set_name = "adversarial";
        const int gold = side == MaskSide::object ? f.object : f.subject;
        const int other = side == MaskSide::object ? f.subject : f.object;
        std::vector<int> pool;
        for (int c : world.entities_of_type(side == MaskSide::object ? f.object_type : f.subject_type)) {
          if (c != gold && c != other) pool.push_back(c);
        }
        std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
        adv.target = world.name(pool[pick(rng)]);
        // a corrupted fact's pretraining object is the false belief to reject
        const Fact& seen = world.corrupted[static_cast<std::size_t>(id)];
        if (side == MaskSide::object && seen.object != f.object) adv.target = world.name(seen.object);
        out.original.push_back(std::move(e));
        out.adversarial.push_back(std::move(adv));
      }
      const auto toks = tokenize(rel.positive_templates[static_cast<std::size_t>(ti)]);
      Example lm;
      for (const auto& t : toks) lm.source.push_back(t == "[X]" ? world.name(f.subject) : t == "[Y]" ? world.name(f.object) : t);
      std::vector<std::size_t> content;
      for (std::size_t i = 0; i < lm.source.size(); ++i) {
        if (!is_punct(lm.source[i])) content.push_back(i);
      }
      std::uniform_int_distribution<std::size_t> pick(0, content.size() - 1);
      const std::size_t pos = content[pick(rng)];
      lm.target = lm.source[pos];
      lm.source[pos] = kMaskToken;
      lm.fact_id = f.id;
      lm.template_id = template_id(rel, ti);
      lm.split = "test";
      lm.set_name = "lm";
      out.lm.push_back(std::move(lm));
    }
  }
  return out;
}

// ---- files ----------------------------------------------------------------------

void write_jsonl(const std::filesystem::path& path, std::span<const Example> examples) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  for (const auto& e : examples) out << json(e).dump() << '\n';
}

std::vector<Example> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("missing dataset file " + path.string());
  std::vector<Example> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(json::parse(line).get<Example>());
  }
  return out;
}

void write_kb_tsv(const std::filesystem::path& path, const World& world, std::span<const Fact> kb) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << "subject\trelation\tobject\tis_corrupted\n";
  for (const Fact& f : kb) {
    out << world.name(f.subject) << '\t' << world.schema(f).name << '\t' << world.name(f.object) << '\t'
        << (world.corrupted_label[static_cast<std::size_t>(f.id)] ? 1 : 0) << '\n';
  }
}

void write_world_files(const std::filesystem::path& dir, const World& world) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "world.json", std::ios::trunc);
    out << json{{"definition", world.definition}, {"spec", world.spec}}.dump(2) << '\n';
  }
  {
    std::ofstream out(dir / "vocab.json", std::ios::trunc);
    out << json(world.vocab.tokens()).dump() << '\n';
  }
  write_kb_tsv(dir / "kb_gold.tsv", world, world.gold);
  write_kb_tsv(dir / "kb_corrupted.tsv", world, world.corrupted);
}

World load_world(const std::filesystem::path& dir) {
  std::ifstream in(dir / "world.json");
  if (!in) throw MissingArtifactError("missing " + (dir / "world.json").string() + " (run worldgen first)");
  const json j = json::parse(in);
  return generate_world(j.at("definition").get<WorldDefinition>(), j.at("spec").get<WorldSpec>());
}

}  // namespace factcal
