#include "factcal/assess.hpp"

#include <doctest.h>

#include <filesystem>
#include <random>

using namespace factcal;

TEST_CASE("cka examples") {
  const std::vector<double> negs{0.1, 0.2, 0.3};
  CHECK(std::abs(cka_score(0.5, negs, 0.0) - 2.5) < 1e-12);
  const std::vector<double> same{0.1, 0.1, 0.1};
  CHECK(std::abs(cka_score(0.5, same, 0.001) - 4.96040) < 1e-5);
  for (double alpha : {0.0, 0.001, 3.0}) {
    const std::vector<double> xs{0.37, 0.37};
    CHECK(cka_score(0.37, xs, alpha) == 1.0);
  }
  CHECK_THROWS_AS(cka_score(0.5, std::vector<double>{}, 0.001), std::invalid_argument);
}

TEST_CASE("cka properties") {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(1e-6, 1.0);
  for (int i = 0; i < 500; ++i) {
    const double p = u(rng);
    std::vector<double> negs{u(rng), u(rng), u(rng)};
    const double s = cka_score(p, negs, 0.001);
    CHECK(cka_score(std::min(1.0, p * 1.01 + 1e-9), negs, 0.001) > s);
    auto bigger = negs;
    bigger[1] = std::min(1.0, bigger[1] * 1.01 + 1e-9);
    CHECK(cka_score(p, bigger, 0.001) < s);
    const double c = u(rng);
    std::vector<double> scaled;
    for (double n : negs) scaled.push_back(n * c);
    CHECK(std::abs(cka_score(p * c, scaled, 0.0) - cka_score(p, negs, 0.0)) < 1e-12 * cka_score(p, negs, 0.0) + 1e-12);
    const double big = cka_score(p, negs, 1e9);
    CHECK(big >= 0.999);
    CHECK(big <= 1.001);
  }
}

TEST_CASE("classify is strict") {
  CHECK(classify(0.98, 1.0) == Knowledge::false_fact);
  CHECK(classify(4.45, 1.0) == Knowledge::known);
  CHECK(classify(1.0, 1.0) == Knowledge::known);
}

TEST_CASE("em and f1") {
  auto r = em_f1("Hawaii", "Hawaii");
  CHECK(r.em == 1);
  CHECK(r.f1 == 1.0);
  r = em_f1("New York", "New York City");
  CHECK(r.em == 0);
  CHECK(std::abs(r.f1 - 0.8) < 1e-12);
  r = em_f1("", "Hawaii");
  CHECK(r.em == 0);
  CHECK(r.f1 == 0.0);
  CHECK(em_f1("  new   YORK ", "New York").em == 1);
  CHECK(surface_form("new_york_city") == "new york city");
}

TEST_CASE("report assembly and recomputation") {
  // four facts with scores 0.5, 2.0, 0.9 and 1.0 (alpha 0, one negative each)
  const std::vector<std::pair<double, double>> pn{{0.05, 0.1}, {0.2, 0.1}, {0.09, 0.1}, {0.1, 0.1}};
  std::vector<ProbeRecord> dump;
  std::map<int, std::string> top1, objects, relation_of;
  for (int i = 0; i < 4; ++i) {
    dump.push_back({i, "positive", 0, pn[static_cast<std::size_t>(i)].first});
    dump.push_back({i, "negative", 0, pn[static_cast<std::size_t>(i)].second});
    top1[i] = i % 2 ? "paris" : "rome";
    objects[i] = "paris";
    relation_of[i] = i < 2 ? "born_in" : "works_in";
  }
  CkaConfig cfg;
  cfg.alpha = 0.0;
  cfg.negatives = 1;
  const auto report = assemble_report(dump, top1, objects, relation_of, cfg);
  CHECK(report.false_rate == 0.5);
  CHECK(report.false_fact_ids() == std::vector<int>{0, 2});
  CHECK(report.mean_em == 0.5);
  CHECK(std::abs(report.relation_mean_negative.at("born_in") - 0.1) < 1e-15);

  // the dump alone reproduces the report exactly
  const auto path = std::filesystem::temp_directory_path() / "factcal_unit" / "probes.jsonl";
  std::filesystem::create_directories(path.parent_path());
  write_probe_dump(path, report.dump);
  const auto back = read_probe_dump(path);
  const auto again = assemble_report(back, top1, objects, relation_of, cfg);
  CHECK(again.to_json() == report.to_json());
  CHECK(again.to_csv() == report.to_csv());
  for (std::size_t i = 0; i < report.facts.size(); ++i) {
    const auto& f = report.facts[i];
    const std::vector<double> negs{f.mean_negative};
    CHECK(f.cka == cka_score(f.p_positive, negs, 0.0));
  }
}

TEST_CASE("config validation") {
  CkaConfig c;
  c.threshold = 0.0;
  CHECK_THROWS(c.validate());
  c = CkaConfig{};
  c.alpha = -1;
  CHECK_THROWS(c.validate());
  c = CkaConfig{};
  c.negatives = 0;
  CHECK_THROWS(c.validate());
}
