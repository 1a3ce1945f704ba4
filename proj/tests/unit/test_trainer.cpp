#include "factcal/adapter.hpp"
#include "factcal/errors.hpp"
#include "factcal/trainer.hpp"

#include <doctest.h>

#include <cmath>

using namespace factcal;

namespace {

ModelConfig tiny(int vocab) {
  ModelConfig c;
  c.d = 16;
  c.d_ff = 32;
  c.n_layers = 2;
  c.n_heads = 2;
  c.vocab_size = vocab;
  c.max_seq_len = 8;
  c.seed = 5;
  return c;
}

TrainConfig quick(int steps, double lr = 3e-3) {
  TrainConfig t;
  t.steps = steps;
  t.batch_size = 8;
  t.learning_rate = lr;
  t.warmup_steps = std::min(10, steps);
  t.eval_every = std::max(1, steps / 4);
  t.seed = 9;
  return t;
}

std::vector<EncodedExample> toy_data() {
  return {{{1, 2, 0, 3}, 2, 4}, {{1, 5, 0, 3}, 2, 6}, {{0, 2, 7}, 0, 1}, {{8, 0}, 1, 9}};
}

}  // namespace

TEST_CASE("learning rate schedule") {
  TrainConfig t;
  t.learning_rate = 1e-3;
  t.warmup_steps = 10;
  t.steps = 100;
  CHECK(learning_rate_at(t, 0) == doctest::Approx(1e-4));
  CHECK(learning_rate_at(t, 9) == doctest::Approx(1e-3));
  CHECK(learning_rate_at(t, 50) == 1e-3);
  t.warmup_steps = 0;
  CHECK(learning_rate_at(t, 0) == 1e-3);
}

TEST_CASE("train config validation") {
  TrainConfig t;
  t.warmup_steps = t.steps + 1;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = TrainConfig{};
  t.optimizer = "adafactor";
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = TrainConfig{};
  t.batch_size = 0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = TrainConfig{};
  t.steps = 0;
  CHECK_NOTHROW(t.validate());
}

TEST_CASE("encode_examples names the unknown token") {
  Vocabulary v({kMaskToken, "a", "b"});
  const std::vector<Example> ok{{{"a", kMaskToken}, "b", 0, "t#0", "train", "x"}};
  const auto enc = encode_examples(v, ok);
  CHECK(enc[0].mask_pos == 1);
  CHECK(enc[0].target == 2);
  const std::vector<Example> bad{{{"a", kMaskToken}, "zebra", 0, "t#0", "train", "x"}};
  try {
    encode_examples(v, bad);
    CHECK(false);
  } catch (const std::out_of_range& e) {
    CHECK(std::string(e.what()).find("zebra") != std::string::npos);
  }
}

TEST_CASE("uniform model perplexity equals the vocabulary size") {
  auto st = init_model<double>(tiny(2000));
  st.at("embed").setZero();
  const std::vector<EncodedExample> data{{{5, 0, 9}, 1, 17}, {{0, 3}, 0, 1999}};
  const auto r = evaluate_perplexity(st, std::span<const EncodedExample>(data), "u");
  CHECK(std::abs(r.perplexity - 2000.0) < 1.0);
  CHECK(r.count() == 2);
  CHECK_THROWS_AS(evaluate_perplexity(st, std::span<const EncodedExample>(), "empty"), std::invalid_argument);
}

TEST_CASE("perplexity equals exp of the mean per-example nll") {
  const auto st = init_model<float>(tiny(12));
  const auto data = toy_data();
  const auto r = evaluate_perplexity(st, std::span<const EncodedExample>(data), "toy");
  double total = 0.0;
  for (const auto& s : r.scores) total += s.nll;
  CHECK(std::abs(r.perplexity - std::exp(total / static_cast<double>(r.count()))) < 1e-9);
  CHECK(r.perplexity >= 1.0);
}

TEST_CASE("pretraining is deterministic and lowers the loss") {
  auto a = init_model<float>(tiny(12));
  auto b = a;
  const auto data = toy_data();
  const auto la = pretrain(a, std::span<const EncodedExample>(data), quick(40));
  pretrain(b, std::span<const EncodedExample>(data), quick(40));
  CHECK(serialize_checkpoint(a) == serialize_checkpoint(b));
  CHECK(la.final_loss < la.initial_loss);
  CHECK(la.curve.front().step == 0);
}

TEST_CASE("one-fact corpus is memorized") {
  auto st = init_model<float>(tiny(12));
  const std::vector<EncodedExample> one{{{1, 2, 0, 3}, 2, 4}};
  pretrain(st, std::span<const EncodedExample>(one), quick(300, 1e-2));
  const auto r = evaluate_perplexity(st, std::span<const EncodedExample>(one), "one");
  CHECK(r.perplexity < 1.05);
  const std::vector<int> ids{1, 2, 0, 3};
  CHECK(predict_masked(st, std::span<const int>(ids), 0)[0].token == 4);
}

TEST_CASE("calibration keeps the base frozen and picks the best adapter") {
  const auto base = init_model<float>(tiny(12));
  auto st = base;
  AdapterConfig ac;
  ac.slots = 4;
  ac.attach_layer = 1;
  ac.seed = 3;
  attach(st, ac);
  const auto data = toy_data();
  const auto log = calibrate(st, std::span<const EncodedExample>(data), std::span<const EncodedExample>(data), quick(60));
  for (const auto& [name, p] : base.tensors) CHECK(st.at(name) == p.value);
  CHECK(!st.at(kAdapterValue).isZero(0));
  double step0 = 0.0, best = 0.0;
  for (const auto& c : log.curve) {
    if (c.split == "valid" && c.step == 0) step0 = c.loss;
    if (c.split == "valid" && c.step == log.best_step) best = c.loss;
  }
  CHECK(best <= step0);
  CHECK(std::abs(mean_loss(st, std::span<const EncodedExample>(data)) - log.best_valid_loss) < 1e-12);
}

TEST_CASE("zero-step calibration is a no-op") {
  const auto base = init_model<float>(tiny(12));
  auto st = base;
  AdapterConfig ac;
  ac.slots = 4;
  ac.attach_layer = 0;
  attach(st, ac);
  const auto before = st.at(kAdapterValue);
  const auto data = toy_data();
  TrainConfig t = quick(0);
  t.warmup_steps = 0;
  calibrate(st, std::span<const EncodedExample>(data), std::span<const EncodedExample>(data), t);
  CHECK(st.at(kAdapterValue) == before);
  CHECK(st.at(kAdapterValue).isZero(0));
  const std::vector<int> ids{1, 2, 0, 3};
  CHECK(forward(st, std::span<const int>(ids)) == forward(base, std::span<const int>(ids)));
}

TEST_CASE("gradients routed to frozen tensors abort") {
  auto st = init_model<float>(tiny(12));
  AdapterConfig ac;
  ac.slots = 4;
  ac.attach_layer = 1;
  attach(st, ac);
  const auto data = toy_data();

  auto leaky = st;
  leaky.tensors.at("embed").frozen = false;
  CHECK_THROWS_AS(calibrate(leaky, std::span<const EncodedExample>(data), std::span<const EncodedExample>(data), quick(5)),
                  InvariantBreach);

  Adam<float> adam(quick(5));
  std::map<std::string, Matrix<float>> grads{{"embed", Matrix<float>::Ones(12, 16)}};
  CHECK_THROWS_AS(adam.step(st, grads, 1e-3), InvariantBreach);
  std::map<std::string, Matrix<float>> unknown{{"no.such.tensor", Matrix<float>::Ones(1, 1)}};
  CHECK_THROWS_AS(adam.step(st, unknown, 1e-3), InvariantBreach);

  auto bare = init_model<float>(tiny(12));
  CHECK_THROWS_AS(calibrate(bare, std::span<const EncodedExample>(data), std::span<const EncodedExample>(data), quick(5)),
                  std::logic_error);
  CHECK_THROWS_AS(continue_pretrain(st, std::span<const EncodedExample>(data), std::span<const EncodedExample>(data), quick(5)),
                  std::logic_error);
}

TEST_CASE("continue pretraining trains every tensor of a copy") {
  const auto base = init_model<float>(tiny(12));
  auto st = base;
  for (auto& [name, p] : st.tensors) p.frozen = true;
  const auto data = toy_data();
  continue_pretrain(st, std::span<const EncodedExample>(data), std::span<const EncodedExample>(data), quick(10));
  CHECK(st.at("embed") != base.at("embed"));
  CHECK(st.at(layer_tensor(0, "ffn.key")) != base.at(layer_tensor(0, "ffn.key")));
}

TEST_CASE("loss curve csv") {
  TrainLog log;
  log.curve = {{0, "train", 2.5}, {10, "valid", 1.25}};
  CHECK(log.to_csv().rfind("step,split,loss\n", 0) == 0);
  CHECK(log.to_csv().find("10,valid,1.25") != std::string::npos);
}
