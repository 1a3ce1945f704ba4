#include "factcal/trainer.hpp"

#include "factcal/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

namespace factcal {

using nlohmann::json;

void TrainConfig::validate() const {
  if (steps < 0) throw ConfigError("train: steps must be >= 0");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be > 0");
  if (warmup_steps < 0) throw ConfigError("train: warmup_steps must be >= 0");
  if (steps > 0 && warmup_steps > steps) throw ConfigError("train: warmup_steps exceeds steps");
  if (optimizer != "adam") throw ConfigError("train: unknown optimizer '" + optimizer + "'");
  if (eval_every < 1) throw ConfigError("train: eval_every must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train: betas must lie in [0, 1)");
  if (!(epsilon > 0.0)) throw ConfigError("train: epsilon must be > 0");
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"steps", c.steps},         {"batch_size", c.batch_size}, {"learning_rate", c.learning_rate},
           {"warmup_steps", c.warmup_steps}, {"eval_every", c.eval_every}, {"beta1", c.beta1},
           {"beta2", c.beta2},         {"epsilon", c.epsilon},       {"optimizer", c.optimizer},
           {"seed", c.seed}};
}

void from_json(const json& j, TrainConfig& c) {
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.epsilon = j.value("epsilon", c.epsilon);
  c.optimizer = j.value("optimizer", c.optimizer);
  c.seed = j.value("seed", c.seed);
}

double learning_rate_at(const TrainConfig& config, int step) {
  if (config.warmup_steps == 0 || step >= config.warmup_steps) return config.learning_rate;
  return config.learning_rate * static_cast<double>(step + 1) / static_cast<double>(config.warmup_steps);
}

std::vector<EncodedExample> encode_examples(const Vocabulary& vocab, std::span<const Example> examples) {
  std::vector<EncodedExample> out;
  out.reserve(examples.size());
  for (const auto& e : examples) {
    EncodedExample x;
    x.tokens = vocab.encode(e.source);
    x.mask_pos = find_single_mask(x.tokens, vocab.mask_id());
    x.target = vocab.id(e.target);
    out.push_back(std::move(x));
  }
  return out;
}

std::string TrainLog::to_csv() const {
  std::ostringstream out;
  out.precision(10);
  out << "step,split,loss\n";
  for (const auto& p : curve) out << p.step << ',' << p.split << ',' << p.loss << '\n';
  return out.str();
}

template <typename Scalar>
void Adam<Scalar>::step(ModelState<Scalar>& state, const std::map<std::string, Matrix<Scalar>>& grads, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, t_);
  const double c2 = 1.0 - std::pow(config_.beta2, t_);
  const auto b1 = static_cast<Scalar>(config_.beta1);
  const auto b2 = static_cast<Scalar>(config_.beta2);
  const auto step_size = static_cast<Scalar>(lr * std::sqrt(c2) / c1);
  const auto eps = static_cast<Scalar>(config_.epsilon * std::sqrt(c2));
  for (const auto& [name, g] : grads) {
    const auto it = state.tensors.find(name);
    if (it == state.tensors.end() || it->second.frozen) {
      throw InvariantBreach("optimizer step for frozen or unknown tensor '" + name + "'");
    }
    auto& w = it->second.value;
    auto [mit, fresh_m] = m_.try_emplace(name, Matrix<Scalar>::Zero(g.rows(), g.cols()));
    auto [vit, fresh_v] = v_.try_emplace(name, Matrix<Scalar>::Zero(g.rows(), g.cols()));
    auto& m = mit->second;
    auto& v = vit->second;
    m = b1 * m + (Scalar(1) - b1) * g;
    v.array() = b2 * v.array() + (Scalar(1) - b2) * g.array().square();
    w.array() -= step_size * m.array() / (v.array().sqrt() + eps);
  }
}

namespace {

template <typename Scalar>
struct BatchForward {
  Graph<Scalar> graph;
  Var<Scalar> loss;
};

/// Builds the masked-LM loss for a batch of examples on a fresh graph.
template <typename Scalar>
void forward_batch(BatchForward<Scalar>& fw, const ModelState<Scalar>& state, std::span<const EncodedExample> batch,
                   bool train) {
  std::vector<std::vector<int>> seqs;
  seqs.reserve(batch.size());
  for (const auto& e : batch) seqs.push_back(e.tokens);
  const PackedBatch packed = PackedBatch::pack(seqs);
  std::vector<int> rows, targets;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    rows.push_back(packed.offsets[i] + batch[i].mask_pos);
    targets.push_back(batch[i].target);
  }
  const auto params = bind(fw.graph, state, train);
  auto logits = project_rows(params, encode(params, state, packed), rows);
  fw.loss = cross_entropy(logits, targets, std::vector<bool>(targets.size(), true));
}

/// Epoch-shuffled minibatch indices.
class Sampler {
 public:
  Sampler(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::shuffle(order_.begin(), order_.end(), rng_);
  }

  std::vector<std::size_t> next(std::size_t k) {
    std::vector<std::size_t> out;
    while (out.size() < k) {
      if (pos_ == order_.size()) {
        std::shuffle(order_.begin(), order_.end(), rng_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  std::vector<std::size_t> order_;
  std::mt19937_64 rng_;
  std::size_t pos_ = 0;
};

using EvalHook = std::function<void(int step)>;

template <typename Scalar>
TrainLog run_training(ModelState<Scalar>& state, std::span<const EncodedExample> data, const TrainConfig& config,
                      const ProgressFn& progress, const EvalHook& on_eval) {
  config.validate();
  if (data.empty()) throw std::invalid_argument("training set is empty");
  const auto trainable = state.trainable_names();
  if (trainable.empty()) throw InvariantBreach("no trainable tensors");

  TrainLog log;
  Adam<Scalar> adam(config);
  Sampler sampler(data.size(), config.seed);
  const auto batch_size = std::min<std::size_t>(static_cast<std::size_t>(config.batch_size), data.size());
  std::vector<EncodedExample> batch(batch_size);
  double window = 0.0;
  int window_n = 0;

  if (on_eval) on_eval(0);
  for (int step = 0; step < config.steps; ++step) {
    const auto idx = sampler.next(batch_size);
    for (std::size_t i = 0; i < batch_size; ++i) batch[i] = data[idx[i]];
    BatchForward<Scalar> fw;
    forward_batch(fw, state, std::span<const EncodedExample>(batch), true);
    const double loss = static_cast<double>(fw.loss.value()(0, 0));
    if (!std::isfinite(loss)) throw InvariantBreach("non-finite training loss at step " + std::to_string(step));
    if (step == 0) {
      log.initial_loss = loss;
      log.curve.push_back({0, "train", loss});
    }
    fw.graph.backward(fw.loss);
    const auto grads = fw.graph.gradients();
    for (const auto& [name, g] : grads) {
      const auto it = state.tensors.find(name);
      if (it == state.tensors.end() || it->second.frozen) {
        throw InvariantBreach("gradient reached frozen tensor '" + name + "'");
      }
    }
    adam.step(state, grads, learning_rate_at(config, step));
    window += loss;
    ++window_n;
    const int done = step + 1;
    if (done % config.eval_every == 0 || done == config.steps) {
      log.final_loss = window / window_n;
      log.curve.push_back({done, "train", log.final_loss});
      if (progress) progress(done, log.final_loss);
      window = 0.0;
      window_n = 0;
      if (on_eval) on_eval(done);
    }
  }
  return log;
}

}  // namespace

template <typename Scalar>
double mean_loss(const ModelState<Scalar>& state, std::span<const EncodedExample> data) {
  if (data.empty()) throw std::invalid_argument("mean_loss: empty set");
  double total = 0.0;
  for (const auto& s : score_examples(state, data)) total += s.nll;
  return total / static_cast<double>(data.size());
}

template <typename Scalar>
TrainLog pretrain(ModelState<Scalar>& state, std::span<const EncodedExample> corpus, const TrainConfig& config,
                  const ProgressFn& progress) {
  return run_training(state, corpus, config, progress, {});
}

template <typename Scalar>
TrainLog calibrate(ModelState<Scalar>& state, std::span<const EncodedExample> train,
                   std::span<const EncodedExample> valid, const TrainConfig& config, const ProgressFn& progress) {
  if (!state.adapter) throw std::logic_error("calibrate: no adapter attached");
  for (const auto& [name, p] : state.tensors) {
    const bool is_adapter = name == kAdapterKey || name == kAdapterValue;
    if (is_adapter == p.frozen) throw InvariantBreach("calibrate: tensor '" + name + "' has the wrong frozen flag");
  }
  if (valid.empty()) throw std::invalid_argument("calibrate: validation set is empty");
  double best = std::numeric_limits<double>::infinity();
  int best_step = -1;
  Matrix<Scalar> best_key, best_value;
  std::vector<CurvePoint> valid_curve;
  auto log = run_training(state, train, config, progress, [&](int step) {
    const double loss = mean_loss(state, valid);
    valid_curve.push_back({step, "valid", loss});
    if (loss < best) {
      best = loss;
      best_step = step;
      best_key = state.at(kAdapterKey);
      best_value = state.at(kAdapterValue);
    }
  });
  state.at(kAdapterKey) = best_key;
  state.at(kAdapterValue) = best_value;
  log.best_step = best_step;
  log.best_valid_loss = best;
  log.curve.insert(log.curve.end(), valid_curve.begin(), valid_curve.end());
  std::stable_sort(log.curve.begin(), log.curve.end(), [](const CurvePoint& a, const CurvePoint& b) { return a.step < b.step; });
  return log;
}

template <typename Scalar>
TrainLog continue_pretrain(ModelState<Scalar>& state, std::span<const EncodedExample> train,
                           std::span<const EncodedExample> valid, const TrainConfig& config,
                           const ProgressFn& progress) {
  if (state.adapter) throw std::logic_error("continue_pretrain: detach the adapter first");
  for (auto& [name, p] : state.tensors) p.frozen = false;
  std::vector<CurvePoint> valid_curve;
  auto log = run_training(state, train, config, progress, [&](int step) {
    if (!valid.empty()) valid_curve.push_back({step, "valid", mean_loss(state, valid)});
  });
  log.curve.insert(log.curve.end(), valid_curve.begin(), valid_curve.end());
  std::stable_sort(log.curve.begin(), log.curve.end(), [](const CurvePoint& a, const CurvePoint& b) { return a.step < b.step; });
  return log;
}

template <typename Scalar>
std::vector<ExampleScore> score_examples(const ModelState<Scalar>& state, std::span<const EncodedExample> data) {
  constexpr std::size_t chunk = 256;
  std::vector<ExampleScore> out;
  out.reserve(data.size());
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    const auto part = data.subspan(start, std::min(chunk, data.size() - start));
    std::vector<std::vector<int>> seqs;
    for (const auto& e : part) seqs.push_back(e.tokens);
    const PackedBatch packed = PackedBatch::pack(seqs);
    std::vector<int> rows;
    for (std::size_t i = 0; i < part.size(); ++i) rows.push_back(packed.offsets[i] + part[i].mask_pos);
    Graph<Scalar> g;
    const auto params = bind(g, state, false);
    const Matrix<Scalar>& logits = project_rows(params, encode(params, state, packed), rows).value();
    for (std::size_t i = 0; i < part.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      Eigen::Index best = 0;
      const Scalar m = logits.row(r).maxCoeff(&best);
      const Scalar lse = m + std::log((logits.row(r).array() - m).exp().sum());
      out.push_back({static_cast<double>(lse - logits(r, part[i].target)), static_cast<int>(best)});
    }
  }
  return out;
}

template <typename Scalar>
PerplexityResult evaluate_perplexity(const ModelState<Scalar>& state, std::span<const EncodedExample> data,
                                     const std::string& set_name) {
  if (data.empty()) throw std::invalid_argument("evaluate_perplexity: set '" + set_name + "' is empty");
  PerplexityResult r;
  r.set_name = set_name;
  r.scores = score_examples(state, data);
  double total = 0.0;
  for (const auto& s : r.scores) total += s.nll;
  r.mean_nll = total / static_cast<double>(r.scores.size());
  r.perplexity = std::exp(r.mean_nll);
  return r;
}

#define FACTCAL_INSTANTIATE(S)                                                                                     \
  template class Adam<S>;                                                                                          \
  template double mean_loss<S>(const ModelState<S>&, std::span<const EncodedExample>);                             \
  template TrainLog pretrain<S>(ModelState<S>&, std::span<const EncodedExample>, const TrainConfig&,               \
                                const ProgressFn&);                                                                \
  template TrainLog calibrate<S>(ModelState<S>&, std::span<const EncodedExample>, std::span<const EncodedExample>, \
                                 const TrainConfig&, const ProgressFn&);                                           \
  template TrainLog continue_pretrain<S>(ModelState<S>&, std::span<const EncodedExample>,                          \
                                         std::span<const EncodedExample>, const TrainConfig&, const ProgressFn&);  \
  template std::vector<ExampleScore> score_examples<S>(const ModelState<S>&, std::span<const EncodedExample>);     \
  template PerplexityResult evaluate_perplexity<S>(const ModelState<S>&, std::span<const EncodedExample>,          \
                                                   const std::string&);

FACTCAL_INSTANTIATE(float)
FACTCAL_INSTANTIATE(double)

#undef FACTCAL_INSTANTIATE

}  // namespace factcal
