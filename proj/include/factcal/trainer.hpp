#pragma once

#include "factcal/model.hpp"
#include "factcal/world.hpp"

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace factcal {

struct TrainConfig {
  int steps = 10000;
  int batch_size = 64;
  double learning_rate = 3e-4;
  int warmup_steps = 200;
  int eval_every = 250;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::string optimizer = "adam";  ///< only "adam" is implemented
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Linear warmup to the base rate, constant afterwards.
double learning_rate_at(const TrainConfig& config, int step);

/// A single-mask example as token ids.
struct EncodedExample {
  std::vector<int> tokens;
  int mask_pos = 0;
  int target = 0;
};

/// Throws std::out_of_range naming the first token missing from the vocabulary.
std::vector<EncodedExample> encode_examples(const Vocabulary& vocab, std::span<const Example> examples);

struct CurvePoint {
  int step = 0;
  std::string split;
  double loss = 0.0;
};

struct TrainLog {
  std::vector<CurvePoint> curve;
  double initial_loss = 0.0;  ///< first-batch loss before any update
  double final_loss = 0.0;    ///< mean train loss over the last window
  int best_step = -1;         ///< calibration: step whose adapter was kept
  double best_valid_loss = 0.0;

  std::string to_csv() const;
};

using ProgressFn = std::function<void(int step, double loss)>;

template <typename Scalar>
class Adam {
 public:
  explicit Adam(const TrainConfig& config) : config_(config) {}

  /// One bias-corrected update of every tensor that has a gradient; a
  /// gradient for a frozen tensor throws InvariantBreach.
  void step(ModelState<Scalar>& state, const std::map<std::string, Matrix<Scalar>>& grads, double lr);
  int steps_taken() const { return t_; }

 private:
  TrainConfig config_;
  int t_ = 0;
  std::map<std::string, Matrix<Scalar>> m_, v_;
};

/// Mean masked-token NLL of a set, no gradients.
template <typename Scalar>
double mean_loss(const ModelState<Scalar>& state, std::span<const EncodedExample> data);

/// Trains every non-frozen tensor on the masked-LM objective.
template <typename Scalar>
TrainLog pretrain(ModelState<Scalar>& state, std::span<const EncodedExample> corpus, const TrainConfig& config,
                  const ProgressFn& progress = {});

/// Trains only the adapter; the base must be frozen. Keeps the adapter with
/// the lowest validation loss (checked at step 0, every eval_every steps and
/// at the end). Throws InvariantBreach if a gradient reaches a frozen tensor.
template <typename Scalar>
TrainLog calibrate(ModelState<Scalar>& state, std::span<const EncodedExample> train,
                   std::span<const EncodedExample> valid, const TrainConfig& config, const ProgressFn& progress = {});

/// Unfreezes all base parameters and continues masked-LM training on `train`.
template <typename Scalar>
TrainLog continue_pretrain(ModelState<Scalar>& state, std::span<const EncodedExample> train,
                           std::span<const EncodedExample> valid, const TrainConfig& config,
                           const ProgressFn& progress = {});

struct ExampleScore {
  double nll = 0.0;
  int top1 = 0;
};

template <typename Scalar>
std::vector<ExampleScore> score_examples(const ModelState<Scalar>& state, std::span<const EncodedExample> data);

struct PerplexityResult {
  std::string set_name;
  double mean_nll = 0.0;
  double perplexity = 0.0;  ///< exp(mean NLL)
  std::vector<ExampleScore> scores;

  std::size_t count() const { return scores.size(); }
};

/// Throws std::invalid_argument on an empty set.
template <typename Scalar>
PerplexityResult evaluate_perplexity(const ModelState<Scalar>& state, std::span<const EncodedExample> data,
                                     const std::string& set_name);

}  // namespace factcal
