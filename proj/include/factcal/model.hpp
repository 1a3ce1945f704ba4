#pragma once

#include "factcal/adapter.hpp"
#include "factcal/graph.hpp"
#include "factcal/state.hpp"

#include <map>
#include <span>
#include <string>
#include <vector>

namespace factcal {

/// Several token sequences packed row-wise into one matrix.
struct PackedBatch {
  std::vector<int> tokens;
  std::vector<int> positions;
  std::vector<int> offsets;  ///< size = sequences + 1

  static PackedBatch pack(std::span<const std::vector<int>> sequences);
  std::size_t sequences() const { return offsets.empty() ? 0 : offsets.size() - 1; }
};

template <typename Scalar>
using Bindings = std::map<std::string, Var<Scalar>>;

/// Places every tensor of `state` on the graph. With `train`, tensors not
/// flagged frozen become trainable leaves; everything else is a constant.
template <typename Scalar>
Bindings<Scalar> bind(Graph<Scalar>& graph, const ModelState<Scalar>& state, bool train);

/// Per-layer residual snapshots for output-distribution tracing.
template <typename Scalar>
struct LayerRecord {
  std::vector<Matrix<Scalar>> base_post_ffn;  ///< x + FFN(h), adapter term excluded
  std::vector<Matrix<Scalar>> block_output;   ///< residual leaving the block (adapter included)
};

/// GELU(H K^T) V.
template <typename Scalar>
Var<Scalar> ffn_forward(Var<Scalar> h, Var<Scalar> key, Var<Scalar> value);

/// Base FFN of one layer applied to a plain matrix.
template <typename Scalar>
Matrix<Scalar> ffn_forward(const ModelState<Scalar>& state, const Matrix<Scalar>& h, int layer);

/// Embedding + positional input, pre-norm blocks (attention, then FFN with
/// the adapter term at the attached layer), final RMS norm.
template <typename Scalar>
Var<Scalar> encode(const Bindings<Scalar>& params, const ModelState<Scalar>& state, const PackedBatch& batch,
                   LayerRecord<Scalar>* record = nullptr);

/// Logits (tied embedding projection) for selected packed rows.
template <typename Scalar>
Var<Scalar> project_rows(const Bindings<Scalar>& params, Var<Scalar> hidden, std::span<const int> rows);

/// Full logits [n x V] for one sequence.
template <typename Scalar>
Matrix<Scalar> forward(const ModelState<Scalar>& state, std::span<const int> token_ids);

struct TokenProb {
  int token;
  double prob;
};

/// Softmax over the vocabulary at the single mask position, descending.
template <typename Scalar>
std::vector<TokenProb> predict_masked(const ModelState<Scalar>& state, std::span<const int> token_ids, int mask_id);

/// Mask-position distributions for many single-mask sequences, one row each.
template <typename Scalar>
Matrix<Scalar> mask_distributions(const ModelState<Scalar>& state, std::span<const std::vector<int>> sequences,
                                  int mask_id, std::size_t chunk = 128);

/// Index of the unique mask token; throws std::invalid_argument on zero or several.
int find_single_mask(std::span<const int> token_ids, int mask_id);

}  // namespace factcal
