#pragma once

#include "factcal/model.hpp"
#include "factcal/world.hpp"

#include <json.hpp>

#include <span>
#include <string>
#include <vector>

namespace factcal {

/// Vocabulary distribution induced by one value vector: softmax(E v).
struct ValueProjection {
  std::string source;  ///< "layers.<l>.ffn.value[<i>]" or "adapter.value[<k>]"
  std::vector<double> distribution;
  std::vector<TokenProb> top;  ///< descending
};

template <typename Scalar>
ValueProjection project_value(const ModelState<Scalar>& state, const RowVector<Scalar>& v, int top_k = 30,
                              std::string source = {});

/// Projection of every adapter value row, in slot order.
template <typename Scalar>
std::vector<ValueProjection> slot_report(const ModelState<Scalar>& state, int top_k = 30);

struct TraceRow {
  int layer = 0;
  bool with_adapter = false;
  std::vector<TokenProb> top;

  std::string label() const;
};

/// Layer-by-layer output distributions at the mask position.
struct LayerTrace {
  std::vector<TraceRow> rows;  ///< depth order; the adapter row follows its layer's base row
};

/// For each layer, the residual after the base FFN (adapter term excluded)
/// is read at the mask position, passed through the final RMS norm and the
/// tied embedding, and its top-k recorded. The attached layer gets a second
/// row that includes the adapter term. The last row is the model output.
template <typename Scalar>
LayerTrace trace_output_distribution(const ModelState<Scalar>& state, std::span<const int> token_ids, int mask_id,
                                     int top_k = 10);

nlohmann::json projections_to_json(std::span<const ValueProjection> projections, const Vocabulary& vocab);
std::string projections_to_text(std::span<const ValueProjection> projections, const Vocabulary& vocab, int columns = 10);

nlohmann::json trace_to_json(const LayerTrace& trace, const Vocabulary& vocab);
/// Aligned table, one row per traced layer.
std::string trace_to_text(const LayerTrace& trace, const Vocabulary& vocab);

}  // namespace factcal
