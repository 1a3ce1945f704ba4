#include "factcal/interpret.hpp"

#include "factcal/errors.hpp"

#include <algorithm>
#include <iomanip>
#include <sstream>

namespace factcal {

using nlohmann::json;

namespace {

std::vector<TokenProb> top_tokens(const std::vector<double>& dist, int k) {
  std::vector<TokenProb> ranked(dist.size());
  for (std::size_t t = 0; t < dist.size(); ++t) ranked[t] = {static_cast<int>(t), dist[t]};
  std::stable_sort(ranked.begin(), ranked.end(), [](const TokenProb& a, const TokenProb& b) { return a.prob > b.prob; });
  ranked.resize(std::min<std::size_t>(ranked.size(), static_cast<std::size_t>(std::max(k, 0))));
  return ranked;
}

template <typename Scalar>
std::vector<double> to_distribution(const Matrix<Scalar>& logits_row) {
  const Matrix<Scalar> p = softmax_rows<Scalar>(logits_row);
  std::vector<double> out(static_cast<std::size_t>(p.cols()));
  for (Eigen::Index t = 0; t < p.cols(); ++t) out[static_cast<std::size_t>(t)] = static_cast<double>(p(0, t));
  return out;
}

}  // namespace

std::string TraceRow::label() const {
  return "layer " + std::to_string(layer) + (with_adapter ? " w/ adapter" : "");
}

template <typename Scalar>
ValueProjection project_value(const ModelState<Scalar>& state, const RowVector<Scalar>& v, int top_k,
                              std::string source) {
  const auto& embed = state.at("embed");
  if (v.cols() != embed.cols()) {
    throw DimensionError("project_value: vector of length " + std::to_string(v.cols()) + ", model width " +
                         std::to_string(embed.cols()));
  }
  const Matrix<Scalar> logits = v * embed.transpose();
  ValueProjection out;
  out.source = std::move(source);
  out.distribution = to_distribution<Scalar>(logits);
  out.top = top_tokens(out.distribution, top_k);
  return out;
}

template <typename Scalar>
std::vector<ValueProjection> slot_report(const ModelState<Scalar>& state, int top_k) {
  const AdapterState<Scalar> a = adapter_of(state);
  std::vector<ValueProjection> out;
  for (Eigen::Index k = 0; k < a.value.rows(); ++k) {
    out.push_back(project_value<Scalar>(state, a.value.row(k), top_k, kAdapterValue + "[" + std::to_string(k) + "]"));
  }
  return out;
}

template <typename Scalar>
LayerTrace trace_output_distribution(const ModelState<Scalar>& state, std::span<const int> token_ids, int mask_id,
                                     int top_k) {
  const int pos = find_single_mask(token_ids, mask_id);
  if (static_cast<int>(token_ids.size()) > state.config.max_seq_len) {
    throw std::length_error("trace: sequence exceeds max_seq_len");
  }
  Graph<Scalar> g;
  const auto params = bind(g, state, false);
  const std::vector<std::vector<int>> seqs{std::vector<int>(token_ids.begin(), token_ids.end())};
  LayerRecord<Scalar> record;
  encode(params, state, PackedBatch::pack(seqs), &record);

  // same ops as the output path, so the last row matches predict_masked exactly
  auto read = [&](const Matrix<Scalar>& residual) {
    Matrix<Scalar> row = residual.row(pos);
    auto hidden = rms_norm(g.constant(std::move(row)), params.at("final_norm"));
    const std::vector<int> rows{0};
    return to_distribution<Scalar>(project_rows(params, hidden, rows).value());
  };

  LayerTrace trace;
  for (int l = 0; l < state.config.n_layers; ++l) {
    const auto& base = record.base_post_ffn[static_cast<std::size_t>(l)];
    trace.rows.push_back({l, false, top_tokens(read(base), top_k)});
    if (state.adapter && state.adapter->attach_layer == l) {
      trace.rows.push_back({l, true, top_tokens(read(record.block_output[static_cast<std::size_t>(l)]), top_k)});
    }
  }
  return trace;
}

json projections_to_json(std::span<const ValueProjection> projections, const Vocabulary& vocab) {
  json out = json::array();
  for (const auto& p : projections) {
    json top = json::array();
    for (const auto& t : p.top) top.push_back({{"token", vocab.token(t.token)}, {"prob", t.prob}});
    out.push_back({{"source", p.source}, {"top", top}});
  }
  return out;
}

std::string projections_to_text(std::span<const ValueProjection> projections, const Vocabulary& vocab, int columns) {
  std::size_t width = 6;
  for (const auto& p : projections) width = std::max(width, p.source.size());
  std::ostringstream out;
  for (const auto& p : projections) {
    out << std::left << std::setw(static_cast<int>(width)) << p.source << "  ";
    const std::size_t n = std::min<std::size_t>(p.top.size(), static_cast<std::size_t>(columns));
    for (std::size_t i = 0; i < n; ++i) out << (i ? ", " : "") << vocab.token(p.top[i].token);
    out << '\n';
  }
  return out.str();
}

json trace_to_json(const LayerTrace& trace, const Vocabulary& vocab) {
  json rows = json::array();
  for (const auto& r : trace.rows) {
    json top = json::array();
    for (const auto& t : r.top) top.push_back({{"token", vocab.token(t.token)}, {"prob", t.prob}});
    rows.push_back({{"layer", r.layer}, {"with_adapter", r.with_adapter}, {"label", r.label()}, {"top", top}});
  }
  return json{{"rows", rows}};
}

std::string trace_to_text(const LayerTrace& trace, const Vocabulary& vocab) {
  std::size_t width = 5;
  for (const auto& r : trace.rows) width = std::max(width, r.label().size());
  std::ostringstream out;
  out << std::left << std::setw(static_cast<int>(width)) << "Layer" << "  Top tokens\n";
  for (const auto& r : trace.rows) {
    out << std::left << std::setw(static_cast<int>(width)) << r.label() << "  ";
    for (std::size_t i = 0; i < r.top.size(); ++i) out << (i ? ", " : "") << vocab.token(r.top[i].token);
    out << '\n';
  }
  return out.str();
}

#define FACTCAL_INSTANTIATE(S)                                                                                 \
  template ValueProjection project_value<S>(const ModelState<S>&, const RowVector<S>&, int, std::string);      \
  template std::vector<ValueProjection> slot_report<S>(const ModelState<S>&, int);                             \
  template LayerTrace trace_output_distribution<S>(const ModelState<S>&, std::span<const int>, int, int);

FACTCAL_INSTANTIATE(float)
FACTCAL_INSTANTIATE(double)

#undef FACTCAL_INSTANTIATE

}  // namespace factcal
