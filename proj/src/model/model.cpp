#include "factcal/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace factcal {

PackedBatch PackedBatch::pack(std::span<const std::vector<int>> sequences) {
  PackedBatch b;
  b.offsets.push_back(0);
  for (const auto& seq : sequences) {
    for (std::size_t i = 0; i < seq.size(); ++i) {
      b.tokens.push_back(seq[i]);
      b.positions.push_back(static_cast<int>(i));
    }
    b.offsets.push_back(static_cast<int>(b.tokens.size()));
  }
  return b;
}

int find_single_mask(std::span<const int> token_ids, int mask_id) {
  int found = -1;
  for (std::size_t i = 0; i < token_ids.size(); ++i) {
    if (token_ids[i] != mask_id) continue;
    if (found >= 0) throw std::invalid_argument("sequence contains more than one mask token");
    found = static_cast<int>(i);
  }
  if (found < 0) throw std::invalid_argument("sequence contains no mask token");
  return found;
}

template <typename Scalar>
Bindings<Scalar> bind(Graph<Scalar>& graph, const ModelState<Scalar>& state, bool train) {
  Bindings<Scalar> out;
  for (const auto& [name, p] : state.tensors) {
    out.emplace(name, train && !p.frozen ? graph.parameter(p.value, name) : graph.constant(p.value, name));
  }
  return out;
}

template <typename Scalar>
Var<Scalar> ffn_forward(Var<Scalar> h, Var<Scalar> key, Var<Scalar> value) {
  return matmul(gelu(matmul_nt(h, key)), value);
}

template <typename Scalar>
Matrix<Scalar> ffn_forward(const ModelState<Scalar>& state, const Matrix<Scalar>& h, int layer) {
  if (layer < 0 || layer >= state.config.n_layers) {
    throw std::out_of_range("ffn_forward: layer " + std::to_string(layer) + " outside [0, " +
                            std::to_string(state.config.n_layers) + ")");
  }
  Graph<Scalar> g;
  auto out = ffn_forward(g.constant(h), g.constant(state.at(layer_tensor(layer, "ffn.key"))),
                         g.constant(state.at(layer_tensor(layer, "ffn.value"))));
  return out.value();
}

template <typename Scalar>
Var<Scalar> encode(const Bindings<Scalar>& params, const ModelState<Scalar>& state, const PackedBatch& batch,
                   LayerRecord<Scalar>* record) {
  const ModelConfig& cfg = state.config;
  for (std::size_t s = 0; s < batch.sequences(); ++s) {
    if (batch.offsets[s + 1] - batch.offsets[s] > cfg.max_seq_len) {
      throw std::length_error("sequence of length " + std::to_string(batch.offsets[s + 1] - batch.offsets[s]) +
                              " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    }
  }
  auto p = [&](const std::string& name) { return params.at(name); };
  Var<Scalar> x = gather_rows(p("embed"), batch.tokens) + gather_rows(p("pos"), batch.positions);
  for (int l = 0; l < cfg.n_layers; ++l) {
    Var<Scalar> h = rms_norm(x, p(layer_tensor(l, "attn_norm")));
    Var<Scalar> q = matmul(h, p(layer_tensor(l, "attn.q")));
    Var<Scalar> k = matmul(h, p(layer_tensor(l, "attn.k")));
    Var<Scalar> v = matmul(h, p(layer_tensor(l, "attn.v")));
    Var<Scalar> att = segment_attention(q, k, v, batch.offsets, cfg.n_heads);
    x = x + matmul(att, p(layer_tensor(l, "attn.o")));

    Var<Scalar> hf = rms_norm(x, p(layer_tensor(l, "ffn_norm")));
    Var<Scalar> ffn = ffn_forward(hf, p(layer_tensor(l, "ffn.key")), p(layer_tensor(l, "ffn.value")));
    const bool calibrated = state.adapter && state.adapter->attach_layer == l;
    if (record) record->base_post_ffn.push_back((x + ffn).value());
    if (calibrated) ffn = ffn + delta_ffn(hf, p(kAdapterKey), p(kAdapterValue));
    x = x + ffn;
    if (record) record->block_output.push_back(x.value());
  }
  return rms_norm(x, p("final_norm"));
}

template <typename Scalar>
Var<Scalar> project_rows(const Bindings<Scalar>& params, Var<Scalar> hidden, std::span<const int> rows) {
  return matmul_nt(gather_rows(hidden, rows), params.at("embed"));
}

template <typename Scalar>
Matrix<Scalar> forward(const ModelState<Scalar>& state, std::span<const int> token_ids) {
  if (static_cast<int>(token_ids.size()) > state.config.max_seq_len) {
    throw std::length_error("sequence of length " + std::to_string(token_ids.size()) + " exceeds max_seq_len " +
                            std::to_string(state.config.max_seq_len));
  }
  for (int t : token_ids) {
    if (t < 0 || t >= state.config.vocab_size) throw std::out_of_range("token id " + std::to_string(t) + " outside vocabulary");
  }
  Graph<Scalar> g;
  const auto params = bind(g, state, false);
  const std::vector<std::vector<int>> seqs{std::vector<int>(token_ids.begin(), token_ids.end())};
  auto hidden = encode(params, state, PackedBatch::pack(seqs));
  return matmul_nt(hidden, params.at("embed")).value();
}

template <typename Scalar>
Matrix<Scalar> mask_distributions(const ModelState<Scalar>& state, std::span<const std::vector<int>> sequences,
                                  int mask_id, std::size_t chunk) {
  Matrix<Scalar> out(static_cast<Eigen::Index>(sequences.size()), state.config.vocab_size);
  for (std::size_t start = 0; start < sequences.size(); start += chunk) {
    const std::size_t end = std::min(sequences.size(), start + chunk);
    const auto part = sequences.subspan(start, end - start);
    PackedBatch batch = PackedBatch::pack(part);
    std::vector<int> rows;
    for (std::size_t i = 0; i < part.size(); ++i) rows.push_back(batch.offsets[i] + find_single_mask(part[i], mask_id));
    Graph<Scalar> g;
    const auto params = bind(g, state, false);
    auto logits = project_rows(params, encode(params, state, batch), rows);
    out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(part.size())) =
        softmax_rows<Scalar>(logits.value());
  }
  return out;
}

template <typename Scalar>
std::vector<TokenProb> predict_masked(const ModelState<Scalar>& state, std::span<const int> token_ids, int mask_id) {
  find_single_mask(token_ids, mask_id);
  const std::vector<std::vector<int>> seqs{std::vector<int>(token_ids.begin(), token_ids.end())};
  const Matrix<Scalar> probs = mask_distributions(state, std::span<const std::vector<int>>(seqs), mask_id);
  std::vector<TokenProb> ranked(static_cast<std::size_t>(probs.cols()));
  for (Eigen::Index t = 0; t < probs.cols(); ++t) ranked[t] = {static_cast<int>(t), static_cast<double>(probs(0, t))};
  std::stable_sort(ranked.begin(), ranked.end(), [](const TokenProb& a, const TokenProb& b) { return a.prob > b.prob; });
  return ranked;
}

#define FACTCAL_INSTANTIATE(S)                                                                            \
  template Bindings<S> bind<S>(Graph<S>&, const ModelState<S>&, bool);                                    \
  template Var<S> ffn_forward<S>(Var<S>, Var<S>, Var<S>);                                                 \
  template Matrix<S> ffn_forward<S>(const ModelState<S>&, const Matrix<S>&, int);                         \
  template Var<S> encode<S>(const Bindings<S>&, const ModelState<S>&, const PackedBatch&, LayerRecord<S>*); \
  template Var<S> project_rows<S>(const Bindings<S>&, Var<S>, std::span<const int>);                      \
  template Matrix<S> forward<S>(const ModelState<S>&, std::span<const int>);                              \
  template Matrix<S> mask_distributions<S>(const ModelState<S>&, std::span<const std::vector<int>>, int, std::size_t); \
  template std::vector<TokenProb> predict_masked<S>(const ModelState<S>&, std::span<const int>, int);

FACTCAL_INSTANTIATE(float)
FACTCAL_INSTANTIATE(double)

#undef FACTCAL_INSTANTIATE

}  // namespace factcal
