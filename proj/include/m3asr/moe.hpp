#pragma once

// Top-1 mixture-of-experts feed-forward layer.
//
// The router reads concat(e_c, o_prev) for every frame, where e_c is the shared
// embedding and o_prev the output of the module feeding the layer. Each frame
// is processed by exactly one expert (the argmax of the router softmax) and
// the expert output is scaled by that expert's probability so the router
// receives gradient through the gate.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "m3asr/nn.hpp"

namespace m3asr {

struct RoutingRecord {
  Tensor probs;                        // [T x n] router distribution, part of the graph
  std::vector<std::size_t> selected;   // argmax per frame, ties to the lowest index
  std::vector<double> gates;           // probs[t, selected[t]]

  std::size_t frames() const { return selected.size(); }
  std::size_t experts() const { return probs.cols(); }

  std::vector<std::size_t> histogram() const {
    std::vector<std::size_t> h(experts(), 0);
    for (std::size_t s : selected) ++h[s];
    return h;
  }
};

/// Lowest index among the maxima of each row.
inline std::vector<std::size_t> argmax_rows(const Tensor& p) {
  std::vector<std::size_t> out(p.rows());
  for (std::size_t r = 0; r < p.rows(); ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < p.cols(); ++c)
      if (p(r, c) > p(r, best)) best = c;
    out[r] = best;
  }
  return out;
}

/// r = concat(e_c; o_prev) . W_r, p = softmax(r), top-1 per frame.
/// A frozen selection (same length as the frame count) overrides the argmax;
/// gates are then read at the frozen indices.
inline RoutingRecord route(const Tensor& e_c, const Tensor& o_prev, const Tensor& router_weight,
                           const std::vector<std::size_t>* frozen = nullptr) {
  if (e_c.rows() != o_prev.rows() || router_weight.rank() != 2 ||
      router_weight.dim(0) != e_c.cols() + o_prev.cols()) {
    throw ShapeError("route", "embedding " + shape_str(e_c.shape()) + ", input " + shape_str(o_prev.shape()) +
                                  ", router " + shape_str(router_weight.shape()));
  }
  RoutingRecord rec;
  rec.probs = softmax_last(matmul(concat_last({e_c, o_prev}), router_weight));
  if (frozen) {
    if (frozen->size() != rec.probs.rows()) throw ShapeError("route", "frozen selection length mismatch");
    for (std::size_t s : *frozen)
      if (s >= rec.probs.cols()) throw ShapeError("route", "frozen expert index out of range");
    rec.selected = *frozen;
  } else {
    rec.selected = argmax_rows(rec.probs);
  }
  rec.gates.resize(rec.selected.size());
  for (std::size_t t = 0; t < rec.selected.size(); ++t) rec.gates[t] = rec.probs(t, rec.selected[t]);
  return rec;
}

struct MoELayer {
  LayerNorm norm;
  Tensor router;  // [(d_emb + d) x n], no bias
  std::vector<FfnCore> experts;

  /// Expert e initialises from the dense FFN keys when e == 0 or when
  /// identical_init is set, so a one-expert layer starts equal to the dense one.
  static void declare(Manifest& m, const std::string& prefix, std::size_t d, std::size_t d_emb,
                      std::size_t expert_ff, std::size_t n, bool identical_init) {
    if (n == 0) throw std::invalid_argument("MoE layer needs at least one expert");
    LayerNorm::declare(m, join(prefix, "norm"), d);
    const double bound = 1.0 / std::sqrt(static_cast<double>(d_emb + d));
    m.push_back({join(prefix, "router"), {d_emb + d, n}, Init::kUniform, bound, {}});
    for (std::size_t e = 0; e < n; ++e) {
      const std::string name = join(prefix, "experts." + std::to_string(e));
      FfnCore::declare(m, name, d, expert_ff, (e == 0 || identical_init) ? prefix : "");
    }
  }

  static MoELayer bind(const ParamStore& s, const std::string& prefix) {
    MoELayer l;
    l.norm = LayerNorm::bind(s, join(prefix, "norm"));
    l.router = s.get(join(prefix, "router"));
    for (std::size_t e = 0; e < l.router.dim(1); ++e) {
      l.experts.push_back(FfnCore::bind(s, join(prefix, "experts." + std::to_string(e))));
    }
    return l;
  }

  std::size_t num_experts() const { return experts.size(); }
};

/// y[t] = gate[t] * E_selected[t](LN(x[t])). Only the selected expert runs for
/// each frame; frames are grouped per expert and scattered back in order.
inline Tensor moe_ffn(const Tensor& x, const RoutingRecord& record, const MoELayer& layer,
                      const ForwardContext& ctx) {
  const std::size_t t_len = x.rows();
  if (record.frames() != t_len || record.experts() != layer.num_experts()) {
    throw ShapeError("moe_ffn", "routing record does not match input " + shape_str(x.shape()));
  }
  const Tensor normed = layer.norm(x);
  const Tensor gate = pick(record.probs, record.selected);
  Tensor y;
  for (std::size_t e = 0; e < layer.num_experts(); ++e) {
    std::vector<std::size_t> rows;
    for (std::size_t t = 0; t < t_len; ++t)
      if (record.selected[t] == e) rows.push_back(t);
    if (rows.empty()) continue;
    if (ctx.stats) ctx.stats->expert_frames += rows.size();
    const Tensor out = mul(layer.experts[e](gather_rows(normed, rows), ctx), gather_rows(gate, rows));
    const Tensor placed = scatter_rows(out, rows, t_len);
    y = y.defined() ? add(y, placed) : placed;
  }
  return y;
}

/// Route then dispatch; the record is returned through `record`.
inline Tensor moe_forward(const Tensor& x, const Tensor& e_c, const MoELayer& layer, const ForwardContext& ctx,
                          RoutingRecord* record = nullptr, const std::vector<std::size_t>* frozen = nullptr) {
  RoutingRecord rec = route(e_c, x, layer.router, frozen);
  Tensor y = moe_ffn(x, rec, layer, ctx);
  if (record) *record = std::move(rec);
  return y;
}

// ---------------------------------------------------------------------------
// Auxiliary losses over a batch of k frame distributions P [k x n].

/// Mean over frames of ||p_j / ||p_j||_2||_1. Lies in [1, sqrt(n)].
inline Tensor sparsity_loss(const Tensor& probs) {
  if (probs.rows() == 0 || probs.size() == 0) throw std::invalid_argument("sparsity_loss: no frames");
  return mean(div(sum_last(probs), sqrt(sum_last(square(probs)))));
}

/// n * sum_i (mean_j p_ij)^2. Lies in [1, n]; 1 iff the mean load is uniform.
inline Tensor mean_importance_loss(const Tensor& probs) {
  if (probs.rows() == 0 || probs.size() == 0) throw std::invalid_argument("mean_importance_loss: no frames");
  const double k = static_cast<double>(probs.rows());
  const double n = static_cast<double>(probs.cols());
  return scale(sum(square(scale(sum_first(probs), 1.0 / k))), n);
}

struct MoEWeights {
  double alpha = 0.15;
  double beta = 0.15;
  double gamma = 0.01;
};

/// alpha * L_s + beta * L_m + gamma * L_e
inline Tensor moe_loss(const Tensor& l_s, const Tensor& l_m, const Tensor& l_e, const MoEWeights& w) {
  return add(add(scale(l_s, w.alpha), scale(l_m, w.beta)), scale(l_e, w.gamma));
}

/// Shannon entropy (nats) of an expert selection histogram.
inline double utilization_entropy(const std::vector<std::size_t>& histogram) {
  std::size_t total = 0;
  for (std::size_t c : histogram) total += c;
  if (total == 0) return 0.0;
  double h = 0.0;
  for (std::size_t c : histogram) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / static_cast<double>(total);
    h -= p * std::log(p);
  }
  return h;
}

}  // namespace m3asr
