#pragma once

// Connectionist temporal classification over [T x C] log-posteriors where
// column `blank` (0 by default) is the blank symbol and labels are class ids.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>
#include <vector>

#include "m3asr/tensor.hpp"

namespace m3asr {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

class CtcInfeasible : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Minimum number of frames any path for `labels` needs: one per label plus a
/// blank between each pair of equal neighbours.
inline std::size_t ctc_min_frames(const std::vector<int>& labels) {
  std::size_t n = labels.size();
  for (std::size_t i = 1; i < labels.size(); ++i) n += labels[i] == labels[i - 1];
  return n;
}

namespace detail {

inline void check_labels(const Tensor& lp, const std::vector<int>& labels, int blank) {
  if (lp.rank() != 2 || lp.cols() < 2 || lp.rows() == 0)
    throw ShapeError("ctc", "log-probs must be [T x C] with T >= 1 and C >= 2");
  if (blank < 0 || static_cast<std::size_t>(blank) >= lp.cols()) throw ShapeError("ctc", "blank out of range");
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= lp.cols() || l == blank) {
      throw ShapeError("ctc", "label " + std::to_string(l) + " is not a non-blank class");
    }
  }
  if (ctc_min_frames(labels) > lp.rows()) {
    throw CtcInfeasible("ctc: " + std::to_string(labels.size()) + " labels need at least " +
                        std::to_string(ctc_min_frames(labels)) + " frames, got " + std::to_string(lp.rows()));
  }
}

}  // namespace detail

/// -log P(labels | lp), summed over the utterance. Differentiable with respect
/// to lp; the gradient comes from the alpha-beta recursions in log space.
inline Tensor ctc_loss(const Tensor& lp, const std::vector<int>& labels, int blank = 0) {
  detail::require_defined("ctc_loss", lp);
  detail::check_finite("ctc_loss", lp);
  detail::check_labels(lp, labels, blank);
  const std::size_t t_len = lp.rows(), n_cls = lp.cols();
  const std::size_t s_len = 2 * labels.size() + 1;
  std::vector<int> ext(s_len, blank);
  for (std::size_t i = 0; i < labels.size(); ++i) ext[2 * i + 1] = labels[i];
  auto can_skip = [&](std::size_t s) { return s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]; };

  std::vector<double> alpha(t_len * s_len, kNegInf);
  alpha[0] = lp(0, ext[0]);
  if (s_len > 1) alpha[1] = lp(0, ext[1]);
  for (std::size_t t = 1; t < t_len; ++t) {
    for (std::size_t s = 0; s < s_len; ++s) {
      double a = alpha[(t - 1) * s_len + s];
      if (s >= 1) a = log_add(a, alpha[(t - 1) * s_len + s - 1]);
      if (can_skip(s)) a = log_add(a, alpha[(t - 1) * s_len + s - 2]);
      if (a != kNegInf) alpha[t * s_len + s] = a + lp(t, ext[s]);
    }
  }
  double log_p = alpha[(t_len - 1) * s_len + s_len - 1];
  if (s_len > 1) log_p = log_add(log_p, alpha[(t_len - 1) * s_len + s_len - 2]);

  return detail::make_result(
      "ctc_loss", {}, {-log_p}, {lp},
      [alpha = std::move(alpha), ext, t_len, n_cls, s_len, log_p, blank](detail::Node& self) {
        detail::Node& nlp = *self.parents[0];
        const auto& x = nlp.data;
        auto skip = [&](std::size_t s) { return s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]; };
        // beta includes the emission at t, like alpha.
        std::vector<double> beta(t_len * s_len, kNegInf);
        beta[(t_len - 1) * s_len + s_len - 1] = x[(t_len - 1) * n_cls + ext[s_len - 1]];
        if (s_len > 1) beta[(t_len - 1) * s_len + s_len - 2] = x[(t_len - 1) * n_cls + ext[s_len - 2]];
        for (std::size_t t = t_len - 1; t-- > 0;) {
          for (std::size_t s = 0; s < s_len; ++s) {
            double b = beta[(t + 1) * s_len + s];
            if (s + 1 < s_len) b = log_add(b, beta[(t + 1) * s_len + s + 1]);
            if (s + 2 < s_len && skip(s + 2)) b = log_add(b, beta[(t + 1) * s_len + s + 2]);
            if (b != kNegInf) beta[t * s_len + s] = b + x[t * n_cls + ext[s]];
          }
        }
        auto& g = detail::grad_of(nlp);
        const double up = self.grad[0];
        std::vector<double> occ(n_cls);
        for (std::size_t t = 0; t < t_len; ++t) {
          std::fill(occ.begin(), occ.end(), kNegInf);
          for (std::size_t s = 0; s < s_len; ++s) {
            const double ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if (ab != kNegInf) occ[ext[s]] = log_add(occ[ext[s]], ab);
          }
          for (std::size_t c = 0; c < n_cls; ++c) {
            if (occ[c] == kNegInf) continue;
            // d(-log P)/d lp[t,c] = -sum_s alpha*beta / (P * y[t,c])
            g[t * n_cls + c] -= up * std::exp(occ[c] - x[t * n_cls + c] - log_p);
          }
        }
      });
}

struct CtcOracleResult {
  bool feasible = false;
  double neg_log_prob = std::numeric_limits<double>::infinity();
};

/// Collapse repeats, then drop blanks.
inline std::vector<int> ctc_collapse(const std::vector<int>& path, int blank = 0) {
  std::vector<int> out;
  int prev = -1;
  for (int c : path) {
    if (c != prev && c != blank) out.push_back(c);
    prev = c;
  }
  return out;
}

inline constexpr double kMaxEnumeratedPaths = 1e6;

/// Sums every frame-level path whose collapse equals labels. Exponential;
/// instances with more than 1e6 paths are rejected.
inline CtcOracleResult ctc_enumeration_oracle(const Tensor& lp, const std::vector<int>& labels, int blank = 0) {
  const std::size_t t_len = lp.rows(), n_cls = lp.cols();
  if (std::pow(static_cast<double>(n_cls), static_cast<double>(t_len)) > kMaxEnumeratedPaths) {
    throw std::invalid_argument("ctc_enumeration_oracle: instance too large");
  }
  std::vector<int> path(t_len, 0);
  double total = kNegInf;
  while (true) {
    if (ctc_collapse(path, blank) == labels) {
      double s = 0.0;
      for (std::size_t t = 0; t < t_len; ++t) s += lp(t, path[t]);
      total = log_add(total, s);
    }
    std::size_t i = 0;
    while (i < t_len && ++path[i] == static_cast<int>(n_cls)) path[i++] = 0;
    if (i == t_len) break;
  }
  CtcOracleResult r;
  r.feasible = total != kNegInf;
  r.neg_log_prob = r.feasible ? -total : std::numeric_limits<double>::infinity();
  return r;
}

/// Frame-wise argmax, collapse repeats, drop blanks.
inline std::vector<int> ctc_greedy_decode(const Tensor& lp, int blank = 0) {
  std::vector<int> path(lp.rows());
  for (std::size_t t = 0; t < lp.rows(); ++t) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < lp.cols(); ++c)
      if (lp(t, c) > lp(t, best)) best = c;
    path[t] = static_cast<int>(best);
  }
  return ctc_collapse(path, blank);
}

struct Hypothesis {
  std::vector<int> tokens;
  double ctc_score = 0.0;
  double aed_score = 0.0;
  double combined = 0.0;
};

/// CTC prefix beam search. Each prefix keeps the log-probability of ending in
/// blank and in a non-blank; prefixes are pruned to `beam` by their total after
/// every frame. Returns the top `nbest` prefixes by ctc_score, descending, with
/// ties broken by lexicographic token order.
inline std::vector<Hypothesis> ctc_prefix_beam_search(const Tensor& lp, std::size_t beam, std::size_t nbest,
                                                      int blank = 0) {
  if (nbest < 1 || beam < nbest) throw std::invalid_argument("prefix_beam_search: need beam >= nbest >= 1");
  struct Score {
    double blank = kNegInf;
    double non_blank = kNegInf;
    double total() const { return log_add(blank, non_blank); }
  };
  using Prefix = std::vector<int>;
  std::vector<std::pair<Prefix, Score>> beams{{Prefix{}, Score{0.0, kNegInf}}};
  auto by_score = [](const std::pair<Prefix, Score>& a, const std::pair<Prefix, Score>& b) {
    const double sa = a.second.total(), sb = b.second.total();
    if (sa != sb) return sa > sb;
    return a.first < b.first;
  };
  for (std::size_t t = 0; t < lp.rows(); ++t) {
    std::map<Prefix, Score> next;
    for (const auto& [prefix, sc] : beams) {
      for (std::size_t c = 0; c < lp.cols(); ++c) {
        const double p = lp(t, c);
        if (static_cast<int>(c) == blank) {
          Score& dst = next[prefix];
          dst.blank = log_add(dst.blank, sc.total() + p);
          continue;
        }
        Prefix extended = prefix;
        extended.push_back(static_cast<int>(c));
        Score& ext = next[extended];
        if (!prefix.empty() && prefix.back() == static_cast<int>(c)) {
          // Repeat without an intervening blank collapses onto the same prefix.
          Score& same = next[prefix];
          same.non_blank = log_add(same.non_blank, sc.non_blank + p);
          ext.non_blank = log_add(ext.non_blank, sc.blank + p);
        } else {
          ext.non_blank = log_add(ext.non_blank, sc.total() + p);
        }
      }
    }
    beams.clear();
    for (auto& kv : next)
      if (kv.second.total() != kNegInf) beams.push_back(std::move(kv));
    std::sort(beams.begin(), beams.end(), by_score);
    if (beams.size() > beam) beams.resize(beam);
  }
  std::vector<Hypothesis> out;
  for (std::size_t i = 0; i < beams.size() && i < nbest; ++i) {
    Hypothesis h;
    h.tokens = beams[i].first;
    h.ctc_score = beams[i].second.total();
    h.combined = h.ctc_score;
    out.push_back(std::move(h));
  }
  return out;
}

}  // namespace m3asr
