#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "m3asr/random.hpp"
#include "m3asr/tensor.hpp"

namespace m3asr {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences. `sample` limits the number of checked coordinates (0 = all),
/// drawn uniformly over every entry of every parameter with `seed`.
/// Relative error per coordinate: |a - c| / (|a| + |c| + 1e-12).
inline GradCheckResult finite_diff_check(const std::function<Tensor()>& f, std::span<Tensor> params,
                                         double eps = 1e-5, std::size_t sample = 0,
                                         std::uint64_t seed = 0) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) throw std::invalid_argument("finite_diff_check: eps must lie in [1e-7, 1e-3]");

  for (auto& p : params) {
    if (!p.requires_grad()) throw std::invalid_argument("finite_diff_check: parameter does not require grad");
    p.zero_grad();
  }
  const Tensor loss = f();
  const double base = loss.item();
  {
    NoGradGuard ng;
    const double again = f().item();
    if (again != base) {
      throw std::runtime_error("finite_diff_check: function is not deterministic (" +
                               std::to_string(base) + " vs " + std::to_string(again) + ")");
    }
  }
  backward(loss);

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t p = 0; p < params.size(); ++p)
    for (std::size_t i = 0; i < params[p].size(); ++i) coords.emplace_back(p, i);
  if (sample > 0 && sample < coords.size()) {
    Rng rng(seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(sample);
  }

  GradCheckResult res;
  res.coordinates = coords.size();
  NoGradGuard ng;
  for (auto [p, i] : coords) {
    auto data = params[p].mutable_data();
    const double orig = data[i];
    data[i] = orig + eps;
    const double up = f().item();
    data[i] = orig - eps;
    const double down = f().item();
    data[i] = orig;
    const double central = (up - down) / (2.0 * eps);
    const double analytic = params[p].grad()[i];
    const double rel = std::abs(analytic - central) / (std::abs(analytic) + std::abs(central) + 1e-12);
    if (rel > res.max_relative_error) {
      res.max_relative_error = rel;
      res.worst_param = p;
      res.worst_index = i;
    }
  }
  return res;
}

}  // namespace m3asr
