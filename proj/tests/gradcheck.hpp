#pragma once

// Central finite-difference oracle. Perturbations and the loss reduction run in
// double; the operation under test runs in float32 as in production.

#include "mucp/graph.hpp"
#include "mucp/ops.hpp"

#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace mucp::testing {

using Builder = std::function<Var(Graph&, const std::vector<Var>&)>;

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, float lo = -1.0f, float hi = 1.0f) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<float> u(lo, hi);
  for (auto& v : t.data()) v = u(rng);
  return t;
}

struct GradCheckResult {
  double rel_error = 0.0;
  double fd_norm = 0.0;
};

/// Projects the builder output onto fixed random weights and compares the
/// analytic gradient of every input with central differences.
inline GradCheckResult grad_check(const Builder& build, const std::vector<Tensor>& inputs, std::uint64_t seed,
                                  double step = 3e-3) {
  std::vector<double> weights;
  auto evaluate = [&](const std::vector<Tensor>& xs) {
    Graph g;
    g.set_grad_enabled(false);
    std::vector<Var> vars;
    for (const auto& x : xs) vars.push_back(g.constant(x));
    Var out = build(g, vars);
    auto o = out.value().data();
    if (weights.empty()) {
      std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
      std::normal_distribution<double> n(0.0, 1.0);
      for (std::size_t i = 0; i < o.size(); ++i) weights.push_back(n(rng));
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < o.size(); ++i) acc += weights[i] * static_cast<double>(o[i]);
    return acc;
  };
  evaluate(inputs);

  Graph g;
  std::vector<Var> vars;
  for (const auto& x : inputs) vars.push_back(g.input(x, true));
  Var out = build(g, vars);
  std::vector<float> w(weights.begin(), weights.end());
  Var loss = sum(mul(out, g.constant(Tensor(out.shape(), w))));
  g.backward(loss);

  double diff2 = 0.0, fd2 = 0.0, an2 = 0.0;
  std::vector<Tensor> probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto analytic = vars[k].grad();
    for (std::int64_t i = 0; i < inputs[k].numel(); ++i) {
      const float orig = inputs[k][i];
      const float hi = static_cast<float>(orig + step);
      const float lo = static_cast<float>(orig - step);
      probe[k][i] = hi;
      const double up = evaluate(probe);
      probe[k][i] = lo;
      const double down = evaluate(probe);
      probe[k][i] = orig;
      const double fd = (up - down) / (static_cast<double>(hi) - static_cast<double>(lo));
      const double an = analytic.empty() ? 0.0 : analytic[static_cast<std::size_t>(i)];
      diff2 += (fd - an) * (fd - an);
      fd2 += fd * fd;
      an2 += an * an;
    }
  }
  GradCheckResult r;
  r.fd_norm = std::sqrt(fd2);
  r.rel_error = std::sqrt(diff2) / std::max({std::sqrt(fd2), std::sqrt(an2), 1e-12});
  return r;
}

}  // namespace mucp::testing
