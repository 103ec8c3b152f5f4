#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>

namespace mucp {

// Scalar-generic kernels shared by the float engine and the double-precision
// test oracles.

template <typename Scalar>
Scalar logsumexp(std::span<const Scalar> x) {
  if (x.empty()) return -std::numeric_limits<Scalar>::infinity();
  const Scalar m = *std::max_element(x.begin(), x.end());
  if (!std::isfinite(m)) return m;
  Scalar s = 0;
  for (Scalar v : x) s += std::exp(v - m);
  return m + std::log(s);
}

/// In-place max-subtracted softmax.
template <typename Scalar>
void softmax_inplace(std::span<Scalar> x) {
  if (x.empty()) return;
  const Scalar m = *std::max_element(x.begin(), x.end());
  Scalar s = 0;
  for (Scalar& v : x) {
    v = std::exp(v - m);
    s += v;
  }
  for (Scalar& v : x) v /= s;
}

template <typename Scalar>
Scalar gelu(Scalar x) {
  constexpr Scalar k = Scalar(0.7978845608028654);  // sqrt(2/pi)
  return Scalar(0.5) * x * (Scalar(1) + std::tanh(k * (x + Scalar(0.044715) * x * x * x)));
}

template <typename Scalar>
Scalar gelu_grad(Scalar x) {
  constexpr Scalar k = Scalar(0.7978845608028654);
  const Scalar inner = k * (x + Scalar(0.044715) * x * x * x);
  const Scalar t = std::tanh(inner);
  const Scalar dinner = k * (Scalar(1) + Scalar(3 * 0.044715) * x * x);
  return Scalar(0.5) * (Scalar(1) + t) + Scalar(0.5) * x * (Scalar(1) - t * t) * dinner;
}

}  // namespace mucp
