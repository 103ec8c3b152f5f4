#include "mucp/moe.hpp"

#include "mucp/errors.hpp"
#include "mucp/numeric.hpp"
#include "mucp/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace mucp {

std::int64_t expert_capacity(std::int64_t tokens, int experts, double factor) {
  if (tokens < 0 || experts < 1 || !(factor > 0.0))
    throw ContractError("expert_capacity: need tokens >= 0, experts >= 1, factor > 0");
  const double exact = static_cast<double>(tokens) / experts * factor;
  // Guard against representation error turning an exact product into the next integer.
  return static_cast<std::int64_t>(std::ceil(exact - 1e-9 * std::max(1.0, exact)));
}

std::int64_t RoutingOutcome::assigned_count(int expert) const {
  std::int64_t n = 0;
  for (std::size_t i = 0; i < topk.size(); ++i) n += topk[i] == expert && slots[i] >= 0;
  return n;
}

std::int64_t RoutingOutcome::selected_count(int expert) const {
  return std::count(topk.begin(), topk.end(), expert);
}

std::int64_t RoutingOutcome::dropped_count(int expert) const { return selected_count(expert) - assigned_count(expert); }

std::int64_t RoutingOutcome::total_dropped() const { return std::accumulate(dropped.begin(), dropped.end(), std::int64_t{0}); }

std::vector<std::pair<int, std::int64_t>> RoutingOutcome::selected(std::int64_t token) const {
  std::vector<std::pair<int, std::int64_t>> out;
  for (int k = 0; k < top_k; ++k) {
    const auto i = static_cast<std::size_t>(token * top_k + k);
    if (slots[i] >= 0) out.emplace_back(topk[i], slots[i]);
  }
  return out;
}

GateSelection compute_gates(Var x, Var router, int top_k, const RoutingOptions& options) {
  const auto experts = router.value().cols();
  if (top_k < 1 || top_k > experts)
    throw ContractError("compute_gates: top_k " + std::to_string(top_k) + " outside [1, " + std::to_string(experts) + "]");
  GateSelection sel;
  sel.logits = matmul(x, router);
  if (options.logit_jitter > 0.0f) {
    Tensor noise(sel.logits.shape());
    std::mt19937_64 rng(options.jitter_seed);
    std::normal_distribution<float> n(0.0f, options.logit_jitter);
    for (auto& v : noise.data()) v = n(rng);
    sel.logits = add(sel.logits, x.graph()->constant(std::move(noise)));
  }
  sel.probs = softmax(sel.logits, 1);
  const auto& p = sel.probs.value();
  const auto tokens = p.rows();
  sel.topk.resize(static_cast<std::size_t>(tokens * top_k));
  std::vector<int> order(static_cast<std::size_t>(experts));
  for (std::int64_t j = 0; j < tokens; ++j) {
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + top_k, order.end(), [&](int a, int b) {
      const float pa = p.at(j, a), pb = p.at(j, b);
      return pa > pb || (pa == pb && a < b);
    });
    std::copy_n(order.begin(), top_k, sel.topk.begin() + j * top_k);
  }
  return sel;
}

RoutingOutcome assign_tokens(std::span<const int> topk, const Tensor& gate_probs, int top_k, std::int64_t capacity) {
  RoutingOutcome r;
  const auto tokens = gate_probs.rows();
  if (static_cast<std::int64_t>(topk.size()) != tokens * top_k)
    throw DimensionError("assign_tokens: top-k table does not match " + shape_str(gate_probs.shape()));
  r.num_experts = static_cast<int>(gate_probs.cols());
  r.top_k = top_k;
  r.capacity = capacity;
  r.topk.assign(topk.begin(), topk.end());
  r.slots.assign(topk.size(), -1);
  r.dropped.assign(static_cast<std::size_t>(tokens), 0);
  std::vector<std::int64_t> fill(static_cast<std::size_t>(r.num_experts), 0);
  for (std::int64_t j = 0; j < tokens; ++j)
    for (int k = 0; k < top_k; ++k) {
      const auto i = static_cast<std::size_t>(j * top_k + k);
      const int e = topk[i];
      if (e < 0 || e >= r.num_experts) throw IndexError("assign_tokens: expert index out of range");
      auto& used = fill[static_cast<std::size_t>(e)];
      if (used < capacity)
        r.slots[i] = used++;
      else
        ++r.dropped[static_cast<std::size_t>(j)];
    }
  return r;
}

Var mlp(Var x, const ExpertWeights& w) { return linear(gelu(linear(x, w.fc1_w, w.fc1_b)), w.fc2_w, w.fc2_b); }

Var expert_mixture(Var x, std::span<const ExpertWeights> experts, Var router, const MoESpec& spec, double capacity_factor,
                   RoutedLayer& routed, const RoutingOptions& options) {
  Graph& g = *x.graph();
  const auto tokens = x.dim(0), width = x.dim(1);
  const int num_experts = static_cast<int>(experts.size());
  if (router.value().cols() != num_experts)
    throw DimensionError("expert_mixture: router has " + std::to_string(router.value().cols()) + " columns for " +
                         std::to_string(num_experts) + " experts");
  auto gates = compute_gates(x, router, spec.top_k, options);
  const auto capacity = options.capacity_override.value_or(expert_capacity(tokens, num_experts, capacity_factor));
  routed.outcome = assign_tokens(gates.topk, gates.probs.value(), spec.top_k, capacity);
  routed.outcome.gate_logits = gates.logits.value();
  routed.outcome.gate_probs = gates.probs.value();
  routed.logits = gates.logits;
  routed.probs = gates.probs;
  const auto& out = routed.outcome;

  // Surviving assignments grouped by expert in slot order.
  std::vector<std::vector<std::int64_t>> rows(static_cast<std::size_t>(num_experts));
  std::vector<std::vector<std::int64_t>> assignment_ids(static_cast<std::size_t>(num_experts));
  std::vector<std::int64_t> flat_gate_idx, token_of;
  for (std::int64_t j = 0; j < tokens; ++j)
    for (int k = 0; k < spec.top_k; ++k) {
      const auto i = static_cast<std::size_t>(j * spec.top_k + k);
      if (out.slots[i] < 0) continue;
      const int e = out.topk[i];
      rows[static_cast<std::size_t>(e)].push_back(j);
      assignment_ids[static_cast<std::size_t>(e)].push_back(static_cast<std::int64_t>(flat_gate_idx.size()));
      flat_gate_idx.push_back(j * num_experts + e);
      token_of.push_back(j);
    }
  if (flat_gate_idx.empty()) return g.constant(Tensor({tokens, width}));

  Var gate_values = take(gates.probs, flat_gate_idx);
  if (spec.normalize_gates_after_routing) {
    const auto n = static_cast<std::int64_t>(flat_gate_idx.size());
    Var column = reshape(gate_values, {n, 1});
    Var per_token = scatter_add_rows(column, token_of, tokens);
    gate_values = reshape(div(column, gather_rows(per_token, token_of)), {n});
  }

  Var mixture;
  for (int e = 0; e < num_experts; ++e) {
    const auto& r = rows[static_cast<std::size_t>(e)];
    if (r.empty()) continue;
    Var contribution = scale_rows(mlp(gather_rows(x, r), experts[static_cast<std::size_t>(e)]),
                                  take(gate_values, assignment_ids[static_cast<std::size_t>(e)]));
    Var scattered = scatter_add_rows(contribution, r, tokens);
    mixture = mixture.valid() ? add(mixture, scattered) : scattered;
  }
  return mixture;
}

MoEResult moe_forward(Var x, std::span<const ExpertWeights> experts, Var router, const MoESpec& spec,
                      Modality modality, int layer_id, const RoutingOptions& options) {
  MoEResult r;
  Var mixture = expert_mixture(x, experts, router, spec, spec.capacity_for(modality), r.routed, options);
  r.routed.outcome.layer_id = layer_id;
  r.routed.outcome.modality = modality;
  r.y = add(x, mixture);
  const auto& v = r.y.value();
  if (!v.all_finite())
    throw NumericError("moe_forward: non-finite output in " + to_string(modality) + " layer " + std::to_string(layer_id));
  return r;
}

namespace {

Tensor assignment_ratios(const RoutingOutcome& o) {
  const auto tokens = o.num_tokens();
  if (tokens < 1) throw ContractError("load_balance_loss: no tokens routed");
  Tensor ratio({o.num_experts});
  for (int e : o.topk) ratio[e] += 1.0f;
  const float norm = static_cast<float>(o.num_experts) / (static_cast<float>(o.top_k) * static_cast<float>(tokens));
  for (auto& v : ratio.data()) v *= norm;
  return ratio;
}

}  // namespace

Var load_balance_loss(const RoutedLayer& layer, float alpha) {
  Graph& g = *layer.probs.graph();
  Var ratios = g.constant(assignment_ratios(layer.outcome));
  return scale(sum(mul(column_mean(layer.probs), ratios)), alpha);
}

float load_balance_loss(const RoutingOutcome& outcome, float alpha) {
  Graph g;
  g.set_grad_enabled(false);
  RoutedLayer layer{outcome, {}, g.constant(outcome.gate_probs)};
  layer.logits = g.constant(outcome.gate_logits);
  return load_balance_loss(layer, alpha).value()[0];
}

Var router_z_loss(Var logits, float beta) {
  if (logits.value().rank() != 2 || logits.dim(0) < 1)
    throw ContractError("router_z_loss: need logits [S×E] with S >= 1");
  Var lse = logsumexp(logits, 1);
  return scale(mean(mul(lse, lse)), beta);
}

float router_z_loss(const Tensor& logits, float beta) {
  Graph g;
  g.set_grad_enabled(false);
  return router_z_loss(g.constant(logits), beta).value()[0];
}

Var total_aux_loss(Graph& g, std::span<const RoutedLayer> layers, const MoESpec& spec) {
  if (layers.empty()) return g.constant(Tensor::scalar(0.0f));
  Var total;
  for (const auto& layer : layers) {
    Var term = add(load_balance_loss(layer, spec.balance_weight), router_z_loss(layer.logits, spec.router_z_weight));
    total = total.valid() ? add(total, term) : term;
  }
  return scale(total, 1.0f / static_cast<float>(layers.size()));
}

}  // namespace mucp
