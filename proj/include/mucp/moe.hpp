#pragma once

#include "mucp/graph.hpp"
#include "mucp/spec.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

namespace mucp {

/// Expert capacity ceil(tokens / experts * factor).
std::int64_t expert_capacity(std::int64_t tokens, int experts, double factor);

/// Routing-time knobs used by analytics and tests; defaults leave routing untouched.
struct RoutingOptions {
  /// Replaces the computed capacity of every MoE layer.
  std::optional<std::int64_t> capacity_override;
  /// Standard deviation of Gaussian noise added to router logits (0 = off).
  float logit_jitter = 0.0f;
  std::uint64_t jitter_seed = 0;
};

/// One MoE layer invocation: gates, first-come-first-serve assignment and drops.
struct RoutingOutcome {
  Tensor gate_logits;  // [S×E]
  Tensor gate_probs;   // [S×E], softmax over all experts
  int num_experts = 0;
  int top_k = 0;
  std::int64_t capacity = 0;
  std::vector<int> topk;            // [S×K] pre-drop choices, descending gate order
  std::vector<std::int64_t> slots;  // [S×K] buffer slot of each choice, -1 when dropped
  std::vector<int> dropped;         // [S] dropped choices per token
  int layer_id = -1;
  Modality modality = Modality::image;

  std::int64_t num_tokens() const { return static_cast<std::int64_t>(dropped.size()); }
  /// Tokens holding a slot of `expert` (post-drop).
  std::int64_t assigned_count(int expert) const;
  /// Top-K selections of `expert` before capacity is applied.
  std::int64_t selected_count(int expert) const;
  std::int64_t dropped_count(int expert) const;
  std::int64_t total_dropped() const;
  bool fully_dropped(std::int64_t token) const { return dropped[static_cast<std::size_t>(token)] == top_k; }
  /// Surviving (expert, slot) pairs of `token`.
  std::vector<std::pair<int, std::int64_t>> selected(std::int64_t token) const;
};

struct GateSelection {
  Var logits;
  Var probs;
  std::vector<int> topk;  // [S×K]
};

/// Router logits x·W, softmax over all E experts, top-K by descending
/// probability with ties going to the lower expert index.
GateSelection compute_gates(Var x, Var router, int top_k, const RoutingOptions& options = {});

/// First-come-first-serve assignment in token order; each token claims its
/// experts in descending gate order and claims on full experts are dropped.
RoutingOutcome assign_tokens(std::span<const int> topk, const Tensor& gate_probs, int top_k,
                             std::int64_t capacity);

struct ExpertWeights {
  Var fc1_w, fc1_b, fc2_w, fc2_b;
};

/// Dense feed-forward block fc2(GeLU(fc1(x))).
Var mlp(Var x, const ExpertWeights& w);

/// Routing outcome plus the graph nodes the auxiliary losses differentiate.
struct RoutedLayer {
  RoutingOutcome outcome;
  Var logits;
  Var probs;
};

/// Σ over surviving assignments of gate·MLP_e(x); rows of fully dropped tokens are zero.
Var expert_mixture(Var x, std::span<const ExpertWeights> experts, Var router, const MoESpec& spec, double capacity_factor,
                   RoutedLayer& routed, const RoutingOptions& options = {});

struct MoEResult {
  Var y;
  RoutedLayer routed;
};

/// y = x + Σ_e gate_e · MLP_e(x).
MoEResult moe_forward(Var x, std::span<const ExpertWeights> experts, Var router, const MoESpec& spec,
                      Modality modality, int layer_id = 0, const RoutingOptions& options = {});

/// α·Σ_e R_e·P_e with R_e from pre-drop top-K counts (constant) and P_e the mean gate probability.
Var load_balance_loss(const RoutedLayer& layer, float alpha);
float load_balance_loss(const RoutingOutcome& outcome, float alpha);

/// β·mean_j logsumexp(logits_j)².
Var router_z_loss(Var logits, float beta);
float router_z_loss(const Tensor& logits, float beta);

/// Mean over MoE layer invocations of load-balance + router-z losses; 0 when empty.
Var total_aux_loss(Graph& g, std::span<const RoutedLayer> layers, const MoESpec& spec);

}  // namespace mucp
