#pragma once

#include "mucp/checkpoint.hpp"
#include "mucp/data.hpp"
#include "mucp/encoder.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

namespace mucp {

enum class Regime { dense, sparse_scratch, upcycle };
std::string to_string(Regime r);
Regime parse_regime(const std::string& s);

struct TrainConfig {
  std::int64_t steps = 2000;
  int batch_size = 64;
  float peak_lr = 1e-3f;
  std::int64_t warmup_steps = 100;
  float weight_decay = 0.2f;
  float adam_beta1 = 0.9f;
  float adam_beta2 = 0.98f;
  float adam_eps = 1e-8f;
  float grad_clip = 1.0f;  // global-norm threshold; <= 0 disables
  std::uint64_t seed = 0;
  Regime regime = Regime::dense;
  std::int64_t checkpoint_every = 0;  // 0 = final checkpoint only

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Throws ContractError on an inconsistent config (e.g. warmup_steps >= steps).
void validate(const TrainConfig& config);

/// Linear warmup 0 → peak over warmup_steps, then half-cosine to 0 at steps.
float lr_schedule(std::int64_t step, const TrainConfig& config);

/// Parameters excluded from weight decay: biases, layer-norm gains,
/// embeddings added to tokens and the logit scale.
bool decays(const std::string& name, const Tensor& value);

struct AdamState {
  std::vector<FloatBuffer> m, v;
  std::int64_t t = 0;
};

struct AdamParam {
  Tensor* tensor;
  bool decay;
};

/// One AdamW update with bias-corrected moments and decoupled decay:
/// p ← p − lr·(m̂/(√v̂+ε) + wd·p) for decayed parameters.
void adamw_step(std::span<const AdamParam> params, AdamState& state, float lr, const TrainConfig& config);

/// Scales all gradients so their global L2 norm is at most max_norm; returns the pre-clip norm.
double clip_grad_norm(ParamStore& params, float max_norm);

struct MetricsRow {
  std::int64_t step = 0;
  float total_loss = 0, contrastive_loss = 0, aux_loss = 0;
  float drop_frac_image = 0, drop_frac_text = 0;
  float lr = 0;
};

std::string metrics_header();
std::string format_metrics(const MetricsRow& row);

/// Forward pass of one paired batch.
struct StepLosses {
  Var total, contrastive, aux;
  float drop_frac_image = 0, drop_frac_text = 0;
  std::vector<RoutedLayer> routing;
};
StepLosses compute_losses(ParamBinding& params, const ModelSpec& spec, const Batch& batch,
                          const RoutingOptions& options = {});

struct TrainHooks {
  /// Receives every metrics row as it is produced.
  std::function<void(const MetricsRow&)> on_metrics;
  /// Called every checkpoint_every steps with the model after that step.
  std::function<void(const Checkpoint&)> on_checkpoint;
  /// Worker threads for batch preparation (1 = synchronous).
  int threads = 1;
};

struct TrainResult {
  std::vector<MetricsRow> log;
  Checkpoint final;
};

/// Trains `model` in place on `data` for config.steps steps. The regime must
/// match the model: dense has no MoE, sparse_scratch has MoE and was not
/// upcycled, upcycle requires an upcycled checkpoint. A non-finite loss throws
/// NumericError naming the step.
TrainResult train_run(Checkpoint model, const Dataset& data, const TrainConfig& config, const TrainHooks& hooks = {});

}  // namespace mucp
