#include "mucp/trainer.hpp"

#include "mucp/errors.hpp"
#include "mucp/ops.hpp"
#include "mucp/spec_io.hpp"

#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <mutex>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <thread>

namespace mucp {

std::string to_string(Regime r) {
  switch (r) {
    case Regime::dense:
      return "dense";
    case Regime::sparse_scratch:
      return "sparse_scratch";
    case Regime::upcycle:
      return "upcycle";
  }
  return "dense";
}

Regime parse_regime(const std::string& s) {
  if (s == "dense") return Regime::dense;
  if (s == "sparse_scratch") return Regime::sparse_scratch;
  if (s == "upcycle") return Regime::upcycle;
  throw FormatError("unknown regime '" + s + "' (expected dense|sparse_scratch|upcycle)");
}

void validate(const TrainConfig& c) {
  if (c.steps < 1) throw ContractError("train: steps must be >= 1");
  if (c.warmup_steps < 0 || c.warmup_steps >= c.steps) throw ContractError("train: warmup_steps must be in [0, steps)");
  if (c.batch_size < 1) throw ContractError("train: batch_size must be >= 1");
  if (!(c.peak_lr >= 0.0f) || !(c.weight_decay >= 0.0f)) throw ContractError("train: peak_lr and weight_decay must be >= 0");
  if (!(c.adam_beta1 >= 0.0f && c.adam_beta1 < 1.0f) || !(c.adam_beta2 >= 0.0f && c.adam_beta2 < 1.0f))
    throw ContractError("train: adam betas must be in [0, 1)");
  if (!(c.adam_eps > 0.0f)) throw ContractError("train: adam_eps must be > 0");
  if (c.checkpoint_every < 0) throw ContractError("train: checkpoint_every must be >= 0");
}

float lr_schedule(std::int64_t step, const TrainConfig& c) {
  if (step <= 0) return 0.0f;
  if (step >= c.steps) return 0.0f;
  if (step < c.warmup_steps) return c.peak_lr * static_cast<float>(step) / static_cast<float>(c.warmup_steps);
  const double progress = static_cast<double>(step - c.warmup_steps) / static_cast<double>(c.steps - c.warmup_steps);
  return static_cast<float>(c.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

bool decays(const std::string& name, const Tensor& value) {
  if (value.rank() < 2 || name == "logit_scale") return false;
  for (const char* suffix : {".pos", ".cls", ".token_embed"})
    if (name.size() >= std::strlen(suffix) && name.compare(name.size() - std::strlen(suffix), std::string::npos, suffix) == 0)
      return false;
  return true;
}

void adamw_step(std::span<const AdamParam> params, AdamState& state, float lr, const TrainConfig& c) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(static_cast<std::size_t>(p.tensor->numel()), 0.0f);
      state.v.emplace_back(static_cast<std::size_t>(p.tensor->numel()), 0.0f);
    }
  }
  if (state.m.size() != params.size()) throw ContractError("adamw_step: optimizer state does not match parameters");
  ++state.t;
  const double bc1 = 1.0 - std::pow(static_cast<double>(c.adam_beta1), static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(static_cast<double>(c.adam_beta2), static_cast<double>(state.t));
  const float b1 = c.adam_beta1, b2 = c.adam_beta2;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& t = *params[i].tensor;
    auto p = t.data();
    auto g = t.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != p.size()) throw ContractError("adamw_step: optimizer state does not match parameters");
    const float wd = params[i].decay ? c.weight_decay : 0.0f;
    for (std::size_t j = 0; j < p.size(); ++j) {
      const float gj = g.empty() ? 0.0f : g[j];
      m[j] = b1 * m[j] + (1.0f - b1) * gj;
      v[j] = b2 * v[j] + (1.0f - b2) * gj * gj;
      const float mhat = static_cast<float>(m[j] / bc1);
      const float vhat = static_cast<float>(v[j] / bc2);
      p[j] -= lr * (mhat / (std::sqrt(vhat) + c.adam_eps) + wd * p[j]);
    }
  }
}

double clip_grad_norm(ParamStore& params, float max_norm) {
  double sq = 0.0;
  for (auto& [_, t] : params)
    for (float g : t.grad()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0f && norm > max_norm && std::isfinite(norm)) {
    const float s = static_cast<float>(max_norm / norm);
    for (auto& [_, t] : params)
      for (float& g : t.grad()) g *= s;
  }
  return norm;
}

std::string metrics_header() { return "step,total_loss,contrastive_loss,aux_loss,drop_frac_image,drop_frac_text,lr"; }

std::string format_metrics(const MetricsRow& r) {
  return std::to_string(r.step) + "," + format_float(r.total_loss) + "," + format_float(r.contrastive_loss) + "," +
         format_float(r.aux_loss) + "," + format_float(r.drop_frac_image) + "," + format_float(r.drop_frac_text) + "," +
         format_float(r.lr);
}

namespace {

float drop_fraction(std::span<const RoutedLayer> layers) {
  std::int64_t dropped = 0, total = 0;
  for (const auto& l : layers) {
    dropped += l.outcome.total_dropped();
    total += l.outcome.num_tokens() * l.outcome.top_k;
  }
  return total ? static_cast<float>(static_cast<double>(dropped) / static_cast<double>(total)) : 0.0f;
}

/// Shuffled epoch order; batches never straddle an epoch boundary.
class BatchSampler {
 public:
  BatchSampler(std::int64_t size, int batch, std::uint64_t seed) : size_(size), batch_(batch), rng_(seed ^ 0x9e3779b97f4a7c15ULL) {
    if (batch > size) throw ContractError("train: batch_size exceeds dataset size");
    order_.resize(static_cast<std::size_t>(size));
  }

  std::vector<std::int64_t> next() {
    if (cursor_ == 0 || cursor_ + batch_ > size_) {
      std::iota(order_.begin(), order_.end(), 0);
      std::shuffle(order_.begin(), order_.end(), rng_);
      cursor_ = 0;
    }
    std::vector<std::int64_t> idx(order_.begin() + cursor_, order_.begin() + cursor_ + batch_);
    cursor_ += batch_;
    return idx;
  }

 private:
  std::int64_t size_;
  int batch_;
  std::mt19937_64 rng_;
  std::vector<std::int64_t> order_;
  std::int64_t cursor_ = 0;
};

/// Builds batches on a worker thread, at most two ahead of the consumer.
class BatchQueue {
 public:
  BatchQueue(const Dataset& data, BatchSampler sampler, std::int64_t count, bool threaded)
      : data_(data), sampler_(std::move(sampler)), remaining_(count) {
    if (threaded) worker_ = std::thread([this] { produce(); });
  }
  ~BatchQueue() {
    {
      std::lock_guard lock(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    if (worker_.joinable()) worker_.join();
  }

  Batch pop() {
    if (!worker_.joinable()) return make_batch(data_, sampler_.next());
    std::unique_lock lock(mu_);
    cv_.wait(lock, [this] { return !ready_.empty(); });
    Batch b = std::move(ready_.front());
    ready_.pop_front();
    cv_.notify_all();
    return b;
  }

 private:
  void produce() {
    for (std::int64_t i = 0; i < remaining_; ++i) {
      Batch b = make_batch(data_, sampler_.next());
      std::unique_lock lock(mu_);
      cv_.wait(lock, [this] { return stop_ || ready_.size() < 2; });
      if (stop_) return;
      ready_.push_back(std::move(b));
      cv_.notify_all();
    }
  }

  const Dataset& data_;
  BatchSampler sampler_;
  std::int64_t remaining_;
  std::thread worker_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Batch> ready_;
  bool stop_ = false;
};

void check_regime(const Checkpoint& model, Regime regime) {
  switch (regime) {
    case Regime::dense:
      if (model.spec.moe) throw ContractError("regime dense requires a model without MoE layers");
      break;
    case Regime::sparse_scratch:
      if (!model.spec.moe) throw ContractError("regime sparse_scratch requires a model with MoE layers");
      if (model.upcycled) throw ContractError("regime sparse_scratch cannot start from an upcycled checkpoint");
      break;
    case Regime::upcycle:
      if (!model.spec.moe || !model.upcycled) throw ContractError("regime upcycle requires an upcycled checkpoint");
      break;
  }
}

}  // namespace

StepLosses compute_losses(ParamBinding& params, const ModelSpec& spec, const Batch& batch,
                          const RoutingOptions& options) {
  Graph& g = params.graph();
  StepLosses out;
  Encoded img = encode(params, spec, batch, Modality::image, options);
  Encoded txt = encode(params, spec, batch, Modality::text, options);
  out.drop_frac_image = drop_fraction(img.routing);
  out.drop_frac_text = drop_fraction(txt.routing);
  out.contrastive = contrastive_loss(img.embeddings, txt.embeddings, params("logit_scale"));
  out.routing = std::move(img.routing);
  out.routing.insert(out.routing.end(), std::make_move_iterator(txt.routing.begin()),
                     std::make_move_iterator(txt.routing.end()));
  out.aux = spec.moe ? total_aux_loss(g, out.routing, *spec.moe) : g.constant(Tensor::scalar(0.0f));
  out.total = add(out.contrastive, out.aux);
  return out;
}

TrainResult train_run(Checkpoint model, const Dataset& data, const TrainConfig& config, const TrainHooks& hooks) {
  validate(config);
  validate(model.spec);
  check_layout(model.spec, model.params);
  check_regime(model, config.regime);
  if (data.seq_len > model.spec.text_tower.max_tokens)
    throw ContractError("train: caption length exceeds the text tower's max_tokens");

  TrainResult result;
  ParamStore& params = model.params;
  params.set_requires_grad(true);
  std::vector<AdamParam> adam;
  for (auto& [name, t] : params) adam.push_back({&t, decays(name, t)});
  AdamState state;
  Tensor& logit_scale = params.at("logit_scale");

  BatchQueue queue(data, BatchSampler(data.size, config.batch_size, config.seed), config.steps, hooks.threads > 1);
  for (std::int64_t step = 0; step < config.steps; ++step) {
    const Batch batch = queue.pop();
    params.zero_grad();
    Graph g;
    ParamBinding binding(g, params);
    MetricsRow row;
    row.step = step;
    row.lr = lr_schedule(step, config);
    try {
      StepLosses losses = compute_losses(binding, model.spec, batch);
      row.total_loss = losses.total.value()[0];
      row.contrastive_loss = losses.contrastive.value()[0];
      row.aux_loss = losses.aux.value()[0];
      row.drop_frac_image = losses.drop_frac_image;
      row.drop_frac_text = losses.drop_frac_text;
      if (!std::isfinite(row.total_loss))
        throw NumericError("non-finite loss (contrastive " + format_float(row.contrastive_loss) + ", aux " +
                           format_float(row.aux_loss) + ")");
      g.backward(losses.total);
    } catch (const NumericError& e) {
      throw NumericError("step " + std::to_string(step) + ": " + e.what());
    }
    const double norm = clip_grad_norm(params, config.grad_clip);
    if (!std::isfinite(norm)) throw NumericError("step " + std::to_string(step) + ": non-finite gradient norm");
    adamw_step(adam, state, row.lr, config);
    logit_scale[0] = std::min(logit_scale[0], kMaxLogitScale);
    ++model.step;
    result.log.push_back(row);
    if (hooks.on_metrics) hooks.on_metrics(row);
    if (hooks.on_checkpoint && config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 &&
        step + 1 < config.steps)
      hooks.on_checkpoint(model);
  }
  params.set_requires_grad(false);
  result.final = std::move(model);
  return result;
}

}  // namespace mucp
