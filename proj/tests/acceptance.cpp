// Runs the acceptance criteria and prints one PASS/FAIL line per criterion.
// Usage: acceptance [criterion numbers...]   (default: all)

#include "op_cases.hpp"

#include "mucp/checkpoint.hpp"
#include "mucp/config.hpp"
#include "mucp/data.hpp"
#include "mucp/encoder.hpp"
#include "mucp/eval.hpp"
#include "mucp/moe.hpp"
#include "mucp/trainer.hpp"
#include "mucp/upcycle.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace {

using namespace mucp;
using mucp::testing::random_tensor;

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
  void note(const std::string& what) { detail += (detail.empty() ? "" : "; ") + what; }
};

std::string fmt(const char* format, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, format, a, b, c, d);
  return buf;
}

Outcome flops_table() {
  Outcome r;
  struct Row {
    const char* name;
    double dense, up;
  } rows[] = {{"b32", 14.8, 19.6}, {"b16", 41.2, 54.3}, {"l14", 175.5, 231.7}};
  std::map<std::string, double> dense, up;
  for (const auto& row : rows) {
    dense[row.name] = flops_estimate(clip_preset(row.name, false)).total_gflops();
    up[row.name] = flops_estimate(clip_preset(row.name, true)).total_gflops();
    r.require(std::abs(dense[row.name] - row.dense) <= 0.1 * row.dense, std::string(row.name) + " dense out of band");
    r.require(std::abs(up[row.name] - row.up) <= 0.1 * row.up, std::string(row.name) + " upcycled out of band");
    r.note(row.name + fmt(" %.2f/%.2f", dense[row.name], up[row.name]));
  }
  const double r1 = up["b32"] / dense["b16"], r2 = up["b16"] / dense["l14"];
  r.require(std::abs(r1 - 19.6 / 41.2) <= 0.03, "b32-up/b16 ratio");
  r.require(std::abs(r2 - 54.3 / 175.5) <= 0.03, "b16-up/l14 ratio");
  r.note(fmt("ratios %.3f %.3f", r1, r2));
  return r;
}

Outcome upcycle_equivalence() {
  Outcome r;
  SynthSpec s;
  s.train_size = 1;
  s.val_size = 16;
  const auto data = make_synth_dataset(s);
  const Batch batch = make_batch(data.val, 0, data.val.size);
  double worst = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    ModelSpec spec = tiny_spec();
    spec.backbone = seed % 2 ? Backbone::shared : Backbone::separated;
    const Checkpoint dense = init_checkpoint(spec, seed);
    const auto up = upcycle_checkpoint(dense, MoESpec{}, MoEModality::both, seed + 100);
    const auto eq = verify_equivalence(dense, up.sparse, batch, true, true);
    worst = std::max(worst, eq.max_abs_deviation);
    r.require(eq.max_abs_deviation < 1e-5, "model " + std::to_string(seed) + " deviates");
  }
  r.note(fmt("max deviation %.2e over 20 models", worst));
  return r;
}

Outcome gradient_integrity() {
  Outcome r;
  double worst_op = 0;
  for (const auto& c : mucp::testing::op_cases())
    for (int p = 0; p < mucp::testing::kGradPoints; ++p) {
      const auto g = mucp::testing::check_op(c, p);
      worst_op = std::max(worst_op, g.rel_error);
      r.require(g.rel_error < mucp::testing::kOpTolerance, std::string(c.name) + " point " + std::to_string(p));
    }
  double worst_moe = 0;
  for (bool normalize : {false, true}) {
    const auto checks = mucp::testing::moe_gradient_checks(mucp::testing::kGradPoints, normalize);
    r.require(static_cast<int>(checks.size()) == mucp::testing::kGradPoints, "too few tie-free MoE points");
    for (const auto& g : checks) {
      worst_moe = std::max(worst_moe, g.rel_error);
      r.require(g.rel_error < mucp::testing::kMoETolerance, "MoE end-to-end");
    }
  }
  r.note(std::to_string(mucp::testing::op_cases().size()) + " ops" + fmt(", worst op %.1e, worst MoE %.1e", worst_op, worst_moe));
  return r;
}

RoutingOutcome outcome_with(const std::vector<int>& topk, const Tensor& probs, int k, std::int64_t capacity) {
  auto o = assign_tokens(topk, probs, k, capacity);
  o.gate_probs = probs;
  o.gate_logits = Tensor(probs.shape());
  return o;
}

Outcome aux_closed_forms() {
  Outcome r;
  const float alpha = 0.01f, beta = 0.001f;
  const int s = 1024, e = 8;
  std::vector<int> topk;
  for (int j = 0; j < s; ++j) {
    topk.push_back((2 * j) % e);
    topk.push_back((2 * j + 1) % e);
  }
  const double uniform = load_balance_loss(outcome_with(topk, Tensor({s, e}, 1.0f / e), 2, s), alpha);
  r.require(std::abs(uniform - alpha) <= 1e-9, "uniform balance loss");

  Tensor logits({s, e});
  for (int j = 0; j < s; ++j) logits.at(j, 0) = 30.0f;
  Graph g;
  const Tensor probs = softmax(g.constant(logits), 1).value();
  const double collapsed = load_balance_loss(outcome_with(std::vector<int>(s, 0), probs, 1, s), alpha);
  r.require(std::abs(collapsed - alpha * e) <= 0.01 * alpha * e, "collapsed balance loss");

  const double z = router_z_loss(Tensor({s, e}), beta);
  const double z_expected = beta * std::pow(std::log(8.0), 2);
  r.require(std::abs(z - z_expected) <= 1e-6, "router z-loss");
  r.note(fmt("uniform %.6f, collapsed %.6f, z %.8f (expected %.8f)", uniform, collapsed, z, z_expected));
  return r;
}

Outcome capacity_laws() {
  Outcome r;
  SynthSpec s;
  s.train_size = 50 * 16;
  s.val_size = 16;
  const auto data = make_synth_dataset(s);
  std::int64_t total_drops = 0;
  for (int b = 0; b < 50; ++b) {
    const Batch batch = make_batch(data.train, b * 16, (b + 1) * 16);
    std::map<Modality, std::int64_t> previous{{Modality::image, -1}, {Modality::text, -1}};
    for (double c : {4.0, 2.0, 1.0, 0.5, 0.25}) {
      ModelSpec spec = tiny_spec();
      spec.moe = MoESpec{};
      spec.moe->capacity_image = spec.moe->capacity_text = c;
      const Checkpoint model = init_checkpoint(spec, static_cast<std::uint64_t>(b));
      Graph g;
      g.set_grad_enabled(false);
      ParamStore params = model.params;
      ParamBinding bind(g, params);
      for (Modality m : {Modality::image, Modality::text}) {
        const auto enc = encode(bind, spec, batch, m);
        std::int64_t drops = 0;
        for (const auto& layer : enc.routing) {
          const auto& o = layer.outcome;
          std::int64_t assigned = 0;
          for (int e = 0; e < spec.moe->num_experts; ++e) assigned += o.assigned_count(e);
          if (assigned + o.total_dropped() != o.num_tokens() * spec.moe->top_k) {
            r.require(false, "accounting identity");
          }
          for (std::int64_t j = 0; j < o.num_tokens(); ++j)
            if (static_cast<int>(o.selected(j).size()) + o.dropped[static_cast<std::size_t>(j)] != spec.moe->top_k)
              r.require(false, "per-token accounting");
          drops += o.total_dropped();
        }
        if (drops < previous[m]) r.require(false, "drops decreased as capacity shrank, batch " + std::to_string(b));
        previous[m] = drops;
        total_drops += drops;
        if (m != Modality::image) continue;
        std::int64_t fully = 0;
        for (std::int64_t j = 0; j < enc.routing[0].outcome.num_tokens(); ++j)
          fully += enc.routing[0].outcome.fully_dropped(j);
        std::int64_t cells = 0;
        for (const auto& map : render_drop_maps(model, batch.images, 1))
          cells += map.count() + (map.class_token_dropped ? 1 : 0);
        if (cells != fully) r.require(false, "DropMap count differs from routing outcome");
      }
    }
  }
  r.note("50 batches x 5 capacities, " + std::to_string(total_drops) + " drops");
  return r;
}

struct Recall {
  double i2t = 0, t2i = 0, zero_shot = 0;
};

Recall recall_of(const Checkpoint& model, const SynthData& data, const SynthSpec& synth) {
  const auto rep = evaluate(model, data.val, synth);
  return {rep.i2t_r1, rep.t2i_r1, rep.zero_shot.top1};
}

Checkpoint train(Checkpoint model, const Dataset& data, TrainConfig cfg, Regime regime, std::uint64_t seed) {
  cfg.regime = regime;
  cfg.seed = seed;
  return train_run(std::move(model), data, cfg).final;
}

Outcome training_pipeline() {
  Outcome r;
  const auto cpu_start = std::clock();
  const ExperimentConfig c;
  const auto data = make_synth_dataset(c.data);
  const double chance = 1.0 / static_cast<double>(data.val.size);
  TrainConfig scratch_cfg = c.train;
  scratch_cfg.steps = c.train.steps + c.finetune.steps;
  int upcycle_wins = 0;
  double up_i2t = 0, up_t2i = 0, scratch_i2t = 0, scratch_t2i = 0;
  for (std::uint64_t seed : {0, 1, 2}) {
    const Checkpoint dense = train(init_checkpoint(c.model, seed), data.train, c.train, Regime::dense, seed);
    const Recall rd = recall_of(dense, data, c.data);
    r.require(rd.i2t >= 5 * chance && rd.t2i >= 5 * chance, "seed " + std::to_string(seed) + " dense below 5x chance");

    const Recall rc = recall_of(train(dense, data.train, c.finetune, Regime::dense, seed), data, c.data);
    const auto up = upcycle_checkpoint(dense, c.moe, c.model.moe_modality, seed);
    const Recall ru = recall_of(train(up.sparse, data.train, c.finetune, Regime::upcycle, seed), data, c.data);
    const Recall rs = recall_of(train(init_checkpoint(c.sparse_model(), seed), data.train, scratch_cfg,
                                      Regime::sparse_scratch, seed),
                                data, c.data);
    upcycle_wins += ru.t2i >= rc.t2i;
    up_i2t += ru.i2t / 3;
    up_t2i += ru.t2i / 3;
    scratch_i2t += rs.i2t / 3;
    scratch_t2i += rs.t2i / 3;
    std::printf("  seed %d: dense i2t %.4f t2i %.4f | dense+ t2i %.4f | upcycled i2t %.4f t2i %.4f | scratch i2t %.4f t2i %.4f\n",
                static_cast<int>(seed), rd.i2t, rd.t2i, rc.t2i, ru.i2t, ru.t2i, rs.i2t, rs.t2i);
    std::fflush(stdout);
  }
  r.require(upcycle_wins >= 2, "upcycled beats continued dense on fewer than 2 seeds");
  r.require(scratch_i2t <= up_i2t + 0.02 && scratch_t2i <= up_t2i + 0.02, "scratch exceeds upcycled mean by > 0.02");
  const double cpu_min = static_cast<double>(std::clock() - cpu_start) / CLOCKS_PER_SEC / 60.0;
  r.require(cpu_min < 30.0, "over 30 CPU-minutes");
  r.note(fmt("upcycle wins %.0f/3, mean R@1 upcycled %.4f/%.4f scratch %.4f", upcycle_wins, up_i2t, up_t2i, scratch_i2t) +
         fmt("/%.4f, %.1f CPU-min", scratch_t2i, cpu_min));
  return r;
}

bool complete_log(const std::vector<MetricsRow>& log, std::int64_t steps) {
  if (static_cast<std::int64_t>(log.size()) != steps) return false;
  for (std::int64_t i = 0; i < steps; ++i) {
    const auto& row = log[static_cast<std::size_t>(i)];
    if (row.step != i || !std::isfinite(row.total_loss) || !std::isfinite(row.contrastive_loss) ||
        !std::isfinite(row.aux_loss))
      return false;
  }
  return true;
}

Outcome recipe_grid() {
  Outcome r;
  ExperimentConfig c;
  c.data.train_size = 1024;
  const auto data = make_synth_dataset(c.data);
  TrainConfig cfg = c.train;
  cfg.steps = 200;
  cfg.warmup_steps = 20;
  TrainConfig ft = c.finetune;
  ft.steps = 200;
  ft.warmup_steps = 20;
  for (Backbone b : {Backbone::shared, Backbone::separated}) {
    c.model.backbone = b;
    const std::string name = to_string(b);
    try {
      cfg.regime = Regime::sparse_scratch;
      const auto scratch = train_run(init_checkpoint(c.sparse_model(), 0), data.train, cfg);
      r.require(complete_log(scratch.log, cfg.steps), name + "/scratch log incomplete");

      cfg.regime = Regime::dense;
      const auto dense = train_run(init_checkpoint(c.model, 0), data.train, cfg);
      ft.regime = Regime::upcycle;
      const auto up = upcycle_checkpoint(dense.final, c.moe, c.model.moe_modality, 0);
      const auto sparse = train_run(up.sparse, data.train, ft);
      r.require(complete_log(sparse.log, ft.steps), name + "/upcycle log incomplete");
      r.note(name + fmt(" scratch loss %.3f, upcycle loss %.3f", scratch.log.back().total_loss,
                        sparse.log.back().total_loss));
    } catch (const std::exception& e) {
      r.require(false, name + ": " + e.what());
    }
  }
  return r;
}

Outcome router_analytics() {
  Outcome r;
  SynthSpec s;
  s.train_size = 2560;
  s.val_size = 16;
  const auto data = make_synth_dataset(s);
  ModelSpec spec = tiny_spec();
  spec.moe = MoESpec{};
  Checkpoint model = init_checkpoint(spec, 2);
  for (auto& [name, t] : model.params)
    if (name.find(".moe.router.w") != std::string::npos) std::fill(t.data().begin(), t.data().end(), 0.0f);
  RoutingOptions opts;
  opts.logit_jitter = 1.0f;
  opts.jitter_seed = 17;
  const auto trace = collect_router_trace(model, data.train, 64, opts);
  double worst = 0;
  for (Modality m : {Modality::image, Modality::text})
    r.require(trace.tokens(m) >= 10000, to_string(m) + " saw fewer than 10k tokens");
  for (const auto& l : trace.layers())
    for (int e = 0; e < spec.moe->num_experts; ++e)
      worst = std::max(worst, std::abs(RouterTrace::assign_ratio(l, e) - 1.0 / spec.moe->num_experts));
  r.require(worst <= 0.05, "assignment ratio outside 1/E +- 0.05");

  std::map<std::pair<std::string, int>, std::int64_t> slots;
  std::istringstream csv(trace.to_csv());
  std::string line;
  std::getline(csv, line);
  while (std::getline(csv, line)) {
    std::istringstream fields(line);
    std::string modality, layer, expert, assigned, dropped;
    std::getline(fields, modality, ',');
    std::getline(fields, layer, ',');
    std::getline(fields, expert, ',');
    std::getline(fields, assigned, ',');
    std::getline(fields, dropped, ',');
    slots[{modality, std::stoi(layer)}] += std::stoll(assigned) + std::stoll(dropped);
  }
  r.require(slots.size() == trace.layers().size(), "CSV layer count");
  for (const auto& l : trace.layers())
    r.require(slots[{to_string(l.modality), l.layer}] == l.tokens * l.top_k, "CSV conservation");
  r.require(trace.conserved(), "trace conservation");
  r.note(fmt("%.0f image / %.0f text tokens, max |ratio - 1/E| %.4f", static_cast<double>(trace.tokens(Modality::image)),
             static_cast<double>(trace.tokens(Modality::text)), worst));
  return r;
}

std::string run_log(const Checkpoint& start, const Dataset& data, const TrainConfig& cfg, Checkpoint& final) {
  std::string log = metrics_header() + "\n";
  TrainHooks hooks;
  hooks.on_metrics = [&](const MetricsRow& row) { log += format_metrics(row) + "\n"; };
  final = train_run(start, data, cfg, hooks).final;
  return log;
}

Outcome reproducibility() {
  Outcome r;
  ExperimentConfig c;
  c.data.train_size = 512;
  const auto data = make_synth_dataset(c.data);
  TrainConfig cfg = c.train;
  cfg.steps = 60;
  cfg.warmup_steps = 10;
  cfg.seed = 5;
  const Checkpoint start = upcycle_checkpoint(init_checkpoint(c.model, 5), c.moe, c.model.moe_modality, 5).sparse;
  cfg.regime = Regime::upcycle;
  Checkpoint a, b;
  const std::string log_a = run_log(start, data.train, cfg, a);
  const std::string log_b = run_log(start, data.train, cfg, b);
  r.require(log_a == log_b, "metrics logs differ");
  const auto bytes_a = serialize_checkpoint(a);
  r.require(bytes_a == serialize_checkpoint(b), "checkpoints differ");

  const auto path = std::filesystem::temp_directory_path() / "mucp_acceptance_roundtrip.ckpt";
  save_checkpoint(a, path);
  std::ifstream in(path, std::ios::binary);
  const std::vector<std::uint8_t> file((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto reloaded = serialize_checkpoint(load_checkpoint(path));
  std::filesystem::remove(path);
  r.require(file == bytes_a, "saved file differs from serialization");
  r.require(reloaded == bytes_a, "save/load round trip not byte-identical");
  r.note(std::to_string(bytes_a.size()) + " checkpoint bytes, " + std::to_string(log_a.size()) + " log bytes");
  return r;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"FLOPs reproduction", flops_table},
      {"upcycle forward-equivalence", upcycle_equivalence},
      {"gradient integrity", gradient_integrity},
      {"auxiliary-loss closed forms", aux_closed_forms},
      {"capacity and dropping laws", capacity_laws},
      {"desk-scale training pipeline", training_pipeline},
      {"recipe grid smoke", recipe_grid},
      {"router analytics", router_analytics},
      {"reproducibility", reproducibility},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.require(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failures += !o.pass;
    std::printf("%s criterion %d: %s (%s) [%.1fs]\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first, o.detail.c_str(),
                secs);
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
