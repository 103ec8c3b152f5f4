#include "mucp/config.hpp"
#include "mucp/errors.hpp"
#include "mucp/eval.hpp"
#include "mucp/upcycle.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace mucp;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string checkpoint;
  bool verify = false;
  std::string modality;
  std::optional<double> capacity_image, capacity_text;
  std::string normalize_after;
};

ExperimentConfig resolve(const Options& o) {
  ExperimentConfig c = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
  if (o.seed) c.train.seed = c.finetune.seed = *o.seed;
  if (!o.out.empty()) c.output_dir = o.out;
  if (o.capacity_image) c.moe.capacity_image = *o.capacity_image;
  if (o.capacity_text) c.moe.capacity_text = *o.capacity_text;
  if (!o.normalize_after.empty()) c.moe.normalize_gates_after_routing = parse_bool("--normalize-after", o.normalize_after);
  if (!o.modality.empty()) c.model.moe_modality = parse_moe_modality(o.modality);
  validate(c);
  fs::create_directories(c.output_dir);
  return c;
}

int threads_from_env() {
  const char* v = std::getenv("MUCP_THREADS");
  if (!v || !*v) return 1;
  return std::max(1, static_cast<int>(parse_int("MUCP_THREADS", v)));
}

Checkpoint require_checkpoint(const Options& o) {
  if (o.checkpoint.empty()) throw FormatError("--checkpoint is required for this command");
  return load_checkpoint(o.checkpoint);
}

/// Applies command-line MoE overrides to a loaded sparse checkpoint's spec.
void override_moe(Checkpoint& ckpt, const Options& o) {
  if (!ckpt.spec.moe) return;
  if (o.capacity_image) ckpt.spec.moe->capacity_image = *o.capacity_image;
  if (o.capacity_text) ckpt.spec.moe->capacity_text = *o.capacity_text;
  if (!o.normalize_after.empty())
    ckpt.spec.moe->normalize_gates_after_routing = parse_bool("--normalize-after", o.normalize_after);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
}

Checkpoint run_training(const ExperimentConfig& c, Checkpoint model, const Dataset& train, TrainConfig tc, Regime regime,
                        const std::string& tag) {
  tc.regime = regime;
  const fs::path dir = c.output_dir;
  std::ofstream log(dir / ("metrics_" + tag + ".csv"), std::ios::trunc);
  if (!log) throw std::runtime_error("cannot write metrics log in '" + dir.string() + "'");
  log << metrics_header() << '\n';
  TrainHooks hooks;
  hooks.threads = threads_from_env();
  hooks.on_metrics = [&](const MetricsRow& r) {
    log << format_metrics(r) << '\n';
    if ((r.step + 1) % 100 == 0 || r.step + 1 == tc.steps)
      std::cout << tag << " step " << r.step + 1 << "/" << tc.steps << " loss " << r.total_loss << '\n' << std::flush;
  };
  hooks.on_checkpoint = [&](const Checkpoint& ck) {
    save_checkpoint(ck, dir / (tag + "_step" + std::to_string(ck.step) + ".ckpt"));
  };
  auto result = train_run(std::move(model), train, tc, hooks);
  log.flush();
  return std::move(result.final);
}

int cmd_train_dense(const Options& o) {
  const auto c = resolve(o);
  const auto data = make_synth_dataset(c.data);
  const fs::path dir = c.output_dir;
  if (o.checkpoint.empty()) {
    auto model = run_training(c, init_checkpoint(c.model, c.train.seed), data.train, c.train, Regime::dense, "dense");
    save_checkpoint(model, dir / "dense_final.ckpt");
    std::cout << "wrote " << (dir / "dense_final.ckpt").string() << '\n';
  } else {
    auto model = run_training(c, require_checkpoint(o), data.train, c.finetune, Regime::dense, "dense_continued");
    save_checkpoint(model, dir / "dense_continued.ckpt");
    std::cout << "wrote " << (dir / "dense_continued.ckpt").string() << '\n';
  }
  return 0;
}

int cmd_upcycle(const Options& o) {
  const auto c = resolve(o);
  const auto dense = require_checkpoint(o);
  auto result = upcycle_checkpoint(dense, c.moe, c.model.moe_modality, c.train.seed);
  const fs::path dir = c.output_dir;
  save_checkpoint(result.sparse, dir / "upcycled.ckpt");
  std::string report = result.report.to_text();
  report += std::string("identity_holds: ") + (result.report.identity_holds(result.sparse.spec) ? "true" : "false") + "\n";
  if (o.verify) {
    SynthSpec probe = c.data;
    probe.val_size = 16;
    probe.train_size = 1;
    const auto data = make_synth_dataset(probe);
    const auto eq = verify_equivalence(dense, result.sparse, make_batch(data.val, 0, data.val.size));
    char buf[96];
    std::snprintf(buf, sizeof buf, "verify_max_abs_deviation: %.3e\n", eq.max_abs_deviation);
    report += buf;
    report += std::string("verify_passed: ") + (eq.max_abs_deviation < 1e-5 ? "true" : "false") + "\n";
  }
  write_text(dir / "surgery_report.txt", report);
  std::cout << report << "wrote " << (dir / "upcycled.ckpt").string() << '\n';
  return 0;
}

int cmd_train_sparse(const Options& o) {
  const auto c = resolve(o);
  const auto data = make_synth_dataset(c.data);
  const fs::path dir = c.output_dir;
  if (o.checkpoint.empty()) {
    auto model = run_training(c, init_checkpoint(c.sparse_model(), c.train.seed), data.train, c.train,
                              Regime::sparse_scratch, "sparse_scratch");
    save_checkpoint(model, dir / "sparse_scratch_final.ckpt");
    std::cout << "wrote " << (dir / "sparse_scratch_final.ckpt").string() << '\n';
  } else {
    auto start = require_checkpoint(o);
    override_moe(start, o);
    auto model = run_training(c, std::move(start), data.train, c.finetune, Regime::upcycle, "upcycle");
    save_checkpoint(model, dir / "upcycled_final.ckpt");
    std::cout << "wrote " << (dir / "upcycled_final.ckpt").string() << '\n';
  }
  return 0;
}

int cmd_eval(const Options& o) {
  const auto c = resolve(o);
  auto model = require_checkpoint(o);
  override_moe(model, o);
  SynthSpec synth = c.data;
  synth.train_size = 1;
  const auto data = make_synth_dataset(synth);
  const auto report = evaluate(model, data.val, synth);
  char chance[64];
  std::snprintf(chance, sizeof chance, "chance_recall@1: %.6f\n", 1.0 / static_cast<double>(data.val.size));
  const std::string text = report.to_text() + chance;
  write_text(fs::path(c.output_dir) / "eval.txt", text);
  std::cout << text;
  return 0;
}

std::optional<ModelSpec> named_config(const std::string& name) {
  for (const char* base : {"b32", "b16", "l14"}) {
    if (name == std::string(base) + "-dense") return clip_preset(base, false);
    if (name == std::string(base) + "-up") return clip_preset(base, true);
  }
  if (name == "tiny-dense") return tiny_spec();
  if (name == "tiny-up") {
    auto s = tiny_spec();
    s.moe = MoESpec{};
    return s;
  }
  return std::nullopt;
}

int cmd_flops(const Options& o) {
  std::vector<CostReport> rows;
  std::string out_dir = o.out.empty() ? "out" : o.out;
  if (o.config.empty()) {
    for (const char* n : {"b32-dense", "b32-up", "b16-dense", "b16-up", "l14-dense", "l14-up"})
      rows.push_back(flops_estimate(*named_config(n), n));
  } else if (auto spec = named_config(o.config)) {
    rows.push_back(flops_estimate(*spec, o.config));
  } else {
    const auto c = load_config(o.config);
    if (o.out.empty()) out_dir = c.output_dir;
    rows.push_back(flops_estimate(c.configured_model(), fs::path(o.config).stem().string()));
  }
  fs::create_directories(out_dir);
  std::string csv = cost_csv_header() + "\n";
  for (const auto& r : rows) csv += cost_csv_row(r) + "\n";
  write_text(fs::path(out_dir) / "cost.csv", csv);
  std::cout << csv;
  return 0;
}

int cmd_analyze_router(const Options& o) {
  const auto c = resolve(o);
  auto model = require_checkpoint(o);
  override_moe(model, o);
  SynthSpec synth = c.data;
  synth.train_size = 1;
  const auto data = make_synth_dataset(synth);
  const auto trace = collect_router_trace(model, data.val);
  const fs::path dir = c.output_dir;
  write_text(dir / "router_trace.csv", trace.to_csv());
  std::cout << "trace conservation: " << (trace.conserved() ? "ok" : "VIOLATED") << '\n';
  const std::int64_t shown = std::min<std::int64_t>(4, data.val.size);
  const Batch batch = make_batch(data.val, 0, shown);
  for (int layer : moe_layers(model.spec, Modality::image)) {
    const auto maps = render_drop_maps(model, batch.images, layer);
    for (std::size_t i = 0; i < maps.size(); ++i) {
      const auto stem = "dropmap_layer" + std::to_string(layer) + "_img" + std::to_string(i);
      write_drop_map_ppm(dir / (stem + ".ppm"), batch.images, static_cast<std::int64_t>(i), maps[i],
                         model.spec.patch_size);
      write_text(dir / (stem + ".txt"), maps[i].to_text());
      std::cout << stem << ": " << maps[i].count() << " dropped patches\n";
    }
  }
  std::cout << "wrote " << (dir / "router_trace.csv").string() << '\n';
  return trace.conserved() ? 0 : kExitNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse-upcycled mixture-of-experts CLIP toolkit"};
  app.require_subcommand(1);
  Options o;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "Experiment config file");
    sub->add_option("--seed", o.seed, "Seed overriding the config");
    sub->add_option("--out", o.out, "Output directory");
  };
  auto moe_flags = [&](CLI::App* sub) {
    sub->add_option("--capacity-image", o.capacity_image, "Image capacity factor");
    sub->add_option("--capacity-text", o.capacity_text, "Text capacity factor");
    sub->add_option("--normalize-after", o.normalize_after, "Renormalize surviving gates (on|off)")
        ->check(CLI::IsMember({"on", "off"}));
  };

  auto* dense = app.add_subcommand("train-dense", "Train a dense model (or continue one with --checkpoint)");
  common(dense);
  dense->add_option("--checkpoint", o.checkpoint, "Dense checkpoint to continue");

  auto* up = app.add_subcommand("upcycle", "Convert a dense checkpoint into an MoE checkpoint");
  common(up);
  moe_flags(up);
  up->add_option("--checkpoint", o.checkpoint, "Dense checkpoint")->required();
  up->add_flag("--verify", o.verify, "Check forward equivalence after surgery");
  up->add_option("--modality", o.modality, "Towers to convert")->check(CLI::IsMember({"image", "text", "both"}));

  auto* sparse = app.add_subcommand("train-sparse", "Train an upcycled checkpoint, or an MoE model from scratch");
  common(sparse);
  moe_flags(sparse);
  sparse->add_option("--checkpoint", o.checkpoint, "Upcycled checkpoint");
  sparse->add_option("--modality", o.modality, "Towers with MoE (scratch only)")
      ->check(CLI::IsMember({"image", "text", "both"}));

  auto* ev = app.add_subcommand("eval", "Retrieval and zero-shot accuracy on the validation split");
  common(ev);
  moe_flags(ev);
  ev->add_option("--checkpoint", o.checkpoint, "Checkpoint to evaluate")->required();

  auto* fl = app.add_subcommand("flops", "Inference cost report");
  fl->add_option("--config", o.config, "Named config (b32|b16|l14 with -dense|-up, tiny-dense|tiny-up) or file");
  fl->add_option("--out", o.out, "Output directory");

  auto* ar = app.add_subcommand("analyze-router", "Router trace CSV and drop maps");
  common(ar);
  moe_flags(ar);
  ar->add_option("--checkpoint", o.checkpoint, "MoE checkpoint")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*dense) return cmd_train_dense(o);
    if (*up) return cmd_upcycle(o);
    if (*sparse) return cmd_train_sparse(o);
    if (*ev) return cmd_eval(o);
    if (*fl) return cmd_flops(o);
    if (*ar) return cmd_analyze_router(o);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}
