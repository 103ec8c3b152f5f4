#include "mucp/config.hpp"

#include "mucp/errors.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace mucp {

ExperimentConfig::ExperimentConfig() {
  finetune.steps = 1000;
  finetune.peak_lr = train.peak_lr / 10.0f;
  finetune.weight_decay = train.weight_decay / 4.0f;
}

ModelSpec ExperimentConfig::sparse_model() const {
  ModelSpec s = model;
  s.moe = moe;
  return s;
}

ModelSpec ExperimentConfig::configured_model() const { return moe_enabled ? sparse_model() : model; }

namespace {

using Setter = std::function<void(ExperimentConfig&, const std::string&, const std::string&)>;
using Getter = std::function<std::string(const ExperimentConfig&)>;

struct Key {
  Getter get;
  Setter set;
};

void add_train_keys(std::map<std::string, Key>& keys, const std::string& section, TrainConfig ExperimentConfig::*tc) {
  auto f = [&](const std::string& name, auto member) {
    using T = std::remove_reference_t<decltype(std::declval<TrainConfig&>().*member)>;
    keys[section + "." + name] = {
        [tc, member](const ExperimentConfig& c) {
          const T& v = (c.*tc).*member;
          if constexpr (std::is_same_v<T, float>) return format_float(v);
          else return std::to_string(v);
        },
        [tc, member](ExperimentConfig& c, const std::string& k, const std::string& v) {
          T& dst = (c.*tc).*member;
          if constexpr (std::is_same_v<T, float>) dst = parse_float(k, v);
          else dst = static_cast<T>(parse_int(k, v));
        }};
  };
  f("steps", &TrainConfig::steps);
  f("batch_size", &TrainConfig::batch_size);
  f("peak_lr", &TrainConfig::peak_lr);
  f("warmup_steps", &TrainConfig::warmup_steps);
  f("weight_decay", &TrainConfig::weight_decay);
  f("adam_beta1", &TrainConfig::adam_beta1);
  f("adam_beta2", &TrainConfig::adam_beta2);
  f("adam_eps", &TrainConfig::adam_eps);
  f("grad_clip", &TrainConfig::grad_clip);
  f("checkpoint_every", &TrainConfig::checkpoint_every);
}

const std::map<std::string, Key>& keys() {
  static const std::map<std::string, Key> table = [] {
    std::map<std::string, Key> k;
    add_train_keys(k, "train", &ExperimentConfig::train);
    add_train_keys(k, "finetune", &ExperimentConfig::finetune);
    k["seed"] = {[](const ExperimentConfig& c) { return std::to_string(c.train.seed); },
                 [](ExperimentConfig& c, const std::string& key, const std::string& v) {
                   c.train.seed = c.finetune.seed = parse_uint(key, v);
                 }};
    k["output_dir"] = {[](const ExperimentConfig& c) { return c.output_dir; },
                       [](ExperimentConfig& c, const std::string&, const std::string& v) { c.output_dir = v; }};
    auto data_int = [&](const std::string& name, int SynthSpec::*m) {
      k["data." + name] = {[m](const ExperimentConfig& c) { return std::to_string(c.data.*m); },
                           [m](ExperimentConfig& c, const std::string& key, const std::string& v) {
                             c.data.*m = static_cast<int>(parse_int(key, v));
                           }};
    };
    data_int("num_shapes", &SynthSpec::num_shapes);
    data_int("num_colors", &SynthSpec::num_colors);
    data_int("grid", &SynthSpec::grid);
    auto data_i64 = [&](const std::string& name, std::int64_t SynthSpec::*m) {
      k["data." + name] = {[m](const ExperimentConfig& c) { return std::to_string(c.data.*m); },
                           [m](ExperimentConfig& c, const std::string& key, const std::string& v) {
                             c.data.*m = parse_int(key, v);
                           }};
    };
    data_i64("train_size", &SynthSpec::train_size);
    data_i64("val_size", &SynthSpec::val_size);
    k["data.seed"] = {[](const ExperimentConfig& c) { return std::to_string(c.data.seed); },
                      [](ExperimentConfig& c, const std::string& key, const std::string& v) {
                        c.data.seed = parse_uint(key, v);
                      }};
    k["data.noise"] = {[](const ExperimentConfig& c) { return format_float(c.data.noise); },
                       [](ExperimentConfig& c, const std::string& key, const std::string& v) {
                         c.data.noise = parse_float(key, v);
                       }};
    return k;
  }();
  return table;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

void sync_derived(ExperimentConfig& c) {
  c.model.image_tower.max_tokens = c.model.image_tokens();
  c.data.image_size = c.model.image_size;
  c.data.channels = c.model.channels;
  c.data.seq_len = c.model.text_tower.max_tokens;
}

}  // namespace

ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig c;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("line " + std::to_string(lineno) + ": expected 'key = value'");
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    try {
      if (apply_spec_entry(c.model, c.moe, c.moe_enabled, key, value)) continue;
      auto it = keys().find(key);
      if (it == keys().end()) throw FormatError("unknown key '" + key + "'");
      it->second.set(c, key, value);
    } catch (const FormatError& e) {
      throw FormatError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  sync_derived(c);
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read config file '" + path.string() + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

std::string format_config(const ExperimentConfig& c) {
  std::string out;
  ModelSpec with_moe = c.model;
  if (c.moe_enabled) with_moe.moe = c.moe;
  else with_moe.moe.reset();
  for (const auto& [k, v] : spec_entries(with_moe)) {
    if (k.rfind("moe.", 0) == 0 && k != "moe.enabled") {
      // MoE fields are emitted from the config's own MoESpec so they survive while disabled.
      continue;
    }
    out += k + " = " + v + "\n";
  }
  ModelSpec moe_view = c.model;
  moe_view.moe = c.moe;
  for (const auto& [k, v] : spec_entries(moe_view))
    if (k.rfind("moe.", 0) == 0 && k != "moe.enabled") out += k + " = " + v + "\n";
  for (const auto& [k, key] : keys()) out += k + " = " + key.get(c) + "\n";
  return out;
}

void validate(const ExperimentConfig& c) {
  validate(c.model);
  validate(c.sparse_model());
  validate(c.train);
  validate(c.finetune);
  if (c.data.vocab_needed() > c.model.vocab_size)
    throw ContractError("config: captions need " + std::to_string(c.data.vocab_needed()) +
                        " vocabulary entries but model.vocab_size is " + std::to_string(c.model.vocab_size));
  if (c.train.batch_size > c.data.train_size || c.finetune.batch_size > c.data.train_size)
    throw ContractError("config: batch_size exceeds data.train_size");
  if (c.output_dir.empty()) throw ContractError("config: output_dir must not be empty");
}

}  // namespace mucp
