#pragma once

#include "mucp/data.hpp"
#include "mucp/spec.hpp"
#include "mucp/spec_io.hpp"
#include "mucp/trainer.hpp"

#include <filesystem>
#include <string>

namespace mucp {

/// Everything one experiment needs. Defaults are the tiny recipe.
struct ExperimentConfig {
  ModelSpec model = tiny_spec();  // dense; `moe` below is attached by sparse regimes
  MoESpec moe;
  bool moe_enabled = false;
  TrainConfig train;
  TrainConfig finetune;  // continued training after upcycling or for the dense baseline
  SynthSpec data;
  std::string output_dir = "out";

  ExperimentConfig();

  /// `model` with the MoE block attached.
  ModelSpec sparse_model() const;
  /// `model` with MoE attached only when moe.enabled is set.
  ModelSpec configured_model() const;
};

/// Parses flat `section.key = value` lines; '#' starts a comment. Unknown keys
/// and malformed values throw FormatError naming the line and field.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Every key with its current value, in parse_config syntax.
std::string format_config(const ExperimentConfig& config);

/// Throws ContractError when the parts are mutually inconsistent.
void validate(const ExperimentConfig& config);

}  // namespace mucp
