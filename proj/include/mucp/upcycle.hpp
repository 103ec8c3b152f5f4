#pragma once

#include "mucp/checkpoint.hpp"
#include "mucp/encoder.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace mucp {

struct ConvertedLayer {
  std::string tower;  // "image", "text" or "trunk"
  int layer = 0;

  friend bool operator==(const ConvertedLayer&, const ConvertedLayer&) = default;
};

struct SurgeryReport {
  std::vector<ConvertedLayer> converted_layers;
  std::int64_t copied_params = 0;  // expert elements cloned from dense MLPs
  std::int64_t fresh_params = 0;   // router elements drawn at random
  std::int64_t total_params_dense = 0;
  std::int64_t total_params_sparse = 0;

  /// sparse == dense + (E-1)·mlp·|converted| + routers, evaluated per tower width.
  bool identity_holds(const ModelSpec& sparse_spec) const;
  /// Human-readable key: value lines.
  std::string to_text() const;
};

struct UpcycleResult {
  Checkpoint sparse;
  SurgeryReport report;
};

/// Replaces the MLP of every alternating sparse layer with E byte-identical
/// expert copies and a N(0, 0.02) router drawn from `seed`; all other
/// parameters are copied unchanged. `moe_modality` picks the towers converted.
UpcycleResult upcycle_checkpoint(const Checkpoint& dense, const MoESpec& moe, MoEModality moe_modality,
                                 std::uint64_t seed);

struct EquivalenceReport {
  double max_abs_deviation = 0.0;
  std::int64_t dropped = 0;
};

/// Runs the dense and sparse models on `batch` and compares embeddings of
/// both modalities. Capacity is raised so no token is dropped; gate
/// normalization after routing is forced to `normalize_after`. With
/// `require_no_drops`, any drop throws ContractError.
EquivalenceReport verify_equivalence(const Checkpoint& dense, const Checkpoint& sparse, const Batch& batch,
                                     bool normalize_after = true, bool require_no_drops = true);

}  // namespace mucp
