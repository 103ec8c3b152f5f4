#pragma once

#include "mucp/spec.hpp"
#include "mucp/tensor.hpp"

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace mucp {

struct ParamInfo {
  std::string name;
  Shape shape;
};

/// Name-ordered parameter container. Insertion order is the canonical order
/// used by checkpoints; add() may invalidate references to earlier entries.
class ParamStore {
 public:
  Tensor& add(std::string name, Tensor value);
  Tensor& at(std::string_view name);
  const Tensor& at(std::string_view name) const;
  bool contains(std::string_view name) const;

  std::size_t size() const { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  std::int64_t total_elements() const;
  void set_requires_grad(bool on);
  void zero_grad();

  friend bool operator==(const ParamStore& a, const ParamStore& b);

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Name prefix of the block stack serving modality `m` ("image.blocks", "text.blocks" or "trunk.blocks").
std::string blocks_prefix(const ModelSpec& spec, Modality m);
std::string block_name(const ModelSpec& spec, Modality m, int layer);

/// Every parameter of `spec` in canonical order.
std::vector<ParamInfo> parameter_layout(const ModelSpec& spec);
std::int64_t parameter_count(const ModelSpec& spec);
/// Parameters of one dense MLP block: fc1 (D×H + H) and fc2 (H×D + D).
std::int64_t mlp_parameter_count(const TowerSpec& tower);

/// Fresh parameters: N(0, 0.02) weights, zero biases, unit layer-norm gains,
/// logit scale ln(1/temperature_init). Deterministic in `seed`.
ParamStore init_params(const ModelSpec& spec, std::uint64_t seed);

/// Throws ContractError listing names missing from or unexpected in `store`.
void check_layout(const ModelSpec& spec, const ParamStore& store);

}  // namespace mucp
