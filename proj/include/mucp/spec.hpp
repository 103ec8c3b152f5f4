#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace mucp {

enum class Backbone { separated, shared };
enum class Modality { image, text };
enum class MoEModality { image, text, both };
enum class Placement { alternating_dense_sparse };

std::string to_string(Backbone b);
std::string to_string(Modality m);
std::string to_string(MoEModality m);
std::string to_string(Placement p);
Backbone parse_backbone(const std::string& s);
MoEModality parse_moe_modality(const std::string& s);
Placement parse_placement(const std::string& s);

struct TowerSpec {
  int num_layers = 2;
  int model_dim = 64;
  int num_heads = 4;
  int mlp_hidden_dim = 256;
  int max_tokens = 16;  // text sequence length; image towers derive theirs from the patch grid

  friend bool operator==(const TowerSpec&, const TowerSpec&) = default;
};

struct MoESpec {
  int num_experts = 8;
  int top_k = 2;
  double capacity_image = 2.0;
  double capacity_text = 2.0;
  float balance_weight = 0.01f;
  float router_z_weight = 0.001f;
  bool normalize_gates_after_routing = false;
  Placement placement = Placement::alternating_dense_sparse;

  double capacity_for(Modality m) const { return m == Modality::image ? capacity_image : capacity_text; }

  friend bool operator==(const MoESpec&, const MoESpec&) = default;
};

/// Full architecture: the single source for building, upcycling and costing.
struct ModelSpec {
  Backbone backbone = Backbone::separated;
  TowerSpec image_tower;
  TowerSpec text_tower;  // blocks ignored in shared mode; max_tokens still applies
  int patch_size = 8;
  int image_size = 32;
  int channels = 3;
  int vocab_size = 64;
  int embed_dim = 32;
  std::optional<MoESpec> moe;
  MoEModality moe_modality = MoEModality::both;
  float temperature_init = 0.07f;

  int num_patches() const { return (image_size / patch_size) * (image_size / patch_size); }
  int image_tokens() const { return num_patches() + 1; }
  const TowerSpec& tower(Modality m) const;
  /// True when the given tower's block stack contains MoE layers.
  bool has_moe(Modality m) const;

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

/// The desk-scale default: 2 layers, width 64, 4 heads, 32x32 images in 8x8 patches.
ModelSpec tiny_spec();

/// Standard CLIP geometries ("b32", "b16", "l14"): 224px images, 77 text tokens.
/// With `upcycled`, half the MLP layers of both towers become 8-expert top-2 MoE layers.
ModelSpec clip_preset(const std::string& name, bool upcycled);

/// Throws ContractError describing the first violated invariant.
void validate(const ModelSpec& spec);

/// 0-based indices of sparse layers in an alternating [dense, sparse] stack.
std::vector<int> select_moe_layers(int num_layers);

/// Layer indices of `m`'s tower that carry MoE under `spec`.
std::vector<int> moe_layers(const ModelSpec& spec, Modality m);

}  // namespace mucp
