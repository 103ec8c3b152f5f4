#include "mucp/spec.hpp"

#include "mucp/errors.hpp"

namespace mucp {

std::string to_string(Backbone b) { return b == Backbone::shared ? "shared" : "separated"; }

std::string to_string(Modality m) { return m == Modality::image ? "image" : "text"; }

std::string to_string(MoEModality m) {
  switch (m) {
    case MoEModality::image:
      return "image";
    case MoEModality::text:
      return "text";
    case MoEModality::both:
      return "both";
  }
  return "both";
}

std::string to_string(Placement) { return "alternating_dense_sparse"; }

Backbone parse_backbone(const std::string& s) {
  if (s == "separated") return Backbone::separated;
  if (s == "shared") return Backbone::shared;
  throw FormatError("unknown backbone '" + s + "' (expected separated|shared)");
}

MoEModality parse_moe_modality(const std::string& s) {
  if (s == "image") return MoEModality::image;
  if (s == "text") return MoEModality::text;
  if (s == "both") return MoEModality::both;
  throw FormatError("unknown modality '" + s + "' (expected image|text|both)");
}

Placement parse_placement(const std::string& s) {
  if (s == "alternating_dense_sparse") return Placement::alternating_dense_sparse;
  throw FormatError("unknown placement '" + s + "'");
}

const TowerSpec& ModelSpec::tower(Modality m) const {
  if (m == Modality::text && backbone == Backbone::separated) return text_tower;
  return image_tower;
}

bool ModelSpec::has_moe(Modality m) const {
  if (!moe) return false;
  const bool selected = moe_modality == MoEModality::both ||
                        (moe_modality == MoEModality::image && m == Modality::image) ||
                        (moe_modality == MoEModality::text && m == Modality::text);
  return selected && !select_moe_layers(tower(m).num_layers).empty();
}

ModelSpec tiny_spec() {
  ModelSpec s;
  s.image_tower.max_tokens = s.image_tokens();
  return s;
}

ModelSpec clip_preset(const std::string& name, bool upcycled) {
  ModelSpec s;
  s.image_size = 224;
  s.channels = 3;
  s.vocab_size = 49408;
  s.text_tower = {12, 512, 8, 2048, 77};
  if (name == "b32" || name == "b16") {
    s.patch_size = name == "b32" ? 32 : 16;
    s.image_tower = {12, 768, 12, 3072, 0};
    s.embed_dim = 512;
  } else if (name == "l14") {
    s.patch_size = 14;
    s.image_tower = {24, 1024, 16, 4096, 0};
    s.text_tower = {12, 768, 12, 3072, 77};
    s.embed_dim = 768;
  } else {
    throw FormatError("unknown preset '" + name + "' (expected b32|b16|l14)");
  }
  s.image_tower.max_tokens = s.image_tokens();
  if (upcycled) s.moe = MoESpec{};
  return s;
}

namespace {

void check_tower(const TowerSpec& t, const std::string& which) {
  if (t.num_layers < 1 || t.model_dim < 1 || t.num_heads < 1 || t.mlp_hidden_dim < 1 || t.max_tokens < 1)
    throw ContractError(which + " tower: all extents must be positive");
  if (t.model_dim % t.num_heads != 0)
    throw ContractError(which + " tower: model_dim " + std::to_string(t.model_dim) + " not divisible by " +
                        std::to_string(t.num_heads) + " heads");
}

}  // namespace

void validate(const ModelSpec& s) {
  check_tower(s.image_tower, "image");
  check_tower(s.text_tower, "text");
  if (s.patch_size < 1 || s.image_size < 1 || s.channels < 1 || s.vocab_size < 2 || s.embed_dim < 1)
    throw ContractError("model extents must be positive (vocab_size >= 2)");
  if (s.image_size % s.patch_size != 0)
    throw ContractError("image_size " + std::to_string(s.image_size) + " not divisible by patch_size " +
                        std::to_string(s.patch_size));
  if (s.backbone == Backbone::shared && s.image_tower.model_dim != s.text_tower.model_dim)
    throw ContractError("shared backbone requires equal image and text model_dim");
  if (!(s.temperature_init >= 0.01f)) throw ContractError("temperature_init must be >= 0.01");
  if (s.moe) {
    const auto& m = *s.moe;
    if (m.num_experts < 1 || m.top_k < 1 || m.top_k > m.num_experts)
      throw ContractError("moe: need 1 <= top_k <= num_experts");
    if (!(m.capacity_image > 0.0) || !(m.capacity_text > 0.0)) throw ContractError("moe: capacity factors must be > 0");
    if (m.balance_weight < 0.0f || m.router_z_weight < 0.0f) throw ContractError("moe: loss weights must be >= 0");
    if (s.backbone == Backbone::shared && s.moe_modality != MoEModality::both)
      throw ContractError("moe: shared backbone routes both modalities through one trunk; moe_modality must be both");
  }
}

std::vector<int> select_moe_layers(int num_layers) {
  std::vector<int> out;
  for (int i = 1; i < num_layers; i += 2) out.push_back(i);
  return out;
}

std::vector<int> moe_layers(const ModelSpec& spec, Modality m) {
  if (!spec.has_moe(m)) return {};
  return select_moe_layers(spec.tower(m).num_layers);
}

}  // namespace mucp
