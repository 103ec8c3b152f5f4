#include "mucp/params.hpp"

#include "mucp/errors.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

namespace mucp {

Tensor& ParamStore::add(std::string name, Tensor value) {
  if (index_.count(name)) throw ContractError("duplicate parameter '" + name + "'");
  index_.emplace(name, entries_.size());
  entries_.emplace_back(std::move(name), std::move(value));
  return entries_.back().second;
}

Tensor& ParamStore::at(std::string_view name) {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ContractError("no parameter named '" + std::string(name) + "'");
  return entries_[it->second].second;
}

const Tensor& ParamStore::at(std::string_view name) const { return const_cast<ParamStore*>(this)->at(name); }

bool ParamStore::contains(std::string_view name) const { return index_.count(std::string(name)) != 0; }

std::int64_t ParamStore::total_elements() const {
  std::int64_t n = 0;
  for (const auto& [_, t] : entries_) n += t.numel();
  return n;
}

void ParamStore::set_requires_grad(bool on) {
  for (auto& [_, t] : entries_) t.set_requires_grad(on);
}

void ParamStore::zero_grad() {
  for (auto& [_, t] : entries_) t.zero_grad();
}

bool operator==(const ParamStore& a, const ParamStore& b) {
  if (a.entries_.size() != b.entries_.size()) return false;
  for (std::size_t i = 0; i < a.entries_.size(); ++i)
    if (a.entries_[i].first != b.entries_[i].first || !(a.entries_[i].second == b.entries_[i].second)) return false;
  return true;
}

std::string blocks_prefix(const ModelSpec& spec, Modality m) {
  if (spec.backbone == Backbone::shared) return "trunk.blocks";
  return to_string(m) + ".blocks";
}

std::string block_name(const ModelSpec& spec, Modality m, int layer) {
  return blocks_prefix(spec, m) + "." + std::to_string(layer);
}

namespace {

void push_mlp(std::vector<ParamInfo>& out, const std::string& prefix, const TowerSpec& t) {
  const std::int64_t d = t.model_dim, h = t.mlp_hidden_dim;
  out.push_back({prefix + ".fc1.w", {d, h}});
  out.push_back({prefix + ".fc1.b", {h}});
  out.push_back({prefix + ".fc2.w", {h, d}});
  out.push_back({prefix + ".fc2.b", {d}});
}

void push_blocks(std::vector<ParamInfo>& out, const ModelSpec& spec, Modality m) {
  const auto& t = spec.tower(m);
  const std::int64_t d = t.model_dim;
  const auto sparse = moe_layers(spec, m);
  for (int i = 0; i < t.num_layers; ++i) {
    const auto p = block_name(spec, m, i);
    out.push_back({p + ".ln1.g", {d}});
    out.push_back({p + ".ln1.b", {d}});
    out.push_back({p + ".attn.qkv.w", {d, 3 * d}});
    out.push_back({p + ".attn.qkv.b", {3 * d}});
    out.push_back({p + ".attn.out.w", {d, d}});
    out.push_back({p + ".attn.out.b", {d}});
    out.push_back({p + ".ln2.g", {d}});
    out.push_back({p + ".ln2.b", {d}});
    if (std::find(sparse.begin(), sparse.end(), i) != sparse.end()) {
      out.push_back({p + ".moe.router.w", {d, spec.moe->num_experts}});
      for (int e = 0; e < spec.moe->num_experts; ++e) push_mlp(out, p + ".moe.experts." + std::to_string(e), t);
    } else {
      push_mlp(out, p + ".mlp", t);
    }
  }
}

void push_image_stem(std::vector<ParamInfo>& out, const ModelSpec& spec) {
  const std::int64_t d = spec.image_tower.model_dim;
  const std::int64_t patch_dim = static_cast<std::int64_t>(spec.channels) * spec.patch_size * spec.patch_size;
  out.push_back({"image.patch_embed.w", {patch_dim, d}});
  out.push_back({"image.patch_embed.b", {d}});
  out.push_back({"image.cls", {1, d}});
  out.push_back({"image.pos", {spec.image_tokens(), d}});
}

void push_text_stem(std::vector<ParamInfo>& out, const ModelSpec& spec) {
  const std::int64_t d = spec.tower(Modality::text).model_dim;
  out.push_back({"text.token_embed", {spec.vocab_size, d}});
  out.push_back({"text.pos", {spec.text_tower.max_tokens, d}});
}

void push_head(std::vector<ParamInfo>& out, const ModelSpec& spec, Modality m) {
  const std::int64_t d = spec.tower(m).model_dim;
  const auto p = to_string(m);
  out.push_back({p + ".ln_post.g", {d}});
  out.push_back({p + ".ln_post.b", {d}});
  out.push_back({p + ".proj", {d, spec.embed_dim}});
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

std::vector<ParamInfo> parameter_layout(const ModelSpec& spec) {
  std::vector<ParamInfo> out;
  if (spec.backbone == Backbone::separated) {
    push_image_stem(out, spec);
    push_blocks(out, spec, Modality::image);
    push_head(out, spec, Modality::image);
    push_text_stem(out, spec);
    push_blocks(out, spec, Modality::text);
    push_head(out, spec, Modality::text);
  } else {
    push_image_stem(out, spec);
    push_text_stem(out, spec);
    push_blocks(out, spec, Modality::image);
    push_head(out, spec, Modality::image);
    push_head(out, spec, Modality::text);
  }
  out.push_back({"logit_scale", {1}});
  return out;
}

std::int64_t parameter_count(const ModelSpec& spec) {
  std::int64_t n = 0;
  for (const auto& p : parameter_layout(spec)) n += shape_numel(p.shape);
  return n;
}

std::int64_t mlp_parameter_count(const TowerSpec& t) {
  const std::int64_t d = t.model_dim, h = t.mlp_hidden_dim;
  return d * h + h + h * d + d;
}

ParamStore init_params(const ModelSpec& spec, std::uint64_t seed) {
  validate(spec);
  std::mt19937_64 rng(seed);
  ParamStore store;
  for (const auto& info : parameter_layout(spec)) {
    Tensor t(info.shape);
    const auto& n = info.name;
    if (n == "logit_scale") {
      t[0] = std::log(1.0f / spec.temperature_init);
    } else if (ends_with(n, ".g")) {
      std::fill(t.data().begin(), t.data().end(), 1.0f);
    } else if (ends_with(n, ".b")) {
      // zero
    } else {
      float std = 0.02f;
      if (ends_with(n, ".proj")) std = 1.0f / std::sqrt(static_cast<float>(info.shape[0]));
      if (ends_with(n, ".pos")) std = 0.01f;
      std::normal_distribution<float> dist(0.0f, std);
      for (auto& v : t.data()) v = dist(rng);
    }
    store.add(info.name, std::move(t));
  }
  return store;
}

void check_layout(const ModelSpec& spec, const ParamStore& store) {
  std::string missing, unexpected;
  std::set<std::string> expected;
  for (const auto& info : parameter_layout(spec)) {
    expected.insert(info.name);
    if (!store.contains(info.name))
      missing += " " + info.name;
    else if (store.at(info.name).shape() != info.shape)
      missing += " " + info.name + "(shape " + shape_str(store.at(info.name).shape()) + " != " +
                 shape_str(info.shape) + ")";
  }
  for (const auto& [name, _] : store)
    if (!expected.count(name)) unexpected += " " + name;
  if (!missing.empty() || !unexpected.empty())
    throw ContractError("parameters do not match spec; missing:" + (missing.empty() ? std::string(" none") : missing) +
                        "; unexpected:" + (unexpected.empty() ? std::string(" none") : unexpected));
}

}  // namespace mucp
