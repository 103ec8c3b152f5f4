#include "mucp/spec_io.hpp"

#include "mucp/errors.hpp"

#include <charconv>
#include <functional>
#include <map>

namespace mucp {

namespace {

template <typename T>
std::string shortest(T v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) throw FormatError("cannot format number");
  return std::string(buf, end);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* first = text.data();
  const char* last = first + text.size();
  if (!text.empty() && text[0] == '+') ++first;
  auto [end, ec] = std::from_chars(first, last, v);
  if (text.empty() || ec != std::errc() || end != last)
    throw FormatError(key + ": invalid number '" + text + "'");
  return v;
}

struct Field {
  std::function<std::string(const ModelSpec&, const MoESpec&)> get;
  std::function<void(ModelSpec&, MoESpec&, const std::string&, const std::string&)> set;
};

template <typename M>
Field int_field(M member) {
  return {[member](const ModelSpec& s, const MoESpec&) { return std::to_string(std::invoke(member, s)); },
          [member](ModelSpec& s, MoESpec&, const std::string& k, const std::string& v) {
            std::invoke(member, s) = static_cast<int>(parse_int(k, v));
          }};
}

template <typename M>
Field moe_field(M member) {
  using T = std::remove_reference_t<decltype(std::invoke(member, std::declval<MoESpec&>()))>;
  return {[member](const ModelSpec&, const MoESpec& m) {
            const T& v = std::invoke(member, m);
            if constexpr (std::is_same_v<T, bool>) return std::string(v ? "true" : "false");
            else if constexpr (std::is_same_v<T, float>) return format_float(v);
            else if constexpr (std::is_same_v<T, double>) return format_double(v);
            else return std::to_string(v);
          },
          [member](ModelSpec&, MoESpec& m, const std::string& k, const std::string& v) {
            T& dst = std::invoke(member, m);
            if constexpr (std::is_same_v<T, bool>) dst = parse_bool(k, v);
            else if constexpr (std::is_same_v<T, float>) dst = parse_float(k, v);
            else if constexpr (std::is_same_v<T, double>) dst = parse_double(k, v);
            else dst = static_cast<T>(parse_int(k, v));
          }};
}

void add_tower(std::map<std::string, Field>& f, const std::string& prefix, TowerSpec ModelSpec::*tower) {
  f[prefix + ".layers"] = int_field([tower](auto& s) -> auto& { return (s.*tower).num_layers; });
  f[prefix + ".dim"] = int_field([tower](auto& s) -> auto& { return (s.*tower).model_dim; });
  f[prefix + ".heads"] = int_field([tower](auto& s) -> auto& { return (s.*tower).num_heads; });
  f[prefix + ".mlp_dim"] = int_field([tower](auto& s) -> auto& { return (s.*tower).mlp_hidden_dim; });
}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> f;
    f["model.backbone"] = {[](const ModelSpec& s, const MoESpec&) { return to_string(s.backbone); },
                           [](ModelSpec& s, MoESpec&, const std::string&, const std::string& v) {
                             s.backbone = parse_backbone(v);
                           }};
    add_tower(f, "model.image", &ModelSpec::image_tower);
    add_tower(f, "model.text", &ModelSpec::text_tower);
    f["model.text.max_tokens"] = int_field([](auto& s) -> auto& { return s.text_tower.max_tokens; });
    f["model.patch_size"] = int_field([](auto& s) -> auto& { return s.patch_size; });
    f["model.image_size"] = int_field([](auto& s) -> auto& { return s.image_size; });
    f["model.channels"] = int_field([](auto& s) -> auto& { return s.channels; });
    f["model.vocab_size"] = int_field([](auto& s) -> auto& { return s.vocab_size; });
    f["model.embed_dim"] = int_field([](auto& s) -> auto& { return s.embed_dim; });
    f["model.moe_modality"] = {[](const ModelSpec& s, const MoESpec&) { return to_string(s.moe_modality); },
                               [](ModelSpec& s, MoESpec&, const std::string&, const std::string& v) {
                                 s.moe_modality = parse_moe_modality(v);
                               }};
    f["model.temperature_init"] = {
        [](const ModelSpec& s, const MoESpec&) { return format_float(s.temperature_init); },
        [](ModelSpec& s, MoESpec&, const std::string& k, const std::string& v) { s.temperature_init = parse_float(k, v); }};
    f["moe.num_experts"] = moe_field([](auto& m) -> auto& { return m.num_experts; });
    f["moe.top_k"] = moe_field([](auto& m) -> auto& { return m.top_k; });
    f["moe.capacity_image"] = moe_field([](auto& m) -> auto& { return m.capacity_image; });
    f["moe.capacity_text"] = moe_field([](auto& m) -> auto& { return m.capacity_text; });
    f["moe.balance_weight"] = moe_field([](auto& m) -> auto& { return m.balance_weight; });
    f["moe.router_z_weight"] = moe_field([](auto& m) -> auto& { return m.router_z_weight; });
    f["moe.normalize_gates_after_routing"] = moe_field([](auto& m) -> auto& { return m.normalize_gates_after_routing; });
    f["moe.placement"] = {[](const ModelSpec&, const MoESpec& m) { return to_string(m.placement); },
                          [](ModelSpec&, MoESpec& m, const std::string&, const std::string& v) {
                            m.placement = parse_placement(v);
                          }};
    return f;
  }();
  return table;
}

bool in_spec_sections(const std::string& key) { return key.rfind("model.", 0) == 0 || key.rfind("moe.", 0) == 0; }

}  // namespace

std::string format_float(float v) { return shortest(v); }
std::string format_double(double v) { return shortest(v); }
float parse_float(const std::string& key, const std::string& text) { return parse_number<float>(key, text); }
double parse_double(const std::string& key, const std::string& text) { return parse_number<double>(key, text); }
long long parse_int(const std::string& key, const std::string& text) { return parse_number<long long>(key, text); }
unsigned long long parse_uint(const std::string& key, const std::string& text) {
  return parse_number<unsigned long long>(key, text);
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "on" || text == "1") return true;
  if (text == "false" || text == "off" || text == "0") return false;
  throw FormatError(key + ": expected true/false, got '" + text + "'");
}

KeyValues spec_entries(const ModelSpec& spec) {
  KeyValues out;
  const MoESpec moe = spec.moe.value_or(MoESpec{});
  for (const auto& [key, field] : fields()) out.emplace_back(key, field.get(spec, moe));
  out.emplace_back("moe.enabled", spec.moe ? "true" : "false");
  return out;
}

bool apply_spec_entry(ModelSpec& spec, MoESpec& moe, bool& moe_enabled, const std::string& key,
                      const std::string& value) {
  if (!in_spec_sections(key)) return false;
  if (key == "moe.enabled") {
    moe_enabled = parse_bool(key, value);
    return true;
  }
  auto it = fields().find(key);
  if (it == fields().end()) throw FormatError("unknown key '" + key + "'");
  it->second.set(spec, moe, key, value);
  return true;
}

ModelSpec spec_from_entries(const KeyValues& entries) {
  ModelSpec spec = tiny_spec();
  MoESpec moe;
  bool enabled = false;
  for (const auto& [k, v] : entries)
    if (!apply_spec_entry(spec, moe, enabled, k, v)) throw FormatError("unexpected spec key '" + k + "'");
  if (enabled) spec.moe = moe;
  spec.image_tower.max_tokens = spec.image_tokens();
  return spec;
}

}  // namespace mucp
