#pragma once

#include "mucp/spec.hpp"

#include <string>
#include <utility>
#include <vector>

namespace mucp {

using KeyValues = std::vector<std::pair<std::string, std::string>>;

/// Text forms that round-trip exactly through the parsers below.
std::string format_float(float v);
std::string format_double(double v);
float parse_float(const std::string& key, const std::string& text);
double parse_double(const std::string& key, const std::string& text);
long long parse_int(const std::string& key, const std::string& text);
unsigned long long parse_uint(const std::string& key, const std::string& text);
bool parse_bool(const std::string& key, const std::string& text);

/// Flattens a spec into `model.*` and `moe.*` keys; `moe.enabled` records
/// whether the MoE block is present.
KeyValues spec_entries(const ModelSpec& spec);

/// Applies one `model.*` / `moe.*` key. Returns false for keys outside those
/// sections; throws FormatError on a malformed value or unknown key inside them.
/// MoE fields are written to `moe` so they can be set before MoE is enabled.
bool apply_spec_entry(ModelSpec& spec, MoESpec& moe, bool& moe_enabled, const std::string& key,
                      const std::string& value);

/// Inverse of spec_entries.
ModelSpec spec_from_entries(const KeyValues& entries);

}  // namespace mucp
