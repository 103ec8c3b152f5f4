#include "mucp/checkpoint.hpp"

#include "mucp/errors.hpp"
#include "mucp/spec_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace mucp {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'M', 'U', 'C', 'P'};
constexpr std::size_t kAlign = 64;
constexpr std::size_t kHeader = 12;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> b, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[at + static_cast<std::size_t>(i)]) << (8 * i);
  return v;
}

std::string shape_field(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

Shape parse_shape(const std::string& text) {
  Shape s;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto end = text.find('x', start);
    const auto part = text.substr(start, end == std::string::npos ? std::string::npos : end - start);
    s.push_back(parse_int("shape", part));
    if (s.back() <= 0) throw FormatError("checkpoint: non-positive extent in shape '" + text + "'");
    if (end == std::string::npos) break;
    start = end + 1;
  }
  return s;
}

struct Parsed {
  KeyValues spec;
  std::int64_t step = 0;
  std::uint64_t seed = 0;
  bool upcycled = false;
  std::vector<ManifestEntry> entries;
  std::size_t blob_start = 0;
};

Parsed parse(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeader || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw FormatError("checkpoint: bad magic (not a MUCP file)");
  const auto version = get_u32(bytes, 4);
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: format version " + std::to_string(version) + " unsupported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  const auto len = get_u32(bytes, 8);
  if (kHeader + len > bytes.size()) throw FormatError("checkpoint: truncated manifest");
  Parsed p;
  p.blob_start = (kHeader + len + kAlign - 1) / kAlign * kAlign;
  std::istringstream in(std::string(reinterpret_cast<const char*>(bytes.data()) + kHeader, len));
  std::string line;
  std::uint64_t expected_offset = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "meta") {
      std::string key, value;
      ls >> key >> value;
      if (key == "step") p.step = parse_int(key, value);
      else if (key == "seed") p.seed = parse_uint(key, value);
      else if (key == "upcycled") p.upcycled = parse_bool(key, value);
      else throw FormatError("checkpoint: unknown meta key '" + key + "'");
    } else if (kind == "spec") {
      std::string key, value;
      ls >> key >> value;
      p.spec.emplace_back(key, value);
    } else if (kind == "tensor") {
      ManifestEntry e;
      std::string dtype, shape, offset, nbytes;
      ls >> e.name >> dtype >> shape >> offset >> nbytes;
      if (dtype != "f32") throw FormatError("checkpoint: unsupported dtype '" + dtype + "' for " + e.name);
      e.shape = parse_shape(shape);
      e.offset = parse_uint("offset", offset);
      e.bytes = parse_uint("bytes", nbytes);
      if (e.offset != expected_offset || e.bytes != static_cast<std::uint64_t>(shape_numel(e.shape)) * 4)
        throw FormatError("checkpoint: manifest entry '" + e.name + "' has inconsistent offset or size");
      expected_offset += e.bytes;
      p.entries.push_back(std::move(e));
    } else {
      throw FormatError("checkpoint: unknown manifest line '" + line + "'");
    }
  }
  if (p.blob_start + expected_offset != bytes.size())
    throw FormatError("checkpoint: blob size " + std::to_string(bytes.size() - std::min(bytes.size(), p.blob_start)) +
                      " does not match manifest total " + std::to_string(expected_offset));
  return p;
}

}  // namespace

Checkpoint init_checkpoint(const ModelSpec& spec, std::uint64_t seed) {
  Checkpoint c;
  c.spec = spec;
  c.seed = seed;
  c.params = init_params(spec, seed);
  return c;
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  std::string manifest;
  manifest += "meta step " + std::to_string(ckpt.step) + "\n";
  manifest += "meta seed " + std::to_string(ckpt.seed) + "\n";
  manifest += std::string("meta upcycled ") + (ckpt.upcycled ? "true" : "false") + "\n";
  for (const auto& [k, v] : spec_entries(ckpt.spec)) manifest += "spec " + k + " " + v + "\n";
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.params) {
    const auto nbytes = static_cast<std::uint64_t>(t.numel()) * 4;
    manifest += "tensor " + name + " f32 " + shape_field(t.shape()) + " " + std::to_string(offset) + " " +
                std::to_string(nbytes) + "\n";
    offset += nbytes;
  }
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(manifest.size()));
  out.insert(out.end(), manifest.begin(), manifest.end());
  out.resize((out.size() + kAlign - 1) / kAlign * kAlign, 0);
  out.reserve(out.size() + offset);
  for (const auto& [_, t] : ckpt.params) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(t.data().data());
    out.insert(out.end(), p, p + t.numel() * 4);
  }
  return out;
}

std::vector<ManifestEntry> read_manifest(std::span<const std::uint8_t> bytes) { return parse(bytes).entries; }

Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  Parsed p = parse(bytes);
  Checkpoint c;
  c.spec = spec_from_entries(p.spec);
  validate(c.spec);
  c.step = p.step;
  c.seed = p.seed;
  c.upcycled = p.upcycled;
  for (const auto& e : p.entries) {
    Tensor t(e.shape);
    std::memcpy(t.data().data(), bytes.data() + p.blob_start + e.offset, e.bytes);
    c.params.add(e.name, std::move(t));
  }
  check_layout(c.spec, c.params);
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace mucp
