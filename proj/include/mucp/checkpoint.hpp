#pragma once

#include "mucp/params.hpp"
#include "mucp/spec.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace mucp {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// A model spec plus its parameters and provenance.
struct Checkpoint {
  ModelSpec spec;
  std::int64_t step = 0;
  std::uint64_t seed = 0;
  bool upcycled = false;  // produced by upcycling surgery (possibly trained since)
  ParamStore params;
};

/// Fresh checkpoint at step 0.
Checkpoint init_checkpoint(const ModelSpec& spec, std::uint64_t seed);

/// Manifest entry describing one tensor's slice of the blob.
struct ManifestEntry {
  std::string name;
  Shape shape;
  std::uint64_t offset = 0;  // bytes from blob start
  std::uint64_t bytes = 0;
};

/// File layout: "MUCP", u32 version, u32 manifest length, manifest text,
/// zero padding to a 64-byte boundary, then the little-endian f32 blob.
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes);

/// Manifest entries of a serialized checkpoint, without materializing tensors.
std::vector<ManifestEntry> read_manifest(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace mucp
