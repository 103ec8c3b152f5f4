#pragma once

#include "mucp/encoder.hpp"
#include "mucp/tensor.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace mucp {

/// Synthetic paired data: one colored shape per image, captioned as
/// [color, shape, column bin, row bin] followed by padding.
struct SynthSpec {
  int num_shapes = 4;
  int num_colors = 4;
  int image_size = 32;
  int channels = 3;
  int grid = 4;  // location bins per axis
  int seq_len = 16;
  std::int64_t train_size = 4096;
  std::int64_t val_size = 256;
  std::uint64_t seed = 1234;
  float noise = 0.05f;

  int num_classes() const { return num_shapes * num_colors; }
  /// Vocabulary entries the caption grammar needs, including the pad token.
  int vocab_needed() const { return 1 + num_colors + num_shapes + 2 * grid; }
};

struct Dataset {
  Tensor images;                    // [N×C×S×S]
  std::vector<std::int32_t> tokens;  // [N×seq_len]
  std::vector<int> labels;           // class = color * num_shapes + shape
  std::vector<int> locations;        // row_bin * grid + column_bin
  std::int64_t size = 0;
  int seq_len = 0;
};

struct SynthData {
  Dataset train;
  Dataset val;
};

/// Deterministic in spec.seed. The validation split enumerates classes and
/// locations systematically; no image appears in both splits.
SynthData make_synth_dataset(const SynthSpec& spec);

/// Caption tokens for a class at a location, padded to spec.seq_len.
std::vector<std::int32_t> caption_tokens(const SynthSpec& spec, int label, int location);

/// Gathers the given samples into a Batch.
Batch make_batch(const Dataset& data, std::span<const std::int64_t> indices);
Batch make_batch(const Dataset& data, std::int64_t begin, std::int64_t end);

}  // namespace mucp
