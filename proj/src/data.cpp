#include "mucp/data.hpp"

#include "mucp/errors.hpp"

#include <array>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>
#include <unordered_set>

namespace mucp {
namespace {

constexpr std::array<std::array<float, 3>, 8> kPalette{{
    {1.0f, 0.1f, 0.1f},
    {0.1f, 0.9f, 0.1f},
    {0.15f, 0.3f, 1.0f},
    {1.0f, 0.9f, 0.1f},
    {0.9f, 0.1f, 0.9f},
    {0.1f, 0.9f, 0.9f},
    {1.0f, 1.0f, 1.0f},
    {1.0f, 0.5f, 0.0f},
}};
constexpr int kMaxShapes = 6;

bool inside(int shape, float dx, float dy, float r) {
  switch (shape) {
    case 0:  // square
      return std::abs(dx) <= r && std::abs(dy) <= r;
    case 1:  // disc
      return dx * dx + dy * dy <= r * r;
    case 2:  // triangle, apex up
      return dy >= -r && dy <= r && std::abs(dx) <= (dy + r) * 0.5f;
    case 3:  // plus
      return (std::abs(dx) <= r / 3.0f && std::abs(dy) <= r) || (std::abs(dy) <= r / 3.0f && std::abs(dx) <= r);
    case 4:  // diamond
      return std::abs(dx) + std::abs(dy) <= r;
    default:  // ring
      return dx * dx + dy * dy <= r * r && dx * dx + dy * dy >= 0.25f * r * r;
  }
}

std::uint64_t fnv1a(std::span<const float> data) {
  std::uint64_t h = 1469598103934665603ULL;
  for (float v : data) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    for (int i = 0; i < 4; ++i) {
      h ^= (bits >> (8 * i)) & 0xffU;
      h *= 1099511628211ULL;
    }
  }
  return h;
}

void render(const SynthSpec& spec, int label, int location, std::mt19937_64& rng, std::span<float> out) {
  const int color = label / spec.num_shapes, shape = label % spec.num_shapes;
  const int s = spec.image_size;
  const float cell = static_cast<float>(s) / static_cast<float>(spec.grid);
  std::uniform_real_distribution<float> jitter(-0.2f * cell, 0.2f * cell);
  std::uniform_real_distribution<float> radius(0.3f * cell, 0.45f * cell);
  std::uniform_real_distribution<float> brightness(0.75f, 1.0f);
  std::normal_distribution<float> noise(0.0f, spec.noise);
  const float cx = (static_cast<float>(location % spec.grid) + 0.5f) * cell + jitter(rng);
  const float cy = (static_cast<float>(location / spec.grid) + 0.5f) * cell + jitter(rng);
  const float r = radius(rng);
  const float gain = brightness(rng);
  const auto& rgb = kPalette[static_cast<std::size_t>(color)];
  for (int c = 0; c < spec.channels; ++c)
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) {
        const bool on = inside(shape, static_cast<float>(x) + 0.5f - cx, static_cast<float>(y) + 0.5f - cy, r);
        const float base = on ? gain * rgb[static_cast<std::size_t>(c % 3)] : 0.0f;
        out[static_cast<std::size_t>((c * s + y) * s + x)] = base + (spec.noise > 0.0f ? noise(rng) : 0.0f);
      }
}

Dataset allocate(const SynthSpec& spec, std::int64_t n) {
  Dataset d;
  d.size = n;
  d.seq_len = spec.seq_len;
  d.images = Tensor({n, spec.channels, spec.image_size, spec.image_size});
  d.tokens.reserve(static_cast<std::size_t>(n * spec.seq_len));
  d.labels.reserve(static_cast<std::size_t>(n));
  d.locations.reserve(static_cast<std::size_t>(n));
  return d;
}

}  // namespace

std::vector<std::int32_t> caption_tokens(const SynthSpec& spec, int label, int location) {
  const int color = label / spec.num_shapes, shape = label % spec.num_shapes;
  std::vector<std::int32_t> t(static_cast<std::size_t>(spec.seq_len), kPadToken);
  t[0] = 1 + color;
  t[1] = 1 + spec.num_colors + shape;
  t[2] = 1 + spec.num_colors + spec.num_shapes + location % spec.grid;
  t[3] = 1 + spec.num_colors + spec.num_shapes + spec.grid + location / spec.grid;
  return t;
}

SynthData make_synth_dataset(const SynthSpec& spec) {
  if (spec.num_colors < 1 || spec.num_colors > static_cast<int>(kPalette.size()) || spec.num_shapes < 1 ||
      spec.num_shapes > kMaxShapes)
    throw ContractError("synthetic data supports 1-8 colors and 1-6 shapes");
  if (spec.grid < 1 || spec.image_size % spec.grid != 0 || spec.seq_len < 4 || spec.train_size < 1 ||
      spec.val_size < 1)
    throw ContractError("synthetic data: grid must divide image_size, seq_len >= 4, split sizes >= 1");
  const int classes = spec.num_classes();
  const int locations = spec.grid * spec.grid;
  const std::int64_t pixels = static_cast<std::int64_t>(spec.channels) * spec.image_size * spec.image_size;

  SynthData out;
  std::unordered_set<std::uint64_t> seen;
  auto fill = [&](Dataset& d, std::mt19937_64& rng, auto choose) {
    for (std::int64_t i = 0; i < d.size; ++i) {
      const auto [label, location] = choose(i);
      auto pixels_out = d.images.data().subspan(static_cast<std::size_t>(i * pixels), static_cast<std::size_t>(pixels));
      do render(spec, label, location, rng, pixels_out);
      while (!seen.insert(fnv1a(pixels_out)).second);
      const auto caption = caption_tokens(spec, label, location);
      d.tokens.insert(d.tokens.end(), caption.begin(), caption.end());
      d.labels.push_back(label);
      d.locations.push_back(location);
    }
  };

  out.val = allocate(spec, spec.val_size);
  std::mt19937_64 val_rng(spec.seed * 2 + 1);
  fill(out.val, val_rng, [&](std::int64_t i) {
    return std::pair<int, int>(static_cast<int>(i % classes), static_cast<int>((i / classes) % locations));
  });

  out.train = allocate(spec, spec.train_size);
  std::mt19937_64 train_rng(spec.seed * 2);
  std::uniform_int_distribution<int> pick_label(0, classes - 1), pick_location(0, locations - 1);
  fill(out.train, train_rng, [&](std::int64_t) {
    const int label = pick_label(train_rng);
    return std::pair<int, int>(label, pick_location(train_rng));
  });
  return out;
}

Batch make_batch(const Dataset& data, std::span<const std::int64_t> indices) {
  Batch b;
  const auto n = static_cast<std::int64_t>(indices.size());
  const auto& shape = data.images.shape();
  const std::int64_t pixels = shape[1] * shape[2] * shape[3];
  b.images = Tensor({n, shape[1], shape[2], shape[3]});
  b.size = n;
  b.seq_len = data.seq_len;
  b.token_ids.reserve(static_cast<std::size_t>(n * data.seq_len));
  for (std::int64_t i = 0; i < n; ++i) {
    const auto src = indices[static_cast<std::size_t>(i)];
    if (src < 0 || src >= data.size) throw IndexError("make_batch: sample index out of range");
    auto from = data.images.data().subspan(static_cast<std::size_t>(src * pixels), static_cast<std::size_t>(pixels));
    std::copy(from.begin(), from.end(), b.images.data().begin() + i * pixels);
    auto toks = std::span(data.tokens).subspan(static_cast<std::size_t>(src * data.seq_len),
                                               static_cast<std::size_t>(data.seq_len));
    b.token_ids.insert(b.token_ids.end(), toks.begin(), toks.end());
  }
  b.pad_mask = pad_mask_from_ids(b.token_ids);
  return b;
}

Batch make_batch(const Dataset& data, std::int64_t begin, std::int64_t end) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(end - begin));
  std::iota(idx.begin(), idx.end(), begin);
  return make_batch(data, idx);
}

}  // namespace mucp
