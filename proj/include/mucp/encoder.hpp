#pragma once

#include "mucp/graph.hpp"
#include "mucp/moe.hpp"
#include "mucp/params.hpp"
#include "mucp/spec.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace mucp {

inline constexpr std::int32_t kPadToken = 0;

/// Paired images [B×C×H×W] and token ids [B×L]; pad_mask marks padding (nonzero).
struct Batch {
  Tensor images;
  std::vector<std::int32_t> token_ids;
  std::vector<std::uint8_t> pad_mask;
  std::int64_t size = 0;
  std::int64_t seq_len = 0;
};

/// Builds pad_mask from token ids equal to kPadToken.
std::vector<std::uint8_t> pad_mask_from_ids(std::span<const std::int32_t> ids);

/// Lazily binds named parameters of a store to graph leaves.
class ParamBinding {
 public:
  ParamBinding(Graph& graph, ParamStore& store) : graph_(graph), store_(store) {}
  Var operator()(const std::string& name);
  Graph& graph() { return graph_; }

 private:
  Graph& graph_;
  ParamStore& store_;
  std::unordered_map<std::string, Var> bound_;
};

/// Non-overlapping patches as rows [B·P × C·p·p], channel-major within a patch.
Tensor patchify(const Tensor& images, const ModelSpec& spec);

/// Patch projection with the class token prepended and positions added, [B×(P+1)×D].
Var patchify_embed(ParamBinding& params, const ModelSpec& spec, const Tensor& images);

struct Encoded {
  Var embeddings;                   // [B×embed_dim], unit rows
  std::vector<RoutedLayer> routing;  // one entry per MoE layer, in depth order
};

Encoded encode_images(ParamBinding& params, const ModelSpec& spec, const Tensor& images,
                      const RoutingOptions& options = {});
Encoded encode_texts(ParamBinding& params, const ModelSpec& spec, std::span<const std::int32_t> token_ids,
                     std::span<const std::uint8_t> pad_mask, std::int64_t batch, const RoutingOptions& options = {});
Encoded encode(ParamBinding& params, const ModelSpec& spec, const Batch& batch, Modality modality,
               const RoutingOptions& options = {});

/// Symmetric InfoNCE: mean of the image→text and text→image cross-entropies over
/// the in-batch similarity matrix scaled by exp(logit_scale).
Var contrastive_loss(Var image_emb, Var text_emb, Var logit_scale);
float contrastive_loss(const Tensor& image_emb, const Tensor& text_emb, float temperature);

/// Upper clamp on the logit scale, i.e. temperature >= 0.01.
inline constexpr float kMaxLogitScale = 4.6051702f;  // ln(100)

}  // namespace mucp
