#include "mucp/encoder.hpp"

#include "mucp/errors.hpp"
#include "mucp/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mucp {

std::vector<std::uint8_t> pad_mask_from_ids(std::span<const std::int32_t> ids) {
  std::vector<std::uint8_t> mask(ids.size());
  std::transform(ids.begin(), ids.end(), mask.begin(), [](std::int32_t t) { return t == kPadToken ? 1 : 0; });
  return mask;
}

Var ParamBinding::operator()(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  Var v = graph_.parameter(store_.at(name));
  bound_.emplace(name, v);
  return v;
}

Tensor patchify(const Tensor& images, const ModelSpec& spec) {
  const auto c = spec.channels, s = spec.image_size, p = spec.patch_size;
  if (images.rank() != 4 || images.dim(1) != c || images.dim(2) != s || images.dim(3) != s)
    throw DimensionError("patchify: expected images [B×" + std::to_string(c) + "×" + std::to_string(s) + "×" +
                         std::to_string(s) + "], got " + shape_str(images.shape()));
  const auto batch = images.dim(0);
  const auto grid = s / p;
  const std::int64_t patch_dim = static_cast<std::int64_t>(c) * p * p;
  Tensor out({batch * grid * grid, patch_dim});
  auto src = images.data();
  auto dst = out.data();
  std::size_t w = 0;
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t gy = 0; gy < grid; ++gy)
      for (std::int64_t gx = 0; gx < grid; ++gx)
        for (std::int64_t ch = 0; ch < c; ++ch)
          for (std::int64_t dy = 0; dy < p; ++dy)
            for (std::int64_t dx = 0; dx < p; ++dx)
              dst[w++] = src[static_cast<std::size_t>(((b * c + ch) * s + gy * p + dy) * s + gx * p + dx)];
  return out;
}

namespace {

/// [B·(P+1) × D] token matrix for the image tower.
Var image_tokens(ParamBinding& params, const ModelSpec& spec, const Tensor& images) {
  Graph& g = params.graph();
  const auto batch = images.dim(0);
  const std::int64_t patches = spec.num_patches();
  Var projected = linear(g.constant(patchify(images, spec)), params("image.patch_embed.w"), params("image.patch_embed.b"));
  Var with_cls = concat_rows(params("image.cls"), projected);
  std::vector<std::int64_t> order;
  order.reserve(static_cast<std::size_t>(batch * (patches + 1)));
  for (std::int64_t b = 0; b < batch; ++b) {
    order.push_back(0);
    for (std::int64_t i = 0; i < patches; ++i) order.push_back(1 + b * patches + i);
  }
  return add_tiled(gather_rows(with_cls, order), params("image.pos"));
}

ExpertWeights mlp_weights(ParamBinding& params, const std::string& prefix) {
  return {params(prefix + ".fc1.w"), params(prefix + ".fc1.b"), params(prefix + ".fc2.w"), params(prefix + ".fc2.b")};
}

/// Pre-LN transformer stack. `routed_rows` restricts MoE routing to a subset of
/// rows (text padding is never routed); empty means every row.
Var run_blocks(ParamBinding& params, const ModelSpec& spec, Modality modality, Var x, std::int64_t batch,
               std::int64_t seq, std::span<const std::uint8_t> key_padding, std::span<const std::int64_t> routed_rows,
               const RoutingOptions& options, std::vector<RoutedLayer>& routing) {
  const auto& tower = spec.tower(modality);
  const auto sparse = moe_layers(spec, modality);
  const auto rows = x.dim(0);
  for (int layer = 0; layer < tower.num_layers; ++layer) {
    const auto p = block_name(spec, modality, layer);
    Var h = layer_norm(x, params(p + ".ln1.g"), params(p + ".ln1.b"));
    Var attn = multi_head_attention(linear(h, params(p + ".attn.qkv.w"), params(p + ".attn.qkv.b")), batch, seq,
                                    tower.num_heads, key_padding);
    x = add(x, linear(attn, params(p + ".attn.out.w"), params(p + ".attn.out.b")));
    Var h2 = layer_norm(x, params(p + ".ln2.g"), params(p + ".ln2.b"));
    if (std::find(sparse.begin(), sparse.end(), layer) != sparse.end()) {
      const auto& moe = *spec.moe;
      std::vector<ExpertWeights> experts;
      for (int e = 0; e < moe.num_experts; ++e)
        experts.push_back(mlp_weights(params, p + ".moe.experts." + std::to_string(e)));
      RoutingOptions layer_options = options;
      layer_options.jitter_seed = options.jitter_seed + 7919ULL * static_cast<std::uint64_t>(layer) +
                                  (modality == Modality::text ? 104729ULL : 0ULL);
      RoutedLayer routed;
      const bool subset = !routed_rows.empty() && static_cast<std::int64_t>(routed_rows.size()) != rows;
      Var input = subset ? gather_rows(h2, routed_rows) : h2;
      Var mixture = expert_mixture(input, experts, params(p + ".moe.router.w"), moe, moe.capacity_for(modality), routed,
                                   layer_options);
      if (subset) mixture = scatter_add_rows(mixture, routed_rows, rows);
      routed.outcome.layer_id = layer;
      routed.outcome.modality = modality;
      routing.push_back(std::move(routed));
      x = add(x, mixture);
    } else {
      x = add(x, mlp(h2, mlp_weights(params, p + ".mlp")));
    }
    if (!x.value().all_finite())
      throw NumericError("non-finite activations in " + to_string(modality) + " layer " + std::to_string(layer));
  }
  return x;
}

Var project(ParamBinding& params, Modality modality, Var pooled) {
  const auto p = to_string(modality);
  Var normed = layer_norm(pooled, params(p + ".ln_post.g"), params(p + ".ln_post.b"));
  return l2_normalize_rows(matmul(normed, params(p + ".proj")));
}

}  // namespace

Var patchify_embed(ParamBinding& params, const ModelSpec& spec, const Tensor& images) {
  const auto tokens = image_tokens(params, spec, images);
  return reshape(tokens, {images.dim(0), spec.image_tokens(), spec.image_tower.model_dim});
}

Encoded encode_images(ParamBinding& params, const ModelSpec& spec, const Tensor& images, const RoutingOptions& options) {
  Encoded out;
  const auto batch = images.dim(0);
  const std::int64_t seq = spec.image_tokens();
  Var x = image_tokens(params, spec, images);
  x = run_blocks(params, spec, Modality::image, x, batch, seq, {}, {}, options, out.routing);
  std::vector<std::int64_t> cls(static_cast<std::size_t>(batch));
  for (std::int64_t b = 0; b < batch; ++b) cls[static_cast<std::size_t>(b)] = b * seq;
  out.embeddings = project(params, Modality::image, gather_rows(x, cls));
  return out;
}

Encoded encode_texts(ParamBinding& params, const ModelSpec& spec, std::span<const std::int32_t> token_ids,
                     std::span<const std::uint8_t> pad_mask, std::int64_t batch, const RoutingOptions& options) {
  if (batch < 1 || token_ids.empty() || static_cast<std::int64_t>(token_ids.size()) % batch != 0)
    throw DimensionError("encode_texts: " + std::to_string(token_ids.size()) + " token ids for batch " +
                         std::to_string(batch));
  if (pad_mask.size() != token_ids.size()) throw DimensionError("encode_texts: pad mask length differs from token ids");
  const auto seq = static_cast<std::int64_t>(token_ids.size()) / batch;
  if (seq > spec.text_tower.max_tokens)
    throw DimensionError("encode_texts: sequence length " + std::to_string(seq) + " exceeds max_tokens " +
                         std::to_string(spec.text_tower.max_tokens));
  std::vector<std::int64_t> ids(token_ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (token_ids[i] < 0 || token_ids[i] >= spec.vocab_size)
      throw IndexError("encode_texts: token id " + std::to_string(token_ids[i]) + " outside vocabulary of " +
                       std::to_string(spec.vocab_size));
    ids[i] = token_ids[i];
  }
  std::vector<std::int64_t> pooled_rows, routed_rows;
  for (std::int64_t b = 0; b < batch; ++b) {
    std::int64_t last = -1;
    for (std::int64_t t = 0; t < seq; ++t)
      if (!pad_mask[static_cast<std::size_t>(b * seq + t)]) {
        last = t;
        routed_rows.push_back(b * seq + t);
      }
    if (last < 0) throw ContractError("encode_texts: sample " + std::to_string(b) + " is all padding");
    pooled_rows.push_back(b * seq + last);
  }
  Encoded out;
  std::vector<std::int64_t> positions(static_cast<std::size_t>(seq));
  std::iota(positions.begin(), positions.end(), 0);
  Var x = add_tiled(gather_rows(params("text.token_embed"), ids), gather_rows(params("text.pos"), positions));
  x = run_blocks(params, spec, Modality::text, x, batch, seq, pad_mask, routed_rows, options, out.routing);
  out.embeddings = project(params, Modality::text, gather_rows(x, pooled_rows));
  return out;
}

Encoded encode(ParamBinding& params, const ModelSpec& spec, const Batch& batch, Modality modality,
               const RoutingOptions& options) {
  if (modality == Modality::image) return encode_images(params, spec, batch.images, options);
  return encode_texts(params, spec, batch.token_ids, batch.pad_mask, batch.size, options);
}

namespace {

Var symmetric_cross_entropy(Var logits) {
  const auto n = logits.dim(0);
  std::vector<std::int64_t> diag(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) diag[static_cast<std::size_t>(i)] = i * n + i;
  Var matched = take(logits, diag);
  Var image_to_text = mean(sub(logsumexp(logits, 1), matched));
  Var text_to_image = mean(sub(logsumexp(logits, 0), matched));
  return scale(add(image_to_text, text_to_image), 0.5f);
}

void check_pairs(const Shape& a, const Shape& b) {
  if (a.size() != 2 || a != b)
    throw DimensionError("contrastive_loss: embedding shapes " + shape_str(a) + " and " + shape_str(b) + " differ");
  if (a[0] < 1) throw ContractError("contrastive_loss: empty batch");
}

}  // namespace

Var contrastive_loss(Var image_emb, Var text_emb, Var logit_scale) {
  check_pairs(image_emb.shape(), text_emb.shape());
  Var sims = matmul(image_emb, transpose(text_emb));
  return symmetric_cross_entropy(scale_by(sims, exp(logit_scale)));
}

float contrastive_loss(const Tensor& image_emb, const Tensor& text_emb, float temperature) {
  if (image_emb.numel() == 0 || text_emb.numel() == 0) throw ContractError("contrastive_loss: empty batch");
  check_pairs(image_emb.shape(), text_emb.shape());
  if (!(temperature > 0.0f)) throw ContractError("contrastive_loss: temperature must be > 0");
  Graph g;
  g.set_grad_enabled(false);
  Var sims = matmul(g.constant(image_emb), transpose(g.constant(text_emb)));
  return symmetric_cross_entropy(scale(sims, 1.0f / temperature)).value()[0];
}

}  // namespace mucp
