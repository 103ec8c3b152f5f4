#include "mucp/eval.hpp"

#include "mucp/errors.hpp"
#include "mucp/ops.hpp"
#include "mucp/spec_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace mucp {

namespace {

void check_embeddings(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
    throw DimensionError(std::string(op) + ": incompatible embeddings " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
}

/// Position of `target` when row `scores` is sorted by descending score, lower index first on ties.
std::int64_t rank_of(std::span<const float> scores, std::int64_t target) {
  const float s = scores[static_cast<std::size_t>(target)];
  std::int64_t rank = 0;
  for (std::int64_t j = 0; j < static_cast<std::int64_t>(scores.size()); ++j) {
    const float v = scores[static_cast<std::size_t>(j)];
    if (v > s || (v == s && j < target)) ++rank;
  }
  return rank;
}

ParamStore frozen(const ParamStore& p) {
  ParamStore out = p;
  out.set_requires_grad(false);
  return out;
}

}  // namespace

double recall_at_k(const Tensor& image_emb, const Tensor& text_emb, int k, Direction direction) {
  if (image_emb.numel() == 0 || text_emb.numel() == 0) throw ContractError("recall_at_k: no embeddings");
  check_embeddings(image_emb, text_emb, "recall_at_k");
  const auto n = image_emb.dim(0);
  if (text_emb.dim(0) != n) throw DimensionError("recall_at_k: embedding sets differ in size");
  if (k < 1 || k > n) throw ContractError("recall_at_k: need 1 <= k <= N, got k=" + std::to_string(k));
  const Tensor& queries = direction == Direction::image_to_text ? image_emb : text_emb;
  const Tensor& keys = direction == Direction::image_to_text ? text_emb : image_emb;
  RowMatrixXf sims = queries.matrix() * keys.matrix().transpose();
  std::int64_t hits = 0;
  for (std::int64_t i = 0; i < n; ++i)
    if (rank_of(std::span<const float>(sims.row(i).data(), static_cast<std::size_t>(n)), i) < k) ++hits;
  return static_cast<double>(hits) / static_cast<double>(n);
}

ZeroShotResult zero_shot_classify(const Tensor& image_emb, const Tensor& class_emb, std::span<const int> labels) {
  check_embeddings(image_emb, class_emb, "zero_shot_classify");
  const auto n = image_emb.dim(0), classes = class_emb.dim(0);
  if (n < 1) throw ContractError("zero_shot_classify: no images");
  if (static_cast<std::int64_t>(labels.size()) != n) throw DimensionError("zero_shot_classify: label count mismatch");
  RowMatrixXf sims = image_emb.matrix() * class_emb.matrix().transpose();
  std::int64_t top1 = 0, top5 = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const int label = labels[static_cast<std::size_t>(i)];
    if (label < 0 || label >= classes) throw IndexError("zero_shot_classify: label out of range");
    const auto r = rank_of(std::span<const float>(sims.row(i).data(), static_cast<std::size_t>(classes)), label);
    top1 += r < 1;
    top5 += r < 5;
  }
  ZeroShotResult out;
  out.top1 = static_cast<double>(top1) / static_cast<double>(n);
  if (classes >= 5) out.top5 = static_cast<double>(top5) / static_cast<double>(n);
  return out;
}

Embeddings embed_dataset(const Checkpoint& model, const Dataset& data, int batch_size, const RoutingOptions& options) {
  if (batch_size < 1) throw ContractError("embed_dataset: batch_size must be >= 1");
  ParamStore params = frozen(model.params);
  const std::int64_t e = model.spec.embed_dim;
  Embeddings out{Tensor({data.size, e}), Tensor({data.size, e})};
  for (std::int64_t begin = 0; begin < data.size; begin += batch_size) {
    const auto end = std::min<std::int64_t>(data.size, begin + batch_size);
    const Batch batch = make_batch(data, begin, end);
    Graph g;
    g.set_grad_enabled(false);
    ParamBinding binding(g, params);
    const auto img = encode(binding, model.spec, batch, Modality::image, options).embeddings.value().data();
    const auto txt = encode(binding, model.spec, batch, Modality::text, options).embeddings.value().data();
    std::copy(img.begin(), img.end(), out.image.data().begin() + begin * e);
    std::copy(txt.begin(), txt.end(), out.text.data().begin() + begin * e);
  }
  return out;
}

Tensor class_embeddings(const Checkpoint& model, const SynthSpec& synth) {
  const int classes = synth.num_classes(), locations = synth.grid * synth.grid;
  std::vector<std::int32_t> ids;
  for (int c = 0; c < classes; ++c)
    for (int l = 0; l < locations; ++l) {
      const auto t = caption_tokens(synth, c, l);
      ids.insert(ids.end(), t.begin(), t.end());
    }
  ParamStore params = frozen(model.params);
  Graph g;
  g.set_grad_enabled(false);
  ParamBinding binding(g, params);
  const auto mask = pad_mask_from_ids(ids);
  const Tensor& prompts =
      encode_texts(binding, model.spec, ids, mask, static_cast<std::int64_t>(classes) * locations).embeddings.value();
  const std::int64_t e = model.spec.embed_dim;
  Tensor out({classes, e});
  for (int c = 0; c < classes; ++c) {
    Eigen::RowVectorXf m = prompts.matrix().middleRows(static_cast<Eigen::Index>(c) * locations, locations).colwise().mean();
    const float norm = m.norm();
    out.matrix().row(c) = norm > 0.0f ? (m / norm).eval() : m;
  }
  return out;
}

std::string EvalReport::to_text() const {
  std::ostringstream out;
  out << "pairs: " << num_pairs << "\ni2t_recall@1: " << i2t_r1 << "\ni2t_recall@5: " << i2t_r5
      << "\nt2i_recall@1: " << t2i_r1 << "\nt2i_recall@5: " << t2i_r5 << "\nzero_shot_top1: " << zero_shot.top1 << '\n';
  if (zero_shot.top5) out << "zero_shot_top5: " << *zero_shot.top5 << '\n';
  return out.str();
}

EvalReport evaluate(const Checkpoint& model, const Dataset& val, const SynthSpec& synth) {
  const auto emb = embed_dataset(model, val);
  EvalReport r;
  r.num_pairs = val.size;
  const int k5 = static_cast<int>(std::min<std::int64_t>(5, val.size));
  r.i2t_r1 = recall_at_k(emb.image, emb.text, 1, Direction::image_to_text);
  r.i2t_r5 = recall_at_k(emb.image, emb.text, k5, Direction::image_to_text);
  r.t2i_r1 = recall_at_k(emb.image, emb.text, 1, Direction::text_to_image);
  r.t2i_r5 = recall_at_k(emb.image, emb.text, k5, Direction::text_to_image);
  r.zero_shot = zero_shot_classify(emb.image, class_embeddings(model, synth), val.labels);
  return r;
}

namespace {

double tower_flops(const ModelSpec& spec, Modality m, double tokens) {
  const auto& t = spec.tower(m);
  const double d = t.model_dim, h = t.mlp_hidden_dim, heads = t.num_heads, T = tokens;
  const auto sparse = moe_layers(spec, m);
  double f = 0.0;
  for (int layer = 0; layer < t.num_layers; ++layer) {
    f += 2 * 5 * T * d;                            // two layer norms
    f += 8 * T * d * d + 4 * T * T * d;            // QKVO projections, logits and values
    f += 5 * heads * T * T;                        // attention softmax
    const double mlp = 4 * T * d * h + 5 * T * h;  // two matmuls and GeLU
    if (std::find(sparse.begin(), sparse.end(), layer) != sparse.end()) {
      const double e = spec.moe->num_experts, k = spec.moe->top_k;
      f += k * mlp + 2 * T * d * e + 5 * T * e;
    } else {
      f += mlp;
    }
  }
  f += 5 * d + 2 * d * spec.embed_dim;  // pooled layer norm and projection
  return f;
}

}  // namespace

CostReport flops_estimate(const ModelSpec& spec, const std::string& name) {
  validate(spec);
  CostReport r;
  r.config = name;
  r.params = parameter_count(spec);
  const double patch_dim = static_cast<double>(spec.channels) * spec.patch_size * spec.patch_size;
  const double stem = 2.0 * spec.num_patches() * patch_dim * spec.image_tower.model_dim;
  r.image_gflops = (stem + tower_flops(spec, Modality::image, spec.image_tokens())) / 1e9;
  r.text_gflops = tower_flops(spec, Modality::text, spec.text_tower.max_tokens) / 1e9;
  return r;
}

std::string cost_csv_header() { return "config,params,image_gflops,text_gflops,total_gflops"; }

std::string cost_csv_row(const CostReport& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%s,%lld,%.4f,%.4f,%.4f", r.config.c_str(), static_cast<long long>(r.params),
                r.image_gflops, r.text_gflops, r.total_gflops());
  return buf;
}

RouterTrace::LayerStats& RouterTrace::find_or_add(Modality m, int layer, int experts, int top_k) {
  for (auto& l : layers_)
    if (l.modality == m && l.layer == layer) {
      if (static_cast<int>(l.experts.size()) != experts || l.top_k != top_k)
        throw ContractError("RouterTrace: layer geometry changed between outcomes");
      return l;
    }
  LayerStats l;
  l.modality = m;
  l.layer = layer;
  l.top_k = top_k;
  l.experts.resize(static_cast<std::size_t>(experts));
  layers_.push_back(std::move(l));
  std::sort(layers_.begin(), layers_.end(), [](const LayerStats& a, const LayerStats& b) {
    return std::pair(a.modality, a.layer) < std::pair(b.modality, b.layer);
  });
  for (auto& x : layers_)
    if (x.modality == m && x.layer == layer) return x;
  throw ContractError("RouterTrace: internal lookup failure");
}

void RouterTrace::add(const RoutingOutcome& o) {
  auto& l = find_or_add(o.modality, o.layer_id, o.num_experts, o.top_k);
  l.tokens += o.num_tokens();
  const auto probs = o.gate_probs.data();
  for (int e = 0; e < o.num_experts; ++e) {
    auto& c = l.experts[static_cast<std::size_t>(e)];
    c.assigned += o.assigned_count(e);
    c.selected += o.selected_count(e);
    c.dropped += o.dropped_count(e);
    double s = 0.0;
    for (std::int64_t j = 0; j < o.num_tokens(); ++j) s += probs[static_cast<std::size_t>(j * o.num_experts + e)];
    c.gate_prob_sum += s;
  }
}

void RouterTrace::merge(const RouterTrace& other) {
  for (const auto& src : other.layers_) {
    auto& dst = find_or_add(src.modality, src.layer, static_cast<int>(src.experts.size()), src.top_k);
    dst.tokens += src.tokens;
    for (std::size_t e = 0; e < src.experts.size(); ++e) {
      dst.experts[e].assigned += src.experts[e].assigned;
      dst.experts[e].selected += src.experts[e].selected;
      dst.experts[e].dropped += src.experts[e].dropped;
      dst.experts[e].gate_prob_sum += src.experts[e].gate_prob_sum;
    }
  }
}

const RouterTrace::LayerStats& RouterTrace::layer(Modality m, int layer) const {
  for (const auto& l : layers_)
    if (l.modality == m && l.layer == layer) return l;
  throw ContractError("RouterTrace: no " + to_string(m) + " layer " + std::to_string(layer));
}

std::int64_t RouterTrace::tokens(Modality m) const {
  for (const auto& l : layers_)
    if (l.modality == m) return l.tokens;
  return 0;
}

double RouterTrace::assign_ratio(const LayerStats& l, int expert) {
  const double denom = static_cast<double>(l.tokens) * l.top_k;
  return denom > 0 ? static_cast<double>(l.experts[static_cast<std::size_t>(expert)].assigned) / denom : 0.0;
}

double RouterTrace::mean_gate_prob(const LayerStats& l, int expert) {
  return l.tokens > 0 ? l.experts[static_cast<std::size_t>(expert)].gate_prob_sum / static_cast<double>(l.tokens) : 0.0;
}

bool RouterTrace::conserved() const {
  for (const auto& l : layers_) {
    std::int64_t total = 0;
    for (const auto& c : l.experts) total += c.assigned + c.dropped;
    if (total != l.tokens * l.top_k) return false;
  }
  return true;
}

std::string RouterTrace::to_csv() const {
  std::string out = "modality,layer,expert,assign_count,drop_count,assign_ratio,mean_gate_prob\n";
  char buf[64];
  for (const auto& l : layers_)
    for (std::size_t e = 0; e < l.experts.size(); ++e) {
      const auto& c = l.experts[e];
      out += to_string(l.modality) + "," + std::to_string(l.layer) + "," + std::to_string(e) + "," +
             std::to_string(c.assigned) + "," + std::to_string(c.dropped) + ",";
      std::snprintf(buf, sizeof buf, "%.6f,%.6f\n", assign_ratio(l, static_cast<int>(e)),
                    mean_gate_prob(l, static_cast<int>(e)));
      out += buf;
    }
  return out;
}

RouterTrace collect_router_trace(const Checkpoint& model, const Dataset& data, int batch_size,
                                 const RoutingOptions& options) {
  if (!model.spec.has_moe(Modality::image) && !model.spec.has_moe(Modality::text))
    throw ContractError("collect_router_trace: model has no MoE layers (empty trace)");
  ParamStore params = frozen(model.params);
  RouterTrace trace;
  std::uint64_t chunk = 0;
  for (std::int64_t begin = 0; begin < data.size; begin += batch_size, ++chunk) {
    const auto end = std::min<std::int64_t>(data.size, begin + batch_size);
    const Batch batch = make_batch(data, begin, end);
    RoutingOptions opts = options;
    opts.jitter_seed = options.jitter_seed + 1000003ULL * chunk;
    for (Modality m : {Modality::image, Modality::text}) {
      Graph g;
      g.set_grad_enabled(false);
      ParamBinding binding(g, params);
      for (const auto& layer : encode(binding, model.spec, batch, m, opts).routing) trace.add(layer.outcome);
    }
  }
  return trace;
}

std::int64_t DropMap::count() const { return std::count(cells.begin(), cells.end(), 1); }

std::string DropMap::to_text() const {
  std::string out;
  for (int y = 0; y < grid; ++y) {
    for (int x = 0; x < grid; ++x) out += cells[static_cast<std::size_t>(y * grid + x)] ? 'X' : '.';
    out += '\n';
  }
  return out;
}

std::vector<DropMap> render_drop_maps(const Checkpoint& model, const Tensor& images, int layer,
                                      const RoutingOptions& options) {
  const auto sparse = moe_layers(model.spec, Modality::image);
  if (std::find(sparse.begin(), sparse.end(), layer) == sparse.end())
    throw ContractError("render_drop_maps: image layer " + std::to_string(layer) + " is not an MoE layer");
  ParamStore params = frozen(model.params);
  Graph g;
  g.set_grad_enabled(false);
  ParamBinding binding(g, params);
  const auto enc = encode_images(binding, model.spec, images, options);
  const RoutingOutcome* outcome = nullptr;
  for (const auto& l : enc.routing)
    if (l.outcome.layer_id == layer) outcome = &l.outcome;
  if (!outcome) throw ContractError("render_drop_maps: layer produced no routing outcome");
  const int grid = model.spec.image_size / model.spec.patch_size;
  const std::int64_t seq = model.spec.image_tokens();
  std::vector<DropMap> maps;
  for (std::int64_t b = 0; b < images.dim(0); ++b) {
    DropMap m;
    m.layer = layer;
    m.grid = grid;
    m.class_token_dropped = outcome->fully_dropped(b * seq);
    for (std::int64_t t = 1; t < seq; ++t) m.cells.push_back(outcome->fully_dropped(b * seq + t) ? 1 : 0);
    maps.push_back(std::move(m));
  }
  return maps;
}

void write_drop_map_ppm(const std::filesystem::path& path, const Tensor& images, std::int64_t index,
                        const DropMap& map, int patch_size) {
  if (images.rank() != 4 || index < 0 || index >= images.dim(0))
    throw IndexError("write_drop_map_ppm: image index out of range");
  const auto channels = images.dim(1), h = images.dim(2), w = images.dim(3);
  if (map.grid * patch_size != h || h != w) throw DimensionError("write_drop_map_ppm: drop map does not match image");
  std::string pixels;
  pixels.reserve(static_cast<std::size_t>(h * w * 3));
  auto px = [&](std::int64_t c, std::int64_t y, std::int64_t x) {
    const float v = images.data()[static_cast<std::size_t>(((index * channels + c) * h + y) * w + x)];
    return std::clamp(v, 0.0f, 1.0f) * 255.0f;
  };
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      const bool dropped = map.cells[static_cast<std::size_t>((y / patch_size) * map.grid + x / patch_size)];
      for (std::int64_t c = 0; c < 3; ++c) {
        float v = px(std::min(c, channels - 1), y, x);
        if (dropped) v = c == 0 ? 0.5f * v + 127.5f : 0.5f * v;
        pixels.push_back(static_cast<char>(static_cast<std::uint8_t>(std::lround(v))));
      }
    }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out << "P6\n" << w << ' ' << h << "\n255\n";
  out.write(pixels.data(), static_cast<std::streamsize>(pixels.size()));
}

}  // namespace mucp
