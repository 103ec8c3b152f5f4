#pragma once

#include "mucp/checkpoint.hpp"
#include "mucp/data.hpp"
#include "mucp/encoder.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace mucp {

enum class Direction { image_to_text, text_to_image };

/// Fraction of queries whose paired row ranks within the top k by dot
/// product; among equal scores the lower index ranks first.
double recall_at_k(const Tensor& image_emb, const Tensor& text_emb, int k, Direction direction);

struct ZeroShotResult {
  double top1 = 0.0;
  std::optional<double> top5;  // only with at least 5 classes
};

/// Nearest class embedding per image (ties to the lower class index).
ZeroShotResult zero_shot_classify(const Tensor& image_emb, const Tensor& class_emb, std::span<const int> labels);

struct Embeddings {
  Tensor image;  // [N×embed]
  Tensor text;   // [N×embed]
};

/// Inference over a dataset in chunks of `batch_size`.
Embeddings embed_dataset(const Checkpoint& model, const Dataset& data, int batch_size = 128,
                         const RoutingOptions& options = {});

/// One embedding per class: the normalized mean of its caption embedded at every location.
Tensor class_embeddings(const Checkpoint& model, const SynthSpec& synth);

struct EvalReport {
  double i2t_r1 = 0, i2t_r5 = 0, t2i_r1 = 0, t2i_r5 = 0;
  ZeroShotResult zero_shot;
  std::int64_t num_pairs = 0;

  std::string to_text() const;
};

EvalReport evaluate(const Checkpoint& model, const Dataset& val, const SynthSpec& synth);

struct CostReport {
  std::string config;
  std::int64_t params = 0;
  double image_gflops = 0, text_gflops = 0;
  double total_gflops() const { return image_gflops + text_gflops; }
};

/// Inference cost of one image plus one full-length caption. Multiply-adds
/// count 2 FLOPs; layer norms, activations and softmaxes count 5 per element;
/// a sparse layer pays for K expert passes per token regardless of drops.
CostReport flops_estimate(const ModelSpec& spec, const std::string& name = "");
std::string cost_csv_header();
std::string cost_csv_row(const CostReport& r);

/// Per (modality, layer, expert) routing statistics accumulated over inference.
class RouterTrace {
 public:
  struct Cell {
    std::int64_t assigned = 0;  // post-drop slots taken
    std::int64_t selected = 0;  // pre-drop top-K choices
    std::int64_t dropped = 0;   // choices that overflowed this expert
    double gate_prob_sum = 0;   // Σ gate probability over all tokens seen
  };
  struct LayerStats {
    Modality modality = Modality::image;
    int layer = 0;
    int top_k = 0;
    std::int64_t tokens = 0;
    std::vector<Cell> experts;
  };

  void add(const RoutingOutcome& outcome);
  /// Elementwise sum with a trace over the same layers.
  void merge(const RouterTrace& other);

  const std::vector<LayerStats>& layers() const { return layers_; }
  const LayerStats& layer(Modality m, int layer) const;
  std::int64_t tokens(Modality m) const;

  /// Post-drop share of the layer's tokens·K selections held by `expert`.
  static double assign_ratio(const LayerStats& l, int expert);
  static double mean_gate_prob(const LayerStats& l, int expert);

  /// Σ assigned + Σ dropped == tokens·K on every layer.
  bool conserved() const;

  std::string to_csv() const;

 private:
  LayerStats& find_or_add(Modality m, int layer, int experts, int top_k);
  std::vector<LayerStats> layers_;
};

/// Routes every sample of `data` through the model in batches of `batch_size`.
/// Throws ContractError for a model without MoE layers.
RouterTrace collect_router_trace(const Checkpoint& model, const Dataset& data, int batch_size = 64,
                                 const RoutingOptions& options = {});

struct DropMap {
  int layer = 0;
  int grid = 0;                 // patches per side
  std::vector<std::uint8_t> cells;  // grid×grid, 1 = token lost all K assignments
  bool class_token_dropped = false;

  std::int64_t count() const;
  std::string to_text() const;
};

/// Drop maps of image MoE layer `layer` for each image of `images` (routed as one batch).
std::vector<DropMap> render_drop_maps(const Checkpoint& model, const Tensor& images, int layer,
                                      const RoutingOptions& options = {});

/// Binary P6 image of sample `index` with dropped patches tinted red.
void write_drop_map_ppm(const std::filesystem::path& path, const Tensor& images, std::int64_t index,
                        const DropMap& map, int patch_size);

}  // namespace mucp
