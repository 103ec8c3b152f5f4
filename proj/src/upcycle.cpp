#include "mucp/upcycle.hpp"

#include "mucp/errors.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace mucp {

namespace {

std::string tower_label(const ModelSpec& spec, Modality m) {
  return spec.backbone == Backbone::shared ? "trunk" : to_string(m);
}

}  // namespace

bool SurgeryReport::identity_holds(const ModelSpec& sparse_spec) const {
  if (!sparse_spec.moe) return false;
  std::int64_t expected = total_params_dense;
  for (const auto& c : converted_layers) {
    const auto& tower = c.tower == "text" ? sparse_spec.text_tower : sparse_spec.image_tower;
    expected += static_cast<std::int64_t>(sparse_spec.moe->num_experts - 1) * mlp_parameter_count(tower) +
                static_cast<std::int64_t>(tower.model_dim) * sparse_spec.moe->num_experts;
  }
  return expected == total_params_sparse;
}

std::string SurgeryReport::to_text() const {
  std::ostringstream out;
  out << "converted_layers:";
  for (const auto& c : converted_layers) out << ' ' << c.tower << '.' << c.layer;
  out << "\ncopied_params: " << copied_params << "\nfresh_params: " << fresh_params
      << "\ntotal_params_dense: " << total_params_dense << "\ntotal_params_sparse: " << total_params_sparse << '\n';
  return out.str();
}

UpcycleResult upcycle_checkpoint(const Checkpoint& dense, const MoESpec& moe, MoEModality moe_modality,
                                 std::uint64_t seed) {
  if (dense.spec.moe) throw ContractError("upcycle: source checkpoint already has MoE layers");
  check_layout(dense.spec, dense.params);

  UpcycleResult result;
  Checkpoint& sparse = result.sparse;
  sparse.spec = dense.spec;
  sparse.spec.moe = moe;
  sparse.spec.moe_modality = moe_modality;
  validate(sparse.spec);
  sparse.step = dense.step;
  sparse.seed = dense.seed;
  sparse.upcycled = true;

  SurgeryReport& report = result.report;
  report.total_params_dense = dense.params.total_elements();
  for (Modality m : {Modality::image, Modality::text}) {
    if (sparse.spec.backbone == Backbone::shared && m == Modality::text) break;
    for (int layer : moe_layers(sparse.spec, m)) report.converted_layers.push_back({tower_label(sparse.spec, m), layer});
  }

  std::mt19937_64 rng(seed);
  std::normal_distribution<float> router_init(0.0f, 0.02f);
  const std::string expert_tag = ".moe.experts.";
  for (const auto& info : parameter_layout(sparse.spec)) {
    const auto& name = info.name;
    if (dense.params.contains(name)) {
      sparse.params.add(name, dense.params.at(name));
      continue;
    }
    const auto router_at = name.find(".moe.router.w");
    const auto expert_at = name.find(expert_tag);
    if (router_at != std::string::npos) {
      Tensor w(info.shape);
      for (auto& v : w.data()) v = router_init(rng);
      report.fresh_params += w.numel();
      sparse.params.add(name, std::move(w));
    } else if (expert_at != std::string::npos) {
      const auto dot = name.find('.', expert_at + expert_tag.size());
      const auto source = name.substr(0, expert_at) + ".mlp" + name.substr(dot);
      if (!dense.params.contains(source))
        throw ContractError("upcycle: dense checkpoint lacks '" + source + "' needed for '" + name + "'");
      const Tensor& src = dense.params.at(source);
      report.copied_params += src.numel();
      sparse.params.add(name, src);
    } else {
      throw ContractError("upcycle: no source for parameter '" + name + "'");
    }
  }
  report.total_params_sparse = sparse.params.total_elements();
  check_layout(sparse.spec, sparse.params);
  if (!report.identity_holds(sparse.spec))
    throw ContractError("upcycle: parameter-count identity violated (" + std::to_string(report.total_params_sparse) +
                        " sparse vs " + std::to_string(report.total_params_dense) + " dense)");
  return result;
}

EquivalenceReport verify_equivalence(const Checkpoint& dense, const Checkpoint& sparse, const Batch& batch,
                                     bool normalize_after, bool require_no_drops) {
  if (!sparse.spec.moe) throw ContractError("verify_equivalence: sparse checkpoint has no MoE layers");
  ModelSpec forced = sparse.spec;
  forced.moe->normalize_gates_after_routing = normalize_after;
  const double no_drop = static_cast<double>(forced.moe->num_experts);
  forced.moe->capacity_image = no_drop;
  forced.moe->capacity_text = no_drop;

  ParamStore dense_params = dense.params;
  ParamStore sparse_params = sparse.params;
  dense_params.set_requires_grad(false);
  sparse_params.set_requires_grad(false);

  EquivalenceReport report;
  for (Modality m : {Modality::image, Modality::text}) {
    Graph gd, gs;
    gd.set_grad_enabled(false);
    gs.set_grad_enabled(false);
    ParamBinding pd(gd, dense_params), ps(gs, sparse_params);
    const auto a = encode(pd, dense.spec, batch, m);
    const auto b = encode(ps, forced, batch, m);
    for (const auto& layer : b.routing) report.dropped += layer.outcome.total_dropped();
    const auto av = a.embeddings.value().data(), bv = b.embeddings.value().data();
    for (std::size_t i = 0; i < av.size(); ++i)
      report.max_abs_deviation =
          std::max(report.max_abs_deviation, std::abs(static_cast<double>(av[i]) - static_cast<double>(bv[i])));
  }
  if (require_no_drops && report.dropped > 0)
    throw ContractError("verify_equivalence: " + std::to_string(report.dropped) +
                        " assignments dropped under the forced no-drop capacity");
  return report;
}

}  // namespace mucp
