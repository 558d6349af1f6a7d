#pragma once

// Causal interventions on the residual stream at the last token position:
// subspace patching, ablation, isolation and cross-context transfer, with the
// CIE / NormCIE / CMA effect metrics.

#include "csl/common.hpp"
#include "csl/stats.hpp"
#include "csl/toy/model.hpp"
#include "csl/toy/task.hpp"

#include <map>
#include <optional>
#include <set>

namespace csl {

using ToyModel = toy::Model<double>;
using Trace = toy::ForwardTrace<double>;

enum class ProjectorOrigin { Gcca, Random, Transferred };

inline std::string to_string(ProjectorOrigin o) {
  switch (o) {
    case ProjectorOrigin::Gcca: return "gcca";
    case ProjectorOrigin::Random: return "random";
    case ProjectorOrigin::Transferred: return "transferred";
  }
  return "?";
}

/// Orthogonal projector P = W W^T onto an r-dimensional subspace of R^d. P is
/// never formed; products go through W.
class Projector {
 public:
  Projector(Matrix basis, int layer = 0, ProjectorOrigin origin = ProjectorOrigin::Gcca, std::string id = {})
      : w_(std::move(basis)), layer_(layer), origin_(origin), id_(std::move(id)) {
    require(w_.cols() > 0 && w_.rows() > 0, "empty basis");
    require(w_.cols() <= w_.rows(), "projector rank exceeds ambient dimension");
    require(orthonormality_error(w_) <= 1e-6, "projector basis is not orthonormal");
  }

  const Matrix& basis() const { return w_; }
  Index dim() const { return w_.rows(); }
  Index rank() const { return w_.cols(); }
  int layer() const { return layer_; }
  ProjectorOrigin origin() const { return origin_; }
  const std::string& id() const { return id_; }

  Vector apply(const Eigen::Ref<const Vector>& h) const {
    require(h.size() == dim(), "dimension mismatch: vector " + std::to_string(h.size()) + " vs projector " +
                                   std::to_string(dim()));
    return w_ * (w_.transpose() * h);
  }

 private:
  Matrix w_;
  int layer_;
  ProjectorOrigin origin_;
  std::string id_;
};

struct Decomposition {
  Vector parallel;
  Vector perpendicular;
};

/// h = h_par + h_perp with h_par = W W^T h.
inline Decomposition decompose(const Eigen::Ref<const Vector>& h, const Projector& proj) {
  Decomposition out;
  out.parallel = proj.apply(h);
  out.perpendicular = h - out.parallel;
  return out;
}

/// Orthonormal basis from the QR factor of a seeded standard-normal d x r matrix.
inline Projector random_subspace(Index d, Index r, std::uint64_t seed, int layer = 0) {
  require(r >= 1, "random_subspace: rank must be positive");
  require(r <= d, "random_subspace: rank exceeds dimension");
  Rng rng = make_rng(seed, 0x5eedULL);
  return Projector(orthonormal_basis(gaussian_matrix(d, r, rng)), layer, ProjectorOrigin::Random,
                   "random-" + std::to_string(seed));
}

// ---------------------------------------------------------------------------
// Intervention specs

enum class InterventionKind { Patch, Ablate, Isolate, Transfer };

inline std::string to_string(InterventionKind k) {
  switch (k) {
    case InterventionKind::Patch: return "patch";
    case InterventionKind::Ablate: return "ablate";
    case InterventionKind::Isolate: return "isolate";
    case InterventionKind::Transfer: return "transfer";
  }
  return "?";
}

inline InterventionKind intervention_kind_from_string(const std::string& s) {
  if (s == "patch") return InterventionKind::Patch;
  if (s == "ablate") return InterventionKind::Ablate;
  if (s == "isolate") return InterventionKind::Isolate;
  if (s == "transfer") return InterventionKind::Transfer;
  fail_validation("unknown intervention kind '" + s + "'");
}

struct TransferPayload {
  std::string map_id;
  int source_concept = 0;  // q_a
  int target_concept = 0;  // q_b
};

struct InterventionSpec {
  InterventionKind kind = InterventionKind::Patch;
  std::vector<int> layers;
  std::string projector_ref = "gcca";
  toy::Corruption corruption = toy::Corruption::None;
  std::string token_position = "last";
  std::optional<TransferPayload> transfer;
};

inline void validate_spec(const InterventionSpec& s, int num_layers) {
  require(!s.layers.empty(), "intervention needs at least one layer");
  for (int l : s.layers)
    require(l >= 0 && l <= num_layers, "layer " + std::to_string(l) + " out of range [0, " + std::to_string(num_layers) + "]");
  require(s.token_position == "last", "only the last token position is supported");
  if (s.kind == InterventionKind::Transfer) require(s.transfer.has_value(), "transfer intervention needs a transfer payload");
  if (s.kind == InterventionKind::Patch) require(s.corruption != toy::Corruption::None, "patch intervention needs a corruption");
}

inline InterventionSpec spec_from_json(const json& j) {
  InterventionSpec s;
  try {
    s.kind = intervention_kind_from_string(j.at("kind").get<std::string>());
    s.layers = j.at("layers").get<std::vector<int>>();
    s.projector_ref = j.value("projector_ref", s.projector_ref);
    s.corruption = toy::corruption_from_string(j.value("corruption", std::string("none")));
    s.token_position = j.value("token_position", s.token_position);
    if (j.contains("transfer")) {
      const auto& t = j.at("transfer");
      s.transfer = TransferPayload{t.value("map_id", std::string()), t.at("source_concept").get<int>(),
                                   t.at("target_concept").get<int>()};
    }
  } catch (const json::exception& e) {
    fail_validation(std::string("malformed intervention spec: ") + e.what());
  }
  return s;
}

inline json to_json(const InterventionSpec& s) {
  json j{{"kind", to_string(s.kind)},
         {"layers", s.layers},
         {"projector_ref", s.projector_ref},
         {"corruption", toy::to_string(s.corruption)},
         {"token_position", s.token_position}};
  if (s.transfer)
    j["transfer"] = {{"map_id", s.transfer->map_id},
                     {"source_concept", s.transfer->source_concept},
                     {"target_concept", s.transfer->target_concept}};
  return j;
}

// ---------------------------------------------------------------------------
// Forward passes with residual edits

inline void check_layer(const ToyModel& model, int layer) {
  require(layer >= 0 && layer <= model.config().layers,
          "layer " + std::to_string(layer) + " out of range [0, " + std::to_string(model.config().layers) + "]");
}

inline void check_token(const ToyModel& model, int tok) {
  require(tok >= 0 && tok < model.config().vocab, "token id " + std::to_string(tok) + " missing from vocabulary");
}

inline Trace trace_of(const ToyModel& model, std::span<const int> tokens) {
  return *model.forward(tokens, {.trace = true}).trace;
}

/// Runs `tokens` with h_l replaced by edit(l, h_l) at the last position for
/// every layer in `layers`.
template <typename Edit>
toy::ForwardResult<double> forward_with_residual_edit(const ToyModel& model, std::span<const int> tokens,
                                                      const std::set<int>& layers, Edit&& edit, bool trace = false) {
  for (int l : layers) check_layer(model, l);
  toy::Intervention<double> iv;
  iv.residual = [&](int layer, Eigen::Ref<Vector> h) {
    if (layers.count(layer)) {
      Vector out = edit(layer, Vector(h));
      h = out;
    }
  };
  return model.forward(tokens, {.trace = trace}, &iv);
}

/// Forward pass of the corrupt prompt with the subspace component of h_l
/// replaced by the clean run's: h <- h + P (h_clean - h).
inline toy::ForwardResult<double> patch_subspace(const ToyModel& model, const Trace& clean_trace,
                                                 std::span<const int> corrupt_tokens, int layer, const Projector& proj,
                                                 bool trace = false) {
  check_layer(model, layer);
  const Vector& h_clean = clean_trace.hidden.at(static_cast<std::size_t>(layer));
  return forward_with_residual_edit(
      model, corrupt_tokens, {layer}, [&](int, const Vector& h) -> Vector { return h + proj.apply(h_clean - h); },
      trace);
}

inline toy::ForwardResult<double> patch_subspace(const ToyModel& model, std::span<const int> clean_tokens,
                                                 std::span<const int> corrupt_tokens, int layer, const Projector& proj,
                                                 bool trace = false) {
  return patch_subspace(model, trace_of(model, clean_tokens), corrupt_tokens, layer, proj, trace);
}

inline constexpr double kNormCieMinDenominator = 1e-9;

struct PatchEffect {
  double cie = 0;
  double clean_logprob = 0;
  double corrupt_logprob = 0;
  double patched_logprob = 0;
  std::optional<double> norm_cie;  // empty when |clean - corrupt| < 1e-9
};

inline PatchEffect make_patch_effect(double clean_lp, double corrupt_lp, double patched_lp) {
  PatchEffect e;
  e.clean_logprob = clean_lp;
  e.corrupt_logprob = corrupt_lp;
  e.patched_logprob = patched_lp;
  e.cie = patched_lp - corrupt_lp;
  const double denom = clean_lp - corrupt_lp;
  if (std::abs(denom) >= kNormCieMinDenominator) e.norm_cie = e.cie / denom;
  return e;
}

/// CIE = log p(y | corrupt, patched) - log p(y | corrupt) and
/// NormCIE = CIE / (log p(y | clean) - log p(y | corrupt)).
inline PatchEffect cie(const ToyModel& model, std::span<const int> clean_tokens, std::span<const int> corrupt_tokens,
                       int layer, const Projector& proj, int target) {
  check_token(model, target);
  const Trace clean = trace_of(model, clean_tokens);
  const auto corrupt = model.forward(corrupt_tokens);
  const auto patched = patch_subspace(model, clean, corrupt_tokens, layer, proj);
  return make_patch_effect(clean.log_probs(target), corrupt.log_probs(target), patched.log_probs(target));
}

inline double norm_cie(const ToyModel& model, std::span<const int> clean_tokens, std::span<const int> corrupt_tokens,
                       int layer, const Projector& proj, int target) {
  const auto e = cie(model, clean_tokens, corrupt_tokens, layer, proj, target);
  if (!e.norm_cie) fail_compute("NormCIE undefined: corruption left the target log-probability unchanged");
  return *e.norm_cie;
}

/// log p(y | h') - log p(y) where h' = edit(h) at each listed layer during one pass.
template <typename Edit>
double residual_edit_delta(const ToyModel& model, std::span<const int> tokens, const std::set<int>& layers, int target,
                           Edit&& edit) {
  check_token(model, target);
  const auto base = model.forward(tokens);
  const auto mod = forward_with_residual_edit(model, tokens, layers, std::forward<Edit>(edit));
  return mod.log_probs(target) - base.log_probs(target);
}

using ProjectorSet = std::map<int, Projector>;

inline const Projector& projector_for(const ProjectorSet& ps, int layer) {
  auto it = ps.find(layer);
  require(it != ps.end(), "no projector for layer " + std::to_string(layer));
  return it->second;
}

/// h <- (I - P) h at each layer in `layers`.
inline double ablate(const ToyModel& model, std::span<const int> tokens, const std::set<int>& layers,
                     const ProjectorSet& projectors, int target) {
  return residual_edit_delta(model, tokens, layers, target, [&](int l, const Vector& h) -> Vector {
    return h - projector_for(projectors, l).apply(h);
  });
}

/// h <- P h at each layer in `layers`.
inline double isolate(const ToyModel& model, std::span<const int> tokens, const std::set<int>& layers,
                      const ProjectorSet& projectors, int target) {
  return residual_edit_delta(model, tokens, layers, target,
                             [&](int l, const Vector& h) -> Vector { return projector_for(projectors, l).apply(h); });
}

inline double ablate(const ToyModel& model, std::span<const int> tokens, int layer, const Projector& proj, int target) {
  ProjectorSet ps;
  ps.emplace(layer, proj);
  return ablate(model, tokens, {layer}, ps, target);
}

inline double isolate(const ToyModel& model, std::span<const int> tokens, int layer, const Projector& proj,
                      int target) {
  ProjectorSet ps;
  ps.emplace(layer, proj);
  return isolate(model, tokens, {layer}, ps, target);
}

// ---------------------------------------------------------------------------
// Cross-context transfer

struct TransferMap {
  std::string source_context;
  std::string target_context;
  int layer = 0;
  Matrix Q;  // r x r orthogonal, minimises ||Y_src Q - Y_tgt||_F
  std::vector<int> fit_concepts;
};

/// Orthogonal Procrustes: Q = U V^T from the SVD U S V^T of Y_src^T Y_tgt.
inline TransferMap fit_transfer_map(const Eigen::Ref<const Matrix>& y_src, const Eigen::Ref<const Matrix>& y_tgt) {
  require(y_src.rows() == y_tgt.rows() && y_src.cols() == y_tgt.cols(), "fit_transfer_map: shape mismatch");
  require(y_src.rows() >= y_src.cols(), "fit_transfer_map: need at least r training concepts");
  const Matrix cross = y_src.transpose() * y_tgt;
  if (!(cross.norm() > 0.0)) fail_validation("fit_transfer_map: degenerate (zero) cross-covariance");
  Eigen::JacobiSVD<Matrix> svd(cross, Eigen::ComputeFullU | Eigen::ComputeFullV);
  TransferMap out;
  out.Q = svd.matrixU() * svd.matrixV().transpose();
  return out;
}

inline double procrustes_residual(const Matrix& y_src, const Matrix& y_tgt, const Matrix& q) {
  return (y_src * q - y_tgt).norm();
}

struct TransferEffect {
  double cma = 0;
  double gap_before = 0;  // log p(y_a) - log p(y_b), unpatched target prompt
  double gap_after = 0;
};

/// Adds the source-context offset between q_a and q_b, carried into the target
/// subspace, to the target prompt's state for q_b:
///   delta = W_src^T (h_src(q_a) - h_src(q_b));  h <- h + W_tgt (delta^T Q)^T
/// and reports the change in log p(y_a) - log p(y_b).
inline TransferEffect transfer_patch(const ToyModel& model, std::span<const int> target_prompt, const Matrix& q,
                                     const Projector& source_basis, const Projector& target_basis,
                                     const Vector& h_source_a, const Vector& h_source_b, int layer, int token_a,
                                     int token_b) {
  check_layer(model, layer);
  check_token(model, token_a);
  check_token(model, token_b);
  require(q.rows() == source_basis.rank() && q.cols() == target_basis.rank(), "transfer map shape mismatch");
  const Vector delta = source_basis.basis().transpose() * (h_source_a - h_source_b);
  const Vector shift = target_basis.basis() * (q.transpose() * delta);
  const auto base = model.forward(target_prompt);
  const auto mod = forward_with_residual_edit(model, target_prompt, {layer},
                                              [&](int, const Vector& h) -> Vector { return h + shift; });
  TransferEffect e;
  e.gap_before = base.log_probs(token_a) - base.log_probs(token_b);
  e.gap_after = mod.log_probs(token_a) - mod.log_probs(token_b);
  e.cma = e.gap_after - e.gap_before;
  return e;
}

inline void check_held_out(const TransferMap& map, int q_a, int q_b) {
  for (int c : {q_a, q_b})
    require(std::find(map.fit_concepts.begin(), map.fit_concepts.end(), c) == map.fit_concepts.end(),
            "offset concept " + std::to_string(c) + " was used to fit the transfer map");
}

// ---------------------------------------------------------------------------
// Spec-driven dispatch

/// Side inputs an intervention needs beyond the prompt: the clean run for
/// patching, the precomputed residual offset for transfer.
struct InterventionAux {
  const Trace* clean = nullptr;
  std::optional<Vector> transfer_shift;
};

/// Forward pass of `tokens` with `spec` applied at each of its layers. The
/// projectors are looked up per layer.
inline toy::ForwardResult<double> forward_with_intervention(const ToyModel& model, std::span<const int> tokens,
                                                            const InterventionSpec& spec, const ProjectorSet& projectors,
                                                            const InterventionAux& aux = {}, bool trace = true) {
  validate_spec(spec, model.config().layers);
  const std::set<int> layers(spec.layers.begin(), spec.layers.end());
  if (spec.kind != InterventionKind::Transfer)
    for (int l : layers) projector_for(projectors, l);
  switch (spec.kind) {
    case InterventionKind::Patch:
      if (!aux.clean) fail_validation("site mismatch: patch needs the clean run's trace");
      return forward_with_residual_edit(
          model, tokens, layers,
          [&](int l, const Vector& h) -> Vector {
            return h + projector_for(projectors, l).apply(aux.clean->hidden.at(std::size_t(l)) - h);
          },
          trace);
    case InterventionKind::Ablate:
      return forward_with_residual_edit(
          model, tokens, layers, [&](int l, const Vector& h) -> Vector { return h - projector_for(projectors, l).apply(h); },
          trace);
    case InterventionKind::Isolate:
      return forward_with_residual_edit(
          model, tokens, layers, [&](int l, const Vector& h) -> Vector { return projector_for(projectors, l).apply(h); },
          trace);
    case InterventionKind::Transfer:
      if (!aux.transfer_shift) fail_validation("site mismatch: transfer needs a residual offset");
      require(aux.transfer_shift->size() == model.config().dim, "transfer offset has the wrong dimension");
      return forward_with_residual_edit(
          model, tokens, layers, [&](int, const Vector& h) -> Vector { return h + *aux.transfer_shift; }, trace);
  }
  fail_validation("unknown intervention kind");
}

// ---------------------------------------------------------------------------
// Effect reports

struct EffectEntry {
  std::string metric;
  int layer = -1;
  int head = -1;
  std::string condition;
  int n_demos = 0;
  std::string seed = "all";
  double value = 0;
  double ci_low = 0;
  double ci_high = 0;
  std::optional<double> baseline_value;
  std::vector<double> samples;
  int excluded = 0;
};

struct EffectReport {
  std::string metric;
  std::vector<EffectEntry> entries;
  json provenance = json::object();
};

inline json to_json(const EffectEntry& e) {
  json j{{"metric", e.metric},   {"layer", e.layer},   {"head", e.head},       {"condition", e.condition},
         {"n_demos", e.n_demos}, {"seed", e.seed},     {"value", e.value},     {"ci_low", e.ci_low},
         {"ci_high", e.ci_high}, {"samples", e.samples}, {"excluded", e.excluded}};
  j["baseline_value"] = e.baseline_value ? json(*e.baseline_value) : json(nullptr);
  return j;
}

inline json to_json(const EffectReport& r) {
  json j{{"metric", r.metric}, {"provenance", r.provenance}, {"entries", json::array()}};
  for (const auto& e : r.entries) j["entries"].push_back(to_json(e));
  return j;
}

inline std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline constexpr const char* kEffectCsvHeader =
    "metric,layer,head,condition,n_demos,seed,value,ci_low,ci_high,baseline_value";

inline std::string to_csv(const EffectReport& r) {
  std::string out = std::string(kEffectCsvHeader) + "\n";
  for (const auto& e : r.entries) {
    out += e.metric + "," + std::to_string(e.layer) + "," + std::to_string(e.head) + "," + e.condition + "," +
           std::to_string(e.n_demos) + "," + e.seed + "," + format_number(e.value) + "," + format_number(e.ci_low) +
           "," + format_number(e.ci_high) + "," + (e.baseline_value ? format_number(*e.baseline_value) : "") + "\n";
  }
  return out;
}

/// Mean with a percentile bootstrap interval; a single sample gets a
/// degenerate interval at its value.
inline EffectEntry summarize(std::string metric, std::vector<double> samples, std::uint64_t seed,
                             int resamples = kDefaultBootstrapResamples) {
  EffectEntry e;
  e.metric = std::move(metric);
  require(!samples.empty(), "cannot summarise an empty sample");
  e.value = mean(samples);
  if (samples.size() >= 2) {
    const auto ci = bootstrap_ci(samples, resamples, kDefaultBootstrapLevel, seed);
    e.ci_low = ci.low;
    e.ci_high = ci.high;
  } else {
    e.ci_low = e.ci_high = e.value;
  }
  e.samples = std::move(samples);
  return e;
}

}  // namespace csl
