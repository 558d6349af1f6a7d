#pragma once

// End-to-end analysis on the toy model: activation extraction into a run
// directory, per-context subspace fits, and the layer / head scans behind the
// CLI reports. Everything is a pure function of (model, world, seeds).

#include "csl/headlab.hpp"
#include "csl/subspace.hpp"
#include "csl/toy/train.hpp"

#include <filesystem>

namespace csl {

// ---------------------------------------------------------------------------
// Extraction

struct Extraction {
  std::vector<Matrix> hidden;                 // [l] n x d, l = 0..L
  std::vector<std::vector<Matrix>> heads;     // [l-1][k] n x d
  std::vector<std::vector<Matrix>> attention; // [l-1][k] n x T_max, zero-padded
  std::vector<std::string> row_ids;
  int max_len = 0;
};

struct ExtractOptions {
  bool heads = true;
  bool attention = false;
};

inline Extraction extract(const ToyModel& model, const toy::TaskRun& run, ExtractOptions opt = {}) {
  const auto& cfg = model.config();
  const Index n = static_cast<Index>(run.prompts.size());
  require(n >= 1, "run has no prompts");
  Extraction ex;
  ex.row_ids = run.concept_ids();
  for (const auto& p : run.prompts) ex.max_len = std::max(ex.max_len, static_cast<int>(p.tokens.size()));
  ex.hidden.assign(static_cast<std::size_t>(cfg.layers + 1), Matrix(n, cfg.dim));
  if (opt.heads)
    ex.heads.assign(static_cast<std::size_t>(cfg.layers),
                    std::vector<Matrix>(static_cast<std::size_t>(cfg.heads), Matrix(n, cfg.dim)));
  if (opt.attention)
    ex.attention.assign(static_cast<std::size_t>(cfg.layers),
                        std::vector<Matrix>(static_cast<std::size_t>(cfg.heads), Matrix::Zero(n, ex.max_len)));
  for (Index i = 0; i < n; ++i) {
    const auto res = model.forward(run.prompts[static_cast<std::size_t>(i)].tokens,
                                   {.trace = true, .attention = opt.attention});
    const auto& tr = *res.trace;
    for (std::size_t l = 0; l < tr.hidden.size(); ++l) ex.hidden[l].row(i) = tr.hidden[l].transpose();
    for (std::size_t l = 0; l < ex.heads.size(); ++l)
      for (std::size_t k = 0; k < ex.heads[l].size(); ++k) ex.heads[l][k].row(i) = tr.heads[l][k].transpose();
    for (std::size_t l = 0; l < ex.attention.size(); ++l)
      for (std::size_t k = 0; k < ex.attention[l].size(); ++k)
        ex.attention[l][k].row(i).head(tr.attention[l][k].size()) = tr.attention[l][k].transpose();
  }
  return ex;
}

/// (n, K, d) or (n, K, T) tensor from per-head n x m matrices.
inline TensorFile stack_heads(const std::vector<Matrix>& per_head) {
  require(!per_head.empty(), "no heads to stack");
  const Index n = per_head.front().rows(), m = per_head.front().cols();
  const Index k = static_cast<Index>(per_head.size());
  TensorFile t;
  t.shape = {std::uint64_t(n), std::uint64_t(k), std::uint64_t(m)};
  t.axes = {"concept", "head", per_head.front().cols() > 0 ? "feature" : "position"};
  t.payload.resize(static_cast<std::size_t>(n * k * m));
  for (Index i = 0; i < n; ++i)
    for (Index h = 0; h < k; ++h)
      for (Index j = 0; j < m; ++j)
        t.payload[static_cast<std::size_t>((i * k + h) * m + j)] = static_cast<float>(per_head[std::size_t(h)](i, j));
  return t;
}

inline std::vector<Matrix> unstack_heads(const TensorFile& t) {
  require(t.shape.size() == 3, "expected a rank-3 tensor");
  const Index n = Index(t.shape[0]), k = Index(t.shape[1]), m = Index(t.shape[2]);
  std::vector<Matrix> out(static_cast<std::size_t>(k), Matrix(n, m));
  for (Index i = 0; i < n; ++i)
    for (Index h = 0; h < k; ++h)
      for (Index j = 0; j < m; ++j) out[std::size_t(h)](i, j) = t.payload[static_cast<std::size_t>((i * k + h) * m + j)];
  return out;
}

/// Writes hidden_<l>.actb (and heads / attention files when extracted) plus
/// manifest.json into `dir`.
inline RunManifest write_run(const std::filesystem::path& dir, const std::string& model_id, const toy::TaskRun& run,
                             const Extraction& ex, json metadata = json::object()) {
  std::filesystem::create_directories(dir);
  RunManifest m;
  m.run_id = run.run_id;
  m.model_id = model_id;
  m.num_demonstrations = run.num_demos;
  m.seed = run.seed;
  m.concept_ids = ex.row_ids;
  m.span_table = run.span_tables();
  m.hidden_dim = static_cast<int>(ex.hidden.front().cols());
  m.num_heads = ex.heads.empty() ? 0 : static_cast<int>(ex.heads.front().size());
  m.post_norm = false;
  metadata["language"] = run.language;
  m.metadata = std::move(metadata);
  for (std::size_t l = 0; l < ex.hidden.size(); ++l) {
    const int layer = static_cast<int>(l);
    m.layer_ids.push_back(layer);
    auto t = tensor_from_matrix(ex.hidden[l]);
    t.axes = {"concept", "feature"};
    t.metadata = {{"layer", layer}, {"kind", "hidden"}, {"run_id", run.run_id}};
    const std::string rel = "hidden_" + std::to_string(layer) + ".actb";
    write_tensor(dir / rel, t);
    m.file_index[{layer, TensorKind::Hidden}] = rel;
  }
  for (std::size_t l = 0; l < ex.heads.size(); ++l) {
    const int layer = static_cast<int>(l) + 1;
    auto t = stack_heads(ex.heads[l]);
    t.metadata = {{"layer", layer}, {"kind", "head_output"}, {"run_id", run.run_id}};
    const std::string rel = "heads_" + std::to_string(layer) + ".actb";
    write_tensor(dir / rel, t);
    m.file_index[{layer, TensorKind::HeadOutput}] = rel;
  }
  for (std::size_t l = 0; l < ex.attention.size(); ++l) {
    const int layer = static_cast<int>(l) + 1;
    auto t = stack_heads(ex.attention[l]);
    t.axes = {"concept", "head", "position"};
    t.metadata = {{"layer", layer}, {"kind", "attention"}, {"run_id", run.run_id}};
    const std::string rel = "attention_" + std::to_string(layer) + ".actb";
    write_tensor(dir / rel, t);
    m.file_index[{layer, TensorKind::Attention}] = rel;
  }
  validate_manifest(m, dir);
  write_manifest(dir / "manifest.json", m);
  return m;
}

// ---------------------------------------------------------------------------
// Subspace fits

struct FitOptions {
  std::vector<int> layers;      // empty: upper half of the stack, ceil(L/2)..L
  Index rank = 0;               // 0: permutation rank selection
  Index r_max = 8;
  double pca_variance = 0.95;   // per-layer PCA before GCCA; 0 disables
  int permutations = kDefaultPermutations;
  double alpha = kDefaultRankAlpha;
  double ridge = kDefaultRidge;
  std::uint64_t seed = 0;
};

inline json to_json(const FitOptions& o) {
  return {{"layers", o.layers},   {"rank", o.rank},   {"r_max", o.r_max}, {"pca_variance", o.pca_variance},
          {"permutations", o.permutations}, {"alpha", o.alpha}, {"ridge", o.ridge}, {"seed", o.seed}};
}

inline std::vector<int> default_subspace_layers(int num_layers) {
  std::vector<int> out;
  for (int l = (num_layers + 1) / 2; l <= num_layers; ++l) out.push_back(l);
  return out;
}

struct ContextFit {
  std::string context_id;
  std::vector<int> layers;
  std::map<int, LayerActivations> centered;  // full-dimensional, centered X_l
  std::map<int, Matrix> w;                   // d x r, maps X_l to the shared coordinates
  std::map<int, Matrix> y;                   // n x r, Y_l = X_l W_l
  std::map<int, Matrix> basis;               // d x r orthonormal basis of span(W_l)
  SharedSubspace shared;                     // in the reduced coordinates when PCA is on
  std::optional<RankSelection> rank_selection;
  std::map<int, Index> pca_dims;
};

/// Centers each selected layer, optionally reduces it to its leading PCs, fits
/// GCCA (rank fixed or chosen by permutation test, at least 1) and maps W_l
/// back to the residual basis.
inline ContextFit fit_context(const std::vector<Matrix>& hidden, const std::vector<std::string>& row_ids,
                              const std::string& context_id, FitOptions opt) {
  if (opt.layers.empty()) opt.layers = default_subspace_layers(static_cast<int>(hidden.size()) - 1);
  ContextFit fit;
  fit.context_id = context_id;
  fit.layers = opt.layers;
  std::vector<LayerActivations> reduced;
  std::map<int, Matrix> to_full;
  for (int l : opt.layers) {
    require(l >= 0 && l < static_cast<int>(hidden.size()), "subspace layer " + std::to_string(l) + " out of range");
    LayerActivations x = center_columns(hidden[static_cast<std::size_t>(l)], l, context_id);
    x.row_ids = row_ids;
    if (opt.pca_variance > 0) {
      const auto pc = svd_variance_basis(x, opt.pca_variance);
      LayerActivations r = x;
      r.data = x.data * pc.basis;
      to_full[l] = pc.basis;
      fit.pca_dims[l] = pc.k;
      reduced.push_back(std::move(r));
    } else {
      to_full[l] = Matrix::Identity(x.cols(), x.cols());
      reduced.push_back(x);
    }
    fit.centered.emplace(l, std::move(x));
  }
  Index rank = opt.rank;
  if (rank <= 0) {
    const Index r_max = std::min(opt.r_max, detail::max_gcca_rank(reduced));
    fit.rank_selection = gcca_rank_select(reduced, r_max, opt.permutations, opt.alpha, opt.seed, opt.ridge);
    rank = std::max<Index>(1, fit.rank_selection->r_hat);
  }
  fit.shared = gcca_fit(reduced, rank, opt.ridge);
  for (int l : opt.layers) {
    fit.w[l] = to_full.at(l) * fit.shared.W.at(l);
    fit.y[l] = fit.centered.at(l).data * fit.w[l];
    fit.basis[l] = orthonormal_basis(fit.w[l]);
  }
  return fit;
}

inline ProjectorSet projectors_of(const ContextFit& fit) {
  ProjectorSet ps;
  for (const auto& [l, b] : fit.basis) ps.emplace(l, Projector(b, l, ProjectorOrigin::Gcca, fit.context_id));
  return ps;
}

/// Equal-rank random bases, one per layer, each from its own derived seed.
inline ProjectorSet random_projectors(const ContextFit& fit, std::uint64_t seed) {
  ProjectorSet ps;
  for (const auto& [l, b] : fit.basis)
    ps.emplace(l, random_subspace(b.rows(), b.cols(), derive_seed(seed, std::uint64_t(l)), l));
  return ps;
}

// ---------------------------------------------------------------------------
// Contexts

struct ToyContext {
  toy::TaskRun run;
  Extraction extraction;
  ContextFit fit;
};

inline ToyContext prepare_context(const ToyModel& model, const toy::TaskWorld& world, std::uint64_t seed,
                                  int num_demos, const FitOptions& fit_opt, ExtractOptions ex_opt = {}) {
  ToyContext c;
  c.run = toy::generate_task(world, seed, num_demos);
  c.extraction = extract(model, c.run, ex_opt);
  FitOptions o = fit_opt;
  o.seed = derive_seed(fit_opt.seed, seed);
  c.fit = fit_context(c.extraction.hidden, c.extraction.row_ids, c.run.run_id, o);
  return c;
}

// ---------------------------------------------------------------------------
// Scans. A ScanCell holds per-query values for one (condition, layer, head).

struct ScanCell {
  std::string condition;
  int layer = -1;
  int head = -1;
  std::vector<double> values;
  std::vector<double> baseline;
  int excluded = 0;
  int baseline_excluded = 0;

  static ScanCell make(std::string condition, int layer, int head = -1) {
    ScanCell c;
    c.condition = std::move(condition);
    c.layer = layer;
    c.head = head;
    return c;
  }
};

inline std::uint64_t corruption_seed(std::uint64_t seed, const toy::Prompt& p, toy::Corruption c) {
  return derive_seed(derive_seed(seed, std::uint64_t(p.query_concept)), std::uint64_t(c) + 1);
}

/// NormCIE of GCCA-subspace patching against an equal-rank random subspace.
inline std::vector<ScanCell> patch_scan(const ToyModel& model, const toy::TaskWorld& world, const ToyContext& ctx,
                                        const std::vector<toy::Corruption>& conditions, std::vector<int> layers,
                                        std::uint64_t seed) {
  if (layers.empty()) layers = ctx.fit.layers;
  const auto gcca = projectors_of(ctx.fit);
  const auto rnd = random_projectors(ctx.fit, derive_seed(seed, ctx.run.seed));
  std::vector<ScanCell> cells;
  for (auto cond : conditions) {
    std::map<int, ScanCell> by_layer;
    for (int l : layers) by_layer[l] = ScanCell::make(toy::to_string(cond), l);
    for (const auto& p : ctx.run.prompts) {
      const auto corrupt = toy::corrupt_prompt(world, p, cond, corruption_seed(seed, p, cond));
      const Trace clean = trace_of(model, p.tokens);
      const double lp_clean = clean.log_probs(p.target);
      const double lp_corrupt = model.forward(corrupt.tokens).log_probs(p.target);
      for (int l : layers) {
        auto& cell = by_layer[l];
        const auto a = make_patch_effect(
            lp_clean, lp_corrupt,
            patch_subspace(model, clean, corrupt.tokens, l, projector_for(gcca, l)).log_probs(p.target));
        const auto b = make_patch_effect(
            lp_clean, lp_corrupt,
            patch_subspace(model, clean, corrupt.tokens, l, projector_for(rnd, l)).log_probs(p.target));
        if (a.norm_cie) cell.values.push_back(*a.norm_cie); else ++cell.excluded;
        if (b.norm_cie) cell.baseline.push_back(*b.norm_cie); else ++cell.baseline_excluded;
      }
    }
    for (auto& [_, c] : by_layer) cells.push_back(std::move(c));
  }
  return cells;
}

enum class EditKind { Ablate, Isolate };

/// Change in log p(y) from ablating or isolating the subspace at each layer,
/// against an equal-rank random subspace.
inline std::vector<ScanCell> edit_scan(const ToyModel& model, const ToyContext& ctx, EditKind kind,
                                       std::vector<int> layers, std::uint64_t seed) {
  if (layers.empty()) layers = ctx.fit.layers;
  const auto gcca = projectors_of(ctx.fit);
  const auto rnd = random_projectors(ctx.fit, derive_seed(seed, ctx.run.seed));
  const std::string cond = kind == EditKind::Ablate ? "ablate" : "isolate";
  std::vector<ScanCell> cells;
  for (int l : layers) {
    ScanCell cell = ScanCell::make(cond, l);
    for (const auto& p : ctx.run.prompts) {
      if (kind == EditKind::Ablate) {
        cell.values.push_back(ablate(model, p.tokens, l, projector_for(gcca, l), p.target));
        cell.baseline.push_back(ablate(model, p.tokens, l, projector_for(rnd, l), p.target));
      } else {
        cell.values.push_back(isolate(model, p.tokens, l, projector_for(gcca, l), p.target));
        cell.baseline.push_back(isolate(model, p.tokens, l, projector_for(rnd, l), p.target));
      }
    }
    cells.push_back(std::move(cell));
  }
  return cells;
}

struct TransferResult {
  std::vector<ScanCell> cells;  // conditions: cross_context (baseline random), same_context
  std::vector<int> fit_concepts;
  std::vector<int> held_out;
  std::map<int, double> procrustes_residual;
};

/// Fits Q on a fraction of the query concepts (shared rows of both contexts)
/// and measures CMA on ordered pairs of held-out concepts. The baseline uses
/// random equal-rank bases in both contexts with their own Procrustes map; the
/// same-context reference uses the target's own q_a state with Q = I.
inline TransferResult transfer_scan(const ToyModel& model, const ToyContext& src, const ToyContext& tgt,
                                    std::vector<int> layers, double fit_frac, std::uint64_t seed, int max_pairs = 40) {
  require(fit_frac > 0 && fit_frac < 1, "fit fraction must lie in (0, 1)");
  require(src.extraction.row_ids == tgt.extraction.row_ids, "contexts must share query concepts in the same order");
  if (layers.empty()) layers = src.fit.layers;
  const Index n = static_cast<Index>(src.run.prompts.size());
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index(0));
  Rng rng = make_rng(seed, 0x7f5ULL);
  shuffle(order, rng);
  const Index n_fit = std::clamp<Index>(Index(std::llround(fit_frac * double(n))), 1, n - 2);
  std::vector<Index> fit_rows(order.begin(), order.begin() + n_fit), held_rows(order.begin() + n_fit, order.end());
  std::sort(fit_rows.begin(), fit_rows.end());
  std::sort(held_rows.begin(), held_rows.end());

  TransferResult res;
  for (Index i : fit_rows) res.fit_concepts.push_back(src.run.prompts[std::size_t(i)].query_concept);
  for (Index i : held_rows) res.held_out.push_back(src.run.prompts[std::size_t(i)].query_concept);

  std::vector<std::pair<Index, Index>> pairs;
  for (Index a : held_rows)
    for (Index b : held_rows)
      if (a != b) pairs.emplace_back(a, b);
  shuffle(pairs, rng);
  if (max_pairs > 0 && static_cast<int>(pairs.size()) > max_pairs) pairs.resize(static_cast<std::size_t>(max_pairs));

  auto rows_of = [&](const Matrix& m) {
    Matrix out(Index(fit_rows.size()), m.cols());
    for (std::size_t i = 0; i < fit_rows.size(); ++i) out.row(Index(i)) = m.row(fit_rows[i]);
    return out;
  };

  for (int l : layers) {
    const Projector ps(src.fit.basis.at(l), l), pt(tgt.fit.basis.at(l), l);
    const Matrix& xs = src.fit.centered.at(l).data;
    const Matrix& xt = tgt.fit.centered.at(l).data;
    auto tm = fit_transfer_map(rows_of(xs * ps.basis()), rows_of(xt * pt.basis()));
    tm.layer = l;
    tm.source_context = src.fit.context_id;
    tm.target_context = tgt.fit.context_id;
    tm.fit_concepts = res.fit_concepts;
    res.procrustes_residual[l] = procrustes_residual(rows_of(xs * ps.basis()), rows_of(xt * pt.basis()), tm.Q);

    const Index r = ps.rank();
    const Projector rs = random_subspace(ps.dim(), r, derive_seed(seed, 2 * std::uint64_t(l)), l);
    const Projector rt = random_subspace(pt.dim(), pt.rank(), derive_seed(seed, 2 * std::uint64_t(l) + 1), l);
    const Matrix q_rand = fit_transfer_map(rows_of(xs * rs.basis()), rows_of(xt * rt.basis())).Q;
    const Matrix eye = Matrix::Identity(pt.rank(), pt.rank());

    ScanCell cross = ScanCell::make("cross_context", l), same = ScanCell::make("same_context", l);
    for (const auto& [a, b] : pairs) {
      const auto& pa = tgt.run.prompts[std::size_t(a)];
      const auto& pb = tgt.run.prompts[std::size_t(b)];
      check_held_out(tm, pa.query_concept, pb.query_concept);
      const Vector ha = src.extraction.hidden[std::size_t(l)].row(a).transpose();
      const Vector hb = src.extraction.hidden[std::size_t(l)].row(b).transpose();
      cross.values.push_back(transfer_patch(model, pb.tokens, tm.Q, ps, pt, ha, hb, l, pa.target, pb.target).cma);
      cross.baseline.push_back(transfer_patch(model, pb.tokens, q_rand, rs, rt, ha, hb, l, pa.target, pb.target).cma);
      const Vector ta = tgt.extraction.hidden[std::size_t(l)].row(a).transpose();
      const Vector tb = tgt.extraction.hidden[std::size_t(l)].row(b).transpose();
      same.values.push_back(transfer_patch(model, pb.tokens, eye, pt, pt, ta, tb, l, pa.target, pb.target).cma);
      same.baseline.push_back(transfer_patch(model, pb.tokens, eye, rt, rt, ta, tb, l, pa.target, pb.target).cma);
    }
    res.cells.push_back(std::move(cross));
    res.cells.push_back(std::move(same));
  }
  return res;
}

/// Per-query head CIEs: result[q] is the L x K matrix for query q.
inline std::vector<Matrix> head_cie_samples(const ToyModel& model, const toy::TaskWorld& world,
                                            const toy::TaskRun& run, toy::Corruption cond, std::uint64_t seed) {
  const int L = model.config().layers, K = model.config().heads;
  std::vector<Matrix> out;
  for (const auto& p : run.prompts) {
    const auto corrupt = toy::corrupt_prompt(world, p, cond, corruption_seed(seed, p, cond));
    const Trace clean = trace_of(model, p.tokens);
    const double lp_corrupt = model.forward(corrupt.tokens).log_probs(p.target);
    Matrix m(L, K);
    for (int l = 1; l <= L; ++l)
      for (int k = 0; k < K; ++k) m(l - 1, k) = head_patch_cie(model, clean, corrupt.tokens, lp_corrupt, {l, k}, p.target).cie;
    out.push_back(std::move(m));
  }
  return out;
}

/// alpha / align for every head against the context's subspace; head outputs
/// are centered across concepts like the hidden states behind Y.
inline std::vector<HeadSubspaceMetrics> head_metrics(const ToyContext& ctx) {
  require(!ctx.extraction.heads.empty(), "context was extracted without head outputs");
  std::vector<std::vector<Matrix>> centered = ctx.extraction.heads;
  for (auto& layer : centered)
    for (auto& a : layer) a = center_columns(a).data;
  return head_subspace_metrics(centered, ctx.fit.w, ctx.fit.y);
}

// ---------------------------------------------------------------------------
// Aggregation across runs: per-query values -> per-run means -> bootstrap.

inline std::string cell_key(const ScanCell& c) {
  return c.condition + "/" + std::to_string(c.layer) + "/" + std::to_string(c.head);
}

/// One row per (cell, run) with a bootstrap over queries, then one "all" row
/// per cell with a bootstrap over the run means.
inline EffectReport aggregate_cells(const std::string& metric, const std::vector<std::vector<ScanCell>>& per_run,
                                    const std::vector<std::uint64_t>& run_seeds, int n_demos, std::uint64_t seed,
                                    int resamples = kDefaultBootstrapResamples) {
  require(per_run.size() == run_seeds.size(), "one seed per run required");
  EffectReport rep;
  rep.metric = metric;
  std::vector<std::string> keys;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> run_means;
  std::map<std::string, const ScanCell*> proto;
  for (std::size_t r = 0; r < per_run.size(); ++r) {
    for (const auto& c : per_run[r]) {
      const auto key = cell_key(c);
      if (!proto.count(key)) {
        proto[key] = &c;
        keys.push_back(key);
      }
      if (c.values.empty()) continue;
      auto e = summarize(metric, c.values, derive_seed(seed, r), resamples);
      e.layer = c.layer;
      e.head = c.head;
      e.condition = c.condition;
      e.n_demos = n_demos;
      e.seed = std::to_string(run_seeds[r]);
      e.excluded = c.excluded;
      if (!c.baseline.empty()) e.baseline_value = mean(c.baseline);
      rep.entries.push_back(e);
      run_means[key].first.push_back(e.value);
      if (e.baseline_value) run_means[key].second.push_back(*e.baseline_value);
    }
  }
  for (const auto& key : keys) {
    const auto& [vals, base] = run_means[key];
    if (vals.empty()) continue;
    auto e = summarize(metric, vals, derive_seed(seed, 0xa11ULL), resamples);
    const ScanCell& c = *proto[key];
    e.layer = c.layer;
    e.head = c.head;
    e.condition = c.condition;
    e.n_demos = n_demos;
    e.seed = "all";
    if (!base.empty()) e.baseline_value = mean(base);
    rep.entries.push_back(e);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Grids

/// Principal-angle overlap between the 95%-variance bases of every layer pair.
inline Matrix svd_overlap_grid(const std::vector<Matrix>& hidden, std::vector<PCBasis>* bases = nullptr,
                               double frac = kDefaultVarianceFraction) {
  std::vector<PCBasis> pcs;
  for (std::size_t l = 0; l < hidden.size(); ++l)
    pcs.push_back(svd_variance_basis(center_columns(hidden[l], static_cast<int>(l)), frac));
  const Index nl = static_cast<Index>(pcs.size());
  Matrix g(nl, nl);
  for (Index a = 0; a < nl; ++a)
    for (Index b = 0; b < nl; ++b)
      g(a, b) = a == b ? 1.0 : principal_angle_overlap(pcs[std::size_t(a)].basis, pcs[std::size_t(b)].basis);
  if (bases) *bases = std::move(pcs);
  return g;
}

/// RSA between the shared-coordinate RDMs of every context pair at one layer.
inline Matrix rsa_grid(const std::vector<const ContextFit*>& fits, int layer) {
  const Index n = static_cast<Index>(fits.size());
  std::vector<RDM> rdms;
  for (const auto* f : fits) rdms.push_back(compute_rdm(f->y.at(layer), layer, f->context_id));
  Matrix g(n, n);
  for (Index a = 0; a < n; ++a)
    for (Index b = 0; b < n; ++b) g(a, b) = a == b ? 1.0 : rsa(rdms[std::size_t(a)], rdms[std::size_t(b)]);
  return g;
}

/// Subspace overlap between the W_l of every context pair at one layer.
inline Matrix overlap_grid(const std::vector<const ContextFit*>& fits, int layer) {
  const Index n = static_cast<Index>(fits.size());
  Matrix g(n, n);
  for (Index a = 0; a < n; ++a)
    for (Index b = 0; b < n; ++b)
      g(a, b) = a == b ? 1.0 : context_subspace_overlap(fits[std::size_t(a)]->w.at(layer), fits[std::size_t(b)]->w.at(layer));
  return g;
}

// ---------------------------------------------------------------------------
// Provenance

/// FNV-1a over the canonical (sorted-key) JSON dump.
inline std::string config_hash(const json& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : config.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline constexpr const char* kVersion = "0.1.0";

inline json provenance(const json& config) {
  return {{"config", config}, {"config_hash", config_hash(config)}, {"version", kVersion}};
}

}  // namespace csl
