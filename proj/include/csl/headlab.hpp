#pragma once

// Attention-head screening: per-head patching, the sign-flip max-statistic
// test, attention mass by prompt span, and how strongly / how coherently a
// head writes into the shared subspace.

#include "csl/intervene.hpp"

#include <bit>

namespace csl {

/// layer in 1..L (blocks; layer 0 is the embedding), head in 0..K-1.
struct HeadId {
  int layer = 1;
  int head = 0;
  friend bool operator==(const HeadId&, const HeadId&) = default;
};

inline void check_head(const ToyModel& model, HeadId h) {
  require(h.layer >= 1 && h.layer <= model.config().layers,
          "head layer " + std::to_string(h.layer) + " out of range [1, " + std::to_string(model.config().layers) + "]");
  require(h.head >= 0 && h.head < model.config().heads,
          "head index " + std::to_string(h.head) + " out of range [0, " + std::to_string(model.config().heads) + ")");
}

inline const Vector& head_output_of(const Trace& tr, HeadId h) {
  require(!tr.heads.empty(), "hook unavailable: trace has no head outputs");
  return tr.heads.at(static_cast<std::size_t>(h.layer - 1)).at(static_cast<std::size_t>(h.head));
}

/// Corrupt run with a_{l,k} replaced by the clean run's value at the last position.
inline PatchEffect head_patch_cie(const ToyModel& model, const Trace& clean, std::span<const int> corrupt_tokens,
                                  double corrupt_logprob, HeadId head, int target) {
  check_head(model, head);
  check_token(model, target);
  const Vector& a_clean = head_output_of(clean, head);
  toy::Intervention<double> iv;
  iv.head_output = [&](int l, int k, Eigen::Ref<Vector> a) {
    if (l == head.layer && k == head.head) a = a_clean;
  };
  const auto patched = model.forward(corrupt_tokens, {}, &iv);
  return make_patch_effect(clean.log_probs(target), corrupt_logprob, patched.log_probs(target));
}

inline PatchEffect head_patch_cie(const ToyModel& model, std::span<const int> clean_tokens,
                                  std::span<const int> corrupt_tokens, HeadId head, int target) {
  check_token(model, target);
  const Trace clean = trace_of(model, clean_tokens);
  return head_patch_cie(model, clean, corrupt_tokens, model.forward(corrupt_tokens).log_probs(target), head, target);
}

/// Every head output and every MLP output of the corrupt run replaced by the
/// clean run's. With equal final tokens this rebuilds the clean h_L.
inline toy::ForwardResult<double> substitute_all_components(const ToyModel& model, const Trace& clean,
                                                            std::span<const int> corrupt_tokens) {
  toy::Intervention<double> iv;
  iv.head_output = [&](int l, int k, Eigen::Ref<Vector> a) {
    a = clean.heads[static_cast<std::size_t>(l - 1)][static_cast<std::size_t>(k)];
  };
  iv.mlp_output = [&](int l, Eigen::Ref<Vector> m) { m = clean.mlp[static_cast<std::size_t>(l - 1)]; };
  return model.forward(corrupt_tokens, {}, &iv);
}

// ---------------------------------------------------------------------------
// Sign-flip max-statistic test

struct HeadEffectMatrix {
  Matrix cie;  // L x K mean CIE over queries
  std::string condition;
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> significant;
  double threshold = 0;
  double alpha = 0.05;
  int n_perm = 0;
  int n_queries = 0;
  std::uint64_t seed = 0;
};

inline constexpr int kDefaultHeadPermutations = 5000;

/// Per-query CIEs are the observations: in every round each (head, query)
/// value is multiplied by an independent fair sign, per-head means are
/// recomputed and their maximum over heads is recorded. The cutoff is the
/// (1 - alpha) quantile of those maxima (floored at 0); a head is significant
/// when its observed mean CIE is strictly above it.
///
/// `samples[q]` is the L x K CIE matrix of query q. With one query this reduces
/// to flipping the mean matrix itself, which can never flag a head: a head's
/// own value is the round maximum in half of the rounds.
inline HeadEffectMatrix fwer_sign_flip(const std::vector<Matrix>& samples, int n_perm = kDefaultHeadPermutations,
                                       double alpha = 0.05, std::uint64_t seed = 0, std::string condition = {}) {
  require(!samples.empty() && samples.front().size() > 0, "empty CIE matrix");
  require(n_perm >= 1000, "n_perm must be at least 1000");
  require(alpha > 0 && alpha < 1, "alpha must lie in (0, 1)");
  const Index rows = samples.front().rows(), cols = samples.front().cols();
  for (const auto& s : samples) {
    require(s.rows() == rows && s.cols() == cols, "CIE matrices differ in shape");
    require(s.allFinite(), "CIE matrix contains non-finite values");
  }
  const std::size_t n = samples.size();
  const Index heads = rows * cols;

  // data[h * n + q], contiguous per head.
  std::vector<double> data(static_cast<std::size_t>(heads) * n);
  for (std::size_t q = 0; q < n; ++q)
    for (Index h = 0; h < heads; ++h) data[static_cast<std::size_t>(h) * n + q] = samples[q](h % rows, h / rows);

  HeadEffectMatrix out;
  out.cie = Matrix::Zero(rows, cols);
  for (const auto& s : samples) out.cie += s;
  out.cie /= double(n);

  std::vector<double> maxima(static_cast<std::size_t>(n_perm));
  for (int p = 0; p < n_perm; ++p) {
    Rng rng = make_rng(seed, std::uint64_t(p));
    std::uint64_t bits = 0;
    int left = 0;
    double best = -std::numeric_limits<double>::infinity();
    for (Index h = 0; h < heads; ++h) {
      double sum = 0;
      const double* x = data.data() + static_cast<std::size_t>(h) * n;
      for (std::size_t q = 0; q < n; ++q) {
        if (left == 0) {
          bits = rng();
          left = 64;
        }
        sum += (bits & 1u) ? x[q] : -x[q];
        bits >>= 1;
        --left;
      }
      best = std::max(best, sum / double(n));
    }
    maxima[static_cast<std::size_t>(p)] = best;
  }
  out.threshold = std::max(0.0, permutation_quantile(std::move(maxima), 1.0 - alpha));
  out.significant = (out.cie.array() > out.threshold).matrix();
  out.alpha = alpha;
  out.n_perm = n_perm;
  out.n_queries = static_cast<int>(n);
  out.seed = seed;
  out.condition = std::move(condition);
  return out;
}

inline HeadEffectMatrix fwer_sign_flip(const Matrix& mean_cie, int n_perm = kDefaultHeadPermutations,
                                       double alpha = 0.05, std::uint64_t seed = 0, std::string condition = {}) {
  return fwer_sign_flip(std::vector<Matrix>{mean_cie}, n_perm, alpha, seed, std::move(condition));
}

inline json to_json(const HeadEffectMatrix& m) {
  json cie = json::array(), sig = json::array();
  for (Index l = 0; l < m.cie.rows(); ++l) {
    json rc = json::array(), rs = json::array();
    for (Index k = 0; k < m.cie.cols(); ++k) {
      rc.push_back(m.cie(l, k));
      rs.push_back(bool(m.significant(l, k)));
    }
    cie.push_back(rc);
    sig.push_back(rs);
  }
  return {{"condition", m.condition}, {"cie", cie},          {"significant", sig},        {"threshold", m.threshold},
          {"alpha", m.alpha},         {"n_perm", m.n_perm},  {"n_queries", m.n_queries}, {"seed", m.seed},
          {"layer_base", 1}};
}

inline std::string to_csv(const HeadEffectMatrix& m) {
  std::string out = "condition,layer,head,cie,significant,threshold\n";
  for (Index l = 0; l < m.cie.rows(); ++l)
    for (Index k = 0; k < m.cie.cols(); ++k)
      out += m.condition + "," + std::to_string(l + 1) + "," + std::to_string(k) + "," + format_number(m.cie(l, k)) +
             "," + (m.significant(l, k) ? "1" : "0") + "," + format_number(m.threshold) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Attention mass by span

struct SpanAttribution {
  HeadId head;
  std::array<double, kNumSpanClasses> mass{};
  double other = 0;
  int n_prompts = 0;

  double total() const {
    double s = other;
    for (double m : mass) s += m;
    return s;
  }
};

/// Class sums of one post-softmax attention row; everything outside the
/// table's ranges is "other".
inline SpanAttribution span_mass(const Eigen::Ref<const Vector>& row, const SpanTable& spans) {
  validate_spans(spans);
  require(row.size() == spans.prompt_length, "attention row length " + std::to_string(row.size()) +
                                                 " does not match span table length " +
                                                 std::to_string(spans.prompt_length));
  SpanAttribution out;
  double covered = 0;
  for (int c = 0; c < kNumSpanClasses; ++c)
    for (const auto& r : spans.spans[static_cast<std::size_t>(c)]) {
      const double s = row.segment(r.begin, r.end - r.begin).sum();
      out.mass[static_cast<std::size_t>(c)] += s;
      covered += s;
    }
  out.other = std::max(0.0, row.sum() - covered);
  out.n_prompts = 1;
  return out;
}

/// Last-token attention of one head, summed per span class and averaged over prompts.
inline SpanAttribution attention_mass_by_span(const ToyModel& model, const std::vector<toy::Prompt>& prompts,
                                              HeadId head) {
  check_head(model, head);
  require(!prompts.empty(), "no prompts for attention attribution");
  SpanAttribution acc;
  acc.head = head;
  for (const auto& p : prompts) {
    const auto res = model.forward(p.tokens, {.attention = true});
    const auto& row = res.trace->attention[static_cast<std::size_t>(head.layer - 1)][static_cast<std::size_t>(head.head)];
    const auto one = span_mass(row, p.spans);
    for (int c = 0; c < kNumSpanClasses; ++c) acc.mass[static_cast<std::size_t>(c)] += one.mass[static_cast<std::size_t>(c)];
    acc.other += one.other;
  }
  const double n = double(prompts.size());
  for (double& m : acc.mass) m /= n;
  acc.other /= n;
  acc.n_prompts = static_cast<int>(prompts.size());
  return acc;
}

/// All heads at once, one traced pass per prompt.
inline std::vector<SpanAttribution> attention_mass_all_heads(const ToyModel& model,
                                                             const std::vector<toy::Prompt>& prompts) {
  require(!prompts.empty(), "no prompts for attention attribution");
  const int L = model.config().layers, K = model.config().heads;
  std::vector<SpanAttribution> out(static_cast<std::size_t>(L * K));
  for (int l = 1; l <= L; ++l)
    for (int k = 0; k < K; ++k) out[static_cast<std::size_t>((l - 1) * K + k)].head = {l, k};
  for (const auto& p : prompts) {
    const auto res = model.forward(p.tokens, {.attention = true});
    for (auto& a : out) {
      const auto one = span_mass(res.trace->attention[static_cast<std::size_t>(a.head.layer - 1)]
                                                     [static_cast<std::size_t>(a.head.head)],
                                 p.spans);
      for (int c = 0; c < kNumSpanClasses; ++c) a.mass[static_cast<std::size_t>(c)] += one.mass[static_cast<std::size_t>(c)];
      a.other += one.other;
    }
  }
  for (auto& a : out) {
    for (double& m : a.mass) m /= double(prompts.size());
    a.other /= double(prompts.size());
    a.n_prompts = static_cast<int>(prompts.size());
  }
  return out;
}

inline json to_json(const SpanAttribution& s) {
  json j{{"layer", s.head.layer}, {"head", s.head.head}, {"other", s.other}, {"n_prompts", s.n_prompts}};
  for (int c = 0; c < kNumSpanClasses; ++c) j[kSpanClassNames[static_cast<std::size_t>(c)]] = s.mass[static_cast<std::size_t>(c)];
  return j;
}

inline std::string to_csv(const std::vector<SpanAttribution>& rows) {
  std::string out = "layer,head";
  for (const char* n : kSpanClassNames) out += std::string(",") + n;
  out += ",other\n";
  for (const auto& s : rows) {
    out += std::to_string(s.head.layer) + "," + std::to_string(s.head.head);
    for (double m : s.mass) out += "," + format_number(m);
    out += "," + format_number(s.other) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Head / subspace interaction

/// alpha = ||A W||_F^2 / ||Y||_F^2. The denominator is the layer's total
/// subspace energy ||Y_l||_F^2 (Y has no head index).
inline double head_subspace_contribution(const Eigen::Ref<const Matrix>& a, const Eigen::Ref<const Matrix>& w_ref,
                                         const Eigen::Ref<const Matrix>& y_ref) {
  require(a.cols() == w_ref.rows(), "head outputs and basis disagree on d");
  require(a.rows() == y_ref.rows() && w_ref.cols() == y_ref.cols(), "head outputs and Y_ref disagree in shape");
  const double denom = y_ref.squaredNorm();
  if (!(denom > 0)) fail_validation("head_subspace_contribution: Y_ref has zero norm");
  return (a * w_ref).squaredNorm() / denom;
}

/// Frobenius cosine between dY = A W and Y. Empty when dY is zero.
inline std::optional<double> head_subspace_alignment(const Eigen::Ref<const Matrix>& a,
                                                     const Eigen::Ref<const Matrix>& w_ref,
                                                     const Eigen::Ref<const Matrix>& y_ref) {
  require(a.cols() == w_ref.rows(), "head outputs and basis disagree on d");
  require(a.rows() == y_ref.rows() && w_ref.cols() == y_ref.cols(), "head outputs and Y_ref disagree in shape");
  const Matrix dy = a * w_ref;
  const double ny = y_ref.norm(), nd = dy.norm();
  if (!(ny > 0)) fail_validation("head_subspace_alignment: Y_ref has zero norm");
  if (!(nd > 0)) return std::nullopt;
  return std::clamp((dy.array() * y_ref.array()).sum() / (nd * ny), -1.0, 1.0);
}

struct HeadSubspaceMetrics {
  HeadId head;
  int reference_layer = 0;
  double alpha = 0;
  std::optional<double> align;
};

/// Reference layer for a head: its own layer when a basis exists there,
/// otherwise the first layer with a basis (l*) if the head sits below it.
inline int reference_layer_for(int layer, const std::vector<int>& basis_layers) {
  require(!basis_layers.empty(), "no subspace layers");
  const int first = *std::min_element(basis_layers.begin(), basis_layers.end());
  if (layer < first) return first;
  require(std::find(basis_layers.begin(), basis_layers.end(), layer) != basis_layers.end(),
          "no subspace basis at layer " + std::to_string(layer));
  return layer;
}

/// `heads[l-1][k]` is the n x d matrix of a head's outputs over the concepts;
/// `w` and `y` hold W_l and Y_l = X_l W_l for the subspace layers.
inline std::vector<HeadSubspaceMetrics> head_subspace_metrics(const std::vector<std::vector<Matrix>>& heads,
                                                              const std::map<int, Matrix>& w,
                                                              const std::map<int, Matrix>& y) {
  std::vector<int> layers;
  for (const auto& [l, _] : w) layers.push_back(l);
  std::vector<HeadSubspaceMetrics> out;
  for (std::size_t li = 0; li < heads.size(); ++li) {
    const int layer = static_cast<int>(li) + 1;
    const int first = *std::min_element(layers.begin(), layers.end());
    if (layer >= first && !w.count(layer)) continue;  // between or beyond the analysed layers
    const int ref = reference_layer_for(layer, layers);
    for (std::size_t k = 0; k < heads[li].size(); ++k) {
      HeadSubspaceMetrics m;
      m.head = {layer, static_cast<int>(k)};
      m.reference_layer = ref;
      m.alpha = head_subspace_contribution(heads[li][k], w.at(ref), y.at(ref));
      m.align = head_subspace_alignment(heads[li][k], w.at(ref), y.at(ref));
      out.push_back(m);
    }
  }
  return out;
}

inline std::string to_csv(const std::vector<HeadSubspaceMetrics>& rows) {
  std::string out = "layer,head,reference_layer,alpha,align,alpha_denominator\n";
  for (const auto& m : rows)
    out += std::to_string(m.head.layer) + "," + std::to_string(m.head.head) + "," + std::to_string(m.reference_layer) +
           "," + format_number(m.alpha) + "," + (m.align ? format_number(*m.align) : "") + ",layer_total\n";
  return out;
}

inline json to_json(const HeadSubspaceMetrics& m) {
  return {{"layer", m.head.layer},
          {"head", m.head.head},
          {"reference_layer", m.reference_layer},
          {"alpha", m.alpha},
          {"align", m.align ? json(*m.align) : json(nullptr)},
          {"alpha_denominator", "layer_total"}};
}

}  // namespace csl
