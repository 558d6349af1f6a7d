#pragma once

// Layer-wise subspace identification and comparison: variance-threshold PCA
// bases, principal-angle overlap, generalized CCA with permutation rank
// selection, GCCA alignment, and representational similarity analysis.

#include "csl/common.hpp"
#include "csl/stats.hpp"
#include "csl/tensorstore.hpp"

#include <map>
#include <optional>

namespace csl {

inline constexpr double kDefaultRidge = 0.01;
inline constexpr int kDefaultPermutations = 500;
inline constexpr double kDefaultRankAlpha = 0.05;
inline constexpr double kDefaultVarianceFraction = 0.95;

struct PCBasis {
  int layer = 0;
  Matrix basis;  // d x k, orthonormal columns
  double explained_fraction = 0;
  Index k = 0;
  Vector singular_values;  // full spectrum of the centered input
};

/// Smallest k whose leading squared singular values reach `frac` of the total.
inline PCBasis svd_variance_basis(const LayerActivations& x, double frac = kDefaultVarianceFraction) {
  require(frac > 0.0 && frac <= 1.0, "variance fraction must lie in (0, 1]");
  require(x.centered, "svd_variance_basis requires centered activations");
  validate_activations(x);
  Eigen::BDCSVD<Matrix> svd(x.data, Eigen::ComputeThinV);
  const Vector s = svd.singularValues();
  const double total = s.squaredNorm();
  if (total == 0.0) fail_compute("svd_variance_basis: activations have zero variance");

  const Index cap = std::min(x.rows() - 1, x.cols());
  Index k = 0;
  double cum = 0;
  while (k < s.size()) {
    cum += s(k) * s(k);
    ++k;
    if (cum >= frac * total * (1.0 - 1e-12)) break;
  }
  k = std::min(k, cap);
  PCBasis out;
  out.layer = x.layer;
  out.k = k;
  out.basis = svd.matrixV().leftCols(k);
  out.explained_fraction = std::min(1.0, s.head(k).squaredNorm() / total);
  out.singular_values = s;
  return out;
}

/// Mean squared cosine of the min(k1, k2) principal angles between span(U) and
/// span(V). Both inputs must have orthonormal columns.
inline double principal_angle_overlap(const Eigen::Ref<const Matrix>& u, const Eigen::Ref<const Matrix>& v) {
  require(u.cols() > 0 && v.cols() > 0, "principal_angle_overlap: empty basis");
  require(u.rows() == v.rows(), "principal_angle_overlap: ambient dimension mismatch");
  require(orthonormality_error(u) <= 1e-6, "principal_angle_overlap: U is not orthonormal");
  require(orthonormality_error(v) <= 1e-6, "principal_angle_overlap: V is not orthonormal");
  const Index k = std::min(u.cols(), v.cols());
  Eigen::JacobiSVD<Matrix> svd(u.transpose() * v);
  const Vector cosines = svd.singularValues().head(k).cwiseMin(1.0);
  return std::clamp(cosines.squaredNorm() / static_cast<double>(k), 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// GCCA

struct SharedSubspace {
  std::vector<int> layers;
  Matrix G;                   // n x r, orthonormal columns
  std::map<int, Matrix> W;    // layer -> d_l x r
  Vector eigenvalues;         // top-r spectrum of S, non-increasing
  double ridge = kDefaultRidge;
  Index rank = 0;

  /// Y_l = X_l W_l, the layer's projection onto the shared coordinates.
  Matrix project(const LayerActivations& x) const {
    auto it = W.find(x.layer);
    require(it != W.end(), "layer " + std::to_string(x.layer) + " not part of this subspace");
    require(x.cols() == it->second.rows(), "projection dimension mismatch");
    return x.data * it->second;
  }
};

namespace detail {

/// Per-layer factors of the regularized projector P = U diag(s^2/(s^2+ridge)) U^T,
/// kept so W can be recovered without re-factorising.
struct RidgeFactor {
  Matrix U;  // n x m
  Vector s;  // m
  Matrix V;  // d x m
  Vector shrink() const { return s.array().square() / (s.array().square() + ridge); }
  double ridge = kDefaultRidge;
};

inline RidgeFactor ridge_factor(const Matrix& x, double ridge) {
  Eigen::BDCSVD<Matrix> svd(x, Eigen::ComputeThinU | Eigen::ComputeThinV);
  RidgeFactor f;
  f.U = svd.matrixU();
  f.s = svd.singularValues();
  f.V = svd.matrixV();
  f.ridge = ridge;
  return f;
}

inline Matrix ridge_projector(const RidgeFactor& f) {
  return f.U * f.shrink().asDiagonal() * f.U.transpose();
}

inline void check_layer_set(std::span<const LayerActivations> xs) {
  require(!xs.empty(), "GCCA needs at least one layer");
  const Index n = xs.front().rows();
  for (const auto& x : xs) {
    require(x.rows() == n, "row-order mismatch: layers have different row counts");
    require(x.row_ids == xs.front().row_ids, "row-order mismatch between layers " +
                                                 std::to_string(xs.front().layer) + " and " +
                                                 std::to_string(x.layer));
    require(x.centered, "GCCA requires centered activations (layer " + std::to_string(x.layer) + ")");
    validate_activations(x);
  }
}

inline Index max_gcca_rank(std::span<const LayerActivations> xs) {
  Index m = xs.front().rows();
  for (const auto& x : xs) m = std::min(m, x.cols());
  return m;
}

/// Eigenvalues of the symmetrised matrix, sorted non-increasing.
inline Vector descending_eigenvalues(const Matrix& s) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (s + s.transpose()), Eigen::EigenvaluesOnly);
  return es.eigenvalues().reverse();
}

}  // namespace detail

/// Aggregate operator S = sum_l X_l (X_l^T X_l + ridge I)^-1 X_l^T (n x n).
inline Matrix gcca_operator(std::span<const LayerActivations> xs, double ridge = kDefaultRidge) {
  detail::check_layer_set(xs);
  require(ridge >= 0.0, "ridge must be non-negative");
  const Index n = xs.front().rows();
  Matrix s = Matrix::Zero(n, n);
  for (const auto& x : xs) s += detail::ridge_projector(detail::ridge_factor(x.data, ridge));
  return 0.5 * (s + s.transpose());
}

inline SharedSubspace gcca_fit(std::span<const LayerActivations> xs, Index rank, double ridge = kDefaultRidge) {
  detail::check_layer_set(xs);
  require(ridge >= 0.0, "ridge must be non-negative");
  require(rank >= 1, "GCCA rank must be positive");
  require(rank <= detail::max_gcca_rank(xs), "GCCA rank " + std::to_string(rank) + " exceeds min(n, d) = " +
                                                 std::to_string(detail::max_gcca_rank(xs)));
  const Index n = xs.front().rows();
  std::vector<detail::RidgeFactor> factors;
  factors.reserve(xs.size());
  Matrix s = Matrix::Zero(n, n);
  for (const auto& x : xs) {
    factors.push_back(detail::ridge_factor(x.data, ridge));
    s += detail::ridge_projector(factors.back());
  }
  s = 0.5 * (s + s.transpose());

  Eigen::SelfAdjointEigenSolver<Matrix> es(s);
  if (es.info() != Eigen::Success) fail_compute("GCCA eigendecomposition failed");
  const Vector evals = es.eigenvalues().reverse();
  if (!(evals(0) > 1e-12)) fail_compute("singular aggregate operator (all-zero input?)");

  SharedSubspace out;
  out.ridge = ridge;
  out.rank = rank;
  out.eigenvalues = evals.head(rank);
  out.G = es.eigenvectors().rowwise().reverse().leftCols(rank);
  // Fix each eigenvector's sign so its largest-magnitude entry is positive.
  for (Index j = 0; j < rank; ++j) {
    Index arg;
    out.G.col(j).cwiseAbs().maxCoeff(&arg);
    if (out.G(arg, j) < 0) out.G.col(j) = -out.G.col(j);
  }
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const auto& f = factors[i];
    // (X^T X + ridge I)^-1 X^T G = V diag(s / (s^2 + ridge)) U^T G
    const Vector gain = f.s.array() / (f.s.array().square() + ridge);
    Matrix w = f.V * gain.asDiagonal() * (f.U.transpose() * out.G);
    out.layers.push_back(xs[i].layer);
    require(out.W.emplace(xs[i].layer, std::move(w)).second, "duplicate layer in GCCA input");
  }
  return out;
}

struct RankSelection {
  Index r_hat = 0;
  Vector observed;      // top r_max eigenvalues of S
  Vector thresholds;    // q_i
  Matrix null_spectra;  // M x r_max
  int permutations = 0;
  double alpha = kDefaultRankAlpha;
  std::uint64_t seed = 0;
};

/// Permutation test for the number of shared GCCA dimensions. Each round
/// permutes every layer's rows independently (round m draws from substream m of
/// `seed`), recomputes the spectrum of S, and q_i is the (1 - alpha) quantile
/// of component i across rounds.
inline RankSelection gcca_rank_select(std::span<const LayerActivations> xs, Index r_max,
                                      int permutations = kDefaultPermutations, double alpha = kDefaultRankAlpha,
                                      std::uint64_t seed = 0, double ridge = kDefaultRidge) {
  detail::check_layer_set(xs);
  require(permutations >= 100, "rank selection needs at least 100 permutations");
  require(alpha > 0.0 && alpha < 1.0, "alpha must lie in (0, 1)");
  require(r_max >= 1, "r_max must be positive");
  require(r_max <= xs.front().rows(), "r_max exceeds the number of rows n");
  require(r_max <= detail::max_gcca_rank(xs), "r_max exceeds min(n, d)");

  const Index n = xs.front().rows();
  std::vector<Matrix> projectors;
  projectors.reserve(xs.size());
  for (const auto& x : xs) projectors.push_back(detail::ridge_projector(detail::ridge_factor(x.data, ridge)));

  Matrix s = Matrix::Zero(n, n);
  for (const auto& p : projectors) s += p;

  RankSelection out;
  out.permutations = permutations;
  out.alpha = alpha;
  out.seed = seed;
  out.observed = detail::descending_eigenvalues(s).head(r_max);
  out.null_spectra.resize(permutations, r_max);

  // P^pi = Pi P Pi^T, i.e. entry (i, j) of the permuted operator is P(pi_i, pi_j).
  for (int m = 0; m < permutations; ++m) {
    Rng rng = make_rng(seed, static_cast<std::uint64_t>(m));
    Matrix sp = Matrix::Zero(n, n);
    for (const auto& p : projectors) {
      const auto perm = random_permutation(n, rng);
      for (Index j = 0; j < n; ++j)
        for (Index i = 0; i < n; ++i) sp(i, j) += p(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
    }
    out.null_spectra.row(m) = detail::descending_eigenvalues(sp).head(r_max).transpose();
  }

  out.thresholds.resize(r_max);
  for (Index i = 0; i < r_max; ++i) {
    std::vector<double> col(out.null_spectra.col(i).data(), out.null_spectra.col(i).data() + permutations);
    out.thresholds(i) = permutation_quantile(std::move(col), 1.0 - alpha);
    if (out.observed(i) > out.thresholds(i)) ++out.r_hat;
  }
  return out;
}

/// Mean over columns of the Pearson correlation between matching columns.
inline double gcca_alignment(const Eigen::Ref<const Matrix>& ya, const Eigen::Ref<const Matrix>& yb) {
  require(ya.rows() == yb.rows() && ya.cols() == yb.cols(), "gcca_alignment: shape mismatch");
  require(ya.cols() > 0, "gcca_alignment: no columns");
  double total = 0;
  for (Index j = 0; j < ya.cols(); ++j) {
    const Vector a = ya.col(j), b = yb.col(j);
    try {
      total += pearson(a, b);
    } catch (const ValidationError&) {
      fail_validation("gcca_alignment: column " + std::to_string(j) + " is constant");
    }
  }
  return total / static_cast<double>(ya.cols());
}

// ---------------------------------------------------------------------------
// RSA

struct RDM {
  Matrix D;
  int layer = 0;
  std::string context_id;
};

inline RDM compute_rdm(const Eigen::Ref<const Matrix>& y, int layer = 0, std::string context_id = {}) {
  require(y.rows() >= 3, "compute_rdm: need at least 3 items");
  const Vector norms = y.rowwise().norm();
  for (Index i = 0; i < y.rows(); ++i) require(norms(i) > 0.0, "compute_rdm: row " + std::to_string(i) + " is zero");
  const Matrix unit = norms.cwiseInverse().asDiagonal() * y;
  const Matrix cos = unit * unit.transpose();
  RDM out;
  out.layer = layer;
  out.context_id = std::move(context_id);
  out.D = (1.0 - cos.array()).cwiseMax(0.0).cwiseMin(2.0).matrix();
  out.D = 0.5 * (out.D + out.D.transpose()).eval();
  out.D.diagonal().setZero();
  return out;
}

inline std::vector<double> upper_triangle(const Matrix& d) {
  std::vector<double> v;
  v.reserve(static_cast<std::size_t>(d.rows() * (d.rows() - 1) / 2));
  for (Index i = 0; i < d.rows(); ++i)
    for (Index j = i + 1; j < d.cols(); ++j) v.push_back(d(i, j));
  return v;
}

/// Spearman correlation (midranks) of the strict upper triangles.
inline double rsa(const RDM& a, const RDM& b) {
  require(a.D.rows() == b.D.rows(), "rsa: RDM size mismatch");
  require(a.D.rows() >= 3, "rsa: need at least 3 items");
  try {
    return spearman(upper_triangle(a.D), upper_triangle(b.D));
  } catch (const ValidationError&) {
    fail_validation("rsa: an RDM has constant off-diagonal entries");
  }
}

/// Overlap of the column spaces of two (non-orthonormal) projection matrices:
/// QR-orthonormalise each, then principal_angle_overlap.
inline double context_subspace_overlap(const Eigen::Ref<const Matrix>& wa, const Eigen::Ref<const Matrix>& wb) {
  require(wa.rows() == wb.rows(), "context_subspace_overlap: dimension mismatch");
  require(wa.cols() > 0 && wb.cols() > 0, "context_subspace_overlap: empty projection");
  require(column_rank(wa) == wa.cols(), "context_subspace_overlap: first projection is rank-deficient");
  require(column_rank(wb) == wb.cols(), "context_subspace_overlap: second projection is rank-deficient");
  return principal_angle_overlap(orthonormal_basis(wa), orthonormal_basis(wb));
}

}  // namespace csl
