#include "csl/subspace.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace csl;

namespace {

Matrix random_orthonormal(Index d, Index k, Rng& rng) { return orthonormal_basis(gaussian_matrix(d, k, rng)); }

LayerActivations layer(const Matrix& x, int l) { return center_columns(x, l); }

/// Three layers that share a planted rank-`r` signal plus isotropic noise.
std::vector<LayerActivations> planted(Index n, Index d, Index r, double noise, std::uint64_t seed) {
  Rng rng = make_rng(seed, 1);
  const Matrix z = gaussian_matrix(n, r, rng);
  std::vector<LayerActivations> xs;
  for (int l = 0; l < 3; ++l) xs.push_back(layer(z * gaussian_matrix(r, d, rng) + noise * gaussian_matrix(n, d, rng), l));
  return xs;
}

}  // namespace

TEST(Overlap, IdenticalAndOrthogonal) {
  const Matrix e = Matrix::Identity(4, 4);
  EXPECT_NEAR(principal_angle_overlap(e.leftCols(2), e.leftCols(2)), 1.0, 1e-15);
  EXPECT_NEAR(principal_angle_overlap(e.leftCols(2), e.rightCols(2)), 0.0, 1e-15);
}

TEST(Overlap, HalfShared) {
  const Matrix e = Matrix::Identity(4, 4);
  Matrix v(4, 2);
  v << e.col(0), e.col(2);
  EXPECT_NEAR(principal_angle_overlap(e.leftCols(2), v), 0.5, 1e-15);
}

TEST(Overlap, PropertiesOnRandomBases) {
  Rng rng = make_rng(31, 0);
  for (int t = 0; t < 30; ++t) {
    const Matrix u = random_orthonormal(12, 3, rng), v = random_orthonormal(12, 5, rng);
    const double o = principal_angle_overlap(u, v);
    EXPECT_GE(o, 0.0);
    EXPECT_LE(o, 1.0);
    EXPECT_NEAR(o, principal_angle_overlap(v, u), 1e-12);
    EXPECT_NEAR(o, oracle::overlap(u, v), 1e-12);
    // Invariant to a change of basis within each span.
    const Matrix ru = random_orthonormal(3, 3, rng);
    EXPECT_NEAR(o, principal_angle_overlap(u * ru, v), 1e-12);
    EXPECT_NEAR(principal_angle_overlap(u, u), 1.0, 1e-12);
  }
}

TEST(Overlap, RejectsNonOrthonormalInput) {
  EXPECT_THROW(principal_angle_overlap(Matrix::Ones(4, 2), Matrix::Identity(4, 2)), ValidationError);
  EXPECT_THROW(principal_angle_overlap(Matrix::Identity(4, 2), Matrix::Identity(5, 2)), ValidationError);
}

TEST(Svd, VarianceBasisPicksSmallestSufficientK) {
  // Singular values 3, 2, 1 along the axes: cumulative energy 9/14, 13/14, 1.
  Matrix x = Matrix::Zero(6, 3);
  x(0, 0) = 3 / std::sqrt(2.0);
  x(1, 0) = -3 / std::sqrt(2.0);
  x(2, 1) = 2 / std::sqrt(2.0);
  x(3, 1) = -2 / std::sqrt(2.0);
  x(4, 2) = 1 / std::sqrt(2.0);
  x(5, 2) = -1 / std::sqrt(2.0);
  const auto lx = layer(x, 0);
  EXPECT_EQ(svd_variance_basis(lx, 0.6).k, 1);
  EXPECT_EQ(svd_variance_basis(lx, 0.9).k, 2);
  EXPECT_EQ(svd_variance_basis(lx, 0.95).k, 3);
  const auto b = svd_variance_basis(lx, 0.9);
  EXPECT_LT(orthonormality_error(b.basis), 1e-12);
  EXPECT_NEAR(b.explained_fraction, 13.0 / 14.0, 1e-12);
}

TEST(Gcca, MatchesDenseOracleOperatorAndSpectrum) {
  const auto xs = planted(20, 6, 2, 0.3, 3);
  std::vector<Matrix> raw;
  for (const auto& x : xs) raw.push_back(x.data);
  const Matrix want = oracle::gcca_operator(raw, kDefaultRidge);
  EXPECT_LT((gcca_operator(xs) - want).cwiseAbs().maxCoeff(), 1e-9);

  const auto fit = gcca_fit(xs, 3);
  const auto top = oracle::top_eigenvalues(want, 3);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(fit.eigenvalues(i), top[std::size_t(i)], 1e-8);
  EXPECT_LT(orthonormality_error(fit.G), 1e-10);
  // G's columns are eigenvectors of S.
  EXPECT_LT((want * fit.G - fit.G * fit.eigenvalues.asDiagonal()).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Gcca, WSolvesTheRidgeNormalEquations) {
  const auto xs = planted(15, 5, 2, 0.5, 8);
  const auto fit = gcca_fit(xs, 2);
  for (const auto& x : xs) {
    const Matrix& w = fit.W.at(x.layer);
    Matrix lhs = oracle::matmul(oracle::transpose(x.data), x.data);
    lhs.diagonal().array() += kDefaultRidge;
    const Matrix resid = oracle::matmul(lhs, w) - oracle::matmul(oracle::transpose(x.data), fit.G);
    EXPECT_LT(resid.cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(Gcca, IdenticalLayersGiveEigenvaluesNearLayerCount) {
  Rng rng = make_rng(4, 0);
  const Matrix x = gaussian_matrix(30, 5, rng);
  std::vector<LayerActivations> xs = {layer(x, 0), layer(x, 1), layer(x, 2)};
  const auto fit = gcca_fit(xs, 3);
  for (Index i = 0; i < 3; ++i) EXPECT_NEAR(fit.eigenvalues(i), 3.0, 0.05);
  EXPECT_NEAR(gcca_alignment(fit.project(xs[0]), fit.project(xs[1])), 1.0, 1e-10);
}

TEST(Gcca, Errors) {
  const auto xs = planted(10, 4, 1, 0.1, 1);
  EXPECT_THROW(gcca_fit(xs, 0), ValidationError);
  EXPECT_THROW(gcca_fit(xs, 5), ValidationError);
  auto bad = xs;
  bad[1] = layer(Matrix::Ones(11, 4) + Matrix::Identity(11, 4), 1);
  EXPECT_THROW(gcca_fit(bad, 1), ValidationError);
  std::vector<LayerActivations> zero = {layer(Matrix::Zero(5, 3), 0), layer(Matrix::Zero(5, 3), 1)};
  EXPECT_THROW(gcca_fit(zero, 1), ComputeError);
}

TEST(RankSelection, FindsPlantedRankAndIsDeterministic) {
  const auto xs = planted(40, 8, 3, 0.5, 12);
  const auto a = gcca_rank_select(xs, 6, 100, 0.05, 9);
  EXPECT_EQ(a.r_hat, 3);
  const auto b = gcca_rank_select(xs, 6, 100, 0.05, 9);
  EXPECT_EQ(a.null_spectra, b.null_spectra);
  EXPECT_EQ(a.thresholds, b.thresholds);
  EXPECT_THROW(gcca_rank_select(xs, 6, 99), ValidationError);
  EXPECT_THROW(gcca_rank_select(xs, 41, 100), ValidationError);
}

TEST(RankSelection, NullSpectraMatchAnIndependentPermutation) {
  // Round m's operator equals the one built from explicitly permuted rows.
  const auto xs = planted(12, 4, 1, 1.0, 5);
  const auto sel = gcca_rank_select(xs, 2, 100, 0.05, 77);
  for (int m : {0, 17, 99}) {
    Rng rng = make_rng(77, std::uint64_t(m));
    std::vector<Matrix> permuted;
    for (const auto& x : xs) {
      const auto perm = random_permutation(x.rows(), rng);
      Matrix p(x.rows(), x.cols());
      for (Index i = 0; i < x.rows(); ++i) p.row(i) = x.data.row(perm[std::size_t(i)]);
      permuted.push_back(p);
    }
    const auto top = oracle::top_eigenvalues(oracle::gcca_operator(permuted, kDefaultRidge), 2, 20000);
    EXPECT_NEAR(sel.null_spectra(m, 0), top[0], 1e-6);
  }
}

TEST(Rsa, IdenticalAndPermutationProperties) {
  Rng rng = make_rng(6, 0);
  const Matrix y = gaussian_matrix(8, 3, rng);
  EXPECT_NEAR(rsa(compute_rdm(y), compute_rdm(y)), 1.0, 1e-12);
  EXPECT_NEAR(rsa(compute_rdm(y), compute_rdm(2.5 * y)), 1.0, 1e-12);
  const Matrix z = gaussian_matrix(8, 4, rng);
  EXPECT_NEAR(rsa(compute_rdm(y), compute_rdm(z)), oracle::rsa(y, z), 1e-12);
  const auto d = compute_rdm(y);
  EXPECT_LT((d.D - d.D.transpose()).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_EQ(d.D.diagonal().cwiseAbs().maxCoeff(), 0.0);
  EXPECT_THROW(compute_rdm(Matrix::Ones(2, 3)), ValidationError);
}

TEST(ContextOverlap, InvariantToColumnMixing) {
  Rng rng = make_rng(10, 0);
  const Matrix w = gaussian_matrix(10, 3, rng);
  const Matrix mix = gaussian_matrix(3, 3, rng);
  EXPECT_NEAR(context_subspace_overlap(w, w * mix), 1.0, 1e-10);
  Matrix deficient = w;
  deficient.col(2) = w.col(0) + w.col(1);
  EXPECT_THROW(context_subspace_overlap(deficient, w), ValidationError);
}

TEST(Svd, SpectrumEdgeCases) {
  // Singular values (10, 0.1, 0.1): 100 / 100.02 > 0.95.
  Matrix x = Matrix::Zero(6, 3);
  const double s[3] = {10, 0.1, 0.1};
  for (int j = 0; j < 3; ++j) {
    x(2 * j, j) = s[j] / std::sqrt(2.0);
    x(2 * j + 1, j) = -s[j] / std::sqrt(2.0);
  }
  EXPECT_EQ(svd_variance_basis(layer(x, 0), 0.95).k, 1);

  Rng rng = make_rng(2, 0);
  EXPECT_EQ(svd_variance_basis(layer(gaussian_matrix(6, 4, rng), 0), 1.0).k, 4);

  // Equal singular values: every component is needed.
  Matrix e = Matrix::Zero(8, 4);
  for (int j = 0; j < 4; ++j) {
    e(2 * j, j) = 1;
    e(2 * j + 1, j) = -1;
  }
  EXPECT_EQ(svd_variance_basis(layer(e, 0), 0.95).k, 4);
}

TEST(Gcca, IdenticalLayersRecoverTheLeadingSingularSubspace) {
  Rng rng = make_rng(13, 0);
  const Matrix x = gaussian_matrix(25, 6, rng) * Vector::LinSpaced(6, 6.0, 1.0).asDiagonal();
  std::vector<LayerActivations> xs = {layer(x, 0), layer(x, 1)};
  const auto fit = gcca_fit(xs, 6, 1e-10);
  for (Index i = 0; i < 6; ++i) EXPECT_NEAR(fit.eigenvalues(i), 2.0, 1e-6);
  Eigen::JacobiSVD<Matrix> svd(xs[0].data, Eigen::ComputeThinU);
  EXPECT_NEAR(principal_angle_overlap(fit.G, svd.matrixU().leftCols(6)), 1.0, 1e-6);
}

TEST(Gcca, RowPermutationEquivariance) {
  const auto xs = planted(20, 5, 2, 0.4, 21);
  Rng rng = make_rng(1, 0);
  const auto perm = random_permutation(20, rng);
  std::vector<LayerActivations> ps;
  for (const auto& x : xs) {
    Matrix p(x.rows(), x.cols());
    for (Index i = 0; i < 20; ++i) p.row(i) = x.data.row(perm[std::size_t(i)]);
    ps.push_back(layer(p, x.layer));
  }
  const auto a = gcca_fit(xs, 2), b = gcca_fit(ps, 2);
  EXPECT_LT((a.eigenvalues - b.eigenvalues).cwiseAbs().maxCoeff(), 1e-8);
  Matrix ga(20, 2);
  for (Index i = 0; i < 20; ++i) ga.row(i) = a.G.row(perm[std::size_t(i)]);
  EXPECT_NEAR(principal_angle_overlap(ga, b.G), 1.0, 1e-8);
}

TEST(Alignment, PearsonCases) {
  Rng rng = make_rng(3, 0);
  const Matrix ya = gaussian_matrix(10, 3, rng);
  EXPECT_NEAR(gcca_alignment(ya, ya), 1.0, 1e-12);
  Matrix yb = 3.0 * ya;
  yb.rowwise() += Eigen::RowVector3d(1, -2, 5);
  EXPECT_NEAR(gcca_alignment(ya, yb), 1.0, 1e-12);
  EXPECT_NEAR(gcca_alignment(ya, -ya), -1.0, 1e-12);
}

TEST(Rsa, RotationLeavesTheRdmUnchanged) {
  Rng rng = make_rng(8, 0);
  const Matrix y = gaussian_matrix(9, 4, rng);
  const Matrix r = random_orthonormal(4, 4, rng);
  EXPECT_LT((compute_rdm(y).D - compute_rdm(y * r).D).cwiseAbs().maxCoeff(), 1e-10);
  const auto d = compute_rdm(y);
  EXPECT_NEAR(rsa(d, d), 1.0, 1e-15);
}

TEST(ContextOverlap, DisjointSpansAndOrthonormalisedOracle) {
  const Matrix e = Matrix::Identity(6, 6);
  EXPECT_NEAR(context_subspace_overlap(e.leftCols(3) * 2.0, e.rightCols(3)), 0.0, 1e-15);
  Rng rng = make_rng(14, 0);
  const Matrix wa = gaussian_matrix(16, 4, rng), wb = gaussian_matrix(16, 4, rng);
  EXPECT_NEAR(context_subspace_overlap(wa, wb), oracle::overlap(oracle::gram_schmidt(wa), oracle::gram_schmidt(wb)),
              1e-10);
}
