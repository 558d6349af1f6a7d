#include "csl/stats.hpp"
#include "csl/tensorstore.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace csl;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("csl_core_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<unsigned char> bytes_of(const std::string& s) { return {s.begin(), s.end()}; }

}  // namespace

// --- rng / numerics ----------------------------------------------------------

TEST(Rng, DerivedStreamsAreReproducibleAndDistinct) {
  EXPECT_EQ(derive_seed(7, 3), derive_seed(7, 3));
  EXPECT_NE(derive_seed(7, 3), derive_seed(7, 4));
  EXPECT_NE(derive_seed(7, 3), derive_seed(8, 3));
  Rng a = make_rng(1, 2), b = make_rng(1, 2);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a(), b());
}

TEST(Rng, UniformIndexStaysInRangeAndCoversIt) {
  Rng rng = make_rng(5, 0);
  std::vector<int> hits(7, 0);
  for (int i = 0; i < 7000; ++i) {
    const auto k = uniform_index(rng, 7);
    ASSERT_LT(k, 7u);
    ++hits[k];
  }
  for (int h : hits) EXPECT_GT(h, 800);
}

TEST(Rng, StandardNormalMoments) {
  Rng rng = make_rng(11, 0);
  double s = 0, s2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = standard_normal(rng);
    s += z;
    s2 += z * z;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.02);
}

TEST(Rng, PermutationIsAPermutation) {
  Rng rng = make_rng(3, 0);
  auto p = random_permutation(50, rng);
  std::sort(p.begin(), p.end());
  for (Index i = 0; i < 50; ++i) EXPECT_EQ(p[std::size_t(i)], i);
}

TEST(Numerics, OrthonormalBasisSpansInputWithPositiveDiagonal) {
  Rng rng = make_rng(9, 0);
  const Matrix a = gaussian_matrix(10, 4, rng);
  const Matrix q = orthonormal_basis(a);
  EXPECT_LT(orthonormality_error(q), 1e-12);
  const Matrix r = q.transpose() * a;
  EXPECT_LT((q * r - a).norm(), 1e-10);
  for (Index i = 0; i < 4; ++i) EXPECT_GT(r(i, i), 0);
}

TEST(Numerics, ColumnRank) {
  Matrix a(4, 3);
  a << 1, 2, 3, 2, 4, 6, 0, 1, 1, 1, 0, 1;
  EXPECT_EQ(column_rank(a), 2);
  EXPECT_EQ(column_rank(Matrix::Identity(5, 5)), 5);
}

// --- ACTB -------------------------------------------------------------------

TEST(Actb, TwoByTwoRoundTripAndLayout) {
  TensorFile t;
  t.shape = {2, 2};
  t.payload = {1, 0, 0, 1};
  const std::string bytes = encode_tensor(t);
  ASSERT_GE(bytes.size(), 16u);
  EXPECT_EQ(bytes.substr(0, 4), "ACTB");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 1);
  EXPECT_EQ(bytes[5], 0);
  std::uint64_t h = 0;
  for (int i = 0; i < 8; ++i) h |= std::uint64_t(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
  EXPECT_EQ(bytes.size(), 16 + h + 16);
  // 1.0f little-endian is 00 00 80 3f.
  const std::size_t p = 16 + h;
  EXPECT_EQ(static_cast<unsigned char>(bytes[p + 2]), 0x80);
  EXPECT_EQ(static_cast<unsigned char>(bytes[p + 3]), 0x3f);
  const auto dir = temp_dir("rt");
  write_tensor(dir / "a.actb", t);
  EXPECT_EQ(read_tensor(dir / "a.actb"), t);
}

TEST(Actb, PayloadLengthMismatchIsRejected) {
  TensorFile t;
  t.shape = {3, 2};
  t.payload = {1, 2, 3, 4, 5};
  try {
    encode_tensor(t);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("payload length mismatch"), std::string::npos);
  }
}

TEST(Actb, PayloadSizeArithmetic) {
  TensorFile t;
  t.shape = {1854, 8192};
  EXPECT_EQ(4 * t.element_count(), 60751872u);
}

TEST(Actb, DecodeErrors) {
  TensorFile t;
  t.shape = {4};
  t.payload = {1, 2, 3, 4};
  std::string good = encode_tensor(t);

  auto expect_error = [](const std::string& bytes, const std::string& needle) {
    try {
      decode_tensor(bytes_of(bytes));
      ADD_FAILURE() << "expected error containing '" << needle << "'";
    } catch (const ValidationError& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  std::string bad_magic = good;
  bad_magic.replace(0, 4, "XXXX");
  expect_error(bad_magic, "bad magic");
  std::string bad_version = good;
  bad_version[4] = 2;
  expect_error(bad_version, "unsupported version");
  expect_error(good.substr(0, good.size() - 4), "truncated payload");
  expect_error(good.substr(0, 10), "truncated header");
  expect_error(good + "xxxx", "payload length mismatch");

  // Hand-built header with invalid JSON.
  std::string hdr = "{not json";
  std::string raw = "ACTB";
  for (int i = 0; i < 4; ++i) raw.push_back(i == 0 ? 1 : 0);
  for (int i = 0; i < 8; ++i) raw.push_back(static_cast<char>(i == 0 ? hdr.size() : 0));
  expect_error(raw + hdr, "malformed JSON header");
}

TEST(Actb, RandomizedRoundTripIsBitExact) {
  Rng rng = make_rng(21, 0);
  const auto dir = temp_dir("random");
  for (int trial = 0; trial < 25; ++trial) {
    TensorFile t;
    const int rank = 1 + int(uniform_index(rng, 3));
    for (int i = 0; i < rank; ++i) t.shape.push_back(1 + uniform_index(rng, 6));
    t.payload.resize(t.element_count());
    for (auto& f : t.payload) f = std::bit_cast<float>(static_cast<std::uint32_t>(rng()));  // includes NaN/Inf bit patterns
    t.metadata = {{"trial", trial}};
    write_tensor(dir / "t.actb", t);
    EXPECT_EQ(read_tensor(dir / "t.actb"), t);
    EXPECT_EQ(read_tensor_header(dir / "t.actb").at("shape").get<std::vector<std::uint64_t>>(), t.shape);
  }
}

TEST(Actb, MatrixConversionIsRowMajor) {
  Matrix m(2, 3);
  m << 1, 2, 3, 4, 5, 6;
  const auto t = tensor_from_matrix(m);
  EXPECT_EQ(t.payload, (std::vector<float>{1, 2, 3, 4, 5, 6}));
  EXPECT_EQ(matrix_from_tensor(t), m);
}

// --- centering --------------------------------------------------------------

TEST(Center, TwoRowExample) {
  Matrix x(2, 2);
  x << 1, 1, 3, 3;
  const auto c = center_columns(x);
  Matrix want(2, 2);
  want << -1, -1, 1, 1;
  EXPECT_EQ(c.data, want);
  EXPECT_TRUE(c.centered);
}

TEST(Center, IdempotentAndPreservesRowDifferences) {
  Rng rng = make_rng(4, 0);
  const Matrix x = gaussian_matrix(10, 4, rng) * 3.0 + Matrix::Constant(10, 4, 5.0);
  const auto c = center_columns(x);
  EXPECT_LT(c.data.colwise().mean().cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((center_columns(c.data).data - c.data).cwiseAbs().maxCoeff(), 1e-12);
  for (Index i = 1; i < 10; ++i)
    EXPECT_LT(((x.row(i) - x.row(0)) - (c.data.row(i) - c.data.row(0))).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Center, Errors) {
  EXPECT_THROW(center_columns(Matrix::Ones(1, 3)), ValidationError);
  Matrix x = Matrix::Ones(3, 2);
  x(1, 1) = std::nan("");
  EXPECT_THROW(center_columns(x), ValidationError);
}

// --- spans / manifest -------------------------------------------------------

TEST(Spans, OverlapAndBoundsAreRejected) {
  SpanTable s;
  s.prompt_length = 5;
  s[SpanClass::Query] = {{0, 3}};
  s[SpanClass::FinalDelimiter] = {{4, 5}};
  EXPECT_NO_THROW(validate_spans(s));
  s[SpanClass::DemoLabels] = {{2, 4}};
  EXPECT_THROW(validate_spans(s), ValidationError);
  s[SpanClass::DemoLabels] = {{5, 6}};
  EXPECT_THROW(validate_spans(s), ValidationError);
  s[SpanClass::DemoLabels] = {};
  EXPECT_EQ(span_table_from_json(span_table_to_json(s)), s);
}

TEST(Manifest, ValidationChecksShapesAgainstDeclaredSizes) {
  const auto dir = temp_dir("manifest");
  RunManifest m;
  m.run_id = "r";
  m.model_id = "toy";
  m.concept_ids = {"a", "b", "c"};
  m.hidden_dim = 4;
  m.num_heads = 2;
  m.layer_ids = {0};
  write_tensor(dir / "h0.actb", tensor_from_matrix(Matrix::Ones(3, 4)));
  m.file_index[{0, TensorKind::Hidden}] = "h0.actb";
  EXPECT_NO_THROW(validate_manifest(m, dir));

  write_manifest(dir / "manifest.json", m);
  const auto back = read_manifest(dir / "manifest.json");
  EXPECT_EQ(manifest_to_json(back), manifest_to_json(m));

  write_tensor(dir / "h0.actb", tensor_from_matrix(Matrix::Ones(3, 5)));
  EXPECT_THROW(validate_manifest(m, dir), ValidationError);
  m.file_index[{0, TensorKind::Hidden}] = "missing.actb";
  EXPECT_THROW(validate_manifest(m, dir), ValidationError);
  m.file_index.clear();
  m.concept_ids = {"a", "a", "c"};
  EXPECT_THROW(validate_manifest(m, dir), ValidationError);
}

// --- stats ------------------------------------------------------------------

TEST(Stats, MidranksHandleTies) {
  const std::vector<double> x = {3, 1, 3, 2};
  EXPECT_EQ(midranks(x), (std::vector<double>{3.5, 1, 3.5, 2}));
}

TEST(Stats, PearsonAndSpearmanBasics) {
  const std::vector<double> a = {1, 2, 3, 4, 5};
  const std::vector<double> b = {2, 4, 6, 8, 10};
  const std::vector<double> c = {1, 4, 9, 16, 25};
  EXPECT_NEAR(pearson(a, b), 1.0, 1e-15);
  EXPECT_NEAR(spearman(a, c), 1.0, 1e-15);
  EXPECT_LT(pearson(a, c), 1.0);
  EXPECT_THROW(pearson(a, std::vector<double>(5, 1.0)), ValidationError);
}

TEST(Stats, PermutationQuantileUsesConservativeOrderStatistic) {
  std::vector<double> v(500);
  for (int i = 0; i < 500; ++i) v[std::size_t(i)] = i + 1;  // 1..500
  // ceil(0.95 * 501) = 476
  EXPECT_EQ(permutation_quantile(v, 0.95), 476);
}

TEST(Bootstrap, ConstantSamplesGiveDegenerateInterval) {
  const std::vector<double> x = {5, 5, 5};
  const auto ci = bootstrap_ci(x, 10000, 0.95, 1);
  EXPECT_EQ(ci.low, 5);
  EXPECT_EQ(ci.high, 5);
}

TEST(Bootstrap, Errors) {
  EXPECT_THROW(bootstrap_ci(std::vector<double>{}, 10000), ValidationError);
  EXPECT_THROW(bootstrap_ci(std::vector<double>{1.0}, 10000), ValidationError);
  EXPECT_THROW(bootstrap_ci(std::vector<double>{1.0, 2.0}, 999), ValidationError);
}

TEST(Bootstrap, MatchesIndependentResampler) {
  Rng rng = make_rng(77, 0);
  std::vector<double> x(1000);
  for (auto& v : x) v = standard_normal(rng);
  const double m = mean(x);
  const auto ci = bootstrap_ci(x, 10000, 0.95, 3);
  EXPECT_LE(ci.low, m);
  EXPECT_GE(ci.high, m);

  // Second implementation: own RNG (std::mt19937 + uniform_int_distribution),
  // nearest-rank percentiles.
  std::mt19937 gen(12345);
  std::uniform_int_distribution<std::size_t> pick(0, x.size() - 1);
  std::vector<double> means(10000);
  for (auto& mm : means) {
    double s = 0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x[pick(gen)];
    mm = s / double(x.size());
  }
  std::sort(means.begin(), means.end());
  const double lo = means[std::size_t(0.025 * means.size())];
  const double hi = means[std::size_t(0.975 * means.size()) - 1];
  EXPECT_NEAR(ci.low, lo, 0.01);
  EXPECT_NEAR(ci.high, hi, 0.01);
  // Analytic band for the mean of 1000 N(0,1) draws: +-1.96/sqrt(1000).
  EXPECT_NEAR(ci.high - ci.low, 2 * 1.96 / std::sqrt(1000.0), 0.02);
}

TEST(Bootstrap, DeterministicPerSeed) {
  const std::vector<double> x = {1, 4, 2, 8, 5, 7};
  const auto a = bootstrap_ci(x, 2000, 0.9, 5), b = bootstrap_ci(x, 2000, 0.9, 5);
  EXPECT_EQ(a.low, b.low);
  EXPECT_EQ(a.high, b.high);
}
