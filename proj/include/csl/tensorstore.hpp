#pragma once

// ACTB activation container, run manifests, and centered layer activations.
//
// ACTB byte layout:
//   [0, 4)        magic "ACTB"
//   [4, 8)        version, little-endian u32 (== 1)
//   [8, 16)       header length H, little-endian u64
//   [16, 16 + H)  UTF-8 JSON header: dtype, shape, row_major, axes, metadata
//   [16 + H, ..)  payload, little-endian IEEE-754 f32, row-major

#include "csl/common.hpp"

#include <json.hpp>

#include <array>
#include <bit>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>

namespace csl {

using json = nlohmann::json;

inline constexpr std::array<char, 4> kActbMagic = {'A', 'C', 'T', 'B'};
inline constexpr std::uint32_t kActbVersion = 1;

struct TensorFile {
  std::string dtype = "f32";
  std::vector<std::uint64_t> shape;
  bool row_major = true;
  std::vector<std::string> axes;
  json metadata = json::object();
  std::vector<float> payload;

  std::uint64_t element_count() const {
    std::uint64_t n = 1;
    for (auto s : shape) n *= s;
    return n;
  }

  /// Bit-level equality; NaN payloads with equal bits compare equal.
  friend bool operator==(const TensorFile& a, const TensorFile& b) {
    if (a.dtype != b.dtype || a.shape != b.shape || a.row_major != b.row_major || a.axes != b.axes ||
        a.metadata != b.metadata || a.payload.size() != b.payload.size())
      return false;
    for (std::size_t i = 0; i < a.payload.size(); ++i)
      if (std::bit_cast<std::uint32_t>(a.payload[i]) != std::bit_cast<std::uint32_t>(b.payload[i])) return false;
    return true;
  }
};

/// Checks the TensorFile invariants; throws ValidationError on the first violation.
inline void validate_tensor(const TensorFile& t) {
  require(t.dtype == "f32", "unsupported dtype '" + t.dtype + "'");
  require(!t.shape.empty(), "empty shape");
  for (auto s : t.shape) require(s > 0, "shape entries must be positive");
  require(t.axes.empty() || t.axes.size() == t.shape.size(), "axes/shape rank mismatch");
  require(t.payload.size() == t.element_count(), "payload length mismatch");
}

inline json tensor_header_json(const TensorFile& t) {
  json h;
  h["dtype"] = t.dtype;
  h["shape"] = t.shape;
  h["row_major"] = t.row_major;
  h["axes"] = t.axes;
  h["metadata"] = t.metadata;
  return h;
}

namespace detail {

template <typename U>
void put_le(std::string& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(std::span<const unsigned char> bytes) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace detail

/// Serialises a tensor into the exact ACTB byte sequence.
inline std::string encode_tensor(const TensorFile& t) {
  validate_tensor(t);
  const std::string header = tensor_header_json(t).dump();
  std::string out;
  out.reserve(16 + header.size() + 4 * t.payload.size());
  out.append(kActbMagic.data(), kActbMagic.size());
  detail::put_le<std::uint32_t>(out, kActbVersion);
  detail::put_le<std::uint64_t>(out, header.size());
  out += header;
  for (float f : t.payload) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
  return out;
}

inline TensorFile decode_tensor(std::span<const unsigned char> bytes) {
  require(bytes.size() >= 16, "truncated header");
  require(std::equal(kActbMagic.begin(), kActbMagic.end(), bytes.begin(),
                     [](char a, unsigned char b) { return static_cast<unsigned char>(a) == b; }),
          "bad magic");
  const auto version = detail::get_le<std::uint32_t>(bytes.subspan(4, 4));
  require(version == kActbVersion, "unsupported version " + std::to_string(version));
  const auto header_len = detail::get_le<std::uint64_t>(bytes.subspan(8, 8));
  require(header_len <= bytes.size() - 16, "truncated header");

  json h;
  try {
    h = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const json::exception& e) {
    fail_validation(std::string("malformed JSON header: ") + e.what());
  }
  TensorFile t;
  try {
    t.dtype = h.at("dtype").get<std::string>();
    t.shape = h.at("shape").get<std::vector<std::uint64_t>>();
    t.row_major = h.value("row_major", true);
    t.axes = h.value("axes", std::vector<std::string>{});
    t.metadata = h.value("metadata", json::object());
  } catch (const json::exception& e) {
    fail_validation(std::string("malformed JSON header: ") + e.what());
  }
  require(t.dtype == "f32", "unsupported dtype '" + t.dtype + "'");
  require(!t.shape.empty(), "empty shape");
  for (auto s : t.shape) require(s > 0, "shape entries must be positive");

  const std::uint64_t expected = 4 * t.element_count();
  const std::uint64_t available = bytes.size() - 16 - header_len;
  require(available >= expected, "truncated payload");
  require(available == expected, "payload length mismatch: trailing bytes");
  t.payload.resize(t.element_count());
  auto p = bytes.subspan(16 + header_len);
  for (std::size_t i = 0; i < t.payload.size(); ++i)
    t.payload[i] = std::bit_cast<float>(detail::get_le<std::uint32_t>(p.subspan(4 * i, 4)));
  return t;
}

inline void write_tensor(const std::filesystem::path& path, const TensorFile& t) {
  const std::string bytes = encode_tensor(t);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail_compute("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail_compute("write failed for '" + path.string() + "'");
}

inline TensorFile read_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_validation("cannot open '" + path.string() + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_tensor(bytes);
}

/// Reads only the JSON header of an ACTB file.
inline json read_tensor_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_validation("cannot open '" + path.string() + "'");
  std::array<unsigned char, 16> prefix{};
  in.read(reinterpret_cast<char*>(prefix.data()), 16);
  require(in.gcount() == 16, "truncated header");
  require(std::equal(kActbMagic.begin(), kActbMagic.end(), prefix.begin(),
                     [](char a, unsigned char b) { return static_cast<unsigned char>(a) == b; }),
          "bad magic");
  require(detail::get_le<std::uint32_t>(std::span(prefix).subspan(4, 4)) == kActbVersion, "unsupported version");
  const auto len = detail::get_le<std::uint64_t>(std::span(prefix).subspan(8, 8));
  std::string header(len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(len));
  require(static_cast<std::uint64_t>(in.gcount()) == len, "truncated header");
  try {
    return json::parse(header);
  } catch (const json::exception& e) {
    fail_validation(std::string("malformed JSON header: ") + e.what());
  }
}

inline TensorFile tensor_from_matrix(const Eigen::Ref<const Matrix>& m, std::vector<std::string> axes = {},
                                     json metadata = json::object()) {
  TensorFile t;
  t.shape = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  t.axes = std::move(axes);
  t.metadata = std::move(metadata);
  t.payload.resize(static_cast<std::size_t>(m.size()));
  std::size_t i = 0;
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) t.payload[i++] = static_cast<float>(m(r, c));
  return t;
}

/// Views a 2-D tensor as a double matrix; higher-rank tensors are flattened to
/// (shape[0], product of the rest).
inline Matrix matrix_from_tensor(const TensorFile& t) {
  validate_tensor(t);
  const auto rows = static_cast<Index>(t.shape[0]);
  const auto cols = static_cast<Index>(t.element_count() / t.shape[0]);
  Matrix m(rows, cols);
  std::size_t i = 0;
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) m(r, c) = static_cast<double>(t.payload[i++]);
  return m;
}

// ---------------------------------------------------------------------------
// Layer activations

struct LayerActivations {
  int layer = 0;
  std::string context_id;
  Matrix data;
  bool centered = false;
  std::vector<std::string> row_ids;  // concept ids in row order; empty when unknown

  Index rows() const { return data.rows(); }
  Index cols() const { return data.cols(); }
};

/// Throws unless the activations are finite and, when flagged centered, each
/// column mean is zero within 1e-5 * column std + 1e-8.
inline void validate_activations(const LayerActivations& x) {
  require(x.data.size() > 0, "empty activation matrix");
  require(x.data.allFinite(), "activations contain NaN or Inf");
  if (!x.centered) return;
  const Index n = x.data.rows();
  for (Index j = 0; j < x.data.cols(); ++j) {
    const double mean = x.data.col(j).mean();
    const double sd = n > 1 ? std::sqrt((x.data.col(j).array() - mean).square().sum() / double(n - 1)) : 0.0;
    require(std::abs(mean) <= 1e-5 * sd + 1e-8, "column " + std::to_string(j) + " is not centered");
  }
}

inline LayerActivations center_columns(const Eigen::Ref<const Matrix>& x, int layer = 0, std::string context_id = {}) {
  require(x.rows() >= 2, "center_columns needs at least 2 rows");
  require(x.allFinite(), "activations contain NaN or Inf");
  LayerActivations out;
  out.layer = layer;
  out.context_id = std::move(context_id);
  out.data = x.rowwise() - x.colwise().mean();
  out.centered = true;
  return out;
}

inline LayerActivations center_columns(const LayerActivations& x) {
  auto out = center_columns(x.data, x.layer, x.context_id);
  out.row_ids = x.row_ids;
  return out;
}

// ---------------------------------------------------------------------------
// Run manifest

enum class SpanClass { DemoDescriptions = 0, MappingDelimiters, DemoLabels, Query, FinalDelimiter };
inline constexpr int kNumSpanClasses = 5;
inline constexpr std::array<const char*, kNumSpanClasses> kSpanClassNames = {
    "demo_descriptions", "mapping_delimiters", "demo_labels", "query", "final_delimiter"};

/// Half-open token range [begin, end).
struct TokenRange {
  int begin = 0;
  int end = 0;
  friend bool operator==(const TokenRange&, const TokenRange&) = default;
};

struct SpanTable {
  int prompt_length = 0;
  std::array<std::vector<TokenRange>, kNumSpanClasses> spans;

  std::vector<TokenRange>& operator[](SpanClass c) { return spans[static_cast<std::size_t>(c)]; }
  const std::vector<TokenRange>& operator[](SpanClass c) const { return spans[static_cast<std::size_t>(c)]; }
  friend bool operator==(const SpanTable&, const SpanTable&) = default;
};

/// Ranges must be non-empty, inside [0, prompt_length), and pairwise disjoint
/// across all classes.
inline void validate_spans(const SpanTable& t) {
  require(t.prompt_length > 0, "span table has non-positive prompt length");
  std::vector<TokenRange> all;
  for (const auto& cls : t.spans)
    for (const auto& r : cls) {
      require(r.begin >= 0 && r.begin < r.end && r.end <= t.prompt_length,
              "span [" + std::to_string(r.begin) + ", " + std::to_string(r.end) + ") exceeds prompt length " +
                  std::to_string(t.prompt_length));
      all.push_back(r);
    }
  std::sort(all.begin(), all.end(), [](auto a, auto b) { return a.begin < b.begin; });
  for (std::size_t i = 1; i < all.size(); ++i)
    require(all[i].begin >= all[i - 1].end, "spans overlap at token " + std::to_string(all[i].begin));
}

inline json span_table_to_json(const SpanTable& t) {
  json j;
  j["prompt_length"] = t.prompt_length;
  for (int c = 0; c < kNumSpanClasses; ++c) {
    json ranges = json::array();
    for (const auto& r : t.spans[static_cast<std::size_t>(c)]) ranges.push_back({r.begin, r.end});
    j["spans"][kSpanClassNames[static_cast<std::size_t>(c)]] = ranges;
  }
  return j;
}

inline SpanTable span_table_from_json(const json& j) {
  SpanTable t;
  t.prompt_length = j.at("prompt_length").get<int>();
  for (int c = 0; c < kNumSpanClasses; ++c) {
    const char* name = kSpanClassNames[static_cast<std::size_t>(c)];
    if (!j.at("spans").contains(name)) continue;
    for (const auto& r : j.at("spans").at(name))
      t.spans[static_cast<std::size_t>(c)].push_back({r.at(0).get<int>(), r.at(1).get<int>()});
  }
  return t;
}

enum class TensorKind { Hidden, HeadOutput, Attention };

inline std::string to_string(TensorKind k) {
  switch (k) {
    case TensorKind::Hidden: return "hidden";
    case TensorKind::HeadOutput: return "head_output";
    case TensorKind::Attention: return "attention";
  }
  return "?";
}

inline TensorKind tensor_kind_from_string(const std::string& s) {
  if (s == "hidden") return TensorKind::Hidden;
  if (s == "head_output") return TensorKind::HeadOutput;
  if (s == "attention") return TensorKind::Attention;
  fail_validation("unknown tensor kind '" + s + "'");
}

struct RunManifest {
  std::string run_id;
  std::string model_id;
  int num_demonstrations = 0;
  std::uint64_t seed = 0;
  std::vector<int> layer_ids;
  std::vector<std::string> concept_ids;
  std::vector<SpanTable> span_table;
  std::map<std::pair<int, TensorKind>, std::string> file_index;  // paths relative to the manifest
  int hidden_dim = 0;
  int num_heads = 0;
  bool post_norm = false;
  json metadata = json::object();

  Index n() const { return static_cast<Index>(concept_ids.size()); }
};

inline json manifest_to_json(const RunManifest& m) {
  json j;
  j["run_id"] = m.run_id;
  j["model_id"] = m.model_id;
  j["num_demonstrations"] = m.num_demonstrations;
  j["seed"] = m.seed;
  j["layer_ids"] = m.layer_ids;
  j["concept_ids"] = m.concept_ids;
  j["hidden_dim"] = m.hidden_dim;
  j["num_heads"] = m.num_heads;
  j["post_norm"] = m.post_norm;
  j["span_table"] = json::array();
  for (const auto& s : m.span_table) j["span_table"].push_back(span_table_to_json(s));
  j["file_index"] = json::array();
  for (const auto& [key, path] : m.file_index)
    j["file_index"].push_back({{"layer", key.first}, {"kind", to_string(key.second)}, {"path", path}});
  j["metadata"] = m.metadata;
  return j;
}

inline RunManifest manifest_from_json(const json& j) {
  RunManifest m;
  try {
    m.run_id = j.at("run_id").get<std::string>();
    m.model_id = j.at("model_id").get<std::string>();
    m.num_demonstrations = j.at("num_demonstrations").get<int>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.layer_ids = j.at("layer_ids").get<std::vector<int>>();
    m.concept_ids = j.at("concept_ids").get<std::vector<std::string>>();
    m.hidden_dim = j.at("hidden_dim").get<int>();
    m.num_heads = j.value("num_heads", 0);
    m.post_norm = j.value("post_norm", false);
    for (const auto& s : j.value("span_table", json::array())) m.span_table.push_back(span_table_from_json(s));
    for (const auto& e : j.value("file_index", json::array()))
      m.file_index[{e.at("layer").get<int>(), tensor_kind_from_string(e.at("kind").get<std::string>())}] =
          e.at("path").get<std::string>();
    m.metadata = j.value("metadata", json::object());
  } catch (const json::exception& e) {
    fail_validation(std::string("malformed manifest: ") + e.what());
  }
  return m;
}

inline void write_manifest(const std::filesystem::path& path, const RunManifest& m) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail_compute("cannot open '" + path.string() + "' for writing");
  out << manifest_to_json(m).dump(2) << '\n';
}

inline RunManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail_validation("cannot open manifest '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    fail_validation(std::string("malformed manifest JSON: ") + e.what());
  }
  return manifest_from_json(j);
}

/// Checks the manifest against its own invariants and the headers of every
/// indexed file. `base_dir` resolves relative file paths.
inline void validate_manifest(const RunManifest& m, const std::filesystem::path& base_dir) {
  std::set<std::string> seen;
  for (const auto& c : m.concept_ids) require(seen.insert(c).second, "duplicate concept id '" + c + "'");
  require(m.hidden_dim > 0, "manifest hidden_dim must be positive");
  require(m.span_table.empty() || m.span_table.size() == m.concept_ids.size(),
          "span table must have one entry per concept");
  for (const auto& s : m.span_table) validate_spans(s);

  int max_len = 0;
  for (const auto& s : m.span_table) max_len = std::max(max_len, s.prompt_length);
  const auto n = static_cast<std::uint64_t>(m.concept_ids.size());
  const auto d = static_cast<std::uint64_t>(m.hidden_dim);
  const auto k = static_cast<std::uint64_t>(m.num_heads);

  for (const auto& [key, rel] : m.file_index) {
    const auto path = base_dir / rel;
    require(std::filesystem::exists(path), "indexed file missing: " + path.string());
    const json h = read_tensor_header(path);
    const auto shape = h.at("shape").get<std::vector<std::uint64_t>>();
    const std::string where = " in " + rel + " (layer " + std::to_string(key.first) + ")";
    switch (key.second) {
      case TensorKind::Hidden:
        require(shape == std::vector<std::uint64_t>{n, d}, "hidden shape mismatch" + where);
        break;
      case TensorKind::HeadOutput:
        require(shape == std::vector<std::uint64_t>{n, k, d}, "head_output shape mismatch" + where);
        break;
      case TensorKind::Attention:
        require(shape.size() == 3 && shape[0] == n && shape[1] == k && shape[2] >= std::uint64_t(max_len),
                "attention shape mismatch" + where);
        break;
    }
  }
}

/// Loads the hidden-state matrix of one layer from a manifest directory.
inline LayerActivations load_hidden(const RunManifest& m, const std::filesystem::path& base_dir, int layer) {
  auto it = m.file_index.find({layer, TensorKind::Hidden});
  require(it != m.file_index.end(), "manifest has no hidden states for layer " + std::to_string(layer));
  LayerActivations a;
  a.layer = layer;
  a.context_id = m.run_id;
  a.data = matrix_from_tensor(read_tensor(base_dir / it->second));
  a.row_ids = m.concept_ids;
  require(a.data.rows() == m.n(), "hidden row count does not match concept count");
  validate_activations(a);
  return a;
}

}  // namespace csl
