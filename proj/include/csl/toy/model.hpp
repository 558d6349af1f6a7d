#pragma once

// Small pre-norm decoder-only transformer with an exact residual decomposition
// at the traced (last) position:
//
//   h_l = h_{l-1} + sum_k a_{l,k} + m_l,    logits = h_L U + b_U
//
// There is no normalisation between h_L and the decoder, and the attention
// output projection has no bias, so the decomposition above is exact up to
// floating-point summation.

#include "csl/common.hpp"
#include "csl/tensorstore.hpp"

#include <functional>
#include <optional>

namespace csl::toy {

struct ModelConfig {
  int vocab = 256;
  int dim = 64;
  int layers = 8;
  int heads = 4;
  int mlp_mult = 4;
  int context_len = 512;
  std::uint64_t seed = 0;

  int head_dim() const { return dim / heads; }
  int mlp_dim() const { return dim * mlp_mult; }

  void validate() const {
    require(vocab > 0 && dim > 0 && layers > 0 && heads > 0 && mlp_mult > 0 && context_len > 0,
            "model config entries must be positive");
    require(dim % heads == 0, "dim must be divisible by heads");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline json to_json(const ModelConfig& c) {
  return {{"vocab", c.vocab}, {"dim", c.dim},       {"layers", c.layers}, {"heads", c.heads},
          {"mlp_mult", c.mlp_mult}, {"context_len", c.context_len}, {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.vocab = j.value("vocab", c.vocab);
  c.dim = j.value("dim", c.dim);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.mlp_mult = j.value("mlp_mult", c.mlp_mult);
  c.context_len = j.value("context_len", c.context_len);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

/// Offsets of every parameter block inside the flat parameter vector.
struct ParamLayout {
  struct Block {
    std::size_t ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;
  };
  std::size_t tok_emb = 0, pos_emb = 0, unembed = 0, unembed_b = 0, total = 0;
  std::vector<Block> blocks;

  explicit ParamLayout(const ModelConfig& c) {
    const auto d = static_cast<std::size_t>(c.dim), v = static_cast<std::size_t>(c.vocab),
               t = static_cast<std::size_t>(c.context_len), f = static_cast<std::size_t>(c.mlp_dim());
    std::size_t off = 0;
    auto take = [&](std::size_t n) {
      const auto o = off;
      off += n;
      return o;
    };
    tok_emb = take(v * d);
    pos_emb = take(t * d);
    for (int l = 0; l < c.layers; ++l) {
      Block b{};
      b.ln1_g = take(d);
      b.ln1_b = take(d);
      b.wq = take(d * d);
      b.wk = take(d * d);
      b.wv = take(d * d);
      b.wo = take(d * d);
      b.ln2_g = take(d);
      b.ln2_b = take(d);
      b.w1 = take(d * f);
      b.b1 = take(f);
      b.w2 = take(f * d);
      b.b2 = take(d);
      blocks.push_back(b);
    }
    unembed = take(d * v);
    unembed_b = take(v);
    total = off;
  }
};

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using ColVec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <typename S>
using RowVec = Eigen::Matrix<S, 1, Eigen::Dynamic>;

/// Edits applied at the last position during a forward pass. Every callback is
/// optional and receives the value about to enter the residual stream.
template <typename S>
struct Intervention {
  /// h_l after block l (l = 0 is the embedding), before block l + 1 reads it.
  std::function<void(int layer, Eigen::Ref<ColVec<S>> h)> residual;
  /// a_{l,k}, the head's output already projected into the residual basis.
  std::function<void(int layer, int head, Eigen::Ref<ColVec<S>> a)> head_output;
  /// m_l, the MLP block output.
  std::function<void(int layer, Eigen::Ref<ColVec<S>> m)> mlp_output;

  bool empty() const { return !residual && !head_output && !mlp_output; }
};

/// Last-position quantities of one forward pass.
template <typename S>
struct ForwardTrace {
  std::vector<ColVec<S>> hidden;                 // h_0 .. h_L
  std::vector<std::vector<ColVec<S>>> heads;     // [layer-1][k] -> a_{l,k}
  std::vector<ColVec<S>> mlp;                    // [layer-1] -> m_l
  std::vector<std::vector<ColVec<S>>> attention; // [layer-1][k] -> attention row of the last position
  ColVec<S> logits;
  ColVec<S> log_probs;
};

struct ForwardOptions {
  bool trace = false;
  bool attention = false;
  bool all_logits = false;  // logits for every position, for causal-mask checks
};

template <typename S>
struct ForwardResult {
  ColVec<S> logits;     // last position
  ColVec<S> log_probs;  // last position
  RowMat<S> all_logits; // T x V when requested
  std::optional<ForwardTrace<S>> trace;
};

template <typename S>
ColVec<S> log_softmax(const Eigen::Ref<const ColVec<S>>& z) {
  const S mx = z.maxCoeff();
  const S lse = mx + std::log((z.array() - mx).exp().sum());
  return (z.array() - lse).matrix();
}

template <typename S>
class Model {
 public:
  using Mat = RowMat<S>;
  using Vec = ColVec<S>;
  using Map = Eigen::Map<Mat>;
  using CMap = Eigen::Map<const Mat>;
  using VMap = Eigen::Map<const RowVec<S>>;

  explicit Model(ModelConfig cfg) : cfg_(cfg), layout_(cfg) {
    cfg_.validate();
    params_.assign(layout_.total, S(0));
  }

  /// Gaussian initialisation; residual-writing projections are scaled by 1/sqrt(2L).
  static Model initialized(ModelConfig cfg) {
    Model m(cfg);
    Rng rng = make_rng(cfg.seed, 0x1417ULL);
    const auto& L = m.layout_;
    const int d = cfg.dim, f = cfg.mlp_dim();
    auto fill = [&](std::size_t off, std::size_t n, double scale) {
      for (std::size_t i = 0; i < n; ++i) m.params_[off + i] = static_cast<S>(scale * standard_normal(rng));
    };
    auto ones = [&](std::size_t off, std::size_t n) { std::fill_n(m.params_.begin() + static_cast<std::ptrdiff_t>(off), n, S(1)); };
    const double resid = 1.0 / std::sqrt(2.0 * cfg.layers);
    fill(L.tok_emb, std::size_t(cfg.vocab) * d, 0.5);
    fill(L.pos_emb, std::size_t(cfg.context_len) * d, 0.1);
    for (const auto& b : L.blocks) {
      ones(b.ln1_g, std::size_t(d));
      fill(b.wq, std::size_t(d) * d, 1.0 / std::sqrt(double(d)));
      fill(b.wk, std::size_t(d) * d, 1.0 / std::sqrt(double(d)));
      fill(b.wv, std::size_t(d) * d, 1.0 / std::sqrt(double(d)));
      fill(b.wo, std::size_t(d) * d, resid / std::sqrt(double(d)));
      ones(b.ln2_g, std::size_t(d));
      fill(b.w1, std::size_t(d) * f, 1.0 / std::sqrt(double(d)));
      fill(b.w2, std::size_t(f) * d, resid / std::sqrt(double(f)));
    }
    fill(L.unembed, std::size_t(d) * cfg.vocab, 1.0 / std::sqrt(double(d)));
    return m;
  }

  const ModelConfig& config() const { return cfg_; }
  const ParamLayout& layout() const { return layout_; }
  std::vector<S>& params() { return params_; }
  const std::vector<S>& params() const { return params_; }

  template <typename T>
  Model<T> cast() const {
    Model<T> out(cfg_);
    for (std::size_t i = 0; i < params_.size(); ++i) out.params()[i] = static_cast<T>(params_[i]);
    return out;
  }

  // Parameter views.
  CMap mat(std::size_t off, int rows, int cols) const { return CMap(params_.data() + off, rows, cols); }
  VMap vec(std::size_t off, int n) const { return VMap(params_.data() + off, n); }

  /// Inference forward pass. Interventions act on the last position only.
  ForwardResult<S> forward(std::span<const int> tokens, ForwardOptions opt = {},
                           const Intervention<S>* iv = nullptr) const {
    return run(tokens, opt, iv, nullptr);
  }

  /// Training forward + backward for one sequence. Positions in `targets` with
  /// value >= 0 contribute cross-entropy; gradients (scaled by `weight`) are
  /// accumulated into `grad`. Returns the summed loss and correct-prediction count.
  std::pair<double, int> loss_and_grad(std::span<const int> tokens, std::span<const int> targets, S weight,
                                       std::vector<S>& grad) const;

  struct Cache {
    struct Layer {
      Mat h_in, u1, q, k, v, o, h_mid, u2, z, g;
      std::vector<Mat> probs;  // per head T x T
      Vec mu1, rstd1, mu2, rstd2;
    };
    std::vector<Layer> layers;
    Mat h_final;
  };

 private:
  ForwardResult<S> run(std::span<const int> tokens, ForwardOptions opt, const Intervention<S>* iv, Cache* cache) const;

  static void layer_norm(const Mat& x, const VMap& g, const VMap& b, Mat& y, Vec* mu_out, Vec* rstd_out) {
    const Eigen::Index n = x.rows(), d = x.cols();
    y.resize(n, d);
    Vec mu(n), rstd(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const S m = x.row(i).mean();
      const S var = (x.row(i).array() - m).square().mean();
      const S r = S(1) / std::sqrt(var + S(1e-5));
      mu(i) = m;
      rstd(i) = r;
      y.row(i) = (((x.row(i).array() - m) * r) * g.array() + b.array()).matrix();
    }
    if (mu_out) *mu_out = mu;
    if (rstd_out) *rstd_out = rstd;
  }

  ModelConfig cfg_;
  ParamLayout layout_;
  std::vector<S> params_;
};

template <typename S>
ForwardResult<S> Model<S>::run(std::span<const int> tokens, ForwardOptions opt, const Intervention<S>* iv,
                               Cache* cache) const {
  const int t_len = static_cast<int>(tokens.size());
  require(t_len >= 1, "empty prompt");
  if (t_len > cfg_.context_len)
    fail_validation("prompt of " + std::to_string(t_len) + " tokens overflows context length " +
                    std::to_string(cfg_.context_len));
  const int d = cfg_.dim, nh = cfg_.heads, dh = cfg_.head_dim(), f = cfg_.mlp_dim();
  const int last = t_len - 1;
  const S scale = S(1) / std::sqrt(S(dh));
  const bool tracing = opt.trace || opt.attention;

  ForwardResult<S> res;
  ForwardTrace<S> tr;

  Mat h(t_len, d);
  for (int t = 0; t < t_len; ++t) {
    require(tokens[static_cast<std::size_t>(t)] >= 0 && tokens[static_cast<std::size_t>(t)] < cfg_.vocab,
            "token id out of vocabulary");
    h.row(t) = vec(layout_.tok_emb + std::size_t(tokens[static_cast<std::size_t>(t)]) * d, d) +
               vec(layout_.pos_emb + std::size_t(t) * d, d);
  }
  auto hook_residual = [&](int layer) {
    if (iv && iv->residual) {
      Vec hl = h.row(last).transpose();
      iv->residual(layer, hl);
      h.row(last) = hl.transpose();
    }
    if (opt.trace) tr.hidden.push_back(h.row(last).transpose());
  };
  hook_residual(0);
  if (cache) cache->layers.resize(static_cast<std::size_t>(cfg_.layers));

  Mat u1, u2, q, k, v, o, attn, z, g, m;
  for (int l = 0; l < cfg_.layers; ++l) {
    const auto& b = layout_.blocks[static_cast<std::size_t>(l)];
    Vec mu1, rstd1, mu2, rstd2;
    const Mat h_in = cache ? h : Mat();
    layer_norm(h, vec(b.ln1_g, d), vec(b.ln1_b, d), u1, cache ? &mu1 : nullptr, cache ? &rstd1 : nullptr);
    q.noalias() = u1 * mat(b.wq, d, d);
    k.noalias() = u1 * mat(b.wk, d, d);
    v.noalias() = u1 * mat(b.wv, d, d);
    o.setZero(t_len, d);
    std::vector<Mat> probs;
    if (cache) probs.resize(static_cast<std::size_t>(nh));
    std::vector<Vec> attn_rows;
    for (int hd = 0; hd < nh; ++hd) {
      Mat sc = (q.middleCols(hd * dh, dh) * k.middleCols(hd * dh, dh).transpose()) * scale;
      for (int i = 0; i < t_len; ++i) {
        const S mx = sc.row(i).head(i + 1).maxCoeff();
        S sum = 0;
        for (int j = 0; j <= i; ++j) {
          const S e = std::exp(sc(i, j) - mx);
          sc(i, j) = e;
          sum += e;
        }
        sc.row(i).head(i + 1) /= sum;
        if (i + 1 < t_len) sc.row(i).tail(t_len - i - 1).setZero();
      }
      o.middleCols(hd * dh, dh).noalias() = sc * v.middleCols(hd * dh, dh);
      if (opt.attention) attn_rows.push_back(sc.row(last).transpose());
      if (cache) probs[static_cast<std::size_t>(hd)] = std::move(sc);
    }
    const CMap wo = mat(b.wo, d, d);
    attn.noalias() = o * wo;
    // The last row is rebuilt head by head so that every run, patched or not,
    // sums the same terms in the same order.
    {
      std::vector<Vec> head_out(static_cast<std::size_t>(nh));
      for (int hd = 0; hd < nh; ++hd) {
        head_out[static_cast<std::size_t>(hd)] =
            (o.row(last).segment(hd * dh, dh) * wo.middleRows(hd * dh, dh)).transpose();
        if (iv && iv->head_output) iv->head_output(l + 1, hd, head_out[static_cast<std::size_t>(hd)]);
      }
      Vec total = Vec::Zero(d);
      for (const auto& a : head_out) total += a;
      attn.row(last) = total.transpose();
      if (opt.trace) tr.heads.push_back(std::move(head_out));
    }
    if (opt.attention) tr.attention.push_back(std::move(attn_rows));
    h += attn;
    const Mat h_mid = cache ? h : Mat();

    layer_norm(h, vec(b.ln2_g, d), vec(b.ln2_b, d), u2, cache ? &mu2 : nullptr, cache ? &rstd2 : nullptr);
    z.noalias() = u2 * mat(b.w1, d, f);
    z.rowwise() += vec(b.b1, f);
    g = z.cwiseMax(S(0));
    m.noalias() = g * mat(b.w2, f, d);
    m.rowwise() += vec(b.b2, d);
    if (iv && iv->mlp_output) {
      Vec ml = m.row(last).transpose();
      iv->mlp_output(l + 1, ml);
      m.row(last) = ml.transpose();
    }
    if (opt.trace) tr.mlp.push_back(m.row(last).transpose());
    h += m;
    if (cache) {
      auto& c = cache->layers[static_cast<std::size_t>(l)];
      c.h_in = h_in;
      c.u1 = u1;
      c.q = q;
      c.k = k;
      c.v = v;
      c.o = o;
      c.h_mid = h_mid;
      c.u2 = u2;
      c.z = z;
      c.g = g;
      c.probs = std::move(probs);
      c.mu1 = mu1;
      c.rstd1 = rstd1;
      c.mu2 = mu2;
      c.rstd2 = rstd2;
    }
    hook_residual(l + 1);
  }
  if (cache) cache->h_final = h;

  const CMap unembed = mat(layout_.unembed, d, cfg_.vocab);
  const VMap ub = vec(layout_.unembed_b, cfg_.vocab);
  res.logits = (h.row(last) * unembed + ub).transpose();
  res.log_probs = log_softmax<S>(res.logits);
  if (opt.all_logits) {
    res.all_logits = h * unembed;
    res.all_logits.rowwise() += ub;
  }
  if (tracing) {
    tr.logits = res.logits;
    tr.log_probs = res.log_probs;
    res.trace = std::move(tr);
  }
  return res;
}

template <typename S>
std::pair<double, int> Model<S>::loss_and_grad(std::span<const int> tokens, std::span<const int> targets, S weight,
                                               std::vector<S>& grad) const {
  require(tokens.size() == targets.size(), "targets must align with tokens");
  require(grad.size() == params_.size(), "gradient buffer size mismatch");
  Cache cache;
  run(tokens, {}, nullptr, &cache);
  const int t_len = static_cast<int>(tokens.size());
  const int d = cfg_.dim, nh = cfg_.heads, dh = cfg_.head_dim(), f = cfg_.mlp_dim(), nv = cfg_.vocab;
  const S scale = S(1) / std::sqrt(S(dh));
  auto gmat = [&](std::size_t off, int rows, int cols) { return Map(grad.data() + off, rows, cols); };
  auto gvec = [&](std::size_t off, int n) { return Eigen::Map<RowVec<S>>(grad.data() + off, n); };

  const CMap unembed = mat(layout_.unembed, d, nv);
  const VMap ub = vec(layout_.unembed_b, nv);
  Mat dh_res = Mat::Zero(t_len, d);
  double loss = 0;
  int correct = 0;
  for (int t = 0; t < t_len; ++t) {
    const int y = targets[static_cast<std::size_t>(t)];
    if (y < 0) continue;
    const RowVec<S> z = cache.h_final.row(t) * unembed + ub;
    Eigen::Index arg;
    const S mx = z.maxCoeff(&arg);
    if (arg == y) ++correct;
    RowVec<S> p = (z.array() - mx).exp();
    const S sum = p.sum();
    p /= sum;
    loss += -(static_cast<double>(z(y) - mx) - std::log(static_cast<double>(sum)));
    p(y) -= S(1);
    p *= weight;
    gmat(layout_.unembed, d, nv).noalias() += cache.h_final.row(t).transpose() * p;
    gvec(layout_.unembed_b, nv) += p;
    dh_res.row(t).noalias() += p * unembed.transpose();
  }

  auto ln_backward = [&](const Mat& dy, const Mat& x, const Vec& mu, const Vec& rstd, std::size_t g_off,
                         std::size_t b_off, Mat& dx) {
    const VMap gamma = vec(g_off, d);
    dx.resize(t_len, d);
    auto dg = gvec(g_off, d);
    auto db = gvec(b_off, d);
    for (int i = 0; i < t_len; ++i) {
      const RowVec<S> xhat = ((x.row(i).array() - mu(i)) * rstd(i)).matrix();
      dg += dy.row(i).cwiseProduct(xhat);
      db += dy.row(i);
      const RowVec<S> dxhat = dy.row(i).cwiseProduct(gamma);
      const S m1 = dxhat.mean();
      const S m2 = dxhat.cwiseProduct(xhat).mean();
      dx.row(i) = (rstd(i) * (dxhat.array() - m1 - xhat.array() * m2)).matrix();
    }
  };

  Mat dx, dz, du, dq, dk, dv, dout;
  for (int l = cfg_.layers - 1; l >= 0; --l) {
    const auto& b = layout_.blocks[static_cast<std::size_t>(l)];
    const auto& c = cache.layers[static_cast<std::size_t>(l)];
    // MLP: h_out = h_mid + relu(LN2(h_mid) W1 + b1) W2 + b2
    gmat(b.w2, f, d).noalias() += c.g.transpose() * dh_res;
    gvec(b.b2, d) += dh_res.colwise().sum();
    dz.noalias() = dh_res * mat(b.w2, f, d).transpose();
    dz = dz.cwiseProduct((c.z.array() > S(0)).template cast<S>().matrix());
    gmat(b.w1, d, f).noalias() += c.u2.transpose() * dz;
    gvec(b.b1, f) += dz.colwise().sum();
    du.noalias() = dz * mat(b.w1, d, f).transpose();
    ln_backward(du, c.h_mid, c.mu2, c.rstd2, b.ln2_g, b.ln2_b, dx);
    dh_res += dx;

    // Attention: h_mid = h_in + softmax(QK^T) V Wo
    const CMap wo = mat(b.wo, d, d);
    gmat(b.wo, d, d).noalias() += c.o.transpose() * dh_res;
    dout.noalias() = dh_res * wo.transpose();
    dq.setZero(t_len, d);
    dk.setZero(t_len, d);
    dv.setZero(t_len, d);
    for (int hd = 0; hd < nh; ++hd) {
      const Mat& p = c.probs[static_cast<std::size_t>(hd)];
      const auto d_o = dout.middleCols(hd * dh, dh);
      Mat dp = d_o * c.v.middleCols(hd * dh, dh).transpose();
      dv.middleCols(hd * dh, dh).noalias() += p.transpose() * d_o;
      const ColVec<S> rs = (dp.cwiseProduct(p)).rowwise().sum();
      Mat ds = p.cwiseProduct(dp - rs.replicate(1, t_len)) * scale;
      dq.middleCols(hd * dh, dh).noalias() += ds * c.k.middleCols(hd * dh, dh);
      dk.middleCols(hd * dh, dh).noalias() += ds.transpose() * c.q.middleCols(hd * dh, dh);
    }
    gmat(b.wq, d, d).noalias() += c.u1.transpose() * dq;
    gmat(b.wk, d, d).noalias() += c.u1.transpose() * dk;
    gmat(b.wv, d, d).noalias() += c.u1.transpose() * dv;
    du.noalias() = dq * mat(b.wq, d, d).transpose();
    du.noalias() += dk * mat(b.wk, d, d).transpose();
    du.noalias() += dv * mat(b.wv, d, d).transpose();
    ln_backward(du, c.h_in, c.mu1, c.rstd1, b.ln1_g, b.ln1_b, dx);
    dh_res += dx;
  }
  for (int t = 0; t < t_len; ++t) {
    gvec(layout_.tok_emb + std::size_t(tokens[static_cast<std::size_t>(t)]) * d, d) += dh_res.row(t);
    gvec(layout_.pos_emb + std::size_t(t) * d, d) += dh_res.row(t);
  }
  return {loss, correct};
}

// ---------------------------------------------------------------------------
// Checkpoints: one ACTB tensor holding the flat parameter vector, with the
// model config in its metadata.

template <typename S>
TensorFile checkpoint_tensor(const Model<S>& m, json extra = json::object()) {
  TensorFile t;
  t.shape = {static_cast<std::uint64_t>(m.params().size())};
  t.axes = {"param"};
  t.metadata = {{"model_config", to_json(m.config())}, {"extra", std::move(extra)}};
  t.payload.resize(m.params().size());
  for (std::size_t i = 0; i < t.payload.size(); ++i) t.payload[i] = static_cast<float>(m.params()[i]);
  return t;
}

template <typename S>
Model<S> model_from_checkpoint(const TensorFile& t) {
  require(t.metadata.contains("model_config"), "checkpoint lacks model_config metadata");
  const ModelConfig cfg = model_config_from_json(t.metadata.at("model_config"));
  Model<S> m(cfg);
  require(t.payload.size() == m.params().size(), "checkpoint parameter count does not match its config");
  for (std::size_t i = 0; i < t.payload.size(); ++i) m.params()[i] = static_cast<S>(t.payload[i]);
  return m;
}

template <typename S>
void save_checkpoint(const std::filesystem::path& path, const Model<S>& m, json extra = json::object()) {
  write_tensor(path, checkpoint_tensor(m, std::move(extra)));
}

template <typename S>
Model<S> load_checkpoint(const std::filesystem::path& path) {
  return model_from_checkpoint<S>(read_tensor(path));
}

}  // namespace csl::toy
