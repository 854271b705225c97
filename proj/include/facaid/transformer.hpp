#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <numbers>
#include <random>
#include <type_traits>
#include <string>
#include <vector>

#include "facaid/automaton.hpp"
#include "facaid/error.hpp"
#include "facaid/generator.hpp"
#include "facaid/io.hpp"
#include "facaid/tokenizer.hpp"

namespace facaid {

struct ModelConfig {
  int embed_dim = 256;
  int enc_layers = 4;
  int dec_layers = 4;
  int heads = 8;
  int ff_mult = 4;
  double dropout = 0.1;
  int vocab_size = 0;
  int max_input = kMaxInputTokens;
  int max_output = kMaxOutputTokens;
  int resolution = 100;

  void validate() const {
    auto bad = [](const std::string& m) { throw Error(ErrorCode::BadInput, m); };
    if (embed_dim < 1 || heads < 1 || embed_dim % heads != 0) bad("embed_dim must be a positive multiple of heads");
    if (enc_layers < 0 || dec_layers < 0 || ff_mult < 1) bad("layer counts must be non-negative, ff_mult positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) bad("dropout must lie in [0, 1)");
    if (vocab_size < 1) bad("vocab_size must be positive");
    if (max_input < 1 || max_output < 2) bad("sequence limits too small");
  }
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline json config_to_json(const ModelConfig& c) {
  return {{"embed_dim", c.embed_dim}, {"enc_layers", c.enc_layers}, {"dec_layers", c.dec_layers},
          {"heads", c.heads},         {"ff_mult", c.ff_mult},       {"dropout", c.dropout},
          {"vocab_size", c.vocab_size}, {"max_input", c.max_input}, {"max_output", c.max_output},
          {"resolution", c.resolution}};
}

inline ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.embed_dim = j.at("embed_dim");
  c.enc_layers = j.at("enc_layers");
  c.dec_layers = j.at("dec_layers");
  c.heads = j.at("heads");
  c.ff_mult = j.at("ff_mult");
  c.dropout = j.at("dropout");
  c.vocab_size = j.at("vocab_size");
  c.max_input = j.at("max_input");
  c.max_output = j.at("max_output");
  c.resolution = j.at("resolution");
  return c;
}

/// One training pair: layout tokens in, [BOS ... EOS] tree tokens out.
struct Example {
  TokenSeq input;
  TokenSeq output;
};

inline Example make_example(const DatasetRecord& r, const Vocabulary& vocab) {
  return {encode_layout(r.layout, vocab), encode_tree(r.tree, vocab)};
}

namespace nn {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using Col = Eigen::Matrix<S, Eigen::Dynamic, 1>;

template <class S>
struct LnCache {
  Mat<S> xhat;
  Col<S> rstd;
};

template <class S>
Mat<S> layer_norm(const Mat<S>& x, const Mat<S>& g, const Mat<S>& b, LnCache<S>* c) {
  const auto n = static_cast<S>(x.cols());
  Mat<S> xhat(x.rows(), x.cols());
  Col<S> rstd(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const S mean = x.row(r).sum() / n;
    auto d = (x.row(r).array() - mean).eval();
    const S rs = S(1) / std::sqrt(d.square().sum() / n + S(1e-5));
    xhat.row(r) = d * rs;
    rstd(r) = rs;
  }
  Mat<S> y = (xhat.array().rowwise() * g.row(0).array()).rowwise() + b.row(0).array();
  if (c) {
    c->xhat = std::move(xhat);
    c->rstd = std::move(rstd);
  }
  return y;
}

template <class S>
Mat<S> layer_norm_back(const Mat<S>& dy, const LnCache<S>& c, const Mat<S>& g, Mat<S>& dg, Mat<S>& db) {
  dg.row(0) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  db.row(0) += dy.colwise().sum();
  Mat<S> dxhat = dy.array().rowwise() * g.row(0).array();
  const auto n = static_cast<S>(dy.cols());
  Mat<S> dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const S m1 = dxhat.row(r).sum() / n;
    const S m2 = (dxhat.row(r).array() * c.xhat.row(r).array()).sum() / n;
    dx.row(r) = c.rstd(r) * (dxhat.row(r).array() - m1 - c.xhat.row(r).array() * m2);
  }
  return dx;
}

template <class S>
Mat<S> linear(const Mat<S>& x, const Mat<S>& w, const Mat<S>& b) {
  Mat<S> y = x * w;
  y.rowwise() += b.row(0);
  return y;
}

template <class S>
Mat<S> linear_back(const Mat<S>& dy, const Mat<S>& x, const Mat<S>& w, Mat<S>& dw, Mat<S>& db) {
  dw.noalias() += x.transpose() * dy;
  db.row(0) += dy.colwise().sum();
  return dy * w.transpose();
}

template <class S>
constexpr S kGeluC = S(0.7978845608028654);  // sqrt(2/pi)

template <class S>
Mat<S> gelu(const Mat<S>& x) {
  const auto a = x.array();
  return (S(0.5) * a * (S(1) + (kGeluC<S> * (a + S(0.044715) * a.cube())).tanh())).matrix();
}

template <class S>
Mat<S> gelu_back(const Mat<S>& dy, const Mat<S>& x) {
  const auto a = x.array();
  const auto t = (kGeluC<S> * (a + S(0.044715) * a.cube())).tanh().eval();
  const auto dt = (S(1) - t.square()) * kGeluC<S> * (S(1) + S(3 * 0.044715) * a.square());
  return (dy.array() * (S(0.5) * (S(1) + t) + S(0.5) * a * dt)).matrix();
}

/// Multi-head scaled dot-product attention; q is T×D, k and v are M×D.
template <class S>
Mat<S> attention(const Mat<S>& q, const Mat<S>& k, const Mat<S>& v, int heads, bool causal,
                 std::vector<Mat<S>>* probs) {
  const Eigen::Index T = q.rows(), M = k.rows(), D = q.cols(), dh = D / heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  Mat<S> o(T, D);
  if (probs) probs->resize(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Mat<S> s = (q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose()) * scale;
    for (Eigen::Index i = 0; i < T; ++i) {
      if (causal)
        for (Eigen::Index j = i + 1; j < M; ++j) s(i, j) = -std::numeric_limits<S>::infinity();
      const S mx = s.row(i).maxCoeff();
      s.row(i) = (s.row(i).array() - mx).exp();
      s.row(i) /= s.row(i).sum();
    }
    o.middleCols(h * dh, dh).noalias() = s * v.middleCols(h * dh, dh);
    if (probs) (*probs)[static_cast<std::size_t>(h)] = std::move(s);
  }
  return o;
}

template <class S>
void attention_back(const Mat<S>& d_o, const Mat<S>& q, const Mat<S>& k, const Mat<S>& v,
                    const std::vector<Mat<S>>& probs, int heads, Mat<S>& dq, Mat<S>& dk, Mat<S>& dv) {
  const Eigen::Index D = q.cols(), dh = D / heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  dq.setZero(q.rows(), D);
  dk.setZero(k.rows(), D);
  dv.setZero(v.rows(), D);
  for (int h = 0; h < heads; ++h) {
    const auto& p = probs[static_cast<std::size_t>(h)];
    const auto doh = d_o.middleCols(h * dh, dh);
    dv.middleCols(h * dh, dh).noalias() += p.transpose() * doh;
    Mat<S> dp = doh * v.middleCols(h * dh, dh).transpose();
    Col<S> rs = (dp.array() * p.array()).rowwise().sum();
    Mat<S> ds = (p.array() * (dp.array().colwise() - rs.array())) * scale;
    dq.middleCols(h * dh, dh).noalias() = ds * k.middleCols(h * dh, dh);
    dk.middleCols(h * dh, dh).noalias() += ds.transpose() * q.middleCols(h * dh, dh);
  }
}

struct LnIdx {
  int g, b;
};
struct FfIdx {
  int w1, b1, w2, b2;
};
/// Self attention uses a fused q|k|v projection in w_in; cross attention
/// projects queries with w_in and memory keys|values with w_kv.
struct AttnIdx {
  int w_in, b_in, w_kv, b_kv, wo, bo;
};
struct EncLayerIdx {
  LnIdx ln1;
  AttnIdx attn;
  LnIdx ln2;
  FfIdx ff;
};
struct DecLayerIdx {
  LnIdx ln1;
  AttnIdx self;
  LnIdx ln2;
  AttnIdx cross;
  LnIdx ln3;
  FfIdx ff;
};

struct ModelIdx {
  int tok, enc_g, enc_l, dec_g, dec_l;
  LnIdx enc_lnf, dec_lnf;
  int head_w, head_b;
};

template <class S>
struct AttnCache {
  Mat<S> in, q, k, v, o;
  std::vector<Mat<S>> probs;
};

template <class S>
struct FfCache {
  Mat<S> in, h, g;
};

template <class S>
struct EncLayerCache {
  LnCache<S> ln1, ln2;
  AttnCache<S> attn;
  FfCache<S> ff;
  Mat<S> drop1, drop2;
};

template <class S>
struct DecLayerCache {
  LnCache<S> ln1, ln2, ln3;
  AttnCache<S> self, cross;
  FfCache<S> ff;
  Mat<S> drop1, drop2, drop3;
};

}  // namespace nn

/// Encoder-decoder transformer with pre-norm blocks, learned global and local
/// position embeddings, and a linear output head over the vocabulary.
template <class S>
class SeqModel {
 public:
  using Mat = nn::Mat<S>;

  struct Grads {
    std::vector<Mat> g;
  };

  SeqModel() = default;

  SeqModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    build();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const double resid = 0.02 / std::sqrt(2.0 * std::max(1, cfg_.enc_layers + cfg_.dec_layers));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto& n = names_[i];
      auto& p = params_[i];
      const bool gain = n.ends_with(".g");
      const bool bias = n.ends_with(".b") || n.find(".b_") != std::string::npos;
      if (gain) {
        p.setOnes();
      } else if (bias) {
        p.setZero();
      } else {
        const double sd = (n.ends_with(".wo") || n.ends_with(".w2")) ? resid : 0.02;
        for (Eigen::Index k = 0; k < p.size(); ++k) p.data()[k] = static_cast<S>(sd * normal(rng));
      }
    }
  }

  const ModelConfig& config() const { return cfg_; }
  const std::vector<Mat>& parameters() const { return params_; }
  std::vector<Mat>& parameters() { return params_; }
  const std::vector<std::string>& parameter_names() const { return names_; }
  /// Biases, layer-norm parameters and position tables are not decayed.
  bool decays(std::size_t i) const { return decay_[i]; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.size());
    return n;
  }

  Grads zero_grads() const {
    Grads g;
    for (const auto& p : params_) g.g.push_back(Mat::Zero(p.rows(), p.cols()));
    return g;
  }

  template <class T>
  SeqModel<T> cast() const {
    SeqModel<T> out;
    out.cfg_ = cfg_;
    out.names_ = names_;
    out.decay_ = decay_;
    out.enc_ = enc_;
    out.dec_ = dec_;
    out.idx_ = idx_;
    for (const auto& p : params_) out.params_.push_back(p.template cast<T>());
    return out;
  }

  // ------------------------------------------------------------------------
  // Inference

  /// Sequence-aware embedding of the input, one row per token.
  Mat encode(const TokenSeq& input) const {
    Trace t;
    return encode_fwd(input, t, static_cast<NoDrop*>(nullptr));
  }

  /// Logits for every position of `prefix` (row i predicts token i+1).
  Mat decode_logits(const Mat& memory, const TokenSeq& prefix) const {
    check_prefix(prefix);
    Trace t;
    return decode_fwd(memory, prefix.tokens, prefix.global_pos, prefix.local_pos, t, static_cast<NoDrop*>(nullptr));
  }

  /// Logits for the token following `prefix`.
  Eigen::Matrix<S, 1, Eigen::Dynamic> decode_step(const Mat& memory, const TokenSeq& prefix) const {
    return decode_logits(memory, prefix).bottomRows(1);
  }

  /// Incremental decoder with cached keys and values.
  class Session {
   public:
    Session(const SeqModel& m, Mat memory) : m_(&m), memory_(std::move(memory)) {
      const auto& c = m.cfg_;
      const Eigen::Index D = c.embed_dim;
      for (const auto& L : m.dec_) {
        self_k_.push_back(Mat(c.max_output, D));
        self_v_.push_back(Mat(c.max_output, D));
        Mat kv = nn::linear(memory_, m.p(L.cross.w_kv), m.p(L.cross.b_kv));
        cross_k_.push_back(kv.leftCols(D));
        cross_v_.push_back(kv.rightCols(D));
      }
    }

    int position() const { return t_; }

    Eigen::Matrix<S, 1, Eigen::Dynamic> step(Token token, int local) {
      const auto& m = *m_;
      const auto& c = m.cfg_;
      if (t_ >= c.max_output)
        throw Error(ErrorCode::LengthExceeded, "decoder position " + std::to_string(t_));
      m.check_local(local);
      const Eigen::Index D = c.embed_dim;
      Mat x = m.p(m.idx_.tok).row(token) + m.p(m.idx_.dec_g).row(t_) + m.p(m.idx_.dec_l).row(local);
      for (std::size_t l = 0; l < m.dec_.size(); ++l) {
        const auto& L = m.dec_[l];
        Mat a = nn::layer_norm<S>(x, m.p(L.ln1.g), m.p(L.ln1.b), nullptr);
        Mat qkv = nn::linear(a, m.p(L.self.w_in), m.p(L.self.b_in));
        self_k_[l].row(t_) = qkv.middleCols(D, D);
        self_v_[l].row(t_) = qkv.rightCols(D);
        Mat o = nn::attention<S>(qkv.leftCols(D), self_k_[l].topRows(t_ + 1), self_v_[l].topRows(t_ + 1),
                                 c.heads, false, nullptr);
        x += nn::linear(o, m.p(L.self.wo), m.p(L.self.bo));
        Mat b = nn::layer_norm<S>(x, m.p(L.ln2.g), m.p(L.ln2.b), nullptr);
        Mat q = nn::linear(b, m.p(L.cross.w_in), m.p(L.cross.b_in));
        Mat co = nn::attention<S>(q, cross_k_[l], cross_v_[l], c.heads, false, nullptr);
        x += nn::linear(co, m.p(L.cross.wo), m.p(L.cross.bo));
        Mat f = nn::layer_norm<S>(x, m.p(L.ln3.g), m.p(L.ln3.b), nullptr);
        x += nn::linear<S>(nn::gelu<S>(nn::linear(f, m.p(L.ff.w1), m.p(L.ff.b1))), m.p(L.ff.w2), m.p(L.ff.b2));
      }
      Mat z = nn::layer_norm<S>(x, m.p(m.idx_.dec_lnf.g), m.p(m.idx_.dec_lnf.b), nullptr);
      ++t_;
      return nn::linear(z, m.p(m.idx_.head_w), m.p(m.idx_.head_b));
    }

   private:
    const SeqModel* m_;
    Mat memory_;
    std::vector<Mat> self_k_, self_v_, cross_k_, cross_v_;
    int t_ = 0;
  };

  // ------------------------------------------------------------------------
  // Training

  struct Result {
    double loss_sum = 0;  // summed next-token cross-entropy
    std::size_t tokens = 0;
  };

  /// Teacher-forced logits for the whole output (row i predicts output[i+1]).
  Mat teacher_forced_logits(const Example& ex) const {
    Trace t;
    Mat memory = encode_fwd(ex.input, t, static_cast<NoDrop*>(nullptr));
    auto [tok, gp, lp] = decoder_inputs(ex.output);
    return decode_fwd(memory, tok, gp, lp, t, static_cast<NoDrop*>(nullptr));
  }

  /// Forward pass, and backward pass into `grads` when given. `rng` enables
  /// dropout. Gradients are of the summed (not averaged) loss.
  template <class Rng = std::mt19937_64>
  Result forward_backward(const Example& ex, Grads* grads, Rng* rng = nullptr) const {
    Trace t;
    Dropper<Rng> drop{rng, cfg_.dropout};
    Mat memory = encode_fwd(ex.input, t, &drop);
    auto [tok, gp, lp] = decoder_inputs(ex.output);
    Mat logits = decode_fwd(memory, tok, gp, lp, t, &drop);

    Result r;
    Mat dlogits(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      const S mx = logits.row(i).maxCoeff();
      auto e = (logits.row(i).array() - mx).exp().eval();
      const S sum = e.sum();
      const Token target = ex.output.tokens[static_cast<std::size_t>(i) + 1];
      r.loss_sum += -(static_cast<double>(logits(i, target) - mx) - std::log(static_cast<double>(sum)));
      dlogits.row(i) = e / sum;
      dlogits(i, target) -= S(1);
    }
    r.tokens = static_cast<std::size_t>(logits.rows());
    if (grads) backward(dlogits, ex, t, *grads);
    return r;
  }

 private:
  template <class>
  friend class SeqModel;

  template <class Rng>
  struct Dropper {
    Rng* rng;
    double p;
    bool on() const { return rng && p > 0; }
    Mat mask(Eigen::Index r, Eigen::Index c) {
      Mat m(r, c);
      // raw 64-bit draws compared against p * 2^64
      const auto cut = static_cast<std::uint64_t>(std::ldexp(p, 64));
      const S keep = static_cast<S>(1.0 / (1.0 - p));
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = (*rng)() < cut ? S(0) : keep;
      return m;
    }
  };

  using NoDrop = Dropper<std::mt19937_64>;

  struct Trace {
    Mat enc_drop0, dec_drop0, memory_pre;
    std::vector<nn::EncLayerCache<S>> enc;
    std::vector<nn::DecLayerCache<S>> dec;
    nn::LnCache<S> enc_lnf, dec_lnf;
    Mat dec_out;
  };

  const Mat& p(int i) const { return params_[static_cast<std::size_t>(i)]; }

  int add(const std::string& name, Eigen::Index r, Eigen::Index c, bool decay) {
    names_.push_back(name);
    params_.push_back(Mat::Zero(r, c));
    decay_.push_back(decay);
    return static_cast<int>(params_.size() - 1);
  }

  nn::LnIdx add_ln(const std::string& n) {
    const Eigen::Index D = cfg_.embed_dim;
    return {add(n + ".g", 1, D, false), add(n + ".b", 1, D, false)};
  }

  nn::FfIdx add_ff(const std::string& n) {
    const Eigen::Index D = cfg_.embed_dim, F = D * cfg_.ff_mult;
    return {add(n + ".w1", D, F, true), add(n + ".b_1", 1, F, false), add(n + ".w2", F, D, true),
            add(n + ".b_2", 1, D, false)};
  }

  void build() {
    const Eigen::Index D = cfg_.embed_dim;
    const Eigen::Index L = kMaxLocalIndex + 1;
    idx_.tok = add("tok_emb", cfg_.vocab_size, D, true);
    idx_.enc_g = add("enc.gpos", cfg_.max_input, D, false);
    idx_.enc_l = add("enc.lpos", L, D, false);
    idx_.dec_g = add("dec.gpos", cfg_.max_output, D, false);
    idx_.dec_l = add("dec.lpos", L, D, false);
    for (int i = 0; i < cfg_.enc_layers; ++i) {
      const std::string n = "enc." + std::to_string(i);
      nn::EncLayerIdx e;
      e.ln1 = add_ln(n + ".ln1");
      e.attn = {add(n + ".attn.w_in", D, 3 * D, true), add(n + ".attn.b_in", 1, 3 * D, false), -1, -1,
                add(n + ".attn.wo", D, D, true), add(n + ".attn.b_o", 1, D, false)};
      e.ln2 = add_ln(n + ".ln2");
      e.ff = add_ff(n + ".ff");
      enc_.push_back(e);
    }
    idx_.enc_lnf = add_ln("enc.lnf");
    for (int i = 0; i < cfg_.dec_layers; ++i) {
      const std::string n = "dec." + std::to_string(i);
      nn::DecLayerIdx d;
      d.ln1 = add_ln(n + ".ln1");
      d.self = {add(n + ".self.w_in", D, 3 * D, true), add(n + ".self.b_in", 1, 3 * D, false), -1, -1,
                add(n + ".self.wo", D, D, true), add(n + ".self.b_o", 1, D, false)};
      d.ln2 = add_ln(n + ".ln2");
      d.cross = {add(n + ".cross.w_in", D, D, true), add(n + ".cross.b_in", 1, D, false),
                 add(n + ".cross.w_kv", D, 2 * D, true), add(n + ".cross.b_kv", 1, 2 * D, false),
                 add(n + ".cross.wo", D, D, true), add(n + ".cross.b_o", 1, D, false)};
      d.ln3 = add_ln(n + ".ln3");
      d.ff = add_ff(n + ".ff");
      dec_.push_back(d);
    }
    idx_.dec_lnf = add_ln("dec.lnf");
    idx_.head_w = add("head.w", D, cfg_.vocab_size, true);
    idx_.head_b = add("head.b_", 1, cfg_.vocab_size, false);
  }

  void check_local(int local) const {
    if (local < 0 || local > kMaxLocalIndex)
      throw Error(ErrorCode::LengthExceeded, "local index " + std::to_string(local) + " exceeds " +
                                                 std::to_string(kMaxLocalIndex));
  }

  void check_tokens(const std::vector<Token>& toks) const {
    for (Token t : toks)
      if (t < 0 || t >= cfg_.vocab_size) throw Error(ErrorCode::BadInput, "token outside vocabulary");
  }

  void check_prefix(const TokenSeq& prefix) const {
    if (prefix.tokens.empty() || prefix.tokens[0] != Vocabulary::kBos)
      throw Error(ErrorCode::MalformedSequence, "decoder prefix must start with BOS");
    if (static_cast<int>(prefix.size()) > cfg_.max_output)
      throw Error(ErrorCode::LengthExceeded, "prefix of " + std::to_string(prefix.size()) + " tokens");
  }

  static std::tuple<std::vector<Token>, std::vector<int>, std::vector<int>> decoder_inputs(const TokenSeq& out) {
    if (out.size() < 2) throw Error(ErrorCode::MalformedSequence, "output sequence needs at least two tokens");
    const auto n = static_cast<long>(out.size()) - 1;
    return {std::vector<Token>(out.tokens.begin(), out.tokens.begin() + n),
            std::vector<int>(out.global_pos.begin(), out.global_pos.begin() + n),
            std::vector<int>(out.local_pos.begin(), out.local_pos.begin() + n)};
  }

  Mat embed(const std::vector<Token>& tok, const std::vector<int>& gp, const std::vector<int>& lp, int gtab,
            int ltab, int max_len) const {
    check_tokens(tok);
    Mat x(static_cast<Eigen::Index>(tok.size()), cfg_.embed_dim);
    for (std::size_t i = 0; i < tok.size(); ++i) {
      if (gp[i] < 0 || gp[i] >= max_len)
        throw Error(ErrorCode::LengthExceeded, "position " + std::to_string(gp[i]) + " exceeds " +
                                                   std::to_string(max_len));
      check_local(lp[i]);
      const auto r = static_cast<Eigen::Index>(i);
      x.row(r) = p(idx_.tok).row(tok[i]) + p(gtab).row(gp[i]) + p(ltab).row(lp[i]);
    }
    return x;
  }

  template <class Drop>
  Mat apply_drop(Mat y, Mat& mask, Drop* drop) const {
    if (drop && drop->on()) {
      mask = drop->mask(y.rows(), y.cols());
      y.array() *= mask.array();
    } else {
      mask.resize(0, 0);
    }
    return y;
  }

  static Mat undrop(const Mat& dy, const Mat& mask) {
    if (mask.size() == 0) return dy;
    return dy.cwiseProduct(mask);
  }

  template <class Drop>
  Mat encode_fwd(const TokenSeq& in, Trace& t, Drop* drop) const {
    if (in.size() == 0) throw Error(ErrorCode::BadInput, "empty input sequence");
    if (static_cast<int>(in.size()) > cfg_.max_input)
      throw Error(ErrorCode::LengthExceeded, std::to_string(in.size()) + " input tokens exceed " +
                                                 std::to_string(cfg_.max_input));
    const Eigen::Index D = cfg_.embed_dim;
    Mat x = apply_drop(embed(in.tokens, in.global_pos, in.local_pos, idx_.enc_g, idx_.enc_l, cfg_.max_input),
                       t.enc_drop0, drop);
    t.enc.resize(enc_.size());
    for (std::size_t l = 0; l < enc_.size(); ++l) {
      const auto& L = enc_[l];
      auto& c = t.enc[l];
      c.attn.in = nn::layer_norm(x, p(L.ln1.g), p(L.ln1.b), &c.ln1);
      Mat qkv = nn::linear(c.attn.in, p(L.attn.w_in), p(L.attn.b_in));
      c.attn.q = qkv.leftCols(D);
      c.attn.k = qkv.middleCols(D, D);
      c.attn.v = qkv.rightCols(D);
      c.attn.o = nn::attention(c.attn.q, c.attn.k, c.attn.v, cfg_.heads, false, &c.attn.probs);
      x += apply_drop(nn::linear(c.attn.o, p(L.attn.wo), p(L.attn.bo)), c.drop1, drop);
      c.ff.in = nn::layer_norm(x, p(L.ln2.g), p(L.ln2.b), &c.ln2);
      c.ff.h = nn::linear(c.ff.in, p(L.ff.w1), p(L.ff.b1));
      c.ff.g = nn::gelu(c.ff.h);
      x += apply_drop(nn::linear(c.ff.g, p(L.ff.w2), p(L.ff.b2)), c.drop2, drop);
    }
    return nn::layer_norm(x, p(idx_.enc_lnf.g), p(idx_.enc_lnf.b), &t.enc_lnf);
  }

  template <class Drop>
  Mat decode_fwd(const Mat& memory, const std::vector<Token>& tok, const std::vector<int>& gp,
                 const std::vector<int>& lp, Trace& t, Drop* drop) const {
    const Eigen::Index Dm = cfg_.embed_dim;
    Mat x = apply_drop(embed(tok, gp, lp, idx_.dec_g, idx_.dec_l, cfg_.max_output), t.dec_drop0, drop);
    t.dec.resize(dec_.size());
    t.memory_pre = memory;
    for (std::size_t l = 0; l < dec_.size(); ++l) {
      const auto& L = dec_[l];
      auto& c = t.dec[l];
      c.self.in = nn::layer_norm(x, p(L.ln1.g), p(L.ln1.b), &c.ln1);
      Mat qkv = nn::linear(c.self.in, p(L.self.w_in), p(L.self.b_in));
      c.self.q = qkv.leftCols(Dm);
      c.self.k = qkv.middleCols(Dm, Dm);
      c.self.v = qkv.rightCols(Dm);
      c.self.o = nn::attention(c.self.q, c.self.k, c.self.v, cfg_.heads, true, &c.self.probs);
      x += apply_drop(nn::linear(c.self.o, p(L.self.wo), p(L.self.bo)), c.drop1, drop);

      c.cross.in = nn::layer_norm(x, p(L.ln2.g), p(L.ln2.b), &c.ln2);
      c.cross.q = nn::linear(c.cross.in, p(L.cross.w_in), p(L.cross.b_in));
      Mat kv = nn::linear(memory, p(L.cross.w_kv), p(L.cross.b_kv));
      c.cross.k = kv.leftCols(Dm);
      c.cross.v = kv.rightCols(Dm);
      c.cross.o = nn::attention(c.cross.q, c.cross.k, c.cross.v, cfg_.heads, false, &c.cross.probs);
      x += apply_drop(nn::linear(c.cross.o, p(L.cross.wo), p(L.cross.bo)), c.drop2, drop);

      c.ff.in = nn::layer_norm(x, p(L.ln3.g), p(L.ln3.b), &c.ln3);
      c.ff.h = nn::linear(c.ff.in, p(L.ff.w1), p(L.ff.b1));
      c.ff.g = nn::gelu(c.ff.h);
      x += apply_drop(nn::linear(c.ff.g, p(L.ff.w2), p(L.ff.b2)), c.drop3, drop);
    }
    t.dec_out = nn::layer_norm(x, p(idx_.dec_lnf.g), p(idx_.dec_lnf.b), &t.dec_lnf);
    return nn::linear(t.dec_out, p(idx_.head_w), p(idx_.head_b));
  }

  Mat& G(Grads& g, int i) const { return g.g[static_cast<std::size_t>(i)]; }

  Mat ff_back(const Mat& dy, const nn::FfCache<S>& c, const nn::FfIdx& F, Grads& g) const {
    Mat dg = nn::linear_back(dy, c.g, p(F.w2), G(g, F.w2), G(g, F.b2));
    Mat dh = nn::gelu_back(dg, c.h);
    return nn::linear_back(dh, c.in, p(F.w1), G(g, F.w1), G(g, F.b1));
  }

  /// Returns d(input of the fused projection) for self attention.
  Mat self_attn_back(const Mat& dy, const nn::AttnCache<S>& c, const nn::AttnIdx& A, Grads& g) const {
    const Eigen::Index D = cfg_.embed_dim;
    Mat d_o = nn::linear_back(dy, c.o, p(A.wo), G(g, A.wo), G(g, A.bo));
    Mat dq, dk, dv;
    nn::attention_back(d_o, c.q, c.k, c.v, c.probs, cfg_.heads, dq, dk, dv);
    Mat dqkv(dq.rows(), 3 * D);
    dqkv << dq, dk, dv;
    return nn::linear_back(dqkv, c.in, p(A.w_in), G(g, A.w_in), G(g, A.b_in));
  }

  void embed_back(const Mat& dx, const std::vector<Token>& tok, const std::vector<int>& gp,
                  const std::vector<int>& lp, int gtab, int ltab, Grads& g) const {
    for (std::size_t i = 0; i < tok.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      G(g, idx_.tok).row(tok[i]) += dx.row(r);
      G(g, gtab).row(gp[i]) += dx.row(r);
      G(g, ltab).row(lp[i]) += dx.row(r);
    }
  }

  void backward(const Mat& dlogits, const Example& ex, Trace& t, Grads& g) const {
    const Eigen::Index D = cfg_.embed_dim;
    Mat dz = nn::linear_back(dlogits, t.dec_out, p(idx_.head_w), G(g, idx_.head_w), G(g, idx_.head_b));
    Mat dx = nn::layer_norm_back(dz, t.dec_lnf, p(idx_.dec_lnf.g), G(g, idx_.dec_lnf.g), G(g, idx_.dec_lnf.b));
    Mat dmem = Mat::Zero(t.memory_pre.rows(), D);
    for (std::size_t l = dec_.size(); l-- > 0;) {
      const auto& L = dec_[l];
      auto& c = t.dec[l];
      {
        Mat dy = undrop(dx, c.drop3);
        Mat din = ff_back(dy, c.ff, L.ff, g);
        dx += nn::layer_norm_back(din, c.ln3, p(L.ln3.g), G(g, L.ln3.g), G(g, L.ln3.b));
      }
      {
        Mat dy = undrop(dx, c.drop2);
        Mat d_o = nn::linear_back(dy, c.cross.o, p(L.cross.wo), G(g, L.cross.wo), G(g, L.cross.bo));
        Mat dq, dk, dv;
        nn::attention_back(d_o, c.cross.q, c.cross.k, c.cross.v, c.cross.probs, cfg_.heads, dq, dk, dv);
        Mat dkv(dk.rows(), 2 * D);
        dkv << dk, dv;
        dmem += nn::linear_back(dkv, t.memory_pre, p(L.cross.w_kv), G(g, L.cross.w_kv), G(g, L.cross.b_kv));
        Mat din = nn::linear_back(dq, c.cross.in, p(L.cross.w_in), G(g, L.cross.w_in), G(g, L.cross.b_in));
        dx += nn::layer_norm_back(din, c.ln2, p(L.ln2.g), G(g, L.ln2.g), G(g, L.ln2.b));
      }
      {
        Mat dy = undrop(dx, c.drop1);
        Mat din = self_attn_back(dy, c.self, L.self, g);
        dx += nn::layer_norm_back(din, c.ln1, p(L.ln1.g), G(g, L.ln1.g), G(g, L.ln1.b));
      }
    }
    {
      auto [tok, gp, lp] = decoder_inputs(ex.output);
      embed_back(undrop(dx, t.dec_drop0), tok, gp, lp, idx_.dec_g, idx_.dec_l, g);
    }

    Mat dxe = nn::layer_norm_back(dmem, t.enc_lnf, p(idx_.enc_lnf.g), G(g, idx_.enc_lnf.g), G(g, idx_.enc_lnf.b));
    for (std::size_t l = enc_.size(); l-- > 0;) {
      const auto& L = enc_[l];
      auto& c = t.enc[l];
      {
        Mat dy = undrop(dxe, c.drop2);
        Mat din = ff_back(dy, c.ff, L.ff, g);
        dxe += nn::layer_norm_back(din, c.ln2, p(L.ln2.g), G(g, L.ln2.g), G(g, L.ln2.b));
      }
      {
        Mat dy = undrop(dxe, c.drop1);
        Mat din = self_attn_back(dy, c.attn, L.attn, g);
        dxe += nn::layer_norm_back(din, c.ln1, p(L.ln1.g), G(g, L.ln1.g), G(g, L.ln1.b));
      }
    }
    embed_back(undrop(dxe, t.enc_drop0), ex.input.tokens, ex.input.global_pos, ex.input.local_pos, idx_.enc_g,
               idx_.enc_l, g);
  }

  ModelConfig cfg_;
  std::vector<Mat> params_;
  std::vector<std::string> names_;
  std::vector<bool> decay_;
  std::vector<nn::EncLayerIdx> enc_;
  std::vector<nn::DecLayerIdx> dec_;
  nn::ModelIdx idx_{};
};

using Model = SeqModel<float>;

inline ModelConfig desk_config(const Vocabulary& vocab) {
  ModelConfig c;
  c.vocab_size = vocab.size();
  c.resolution = vocab.resolution();
  return c;
}

// ---------------------------------------------------------------------------
// Negative log likelihood

struct NllResult {
  double unmasked = 0;
  double masked = 0;
  std::size_t tokens = 0;
};

/// Mean per-token NLL of the ground-truth outputs, plain and renormalized over
/// the automaton's valid tokens.
template <class S>
NllResult nll(const SeqModel<S>& model, const std::vector<Example>& pairs, const Vocabulary& vocab) {
  DecodeAutomaton automaton(vocab);
  NllResult r;
  for (const auto& ex : pairs) {
    auto logits = model.teacher_forced_logits(ex);
    auto state = automaton.initial_state();
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      const Token target = ex.output.tokens[static_cast<std::size_t>(i) + 1];
      std::vector<double> probs(static_cast<std::size_t>(logits.cols()));
      const double mx = static_cast<double>(logits.row(i).maxCoeff());
      double sum = 0;
      for (Eigen::Index k = 0; k < logits.cols(); ++k)
        sum += probs[static_cast<std::size_t>(k)] = std::exp(static_cast<double>(logits(i, k)) - mx);
      for (auto& v : probs) v /= sum;
      const auto masked = nullify_and_renormalize(probs, automaton.valid_next_tokens(state));
      const auto t = static_cast<std::size_t>(target);
      r.unmasked += -std::log(probs[t]);
      r.masked += -std::log(masked[t]);
      ++r.tokens;
      state = automaton.advance(std::move(state), target);
    }
  }
  if (r.tokens) {
    r.unmasked /= static_cast<double>(r.tokens);
    r.masked /= static_cast<double>(r.tokens);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  double learning_rate = 1e-5;
  int batch_size = 32;
  int epochs = 50;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;
  double validation_fraction = 0.1;
  double clip_norm = 1.0;
  int patience = 5;
  int warmup_steps = 0;
  bool cosine_decay = false;  // after warmup, decay to min_lr_fraction × lr by the last planned epoch
  double min_lr_fraction = 0.1;
  double time_budget = 0;  // seconds; 0 is unlimited
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  void validate() const {
    if (!(learning_rate > 0)) throw Error(ErrorCode::BadInput, "learning rate must be positive");
    if (batch_size < 1) throw Error(ErrorCode::BadInput, "batch size must be at least 1");
    if (epochs < 1) throw Error(ErrorCode::BadInput, "epochs must be at least 1");
    if (!(validation_fraction >= 0 && validation_fraction < 1))
      throw Error(ErrorCode::BadInput, "validation fraction must lie in [0, 1)");
    if (!(min_lr_fraction >= 0 && min_lr_fraction <= 1))
      throw Error(ErrorCode::BadInput, "min_lr_fraction must lie in [0, 1]");
    if (time_budget < 0) throw Error(ErrorCode::BadInput, "time budget must be non-negative");
  }
};

struct EpochStats {
  int epoch = 0;
  double train_loss = 0;
  double validation_loss = 0;
  double seconds = 0;
};

struct TrainReport {
  std::vector<EpochStats> epochs;
  int best_epoch = -1;
  double best_validation_loss = std::numeric_limits<double>::infinity();
  bool early_stopped = false;
  bool out_of_time = false;
  double seconds = 0;
  std::size_t train_size = 0, validation_size = 0;
};

inline json report_to_json(const TrainReport& r) {
  json ep = json::array();
  for (const auto& e : r.epochs)
    ep.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"validation_loss", e.validation_loss},
                  {"seconds", e.seconds}});
  return {{"epochs", ep},
          {"best_epoch", r.best_epoch},
          {"best_validation_loss", r.best_validation_loss},
          {"early_stopped", r.early_stopped},
          {"out_of_time", r.out_of_time},
          {"seconds", r.seconds},
          {"train_size", r.train_size},
          {"validation_size", r.validation_size}};
}

class TrainingDiverged : public Error {
 public:
  TrainingDiverged(TrainReport report, const std::string& detail)
      : Error(ErrorCode::Divergence, detail), report_(std::move(report)) {}
  const TrainReport& report() const { return report_; }

 private:
  TrainReport report_;
};

/// AdamW with decoupled weight decay.
template <class S>
class AdamW {
 public:
  AdamW(const SeqModel<S>& m, const TrainConfig& c) : c_(c) {
    for (const auto& p : m.parameters()) {
      m_.push_back(nn::Mat<S>::Zero(p.rows(), p.cols()));
      v_.push_back(nn::Mat<S>::Zero(p.rows(), p.cols()));
    }
  }

  void step(SeqModel<S>& model, const typename SeqModel<S>::Grads& g, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(c_.beta1, t_), bc2 = 1.0 - std::pow(c_.beta2, t_);
    auto& ps = model.parameters();
    const S b1 = static_cast<S>(c_.beta1), b2 = static_cast<S>(c_.beta2);
    const S step = static_cast<S>(lr / bc1), eps = static_cast<S>(c_.eps);
    const S inv_bc2 = static_cast<S>(1.0 / std::sqrt(bc2));
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (model.decays(i)) ps[i] *= static_cast<S>(1.0 - lr * c_.weight_decay);
      m_[i] = b1 * m_[i] + (S(1) - b1) * g.g[i];
      v_[i] = b2 * v_[i] + (S(1) - b2) * g.g[i].cwiseAbs2();
      ps[i].array() -= step * m_[i].array() / ((v_[i].array().sqrt() * inv_bc2) + eps);
    }
  }

 private:
  TrainConfig c_;
  std::vector<nn::Mat<S>> m_, v_;
  int t_ = 0;
};

/// Mean per-token teacher-forcing loss in evaluation mode.
template <class S>
double mean_loss(const SeqModel<S>& model, const std::vector<Example>& data) {
  double sum = 0;
  std::size_t n = 0;
  for (const auto& ex : data) {
    auto r = model.forward_backward(ex, nullptr);
    sum += r.loss_sum;
    n += r.tokens;
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

/// Seeded split of example indices into (train, validation).
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t n, double fraction,
                                                                                    std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(splitmix64(seed ^ 0x7a11d));
  std::shuffle(idx.begin(), idx.end(), rng);
  auto nv = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n)));
  if (fraction > 0 && nv == 0 && n > 1) nv = 1;
  return {std::vector<std::size_t>(idx.begin() + static_cast<long>(nv), idx.end()),
          std::vector<std::size_t>(idx.begin(), idx.begin() + static_cast<long>(nv))};
}

/// Learning rate for optimizer step `step` (counted from 1) of `total_steps`.
inline double learning_rate_at(const TrainConfig& cfg, long step, long total_steps) {
  if (cfg.warmup_steps > 0 && step <= cfg.warmup_steps)
    return cfg.learning_rate * static_cast<double>(step) / cfg.warmup_steps;
  if (!cfg.cosine_decay || total_steps <= cfg.warmup_steps) return cfg.learning_rate;
  const double t = std::min(1.0, static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(total_steps - cfg.warmup_steps));
  const double lo = cfg.min_lr_fraction;
  return cfg.learning_rate * (lo + (1 - lo) * 0.5 * (1 + std::cos(std::numbers::pi * t)));
}

/// Teacher-forcing training with per-token mean loss per batch, global-norm
/// clipping, AdamW, and early stopping on validation loss. The model ends at
/// the best validation epoch.
template <class S>
TrainReport train(SeqModel<S>& model, const std::vector<Example>& data, const TrainConfig& cfg,
                  const std::function<void(const EpochStats&, const std::type_identity_t<SeqModel<S>>&)>& on_epoch = {}) {
  cfg.validate();
  if (data.empty()) throw Error(ErrorCode::BadInput, "empty training set");
  auto [train_idx, val_idx] = split_indices(data.size(), cfg.validation_fraction, cfg.seed);
  std::vector<Example> val;
  for (auto i : val_idx) val.push_back(data[i]);
  TrainReport report;
  report.train_size = train_idx.size();
  report.validation_size = val.size();

  AdamW<S> opt(model, cfg);
  auto grads = model.zero_grads();
  auto best = model.parameters();
  int since_best = 0;
  long step = 0;
  std::mt19937_64 drop_rng(splitmix64(cfg.seed ^ 0xd509));
  const long batches = static_cast<long>((train_idx.size() + static_cast<std::size_t>(cfg.batch_size) - 1) /
                                         static_cast<std::size_t>(cfg.batch_size));
  const long total_steps = batches * cfg.epochs;
  const auto began = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - began).count(); };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::mt19937_64 shuffle_rng(splitmix64(cfg.seed + static_cast<std::uint64_t>(epoch)));
    auto order = train_idx;
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_loss = 0;
    std::size_t epoch_tokens = 0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
      for (auto& g : grads.g) g.setZero();
      double loss = 0;
      std::size_t tokens = 0;
      const std::size_t end = std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_size));
      for (std::size_t k = b; k < end; ++k) {
        auto r = model.forward_backward(data[order[k]], &grads, &drop_rng);
        loss += r.loss_sum;
        tokens += r.tokens;
      }
      if (!std::isfinite(loss)) {
        model.parameters() = best;
        throw TrainingDiverged(report, "non-finite loss at epoch " + std::to_string(epoch));
      }
      const S inv = static_cast<S>(1.0 / static_cast<double>(tokens));
      double norm2 = 0;
      for (auto& g : grads.g) {
        g *= inv;
        norm2 += static_cast<double>(g.squaredNorm());
      }
      const double norm = std::sqrt(norm2);
      if (!std::isfinite(norm)) {
        model.parameters() = best;
        throw TrainingDiverged(report, "non-finite gradient at epoch " + std::to_string(epoch));
      }
      if (cfg.clip_norm > 0 && norm > cfg.clip_norm)
        for (auto& g : grads.g) g *= static_cast<S>(cfg.clip_norm / norm);
      ++step;
      const double lr = learning_rate_at(cfg, step, total_steps);
      opt.step(model, grads, lr);
      epoch_loss += loss;
      epoch_tokens += tokens;
    }
    EpochStats st;
    st.epoch = epoch;
    st.train_loss = epoch_tokens ? epoch_loss / static_cast<double>(epoch_tokens) : 0.0;
    st.validation_loss = val.empty() ? st.train_loss : mean_loss(model, val);
    st.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    report.epochs.push_back(st);
    if (!std::isfinite(st.validation_loss)) {
      model.parameters() = best;
      throw TrainingDiverged(report, "non-finite validation loss at epoch " + std::to_string(epoch));
    }
    if (on_epoch) on_epoch(st, model);
    if (st.validation_loss < report.best_validation_loss) {
      report.best_validation_loss = st.validation_loss;
      report.best_epoch = epoch;
      best = model.parameters();
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      report.early_stopped = true;
      break;
    }
    // stop when another epoch of the same length would overrun the budget
    if (cfg.time_budget > 0 && epoch + 1 < cfg.epochs && elapsed() + st.seconds > cfg.time_budget) {
      report.out_of_time = true;
      break;
    }
  }
  report.seconds = elapsed();
  model.parameters() = best;
  return report;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr char kCheckpointMagic[8] = {'F', 'A', 'C', 'A', 'I', 'D', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class T>
void write_le(std::ostream& os, T v) {
  unsigned char b[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <class T>
T read_le(std::istream& is) {
  unsigned char b[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(b), sizeof(T))) throw Error(ErrorCode::CheckpointLoadFailure, "truncated header");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return static_cast<T>(v);
}

inline void write_f32(std::ostream& os, float f) { write_le(os, std::bit_cast<std::uint32_t>(f)); }

}  // namespace detail

inline void save_checkpoint(std::ostream& os, const Model& model, const Vocabulary& vocab) {
  json manifest = json::array();
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < model.parameters().size(); ++i) {
    const auto& p = model.parameters()[i];
    manifest.push_back({{"name", model.parameter_names()[i]}, {"shape", {p.rows(), p.cols()}}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(p.size()) * 4;
  }
  json header = {{"format_version", kCheckpointVersion},
                 {"config", config_to_json(model.config())},
                 {"vocabulary", vocab.to_json()},
                 {"grammar_hash", grammar_hash(vocab.grammar())},
                 {"tensors", manifest}};
  const std::string text = header.dump();
  os.write(kCheckpointMagic, 8);
  detail::write_le<std::uint32_t>(os, kCheckpointVersion);
  detail::write_le<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : model.parameters())
    for (Eigen::Index k = 0; k < p.size(); ++k) detail::write_f32(os, p.data()[k]);
  if (!os) throw Error(ErrorCode::SinkFailure, "checkpoint write failed");
}

inline void save_checkpoint(const std::string& path, const Model& model, const Vocabulary& vocab) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw Error(ErrorCode::SinkFailure, "cannot open " + tmp);
    save_checkpoint(os, model, vocab);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw Error(ErrorCode::SinkFailure, "cannot move checkpoint to " + path);
}

/// Loads a checkpoint written for the given grammar; the vocabulary is
/// rebuilt from the grammar and checked against the stored table.
inline Model load_checkpoint(std::istream& is, const Grammar& g = facade_grammar()) {
  auto fail = [](const std::string& m) { throw Error(ErrorCode::CheckpointLoadFailure, m); };
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) fail("not a checkpoint file");
  const auto version = detail::read_le<std::uint32_t>(is);
  if (version != kCheckpointVersion) fail("unsupported format version " + std::to_string(version));
  const auto len = detail::read_le<std::uint64_t>(is);
  if (len > (1u << 26)) fail("header too large");
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len))) fail("truncated header");
  json header;
  try {
    header = json::parse(text);
  } catch (const std::exception& e) {
    fail(std::string("header is not JSON: ") + e.what());
  }
  try {
    if (header.at("grammar_hash") != grammar_hash(g)) fail("grammar hash mismatch");
    Vocabulary::from_json(header.at("vocabulary"), g);
    Model model(config_from_json(header.at("config")), 0);
    const auto& tensors = header.at("tensors");
    if (tensors.size() != model.parameters().size()) fail("tensor count mismatch");
    std::vector<unsigned char> buf;
    std::uint64_t expect = 0;
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      auto& p = model.parameters()[i];
      const auto& t = tensors[i];
      if (t.at("name") != model.parameter_names()[i]) fail("unexpected tensor " + t.at("name").get<std::string>());
      if (t.at("shape") != json{p.rows(), p.cols()}) fail("shape mismatch for " + model.parameter_names()[i]);
      if (t.at("offset").get<std::uint64_t>() != expect) fail("offset mismatch for " + model.parameter_names()[i]);
      buf.resize(static_cast<std::size_t>(p.size()) * 4);
      if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
        fail("truncated tensor data");
      for (Eigen::Index k = 0; k < p.size(); ++k) {
        const unsigned char* b = buf.data() + 4 * k;
        const std::uint32_t u = std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
                                std::uint32_t(b[3]) << 24;
        p.data()[k] = std::bit_cast<float>(u);
      }
      expect += buf.size();
    }
    return model;
  } catch (const Error& e) {
    if (e.code() == ErrorCode::CheckpointLoadFailure) throw;
    fail(e.what());
  } catch (const std::exception& e) {
    fail(e.what());
  }
  return {};
}

inline Model load_checkpoint(const std::string& path, const Grammar& g = facade_grammar()) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::CheckpointLoadFailure, "cannot open " + path);
  return load_checkpoint(is, g);
}

}  // namespace facaid
