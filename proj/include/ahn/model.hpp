#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "ahn/ahn.hpp"
#include "ahn/attention.hpp"
#include "ahn/complexity.hpp"
#include "ahn/ct.hpp"
#include "ahn/io.hpp"
#include "ahn/mode.hpp"
#include "ahn/tensor.hpp"

namespace ahn {

struct ModelConfig {
  int vocab = 257;  // 256 byte values plus a padding id
  int d_model = 128;
  int n_layers = 4;
  int n_q_heads = 4;
  int n_kv_heads = 2;
  int head_dim = 32;
  int ffn_mult = 4;
  int sinks = 4;
  int window = 64;
  MixerKind mixer_kind = MixerKind::sinks_swa_ahn;
  AhnVariant ahn_variant = AhnVariant::gdn;
  CtPool ct_pool = CtPool::avg;
  int ct_rate = 4;
  int ct_slots = 0;  // 0 = cache-budget rule
  bool use_rope = true;
  double rope_theta = 10000.0;
  double gamma_offset = -4.0;  // fixed (non-learned) shift on the readout gate logit
  double norm_eps = 1e-6;

  void validate() const {
    if (vocab < 2) throw ConfigError("model: vocab must be >= 2");
    if (d_model != n_q_heads * head_dim)
      throw ConfigError("model: d_model " + std::to_string(d_model) +
                        " != n_q_heads*head_dim " + std::to_string(n_q_heads * head_dim));
    if (n_layers < 1) throw ConfigError("model: need at least one layer");
    if (ffn_mult < 1) throw ConfigError("model: ffn_mult must be >= 1");
    if (ct_rate < 1) throw ConfigError("model: ct_rate must be >= 1");
    if (ct_slots < 0) throw ConfigError("model: ct_slots must be >= 0");
    attention().validate();
  }

  AttentionConfig attention() const {
    AttentionConfig a;
    a.n_q_heads = n_q_heads;
    a.n_kv_heads = n_kv_heads;
    a.head_dim = head_dim;
    a.sinks = sinks;
    a.window = window;
    return a;
  }

  MixerMode mode() const { return MixerMode{mixer_kind, ahn_variant, ct_pool}; }

  int ct_slot_count() const {
    if (ct_slots > 0) return ct_slots;
    ComplexitySpec s;
    s.head_dim = static_cast<std::uint64_t>(head_dim);
    s.n_q_heads = static_cast<std::uint64_t>(n_q_heads);
    s.n_kv_heads = static_cast<std::uint64_t>(n_kv_heads);
    s.d_model = static_cast<std::uint64_t>(d_model);
    s.window = static_cast<std::uint64_t>(window);
    return static_cast<int>(ct_budget_slots(s));
  }

  std::string to_text() const {
    KvConfig kv;
    kv.set("vocab", std::to_string(vocab));
    kv.set("d_model", std::to_string(d_model));
    kv.set("n_layers", std::to_string(n_layers));
    kv.set("n_q_heads", std::to_string(n_q_heads));
    kv.set("n_kv_heads", std::to_string(n_kv_heads));
    kv.set("head_dim", std::to_string(head_dim));
    kv.set("ffn_mult", std::to_string(ffn_mult));
    kv.set("sinks", std::to_string(sinks));
    kv.set("window", std::to_string(window));
    kv.set("mixer", to_string(mixer_kind));
    kv.set("variant", to_string(ahn_variant));
    kv.set("ct_pool", to_string(ct_pool));
    kv.set("ct_rate", std::to_string(ct_rate));
    kv.set("ct_slots", std::to_string(ct_slots));
    kv.set("use_rope", use_rope ? "1" : "0");
    kv.set("rope_theta", format_double(rope_theta));
    kv.set("gamma_offset", format_double(gamma_offset));
    kv.set("norm_eps", format_double(norm_eps));
    return kv.serialize();
  }

  static ModelConfig from_text(const std::string& text) {
    return from_kv(KvConfig::parse(text));
  }

  static ModelConfig from_kv(const KvConfig& kv) {
    ModelConfig c;
    c.vocab = static_cast<int>(kv.get_long_or("vocab", c.vocab));
    c.d_model = static_cast<int>(kv.get_long_or("d_model", c.d_model));
    c.n_layers = static_cast<int>(kv.get_long_or("n_layers", c.n_layers));
    c.n_q_heads = static_cast<int>(kv.get_long_or("n_q_heads", c.n_q_heads));
    c.n_kv_heads = static_cast<int>(kv.get_long_or("n_kv_heads", c.n_kv_heads));
    c.head_dim = static_cast<int>(kv.get_long_or("head_dim", c.head_dim));
    c.ffn_mult = static_cast<int>(kv.get_long_or("ffn_mult", c.ffn_mult));
    c.sinks = static_cast<int>(kv.get_long_or("sinks", c.sinks));
    c.window = static_cast<int>(kv.get_long_or("window", c.window));
    c.mixer_kind = mixer_kind_from(kv.get_or("mixer", to_string(c.mixer_kind)));
    c.ahn_variant = ahn_variant_from(kv.get_or("variant", to_string(c.ahn_variant)));
    c.ct_pool = ct_pool_from(kv.get_or("ct_pool", to_string(c.ct_pool)));
    c.ct_rate = static_cast<int>(kv.get_long_or("ct_rate", c.ct_rate));
    c.ct_slots = static_cast<int>(kv.get_long_or("ct_slots", c.ct_slots));
    c.use_rope = kv.get_long_or("use_rope", c.use_rope ? 1 : 0) != 0;
    c.rope_theta = kv.get_double_or("rope_theta", c.rope_theta);
    c.gamma_offset = kv.get_double_or("gamma_offset", c.gamma_offset);
    c.norm_eps = kv.get_double_or("norm_eps", c.norm_eps);
    return c;
  }

  // hash of the fields that fix parameter shapes and meaning; runtime knobs
  // (mixer kind, sinks, window, ct_*) stay out so one checkpoint can be
  // evaluated under any cache policy
  std::uint64_t arch_hash() const {
    std::string s;
    for (long v : {static_cast<long>(vocab), static_cast<long>(d_model),
                   static_cast<long>(n_layers), static_cast<long>(n_q_heads),
                   static_cast<long>(n_kv_heads), static_cast<long>(head_dim),
                   static_cast<long>(ffn_mult), static_cast<long>(use_rope)})
      s += std::to_string(v) + ";";
    s += format_double(rope_theta) + ";" + format_double(gamma_offset) + ";" +
         format_double(norm_eps);
    return fnv1a64(s);
  }
};

enum class GradMode { none, ahn_only, all };

struct ForwardOverrides {
  int sinks = -1;   // -1 = config value
  int window = -1;  // -1 = config value
  bool zero_ahn_gate = false;
};

template <typename S>
struct NamedVar {
  std::string name;
  Var<S> var;
};

template <typename S>
struct TapeForward {
  Var<S> logits;
  std::vector<NamedVar<S>> trainable;
};

template <typename S>
Var<S> rmsnorm(Tape<S>& t, Var<S> x, Var<S> g, S eps) {
  auto rs = row_sum(mul(x, x));
  auto ms = scale(rs, S(1) / static_cast<S>(x.cols()));
  auto inv = rsqrt_eps(ms, eps);
  return col_scale(row_scale(x, inv), g);
}

template <typename S>
Mat<S> rmsnorm_plain(const Mat<S>& x, const Mat<S>& g, S eps) {
  const Mat<S> sq = x.cwiseProduct(x);
  Mat<S> rs;
  row_sums(sq, rs);
  const Mat<S> ms = rs * (S(1) / static_cast<S>(x.cols()));
  const Mat<S> inv = ms.unaryExpr([eps](S v) { return S(1) / std::sqrt(v + eps); });
  const Mat<S> xr = (x.array().colwise() * inv.col(0).array()).matrix();
  return (xr.array().rowwise() * g.row(0).array()).matrix();
}

template <typename S>
struct LayerParams {
  Mat<S> norm1_g, wq, wk, wv, wo, norm2_g, mlp_wg, mlp_wu, mlp_wd;
  AhnParams<S> ahn;
};

template <typename S>
struct StreamState;

// Decoder-only byte model: pre-norm blocks with grouped-query attention plus
// the optional recurrent/pooled long-range memory, gated MLP, untied head.
template <typename S>
class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const int D = cfg_.d_model;
    embed_ = Mat<S>::Zero(cfg_.vocab, D);
    layers_.resize(static_cast<std::size_t>(cfg_.n_layers));
    const AttentionConfig a = cfg_.attention();
    for (auto& l : layers_) {
      l.norm1_g = Mat<S>::Ones(1, D);
      l.wq = Mat<S>::Zero(D, a.q_dim());
      l.wk = Mat<S>::Zero(D, a.kv_dim());
      l.wv = Mat<S>::Zero(D, a.kv_dim());
      l.wo = Mat<S>::Zero(a.q_dim(), D);
      l.norm2_g = Mat<S>::Ones(1, D);
      l.mlp_wg = Mat<S>::Zero(D, D * cfg_.ffn_mult);
      l.mlp_wu = Mat<S>::Zero(D, D * cfg_.ffn_mult);
      l.mlp_wd = Mat<S>::Zero(D * cfg_.ffn_mult, D);
      l.ahn = AhnParams<S>::sized(D, a);
    }
    final_norm_g_ = Mat<S>::Ones(1, D);
    lm_head_ = Mat<S>::Zero(D, cfg_.vocab);
  }

  const ModelConfig& config() const { return cfg_; }

  struct NamedArray {
    std::string name;
    Mat<S>* mat;
    bool ahn_owned;
  };

  std::vector<NamedArray> arrays() {
    std::vector<NamedArray> out;
    out.push_back({"embed", &embed_, false});
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      LayerParams<S>& lp = layers_[l];
      out.push_back({p + "norm1.g", &lp.norm1_g, false});
      out.push_back({p + "wq", &lp.wq, false});
      out.push_back({p + "wk", &lp.wk, false});
      out.push_back({p + "wv", &lp.wv, false});
      out.push_back({p + "wo", &lp.wo, false});
      out.push_back({p + "ahn.w_alpha", &lp.ahn.w_alpha, true});
      out.push_back({p + "ahn.w_beta", &lp.ahn.w_beta, true});
      out.push_back({p + "ahn.w_gamma", &lp.ahn.w_gamma, true});
      out.push_back({p + "ahn.w_o", &lp.ahn.w_o, true});
      out.push_back({p + "ahn.a_log", &lp.ahn.a_log, true});
      out.push_back({p + "norm2.g", &lp.norm2_g, false});
      out.push_back({p + "mlp.wg", &lp.mlp_wg, false});
      out.push_back({p + "mlp.wu", &lp.mlp_wu, false});
      out.push_back({p + "mlp.wd", &lp.mlp_wd, false});
    }
    out.push_back({"final_norm.g", &final_norm_g_, false});
    out.push_back({"head", &lm_head_, false});
    return out;
  }

  // arrays the distillation stage may update: the variant's live gates plus
  // the per-head output map
  std::vector<std::string> trainable_ahn_names() const {
    std::vector<std::string> out;
    for (int l = 0; l < cfg_.n_layers; ++l) {
      const std::string p = "layers." + std::to_string(l) + ".ahn.";
      switch (cfg_.ahn_variant) {
        case AhnVariant::gdn:
          out.push_back(p + "w_alpha");
          out.push_back(p + "w_beta");
          break;
        case AhnVariant::dn:
          out.push_back(p + "w_beta");
          break;
        case AhnVariant::mamba2:
          out.push_back(p + "w_alpha");
          out.push_back(p + "a_log");
          break;
      }
      out.push_back(p + "w_gamma");
      out.push_back(p + "w_o");
    }
    return out;
  }

  long param_count() const {
    long n = static_cast<long>(embed_.size() + final_norm_g_.size() + lm_head_.size());
    for (const auto& l : layers_)
      n += static_cast<long>(l.norm1_g.size() + l.wq.size() + l.wk.size() + l.wv.size() +
                             l.wo.size() + l.norm2_g.size() + l.mlp_wg.size() +
                             l.mlp_wu.size() + l.mlp_wd.size()) +
           l.ahn.param_count(cfg_.ahn_variant);
    return n;
  }

  long ahn_param_count() const {
    long n = 0;
    for (const auto& l : layers_) n += l.ahn.param_count(cfg_.ahn_variant);
    return n;
  }

  void init(std::uint64_t seed) {
    for (auto& a : arrays()) {
      Rng rng = Rng::derive(seed, a.name);
      const bool is_gain = a.name.find("norm") != std::string::npos;
      const bool is_gamma = a.name.find("ahn.w_gamma") != std::string::npos;
      const bool is_alog = a.name.find("ahn.a_log") != std::string::npos;
      Mat<S>& m = *a.mat;
      if (is_gain) {
        m.setOnes();
      } else if (is_gamma) {
        // zero logits + the fixed negative offset start the memory silent
        m.setZero();
      } else if (is_alog) {
        for (Eigen::Index i = 0; i < m.size(); ++i)
          m.data()[i] = static_cast<S>(rng.uniform() * std::log(16.0));
      } else {
        for (Eigen::Index i = 0; i < m.rows(); ++i)
          for (Eigen::Index j = 0; j < m.cols(); ++j)
            m(i, j) = static_cast<S>(rng.normal(0.0, 0.02));
      }
    }
  }

  TapeForward<S> forward(Tape<S>& tape, std::span<const int> tokens,
                         const MixerMode& mode, GradMode gm,
                         const ForwardOverrides& ov = {}) const {
    if (tokens.empty()) throw ShapeError("forward: empty token sequence");
    std::vector<int> ids(tokens.begin(), tokens.end());
    for (int id : ids)
      if (id < 0 || id >= cfg_.vocab)
        throw ShapeError("forward: token id " + std::to_string(id) + " outside vocab " +
                         std::to_string(cfg_.vocab));
    Registry reg(tape, gm, trainable_ahn_names());
    Var<S> emb = reg.leaf("embed", embed_, false);
    Var<S> x = gather_rows(emb, ids);
    return run(tape, reg, x, mode, ov);
  }

  // same network over caller-provided embedding rows (gradient probes)
  TapeForward<S> forward_embedded(Tape<S>& tape, Var<S> x, const MixerMode& mode,
                                  GradMode gm, const ForwardOverrides& ov = {}) const {
    if (x.cols() != cfg_.d_model)
      throw ShapeError("forward_embedded: rows must be width " +
                       std::to_string(cfg_.d_model));
    Registry reg(tape, gm, trainable_ahn_names());
    return run(tape, reg, x, mode, ov);
  }

  Mat<S> logits_of(std::span<const int> tokens, const MixerMode& mode,
                   const ForwardOverrides& ov = {}) const {
    Tape<S> tape;
    return tape.value(forward(tape, tokens, mode, GradMode::none, ov).logits);
  }

  StreamState<S> new_stream(const MixerMode& mode, const ForwardOverrides& ov = {}) const;
  Mat<S> stream_step(StreamState<S>& st, int token) const;

 private:
  friend struct StreamState<S>;

  struct Registry {
    Tape<S>& tape;
    GradMode gm;
    std::vector<std::string> ahn_names;
    std::vector<NamedVar<S>> trainable;

    Registry(Tape<S>& t, GradMode g, std::vector<std::string> names)
        : tape(t), gm(g), ahn_names(std::move(names)) {}

    bool wants(const std::string& name, bool ahn_owned) const {
      if (gm == GradMode::all) return true;
      if (gm != GradMode::ahn_only || !ahn_owned) return false;
      for (const auto& n : ahn_names)
        if (n == name) return true;
      return false;
    }

    Var<S> leaf(const std::string& name, const Mat<S>& value, bool ahn_owned) {
      const bool rg = wants(name, ahn_owned);
      Var<S> v = tape.input(value, rg);
      if (rg) trainable.push_back({name, v});
      return v;
    }
  };

  struct AhnVars {
    Var<S> w_alpha, w_beta, w_gamma, w_o, a_log;
  };

  int resolve_sinks(const ForwardOverrides& ov) const {
    return ov.sinks >= 0 ? ov.sinks : cfg_.sinks;
  }
  int resolve_window(const ForwardOverrides& ov) const {
    return ov.window > 0 ? ov.window : cfg_.window;
  }

  TapeForward<S> run(Tape<S>& tape, Registry& reg, Var<S> x, const MixerMode& mode,
                     const ForwardOverrides& ov) const {
    const Eigen::Index L = x.rows();
    AttentionConfig acfg = cfg_.attention();
    acfg.sinks = resolve_sinks(ov);
    acfg.window = resolve_window(ov);
    acfg.validate();
    const Mask mask = build_mask(L, mode.kind, acfg);
    std::vector<long> positions(static_cast<std::size_t>(L));
    for (Eigen::Index i = 0; i < L; ++i) positions[static_cast<std::size_t>(i)] = i;
    const S eps = static_cast<S>(cfg_.norm_eps);

    for (std::size_t li = 0; li < layers_.size(); ++li) {
      const LayerParams<S>& lp = layers_[li];
      const std::string p = "layers." + std::to_string(li) + ".";
      Var<S> norm1_g = reg.leaf(p + "norm1.g", lp.norm1_g, false);
      Var<S> wq = reg.leaf(p + "wq", lp.wq, false);
      Var<S> wk = reg.leaf(p + "wk", lp.wk, false);
      Var<S> wv = reg.leaf(p + "wv", lp.wv, false);
      Var<S> wo = reg.leaf(p + "wo", lp.wo, false);
      AhnVars av;
      const bool needs_ahn = mode.kind == MixerKind::sinks_swa_ahn;
      if (needs_ahn) {
        av.w_alpha = reg.leaf(p + "ahn.w_alpha", lp.ahn.w_alpha, true);
        av.w_beta = reg.leaf(p + "ahn.w_beta", lp.ahn.w_beta, true);
        av.w_gamma = reg.leaf(p + "ahn.w_gamma", lp.ahn.w_gamma, true);
        av.w_o = reg.leaf(p + "ahn.w_o", lp.ahn.w_o, true);
        av.a_log = reg.leaf(p + "ahn.a_log", lp.ahn.a_log, true);
      }
      Var<S> norm2_g = reg.leaf(p + "norm2.g", lp.norm2_g, false);
      Var<S> mlp_wg = reg.leaf(p + "mlp.wg", lp.mlp_wg, false);
      Var<S> mlp_wu = reg.leaf(p + "mlp.wu", lp.mlp_wu, false);
      Var<S> mlp_wd = reg.leaf(p + "mlp.wd", lp.mlp_wd, false);

      Var<S> xn = rmsnorm(tape, x, norm1_g, eps);
      Var<S> q = matmul(xn, wq);
      Var<S> k = matmul(xn, wk);
      Var<S> v = matmul(xn, wv);
      if (cfg_.use_rope) {
        q = rope_rows(q, positions, cfg_.head_dim, cfg_.rope_theta);
        k = rope_rows(k, positions, cfg_.head_dim, cfg_.rope_theta);
      }

      Var<S> y;
      switch (mode.kind) {
        case MixerKind::full:
        case MixerKind::sinks_swa:
          y = attend(q, k, v, mask, acfg);
          break;
        case MixerKind::sinks_swa_ahn: {
          Var<S> y_attn = attend(q, k, v, mask, acfg);
          Var<S> y_ahn = ahn_path(tape, x, q, k, v, av, mode.variant, acfg, ov);
          y = y_ahn.valid() ? mix(y_attn, y_ahn) : y_attn;
          break;
        }
        case MixerKind::sinks_swa_ct:
          y = ct_path(tape, q, k, v, mode.pool, acfg, mask);
          break;
      }
      x = add(x, matmul(y, wo));
      Var<S> xn2 = rmsnorm(tape, x, norm2_g, eps);
      Var<S> g = matmul(xn2, mlp_wg);
      Var<S> act = mul(g, sigmoid(g));
      Var<S> hu = mul(act, matmul(xn2, mlp_wu));
      x = add(x, matmul(hu, mlp_wd));
    }
    Var<S> fg = reg.leaf("final_norm.g", final_norm_g_, false);
    Var<S> head = reg.leaf("head", lm_head_, false);
    Var<S> xf = rmsnorm(tape, x, fg, eps);
    TapeForward<S> out;
    out.logits = matmul(xf, head);
    out.trainable = std::move(reg.trainable);
    return out;
  }

  // recurrent memory fold over evicted positions plus per-row gated readout;
  // query row i sees the state after absorbing positions [sinks, i - window]
  Var<S> ahn_path(Tape<S>& tape, Var<S> x_in, Var<S> q, Var<S> k, Var<S> v,
                  const AhnVars& av, AhnVariant variant, const AttentionConfig& acfg,
                  const ForwardOverrides& ov) const {
    const Eigen::Index L = q.rows();
    const Eigen::Index lossless = acfg.sinks + acfg.window;
    if (L <= lossless) return Var<S>{};
    const int H = acfg.head_dim;
    const int nq = acfg.n_q_heads;
    const int nkv = acfg.n_kv_heads;

    Var<S> alpha_l, beta_l, delta_l, a_heads;
    if (variant == AhnVariant::gdn) {
      alpha_l = sigmoid(matmul(x_in, av.w_alpha));
      beta_l = sigmoid(matmul(x_in, av.w_beta));
    } else if (variant == AhnVariant::dn) {
      beta_l = sigmoid(matmul(x_in, av.w_beta));
    } else {
      delta_l = softplus(matmul(x_in, av.w_alpha));
      a_heads = vexp(av.a_log);
    }
    Var<S> gamma_l;
    if (ov.zero_ahn_gate) {
      gamma_l = tape.constant(Mat<S>::Zero(L, nq));
    } else {
      auto offset = tape.constant(
          Mat<S>::Constant(L, nq, static_cast<S>(cfg_.gamma_offset)));
      gamma_l = sigmoid(add(matmul(x_in, av.w_gamma), offset));
    }

    std::vector<Var<S>> wo_head(static_cast<std::size_t>(nq));
    for (int h = 0; h < nq; ++h)
      wo_head[static_cast<std::size_t>(h)] =
          slice(av.w_o, static_cast<Eigen::Index>(h) * H, 0, H, H);

    Var<S> zero_row = tape.constant(Mat<S>::Zero(1, acfg.q_dim()));
    std::vector<Var<S>> rows(static_cast<std::size_t>(L), zero_row);
    std::vector<Var<S>> state(static_cast<std::size_t>(nq),
                              tape.constant(Mat<S>::Zero(H, H)));
    std::vector<Var<S>> k_e(static_cast<std::size_t>(nkv));
    std::vector<Var<S>> v_e(static_cast<std::size_t>(nkv));
    for (Eigen::Index i = lossless; i < L; ++i) {
      const Eigen::Index e = i - acfg.window;  // falls out of the ring this step
      for (int kvh = 0; kvh < nkv; ++kvh) {
        Var<S> ke = slice(k, e, static_cast<Eigen::Index>(kvh) * H, 1, H);
        if (variant != AhnVariant::mamba2) ke = l2_normalize_row(ke);
        k_e[static_cast<std::size_t>(kvh)] = ke;
        v_e[static_cast<std::size_t>(kvh)] =
            slice(v, e, static_cast<Eigen::Index>(kvh) * H, 1, H);
      }
      for (int h = 0; h < nq; ++h) {
        const int kvh = h / acfg.group();
        Var<S>& hs = state[static_cast<std::size_t>(h)];
        switch (variant) {
          case AhnVariant::gdn:
            hs = gdn_step(hs, k_e[static_cast<std::size_t>(kvh)],
                          v_e[static_cast<std::size_t>(kvh)],
                          slice(alpha_l, e, h, 1, 1), slice(beta_l, e, h, 1, 1));
            break;
          case AhnVariant::dn:
            hs = dn_step(hs, k_e[static_cast<std::size_t>(kvh)],
                         v_e[static_cast<std::size_t>(kvh)],
                         slice(beta_l, e, h, 1, 1));
            break;
          case AhnVariant::mamba2:
            hs = mamba2_step(hs, k_e[static_cast<std::size_t>(kvh)],
                             v_e[static_cast<std::size_t>(kvh)],
                             slice(delta_l, e, h, 1, 1), slice(a_heads, 0, h, 1, 1));
            break;
        }
      }
      std::vector<Var<S>> head_rows(static_cast<std::size_t>(nq));
      for (int h = 0; h < nq; ++h) {
        Var<S> qh = slice(q, i, static_cast<Eigen::Index>(h) * H, 1, H);
        head_rows[static_cast<std::size_t>(h)] =
            ahn_head_readout(qh, state[static_cast<std::size_t>(h)],
                             slice(gamma_l, i, h, 1, 1),
                             wo_head[static_cast<std::size_t>(h)]);
      }
      rows[static_cast<std::size_t>(i)] = concat_cols(head_rows);
    }
    return concat_rows(rows);
  }

  // pooled-slot memory: evicted rows collapse rate-to-one into extra key
  // columns appended after the sequence, with visibility synced to eviction
  Var<S> ct_path(Tape<S>& tape, Var<S> q, Var<S> k, Var<S> v, CtPool pool,
                 const AttentionConfig& acfg, const Mask& mask) const {
    const Eigen::Index L = q.rows();
    const Eigen::Index lossless = acfg.sinks + acfg.window;
    const int rate = cfg_.ct_rate;
    const Eigen::Index cap = cfg_.ct_slot_count();
    const Eigen::Index n_evict = std::max<Eigen::Index>(0, L - lossless);
    const Eigen::Index n_slots = n_evict / rate;
    if (n_slots == 0) return attend(q, k, v, mask, acfg);

    std::vector<Var<S>> slot_k(static_cast<std::size_t>(n_slots));
    std::vector<Var<S>> slot_v(static_cast<std::size_t>(n_slots));
    const S inv_rate = S(1) / static_cast<S>(rate);
    for (Eigen::Index s = 0; s < n_slots; ++s) {
      const Eigen::Index base = acfg.sinks + s * rate;
      Var<S> ak = slice(k, base, 0, 1, acfg.kv_dim());
      Var<S> av = slice(v, base, 0, 1, acfg.kv_dim());
      for (int r = 1; r < rate; ++r) {
        Var<S> rk = slice(k, base + r, 0, 1, acfg.kv_dim());
        Var<S> rv = slice(v, base + r, 0, 1, acfg.kv_dim());
        if (pool == CtPool::max) {
          ak = cmax(ak, rk);
          av = cmax(av, rv);
        } else {
          ak = add(ak, rk);
          av = add(av, rv);
        }
      }
      if (pool == CtPool::avg) {
        ak = scale(ak, inv_rate);
        av = scale(av, inv_rate);
      }
      slot_k[static_cast<std::size_t>(s)] = ak;
      slot_v[static_cast<std::size_t>(s)] = av;
    }
    std::vector<Var<S>> k_parts{k};
    std::vector<Var<S>> v_parts{v};
    k_parts.insert(k_parts.end(), slot_k.begin(), slot_k.end());
    v_parts.insert(v_parts.end(), slot_v.begin(), slot_v.end());
    Var<S> k_ext = concat_rows(k_parts);
    Var<S> v_ext = concat_rows(v_parts);

    Mask ext(L, L + n_slots);
    ext.setZero();
    ext.block(0, 0, L, L) = mask;
    for (Eigen::Index i = 0; i < L; ++i) {
      const Eigen::Index n_i = std::max<Eigen::Index>(0, i - acfg.window - acfg.sinks + 1);
      const Eigen::Index c_i = n_i / rate;  // slots completed before query i
      for (Eigen::Index s = std::max<Eigen::Index>(0, c_i - cap); s < c_i; ++s)
        ext(i, L + s) = 1;
    }
    return attend(q, k_ext, v_ext, ext, acfg);
  }

  ModelConfig cfg_;
  Mat<S> embed_;
  std::vector<LayerParams<S>> layers_;
  Mat<S> final_norm_g_;
  Mat<S> lm_head_;
};

// Incremental decoding state: per-layer bounded KV cache (with the layer
// input rows the gates need), the recurrent state, and the pooled-slot FIFO.
template <typename S>
struct StreamState {
  MixerMode mode;
  int sinks = 0;
  int window = 0;  // < 0 = unbounded (full attention)
  bool zero_ahn_gate = false;
  long pos = 0;
  std::vector<KvWindow<S>> cache;
  std::vector<CompressedState<S>> state;
  std::vector<CtMemory<S>> ct;

  std::size_t memory_bytes() const {
    std::size_t n = 0;
    for (const auto& c : cache) n += c.byte_size();
    for (const auto& s : state) n += s.byte_size();
    for (const auto& m : ct) n += m.byte_size();
    return n;
  }
};

template <typename S>
StreamState<S> Model<S>::new_stream(const MixerMode& mode,
                                    const ForwardOverrides& ov) const {
  StreamState<S> st;
  st.mode = mode;
  st.sinks = resolve_sinks(ov);
  st.window = mode.kind == MixerKind::full ? -1 : resolve_window(ov);
  st.zero_ahn_gate = ov.zero_ahn_gate;
  const AttentionConfig a = cfg_.attention();
  const bool wants_x = mode.kind == MixerKind::sinks_swa_ahn;
  for (int l = 0; l < cfg_.n_layers; ++l) {
    st.cache.emplace_back(st.sinks, st.window, a.kv_dim(),
                          wants_x ? cfg_.d_model : 0);
    if (mode.kind == MixerKind::sinks_swa_ahn)
      st.state.push_back(CompressedState<S>::zeros(cfg_.n_q_heads, cfg_.head_dim));
    if (mode.kind == MixerKind::sinks_swa_ct)
      st.ct.emplace_back(cfg_.ct_rate, cfg_.ct_slot_count(), a.kv_dim(), mode.pool);
  }
  return st;
}

template <typename S>
Mat<S> Model<S>::stream_step(StreamState<S>& st, int token) const {
  if (token < 0 || token >= cfg_.vocab)
    throw ShapeError("stream_step: token id " + std::to_string(token) +
                     " outside vocab " + std::to_string(cfg_.vocab));
  AttentionConfig acfg = cfg_.attention();
  acfg.sinks = st.sinks;
  acfg.window = st.window > 0 ? st.window : 1;  // validation only; cache is unbounded
  const S eps = static_cast<S>(cfg_.norm_eps);
  const int H = cfg_.head_dim;
  const std::vector<long> here{st.pos};

  Mat<S> x = embed_.row(token);
  for (std::size_t li = 0; li < layers_.size(); ++li) {
    const LayerParams<S>& lp = layers_[li];
    const Mat<S> x_in = x;
    const Mat<S> xn = rmsnorm_plain(x_in, lp.norm1_g, eps);
    Mat<S> q = det_gemm(xn, lp.wq);
    Mat<S> k = det_gemm(xn, lp.wk);
    Mat<S> v = det_gemm(xn, lp.wv);
    if (cfg_.use_rope) {
      rope_rotate(q, here, H, cfg_.rope_theta, false);
      rope_rotate(k, here, H, cfg_.rope_theta, false);
    }
    auto evicted = st.cache[li].append(k, v, st.pos,
                                       st.mode.kind == MixerKind::sinks_swa_ahn
                                           ? &x_in
                                           : nullptr);
    if (evicted.has_value()) {
      if (st.mode.kind == MixerKind::sinks_swa_ahn)
        ahn_update(st.state[li], *evicted, lp.ahn, acfg, st.mode.variant);
      else if (st.mode.kind == MixerKind::sinks_swa_ct)
        st.ct[li].push(evicted->k, evicted->v);
    }

    Mat<S> keys, values;
    st.cache[li].gather(keys, values);
    if (st.mode.kind == MixerKind::sinks_swa_ct && st.ct[li].slots() > 0) {
      Mat<S> sk, sv;
      st.ct[li].gather(sk, sv);
      Mat<S> ka(keys.rows() + sk.rows(), keys.cols());
      ka << keys, sk;
      Mat<S> va(values.rows() + sv.rows(), values.cols());
      va << values, sv;
      keys = std::move(ka);
      values = std::move(va);
    }
    Mat<S> y = attend_plain(q, keys, values, nullptr, acfg);
    if (st.mode.kind == MixerKind::sinks_swa_ahn && st.state[li].step > 0) {
      Mat<S> y_ahn;
      if (st.zero_ahn_gate) {
        y_ahn = Mat<S>::Zero(1, acfg.q_dim());
      } else {
        y_ahn = ahn_readout(q, x_in, st.state[li], lp.ahn, acfg,
                            static_cast<S>(cfg_.gamma_offset));
      }
      const Mat<S> mixed = y + y_ahn;
      y = mixed;
    }
    const Mat<S> attn_out = det_gemm(y, lp.wo);
    x = x_in + attn_out;
    const Mat<S> xn2 = rmsnorm_plain(x, lp.norm2_g, eps);
    const Mat<S> g = det_gemm(xn2, lp.mlp_wg);
    const Mat<S> sg = g.unaryExpr([](S t) { return stable_sigmoid(t); });
    const Mat<S> act = g.cwiseProduct(sg);
    const Mat<S> u = det_gemm(xn2, lp.mlp_wu);
    const Mat<S> hu = act.cwiseProduct(u);
    const Mat<S> mlp = det_gemm(hu, lp.mlp_wd);
    const Mat<S> x2 = x + mlp;
    x = x2;
  }
  const Mat<S> xf = rmsnorm_plain(x, final_norm_g_, eps);
  Mat<S> logits = det_gemm(xf, lm_head_);
  ++st.pos;
  return logits;
}

}  // namespace ahn
