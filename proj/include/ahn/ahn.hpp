#pragma once

#include <vector>

#include "ahn/attention.hpp"
#include "ahn/mode.hpp"
#include "ahn/tensor.hpp"

namespace ahn {

inline constexpr double kKeyNormEps = 1e-12;

// Per-layer parameters of the recurrent compressor: three D -> n_q gate
// projections, a per-head H x H output map (head h owns rows [h*H, (h+1)*H)),
// and per-head log decay rates used by the state-space variant only.
template <typename S>
struct AhnParams {
  Mat<S> w_alpha;  // D x n_q
  Mat<S> w_beta;   // D x n_q
  Mat<S> w_gamma;  // D x n_q
  Mat<S> w_o;      // n_q*H x H
  Mat<S> a_log;    // 1 x n_q

  static AhnParams sized(Eigen::Index d_model, const AttentionConfig& cfg) {
    AhnParams p;
    const Eigen::Index nq = cfg.n_q_heads, H = cfg.head_dim;
    p.w_alpha = Mat<S>::Zero(d_model, nq);
    p.w_beta = Mat<S>::Zero(d_model, nq);
    p.w_gamma = Mat<S>::Zero(d_model, nq);
    p.w_o = Mat<S>::Zero(nq * H, H);
    p.a_log = Mat<S>::Zero(1, nq);
    return p;
  }

  long param_count(AhnVariant variant) const {
    long n = static_cast<long>(w_alpha.size() + w_beta.size() + w_gamma.size() +
                               w_o.size());
    if (variant == AhnVariant::mamba2) n += static_cast<long>(a_log.size());
    return n;
  }
};

// Fixed-size recurrent memory: one H x H matrix per query head. `step` counts
// evicted pairs absorbed so far.
template <typename S>
struct CompressedState {
  std::vector<Mat<S>> h;
  long step = 0;

  static CompressedState zeros(int n_heads, int head_dim) {
    CompressedState st;
    st.h.assign(static_cast<std::size_t>(n_heads),
                Mat<S>::Zero(head_dim, head_dim));
    return st;
  }

  std::size_t byte_size() const {
    std::size_t n = 0;
    for (const auto& m : h) n += static_cast<std::size_t>(m.size()) * sizeof(S);
    return n;
  }
};

template <typename S>
inline S stable_sigmoid(S x) {
  return S(1) / (S(1) + std::exp(-x));
}

// --- tape building blocks (single head) ---

template <typename S>
Var<S> l2_normalize_row(Var<S> k, S eps = S(kKeyNormEps)) {
  auto inv = rsqrt_eps(sum(mul(k, k)), eps);
  return scalar_mul(inv, k);
}

// h' = alpha * (h - beta * k^T (k h)) + beta * k^T v, k already unit-norm
template <typename S>
Var<S> gdn_step(Var<S> h, Var<S> k_unit, Var<S> v, Var<S> alpha, Var<S> beta) {
  auto kh = matmul(k_unit, h);
  auto removed = scalar_mul(beta, matmul(transpose(k_unit), kh));
  auto decayed = scalar_mul(alpha, sub(h, removed));
  auto written = scalar_mul(beta, matmul(transpose(k_unit), v));
  return add(decayed, written);
}

// h' = h - beta * k^T (k h) + beta * k^T v
template <typename S>
Var<S> dn_step(Var<S> h, Var<S> k_unit, Var<S> v, Var<S> beta) {
  auto kh = matmul(k_unit, h);
  auto removed = scalar_mul(beta, matmul(transpose(k_unit), kh));
  auto written = scalar_mul(beta, matmul(transpose(k_unit), v));
  return add(sub(h, removed), written);
}

// h' = exp(-delta * a) * h + delta * k^T v, raw k
template <typename S>
Var<S> mamba2_step(Var<S> h, Var<S> k_raw, Var<S> v, Var<S> delta, Var<S> a) {
  auto decay = vexp(scale(mul(delta, a), S(-1)));
  auto decayed = scalar_mul(decay, h);
  auto written = scalar_mul(delta, matmul(transpose(k_raw), v));
  return add(decayed, written);
}

// y = gamma * (q h) Wo for one head
template <typename S>
Var<S> ahn_head_readout(Var<S> q_head, Var<S> h, Var<S> gamma, Var<S> wo_head) {
  return scalar_mul(gamma, matmul(matmul(q_head, h), wo_head));
}

// the two mixer outputs combine additively ahead of the shared output map
template <typename S>
Var<S> mix(Var<S> y_attn, Var<S> y_ahn) {
  return add(y_attn, y_ahn);
}

// --- plain (streaming) route ---

// Absorbs one evicted pair into the state. Gate inputs come from the evicted
// token's layer input p.x. Mirrors the tape ops expression for expression.
template <typename S>
void ahn_update(CompressedState<S>& st, const EvictedPair<S>& p,
                const AhnParams<S>& params, const AttentionConfig& cfg,
                AhnVariant variant) {
  const int H = cfg.head_dim;
  if (static_cast<int>(st.h.size()) != cfg.n_q_heads)
    throw ShapeError("ahn_update: state has " + std::to_string(st.h.size()) +
                     " heads, config wants " + std::to_string(cfg.n_q_heads));
  if (p.x.size() == 0)
    throw ShapeError("ahn_update: evicted pair carries no layer input row");
  if (p.x.rows() != 1 || p.x.cols() != params.w_alpha.rows())
    throw ShapeError("ahn_update: layer input is " + detail::shape_str(p.x) +
                     ", gates expect 1 x " + std::to_string(params.w_alpha.rows()));
  if (p.k.cols() != cfg.kv_dim() || p.v.cols() != cfg.kv_dim())
    throw ShapeError("ahn_update: k/v rows do not match config");

  // every product and every intermediate is materialized separately so this
  // route reproduces the tape ops' rounding bit for bit
  const Mat<S> alpha_logit = det_gemm(p.x, params.w_alpha);  // 1 x n_q
  const Mat<S> beta_logit = det_gemm(p.x, params.w_beta);
  for (int h = 0; h < cfg.n_q_heads; ++h) {
    const int kvh = h / cfg.group();
    const Mat<S> k = p.k.middleCols(static_cast<Eigen::Index>(kvh) * H, H);
    const Mat<S> v = p.v.middleCols(static_cast<Eigen::Index>(kvh) * H, H);
    Mat<S>& state = st.h[static_cast<std::size_t>(h)];
    switch (variant) {
      case AhnVariant::gdn:
      case AhnVariant::dn: {
        const Mat<S> ksq = k.cwiseProduct(k);
        const S inv = S(1) / std::sqrt(ksq.sum() + S(kKeyNormEps));
        const Mat<S> ku = k * inv;
        const Mat<S> ku_t = ku.transpose();
        const S beta = stable_sigmoid(beta_logit(0, h));
        const Mat<S> kh = det_gemm(ku, state);
        const Mat<S> kkh = det_gemm(ku_t, kh);
        const Mat<S> removed = kkh * beta;
        const Mat<S> hm = state - removed;
        const Mat<S> wkv = det_gemm(ku_t, v);
        const Mat<S> written = wkv * beta;
        if (variant == AhnVariant::gdn) {
          const S alpha = stable_sigmoid(alpha_logit(0, h));
          const Mat<S> hd = hm * alpha;
          state = hd + written;
        } else {
          state = hm + written;
        }
        break;
      }
      case AhnVariant::mamba2: {
        const S delta = stable_softplus(alpha_logit(0, h));
        const S a = std::exp(params.a_log(0, h));
        const S da = delta * a;
        const S decay = std::exp(da * S(-1));
        const Mat<S> hd = state * decay;
        const Mat<S> k_t = k.transpose();
        const Mat<S> wkv = det_gemm(k_t, v);
        const Mat<S> written = wkv * delta;
        state = hd + written;
        break;
      }
    }
  }
  ++st.step;
}

// gamma-gated readout of the state for one already-rotated query row
template <typename S>
Mat<S> ahn_readout(const Mat<S>& q_row, const Mat<S>& x_row,
                   const CompressedState<S>& st, const AhnParams<S>& params,
                   const AttentionConfig& cfg, S gamma_offset) {
  const int H = cfg.head_dim;
  if (q_row.rows() != 1 || q_row.cols() != cfg.q_dim())
    throw ShapeError("ahn_readout: q row is " + detail::shape_str(q_row));
  if (x_row.rows() != 1 || x_row.cols() != params.w_gamma.rows())
    throw ShapeError("ahn_readout: x row is " + detail::shape_str(x_row));
  const Mat<S> gamma_logit = det_gemm(x_row, params.w_gamma);
  Mat<S> y(1, cfg.q_dim());
  for (int h = 0; h < cfg.n_q_heads; ++h) {
    const Mat<S> q = q_row.middleCols(static_cast<Eigen::Index>(h) * H, H);
    const S gamma = stable_sigmoid(gamma_logit(0, h) + gamma_offset);
    const Mat<S> qh = det_gemm(q, st.h[static_cast<std::size_t>(h)]);
    const Mat<S> wo_h = params.w_o.middleRows(static_cast<Eigen::Index>(h) * H, H);
    const Mat<S> qw = det_gemm(qh, wo_h);
    y.middleCols(static_cast<Eigen::Index>(h) * H, H) = qw * gamma;
  }
  return y;
}

// Chunked evaluation of the same recurrence: within each chunk the per-pair
// affine maps h -> A_t h + b_t compose into a single (M, B), which then hits
// the carried state once. A genuinely different evaluation order from
// ahn_update, kept as a cross-check and fast prefill path.
template <typename S>
CompressedState<S> chunk_scan(const std::vector<EvictedPair<S>>& pairs,
                              CompressedState<S> state, const AhnParams<S>& params,
                              const AttentionConfig& cfg, AhnVariant variant,
                              int chunk_size = 64) {
  if (chunk_size < 1) throw ConfigError("chunk_scan: chunk_size must be >= 1");
  const int H = cfg.head_dim;
  const int nq = cfg.n_q_heads;
  if (static_cast<int>(state.h.size()) != nq)
    throw ShapeError("chunk_scan: state head count mismatch");
  long prev_pos = -1;
  for (const auto& p : pairs) {
    if (p.pos <= prev_pos)
      throw OrderingError("chunk_scan: pair positions must increase, got " +
                          std::to_string(p.pos) + " after " + std::to_string(prev_pos));
    prev_pos = p.pos;
  }

  std::vector<Mat<S>> M(static_cast<std::size_t>(nq));
  std::vector<Mat<S>> B(static_cast<std::size_t>(nq));
  std::vector<S> m_scalar(static_cast<std::size_t>(nq));
  auto reset_chunk = [&]() {
    for (int h = 0; h < nq; ++h) {
      M[static_cast<std::size_t>(h)] = Mat<S>::Identity(H, H);
      B[static_cast<std::size_t>(h)] = Mat<S>::Zero(H, H);
      m_scalar[static_cast<std::size_t>(h)] = S(1);
    }
  };
  auto flush_chunk = [&]() {
    for (int h = 0; h < nq; ++h) {
      auto& st = state.h[static_cast<std::size_t>(h)];
      if (variant == AhnVariant::mamba2)
        st = st * m_scalar[static_cast<std::size_t>(h)] + B[static_cast<std::size_t>(h)];
      else
        st = M[static_cast<std::size_t>(h)] * st + B[static_cast<std::size_t>(h)];
    }
  };

  reset_chunk();
  int in_chunk = 0;
  for (const auto& p : pairs) {
    if (p.x.size() == 0)
      throw ShapeError("chunk_scan: evicted pair carries no layer input row");
    const Mat<S> alpha_logit = p.x * params.w_alpha;
    const Mat<S> beta_logit = p.x * params.w_beta;
    for (int h = 0; h < nq; ++h) {
      const int kvh = h / cfg.group();
      const Mat<S> k = p.k.middleCols(static_cast<Eigen::Index>(kvh) * H, H);
      const Mat<S> v = p.v.middleCols(static_cast<Eigen::Index>(kvh) * H, H);
      auto& Mh = M[static_cast<std::size_t>(h)];
      auto& Bh = B[static_cast<std::size_t>(h)];
      switch (variant) {
        case AhnVariant::gdn:
        case AhnVariant::dn: {
          const S inv = S(1) / std::sqrt(k.cwiseProduct(k).sum() + S(kKeyNormEps));
          const Mat<S> ku = k * inv;
          const S beta = stable_sigmoid(beta_logit(0, h));
          const S alpha = variant == AhnVariant::gdn
                              ? stable_sigmoid(alpha_logit(0, h))
                              : S(1);
          // A_t X = alpha * (X - beta * ku^T (ku X)) as a rank-1 update
          Mh = (Mh - (ku.transpose() * (ku * Mh)) * beta) * alpha;
          Bh = (Bh - (ku.transpose() * (ku * Bh)) * beta) * alpha +
               (ku.transpose() * v) * beta;
          break;
        }
        case AhnVariant::mamba2: {
          const S delta = stable_softplus(alpha_logit(0, h));
          const S a = std::exp(params.a_log(0, h));
          const S decay = std::exp(-(delta * a));
          m_scalar[static_cast<std::size_t>(h)] *= decay;
          Bh = Bh * decay + (k.transpose() * v) * delta;
          break;
        }
      }
    }
    ++state.step;
    if (++in_chunk == chunk_size) {
      flush_chunk();
      reset_chunk();
      in_chunk = 0;
    }
  }
  if (in_chunk > 0) flush_chunk();
  return state;
}

}  // namespace ahn
