#pragma once

#include <optional>
#include <tuple>
#include <vector>

#include "ahn/mode.hpp"
#include "ahn/tensor.hpp"

namespace ahn {

struct AttentionConfig {
  int n_q_heads = 0;
  int n_kv_heads = 0;
  int head_dim = 0;
  int sinks = 0;
  int window = 0;

  int q_dim() const { return n_q_heads * head_dim; }
  int kv_dim() const { return n_kv_heads * head_dim; }
  int group() const { return n_q_heads / n_kv_heads; }

  void validate() const {
    if (n_q_heads <= 0 || n_kv_heads <= 0 || head_dim <= 0)
      throw ConfigError("attention: head counts and head_dim must be positive");
    if (n_q_heads % n_kv_heads != 0)
      throw ConfigError("attention: " + std::to_string(n_q_heads) +
                        " query heads not divisible by " + std::to_string(n_kv_heads) +
                        " kv heads");
    if (head_dim % 2 != 0)
      throw ConfigError("attention: head_dim must be even for rotary pairs");
    if (sinks < 0 || window < 1)
      throw ConfigError("attention: need sinks >= 0 and window >= 1");
  }
};

// Causal mask over key column j for query row i. Full keeps the whole lower
// triangle; the windowed kinds keep sink columns [0, sinks) plus the last
// `window` positions. For L <= sinks + window every causal entry survives,
// so the windowed mask degenerates to the full one.
inline Mask build_mask(Eigen::Index L, MixerKind kind, const AttentionConfig& cfg) {
  cfg.validate();
  if (L < 1) throw ShapeError("build_mask: L must be positive");
  Mask m = Mask::Zero(L, L);
  for (Eigen::Index i = 0; i < L; ++i) {
    for (Eigen::Index j = 0; j <= i; ++j) {
      const bool keep = kind == MixerKind::full || j < cfg.sinks || i - j < cfg.window;
      m(i, j) = keep ? 1 : 0;
    }
  }
  return m;
}

// Attention over already-projected, already-rotated rows. k/v may carry more
// rows than q (extra memory slots); the mask has one column per k row.
template <typename S>
Var<S> attend(Var<S> q, Var<S> k, Var<S> v, const Mask& mask,
              const AttentionConfig& cfg) {
  cfg.validate();
  Tape<S>& t = *q.tape;
  const Eigen::Index L = q.rows();
  const Eigen::Index n = k.rows();
  if (q.cols() != cfg.q_dim())
    throw ShapeError("attend: q has " + std::to_string(q.cols()) + " cols, expected " +
                     std::to_string(cfg.q_dim()));
  if (k.cols() != cfg.kv_dim() || v.cols() != cfg.kv_dim() || v.rows() != n)
    throw ShapeError("attend: k/v dims do not match config");
  if (mask.rows() != L || mask.cols() != n)
    throw ShapeError("attend: mask " + detail::shape_str(mask) + " for q rows " +
                     std::to_string(L) + ", k rows " + std::to_string(n));
  const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(cfg.head_dim));
  const int H = cfg.head_dim;
  std::vector<Var<S>> heads;
  heads.reserve(static_cast<std::size_t>(cfg.n_q_heads));
  for (int h = 0; h < cfg.n_q_heads; ++h) {
    const int kvh = h / cfg.group();
    auto qh = slice(q, 0, static_cast<Eigen::Index>(h) * H, L, H);
    auto kh = slice(k, 0, static_cast<Eigen::Index>(kvh) * H, n, H);
    auto vh = slice(v, 0, static_cast<Eigen::Index>(kvh) * H, n, H);
    auto scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    auto probs = softmax_rows(scores, mask);
    heads.push_back(matmul(probs, vh));
  }
  return concat_cols(heads);
}

// Same computation without a tape, for streaming inference. mask may be null
// (all positions allowed).
template <typename S>
Mat<S> attend_plain(const Mat<S>& q, const Mat<S>& k, const Mat<S>& v,
                    const Mask* mask, const AttentionConfig& cfg) {
  cfg.validate();
  const Eigen::Index L = q.rows();
  const Eigen::Index n = k.rows();
  if (q.cols() != cfg.q_dim() || k.cols() != cfg.kv_dim() || v.cols() != cfg.kv_dim() ||
      v.rows() != n)
    throw ShapeError("attend_plain: operand dims do not match config");
  if (mask != nullptr && (mask->rows() != L || mask->cols() != n))
    throw ShapeError("attend_plain: bad mask shape");
  const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(cfg.head_dim));
  const int H = cfg.head_dim;
  Mat<S> y(L, cfg.q_dim());
  Mat<S> probs(1, n);
  for (int h = 0; h < cfg.n_q_heads; ++h) {
    const int kvh = h / cfg.group();
    const Mat<S> qh = q.middleCols(static_cast<Eigen::Index>(h) * H, H);
    const Mat<S> kh_t =
        k.middleCols(static_cast<Eigen::Index>(kvh) * H, H).transpose();
    const Mat<S> vh = v.middleCols(static_cast<Eigen::Index>(kvh) * H, H);
    Mat<S> scores = det_gemm(qh, kh_t);
    scores *= inv_sqrt;
    for (Eigen::Index i = 0; i < L; ++i) {
      const std::uint8_t* allow = mask != nullptr ? mask->row(i).data() : nullptr;
      if (!softmax_masked_row(scores.row(i).data(), allow, n, probs.row(0).data()))
        throw DegenerateRowError("attend_plain: query " + std::to_string(i) +
                                 " sees no keys");
      const Mat<S> yh = det_gemm(probs, vh);
      y.row(i).segment(static_cast<Eigen::Index>(h) * H, H) = yh.row(0);
    }
  }
  return y;
}

template <typename S>
std::tuple<Var<S>, Var<S>, Var<S>> project_qkv(Var<S> x, Var<S> wq, Var<S> wk,
                                               Var<S> wv) {
  return {matmul(x, wq), matmul(x, wk), matmul(x, wv)};
}

template <typename S>
struct EvictedPair {
  Mat<S> k;  // 1 x kv_dim, position-encoded
  Mat<S> v;  // 1 x kv_dim
  Mat<S> x;  // 1 x aux_dim layer input, empty when not tracked
  long pos = -1;
};

// Bounded KV cache: `sinks` append-only rows plus a ring of the most recent
// `window` rows. Appends beyond capacity evict the oldest windowed row and
// hand it back. window < 0 keeps everything (no eviction).
template <typename S>
class KvWindow {
 public:
  KvWindow(int sinks, int window, Eigen::Index kv_dim, Eigen::Index aux_dim = 0)
      : sinks_(sinks), window_(window), kv_dim_(kv_dim), aux_dim_(aux_dim) {
    if (sinks < 0) throw ConfigError("kv window: sinks must be >= 0");
    if (window == 0) throw ConfigError("kv window: window must be >= 1 or unbounded");
    if (kv_dim < 1) throw ConfigError("kv window: kv_dim must be positive");
    const Eigen::Index cap = bounded() ? sinks + window : 16;
    k_.resize(cap, kv_dim_);
    v_.resize(cap, kv_dim_);
    if (aux_dim_ > 0) x_.resize(cap, aux_dim_);
    pos_.resize(static_cast<std::size_t>(cap), -1);
  }

  bool bounded() const { return window_ > 0; }
  int sink_count() const { return sinks_; }
  int window_size() const { return window_; }
  Eigen::Index size() const { return len_; }
  long evictions() const { return evictions_; }
  long last_pos() const { return last_pos_; }

  std::optional<EvictedPair<S>> append(const Mat<S>& k_row, const Mat<S>& v_row,
                                       long pos, const Mat<S>* x_row = nullptr) {
    if (k_row.rows() != 1 || k_row.cols() != kv_dim_ || v_row.rows() != 1 ||
        v_row.cols() != kv_dim_)
      throw ShapeError("kv append: rows must be 1 x " + std::to_string(kv_dim_));
    if (aux_dim_ > 0 && (x_row == nullptr || x_row->rows() != 1 || x_row->cols() != aux_dim_))
      throw ShapeError("kv append: aux row must be 1 x " + std::to_string(aux_dim_));
    if (last_pos_ >= 0 && pos != last_pos_ + 1)
      throw OrderingError("kv append: position " + std::to_string(pos) +
                          " does not extend " + std::to_string(last_pos_));
    last_pos_ = pos;

    std::optional<EvictedPair<S>> evicted;
    Eigen::Index slot;
    if (!bounded() || len_ < sinks_ + window_) {
      if (!bounded() && len_ == k_.rows()) grow();
      // rows fill in append order, so slots [0, sinks) hold the sink tokens
      slot = len_++;
    } else {
      EvictedPair<S> out;
      const Eigen::Index oldest = ring_slot(0);
      out.k = k_.row(oldest);
      out.v = v_.row(oldest);
      if (aux_dim_ > 0) out.x = x_.row(oldest);
      out.pos = pos_[static_cast<std::size_t>(oldest)];
      evicted = std::move(out);
      slot = oldest;
      ring_start_ = (ring_start_ + 1) % window_;
      ++evictions_;
    }
    k_.row(slot) = k_row.row(0);
    v_.row(slot) = v_row.row(0);
    if (aux_dim_ > 0) x_.row(slot) = x_row->row(0);
    pos_[static_cast<std::size_t>(slot)] = pos;
    return evicted;
  }

  // contiguous snapshot in ascending position order
  void gather(Mat<S>& k_out, Mat<S>& v_out, std::vector<long>* positions = nullptr) const {
    k_out.resize(len_, kv_dim_);
    v_out.resize(len_, kv_dim_);
    if (positions != nullptr) positions->assign(static_cast<std::size_t>(len_), -1);
    for (Eigen::Index i = 0; i < len_; ++i) {
      const Eigen::Index slot = order_slot(i);
      k_out.row(i) = k_.row(slot);
      v_out.row(i) = v_.row(slot);
      if (positions != nullptr)
        (*positions)[static_cast<std::size_t>(i)] = pos_[static_cast<std::size_t>(slot)];
    }
  }

  std::size_t byte_size() const {
    return static_cast<std::size_t>(len_) * static_cast<std::size_t>(2 * kv_dim_ + aux_dim_) *
           sizeof(S);
  }

 private:
  Eigen::Index ring_slot(Eigen::Index i) const {
    return static_cast<Eigen::Index>(sinks_) + (ring_start_ + i) % window_;
  }

  Eigen::Index order_slot(Eigen::Index i) const {
    if (!bounded() || i < sinks_ || len_ < sinks_ + window_) return i;
    return ring_slot(i - sinks_);
  }

  void grow() {
    const Eigen::Index cap = k_.rows() * 2;
    k_.conservativeResize(cap, kv_dim_);
    v_.conservativeResize(cap, kv_dim_);
    if (aux_dim_ > 0) x_.conservativeResize(cap, aux_dim_);
    pos_.resize(static_cast<std::size_t>(cap), -1);
  }

  int sinks_, window_;
  Eigen::Index kv_dim_, aux_dim_;
  Mat<S> k_, v_, x_;
  std::vector<long> pos_;
  Eigen::Index len_ = 0;
  Eigen::Index ring_start_ = 0;
  long last_pos_ = -1;
  long evictions_ = 0;
};

}  // namespace ahn
