#pragma once

#include <utility>
#include <vector>

#include "ahn/attention.hpp"
#include "ahn/mode.hpp"
#include "ahn/tensor.hpp"

namespace ahn {

// Pooling memory for evicted KV rows: every `rate` consecutive pairs collapse
// into one slot (elementwise max or mean over the group), and a FIFO keeps
// the most recent `capacity` slots. A trailing group short of `rate` pairs
// stays pending and is never exposed.
template <typename S>
class CtMemory {
 public:
  CtMemory(int rate, Eigen::Index capacity, Eigen::Index dim, CtPool pool)
      : rate_(rate), capacity_(capacity), dim_(dim), pool_(pool) {
    if (rate < 1) throw ConfigError("ct memory: rate must be >= 1");
    if (capacity < 1) throw ConfigError("ct memory: capacity must be >= 1");
    if (dim < 1) throw ConfigError("ct memory: dim must be positive");
    k_.resize(capacity_, dim_);
    v_.resize(capacity_, dim_);
  }

  int rate() const { return rate_; }
  Eigen::Index capacity() const { return capacity_; }
  Eigen::Index slots() const { return len_; }
  long completed() const { return completed_; }
  int pending() const { return pending_; }

  void push(const Mat<S>& k_row, const Mat<S>& v_row) {
    if (k_row.rows() != 1 || k_row.cols() != dim_ || v_row.rows() != 1 ||
        v_row.cols() != dim_)
      throw ShapeError("ct push: rows must be 1 x " + std::to_string(dim_));
    if (pending_ == 0) {
      acc_k_ = k_row;
      acc_v_ = v_row;
    } else if (pool_ == CtPool::max) {
      acc_k_ = acc_k_.cwiseMax(k_row);
      acc_v_ = acc_v_.cwiseMax(v_row);
    } else {
      acc_k_ = acc_k_ + k_row;
      acc_v_ = acc_v_ + v_row;
    }
    if (++pending_ < rate_) return;
    pending_ = 0;
    ++completed_;
    Eigen::Index slot;
    if (len_ < capacity_) {
      slot = (start_ + len_) % capacity_;
      ++len_;
    } else {
      slot = start_;  // overwrite oldest
      start_ = (start_ + 1) % capacity_;
    }
    if (pool_ == CtPool::avg) {
      const S inv = S(1) / static_cast<S>(rate_);
      k_.row(slot) = acc_k_.row(0) * inv;
      v_.row(slot) = acc_v_.row(0) * inv;
    } else {
      k_.row(slot) = acc_k_.row(0);
      v_.row(slot) = acc_v_.row(0);
    }
  }

  // retained slots, oldest first
  void gather(Mat<S>& k_out, Mat<S>& v_out) const {
    k_out.resize(len_, dim_);
    v_out.resize(len_, dim_);
    for (Eigen::Index i = 0; i < len_; ++i) {
      const Eigen::Index slot = (start_ + i) % capacity_;
      k_out.row(i) = k_.row(slot);
      v_out.row(i) = v_.row(slot);
    }
  }

  std::size_t byte_size() const {
    return static_cast<std::size_t>(len_) * static_cast<std::size_t>(2 * dim_) * sizeof(S);
  }

 private:
  int rate_;
  Eigen::Index capacity_;
  Eigen::Index dim_;
  CtPool pool_;
  int pending_ = 0;
  long completed_ = 0;
  Mat<S> acc_k_, acc_v_;
  Mat<S> k_, v_;
  Eigen::Index start_ = 0, len_ = 0;
};

// One-shot pooling of an ordered pair list; capacity < 0 keeps all slots.
template <typename S>
std::pair<Mat<S>, Mat<S>> ct_compress(const std::vector<EvictedPair<S>>& pairs,
                                      int rate, CtPool pool,
                                      Eigen::Index capacity = -1) {
  if (rate < 1) throw ConfigError("ct_compress: rate must be >= 1");
  long prev = -1;
  for (const auto& p : pairs) {
    if (p.pos <= prev)
      throw OrderingError("ct_compress: positions must increase, got " +
                          std::to_string(p.pos) + " after " + std::to_string(prev));
    prev = p.pos;
  }
  if (pairs.empty()) return {Mat<S>(0, 0), Mat<S>(0, 0)};
  const Eigen::Index dim = pairs.front().k.cols();
  const Eigen::Index cap =
      capacity >= 0 ? capacity
                    : static_cast<Eigen::Index>(pairs.size()) / rate + 1;
  CtMemory<S> mem(rate, std::max<Eigen::Index>(cap, 1), dim, pool);
  for (const auto& p : pairs) mem.push(p.k, p.v);
  Mat<S> k, v;
  mem.gather(k, v);
  return {k, v};
}

}  // namespace ahn
