#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "ahn/complexity.hpp"
#include "ahn/corpus.hpp"
#include "ahn/distill.hpp"
#include "ahn/model.hpp"

namespace ahn {

// --- input-sensitivity probe ---

// Per-position L2 norm of d KL / d embedding-row, with the divergence taken
// between the compressing model and the full-attention teacher evaluated on
// one shared differentiable embedding leaf. Positions [sinks, L - window)
// reach the final query only through the compressed state.
struct GradProbe {
  double kl = 0;
  int sinks = 0;
  int window = 0;
  std::vector<double> grad_l2;  // one entry per input position

  bool compressed_at(std::size_t pos) const {
    return static_cast<int>(pos) >= sinks &&
           pos + static_cast<std::size_t>(window) < grad_l2.size();
  }
};

template <typename S>
GradProbe grad_probe(Model<S>& model, std::span<const int> tokens,
                     const ForwardOverrides& ov = {}) {
  const ModelConfig& c = model.config();
  const int sinks = ov.sinks >= 0 ? ov.sinks : c.sinks;
  const int window = ov.window > 0 ? ov.window : c.window;
  const Eigen::Index L = static_cast<Eigen::Index>(tokens.size());
  if (L <= sinks + window)
    throw ConfigError("grad_probe: need seq_len > sinks + window (" +
                      std::to_string(L) + " <= " + std::to_string(sinks + window) +
                      "), otherwise nothing is compressed");

  const Mat<S>* table = nullptr;
  for (auto& a : model.arrays())
    if (a.name == "embed") table = a.mat;
  Mat<S> rows(L, c.d_model);
  for (Eigen::Index i = 0; i < L; ++i) {
    const int id = tokens[static_cast<std::size_t>(i)];
    if (id < 0 || id >= c.vocab)
      throw ShapeError("grad_probe: token id " + std::to_string(id) + " out of range");
    rows.row(i) = table->row(id);
  }

  Tape<S> tape;
  auto x = tape.input(std::move(rows), true);
  auto student = model.forward_embedded(tape, x, c.mode(), GradMode::none, ov);
  auto teacher = model.forward_embedded(
      tape, x, {MixerKind::full, c.ahn_variant, c.ct_pool}, GradMode::none);
  auto kl = kl_loss(student.logits, teacher.logits);

  GradProbe out;
  out.kl = static_cast<double>(tape.value(kl)(0, 0));
  out.sinks = sinks;
  out.window = window;
  tape.backward(kl);
  const Mat<S>& g = tape.grad(x);
  out.grad_l2.resize(static_cast<std::size_t>(L));
  for (Eigen::Index i = 0; i < L; ++i)
    out.grad_l2[static_cast<std::size_t>(i)] = static_cast<double>(g.row(i).norm());
  return out;
}

// --- perplexity over position ---

struct PplPoint {
  long pos_lo = 0;  // first predicting position in the bucket (inclusive)
  long pos_hi = 0;  // last predicting position (inclusive)
  long count = 0;   // predictions pooled across slices
  double mean_nll = 0;
  double ppl = 0;
};

// Streaming next-byte evaluation bucketed by position, pooled over seeded
// held-out slices. Position i predicts token i+1; the last position has no
// target and is skipped.
template <typename S>
std::vector<PplPoint> ppl_curve(Model<S>& model, const Corpus& corpus,
                                const std::string& split, const MixerMode& mode,
                                int seq_len, int n_slices, int bucket,
                                std::uint64_t seed, const ForwardOverrides& ov = {}) {
  if (seq_len < 2) throw ConfigError("ppl_curve: seq_len must be >= 2");
  if (n_slices < 1) throw ConfigError("ppl_curve: need at least one slice");
  if (bucket < 1) throw ConfigError("ppl_curve: bucket must be >= 1");
  if (model.config().vocab <= kBosToken)
    throw ConfigError("ppl_curve: byte corpus needs vocab >= " +
                      std::to_string(kBosToken + 1));
  const int n_pred = seq_len - 1;
  const int n_buckets = (n_pred + bucket - 1) / bucket;
  std::vector<double> nll_sum(static_cast<std::size_t>(n_buckets), 0.0);
  std::vector<long> counts(static_cast<std::size_t>(n_buckets), 0);

  for (int s = 0; s < n_slices; ++s) {
    Rng rng = Rng::derive(seed, "ppl", static_cast<std::uint64_t>(s));
    std::vector<int> tokens = corpus.sample(split, rng, seq_len - 1);
    tokens.insert(tokens.begin(), kBosToken);
    auto st = model.new_stream(mode, ov);
    for (int i = 0; i + 1 < seq_len; ++i) {
      const Mat<S> logits = model.stream_step(st, tokens[static_cast<std::size_t>(i)]);
      S mx = logits(0, 0);
      for (Eigen::Index j = 1; j < logits.cols(); ++j) mx = std::max(mx, logits(0, j));
      S z = S(0);
      for (Eigen::Index j = 0; j < logits.cols(); ++j)
        z += std::exp(logits(0, j) - mx);
      const double nll = static_cast<double>(
          mx + std::log(z) - logits(0, tokens[static_cast<std::size_t>(i) + 1]));
      if (!std::isfinite(nll)) throw NumericError("ppl_curve: non-finite nll");
      const int b = i / bucket;
      nll_sum[static_cast<std::size_t>(b)] += nll;
      ++counts[static_cast<std::size_t>(b)];
    }
  }

  std::vector<PplPoint> out;
  for (int b = 0; b < n_buckets; ++b) {
    PplPoint p;
    p.pos_lo = static_cast<long>(b) * bucket;
    p.pos_hi = std::min<long>(n_pred - 1, static_cast<long>(b + 1) * bucket - 1);
    p.count = counts[static_cast<std::size_t>(b)];
    p.mean_nll = nll_sum[static_cast<std::size_t>(b)] / static_cast<double>(p.count);
    p.ppl = std::exp(p.mean_nll);
    out.push_back(p);
  }
  return out;
}

// --- cost-curve shape ---

// f(L+2) - 2 f(L+1) + f(L) over consecutive lengths: zero where the mixing
// cost grows linearly, a positive constant where it grows quadratically
inline std::vector<long long> flop_second_differences(const ComplexitySpec& spec,
                                                      MixerKind kind,
                                                      std::uint64_t l_lo,
                                                      std::uint64_t l_hi,
                                                      bool include_gate_terms = true) {
  if (l_hi < l_lo + 2)
    throw ConfigError("flop_second_differences: need at least three lengths");
  std::vector<long long> out;
  for (std::uint64_t L = l_lo; L + 2 <= l_hi; ++L) {
    const std::uint64_t f0 = mixing_flops(spec, kind, L, include_gate_terms);
    const std::uint64_t f1 = mixing_flops(spec, kind, L + 1, include_gate_terms);
    const std::uint64_t f2 = mixing_flops(spec, kind, L + 2, include_gate_terms);
    out.push_back(static_cast<long long>(f2 - f1) - static_cast<long long>(f1 - f0));
  }
  return out;
}

}  // namespace ahn
