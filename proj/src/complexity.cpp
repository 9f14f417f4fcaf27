#include "ahn/complexity.hpp"

namespace ahn {

namespace {

void validate(const ComplexitySpec& s) {
  if (s.d_model == 0 || s.head_dim == 0 || s.n_q_heads == 0 || s.n_kv_heads == 0 ||
      s.n_layers == 0)
    throw ConfigError("complexity: all model dimensions must be positive");
  if (s.window == 0) throw ConfigError("complexity: window must be positive");
  if (s.n_q_heads % s.n_kv_heads != 0)
    throw ConfigError("complexity: query heads must be a multiple of kv heads");
}

}  // namespace

std::uint64_t ct_budget_slots(const ComplexitySpec& spec) {
  if (spec.ct_slots > 0) return spec.ct_slots;
  // the recurrent state holds n_q_heads HxH matrices; the same element budget
  // buys H*n_q/(2*n_kv) pooled K+V rows
  std::uint64_t slots = spec.head_dim * spec.n_q_heads / (2 * spec.n_kv_heads);
  return slots > 0 ? slots : 1;
}

std::uint64_t ahn_trainable_params(const ComplexitySpec& s, AhnVariant variant) {
  validate(s);
  const std::uint64_t D = s.d_model, H = s.head_dim, Nq = s.n_q_heads;
  std::uint64_t gates = 3 * D * Nq;           // retention, write strength, output gate
  if (variant != AhnVariant::gdn) gates -= D * Nq;
  std::uint64_t per_layer = gates + H * H * Nq;
  if (variant == AhnVariant::mamba2) per_layer += Nq;
  return s.n_layers * per_layer;
}

std::uint64_t mixing_flops(const ComplexitySpec& s, MixerKind kind, std::uint64_t L,
                           bool include_gate_terms) {
  validate(s);
  const std::uint64_t D = s.d_model, H = s.head_dim, Nq = s.n_q_heads, Nkv = s.n_kv_heads;
  const std::uint64_t W = s.window;
  const std::uint64_t proj = 4 * L * D * H * (Nq + Nkv);
  if (kind == MixerKind::full || L <= W) return proj + 2 * H * Nq * L * L;

  // in-window attention: a causal W x W triangle plus a W-wide band for the
  // remaining L - W rows
  std::uint64_t flops = proj + 2 * H * Nq * W * W + 2 * (L - W) * (2 * W * H * Nq);
  switch (kind) {
    case MixerKind::sinks_swa:
      break;
    case MixerKind::sinks_swa_ahn: {
      std::uint64_t per_evict = H * H * Nq;  // state update
      if (include_gate_terms) per_evict += 3 * D * Nq + H * H * Nq;  // gates + readout
      flops += 2 * (L - W) * per_evict;
      break;
    }
    case MixerKind::sinks_swa_ct: {
      const std::uint64_t slots = ct_budget_slots(s);
      flops += 2 * (L - W) * (2 * slots * H * Nq);
      break;
    }
    case MixerKind::full:
      break;
  }
  return flops;
}

CostReport complexity(const ComplexitySpec& s, MixerKind kind, bool include_gate_terms) {
  validate(s);
  if (s.seq_len == 0) throw ConfigError("complexity: seq_len must be positive");
  if (s.window > s.seq_len)
    throw ConfigError("complexity: window " + std::to_string(s.window) +
                      " exceeds seq_len " + std::to_string(s.seq_len));
  const std::uint64_t H = s.head_dim, Nq = s.n_q_heads, Nkv = s.n_kv_heads;
  const std::uint64_t L = s.seq_len, W = s.window;

  CostReport r;
  const std::uint64_t cache_full = 2 * L * H * Nkv;
  const std::uint64_t flops_full = mixing_flops(s, MixerKind::full, L, include_gate_terms);
  switch (kind) {
    case MixerKind::full:
      r.cache_elems = cache_full;
      break;
    case MixerKind::sinks_swa:
      r.cache_elems = 2 * W * H * Nkv;
      break;
    case MixerKind::sinks_swa_ahn:
      r.params_extra = s.n_layers * (3 * s.d_model * Nq + H * H * Nq);
      r.cache_elems = 2 * W * H * Nkv + H * H * Nq;
      break;
    case MixerKind::sinks_swa_ct:
      r.cache_elems = 2 * W * H * Nkv + 2 * ct_budget_slots(s) * H * Nkv;
      break;
  }
  r.flops_mixing = mixing_flops(s, kind, L, include_gate_terms);
  r.flops_ratio = static_cast<double>(r.flops_mixing) / static_cast<double>(flops_full);
  r.cache_ratio = static_cast<double>(r.cache_elems) / static_cast<double>(cache_full);
  r.params_ratio = s.base_params > 0
                       ? static_cast<double>(r.params_extra) / s.base_params
                       : 0.0;
  return r;
}

std::vector<FlopPoint> flop_curve(const ComplexitySpec& spec, MixerKind kind,
                                  const std::vector<std::uint64_t>& seq_lens,
                                  bool include_gate_terms) {
  std::vector<FlopPoint> out;
  out.reserve(seq_lens.size());
  for (std::uint64_t L : seq_lens) {
    if (L == 0) throw ConfigError("flop_curve: seq_len must be positive");
    out.push_back({L, mixing_flops(spec, kind, L, include_gate_terms)});
  }
  return out;
}

}  // namespace ahn
