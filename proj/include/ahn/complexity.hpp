#pragma once

#include <cstdint>
#include <vector>

#include "ahn/mode.hpp"

namespace ahn {

// Closed-form cost model for one decoder layer's token mixer. Multiplies and
// adds both count (one MAC = 2 flops). Sink columns are a constant handful
// and are left out, as is everything outside the mixer (MLP, norms, head).
struct ComplexitySpec {
  std::uint64_t seq_len = 0;    // L
  std::uint64_t window = 0;     // W
  std::uint64_t d_model = 0;    // D
  std::uint64_t head_dim = 0;   // H
  std::uint64_t n_q_heads = 0;  // queries
  std::uint64_t n_kv_heads = 0;
  std::uint64_t n_layers = 1;
  double base_params = 0;       // whole-model parameter count, for the extra-params ratio
  std::uint64_t ct_slots = 0;   // 0 = derive from the cache budget
};

struct CostReport {
  std::uint64_t params_extra = 0;  // summed over layers, relative to full attention
  std::uint64_t flops_mixing = 0;  // one layer, full sequence
  std::uint64_t cache_elems = 0;   // one layer, peak K+V (+state) elements
  double params_ratio = 0;         // params_extra / base_params
  double flops_ratio = 1;          // vs full attention
  double cache_ratio = 1;
};

// number of pooled slots a cache-budget-matched pooling memory may hold
std::uint64_t ct_budget_slots(const ComplexitySpec& spec);

// parameters the compressing memory actually trains, summed over layers. The
// gated variant carries three input gates; the plain-decay variant drops the
// retention gate, and the decay-rate variant swaps it for a step-size gate
// plus one log-rate scalar per head.
std::uint64_t ahn_trainable_params(const ComplexitySpec& spec, AhnVariant variant);

std::uint64_t mixing_flops(const ComplexitySpec& spec, MixerKind kind,
                           std::uint64_t seq_len, bool include_gate_terms = true);

CostReport complexity(const ComplexitySpec& spec, MixerKind kind,
                      bool include_gate_terms = true);

struct FlopPoint {
  std::uint64_t seq_len = 0;
  std::uint64_t flops = 0;
};

std::vector<FlopPoint> flop_curve(const ComplexitySpec& spec, MixerKind kind,
                                  const std::vector<std::uint64_t>& seq_lens,
                                  bool include_gate_terms = true);

}  // namespace ahn
