#pragma once

#include <string>
#include <string_view>

#include "ahn/common.hpp"

namespace ahn {

enum class MixerKind { full, sinks_swa, sinks_swa_ahn, sinks_swa_ct };
enum class AhnVariant { gdn, dn, mamba2 };
enum class CtPool { max, avg };

struct MixerMode {
  MixerKind kind = MixerKind::full;
  AhnVariant variant = AhnVariant::gdn;
  CtPool pool = CtPool::avg;
};

inline const char* to_string(MixerKind k) {
  switch (k) {
    case MixerKind::full: return "full";
    case MixerKind::sinks_swa: return "sinks_swa";
    case MixerKind::sinks_swa_ahn: return "sinks_swa_ahn";
    case MixerKind::sinks_swa_ct: return "sinks_swa_ct";
  }
  return "?";
}

inline const char* to_string(AhnVariant v) {
  switch (v) {
    case AhnVariant::gdn: return "gdn";
    case AhnVariant::dn: return "dn";
    case AhnVariant::mamba2: return "mamba2";
  }
  return "?";
}

inline const char* to_string(CtPool p) {
  return p == CtPool::max ? "max" : "avg";
}

inline MixerKind mixer_kind_from(std::string_view s) {
  if (s == "full") return MixerKind::full;
  if (s == "sinks_swa") return MixerKind::sinks_swa;
  if (s == "sinks_swa_ahn") return MixerKind::sinks_swa_ahn;
  if (s == "sinks_swa_ct") return MixerKind::sinks_swa_ct;
  throw ConfigError("unknown mixer kind '" + std::string(s) + "'");
}

inline AhnVariant ahn_variant_from(std::string_view s) {
  if (s == "gdn") return AhnVariant::gdn;
  if (s == "dn") return AhnVariant::dn;
  if (s == "mamba2") return AhnVariant::mamba2;
  throw ConfigError("unknown recurrent variant '" + std::string(s) + "'");
}

inline CtPool ct_pool_from(std::string_view s) {
  if (s == "max") return CtPool::max;
  if (s == "avg") return CtPool::avg;
  throw ConfigError("unknown pooling '" + std::string(s) + "'");
}

}  // namespace ahn
