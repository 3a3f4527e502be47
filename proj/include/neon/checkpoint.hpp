#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "neon/core.hpp"

namespace neon {

enum class ModelKind { gaussian, ddpm, categorical };

inline const char* to_string(ModelKind k) {
  switch (k) {
    case ModelKind::gaussian: return "gaussian";
    case ModelKind::ddpm: return "ddpm";
    case ModelKind::categorical: return "categorical";
  }
  return "unknown";
}

inline ModelKind model_kind_from_string(const std::string& s) {
  if (s == "gaussian") return ModelKind::gaussian;
  if (s == "ddpm") return ModelKind::ddpm;
  if (s == "categorical") return ModelKind::categorical;
  throw std::invalid_argument("unknown model kind '" + s + "'");
}

/// Parameters plus provenance. `meta` carries free-form key/value provenance
/// (architecture widths, merge parents and weight, ...).
struct Checkpoint {
  ParamVector params;
  ModelKind kind = ModelKind::gaussian;
  std::uint64_t seed = 0;
  std::uint64_t budget_images = 0;
  double lr = 0.0;
  std::map<std::string, std::string> meta;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

}  // namespace neon
