#pragma once

// Shared numeric substrate: flat parameter vectors, diagonal preconditioners,
// splittable deterministic randomness and the error types used across the lab.

#include <cmath>
#include <cstdint>
#include <new>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace neon {

// Error categories. The CLI maps these onto exit codes 2 / 3 / 4.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct NumericDivergence : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Allocator with a fixed 64-byte alignment. Vectorized reductions peel a scalar
/// prologue up to the first aligned element, so buffers handed to Eigen must sit
/// at a fixed alignment for results to be independent of the heap layout.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using DoubleBuffer = std::vector<double, AlignedAllocator<double>>;

/// Flat real-valued parameter array. Every entry is finite.
class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(const std::vector<double>& values) : ParamVector(DoubleBuffer(values.begin(), values.end())) {}
  ParamVector(std::initializer_list<double> values) : ParamVector(DoubleBuffer(values)) {}
  explicit ParamVector(DoubleBuffer values) : values_(std::move(values)) {
    for (std::size_t i = 0; i < values_.size(); ++i) {
      if (!std::isfinite(values_[i])) {
        throw NumericDivergence("ParamVector: non-finite entry at index " + std::to_string(i));
      }
    }
  }
  static ParamVector zeros(std::size_t dim) { return ParamVector(DoubleBuffer(dim, 0.0)); }

  std::size_t dim() const noexcept { return values_.size(); }
  double operator[](std::size_t i) const { return values_[i]; }
  std::span<const double> values() const noexcept { return values_; }
  std::vector<double> vec() const { return {values_.begin(), values_.end()}; }
  const DoubleBuffer& buffer() const noexcept { return values_; }

  friend bool operator==(const ParamVector&, const ParamVector&) = default;

 private:
  DoubleBuffer values_;
};

/// Positive diagonal scaling of gradient space.
class DiagPreconditioner {
 public:
  explicit DiagPreconditioner(std::vector<double> diag) : diag_(std::move(diag)) {
    for (std::size_t i = 0; i < diag_.size(); ++i) {
      if (!(diag_[i] > 0.0) || !std::isfinite(diag_[i])) {
        throw std::invalid_argument("preconditioner entry " + std::to_string(i) +
                                    " must be finite and > 0");
      }
    }
  }
  static DiagPreconditioner identity(std::size_t dim) {
    return DiagPreconditioner(std::vector<double>(dim, 1.0));
  }
  std::size_t dim() const noexcept { return diag_.size(); }
  double operator[](std::size_t i) const { return diag_[i]; }
  std::span<const double> values() const noexcept { return diag_; }

 private:
  std::vector<double> diag_;
};

inline void require_same_dim(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw std::invalid_argument(std::string(what) + ": dimension mismatch (" + std::to_string(a) +
                                " vs " + std::to_string(b) + ")");
  }
}

/// a*x + b*y elementwise.
inline ParamVector lin_comb(double a, const ParamVector& x, double b, const ParamVector& y) {
  require_same_dim(x.dim(), y.dim(), "lin_comb");
  if (!std::isfinite(a) || !std::isfinite(b)) throw std::invalid_argument("lin_comb: non-finite coefficient");
  std::vector<double> out(x.dim());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x[i] + b * y[i];
  return ParamVector(std::move(out));
}

/// sum_i x_i p_i y_i
inline double dot_p(const ParamVector& x, const ParamVector& y, const DiagPreconditioner& p) {
  require_same_dim(x.dim(), y.dim(), "dot_p");
  require_same_dim(x.dim(), p.dim(), "dot_p preconditioner");
  double acc = 0.0;
  for (std::size_t i = 0; i < x.dim(); ++i) acc += x[i] * p[i] * y[i];
  return acc;
}

inline double dot(const ParamVector& x, const ParamVector& y) {
  require_same_dim(x.dim(), y.dim(), "dot");
  double acc = 0.0;
  for (std::size_t i = 0; i < x.dim(); ++i) acc += x[i] * y[i];
  return acc;
}

inline double norm(const ParamVector& x) { return std::sqrt(dot(x, x)); }

/// Elementwise P*x.
inline ParamVector apply(const DiagPreconditioner& p, const ParamVector& x) {
  require_same_dim(x.dim(), p.dim(), "apply preconditioner");
  std::vector<double> out(x.dim());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = p[i] * x[i];
  return ParamVector(std::move(out));
}

/// Inclusive arithmetic grid lo, lo+step, ..., <= hi. Points are lo + i*step
/// (no accumulated drift).
struct Range {
  double lo = 0.0;
  double hi = 0.0;
  double step = 1.0;

  std::size_t count() const {
    if (!(step > 0.0) || !std::isfinite(lo) || !std::isfinite(hi) || hi < lo) {
      throw ConfigError("range needs finite lo <= hi and step > 0");
    }
    return static_cast<std::size_t>(std::floor((hi - lo) / step + 1e-9)) + 1;
  }
  std::vector<double> values() const {
    std::vector<double> v(count());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = lo + static_cast<double>(i) * step;
    return v;
  }
};

// ---------------------------------------------------------------------------
// Randomness
//
// Rng is xoshiro256** seeded through splitmix64. A stream is identified by a
// 64-bit seed; fork(label) derives the child seed from (seed, label) only, so
// children do not depend on how much of the parent has been consumed or on the
// order siblings are created in. Normals come from Box-Muller so the sequence
// does not depend on the standard library's distribution implementations.

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& x) {
  std::uint64_t z = (x += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace detail

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed) {
    std::uint64_t sm = seed;
    for (auto& s : state_) s = detail::splitmix64(sm);
  }

  std::uint64_t seed() const noexcept { return seed_; }

  Rng fork(std::string_view label) const { return fork_with(detail::fnv1a64(label)); }
  Rng fork(std::uint64_t index) const { return fork_with(index * 0xD1B54A32D192ED03ULL + 0x8CB92BA72F3D8DD7ULL); }

  std::uint64_t next_u64() {
    const std::uint64_t result = detail::rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = detail::rotl(state_[3], 45);
    return result;
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n). Rejection sampling, no modulo bias.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below: n must be > 0");
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t r;
    do {
      r = next_u64();
    } while (r >= limit);
    return r % n;
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

 private:
  Rng fork_with(std::uint64_t tag) const {
    std::uint64_t x = seed_ ^ detail::rotl(tag, 17);
    const std::uint64_t a = detail::splitmix64(x);
    const std::uint64_t b = detail::splitmix64(x);
    return Rng(a ^ detail::rotl(b, 31));
  }

  std::uint64_t seed_;
  std::uint64_t state_[4]{};
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace neon
