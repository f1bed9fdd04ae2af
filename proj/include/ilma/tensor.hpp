// ilma/tensor.hpp
//
// Copyright (c)  2026  ilmalab authors

#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ilma {

// Error taxonomy. Every throwing path in the library uses one of these so
// callers (and the CLI) can map failures to stable exit codes.
struct DimError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IndexError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IntegrityError : IoError {
  using IoError::IoError;
};
struct VersionError : IoError {
  using IoError::IoError;
};

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// splitmix64, used to expand seeds and derive independent streams.
inline uint64_t splitmix64(uint64_t &state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// xoshiro256** with hand-rolled uniform/normal transforms. std::random
// distributions are implementation-defined, which would break the
// bit-reproducibility contract of training runs.
class Rng {
 public:
  explicit Rng(uint64_t seed) {
    uint64_t sm = seed;
    for (auto &w : s_) w = splitmix64(sm);
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53 bits of entropy.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller (cosine branch only, no cached spare): each call consumes
  // exactly two raw draws, which keeps replay deterministic.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  // Unbiased integer in [0, n) via rejection.
  uint64_t below(uint64_t n) {
    const uint64_t bound = UINT64_MAX - UINT64_MAX % n;
    uint64_t r = next_u64();
    while (r >= bound) r = next_u64();
    return r % n;
  }

  // Derive an independent stream; used to seed per-utterance synthesis and
  // per-epoch shuffles without coupling their draw counts.
  static uint64_t mix(uint64_t seed, uint64_t stream) {
    uint64_t state = seed ^ (0x9e3779b97f4a7c15ULL * (stream + 1));
    return splitmix64(state);
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  uint64_t s_[4];
};

// Dense row-major tensor of binary64 values with an optional gradient
// buffer of identical shape.
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty, or data.size() entries

  Tensor() = default;

  explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
    for (int64_t e : shape) {
      if (e <= 0) throw DimError("tensor extents must be positive");
    }
    data.assign(static_cast<size_t>(numel_of(shape)), 0.0);
  }

  Tensor(std::vector<int64_t> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<int64_t>(data.size()) != numel_of(shape))
      throw DimError("tensor data length does not match shape");
  }

  static int64_t numel_of(const std::vector<int64_t> &s) {
    int64_t n = 1;
    for (int64_t e : s) n *= e;
    return s.empty() ? 0 : n;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int64_t ndim() const { return static_cast<int64_t>(shape.size()); }
  int64_t rows() const { return shape.empty() ? 0 : shape[0]; }
  int64_t cols() const { return ndim() == 1 ? shape[0] : (ndim() >= 2 ? shape[1] : 0); }

  double &at(int64_t i) { return data[static_cast<size_t>(i)]; }
  double at(int64_t i) const { return data[static_cast<size_t>(i)]; }
  double &at(int64_t r, int64_t c) { return data[static_cast<size_t>(r * shape[1] + c)]; }
  double at(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * shape[1] + c)]; }

  std::span<double> row(int64_t r) {
    return std::span<double>(data).subspan(static_cast<size_t>(r * shape[1]),
                                           static_cast<size_t>(shape[1]));
  }
  std::span<const double> row(int64_t r) const {
    return std::span<const double>(data).subspan(static_cast<size_t>(r * shape[1]),
                                                 static_cast<size_t>(shape[1]));
  }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
  void zero_grad() {
    if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
  }

  bool same_shape(const Tensor &o) const { return shape == o.shape; }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
  }
};

inline bool all_finite(std::span<const double> xs) {
  for (double x : xs) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

// Uniform init in +-sqrt(6 / (fan_in + fan_out)) for linear maps.
inline void init_linear(Tensor &w, Rng &rng, int64_t fan_in, int64_t fan_out) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (double &v : w.data) v = rng.uniform(-bound, bound);
}

inline void init_normal(Tensor &w, Rng &rng, double stddev) {
  for (double &v : w.data) v = stddev * rng.normal();
}

}  // namespace ilma
