#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace stsep {

// Error taxonomy shared by every module. CLI maps these to exit codes.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericsError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FormatError : IoError {
  using IoError::IoError;
};

// Row-major shape, up to 5 dims.
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<int64_t> dims) {
    if (dims.size() > kMaxRank) throw UsageError("Shape: rank > 5");
    for (int64_t d : dims) push(d);
  }
  explicit Shape(const std::vector<int64_t>& dims) {
    if (dims.size() > kMaxRank) throw UsageError("Shape: rank > 5");
    for (int64_t d : dims) push(d);
  }

  int rank() const { return rank_; }
  int64_t operator[](int i) const { return dims_[static_cast<size_t>(i)]; }
  int64_t numel() const {
    int64_t n = 1;
    for (int i = 0; i < rank_; ++i) n *= dims_[static_cast<size_t>(i)];
    return n;
  }
  bool operator==(const Shape& o) const {
    if (rank_ != o.rank_) return false;
    for (int i = 0; i < rank_; ++i)
      if (dims_[static_cast<size_t>(i)] != o.dims_[static_cast<size_t>(i)]) return false;
    return true;
  }
  bool operator!=(const Shape& o) const { return !(*this == o); }

  std::string str() const {
    std::ostringstream os;
    os << '[';
    for (int i = 0; i < rank_; ++i) os << (i ? "," : "") << dims_[static_cast<size_t>(i)];
    os << ']';
    return os.str();
  }

  static constexpr size_t kMaxRank = 5;

 private:
  void push(int64_t d) {
    if (d <= 0) throw UsageError("Shape: nonpositive extent");
    dims_[static_cast<size_t>(rank_++)] = d;
  }
  std::array<int64_t, kMaxRank> dims_{};
  int rank_ = 0;
};

// Deterministic RNG. mt19937_64 has a standard-specified sequence; the
// distribution helpers below avoid std::*_distribution, whose output is
// implementation-defined, so streams are reproducible across platforms.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [lo, hi], inclusive
  int64_t uniform_int(int64_t lo, int64_t hi) {
    if (hi < lo) throw UsageError("Rng::uniform_int: empty range");
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    uint64_t v = static_cast<uint64_t>(uniform() * static_cast<double>(span));
    if (v >= span) v = span - 1;
    return lo + static_cast<int64_t>(v);
  }

  // Box-Muller; marsaglia-free so the stream stays a fixed 2 draws per pair
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  std::string state() const {
    std::ostringstream os;
    os << eng_ << ' ' << (have_spare_ ? 1 : 0) << ' ' << spare_;
    return os.str();
  }
  void restore(const std::string& s) {
    std::istringstream is(s);
    int flag = 0;
    is >> eng_ >> flag >> spare_;
    if (!is) throw FormatError("Rng::restore: bad state string");
    have_spare_ = flag != 0;
  }

 private:
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// splitmix64-style mix, used to derive independent streams from one seed
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}
inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c) {
  return mix_seed(mix_seed(a, b), c);
}

}  // namespace stsep
