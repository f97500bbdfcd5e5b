#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <vector>

namespace ff {

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept {
  return (x << k) | (x >> (64 - k));
}

}  // namespace detail

// Deterministic splittable random stream.
//
// A stream is identified by (root_seed, path). The generator key is a hash
// chain over the path, so deriving a child is O(1) and does not depend on how
// many draws the parent has made. Draws come from xoshiro256** seeded from
// the key. Satisfies UniformRandomBitGenerator, so std distributions work.
class RngStream {
 public:
  using result_type = std::uint64_t;

  explicit RngStream(std::uint64_t root_seed = 0) : root_seed_(root_seed) {
    key_ = detail::splitmix64(root_seed ^ 0x6a09e667f3bcc909ULL);
    reseed();
  }

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() noexcept {
    const std::uint64_t out = detail::rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = detail::rotl(s_[3], 45);
    return out;
  }

  /// Child stream whose path is this path extended by `index`. The parent is
  /// not modified.
  [[nodiscard]] RngStream derive(std::uint32_t index) const {
    RngStream child = *this;
    child.path_.push_back(index);
    child.key_ = detail::splitmix64(key_ ^ detail::splitmix64(0x243f6a8885a308d3ULL + index));
    child.reseed();
    child.normal_ = std::normal_distribution<double>{};
    return child;
  }

  std::uint64_t root_seed() const noexcept { return root_seed_; }
  std::span<const std::uint32_t> path() const noexcept { return path_; }

  // Uniform on (0,1); never returns exactly 0 or 1.
  double uniform() noexcept {
    return (static_cast<double>((*this)() >> 11) + 0.5) * 0x1.0p-53;
  }

  double exponential(double rate) noexcept { return -std::log(uniform()) / rate; }

  double normal() { return normal_(*this); }

  std::int64_t poisson(double mean) {
    if (!(mean > 0.0)) return 0;
    return poisson_(*this, std::poisson_distribution<std::int64_t>::param_type(mean));
  }

  std::int64_t binomial(std::int64_t n, double p) {
    if (n <= 0 || !(p > 0.0)) return 0;
    if (p >= 1.0) return n;
    return binomial_(*this, std::binomial_distribution<std::int64_t>::param_type(n, p));
  }

  // Uniform integer on [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(*this);
  }

  bool bernoulli(double p) noexcept { return uniform() < p; }

 private:
  void reseed() noexcept {
    std::uint64_t x = key_;
    for (auto& s : s_) {
      x = detail::splitmix64(x);
      s = x;
    }
  }

  std::uint64_t root_seed_ = 0;
  std::vector<std::uint32_t> path_;
  std::uint64_t key_ = 0;
  std::array<std::uint64_t, 4> s_{};
  std::normal_distribution<double> normal_{};
  std::poisson_distribution<std::int64_t> poisson_{};
  std::binomial_distribution<std::int64_t> binomial_{};
};

inline RngStream derive_substream(const RngStream& parent, std::uint32_t index) {
  return parent.derive(index);
}

}  // namespace ff
