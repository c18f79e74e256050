#pragma once

// Deterministic, platform-independent randomness.
//
// Every stochastic decision in the framework draws from a Stream derived
// from (master seed, purpose tag, indices...). Streams are positional:
// the same key always yields the same draws no matter in which order the
// surrounding code runs. This is what makes concurrent fan-out and the
// multiple training code paths bit-reproducible.

#include <cstdint>
#include <numeric>
#include <vector>

namespace dln::rng {

/// splitmix64 finalizer. Good avalanche, trivial to reimplement elsewhere.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Folds one value into a running seed (order-sensitive).
constexpr std::uint64_t combine(std::uint64_t h, std::uint64_t v) noexcept {
  return mix64(h ^ (v + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2)));
}

/// Derives a child seed from a master seed and any number of index tags.
template <typename... Tags>
constexpr std::uint64_t derive(std::uint64_t master, Tags... tags) noexcept {
  std::uint64_t h = mix64(master + 0x9E3779B97F4A7C15ULL);
  ((h = combine(h, static_cast<std::uint64_t>(tags))), ...);
  return h;
}

/// Purpose tags for derived streams. Values are part of the reproducibility
/// contract: changing them changes every seeded run.
enum class Tag : std::uint64_t {
  minibatch_shuffle = 1,
  held_out_split = 2,
  proposal_message = 3,
  proposal_subset = 4,
  proposal_sample = 5,
  posterior_component = 6,
  posterior_sample = 7,
  posterior_edit_message = 8,
  data_shuffle = 9,
  fuzz = 10,
};

constexpr std::uint64_t tag(Tag t) noexcept {
  return static_cast<std::uint64_t>(t);
}

/// Small counter-based PRNG (splitmix64 sequence). Value type, cheap to
/// copy; never shared across threads by design.
class Stream {
 public:
  explicit constexpr Stream(std::uint64_t seed) noexcept : state_(seed) {}

  constexpr std::uint64_t next_u64() noexcept {
    state_ += 0x9E3779B97F4A7C15ULL;
    return mix64(state_);
  }

  /// Uniform double in [0, 1).
  double next_double() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t next_below(std::uint64_t n) noexcept {
    // Multiply-shift reduction; bias is O(n / 2^64), irrelevant here.
    using u128 = unsigned __int128;
    return static_cast<std::uint64_t>(
        (static_cast<u128>(next_u64()) * static_cast<u128>(n)) >> 64);
  }

  /// In-place Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) noexcept {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  /// k distinct indices drawn from [0, n), in draw order.
  std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (k > n) k = n;
    for (std::size_t i = 0; i < k; ++i) {
      std::size_t j = i + static_cast<std::size_t>(next_below(n - i));
      std::swap(idx[i], idx[j]);
    }
    idx.resize(k);
    return idx;
  }

  /// Index drawn from an unnormalized weight vector (CDF scan).
  std::size_t next_categorical(const std::vector<double>& weights) noexcept {
    double total = 0.0;
    for (double w : weights) total += w;
    double u = next_double() * total;
    double acc = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      acc += weights[i];
      if (u < acc) return i;
    }
    return weights.empty() ? 0 : weights.size() - 1;
  }

 private:
  std::uint64_t state_;
};

}  // namespace dln::rng
