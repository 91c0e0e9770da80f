#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace poisonlab {

// Counter-based splittable RNG. Streams are keyed by (seed, tag, ...) so the
// value sequence of one stream is independent of how many draws other streams
// made, which keeps parallel trial execution order from changing results.
class SplitRng {
 public:
  explicit SplitRng(uint64_t key) : key_(key), counter_(0) {}

  // Derives an independent child stream from a string tag.
  SplitRng derive(std::string_view tag) const {
    uint64_t h = key_;
    for (char c : tag) h = mix(h ^ static_cast<uint64_t>(static_cast<unsigned char>(c)));
    return SplitRng(mix(h ^ 0x9e3779b97f4a7c15ull));
  }
  SplitRng derive(uint64_t index) const { return SplitRng(mix(key_ ^ mix(index + 0x632be59bd9b4e019ull))); }

  uint64_t next_u64() { return mix(key_ + 0x9e3779b97f4a7c15ull * ++counter_); }

  // Uniform in [0,1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  int64_t uniform_int(int64_t n) { return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n)); }

  bool bernoulli(double p) { return uniform() < p; }

  double normal() {
    // Box-Muller; one value per call keeps the stream stateless across uses.
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  std::vector<int64_t> permutation(int64_t n) {
    std::vector<int64_t> p(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) p[static_cast<size_t>(i)] = i;
    for (int64_t i = n - 1; i > 0; --i) std::swap(p[static_cast<size_t>(i)], p[static_cast<size_t>(uniform_int(i + 1))]);
    return p;
  }

  uint64_t key() const { return key_; }

 private:
  static uint64_t mix(uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  uint64_t key_;
  uint64_t counter_;
};

}  // namespace poisonlab
