#pragma once

#include <cstdint>
#include <memory>
#include <mutex>
#include <vector>

namespace poisonlab {

// Sparse linear rearrangement out[o] += coeff * in[i], optionally repeated as
// identical blocks (one block per image in a batch). Covers im2col, pooling,
// channel permutations, bias broadcast, zero-padded translation and flips.
// Its adjoint is the transposed map, which makes every use twice
// differentiable for free.
struct LinMap {
  struct Entry {
    int32_t out;
    int32_t in;
    float coeff;
  };

  int64_t in_block = 0;   // input stride per repeat (0 = reuse same input)
  int64_t out_block = 0;  // output stride per repeat (0 = accumulate)
  std::vector<Entry> entries;

  LinMap() = default;
  LinMap(int64_t ib, int64_t ob) : in_block(ib), out_block(ob) {}

  void add(int64_t out, int64_t in, float coeff = 1.0f) {
    entries.push_back({static_cast<int32_t>(out), static_cast<int32_t>(in), coeff});
  }

  // Adjoint map, built lazily and cached.
  std::shared_ptr<const LinMap> transposed() const {
    std::lock_guard<std::mutex> lock(mu_);
    if (!transposed_) {
      auto t = std::make_shared<LinMap>(out_block, in_block);
      t->entries.reserve(entries.size());
      for (const Entry& e : entries) t->entries.push_back({e.in, e.out, e.coeff});
      transposed_ = t;
    }
    return transposed_;
  }

  template <class S>
  void apply(const S* in, S* out, int64_t repeats) const {
    for (int64_t r = 0; r < repeats; ++r) {
      const S* src = in + r * in_block;
      S* dst = out + r * out_block;
      for (const Entry& e : entries) dst[e.out] += static_cast<S>(e.coeff) * src[e.in];
    }
  }

 private:
  mutable std::mutex mu_;
  mutable std::shared_ptr<const LinMap> transposed_;
};

using LinMapPtr = std::shared_ptr<const LinMap>;

}  // namespace poisonlab
