#pragma once

#include <cstdint>
#include <string_view>

namespace layercake {

// Deterministic splittable random stream. One root seed fans out into
// independent child streams via derive(); a stream's children depend only on
// its identity seed, never on how many numbers were already drawn from it.
// All distributions are implemented here so results are identical across
// platforms and standard-library versions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();

  // Uniform on [0,1).
  double uniform();
  // Uniform on [lo,hi).
  double uniform(double lo, double hi);
  // Standard normal via Box-Muller (second value cached).
  double normal();
  // Uniform integer on [lo,hi] inclusive.
  int uniform_int(int lo, int hi);

  // Child stream keyed by a label.
  Rng derive(std::string_view tag) const;
  // Child stream keyed by a counter (loop indices, shard ids, ...).
  Rng derive(std::uint64_t index) const;

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::uint64_t state_;
  bool has_cached_normal_ = false;
  double cached_normal_ = 0.0;
};

}  // namespace layercake
