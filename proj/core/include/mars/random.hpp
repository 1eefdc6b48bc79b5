#pragma once

#include <cstdint>
#include <vector>

namespace mars {

// Deterministic counter-based random stream (splitmix64). Every stochastic
// operation in the library takes an explicit stream, so a run is fully
// reproducible from its seed and independent streams can be handed to
// concurrent workers.
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed) : state_(seed) {}

  // Substream `stream` of a root seed. Distinct stream ids give
  // statistically independent sequences.
  RandomStream(std::uint64_t seed, std::uint64_t stream);

  // Child stream; consumes one draw from this stream.
  RandomStream fork() { return RandomStream(next_u64()); }

  std::uint64_t next_u64();

  double uniform();  // [0, 1)
  double uniform(double lo, double hi);
  double normal();   // standard normal, Box-Muller
  double normal(double mean, double stddev);
  double truncated_normal(double stddev);  // resampled beyond 2 stddev
  int uniform_int(int n);                  // {0, ..., n-1}

  // k distinct indices drawn without replacement from {0, ..., n-1}.
  std::vector<int> choose(int n, int k);

  // In-place Fisher-Yates shuffle of an index vector.
  void shuffle(std::vector<int>& v);

 private:
  std::uint64_t state_;
};

}  // namespace mars
