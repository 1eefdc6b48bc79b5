#include "mars/random.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace mars {

namespace {
constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;
}

RandomStream::RandomStream(std::uint64_t seed, std::uint64_t stream)
    : state_(RandomStream(seed).next_u64() ^ (0xD1B54A32D192ED03ULL * (stream + 1))) {}

std::uint64_t RandomStream::next_u64() {
  state_ += kGamma;
  std::uint64_t z = state_;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double RandomStream::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RandomStream::uniform(double lo, double hi) {
  return lo + (hi - lo) * uniform();
}

double RandomStream::normal() {
  // 1 - u keeps the log argument strictly positive.
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double RandomStream::normal(double mean, double stddev) {
  return mean + stddev * normal();
}

double RandomStream::truncated_normal(double stddev) {
  double z = normal();
  while (std::abs(z) > 2.0) z = normal();
  return stddev * z;
}

int RandomStream::uniform_int(int n) {
  if (n <= 0) throw std::invalid_argument("uniform_int: n must be positive");
  // Rejection sampling to avoid modulo bias.
  const std::uint64_t un = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
  std::uint64_t v = next_u64();
  while (v >= limit) v = next_u64();
  return static_cast<int>(v % un);
}

std::vector<int> RandomStream::choose(int n, int k) {
  if (k < 0 || k > n) throw std::invalid_argument("choose: need 0 <= k <= n");
  std::vector<int> idx(n);
  for (int i = 0; i < n; ++i) idx[i] = i;
  for (int i = 0; i < k; ++i) {
    const int j = i + uniform_int(n - i);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  return idx;
}

void RandomStream::shuffle(std::vector<int>& v) {
  const int n = static_cast<int>(v.size());
  for (int i = n - 1; i > 0; --i) {
    const int j = uniform_int(i + 1);
    std::swap(v[i], v[j]);
  }
}

}  // namespace mars
