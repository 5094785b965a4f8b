#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace uniddg {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Deterministic seeded stream. Sub-streams are derived by hashing the
// parent seed with a tag, so parallel consumers (per-item augmentation)
// stay reproducible regardless of scheduling.
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed = 0) : seed_(seed), engine_(splitmix64(seed)) {}

  RandomStream derive(std::uint64_t tag) const {
    return RandomStream(splitmix64(seed_ ^ splitmix64(tag + 0x632be59bd9b4e019ULL)));
  }
  RandomStream derive(const std::string& tag) const {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : tag) h = (h ^ c) * 1099511628211ULL;
    return derive(h);
  }

  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  double normal() { return normal_(engine_); }
  // Uniform integer in [0, n).
  std::int64_t index(std::int64_t n) {
    return std::uniform_int_distribution<std::int64_t>(0, n - 1)(engine_);
  }
  bool coin(double p = 0.5) { return uniform(0.0, 1.0) < p; }

  std::mt19937_64& engine() { return engine_; }

  std::string state() const {
    std::ostringstream os;
    os << engine_ << '|' << normal_;
    return os.str();
  }
  void restore(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
    char sep = 0;
    is >> sep >> normal_;
  }

 private:
  std::uint64_t seed_ = 0;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_;
};

}  // namespace uniddg
