#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "mcvae/diffmath.hpp"

namespace mcvae {

// Generator state passed explicitly to every stochastic routine. Copying an
// Rng copies its full state, so a copy replays the same draws.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  // Independent stream derived from a root seed and a stream name
  // ("data", "init", "training", "eval", ...).
  static Rng stream(std::uint64_t seed, std::string_view name);
  Rng split(std::string_view name);

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  // Uniform integer in [0, n).
  std::size_t index(std::size_t n);
  Matrix normal_matrix(Index rows, Index cols);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

std::uint64_t mix_seed(std::uint64_t seed, std::string_view name);

}  // namespace mcvae
