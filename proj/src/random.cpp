#include "mcvae/random.hpp"

namespace mcvae {
namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t seed, std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return splitmix64(splitmix64(seed) ^ h);
}

Rng Rng::stream(std::uint64_t seed, std::string_view name) { return Rng(mix_seed(seed, name)); }

Rng Rng::split(std::string_view name) { return Rng(mix_seed(engine_(), name)); }

std::size_t Rng::index(std::size_t n) {
  std::uniform_int_distribution<std::size_t> d(0, n - 1);
  return d(engine_);
}

Matrix Rng::normal_matrix(Index rows, Index cols) {
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = normal();
  return m;
}

}  // namespace mcvae
