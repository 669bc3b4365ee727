#include "iresnet/rng.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace iresnet {
namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// FNV-1a; std::hash is not stable across implementations.
std::uint64_t label_hash(std::string_view label) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char ch : label) {
    h ^= ch;
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace

Rng::Rng(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

Rng Rng::derive(std::string_view label) const {
  return Rng(splitmix64(seed_ ^ label_hash(label)));
}

Rng Rng::derive(std::uint64_t offset) const {
  return Rng(splitmix64(seed_ + 0xD1B54A32D192ED03ULL * (offset + 1)));
}

double Rng::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t Rng::below(std::uint64_t n) {
  return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_);
}

Matrix Rng::normal_matrix(Index rows, Index cols) {
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = normal();
  return m;
}

Matrix Rng::rademacher_matrix(Index rows, Index cols) {
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = (engine_() >> 63) ? 1.0 : -1.0;
  return m;
}

Vector Rng::unit_vector(Index dim) {
  Vector v(dim);
  double n = 0.0;
  while (n < 1e-12) {
    for (Index i = 0; i < dim; ++i) v(i) = normal();
    n = v.norm();
  }
  return v / n;
}

std::string Rng::state() const {
  std::ostringstream os;
  os << seed_ << ' ' << engine_;
  return os.str();
}

void Rng::restore(const std::string& state) {
  std::istringstream is(state);
  is >> seed_ >> engine_;
  if (!is) throw IoError("malformed rng state");
}

}  // namespace iresnet
