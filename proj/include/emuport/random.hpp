#pragma once

#include <cstdint>
#include <random>

#include "emuport/linalg.hpp"

namespace emuport {

using Rng = std::mt19937_64;

// splitmix64 finalizer; used to derive independent sub-stream seeds from a
// (seed, index...) tuple.
constexpr std::uint64_t mix_seed(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a,
                                    std::uint64_t b = 0) noexcept {
  return mix_seed(mix_seed(mix_seed(seed) ^ a) ^ (b + 0x632be59bd9b4e019ULL));
}

inline double standard_normal(Rng& rng) {
  return std::normal_distribution<double>{}(rng);
}

inline double uniform01(Rng& rng) {
  return std::uniform_real_distribution<double>{}(rng);
}

inline Vector standard_normal_vector(Rng& rng, Eigen::Index n) {
  std::normal_distribution<double> dist;
  Vector z(n);
  for (Eigen::Index i = 0; i < n; ++i) z(i) = dist(rng);
  return z;
}

/// Draw from N(mean, cov) with cov symmetric PSD and possibly singular; the
/// draw lives in mean + range(cov) (eigenvalues below the cutoff dropped).
inline Vector sample_gaussian(const Vector& mean, const Matrix& cov, Rng& rng,
                              double rel_tol = kEigenCutoff) {
  const SymmetricEigen eig(cov, rel_tol);
  Vector out = mean;
  std::normal_distribution<double> dist;
  for (Eigen::Index i = 0; i < eig.values.size(); ++i) {
    const double z = dist(rng);
    if (eig.values(i) > 0.0) out += std::sqrt(eig.values(i)) * z * eig.vectors.col(i);
  }
  return out;
}

}  // namespace emuport
