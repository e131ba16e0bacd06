#pragma once

// Dense-matrix substrate, validation guards, binary/CSV container IO, and the
// deterministic RNG wrapper used across the project.
//
// Binary container format (little-endian throughout):
//   uint64  n_rows
//   uint64  n_cols
//   float64 payload, row-major, n_rows * n_cols entries
//
// CSV is provided as a human-readable debug form of the same content.

#include <Eigen/Dense>

#include <cstdint>
#include <iosfwd>
#include <random>
#include <string>
#include <vector>

namespace rcu {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// ---------------------------------------------------------------------------
// validation guards
// ---------------------------------------------------------------------------

// Throws std::invalid_argument when `m` contains NaN or Inf.
void require_finite(const Mat& m, const std::string& what);

// Throws std::invalid_argument when `m` is not square.
void require_square(const Mat& m, const std::string& what);

// Max-abs entry of (M + M^T); 0 for an exactly skew-symmetric matrix.
double skew_violation(const Mat& m);

bool is_skew(const Mat& m, double tol = 1e-10);

// Throws std::invalid_argument when `m` is not skew-symmetric within `tol`.
void require_skew(const Mat& m, double tol, const std::string& what);

// ---------------------------------------------------------------------------
// container IO
// ---------------------------------------------------------------------------

void write_matrix(std::ostream& os, const Mat& m);
Mat read_matrix(std::istream& is);

void save_matrix(const std::string& path, const Mat& m);
Mat load_matrix(const std::string& path);

void write_matrix_csv(std::ostream& os, const Mat& m);
Mat read_matrix_csv(std::istream& is);

void save_matrix_csv(const std::string& path, const Mat& m);
Mat load_matrix_csv(const std::string& path);

// ---------------------------------------------------------------------------
// deterministic RNG
// ---------------------------------------------------------------------------

// Thin wrapper around std::mt19937_64 that remembers its base seed so
// independent child streams can be derived deterministically.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  double uniform(double lo = 0.0, double hi = 1.0);
  double normal(double mean = 0.0, double stddev = 1.0);
  // Uniform integer in [lo, hi], inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);

  // Gaussian-filled matrix/vector.
  Mat gaussian(Eigen::Index rows, Eigen::Index cols, double stddev = 1.0);
  Vec gaussian_vec(Eigen::Index n, double stddev = 1.0);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(
          uniform_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Derives an independent generator from (base_seed, salt).
  Rng child(std::uint64_t salt) const;

  std::uint64_t base_seed() const { return base_seed_; }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::uint64_t base_seed_;
  std::mt19937_64 engine_;
};

// splitmix64 finalizer; used for seed derivation and checksums.
std::uint64_t mix64(std::uint64_t x);

// FNV-1a over the raw bytes of a matrix; used for weight-freeze assertions.
std::uint64_t matrix_checksum(const Mat& m);

}  // namespace rcu
