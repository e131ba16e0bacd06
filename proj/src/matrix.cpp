#include "rcu/matrix.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace rcu {

void require_finite(const Mat& m, const std::string& what) {
  if (!m.allFinite()) {
    throw std::invalid_argument(what + ": matrix contains NaN or Inf");
  }
}

void require_square(const Mat& m, const std::string& what) {
  if (m.rows() != m.cols()) {
    throw std::invalid_argument(what + ": expected square matrix, got " +
                                std::to_string(m.rows()) + "x" +
                                std::to_string(m.cols()));
  }
}

double skew_violation(const Mat& m) {
  if (m.rows() != m.cols()) {
    return std::numeric_limits<double>::infinity();
  }
  return (m + m.transpose()).cwiseAbs().maxCoeff();
}

bool is_skew(const Mat& m, double tol) {
  return m.rows() == m.cols() && skew_violation(m) <= tol;
}

void require_skew(const Mat& m, double tol, const std::string& what) {
  require_square(m, what);
  const double v = skew_violation(m);
  if (!(v <= tol)) {
    std::ostringstream oss;
    oss << what << ": matrix is not skew-symmetric (max |M+M^T| = " << v
        << ", tol = " << tol << ")";
    throw std::invalid_argument(oss.str());
  }
}

// ---------------------------------------------------------------------------
// container IO
// ---------------------------------------------------------------------------

namespace {

void put_u64_le(std::ostream& os, std::uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) {
    buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xffu);
  }
  os.write(reinterpret_cast<const char*>(buf), 8);
}

std::uint64_t get_u64_le(std::istream& is) {
  unsigned char buf[8];
  is.read(reinterpret_cast<char*>(buf), 8);
  if (!is) {
    throw std::runtime_error("matrix container: truncated header");
  }
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  }
  return v;
}

void put_f64_le(std::ostream& os, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  put_u64_le(os, bits);
}

double get_f64_le(std::istream& is) {
  const std::uint64_t bits = get_u64_le(is);
  double d;
  std::memcpy(&d, &bits, 8);
  return d;
}

}  // namespace

void write_matrix(std::ostream& os, const Mat& m) {
  require_finite(m, "write_matrix");
  put_u64_le(os, static_cast<std::uint64_t>(m.rows()));
  put_u64_le(os, static_cast<std::uint64_t>(m.cols()));
  if constexpr (std::endian::native == std::endian::little) {
    // Fast path: dump rows directly (Eigen default storage is column-major,
    // so stage through a row-major copy).
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm =
        m;
    os.write(reinterpret_cast<const char*>(rm.data()),
             static_cast<std::streamsize>(sizeof(double) * rm.size()));
  } else {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        put_f64_le(os, m(r, c));
      }
    }
  }
  if (!os) {
    throw std::runtime_error("write_matrix: stream write failed");
  }
}

Mat read_matrix(std::istream& is) {
  const std::uint64_t rows = get_u64_le(is);
  const std::uint64_t cols = get_u64_le(is);
  constexpr std::uint64_t kMaxEntries = (1ull << 32);
  if (rows == 0 || cols == 0 || rows * cols > kMaxEntries) {
    throw std::runtime_error("matrix container: implausible shape " +
                             std::to_string(rows) + "x" + std::to_string(cols));
  }
  Mat m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  if constexpr (std::endian::native == std::endian::little) {
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(
        static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    is.read(reinterpret_cast<char*>(rm.data()),
            static_cast<std::streamsize>(sizeof(double) * rm.size()));
    if (!is) {
      throw std::runtime_error("matrix container: truncated payload");
    }
    m = rm;
  } else {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        m(r, c) = get_f64_le(is);
      }
    }
  }
  require_finite(m, "read_matrix");
  return m;
}

void save_matrix(const std::string& path, const Mat& m) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) {
    throw std::runtime_error("save_matrix: cannot open " + path);
  }
  write_matrix(os, m);
}

Mat load_matrix(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw std::runtime_error("load_matrix: cannot open " + path);
  }
  return read_matrix(is);
}

void write_matrix_csv(std::ostream& os, const Mat& m) {
  require_finite(m, "write_matrix_csv");
  std::ostringstream oss;
  oss.precision(17);
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      if (c > 0) oss << ',';
      oss << m(r, c);
    }
    oss << '\n';
  }
  os << oss.str();
  if (!os) {
    throw std::runtime_error("write_matrix_csv: stream write failed");
  }
}

Mat read_matrix_csv(std::istream& is) {
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) {
      row.push_back(std::stod(cell));
    }
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw std::runtime_error("read_matrix_csv: ragged rows");
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) {
    throw std::runtime_error("read_matrix_csv: empty input");
  }
  Mat m(static_cast<Eigen::Index>(rows.size()),
        static_cast<Eigen::Index>(rows.front().size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      m(r, c) = rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
    }
  }
  require_finite(m, "read_matrix_csv");
  return m;
}

void save_matrix_csv(const std::string& path, const Mat& m) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) {
    throw std::runtime_error("save_matrix_csv: cannot open " + path);
  }
  write_matrix_csv(os, m);
}

Mat load_matrix_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) {
    throw std::runtime_error("load_matrix_csv: cannot open " + path);
  }
  return read_matrix_csv(is);
}

// ---------------------------------------------------------------------------
// RNG
// ---------------------------------------------------------------------------

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

Rng::Rng(std::uint64_t seed) : base_seed_(seed), engine_(mix64(seed)) {}

double Rng::uniform(double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  return d(engine_);
}

double Rng::normal(double mean, double stddev) {
  std::normal_distribution<double> d(mean, stddev);
  return d(engine_);
}

std::int64_t Rng::uniform_int(std::int64_t lo, std::int64_t hi) {
  std::uniform_int_distribution<std::int64_t> d(lo, hi);
  return d(engine_);
}

Mat Rng::gaussian(Eigen::Index rows, Eigen::Index cols, double stddev) {
  Mat m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      m(r, c) = normal(0.0, stddev);
    }
  }
  return m;
}

Vec Rng::gaussian_vec(Eigen::Index n, double stddev) {
  Vec v(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    v(i) = normal(0.0, stddev);
  }
  return v;
}

Rng Rng::child(std::uint64_t salt) const {
  return Rng(mix64(base_seed_ ^ mix64(salt)));
}

std::uint64_t matrix_checksum(const Mat& m) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto feed = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xffu;
      h *= 0x100000001b3ull;
    }
  };
  feed(static_cast<std::uint64_t>(m.rows()));
  feed(static_cast<std::uint64_t>(m.cols()));
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      std::uint64_t bits;
      const double d = m(r, c);
      std::memcpy(&bits, &d, 8);
      feed(bits);
    }
  }
  return h;
}

}  // namespace rcu
