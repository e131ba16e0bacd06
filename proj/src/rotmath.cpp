#include "rcu/rotmath.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace rcu::rotmath {

double skew_residual(const Mat& m) {
  require_square(m, "skew_residual");
  require_finite(m, "skew_residual");
  return (m + m.transpose()).squaredNorm();
}

Mat mat_exp(const Mat& c, double tol) {
  require_square(c, "mat_exp");
  require_finite(c, "mat_exp");
  const Eigen::Index n = c.rows();
  const Mat ident = Mat::Identity(n, n);
  if (c.norm() == 0.0) {
    return ident;
  }

  // Scale down until ||C/2^s|| is comfortably inside the Taylor sweet spot.
  int squarings = 0;
  double norm = c.norm();
  while (norm > 0.5 && squarings < 64) {
    norm *= 0.5;
    ++squarings;
  }
  const Mat a = c / std::ldexp(1.0, squarings);

  // Taylor series with adaptive truncation: stop once the next term can no
  // longer move the result at the target tolerance (tightened by the number
  // of squarings still to come).
  const double term_tol = tol * std::ldexp(1.0, -squarings);
  Mat result = ident;
  Mat term = ident;
  constexpr int kMaxTerms = 128;
  bool converged = false;
  for (int k = 1; k <= kMaxTerms; ++k) {
    term = (term * a) / static_cast<double>(k);
    result += term;
    if (term.norm() < term_tol) {
      converged = true;
      break;
    }
  }
  if (!converged) {
    throw std::runtime_error(
        "mat_exp: Taylor series failed to converge within the term budget");
  }

  for (int i = 0; i < squarings; ++i) {
    result = result * result;
  }
  return result;
}

double small_angle_error(const Mat& c) {
  require_skew(c, 1e-10, "small_angle_error");
  const Eigen::Index n = c.rows();
  return (mat_exp(c) - (Mat::Identity(n, n) + c)).norm();
}

Mat spectrum_to_generator(const RotationSpectrum& s, Eigen::Index n) {
  Mat c = Mat::Zero(n, n);
  for (std::size_t j = 0; j < s.angles.size(); ++j) {
    const Vec& u = s.planes[j].u;
    const Vec& v = s.planes[j].v;
    c += s.angles[j] * (u * v.transpose() - v * u.transpose());
  }
  return c;
}

RotationSpectrum rotation_spectrum(const Mat& c, double zero_tol) {
  require_skew(c, 1e-10, "rotation_spectrum");
  const Eigen::Index n = c.rows();

  // -C^2 is symmetric positive semidefinite; its positive eigenvalues are
  // theta^2 with multiplicity 2 per invariant plane, and its null space is
  // the fixed space of the rotation.
  Mat s = -(c * c);
  s = 0.5 * (s + s.transpose());
  Eigen::SelfAdjointEigenSolver<Mat> es(s);
  if (es.info() != Eigen::Success) {
    throw std::runtime_error("rotation_spectrum: eigendecomposition failed");
  }
  const Vec evals = es.eigenvalues();    // ascending
  const Mat evecs = es.eigenvectors();

  // Eigenvalues of -C^2 carry noise of order eps * ||C||^2, which the square
  // root inflates to sqrt(eps) * ||C||. Angles below that floor are fixed
  // space, not rotations, so the effective threshold scales with the matrix.
  const double max_eval = std::max(evals(n - 1), 0.0);
  const double theta_floor =
      std::max(zero_tol, 64.0 * std::sqrt(std::numeric_limits<double>::epsilon() *
                                          max_eval));

  RotationSpectrum out;
  std::vector<Vec> basis;  // accepted plane vectors, for deflation

  auto project_out = [&basis](Vec w) {
    for (const Vec& b : basis) {
      w -= b.dot(w) * b;
    }
    return w;
  };

  for (Eigen::Index i = n - 1; i >= 0; --i) {
    const double lam = std::max(evals(i), 0.0);
    const double theta = std::sqrt(lam);
    if (theta <= theta_floor) {
      break;  // ascending order: everything below is fixed space
    }
    // Deflate against planes already claimed; eigenvectors sharing an
    // eigenvalue with an accepted plane may lie entirely inside it.
    Vec v = project_out(evecs.col(i));
    const double rem = v.norm();
    if (rem < 0.5) {
      continue;  // spanned by an accepted plane for the same angle
    }
    v /= rem;
    Vec u = project_out(c * v / theta);
    const double un = u.norm();
    if (un < 0.5) {
      throw std::runtime_error(
          "rotation_spectrum: failed to complete an invariant plane");
    }
    u /= un;
    out.angles.push_back(theta);
    out.planes.push_back({u, v});
    basis.push_back(v);
    basis.push_back(u);
  }

  out.fixed_dim = static_cast<int>(n) - 2 * static_cast<int>(out.angles.size());
  if (out.fixed_dim < 0) {
    throw std::runtime_error(
        "rotation_spectrum: plane count exceeds dimension/2");
  }

  if (!out.angles.empty() &&
      out.angles.front() >= std::numbers::pi - 1e-12) {
    std::ostringstream oss;
    oss << "rotation_spectrum: angle " << out.angles.front()
        << " reaches the principal-branch limit pi";
    throw std::domain_error(oss.str());
  }

  // The recovered planes must rebuild the generator.
  const Mat rebuilt = spectrum_to_generator(out, n);
  const double cn = c.norm();
  const double rel = (rebuilt - c).norm() / std::max(cn, 1e-30);
  if (rel > 1e-8) {
    std::ostringstream oss;
    oss << "rotation_spectrum: reconstruction residual " << rel
        << " exceeds 1e-8";
    throw std::runtime_error(oss.str());
  }

  return out;
}

std::vector<double> rotation_angles_of(const Mat& r, double zero_tol) {
  require_square(r, "rotation_angles_of");
  require_finite(r, "rotation_angles_of");
  Eigen::EigenSolver<Mat> es(r);
  if (es.info() != Eigen::Success) {
    throw std::runtime_error("rotation_angles_of: eigendecomposition failed");
  }
  // Unit-circle eigenvalues come in conjugate pairs e^{+-i theta}; collect
  // the positive phases, which appear once per pair.
  std::vector<double> phases;
  for (Eigen::Index i = 0; i < r.rows(); ++i) {
    const std::complex<double> ev = es.eigenvalues()(i);
    const double phase = std::arg(ev);
    if (phase > zero_tol) {
      phases.push_back(phase);
    }
  }
  std::sort(phases.begin(), phases.end(), std::greater<double>());
  return phases;
}

namespace {

// Compares two descending angle multisets; returns max elementwise gap or
// +inf on a size mismatch.
double angle_multiset_gap(const std::vector<double>& a,
                          const std::vector<double>& b) {
  if (a.size() != b.size()) {
    return std::numeric_limits<double>::infinity();
  }
  double gap = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    gap = std::max(gap, std::abs(a[i] - b[i]));
  }
  return gap;
}

}  // namespace

VerificationReport verify_scaling_law(const Mat& c,
                                      const std::vector<double>& k_values,
                                      double tol) {
  VerificationReport rep;
  rep.name = "scaling-law";
  require_skew(c, 1e-10, "verify_scaling_law");

  const RotationSpectrum base = rotation_spectrum(c);
  const double theta_max = base.angles.empty() ? 0.0 : base.angles.front();
  for (double k : k_values) {
    if (std::abs(k) * theta_max >= std::numbers::pi) {
      std::ostringstream oss;
      oss << "verify_scaling_law: k = " << k
          << " pushes the largest angle onto or past the principal-branch "
             "limit pi";
      throw std::domain_error(oss.str());
    }
  }

  double worst = 0.0;
  for (double k : k_values) {
    std::vector<double> expected;
    for (double th : base.angles) {
      const double scaled = std::abs(k) * th;
      if (scaled > 1e-12) expected.push_back(scaled);
    }
    std::sort(expected.begin(), expected.end(), std::greater<double>());

    // Route 1: generator-side angles of the scaled generator.
    const RotationSpectrum scaled_spec = rotation_spectrum(k * c);
    worst = std::max(worst, angle_multiset_gap(expected, scaled_spec.angles));

    // Route 2: eigenvalue phases of the rotation exp(k C). Pair-collapse:
    // each plane contributes the phase twice (conjugate pair counted via
    // positive phase per complex pair — for an n x n real matrix, phases
    // already appear once per pair).
    const std::vector<double> phases = rotation_angles_of(mat_exp(k * c));
    worst = std::max(worst, angle_multiset_gap(expected, phases));
  }

  rep.max_error = worst;
  rep.passed = worst <= tol;
  rep.metrics["max_angle_error"] = worst;
  rep.metrics["num_scales"] = static_cast<double>(k_values.size());
  rep.metrics["max_base_angle"] = theta_max;
  if (!rep.passed) {
    rep.note = "angle multisets diverged beyond tolerance";
  }
  return rep;
}

VerificationReport verify_orthogonal_composition(const Mat& c, const Mat& cp,
                                                 double tol) {
  VerificationReport rep;
  rep.name = "orthogonal-composition";
  require_skew(c, 1e-10, "verify_orthogonal_composition");
  require_skew(cp, 1e-10, "verify_orthogonal_composition");
  if (c.rows() != cp.rows()) {
    throw std::invalid_argument(
        "verify_orthogonal_composition: dimension mismatch");
  }

  const double prod1 = (c * cp).norm();
  const double prod2 = (cp * c).norm();
  rep.metrics["product_norm_ccp"] = prod1;
  rep.metrics["product_norm_cpc"] = prod2;

  const RotationSpectrum s1 = rotation_spectrum(c);
  const RotationSpectrum s2 = rotation_spectrum(cp);
  double cross = 0.0;
  for (const auto& p : s1.planes) {
    for (const auto& q : s2.planes) {
      cross = std::max({cross, std::abs(p.u.dot(q.u)), std::abs(p.u.dot(q.v)),
                        std::abs(p.v.dot(q.u)), std::abs(p.v.dot(q.v))});
    }
  }
  rep.metrics["max_plane_overlap"] = cross;

  const bool generators_orthogonal =
      prod1 <= tol && prod2 <= tol && cross <= tol;
  rep.metrics["generators_orthogonal"] = generators_orthogonal ? 1.0 : 0.0;

  const double additivity =
      (mat_exp(c) * mat_exp(cp) - mat_exp(c + cp)).norm();
  rep.metrics["additivity_error"] = additivity;
  rep.max_error = additivity;

  rep.passed = generators_orthogonal && additivity <= 100.0 * tol;
  if (!generators_orthogonal) {
    rep.note = "inputs do not act on mutually orthogonal planes";
  } else if (!rep.passed) {
    rep.note = "exp(C)exp(C') diverged from exp(C + C')";
  }
  return rep;
}

}  // namespace rcu::rotmath
