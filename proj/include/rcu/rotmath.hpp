#pragma once

// Numerical core for skew-symmetric generators and the rotations they
// generate.
//
// A real square matrix C with C^T = -C generates a rotation R = exp(C).
// Such a C decomposes into a set of mutually orthogonal planar generators:
//
//   C = sum_j theta_j * (u_j v_j^T - v_j u_j^T),   theta_j > 0,
//
// where {u_j, v_j} are orthonormal and each (u_j, v_j) pair spans an
// invariant plane rotated by angle theta_j; the orthogonal complement of all
// planes is fixed pointwise. rotation_spectrum() recovers the angles and
// planes; the angle extraction stays on the principal branch, so inputs
// must satisfy max_j theta_j < pi.
//
// Scaling relation used by the self-check routines: the planes of k*C are
// those of C and its angles are |k| * theta_j, hence exp(k*C) rotates the
// same planes by scaled angles. Commuting generators with orthogonal planes
// compose additively: exp(C) * exp(C') = exp(C + C').

#include "rcu/matrix.hpp"

#include <map>
#include <string>
#include <vector>

namespace rcu::rotmath {

// ||M + M^T||_F^2 — the quantity driven to zero to keep an update inside the
// space of skew-symmetric generators. Accepts any square matrix.
double skew_residual(const Mat& m);

// Matrix exponential by scaling-and-squaring with a truncated Taylor series.
// The series at the scaled matrix is extended until the next term's norm
// falls below tol * 2^-squarings; throws std::runtime_error if the term
// budget is exhausted before that happens.
Mat mat_exp(const Mat& c, double tol = 1e-13);

// ||exp(C) - (I + C)||_F for a skew-symmetric C. For small ||C|| this decays
// quadratically (leading error term C^2/2), which is what makes I + BA a
// usable surrogate for exp(BA) at small angles.
double small_angle_error(const Mat& c);

struct RotationPlane {
  // Orthonormal pair spanning an invariant plane: C v = theta u,
  // C u = -theta v.
  Vec u;
  Vec v;
};

struct RotationSpectrum {
  std::vector<double> angles;         // descending, all > zero threshold
  std::vector<RotationPlane> planes;  // parallel to `angles`
  int fixed_dim = 0;                  // dimension of the pointwise-fixed space
};

// Recovers rotation angles and invariant planes of a skew-symmetric C via a
// symmetric eigendecomposition of -C^2 (eigenvalues theta^2, eigenspaces the
// invariant planes). Angles at or below max(zero_tol, noise floor of the
// eigendecomposition) are treated as fixed space rather than rotations.
// Throws std::invalid_argument for non-skew input,
// std::domain_error if an angle reaches the principal-branch limit pi, and
// std::runtime_error if the recovered planes fail to reconstruct C to within
// a 1e-8 relative Frobenius tolerance.
RotationSpectrum rotation_spectrum(const Mat& c, double zero_tol = 1e-12);

// Rebuilds sum_j theta_j (u_j v_j^T - v_j u_j^T); used for the internal
// reconstruction check and exposed for tests.
Mat spectrum_to_generator(const RotationSpectrum& s, Eigen::Index n);

// Positive rotation angles of an orthogonal matrix R, extracted as the
// phases of its complex unit-circle eigenvalues (each angle appears once per
// conjugate pair). Sorted descending. This is an independent route to the
// same angles that rotation_spectrum() finds on the generator side, which is
// what makes it useful as a cross-check.
std::vector<double> rotation_angles_of(const Mat& r, double zero_tol = 1e-9);

struct VerificationReport {
  std::string name;
  bool passed = false;
  double max_error = 0.0;
  std::map<std::string, double> metrics;
  std::string note;
};

// Checks the scaling law on a concrete generator: for each k in k_values,
// the angle multiset of k*C — measured both on the generator (via
// rotation_spectrum) and on exp(k*C) (via eigenvalue phases) — must equal
// |k| * angles(C) within tol. Requires |k| * max_angle(C) < pi for every k;
// violations throw std::domain_error.
VerificationReport verify_scaling_law(const Mat& c,
                                      const std::vector<double>& k_values,
                                      double tol = 1e-8);

// Checks additive composition for generators with mutually orthogonal
// planes: validates C*C' = C'*C = 0 and plane orthogonality, then measures
// ||exp(C)exp(C') - exp(C + C')||_F.
VerificationReport verify_orthogonal_composition(const Mat& c, const Mat& cp,
                                                 double tol = 1e-10);

}  // namespace rcu::rotmath
