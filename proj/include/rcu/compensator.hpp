#pragma once

// Distributional-shift compensator: maps the detector score gamma in [0,1]
// to the rotational salience weight beta through a piecewise schedule
//
//           { 0,            gamma <= G1
//   beta =  { M(gamma),     G1 < gamma <= G2
//           { plateau,      G2 < gamma <= 1
//
// with two shipped mid-segment shapes:
//   log-domain  M(g) = offset + (log10(g) + log_shift) / log_scale
//   affine      M(g) = offset + ((g - x0) / x_span) * gain
//
// The qa preset spans eighty decades of gamma (G1 = 1e-80), which is why the
// detector's calibration stage computes tail probabilities with erfc rather
// than a naive CDF.

#include "rcu/lora.hpp"
#include "rcu/matrix.hpp"
#include "rcu/toymodel.hpp"

#include <span>
#include <string>

namespace rcu::compensator {

enum class MappingKind { log_domain, affine };

struct CompensatorConfig {
  double gamma1 = 1e-80;       // lower threshold G1
  double gamma2 = 0.1;         // upper threshold G2
  double beta_plateau = 0.45;  // value on (G2, 1]
  MappingKind kind = MappingKind::log_domain;

  // shared mid-segment offset
  double offset = 0.35;
  // log-domain parameters
  double log_shift = 80.0;
  double log_scale = 790.0;
  // affine parameters
  double x0 = 0.2;
  double x_span = 0.8;
  double gain = 0.25;
};

// Named presets. qa: G1 = 1e-80, G2 = 0.1, log-domain mid-segment.
// gen: G1 = 0.2, G2 = 1, affine mid-segment (its plateau branch is empty
// since G2 = 1, so M governs the whole active range and beta can reach 0.6).
CompensatorConfig qa_preset();
CompensatorConfig gen_preset();

CompensatorConfig parse_preset(const std::string& name);  // "qa" | "gen"

// Validates threshold ordering and mid-segment monotonicity.
void validate(const CompensatorConfig& cfg);

// The piecewise mapping. Throws std::domain_error for gamma outside [0, 1]
// (upstream scores are clamped, so an out-of-range value is a logic bug)
// and std::invalid_argument for non-finite gamma.
double salience_weight(double gamma, const CompensatorConfig& cfg);

// beta = salience_weight(gamma), then a forward pass through the adapted
// model at that beta. gamma <= G1 reproduces the base model bit for bit.
Mat apply(const toy::ToyAttentionModel& model,
          std::span<const lora::LoraPair> adapters, double gamma,
          const CompensatorConfig& cfg,
          std::span<const toy::TokenSeq> inputs);

}  // namespace rcu::compensator
