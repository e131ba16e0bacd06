#include "rcu/compensator.hpp"

#include <cmath>
#include <stdexcept>

namespace rcu::compensator {

CompensatorConfig qa_preset() {
  CompensatorConfig cfg;
  cfg.gamma1 = 1e-80;
  cfg.gamma2 = 0.1;
  cfg.beta_plateau = 0.45;
  cfg.kind = MappingKind::log_domain;
  cfg.offset = 0.35;
  cfg.log_shift = 80.0;
  cfg.log_scale = 790.0;
  return cfg;
}

CompensatorConfig gen_preset() {
  CompensatorConfig cfg;
  cfg.gamma1 = 0.2;
  cfg.gamma2 = 1.0;
  cfg.beta_plateau = 0.45;
  cfg.kind = MappingKind::affine;
  cfg.offset = 0.35;
  cfg.x0 = 0.2;
  cfg.x_span = 0.8;
  cfg.gain = 0.25;
  return cfg;
}

CompensatorConfig parse_preset(const std::string& name) {
  if (name == "qa") return qa_preset();
  if (name == "gen") return gen_preset();
  throw std::invalid_argument("unknown compensator preset: " + name);
}

namespace {

double mid_segment(double gamma, const CompensatorConfig& cfg) {
  if (cfg.kind == MappingKind::log_domain) {
    if (gamma <= 0.0) {
      throw std::domain_error(
          "salience_weight: log-domain mapping needs gamma > 0");
    }
    return cfg.offset + (std::log10(gamma) + cfg.log_shift) / cfg.log_scale;
  }
  return cfg.offset + ((gamma - cfg.x0) / cfg.x_span) * cfg.gain;
}

}  // namespace

void validate(const CompensatorConfig& cfg) {
  if (!(cfg.gamma1 >= 0.0) || !(cfg.gamma2 <= 1.0) ||
      !(cfg.gamma1 < cfg.gamma2)) {
    throw std::invalid_argument(
        "compensator: thresholds must satisfy 0 <= G1 < G2 <= 1");
  }
  if (cfg.beta_plateau < 0.0) {
    throw std::invalid_argument("compensator: negative plateau");
  }
  if (cfg.kind == MappingKind::log_domain) {
    if (cfg.log_scale <= 0.0 || cfg.gamma1 <= 0.0) {
      throw std::invalid_argument(
          "compensator: log-domain mapping needs log_scale > 0 and G1 > 0");
    }
  } else {
    if (cfg.x_span <= 0.0 || cfg.gain < 0.0) {
      throw std::invalid_argument(
          "compensator: affine mapping needs x_span > 0 and gain >= 0");
    }
  }
}

double salience_weight(double gamma, const CompensatorConfig& cfg) {
  if (!std::isfinite(gamma)) {
    throw std::invalid_argument("salience_weight: non-finite gamma");
  }
  if (gamma < 0.0 || gamma > 1.0) {
    throw std::domain_error("salience_weight: gamma outside [0, 1]");
  }
  validate(cfg);
  if (gamma <= cfg.gamma1) {
    return 0.0;
  }
  if (gamma <= cfg.gamma2) {
    return mid_segment(gamma, cfg);
  }
  return cfg.beta_plateau;
}

Mat apply(const toy::ToyAttentionModel& model,
          std::span<const lora::LoraPair> adapters, double gamma,
          const CompensatorConfig& cfg,
          std::span<const toy::TokenSeq> inputs) {
  const double beta = salience_weight(gamma, cfg);
  return toy::forward_logprobs(model, adapters, beta, inputs);
}

}  // namespace rcu::compensator
