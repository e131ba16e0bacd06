// Compensator tests: the piecewise gamma -> beta schedule, its presets,
// monotonicity, boundary behavior, and the zero-strength identity.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "rcu/compensator.hpp"
#include "rcu/lora.hpp"
#include "rcu/matrix.hpp"
#include "rcu/toymodel.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

using rcu::Mat;
using rcu::Rng;
namespace comp = rcu::compensator;
namespace toy = rcu::toy;
namespace lora = rcu::lora;

TEST_CASE("schedule hits the pinned reference values exactly") {
  const auto qa = comp::qa_preset();
  const auto gen = comp::gen_preset();

  // Below or at the lower threshold: exactly zero.
  CHECK(comp::salience_weight(0.0, qa) == 0.0);
  CHECK(comp::salience_weight(1e-80, qa) == 0.0);
  CHECK(comp::salience_weight(0.0, gen) == 0.0);
  CHECK(comp::salience_weight(0.2, gen) == 0.0);

  // Plateau region of the qa schedule.
  CHECK(comp::salience_weight(0.5, qa) == 0.45);
  CHECK(comp::salience_weight(1.0, qa) == 0.45);

  // Log-domain mid-segment: offset + (log10(g) + shift) / scale.
  const double expected_mid = 0.35 + (std::log10(1e-40) + 80.0) / 790.0;
  CHECK(comp::salience_weight(1e-40, qa) ==
        doctest::Approx(expected_mid).epsilon(1e-12));
  CHECK(expected_mid == doctest::Approx(0.40063).epsilon(1e-4));

  // Affine schedule reaches its maximum at gamma = 1.
  CHECK(comp::salience_weight(1.0, gen) ==
        doctest::Approx(0.6).epsilon(1e-12));
}

TEST_CASE("schedule is continuous at the plateau threshold") {
  const auto qa = comp::qa_preset();
  const double at_g2 = comp::salience_weight(qa.gamma2, qa);
  const double above = comp::salience_weight(std::nextafter(qa.gamma2, 1.0), qa);
  CHECK(at_g2 == doctest::Approx(qa.beta_plateau).epsilon(1e-12));
  CHECK(above == qa.beta_plateau);
}

TEST_CASE("schedule is monotone non-decreasing on a dense grid") {
  for (const auto& cfg : {comp::qa_preset(), comp::gen_preset()}) {
    double prev = -1.0;
    const int n = 10000;
    for (int i = 0; i <= n; ++i) {
      const double gamma = static_cast<double>(i) / n;
      const double beta = comp::salience_weight(gamma, cfg);
      CHECK(beta >= prev);
      CHECK(beta >= 0.0);
      prev = beta;
    }
  }
  // The log-domain mid-segment spans tiny gammas; check monotone in log
  // space as well.
  const auto qa = comp::qa_preset();
  double prev = -1.0;
  for (double e = -82.0; e <= 0.0; e += 0.25) {
    const double beta = comp::salience_weight(std::pow(10.0, e), qa);
    CHECK(beta >= prev);
    prev = beta;
  }
}

TEST_CASE("schedule rejects out-of-domain scores") {
  const auto qa = comp::qa_preset();
  CHECK_THROWS_AS(comp::salience_weight(-0.01, qa), std::domain_error);
  CHECK_THROWS_AS(comp::salience_weight(1.01, qa), std::domain_error);
  CHECK_THROWS_AS(
      comp::salience_weight(std::numeric_limits<double>::quiet_NaN(), qa),
      std::invalid_argument);
  CHECK_THROWS_AS(
      comp::salience_weight(std::numeric_limits<double>::infinity(), qa),
      std::invalid_argument);
}

TEST_CASE("preset parsing and validation") {
  CHECK(comp::parse_preset("qa").gamma1 == 1e-80);
  CHECK(comp::parse_preset("gen").gamma1 == 0.2);
  CHECK_THROWS_AS(comp::parse_preset("nope"), std::invalid_argument);

  CHECK_NOTHROW(comp::validate(comp::qa_preset()));
  CHECK_NOTHROW(comp::validate(comp::gen_preset()));

  auto bad = comp::qa_preset();
  bad.gamma1 = 0.5;  // above gamma2
  CHECK_THROWS_AS(comp::validate(bad), std::invalid_argument);

  auto decreasing = comp::qa_preset();
  decreasing.log_scale = -790.0;  // mid-segment would decrease
  CHECK_THROWS_AS(comp::validate(decreasing), std::invalid_argument);

  auto negative = comp::gen_preset();
  negative.gain = -1.0;
  CHECK_THROWS_AS(comp::validate(negative), std::invalid_argument);
}

TEST_CASE("zero salience reproduces the base model bit for bit") {
  Rng rng(300);
  toy::ModelConfig mc;
  mc.vocab_size = 12;
  mc.embed_dim = 6;
  mc.num_blocks = 1;
  mc.num_classes = 3;
  const auto m = toy::make_model(mc, rng);

  std::vector<lora::LoraPair> pairs;
  for (const auto& id : m.adapted_layer_ids()) {
    auto p = lora::make_pair(mc.embed_dim, 2, id, rng, 0.2);
    p.b = rng.gaussian(mc.embed_dim, 2, 0.2);
    pairs.push_back(std::move(p));
  }
  std::vector<toy::TokenSeq> inputs;
  for (int i = 0; i < 8; ++i) {
    toy::TokenSeq s;
    for (int j = 0; j < 5; ++j) {
      s.push_back(static_cast<int>(rng.uniform_int(0, mc.vocab_size - 1)));
    }
    inputs.push_back(std::move(s));
  }

  const auto qa = comp::qa_preset();
  const Mat base = toy::forward_logprobs(m, {}, 1.0, inputs);
  const Mat gated = comp::apply(m, pairs, 0.0, qa, inputs);
  CHECK((base - gated).cwiseAbs().maxCoeff() == 0.0);

  // Above the threshold the adapters engage.
  const Mat engaged = comp::apply(m, pairs, 0.9, qa, inputs);
  CHECK((base - engaged).cwiseAbs().maxCoeff() > 0.0);
}
