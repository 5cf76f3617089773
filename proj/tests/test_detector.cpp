#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cfdr/attacks.hpp"
#include "cfdr/detector.hpp"
#include "fixture.hpp"

using namespace cfdr;

TEST_CASE("build_reference: single sample has zero sigma") {
  const auto& fx = fixture::trained();
  ReferenceProfile p = build_reference(fx.model, fx.test.without_labels(), 1, fx.det, 9);
  CHECK(p.sigma_c == 0.0);
  CHECK(p.n_samples == 1);
}

TEST_CASE("build_reference is deterministic per seed") {
  const auto& fx = fixture::trained();
  ReferenceProfile a = build_reference(fx.model, fx.test.without_labels(), 10, fx.det, 5);
  ReferenceProfile b = build_reference(fx.model, fx.test.without_labels(), 10, fx.det, 5);
  CHECK(a.to_json() == b.to_json());
  ReferenceProfile c = build_reference(fx.model, fx.test.without_labels(), 10, fx.det, 6);
  CHECK(a.l_c != c.l_c);
}

TEST_CASE("reference profile on the trained model has tight spread") {
  const auto& fx = fixture::trained();
  CHECK(fx.profile.sigma_c >= 0.0);
  CHECK(fx.profile.sigma_c / std::abs(fx.profile.l_c) < 0.2);
}

TEST_CASE("sample_loss reproduces a reference sample exactly") {
  const auto& fx = fixture::trained();
  double third = draw_and_sample(fx.model, fx.test.without_labels(), fx.det, 4001, "reference", 2);
  double again = draw_and_sample(fx.model, fx.test.without_labels(), fx.det, 4001, "reference", 2);
  CHECK(third == again);
  // the profile mean is the mean of exactly these per-index samples
  double sum = 0.0;
  ReferenceProfile p = build_reference(fx.model, fx.test.without_labels(), 5, fx.det, 77);
  for (int i = 0; i < 5; ++i)
    sum += draw_and_sample(fx.model, fx.test.without_labels(), fx.det, 77, "reference", i);
  CHECK(p.l_c == doctest::Approx(sum / 5.0).epsilon(1e-12));
}

TEST_CASE("sample_loss is finite, classifies in the same pass, and mutates nothing") {
  const auto& fx = fixture::trained();
  Model m = fx.model.clone();
  auto before = parameter_bytes(m);
  std::vector<int64_t> idx(64);
  for (int64_t i = 0; i < 64; ++i) idx[i] = i;
  SampleResult r = sample_loss(m, fx.test.to_tensor(idx), fx.det, 3);
  CHECK(std::isfinite(r.loss));
  CHECK(r.logits.shape() == Shape{64, 10});
  CHECK(parameter_bytes(m) == before);

  Tensor tiny = fx.test.to_tensor({0});
  CHECK_THROWS_AS(sample_loss(m, tiny, fx.det), std::invalid_argument);
}

TEST_CASE("detector errors") {
  const auto& fx = fixture::trained();
  CHECK_THROWS_AS(detect(fx.profile, fx.model, fx.test.without_labels(), 0.0, 1, fx.det, 1),
                  std::invalid_argument);
  CHECK_THROWS_AS(detect(fx.profile, fx.model, fx.test.without_labels(), -1.0, 1, fx.det, 1),
                  std::invalid_argument);
  Dataset small = fx.test.subset({0, 1, 2});
  CHECK_THROWS_AS(build_reference(fx.model, small, 2, fx.det, 1), std::invalid_argument);
}

TEST_CASE("verdict equals the absolute-difference rule and is deterministic") {
  const auto& fx = fixture::trained();
  double delta = default_delta(fx.profile);
  CHECK(delta == std::max(3.0 * fx.profile.sigma_c, 0.05 * fx.profile.l_c));

  DetectionVerdict v = detect(fx.profile, fx.model, fx.test.without_labels(), delta, 1, fx.det, 21);
  CHECK(v.attacked == (std::abs(v.l_d - v.l_c) > v.delta));
  DetectionVerdict v2 = detect(fx.profile, fx.model, fx.test.without_labels(), delta, 1, fx.det, 21);
  CHECK(v.to_json() == v2.to_json());

  // clean model at an enormous delta can never be flagged
  DetectionVerdict loose =
      detect(fx.profile, fx.model, fx.test.without_labels(), 1e9, 1, fx.det, 22);
  CHECK_FALSE(loose.attacked);

  // l_d = l_c + 2 delta must be flagged by the rule
  DetectionVerdict crafted;
  crafted.l_c = fx.profile.l_c;
  crafted.delta = delta;
  crafted.l_d = crafted.l_c + 2 * delta;
  crafted.attacked = std::abs(crafted.l_d - crafted.l_c) > crafted.delta;
  CHECK(crafted.attacked);
}

TEST_CASE("multi-batch detection averages samples") {
  const auto& fx = fixture::trained();
  DetectionVerdict v4 =
      detect(fx.profile, fx.model, fx.test.without_labels(), default_delta(fx.profile), 4, fx.det, 31);
  CHECK(v4.batches_used == 4);
  double sum = 0.0;
  for (int i = 0; i < 4; ++i)
    sum += draw_and_sample(fx.model, fx.test.without_labels(), fx.det, 31, "detect", i);
  CHECK(v4.l_d == doctest::Approx(sum / 4.0).epsilon(1e-12));
}

TEST_CASE("an attacked model separates from the clean reference") {
  const auto& fx = fixture::trained();
  Model m = fx.model.clone();
  m.quantize_layer("encoder.conv2.weight");
  AttackReport ar =
      random_bit_flip(m, "encoder.conv2.weight", 800, 13, fx.test, /*msb_only=*/true);
  REQUIRE(ar.acc_after < 0.5);
  int hits = 0;
  for (int i = 0; i < 20; ++i) {
    double l_d = draw_and_sample(m, fx.test.without_labels(), fx.det, 900 + i, "detect", i);
    if (l_d > fx.profile.l_c + 3.0 * fx.profile.sigma_c) ++hits;
  }
  CHECK(hits >= 19);

  DetectionVerdict v =
      detect(fx.profile, m, fx.test.without_labels(), default_delta(fx.profile), 1, fx.det, 55);
  CHECK(v.attacked);
}

TEST_CASE("json round trip for the profile") {
  const auto& fx = fixture::trained();
  ReferenceProfile p = ReferenceProfile::from_json(fx.profile.to_json());
  CHECK(p.l_c == fx.profile.l_c);
  CHECK(p.sigma_c == fx.profile.sigma_c);
  CHECK(p.n_samples == fx.profile.n_samples);
}
