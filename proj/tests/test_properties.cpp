#include <doctest.h>

#include "invariance.hpp"

TEST_CASE("shuffling supports gives bit-identical outputs") {
  std::mt19937_64 rng(111);
  int held = 0;
  for (int t = 0; t < 50; ++t) held += invariance::permutation_trial(rng, t);
  CHECK(held == 50);
}

TEST_CASE("translating queries and supports together leaves outputs unchanged") {
  std::mt19937_64 rng(112);
  int held = 0;
  for (int t = 0; t < 50; ++t) held += invariance::translation_trial(rng, t);
  CHECK(held == 50);
}

TEST_CASE("shadow slots change nothing") {
  std::mt19937_64 rng(113);
  int held = 0;
  for (int t = 0; t < 50; ++t) held += invariance::shadow_trial(rng, t);
  CHECK(held == 50);
}

TEST_CASE("outputs are linear in the features") {
  std::mt19937_64 rng(114);
  double worst = 0.0;
  for (int t = 0; t < 50; ++t) worst = std::max(worst, invariance::linearity_trial(rng, t));
  CHECK(worst < 1e-12);
}
