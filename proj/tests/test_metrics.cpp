#include <doctest.h>

#include <cmath>
#include <string>
#include <vector>

#include "core/error.hpp"
#include "core/heatmap.hpp"
#include "core/metrics.hpp"
#include "core/rng.hpp"

using namespace apt;

TEST_CASE("two-task worked example") {
  EvalMatrix m(2);
  m.set(0, 0, 0.9);
  m.set(1, 0, 0.8);
  m.set(1, 1, 0.85);
  CHECK(average_accuracy(m) == 0.825);  // (0.8 + 0.85) / 2 is exact in binary
  // 0.9 - 0.8 lands one ulp below 0.1; the hand-computed value is 0.1
  CHECK(std::abs(forgetting(m) - 0.1) < 1e-15);
}

TEST_CASE("degenerate matrices") {
  EvalMatrix one(1);
  one.set(0, 0, 0.9);
  CHECK(average_accuracy(one) == 0.9);
  CHECK(forgetting(one) == 0.0);

  EvalMatrix flat(3);
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t i = 0; i <= t; ++i) flat.set(t, i, 0.5);
  CHECK(average_accuracy(flat) == 0.5);
  CHECK(forgetting(flat) == 0.0);

  EvalMatrix up(2);  // accuracy that improves gives negative forgetting
  up.set(0, 0, 0.5);
  up.set(1, 0, 0.7);
  up.set(1, 1, 0.9);
  CHECK(std::abs(forgetting(up) - (-0.2)) < 1e-15);
}

TEST_CASE("formulas match a brute-force re-evaluation") {
  Rng rng(123);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t T = 1 + rng.next_u64() % 10;
    EvalMatrix m(T);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t i = 0; i <= t; ++i) m.set(t, i, rng.uniform());

    double avg = 0.0;
    for (std::size_t i = 0; i < T; ++i) avg += m.get(T - 1, i);
    avg /= static_cast<double>(T);
    CHECK(std::abs(average_accuracy(m) - avg) < 1e-12);

    double f = 0.0;
    if (T > 1) {
      for (std::size_t i = 0; i < T - 1; ++i) f += m.get(i, i) - m.get(T - 1, i);
      f /= static_cast<double>(T - 1);
    }
    CHECK(std::abs(forgetting(m) - f) < 1e-12);
  }
}

TEST_CASE("cell bookkeeping is strict") {
  EvalMatrix m(3);
  CHECK(m.has(2, 1));
  CHECK_FALSE(m.has(1, 2));
  CHECK_THROWS_AS(m.set(0, 1, 0.5), Error);     // upper triangle
  CHECK_THROWS_AS((void)m.get(1, 0), Error);    // never measured
  m.set(1, 0, 0.25);
  CHECK(m.get(1, 0) == 0.25);
  CHECK_THROWS_AS(average_accuracy(m), Error);  // final row incomplete
  CHECK_THROWS_AS(EvalMatrix(0), Error);
}

TEST_CASE("csv round-trip is bitwise") {
  Rng rng(7);
  EvalMatrix m(4);
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t i = 0; i <= t; ++i) m.set(t, i, rng.uniform());
  const std::string text = m.to_csv();
  EvalMatrix back = EvalMatrix::from_csv(text);
  REQUIRE(back.tasks() == 4);
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t i = 0; i <= t; ++i) CHECK(back.get(t, i) == m.get(t, i));
  CHECK(back.to_csv() == text);
}

TEST_CASE("csv parser rejects malformed input") {
  CHECK_THROWS_AS(EvalMatrix::from_csv("nonsense\n1,0.5\n"), Error);
  CHECK_THROWS_AS(EvalMatrix::from_csv("after_task\n"), Error);
  CHECK_THROWS_AS(EvalMatrix::from_csv("after_task,task_1,task_2\n1,0.5\n"), Error);  // short rows
}

TEST_CASE("matrix pgm renders exact grayscale") {
  EvalMatrix m(2);
  m.set(0, 0, 1.0);
  m.set(1, 0, 0.5);
  m.set(1, 1, 0.0);
  // 1.0 -> 255, unmeasured -> 0, 0.5 -> round(127.5) = 128
  CHECK(heatmap_pgm(m) == "P2\n2 2\n255\n255 0\n128 0\n");
}

TEST_CASE("attention map renders pgm and csv") {
  AttentionMap map;
  map.grid = 2;
  map.weights = {0.5, 0.25, 0.125, 0.0};
  CHECK(attention_map_pgm(map) == "P2\n2 2\n255\n255 128\n64 0\n");
  CHECK(attention_map_csv(map) == "0.5,0.25\n0.125,0\n");

  AttentionMap dead;  // all-zero weights must not divide by zero
  dead.grid = 1;
  dead.weights = {0.0};
  CHECK(attention_map_pgm(dead) == "P2\n1 1\n255\n0\n");
}
