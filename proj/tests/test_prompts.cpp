#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <vector>

#include "core/error.hpp"
#include "core/prompts.hpp"
#include "core/weights_io.hpp"

using namespace apt;

namespace {

PromptSet random_set(PromptSet::Mode mode, std::size_t depth, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  return PromptSet::randn(mode, depth, dim, rng, 0.5, false);
}

}  // namespace

TEST_CASE("prompt parameter counts") {
  // tiny config: 2 vectors of width 64 in each of 4 layers
  CHECK(PromptSet::zeros(PromptSet::Mode::kAddKv, 4, 64, false).n_params() == 512);
  // base-scale transformer: 2 * 12 * 768
  CHECK(PromptSet::zeros(PromptSet::Mode::kAddKv, 12, 768, false).n_params() == 18432);
  // the input-level ablation carries one vector per layer
  CHECK(PromptSet::zeros(PromptSet::Mode::kInputLevel, 4, 64, false).n_params() == 256);

  Rng rng(5);
  CHECK(TokenPrompts::make(true, 4, 4, 64, rng, 0.1).n_params() == 1024);   // L*n*d
  CHECK(TokenPrompts::make(false, 4, 4, 64, rng, 0.1).n_params() == 256);   // n*d

  PromptPool pool(10, 2, 5, 64, rng, 0.1);
  CHECK(pool.n_trainable_params() == 10 * 2 * 64);
  CHECK(pool.n_key_params() == 10 * 64);
}

TEST_CASE("prompt sets keep their structure") {
  PromptSet kv = PromptSet::zeros(PromptSet::Mode::kAddKv, 3, 8, true);
  CHECK(kv.depth() == 3);
  CHECK(kv.v.size() == 3);
  CHECK(kv.parameters().size() == 6);
  CHECK(kv.k[0].requires_grad());

  PromptSet input = PromptSet::zeros(PromptSet::Mode::kInputLevel, 3, 8, false);
  CHECK(input.v.empty());
  CHECK(input.parameters().size() == 3);
  CHECK_FALSE(input.k[0].requires_grad());

  ForwardAddons a;
  kv.attach(a);
  CHECK(a.k_add == &kv.k);
  CHECK(a.v_add == &kv.v);
  CHECK(a.x_add == nullptr);

  ForwardAddons b;
  input.attach(b);
  CHECK(b.x_add == &input.k);
  CHECK(b.k_add == nullptr);
  CHECK(b.v_add == nullptr);
}

TEST_CASE("clone detaches storage") {
  PromptSet p = random_set(PromptSet::Mode::kAddKv, 2, 8, 17);
  PromptSet q = p.clone();
  q.k[0].mutable_data()[0] += 1.0;
  CHECK(p.k[0].at(0) != q.k[0].at(0));
  CHECK(q.v[1].at(3) == p.v[1].at(3));
}

TEST_CASE("fusion endpoints are exact") {
  for (int trial = 0; trial < 100; ++trial) {
    PromptSet prev = random_set(PromptSet::Mode::kAddKv, 3, 16, 1000 + trial);
    PromptSet cur = random_set(PromptSet::Mode::kAddKv, 3, 16, 2000 + trial);

    PromptSet keep = fuse_prompts(prev, cur, 1.0);
    PromptSet replace = fuse_prompts(prev, cur, 0.0);
    PromptSet mix = fuse_prompts(prev, cur, 0.7);
    for (std::size_t l = 0; l < 3; ++l)
      for (std::size_t i = 0; i < 16; ++i) {
        CHECK(keep.k[l].at(i) == prev.k[l].at(i));
        CHECK(keep.v[l].at(i) == prev.v[l].at(i));
        CHECK(replace.k[l].at(i) == cur.k[l].at(i));
        CHECK(replace.v[l].at(i) == cur.v[l].at(i));
        CHECK(std::abs(mix.k[l].at(i) - (0.7 * prev.k[l].at(i) + 0.3 * cur.k[l].at(i))) < 1e-12);
        CHECK(std::abs(mix.v[l].at(i) - (0.7 * prev.v[l].at(i) + 0.3 * cur.v[l].at(i))) < 1e-12);
        CHECK_FALSE(mix.k[l].requires_grad());
      }
  }
}

TEST_CASE("fusion is homogeneous in its inputs") {
  PromptSet prev = random_set(PromptSet::Mode::kAddKv, 2, 8, 31);
  PromptSet cur = random_set(PromptSet::Mode::kAddKv, 2, 8, 32);
  const Scalar c = 2.5;
  PromptSet scaled_prev = prev.clone(), scaled_cur = cur.clone();
  for (PromptSet* p : {&scaled_prev, &scaled_cur})
    for (std::vector<Tensor>* side : {&p->k, &p->v})
      for (Tensor& t : *side)
        for (Scalar& x : t.mutable_data()) x *= c;

  PromptSet lhs = fuse_prompts(scaled_prev, scaled_cur, 0.4);
  PromptSet rhs = fuse_prompts(prev, cur, 0.4);
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t i = 0; i < 8; ++i) CHECK(std::abs(lhs.k[l].at(i) - c * rhs.k[l].at(i)) < 1e-12);
}

TEST_CASE("fusion rejects mismatched inputs") {
  PromptSet a = random_set(PromptSet::Mode::kAddKv, 2, 8, 41);
  PromptSet b = random_set(PromptSet::Mode::kAddKv, 3, 8, 42);
  PromptSet c = random_set(PromptSet::Mode::kInputLevel, 2, 8, 43);
  CHECK_THROWS_AS(fuse_prompts(a, b, 0.5), Error);
  CHECK_THROWS_AS(fuse_prompts(a, c, 0.5), Error);
  CHECK_THROWS_AS(fuse_prompts(a, a, 1.5), Error);
  CHECK_THROWS_AS(fuse_prompts(a, a, -0.1), Error);
}

TEST_CASE("pool keys are unit length and selection ranks by cosine") {
  Rng rng(55);
  PromptPool pool(10, 2, 5, 16, rng, 0.2);
  for (std::size_t i = 0; i < 10; ++i) {
    double norm = 0.0;
    for (std::size_t j = 0; j < 16; ++j) norm += pool.keys().at(i, j) * pool.keys().at(i, j);
    CHECK(std::abs(std::sqrt(norm) - 1.0) < 1e-12);
  }

  Rng qrng(56);
  Tensor query = Tensor::randn({16}, qrng, 1.0);
  const std::vector<std::size_t> picked = pool.select(query);
  REQUIRE(picked.size() == 5);

  // recompute cosine similarities independently
  std::vector<double> sim(10, 0.0);
  double qnorm = 0.0;
  for (std::size_t j = 0; j < 16; ++j) qnorm += query.at(j) * query.at(j);
  qnorm = std::sqrt(qnorm);
  for (std::size_t i = 0; i < 10; ++i) {
    for (std::size_t j = 0; j < 16; ++j) sim[i] += pool.keys().at(i, j) * query.at(j) / qnorm;
  }
  // ranked descending, ties to the lower index
  for (std::size_t r = 1; r < picked.size(); ++r) {
    const bool strictly_better = sim[picked[r - 1]] > sim[picked[r]];
    const bool tie_in_order = sim[picked[r - 1]] == sim[picked[r]] && picked[r - 1] < picked[r];
    CHECK((strictly_better || tie_in_order));
  }
  for (std::size_t i = 0; i < 10; ++i) {
    bool in = false;
    for (std::size_t p : picked) in = in || p == i;
    if (!in) CHECK(sim[i] <= sim[picked.back()]);
  }

  // a query aligned with one key must rank that key first
  Tensor aligned = Tensor::zeros({16});
  for (std::size_t j = 0; j < 16; ++j) aligned.mutable_data()[j] = 3.0 * pool.keys().at(7, j);
  CHECK(pool.select(aligned)[0] == 7);
}

TEST_CASE("pool composition concatenates blocks in rank order") {
  Rng rng(57);
  PromptPool pool(4, 3, 2, 8, rng, 0.2);
  Tensor rows = pool.compose({2, 0});
  REQUIRE(rows.rows() == 6);
  for (std::size_t j = 0; j < 8; ++j) {
    CHECK(rows.at(0, j) == pool.blocks()[2].at(0, j));
    CHECK(rows.at(3, j) == pool.blocks()[0].at(0, j));
  }
  CHECK_THROWS_AS(pool.compose({9}), Error);
}

TEST_CASE("pool rejects bad construction and queries") {
  Rng rng(58);
  CHECK_THROWS_AS(PromptPool(4, 2, 5, 8, rng, 0.2), Error);  // top_k > pool
  CHECK_THROWS_AS(PromptPool(4, 0, 2, 8, rng, 0.2), Error);
  PromptPool pool(4, 2, 2, 8, rng, 0.2);
  CHECK_THROWS_AS(pool.select(Tensor::zeros({8})), Error);   // zero query
  CHECK_THROWS_AS(pool.select(Tensor::zeros({5})), Error);   // wrong dim
}

TEST_CASE("prompt snapshots round-trip through disk") {
  const char* path = "test_scratch_prompts.aptw";

  SUBCASE("additive kv") {
    PromptSet p = random_set(PromptSet::Mode::kAddKv, 3, 8, 61);
    for (Tensor& t : p.k) snap_to_f32(t);
    for (Tensor& t : p.v) snap_to_f32(t);
    prompt_snapshot(p).save(path);
    SnapshotAddons back = snapshot_addons(TensorStore::load(path));
    CHECK(back.mode == 0);
    REQUIRE(back.add.depth() == 3);
    for (std::size_t l = 0; l < 3; ++l)
      for (std::size_t i = 0; i < 8; ++i) {
        CHECK(back.add.k[l].at(i) == p.k[l].at(i));
        CHECK(back.add.v[l].at(i) == p.v[l].at(i));
      }
    ForwardAddons a;
    back.attach(a);
    CHECK(a.k_add != nullptr);
    CHECK(a.v_add != nullptr);
  }

  SUBCASE("input-level") {
    PromptSet p = random_set(PromptSet::Mode::kInputLevel, 3, 8, 62);
    for (Tensor& t : p.k) snap_to_f32(t);
    prompt_snapshot(p).save(path);
    SnapshotAddons back = snapshot_addons(TensorStore::load(path));
    CHECK(back.mode == 1);
    CHECK(back.add.v.empty());
    for (std::size_t l = 0; l < 3; ++l)
      for (std::size_t i = 0; i < 8; ++i) CHECK(back.add.k[l].at(i) == p.k[l].at(i));
    ForwardAddons a;
    back.attach(a);
    CHECK(a.x_add != nullptr);
    CHECK(a.k_add == nullptr);
  }

  SUBCASE("token rows, shallow and deep") {
    Rng rng(63);
    TokenPrompts shallow = TokenPrompts::make(false, 4, 2, 8, rng, 0.2);
    snap_to_f32(shallow.shallow);
    prompt_snapshot(shallow).save(path);
    SnapshotAddons s = snapshot_addons(TensorStore::load(path));
    CHECK(s.mode == 2);
    CHECK_FALSE(s.tokens.deep);
    for (std::size_t i = 0; i < 16; ++i) CHECK(s.tokens.shallow.at(i) == shallow.shallow.at(i));

    TokenPrompts deep = TokenPrompts::make(true, 4, 2, 8, rng, 0.2);
    for (Tensor& t : deep.per_layer) snap_to_f32(t);
    prompt_snapshot(deep).save(path);
    SnapshotAddons d = snapshot_addons(TensorStore::load(path));
    CHECK(d.mode == 3);
    REQUIRE(d.tokens.per_layer.size() == 4);
    for (std::size_t l = 0; l < 4; ++l)
      for (std::size_t i = 0; i < 16; ++i) CHECK(d.tokens.per_layer[l].at(i) == deep.per_layer[l].at(i));
  }

  SUBCASE("pool snapshots carry state but cannot drive a forward pass") {
    Rng rng(64);
    PromptPool pool(4, 2, 2, 8, rng, 0.2);
    prompt_snapshot(pool).save(path);
    TensorStore store = TensorStore::load(path);
    CHECK(store.contains("keys"));
    CHECK(store.contains("block.3"));
    SnapshotAddons back = snapshot_addons(store);
    CHECK(back.mode == 4);
    ForwardAddons a;
    CHECK_THROWS_AS(back.attach(a), Error);
  }

  std::remove(path);
}

TEST_CASE("snapshot loader rejects malformed stores") {
  TensorStore store;
  store.put("meta", Tensor::vec({9.0, 1.0, 4.0}));
  CHECK_THROWS_AS(snapshot_addons(store), Error);  // unknown mode

  TensorStore missing;
  missing.put("meta", Tensor::vec({0.0, 2.0, 4.0}));
  missing.put("k.0", Tensor::zeros({4}));
  CHECK_THROWS_AS(snapshot_addons(missing), Error);  // k.1 and values absent

  TensorStore short_meta;
  short_meta.put("meta", Tensor::vec({0.0, 1.0}));
  CHECK_THROWS_AS(snapshot_addons(short_meta), Error);

  TensorStore wrong_size;
  wrong_size.put("meta", Tensor::vec({0.0, 1.0, 4.0}));
  wrong_size.put("k.0", Tensor::zeros({5}));
  CHECK_THROWS_AS(snapshot_addons(wrong_size), Error);
}
