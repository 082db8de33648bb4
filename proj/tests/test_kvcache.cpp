#include <deque>
#include <set>

#include "doctest.h"
#include "kfstream/kvcache.hpp"
#include "support.hpp"

using namespace kfs;

namespace {

CacheEntry entry(std::size_t pos, std::size_t layers = 1, std::size_t P = 1, std::size_t W = 4) {
  CacheEntry e;
  e.position = pos;
  for (std::size_t l = 0; l < layers; ++l) {
    std::vector<double> k(P * W), v(P * W);
    for (std::size_t i = 0; i < P * W; ++i) {
      k[i] = static_cast<double>(pos) + 0.01 * static_cast<double>(i + 100 * l);
      v[i] = -k[i];
    }
    e.keys.emplace_back(Shape{P, W}, std::move(k));
    e.values.emplace_back(Shape{P, W}, std::move(v));
  }
  return e;
}

}  // namespace

TEST_CASE("construction") {
  DualRegionKVCache c(9, 3);
  CHECK(c.empty());
  CHECK(c.capacity_past() == 9);
  CHECK(c.capacity_future() == 3);
  CHECK_NOTHROW(DualRegionKVCache(1, 1));
  CHECK_THROWS_AS(DualRegionKVCache(0, 1), CacheError);
  CHECK_THROWS_AS(DualRegionKVCache(1, 0), CacheError);
}

TEST_CASE("append_past keeps the most recent window") {
  DualRegionKVCache c(9, 3);
  for (std::size_t p = 0; p < 9; ++p) CHECK_FALSE(c.append_past(entry(p)).has_value());
  CHECK(c.past_positions() == std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7, 8});
  CHECK(c.append_past(entry(9)) == std::optional<std::size_t>{0});
  CHECK(c.past_positions() == std::vector<std::size_t>{1, 2, 3, 4, 5, 6, 7, 8, 9});

  DualRegionKVCache d(4, 1);
  d.append_past(entry(7));
  CHECK_THROWS_AS(d.append_past(entry(5)), CacheError);
  CHECK_THROWS_AS(d.append_past(entry(7)), CacheError);
  d.set_future(entry(20));
  CHECK_THROWS_AS(d.append_past(entry(20)), CacheError);
  CHECK_THROWS_AS(d.append_past(entry(25)), CacheError);
  CHECK_NOTHROW(d.append_past(entry(19)));
}

TEST_CASE("set_future evicts within the future region only") {
  DualRegionKVCache c(9, 1);
  for (std::size_t p = 0; p <= 5; ++p) c.append_past(entry(p));
  c.set_future(entry(5 + 18));
  CHECK(c.future_positions() == std::vector<std::size_t>{23});
  const auto past_before = c.past_positions();
  CHECK(c.set_future(entry(41)) == std::optional<std::size_t>{23});
  CHECK(c.future_positions() == std::vector<std::size_t>{41});
  CHECK(c.past_positions() == past_before);
  CHECK_THROWS_AS(c.set_future(entry(5)), CacheError);
  CHECK_THROWS_AS(c.set_future(entry(3)), CacheError);
  CHECK_THROWS_AS(c.set_future(entry(41)), CacheError);
}

TEST_CASE("consume_future moves the keyframe into the past") {
  DualRegionKVCache c(3, 2);
  for (std::size_t p = 20; p <= 22; ++p) c.append_past(entry(p));
  c.set_future(entry(23));
  CHECK_THROWS_AS(c.consume_future(24), CacheError);
  CHECK(c.consume_future(23) == std::optional<std::size_t>{20});
  CHECK(c.past_positions() == std::vector<std::size_t>{21, 22, 23});
  CHECK(c.future().empty());
  CHECK_THROWS_AS(c.consume_future(23), CacheError);
  c.check_invariants();
  CHECK(c.past().back().keys[0] == entry(23).keys[0]);
}

TEST_CASE("discard_future_from drops pending keyframes") {
  DualRegionKVCache c(3, 3);
  c.append_past(entry(1));
  c.set_future(entry(10));
  c.set_future(entry(11));
  c.set_future(entry(12));
  c.discard_future_from(11);
  CHECK(c.future_positions() == std::vector<std::size_t>{10});
  c.discard_future_from(0);
  CHECK(c.future().empty());
  CHECK(c.past_positions() == std::vector<std::size_t>{1});
}

TEST_CASE("gather orders past then future and reports positions") {
  DualRegionKVCache c(4, 2);
  auto empty = c.gather(0, 0, 2);
  CHECK(empty.positions.empty());
  CHECK(empty.keys.size() == 0);
  c.append_past(entry(1, 2, 2));
  c.append_past(entry(2, 2, 2));
  c.set_future(entry(20, 2, 2));
  auto g = c.gather(1, 1, 2);
  CHECK(g.positions == std::vector<std::size_t>{1, 2, 20});
  CHECK(g.keys.rows() == 6);
  CHECK(g.keys.cols() == 2);
  // Row 4 is the first patch of position 20, head 1 covers columns 2..3 of layer 1.
  CHECK(g.keys.at(4, 0) == entry(20, 2, 2).keys[1].at(0, 2));
  CHECK(g.values.at(5, 1) == entry(20, 2, 2).values[1].at(1, 3));
  CHECK(c.dump() == "past 1\npast 2\nfuture 20\n");
  CHECK_THROWS_AS(c.gather(0, 2, 2), CacheError);
}

TEST_CASE("attention over gathered entries equals dense attention under the window mask") {
  std::mt19937_64 rng(21);
  const std::size_t dh = 4, n = 16, window = 5, kf = 21;
  std::vector<Tensor> keys, values;
  for (std::size_t p = 0; p <= kf; ++p) {
    keys.push_back(kfs::testing::random_tensor(rng, {1, dh}));
    values.push_back(kfs::testing::random_tensor(rng, {1, dh}));
  }
  DualRegionKVCache c(window, 1);
  auto make = [&](std::size_t p) {
    CacheEntry e;
    e.position = p;
    e.keys = {keys[p]};
    e.values = {values[p]};
    return e;
  };
  for (std::size_t p = 0; p < n; ++p) c.append_past(make(p));
  c.set_future(make(kf));
  auto q = kfs::testing::random_tensor(rng, {1, dh});

  auto g = c.gather(0, 0, 1);
  // Reference: dense attention over the full history with a mask that keeps the
  // last `window` generated positions plus the keyframe.
  std::vector<double> all_k, all_v;
  for (std::size_t p = 0; p <= kf; ++p) {
    all_k.insert(all_k.end(), keys[p].values().begin(), keys[p].values().end());
    all_v.insert(all_v.end(), values[p].values().begin(), values[p].values().end());
  }
  AttentionMask dense_mask(1, kf + 1);
  for (std::size_t p = n - window; p < n; ++p) dense_mask.set(0, p, true);
  dense_mask.set(0, kf, true);
  auto attend = [&](const Tensor& k, const Tensor& v, const AttentionMask& mask) {
    std::vector<double> s(k.rows());
    for (std::size_t r = 0; r < k.rows(); ++r)
      for (std::size_t j = 0; j < dh; ++j) s[r] += q.at(0, j) * k.at(r, j);
    auto p = softmax_masked(Tensor({1, k.rows()}, s), mask);
    std::vector<double> out(dh);
    for (std::size_t r = 0; r < k.rows(); ++r)
      for (std::size_t j = 0; j < dh; ++j) out[j] += p.at(0, r) * v.at(r, j);
    return Tensor({1, dh}, out);
  };
  auto cached = attend(g.keys, g.values, AttentionMask(1, g.keys.rows(), true));
  auto dense = attend(Tensor({kf + 1, dh}, all_k), Tensor({kf + 1, dh}, all_v), dense_mask);
  CHECK(max_abs_diff(cached, dense) <= 1e-12);
}

TEST_CASE("random operation sequences preserve region invariants") {
  std::mt19937_64 rng(99);
  for (int seq = 0; seq < 500; ++seq) {
    const std::size_t cp = 1 + rng() % 9, cf = 1 + rng() % 3;
    DualRegionKVCache c(cp, cf);
    std::deque<std::size_t> model_past, model_future;
    std::size_t next = 0;
    for (int op = 0; op < 40; ++op) {
      const auto kind = rng() % 4;
      const auto past_before = c.past_positions();
      const auto future_before = c.future_positions();
      if (kind == 0 || kind == 3) {
        if (!model_future.empty() && next >= model_future.front()) continue;
        c.append_past(entry(next));
        model_past.push_back(next++);
        if (model_past.size() > cp) model_past.pop_front();
        CHECK(c.future_positions() == future_before);
      } else if (kind == 1) {
        const auto pos = std::max(next, model_future.empty() ? 0 : model_future.back() + 1) + rng() % 6;
        c.set_future(entry(pos));
        model_future.push_back(pos);
        if (model_future.size() > cf) model_future.pop_front();
        CHECK(c.past_positions() == past_before);
      } else if (!model_future.empty()) {
        const auto pos = model_future.front();
        c.consume_future(pos);
        model_future.pop_front();
        model_past.push_back(pos);
        if (model_past.size() > cp) model_past.pop_front();
        next = pos + 1;
      }
      c.check_invariants();
      CHECK(c.past_positions() == std::vector<std::size_t>(model_past.begin(), model_past.end()));
      CHECK(c.future_positions() == std::vector<std::size_t>(model_future.begin(), model_future.end()));
    }
  }
}
