#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <bit>
#include <cmath>

#include "rest/chunking.hpp"
#include "rest/error.hpp"
#include "rest/flow.hpp"
#include "rest/ops.hpp"
#include "rest/tensor_io.hpp"
#include "rest/verify/gradcheck.hpp"

using namespace rest;

namespace {

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.dims() != b.dims()) return false;
  for (std::int64_t i = 0; i < a.numel(); ++i)
    if (std::bit_cast<std::uint32_t>(a.at(i)) != std::bit_cast<std::uint32_t>(b.at(i))) return false;
  return true;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(static_cast<double>(a.at(i)) - b.at(i)));
  return m;
}

}  // namespace

TEST_CASE("add_noise endpoints are bit exact") {
  CounterRng rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor z0 = Tensor::randn({5, 2, 2, 3}, rng);
    Tensor eps = Tensor::randn({5, 2, 2, 3}, rng);
    std::vector<float> zeros(5, 0.0f), ones(5, 1.0f);
    CHECK(bit_equal(add_noise(z0, eps, zeros), z0));
    CHECK(bit_equal(add_noise(z0, eps, ones), eps));
  }
  // Negative zero survives too.
  Tensor z0({1, 1}, std::vector<float>{-0.0f});
  Tensor eps({1, 1}, std::vector<float>{3.0f});
  std::vector<float> t0{0.0f};
  CHECK(std::signbit(add_noise(z0, eps, t0).at(0)));
}

TEST_CASE("add_noise linear path and errors") {
  CounterRng rng(2);
  Tensor e = Tensor::randn({2, 4}, rng);
  std::vector<float> quarter{0.25f, 0.25f};
  Tensor zt = add_noise(Tensor({2, 4}), e, quarter);
  for (std::int64_t i = 0; i < 8; ++i) CHECK(zt.at(i) == 0.25f * e.at(i));

  std::vector<float> mixed{0.0f, 0.5f};
  Tensor z0 = Tensor::randn({2, 4}, rng);
  Tensor m = add_noise(z0, e, mixed);
  for (std::int64_t i = 0; i < 4; ++i) CHECK(m.at(i) == z0.at(i));
  for (std::int64_t i = 4; i < 8; ++i) CHECK(m.at(i) == doctest::Approx(0.5f * z0.at(i) + 0.5f * e.at(i)));

  std::vector<float> bad{0.0f, 1.5f};
  CHECK_THROWS_AS(add_noise(z0, e, bad), DomainError);
  std::vector<float> neg{-0.1f, 0.0f};
  CHECK_THROWS_AS(add_noise(z0, e, neg), DomainError);
  std::vector<float> nan{std::nanf(""), 0.0f};
  CHECK_THROWS_AS(add_noise(z0, e, nan), DomainError);
  std::vector<float> short_t{0.0f};
  CHECK_THROWS_AS(add_noise(z0, e, short_t), ShapeError);
}

TEST_CASE("flow target identities") {
  CounterRng rng(3);
  Tensor z0 = Tensor::randn({3, 4}, rng);
  Tensor eps = Tensor::randn({3, 4}, rng);
  Tensor v = flow_target(z0, z0);
  for (float x : v.values()) CHECK(x == 0.0f);
  CHECK(bit_equal(flow_target(Tensor({3, 4}), eps), eps));
  Tensor lhs = flow_target(scale(z0, 2.5f), scale(eps, 2.5f));
  Tensor rhs = scale(flow_target(z0, eps), 2.5f);
  CHECK(max_abs_diff(lhs, rhs) < 1e-6);
}

TEST_CASE("fm_loss values, symmetry and gradient") {
  CounterRng rng(4);
  Tensor a = Tensor::randn({3, 5}, rng, 1.0f);
  Tensor b = Tensor::randn({3, 5}, rng, 1.0f);
  CHECK(fm_loss(a, a).item() == 0.0f);
  CHECK(fm_loss(add_scalar(a, 1.0f), a).item() == doctest::Approx(1.0f).epsilon(1e-6));
  CHECK(fm_loss(a, b).item() == fm_loss(b, a).item());

  Tensor p = Tensor::randn({3, 5}, rng).detach();
  p.set_requires_grad(true);
  backward(fm_loss(p, b));
  for (std::int64_t i = 0; i < 15; ++i) CHECK(p.grad()[static_cast<std::size_t>(i)] == doctest::Approx(2.0 * (p.at(i) - b.at(i)) / 15.0).epsilon(1e-5));

  Tensor q = Tensor::randn({3, 5}, rng).detach();
  q.set_requires_grad(true);
  auto rep = verify::gradcheck([&] { return fm_loss(q, b); }, {{"v_pred", q}});
  CHECK(rep.max_rel_error <= 1e-3);
}

TEST_CASE("euler steps on the straight path recover z0") {
  CounterRng rng(5);
  for (int n : {1, 2, 4, 8}) {
    for (int trial = 0; trial < 5; ++trial) {
      Tensor z0 = Tensor::randn({4, 2, 2, 8}, rng);
      Tensor eps = Tensor::randn({4, 2, 2, 8}, rng);
      const TimeSchedule s = TimeSchedule::uniform(n);
      s.validate();
      CHECK(s.steps() == n);
      Tensor z = eps;
      const Tensor v = flow_target(z0, eps);
      for (int i = 0; i < n; ++i) z = euler_step(z, v, s.knots[static_cast<std::size_t>(i)], s.knots[static_cast<std::size_t>(i + 1)]);
      CHECK(max_abs_diff(z, z0) <= 1e-5);
    }
  }
  Tensor z = Tensor::full({3}, 2.0f);
  CHECK(bit_equal(euler_step(z, Tensor({3}), 0.5f, 0.25f), z));
  CHECK_THROWS_AS(euler_step(z, z, 0.25f, 0.5f), ScheduleError);
  CHECK_THROWS_AS(euler_step(z, z, 0.5f, 0.5f), ScheduleError);
}

TEST_CASE("time schedule") {
  const TimeSchedule s = TimeSchedule::uniform(8);
  REQUIRE(s.knots.size() == 9);
  CHECK(s.knots.front() == 1.0f);
  CHECK(s.knots.back() == 0.0f);
  CHECK(s.knots[4] == 0.5f);
  CHECK_THROWS_AS(TimeSchedule({{1.0f, 0.5f, 0.6f, 0.0f}}).validate(), ScheduleError);
  CHECK_THROWS_AS(TimeSchedule({{1.0f, 0.5f}}).validate(), ScheduleError);
  CHECK_THROWS_AS(TimeSchedule({{1.5f, 0.0f}}).validate(), ScheduleError);
  CHECK_THROWS_AS(TimeSchedule::uniform(0), ScheduleError);
}

TEST_CASE("timestep embedding") {
  std::vector<float> t{0.0f, 0.5f};
  Tensor e = timestep_embedding(t, 8);
  CHECK(e.dims() == Dims{2, 8});
  for (int i = 0; i < 4; ++i) {
    CHECK(e.at(i) == 0.0f);
    CHECK(e.at(4 + i) == 1.0f);
  }
  CHECK(e.at(8) == doctest::Approx(std::sin(500.0)));
  CHECK_THROWS_AS(timestep_embedding(t, 7), ShapeError);
}

TEST_CASE("chunk layouts") {
  // The 1-based index formula: chunk j covers 1+(j-1)(f-1) .. 1+j(f-1).
  ChunkLayout l = ChunkLayout::make(9, 5);
  CHECK(l.k == 2);
  CHECK(l.begin(0) + 1 == 1);
  CHECK(l.end(0) == 5);
  CHECK(l.begin(1) + 1 == 5);
  CHECK(l.end(1) == 9);
  CHECK(ChunkLayout::make(4, 4).k == 1);
  try {
    ChunkLayout::make(10, 5);
    FAIL("expected a layout error");
  } catch (const LayoutError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("9 or 13") != std::string::npos);
  }
  CHECK_THROWS_AS(ChunkLayout::make(3, 4), LayoutError);
  CHECK_THROWS_AS(ChunkLayout::make(5, 1), LayoutError);
  CHECK(ChunkLayout::with_chunks(3, 4).f_total == 10);

  CHECK(l.owner(0) == 0);
  CHECK(l.owner(4) == 0);
  CHECK(l.owner(5) == 1);
  CHECK(l.owner(8) == 1);
}

TEST_CASE("segment and stitch") {
  CounterRng rng(6);
  Tensor z = Tensor::randn({9, 2, 2, 3}, rng);
  auto chunks = segment(z, ChunkLayout::make(9, 5));
  REQUIRE(chunks.size() == 2);
  CHECK(bit_equal(slice(chunks[1], 0, 0, 1), slice(z, 0, 4, 5)));
  Stitched s = stitch(chunks);
  CHECK(bit_equal(s.latents, z));
  CHECK(s.boundary_disagreement == std::vector<double>{0.0});

  // Reference is prepended to every view.
  Tensor ref = Tensor::randn({1, 2, 2, 3}, rng);
  auto views = segment(z, ref, ChunkLayout::make(9, 5));
  CHECK(views[1].dims() == Dims{6, 2, 2, 3});
  CHECK(bit_equal(slice(views[1], 0, 0, 1), ref));

  // Disagreeing boundary: earlier chunk wins, gap reported.
  Tensor a = Tensor::full({3, 2}, 1.0f);
  Tensor b = Tensor::full({3, 2}, 4.0f);
  Stitched d = stitch({a, b});
  CHECK(d.latents.dims() == Dims{5, 2});
  CHECK(d.latents.at(4) == 1.0f);
  CHECK(d.latents.at(5) == 1.0f);
  CHECK(d.latents.at(6) == 4.0f);
  CHECK(d.boundary_disagreement[0] == doctest::Approx(std::sqrt(18.0)));

  CHECK(bit_equal(stitch({a}).latents, a));
  CHECK_THROWS_AS(stitch({a, Tensor({4, 2})}), LayoutError);
  CHECK_THROWS_AS(segment(Tensor({8, 2}), ChunkLayout::make(9, 5)), LayoutError);
}

TEST_CASE("async timestep vectors") {
  const std::vector<float> t{0.5f, 0.9f};
  CHECK(async_timesteps(ChunkLayout::with_chunks(2, 3), t) == std::vector<float>{0.0f, 0.5f, 0.5f, 0.5f, 0.9f, 0.9f});
  const std::vector<float> one{0.3f};
  CHECK(async_timesteps(ChunkLayout::with_chunks(1, 4), one) == std::vector<float>{0.0f, 0.3f, 0.3f, 0.3f, 0.3f});
  const std::vector<float> bad{0.5f, 1.1f};
  CHECK_THROWS_AS(async_timesteps(ChunkLayout::with_chunks(2, 3), bad), DomainError);

  // Equal chunk times reproduce synchronous noising bit-exactly.
  CounterRng rng(7);
  const ChunkLayout l = ChunkLayout::with_chunks(3, 4);
  Tensor z0 = Tensor::randn({l.f_total + 1, 2, 2, 2}, rng);
  Tensor eps = Tensor::randn({l.f_total + 1, 2, 2, 2}, rng);
  const std::vector<float> same{0.37f, 0.37f, 0.37f};
  auto tv = async_timesteps(l, same);
  Tensor async_z = add_noise(slice(z0, 0, 1, l.f_total + 1), slice(eps, 0, 1, l.f_total + 1), std::span(tv).subspan(1));
  std::vector<float> sync(static_cast<std::size_t>(l.f_total), 0.37f);
  Tensor sync_z = add_noise(slice(z0, 0, 1, l.f_total + 1), slice(eps, 0, 1, l.f_total + 1), sync);
  CHECK(bit_equal(async_z, sync_z));
}

TEST_CASE("scheduler laws over random layouts") {
  CounterRng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const std::int64_t f = 2 + static_cast<std::int64_t>(rng.below(7));
    const std::int64_t k = 1 + static_cast<std::int64_t>(rng.below(8));
    const ChunkLayout l = ChunkLayout::with_chunks(k, f);
    REQUIRE(l.f_total == 1 + k * (f - 1));

    // Coverage with exactly one shared frame between neighbours.
    std::vector<int> cover(static_cast<std::size_t>(l.f_total), 0);
    for (std::int64_t j = 0; j < k; ++j)
      for (std::int64_t g = l.begin(j); g < l.end(j); ++g) ++cover[static_cast<std::size_t>(g)];
    for (std::int64_t g = 0; g < l.f_total; ++g) {
      const bool shared = g > 0 && g < l.f_total - 1 && g % (f - 1) == 0;
      CHECK(cover[static_cast<std::size_t>(g)] == (shared ? 2 : 1));
    }

    Tensor z = Tensor::randn({l.f_total, 1 + static_cast<std::int64_t>(rng.below(3)), 2}, rng);
    CHECK(bit_equal(stitch(segment(z, l)).latents, z));

    std::vector<float> ts;
    for (std::int64_t j = 0; j < k; ++j) ts.push_back(rng.uniform());
    const auto tv = async_timesteps(l, ts);
    REQUIRE(static_cast<std::int64_t>(tv.size()) == 1 + l.f_total);
    CHECK(tv[0] == 0.0f);
    for (std::int64_t g = 0; g < l.f_total; ++g) {
      const float v = tv[static_cast<std::size_t>(g + 1)];
      CHECK(v == ts[static_cast<std::size_t>(l.owner(g))]);
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
  }
}
