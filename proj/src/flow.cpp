#include "rest/flow.hpp"

#include <cmath>
#include <string>

#include "rest/error.hpp"
#include "rest/ops.hpp"

namespace rest {

Tensor add_noise(const Tensor& z0, const Tensor& eps, std::span<const float> t) {
  if (z0.dims() != eps.dims())
    throw ShapeError("add_noise: z0 " + to_string(z0.dims()) + " vs eps " + to_string(eps.dims()));
  if (z0.rank() < 1 || static_cast<std::int64_t>(t.size()) != z0.dim(0))
    throw ShapeError("add_noise: " + std::to_string(t.size()) + " timesteps for " + to_string(z0.dims()));
  const std::int64_t per = z0.numel() / std::max<std::int64_t>(z0.dim(0), 1);
  std::vector<float> out(static_cast<std::size_t>(z0.numel()));
  const auto a = z0.values();
  const auto b = eps.values();
  for (std::size_t g = 0; g < t.size(); ++g) {
    const float tg = t[g];
    if (!(tg >= 0.0f && tg <= 1.0f)) throw DomainError("timestep " + std::to_string(tg) + " outside [0, 1]");
    const std::size_t base = g * static_cast<std::size_t>(per);
    for (std::size_t i = base; i < base + static_cast<std::size_t>(per); ++i) {
      if (tg == 0.0f)
        out[i] = a[i];
      else if (tg == 1.0f)
        out[i] = b[i];
      else
        out[i] = (1.0f - tg) * a[i] + tg * b[i];
    }
  }
  return Tensor(z0.dims(), std::move(out));
}

Tensor flow_target(const Tensor& z0, const Tensor& eps) { return sub(eps, z0); }

Tensor fm_loss(const Tensor& v_pred, const Tensor& v_target) { return mse(v_pred, v_target); }

Tensor euler_step(const Tensor& zt, const Tensor& v_pred, float t_from, float t_to) {
  if (!(t_from > t_to))
    throw ScheduleError("euler_step needs t_from > t_to, got " + std::to_string(t_from) + " -> " + std::to_string(t_to));
  return add(zt, scale(v_pred, t_to - t_from));
}

TimeSchedule TimeSchedule::uniform(int steps) {
  if (steps < 1) throw ScheduleError("schedule needs at least one step, got " + std::to_string(steps));
  TimeSchedule s;
  for (int i = 0; i <= steps; ++i) s.knots.push_back(static_cast<float>(steps - i) / static_cast<float>(steps));
  return s;
}

void TimeSchedule::validate() const {
  if (knots.size() < 2) throw ScheduleError("schedule needs at least two knots");
  if (knots.front() > 1.0f) throw ScheduleError("schedule starts above 1");
  if (knots.back() != 0.0f) throw ScheduleError("schedule must end at 0");
  for (std::size_t i = 1; i < knots.size(); ++i)
    if (!(knots[i] < knots[i - 1]))
      throw ScheduleError("schedule not strictly decreasing at knot " + std::to_string(i));
}

Tensor timestep_embedding(std::span<const float> t, std::int64_t dim) {
  if (dim <= 0 || dim % 2 != 0) throw ShapeError("timestep embedding dim must be positive and even");
  const std::int64_t half = dim / 2;
  const auto n = static_cast<std::int64_t>(t.size());
  std::vector<float> out(static_cast<std::size_t>(n * dim));
  for (std::int64_t r = 0; r < n; ++r)
    for (std::int64_t i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      const double arg = 1000.0 * t[static_cast<std::size_t>(r)] * freq;
      out[static_cast<std::size_t>(r * dim + i)] = static_cast<float>(std::sin(arg));
      out[static_cast<std::size_t>(r * dim + half + i)] = static_cast<float>(std::cos(arg));
    }
  return Tensor({n, dim}, std::move(out));
}

}  // namespace rest
