#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "rest/tensor.hpp"

// Straight-path flow matching. Latent sequences are frame-major, so a
// per-frame timestep broadcasts over everything after the leading axis.

namespace rest {

/// zt = (1 - t) * z0 + t * eps, one t per leading-axis frame. Frames with
/// t == 0 or t == 1 are copied bit-exactly from z0 or eps.
/// Throws DomainError for t outside [0, 1].
Tensor add_noise(const Tensor& z0, const Tensor& eps, std::span<const float> t);

/// v = eps - z0.
Tensor flow_target(const Tensor& z0, const Tensor& eps);

/// Mean squared error between predicted and target fields.
Tensor fm_loss(const Tensor& v_pred, const Tensor& v_target);

/// zt + (t_to - t_from) * v. Throws ScheduleError unless t_from > t_to.
Tensor euler_step(const Tensor& zt, const Tensor& v_pred, float t_from, float t_to);

/// Descending knots T_1 > ... > T_m = 0; consecutive knots define one Euler
/// step, so a schedule of n steps has n + 1 knots.
struct TimeSchedule {
  std::vector<float> knots;

  /// n uniform steps from 1 to 0.
  static TimeSchedule uniform(int steps);
  [[nodiscard]] int steps() const { return static_cast<int>(knots.size()) - 1; }
  /// Throws ScheduleError if not strictly decreasing, T_1 > 1, or T_m != 0.
  void validate() const;
};

/// Sinusoidal features [len(t), dim] of 1000 * t; dim must be even.
Tensor timestep_embedding(std::span<const float> t, std::int64_t dim);

}  // namespace rest
