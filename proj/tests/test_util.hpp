#pragma once

// Shared fixtures for the unit tests: random scenes, parameter addressing and
// central finite differences.

#include "dsgw/core.hpp"
#include "dsgw/random.hpp"
#include "dsgw/rasterizer.hpp"

#include <cmath>
#include <functional>

namespace dsgw::testing {

inline constexpr int kSlotsPerPrimitive = 3 + 4 + 3 + 1 + 3 + kIdentityDim;

/// Slot layout: center(0-2) rotation w,x,y,z(3-6) log_scale(7-9)
/// opacity(10) color(11-13) identity(14-29).
inline double& param_ref(GaussianPrimitive& g, int slot) {
  if (slot < 3) return g.center[slot];
  if (slot == 3) return g.rotation.w();
  if (slot == 4) return g.rotation.x();
  if (slot == 5) return g.rotation.y();
  if (slot == 6) return g.rotation.z();
  if (slot < 10) return g.log_scale[slot - 7];
  if (slot == 10) return g.opacity_logit;
  if (slot < 14) return g.color[slot - 11];
  return g.identity[slot - 14];
}

inline double grad_at(const FieldGradients& gr, std::size_t i, int slot) {
  const auto c = static_cast<Eigen::Index>(i);
  if (slot < 3) return gr.center(slot, c);
  if (slot < 7) return gr.rotation(slot - 3, c);
  if (slot < 10) return gr.log_scale(slot - 7, c);
  if (slot == 10) return gr.opacity_logit(c);
  if (slot < 14) return gr.color(slot - 11, c);
  return gr.identity(slot - 14, c);
}

inline Quat random_unit_quat(Rng& rng) {
  Quat q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  return q.normalized();
}

/// Camera on the -z side of the origin looking along +z.
inline Camera front_camera(int size, double distance = 4.0, double fov_deg = 50.0) {
  return Camera::look_at(Vec3(0.3, -0.2, -distance), Vec3::Zero(), size, size, fov_deg);
}

/// Random Gaussians clustered around the origin, all in front of front_camera().
inline GaussianField random_field(Rng& rng, int n, double spread = 0.8, int objects = 0) {
  GaussianField f;
  f.object_count = objects;
  for (int i = 0; i < n; ++i) {
    GaussianPrimitive g;
    g.center = Vec3(rng.uniform(-spread, spread), rng.uniform(-spread, spread), rng.uniform(-spread, spread));
    g.rotation = random_unit_quat(rng);
    g.log_scale = Vec3(std::log(rng.uniform(0.08, 0.3)), std::log(rng.uniform(0.08, 0.3)),
                       std::log(rng.uniform(0.08, 0.3)));
    g.opacity_logit = rng.uniform(-1.5, 2.0);
    g.color = Vec3(rng.uniform(), rng.uniform(), rng.uniform());
    for (int k = 0; k < kIdentityDim; ++k) g.identity[k] = rng.normal(0.0, 0.5);
    g.object_label = objects > 0 ? static_cast<int>(rng.index(objects + 1)) : 0;
    f.primitives.push_back(g);
  }
  return f;
}

/// |a - b| <= max(rel * max(|a|, |b|), abs_floor)
inline bool close_rel(double a, double b, double rel, double abs_floor) {
  return std::abs(a - b) <= std::max(rel * std::max(std::abs(a), std::abs(b)), abs_floor);
}

/// Same pixels, same contributors, same clamping: the render is locally smooth.
inline bool same_structure(const RenderOutput& a, const RenderOutput& b) {
  if (a.offsets != b.offsets || a.contributors.size() != b.contributors.size()) return false;
  for (std::size_t k = 0; k < a.contributors.size(); ++k) {
    if (a.contributors[k].index != b.contributors[k].index) return false;
    if (a.contributors[k].clamped != b.contributors[k].clamped) return false;
  }
  return true;
}

/// Central difference of `loss` with respect to one slot of one primitive.
inline double central_difference(GaussianField& field, std::size_t i, int slot,
                                 const std::function<double(const GaussianField&)>& loss, double h) {
  double& v = param_ref(field.primitives[i], slot);
  const double saved = v;
  v = saved + h;
  const double up = loss(field);
  v = saved - h;
  const double down = loss(field);
  v = saved;
  return (up - down) / (2.0 * h);
}

}  // namespace dsgw::testing
