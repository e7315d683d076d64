#pragma once

// CPU splatting rasterizer. Gaussians are projected with the local affine
// (EWA) approximation, globally sorted by camera-space depth of their centers
// and alpha-composited front to back into an RGB image and a 16-channel
// identity-feature image with identical weights. The backward pass is the
// exact adjoint of that forward pass.

#include "dsgw/core.hpp"
#include "dsgw/image.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace dsgw {

inline constexpr double kNearPlane = 0.01;
inline constexpr double kCovarianceDilation = 0.3;
inline constexpr double kMaxAlpha = 0.999;
inline constexpr double kTransmittanceStop = 1e-4;

struct ProjectedGaussian {
  Vec2 mean = Vec2::Zero();
  /// Screen-space covariance after the diagonal dilation.
  Mat2 cov = Mat2::Identity();
  /// Screen-space covariance before dilation.
  Mat2 cov_raw = Mat2::Zero();
  double depth = 0.0;
  /// 3-sigma radius in pixels.
  double radius = 0.0;
  // Inclusive pixel footprint, clipped to the image.
  int x0 = 0, x1 = -1, y0 = 0, y1 = -1;
};

namespace detail {

struct ProjectionTerms {
  Mat3 cam_rot;
  Vec3 p_cam;
  Eigen::Matrix<double, 2, 3> jac;
  Eigen::Matrix<double, 2, 3> jw;  // jac * cam_rot
  Quat q_unit;
  double q_norm = 1.0;
  Mat3 rot;
  Vec3 scale;
  Mat3 m;  // rot * diag(scale)
  Mat3 sigma3;
  Mat2 sigma2;  // dilated
  Mat2 conic;   // inverse of sigma2
  Vec2 mean;
};

inline ProjectionTerms projection_terms(const GaussianPrimitive& g, const Camera& cam) {
  ProjectionTerms t;
  t.cam_rot = cam.world_to_cam.rotation_matrix();
  t.p_cam = t.cam_rot * g.center + cam.world_to_cam.translation;
  const double x = t.p_cam.x();
  const double y = t.p_cam.y();
  const double z = t.p_cam.z();
  t.jac << cam.fx / z, 0.0, -cam.fx * x / (z * z), 0.0, cam.fy / z, -cam.fy * y / (z * z);
  t.jw = t.jac * t.cam_rot;
  t.q_norm = g.rotation.norm();
  t.q_unit = Quat(g.rotation.coeffs() / t.q_norm);
  t.rot = t.q_unit.toRotationMatrix();
  t.scale = g.log_scale.array().exp().matrix();
  t.m = t.rot * t.scale.asDiagonal();
  t.sigma3 = t.m * t.m.transpose();
  t.sigma2 = t.jw * t.sigma3 * t.jw.transpose();
  t.sigma2(0, 0) += kCovarianceDilation;
  t.sigma2(1, 1) += kCovarianceDilation;
  t.conic = t.sigma2.inverse();
  t.mean = Vec2(cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy);
  return t;
}

inline std::uint64_t mix_word(std::uint64_t h, std::uint64_t w) {
  h ^= w + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2);
  return h * 0x100000001B3ULL;
}

inline std::uint64_t mix_double(std::uint64_t h, double v) { return mix_word(h, std::bit_cast<std::uint64_t>(v)); }

}  // namespace detail

/// Content hash of every parameter in the field, used to detect stale renders.
inline std::uint64_t field_fingerprint(const GaussianField& field) {
  std::uint64_t h = 0xCBF29CE484222325ULL ^ field.size();
  for (const auto& g : field.primitives) {
    for (int i = 0; i < 3; ++i) h = detail::mix_double(h, g.center[i]);
    for (int i = 0; i < 4; ++i) h = detail::mix_double(h, g.rotation.coeffs()[i]);
    for (int i = 0; i < 3; ++i) h = detail::mix_double(h, g.log_scale[i]);
    h = detail::mix_double(h, g.opacity_logit);
    for (int i = 0; i < 3; ++i) h = detail::mix_double(h, g.color[i]);
    for (int i = 0; i < kIdentityDim; ++i) h = detail::mix_double(h, g.identity[i]);
    h = detail::mix_word(h, static_cast<std::uint64_t>(g.object_label));
  }
  return h;
}

/// Projects one Gaussian; std::nullopt when it is culled (behind the near
/// plane or with a 3-sigma footprint entirely outside the image).
inline std::optional<ProjectedGaussian> project_gaussian(const GaussianPrimitive& g, const Camera& cam) {
  const Vec3 p = cam.world_to_cam.apply(g.center);
  if (!(p.z() > kNearPlane)) {
    return std::nullopt;
  }
  const auto t = detail::projection_terms(g, cam);
  ProjectedGaussian out;
  out.mean = t.mean;
  out.cov = t.sigma2;
  out.cov_raw = t.sigma2 - kCovarianceDilation * Mat2::Identity();
  out.depth = p.z();
  const double mid = 0.5 * (t.sigma2(0, 0) + t.sigma2(1, 1));
  const double half_diff = 0.5 * (t.sigma2(0, 0) - t.sigma2(1, 1));
  const double lambda_max = mid + std::sqrt(half_diff * half_diff + t.sigma2(0, 1) * t.sigma2(0, 1));
  out.radius = 3.0 * std::sqrt(lambda_max);
  if (!std::isfinite(out.radius) || !out.mean.allFinite()) {
    return std::nullopt;
  }
  const double fx0 = std::ceil(out.mean.x() - out.radius);
  const double fx1 = std::floor(out.mean.x() + out.radius);
  const double fy0 = std::ceil(out.mean.y() - out.radius);
  const double fy1 = std::floor(out.mean.y() + out.radius);
  if (fx1 < 0.0 || fy1 < 0.0 || fx0 > cam.width - 1 || fy0 > cam.height - 1) {
    return std::nullopt;
  }
  out.x0 = static_cast<int>(std::max(0.0, fx0));
  out.x1 = static_cast<int>(std::min<double>(cam.width - 1, fx1));
  out.y0 = static_cast<int>(std::max(0.0, fy0));
  out.y1 = static_cast<int>(std::min<double>(cam.height - 1, fy1));
  if (out.x0 > out.x1 || out.y0 > out.y1) {
    return std::nullopt;
  }
  return out;
}

struct Contributor {
  std::uint32_t index = 0;
  double alpha = 0.0;
  /// Transmittance in front of this contributor.
  double transmittance = 1.0;
  bool clamped = false;
};

struct RenderOutput {
  Image color_image;    // 3 channels
  Image feature_image;  // 16 channels
  Image alpha_image;    // 1 channel, accumulated opacity
  /// CSR layout: contributors of pixel p are [offsets[p], offsets[p + 1]),
  /// front to back.
  std::vector<std::uint32_t> offsets;
  std::vector<Contributor> contributors;
  std::uint64_t field_fingerprint = 0;
  std::size_t field_size = 0;
  Camera camera;

  std::span<const Contributor> contributors_at(std::size_t pixel) const {
    return {contributors.data() + offsets[pixel], contributors.data() + offsets[pixel + 1]};
  }

  /// Field indices contributing to `pixel`, front to back.
  std::vector<std::uint32_t> depth_order(std::size_t pixel) const {
    std::vector<std::uint32_t> out;
    for (const auto& c : contributors_at(pixel)) out.push_back(c.index);
    return out;
  }
};

/// Partials of a scalar loss with respect to every primitive parameter.
/// Rotation partials are ordered (w, x, y, z).
struct FieldGradients {
  Eigen::Matrix3Xd center;
  Eigen::Matrix4Xd rotation;
  Eigen::Matrix3Xd log_scale;
  Eigen::RowVectorXd opacity_logit;
  Eigen::Matrix3Xd color;
  Eigen::Matrix<double, kIdentityDim, Eigen::Dynamic> identity;

  static FieldGradients zeros(std::size_t n) {
    const auto cols = static_cast<Eigen::Index>(n);
    FieldGradients g;
    g.center = Eigen::Matrix3Xd::Zero(3, cols);
    g.rotation = Eigen::Matrix4Xd::Zero(4, cols);
    g.log_scale = Eigen::Matrix3Xd::Zero(3, cols);
    g.opacity_logit = Eigen::RowVectorXd::Zero(cols);
    g.color = Eigen::Matrix3Xd::Zero(3, cols);
    g.identity = Eigen::Matrix<double, kIdentityDim, Eigen::Dynamic>::Zero(kIdentityDim, cols);
    return g;
  }

  std::size_t size() const { return static_cast<std::size_t>(center.cols()); }

  FieldGradients& operator+=(const FieldGradients& o) {
    if (o.size() != size()) {
      throw Error(ErrorKind::Input, "gradient sizes differ");
    }
    center += o.center;
    rotation += o.rotation;
    log_scale += o.log_scale;
    opacity_logit += o.opacity_logit;
    color += o.color;
    identity += o.identity;
    return *this;
  }

  FieldGradients& operator*=(double s) {
    center *= s;
    rotation *= s;
    log_scale *= s;
    opacity_logit *= s;
    color *= s;
    identity *= s;
    return *this;
  }

  bool all_zero() const {
    return center.isZero(0) && rotation.isZero(0) && log_scale.isZero(0) && opacity_logit.isZero(0) &&
           color.isZero(0) && identity.isZero(0);
  }

  bool all_finite() const {
    return center.allFinite() && rotation.allFinite() && log_scale.allFinite() &&
           opacity_logit.allFinite() && color.allFinite() && identity.allFinite();
  }
};

using RenderGradients = FieldGradients;

inline RenderOutput render(const GaussianField& field, const Camera& cam) {
  cam.validate();
  const int w = cam.width;
  const int h = cam.height;
  const std::size_t npix = cam.pixel_count();

  RenderOutput out;
  out.color_image = Image(3, w, h);
  out.feature_image = Image(kIdentityDim, w, h);
  out.alpha_image = Image(1, w, h);
  out.field_fingerprint = field_fingerprint(field);
  out.field_size = field.size();
  out.camera = cam;

  struct Splat {
    std::uint32_t index;
    ProjectedGaussian proj;
  };
  std::vector<Splat> splats;
  splats.reserve(field.size());
  for (std::size_t i = 0; i < field.size(); ++i) {
    if (auto p = project_gaussian(field.primitives[i], cam)) {
      splats.push_back({static_cast<std::uint32_t>(i), *p});
    }
  }
  std::sort(splats.begin(), splats.end(), [](const Splat& a, const Splat& b) {
    if (a.proj.depth != b.proj.depth) return a.proj.depth < b.proj.depth;
    return a.index < b.index;
  });

  struct Raw {
    std::uint32_t pixel;
    Contributor c;
  };
  thread_local std::vector<Raw> raw;
  raw.clear();
  std::vector<double> trans(npix, 1.0);
  auto& color = out.color_image.data;
  auto& feature = out.feature_image.data;

  for (const auto& s : splats) {
    const auto& g = field.primitives[s.index];
    const double opacity = g.opacity();
    const Mat2 conic = s.proj.cov.inverse();
    const double ca = conic(0, 0);
    const double cb = conic(0, 1);
    const double cc = conic(1, 1);
    for (int y = s.proj.y0; y <= s.proj.y1; ++y) {
      const double dy = y - s.proj.mean.y();
      for (int x = s.proj.x0; x <= s.proj.x1; ++x) {
        const std::size_t p = static_cast<std::size_t>(y) * w + x;
        const double t = trans[p];
        if (t < kTransmittanceStop) {
          continue;
        }
        const double dx = x - s.proj.mean.x();
        const double power = -0.5 * (ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy);
        double alpha = opacity * std::exp(power);
        bool clamped = false;
        if (alpha > kMaxAlpha) {
          alpha = kMaxAlpha;
          clamped = true;
        }
        const double weight = alpha * t;
        const auto col = static_cast<Eigen::Index>(p);
        for (int c = 0; c < 3; ++c) color(c, col) += g.color[c] * weight;
        for (int c = 0; c < kIdentityDim; ++c) feature(c, col) += g.identity[c] * weight;
        raw.push_back({static_cast<std::uint32_t>(p), {s.index, alpha, t, clamped}});
        trans[p] = t * (1.0 - alpha);
      }
    }
  }

  for (std::size_t p = 0; p < npix; ++p) {
    out.alpha_image.data(0, static_cast<Eigen::Index>(p)) = 1.0 - trans[p];
  }

  // Stable counting sort by pixel keeps each pixel's list in depth order.
  out.offsets.assign(npix + 1, 0);
  for (const auto& r : raw) out.offsets[r.pixel + 1]++;
  for (std::size_t p = 0; p < npix; ++p) out.offsets[p + 1] += out.offsets[p];
  out.contributors.resize(raw.size());
  std::vector<std::uint32_t> cursor(out.offsets.begin(), out.offsets.end() - 1);
  for (const auto& r : raw) out.contributors[cursor[r.pixel]++] = r.c;
  return out;
}

namespace detail {

/// dL/dq for an unnormalized quaternion given dL/dR of R(q / |q|).
inline Vec4 quat_grad_from_rotation_grad(const ProjectionTerms& t, const Mat3& gr) {
  const double w = t.q_unit.w(), x = t.q_unit.x(), y = t.q_unit.y(), z = t.q_unit.z();
  Vec4 gq;  // w, x, y, z with respect to the unit quaternion
  gq[0] = 2.0 * (-z * gr(0, 1) + y * gr(0, 2) + z * gr(1, 0) - x * gr(1, 2) - y * gr(2, 0) + x * gr(2, 1));
  gq[1] = 2.0 * (y * gr(0, 1) + z * gr(0, 2) + y * gr(1, 0) - 2.0 * x * gr(1, 1) - w * gr(1, 2) +
                 z * gr(2, 0) + w * gr(2, 1) - 2.0 * x * gr(2, 2));
  gq[2] = 2.0 * (-2.0 * y * gr(0, 0) + x * gr(0, 1) + w * gr(0, 2) + x * gr(1, 0) + z * gr(1, 2) -
                 w * gr(2, 0) + z * gr(2, 1) - 2.0 * y * gr(2, 2));
  gq[3] = 2.0 * (-2.0 * z * gr(0, 0) - w * gr(0, 1) + x * gr(0, 2) + w * gr(1, 0) - 2.0 * z * gr(1, 1) +
                 y * gr(1, 2) + x * gr(2, 0) + y * gr(2, 1));
  const Vec4 qu(w, x, y, z);
  return (gq - qu * qu.dot(gq)) / t.q_norm;
}

}  // namespace detail

/// Adjoint of render(). `forward` must come from render(field, cam) on the
/// unchanged field; anything else is a state error.
inline FieldGradients render_backward(const GaussianField& field, const Camera& cam,
                                      const RenderOutput& forward, const Eigen::MatrixXd& grad_color,
                                      const Eigen::MatrixXd& grad_feature) {
  const std::size_t npix = cam.pixel_count();
  if (forward.field_size != field.size() || forward.field_fingerprint != field_fingerprint(field)) {
    throw Error(ErrorKind::State, "render_backward: field changed since the forward render");
  }
  if (forward.offsets.size() != npix + 1) {
    throw Error(ErrorKind::State, "render_backward: forward render used a different camera");
  }
  const auto ncols = static_cast<Eigen::Index>(npix);
  if (grad_color.rows() != 3 || grad_color.cols() != ncols || grad_feature.rows() != kIdentityDim ||
      grad_feature.cols() != ncols) {
    throw Error(ErrorKind::Input, "render_backward: upstream gradient shape mismatch");
  }

  const std::size_t n = field.size();
  FieldGradients grads = FieldGradients::zeros(n);
  std::vector<Vec2> g_mean(n, Vec2::Zero());
  std::vector<Mat2> g_conic(n, Mat2::Zero());
  std::vector<double> g_opacity(n, 0.0);
  std::vector<char> touched(n, 0);
  std::vector<Vec2> means(n, Vec2::Zero());
  std::vector<Mat2> conics(n, Mat2::Zero());
  std::vector<char> projected(n, 0);

  const int w = cam.width;
  for (std::size_t p = 0; p < npix; ++p) {
    const auto list = forward.contributors_at(p);
    if (list.empty()) {
      continue;
    }
    const auto col = static_cast<Eigen::Index>(p);
    const Vec3 gc = grad_color.col(col);
    const IdentityVec gs = grad_feature.col(col);
    if (gc.isZero(0) && gs.isZero(0)) {
      continue;
    }
    const double px = static_cast<double>(p % w);
    const double py = static_cast<double>(p / w);
    double acc = 0.0;
    for (std::size_t k = list.size(); k-- > 0;) {
      const Contributor& c = list[k];
      const auto& g = field.primitives[c.index];
      const double weight = c.alpha * c.transmittance;
      grads.color.col(c.index) += weight * gc;
      grads.identity.col(c.index) += weight * gs;
      const double v = g.color.dot(gc) + g.identity.dot(gs);
      const double g_alpha = c.transmittance * v - acc / (1.0 - c.alpha);
      acc += weight * v;
      if (c.clamped) {
        continue;
      }
      if (!projected[c.index]) {
        const auto t = detail::projection_terms(g, cam);
        means[c.index] = t.mean;
        conics[c.index] = t.conic;
        projected[c.index] = 1;
      }
      const Vec2 d(px - means[c.index].x(), py - means[c.index].y());
      const double g_power = g_alpha * c.alpha;
      g_opacity[c.index] += g_alpha * c.alpha * (1.0 - g.opacity());
      g_mean[c.index] += g_power * (conics[c.index] * d);
      g_conic[c.index] += (-0.5 * g_power) * (d * d.transpose());
      touched[c.index] = 1;
    }
  }

  for (std::size_t i = 0; i < n; ++i) {
    if (!touched[i]) {
      continue;
    }
    const auto& g = field.primitives[i];
    const auto t = detail::projection_terms(g, cam);
    const auto col = static_cast<Eigen::Index>(i);
    grads.opacity_logit(col) += g_opacity[i];

    const Mat2 g_sigma2 = -t.conic.transpose() * g_conic[i] * t.conic.transpose();
    const Mat3 g_sigma3 = t.jw.transpose() * g_sigma2 * t.jw;
    const Eigen::Matrix<double, 2, 3> g_jw =
        g_sigma2 * t.jw * t.sigma3.transpose() + g_sigma2.transpose() * t.jw * t.sigma3;
    const Eigen::Matrix<double, 2, 3> g_jac = g_jw * t.cam_rot.transpose();

    const double x = t.p_cam.x(), y = t.p_cam.y(), z = t.p_cam.z();
    const double z2 = z * z, z3 = z2 * z;
    Vec3 g_p = t.jac.transpose() * g_mean[i];
    g_p.x() += g_jac(0, 2) * (-cam.fx / z2);
    g_p.y() += g_jac(1, 2) * (-cam.fy / z2);
    g_p.z() += g_jac(0, 0) * (-cam.fx / z2) + g_jac(0, 2) * (2.0 * cam.fx * x / z3) +
               g_jac(1, 1) * (-cam.fy / z2) + g_jac(1, 2) * (2.0 * cam.fy * y / z3);
    grads.center.col(col) += t.cam_rot.transpose() * g_p;

    const Mat3 g_m = (g_sigma3 + g_sigma3.transpose()) * t.m;
    Mat3 g_rot;
    for (int j = 0; j < 3; ++j) {
      g_rot.col(j) = g_m.col(j) * t.scale[j];
      const double g_s = g_m.col(j).dot(t.rot.col(j));
      grads.log_scale(j, col) += g_s * t.scale[j];
    }
    grads.rotation.col(col) += detail::quat_grad_from_rotation_grad(t, g_rot);
  }
  return grads;
}

}  // namespace dsgw
