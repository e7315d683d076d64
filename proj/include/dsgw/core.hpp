#pragma once

// Domain types shared by every module: Gaussian primitives and fields, rigid
// transforms, per-object scene transforms, cameras and covariance assembly.
//
// World convention: z is up, the ground is the plane z = 0. Cameras follow the
// pinhole convention with +z forward, +x right and +y down in image space.

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dsgw {

inline constexpr int kIdentityDim = 16;
inline constexpr int kNumClasses = 256;

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Quat = Eigen::Quaterniond;
using IdentityVec = Eigen::Matrix<double, kIdentityDim, 1>;

enum class ErrorKind {
  ParameterDomain,
  LabelDomain,
  Input,
  State,
  Placement,
  Generation,
  Divergence,
  BadMagic,
  Truncated,
  Version,
  Io,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::ParameterDomain: return "parameter_domain";
    case ErrorKind::LabelDomain: return "label_domain";
    case ErrorKind::Input: return "input";
    case ErrorKind::State: return "state";
    case ErrorKind::Placement: return "placement";
    case ErrorKind::Generation: return "generation";
    case ErrorKind::Divergence: return "divergence";
    case ErrorKind::BadMagic: return "bad_magic";
    case ErrorKind::Truncated: return "truncated";
    case ErrorKind::Version: return "version";
    case ErrorKind::Io: return "io";
  }
  return "unknown";
}

/// Every failure raised by the library. `kind()` is stable and machine readable.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline double sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

// ---------------------------------------------------------------------------
// Primitives and fields

struct GaussianPrimitive {
  Vec3 center = Vec3::Zero();
  Quat rotation = Quat::Identity();
  /// Per-axis log standard deviation.
  Vec3 log_scale = Vec3::Zero();
  double opacity_logit = 0.0;
  Vec3 color = Vec3::Zero();
  IdentityVec identity = IdentityVec::Zero();
  /// 0 is background, o >= 1 is foreground object o.
  int object_label = 0;

  double opacity() const { return sigmoid(opacity_logit); }
  Vec3 scale() const { return log_scale.array().exp().matrix(); }
  bool is_background() const { return object_label == 0; }
};

struct GaussianField {
  std::vector<GaussianPrimitive> primitives;
  int object_count = 0;

  std::size_t size() const { return primitives.size(); }
  bool empty() const { return primitives.empty(); }

  std::set<int> label_set() const {
    std::set<int> labels;
    for (const auto& g : primitives) {
      labels.insert(g.object_label);
    }
    return labels;
  }

  /// Throws LabelDomain when a label falls outside {0, ..., object_count}.
  void validate_labels() const {
    for (std::size_t i = 0; i < primitives.size(); ++i) {
      const int label = primitives[i].object_label;
      if (label < 0 || label > object_count) {
        throw Error(ErrorKind::LabelDomain,
                    "primitive " + std::to_string(i) + " has label " + std::to_string(label) +
                        " outside [0, " + std::to_string(object_count) + "]");
      }
    }
  }

  std::vector<std::size_t> indices_with_label(int label) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < primitives.size(); ++i) {
      if (primitives[i].object_label == label) {
        out.push_back(i);
      }
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Rigid transforms

struct RigidTransform {
  Quat rotation = Quat::Identity();
  Vec3 translation = Vec3::Zero();

  static RigidTransform identity() { return {}; }

  static RigidTransform translate(const Vec3& t) { return {Quat::Identity(), t}; }

  static RigidTransform rotate(const Quat& q) { return {q.normalized(), Vec3::Zero()}; }

  static RigidTransform rot_z(double radians) {
    return {Quat(Eigen::AngleAxisd(radians, Vec3::UnitZ())), Vec3::Zero()};
  }

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }

  Mat3 rotation_matrix() const { return rotation.toRotationMatrix(); }

  Eigen::Matrix4d matrix() const {
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    m.topLeftCorner<3, 3>() = rotation_matrix();
    m.topRightCorner<3, 1>() = translation;
    return m;
  }
};

/// Applying the result equals applying `b` first and then `a`.
inline RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
  RigidTransform out;
  out.rotation = (a.rotation * b.rotation).normalized();
  out.translation = a.rotation * b.translation + a.translation;
  return out;
}

inline RigidTransform invert(const RigidTransform& t) {
  RigidTransform out;
  out.rotation = t.rotation.conjugate().normalized();
  out.translation = -(out.rotation * t.translation);
  return out;
}

/// Per-object rigid motions. Objects without an entry stay put; the
/// background (label 0) can never carry one.
class SceneTransform {
 public:
  SceneTransform() = default;

  void set(int label, const RigidTransform& t) {
    if (label <= 0) {
      throw Error(ErrorKind::LabelDomain,
                  "scene transforms only apply to foreground labels >= 1, got " +
                      std::to_string(label));
    }
    per_object_[label] = t;
  }

  RigidTransform get(int label) const {
    const auto it = per_object_.find(label);
    return it == per_object_.end() ? RigidTransform::identity() : it->second;
  }

  bool contains(int label) const { return per_object_.count(label) != 0; }
  bool empty() const { return per_object_.empty(); }
  std::size_t size() const { return per_object_.size(); }

  const std::map<int, RigidTransform>& per_object() const { return per_object_; }

 private:
  std::map<int, RigidTransform> per_object_;
};

/// Per-object composition; labels missing on either side count as identity.
inline SceneTransform compose(const SceneTransform& a, const SceneTransform& b) {
  std::set<int> labels;
  for (const auto& [label, _] : a.per_object()) labels.insert(label);
  for (const auto& [label, _] : b.per_object()) labels.insert(label);
  SceneTransform out;
  for (int label : labels) {
    out.set(label, compose(a.get(label), b.get(label)));
  }
  return out;
}

inline SceneTransform invert(const SceneTransform& t) {
  SceneTransform out;
  for (const auto& [label, rt] : t.per_object()) {
    out.set(label, invert(rt));
  }
  return out;
}

enum class LabelPolicy {
  /// Transforms naming a label absent from the field are rejected.
  Strict,
  /// Such transforms are ignored.
  Lenient,
};

/// Moves every foreground primitive by its object's rigid transform. Background
/// primitives are copied untouched and storage order is preserved.
inline GaussianField apply_scene_transform(const GaussianField& field, const SceneTransform& t,
                                           LabelPolicy policy = LabelPolicy::Strict) {
  if (policy == LabelPolicy::Strict && !t.empty()) {
    const auto labels = field.label_set();
    for (const auto& [label, _] : t.per_object()) {
      if (!labels.count(label)) {
        throw Error(ErrorKind::LabelDomain,
                    "scene transform names object " + std::to_string(label) +
                        " which is absent from the field");
      }
    }
  }
  GaussianField out = field;
  if (t.empty()) {
    return out;
  }
  for (auto& g : out.primitives) {
    if (g.object_label == 0) {
      continue;
    }
    const auto it = t.per_object().find(g.object_label);
    if (it == t.per_object().end()) {
      continue;
    }
    g.center = it->second.apply(g.center);
    g.rotation = it->second.rotation * g.rotation;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Covariance

inline constexpr double kUnitQuatTolerance = 1e-6;

namespace detail {

/// R(q) from a quaternion that is normalized first; no domain check.
inline Mat3 rotation_from_quat(const Quat& q) { return q.normalized().toRotationMatrix(); }

inline Mat3 covariance_unchecked(const Quat& q, const Vec3& log_scale) {
  const Mat3 m = rotation_from_quat(q) * log_scale.array().exp().matrix().asDiagonal();
  return m * m.transpose();
}

}  // namespace detail

/// Sigma = R S S^T R^T with S = diag(exp(log_scale)).
inline Mat3 build_covariance(const Quat& rotation, const Vec3& log_scale) {
  if (std::abs(rotation.norm() - 1.0) > kUnitQuatTolerance) {
    throw Error(ErrorKind::ParameterDomain,
                "rotation quaternion is not unit length (norm " +
                    std::to_string(rotation.norm()) + ")");
  }
  return detail::covariance_unchecked(rotation, log_scale);
}

// ---------------------------------------------------------------------------
// Camera

struct Camera {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 1;
  int height = 1;
  RigidTransform world_to_cam;

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0)) {
      throw Error(ErrorKind::Input, "camera focal lengths must be positive");
    }
    if (width <= 0 || height <= 0) {
      throw Error(ErrorKind::Input, "camera image size must be positive");
    }
    if (!(cx >= 0.0 && cx < width && cy >= 0.0 && cy < height)) {
      throw Error(ErrorKind::Input, "camera principal point lies outside the image");
    }
  }

  std::size_t pixel_count() const {
    return static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  }

  Vec3 position() const { return invert(world_to_cam).translation; }

  /// Camera at `eye` looking at `target` with world +z as the up hint.
  static Camera look_at(const Vec3& eye, const Vec3& target, int width, int height,
                        double vertical_fov_deg) {
    const Vec3 forward = (target - eye).normalized();
    Vec3 right = forward.cross(Vec3::UnitZ());
    if (right.norm() < 1e-9) {
      right = Vec3::UnitX();
    }
    right.normalize();
    const Vec3 down = forward.cross(right).normalized();
    Mat3 r;
    r.row(0) = right.transpose();
    r.row(1) = down.transpose();
    r.row(2) = forward.transpose();
    Camera cam;
    cam.width = width;
    cam.height = height;
    const double half = vertical_fov_deg * M_PI / 360.0;
    cam.fy = 0.5 * height / std::tan(half);
    cam.fx = cam.fy;
    cam.cx = 0.5 * (width - 1);
    cam.cy = 0.5 * (height - 1);
    cam.world_to_cam.rotation = Quat(r).normalized();
    cam.world_to_cam.translation = -(r * eye);
    return cam;
  }
};

}  // namespace dsgw
