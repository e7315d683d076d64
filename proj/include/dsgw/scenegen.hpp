#pragma once

// Procedural dual-state tabletop scenes. Spheres and boxes rest on a textured
// ground plane; each state places them differently and the generator renders
// exact ground truth by ray casting (3x3 supersampled color, center-ray masks)
// together with labelled point clouds for initialization.

#include "dsgw/core.hpp"
#include "dsgw/image.hpp"
#include "dsgw/losses.hpp"
#include "dsgw/metrics.hpp"
#include "dsgw/random.hpp"
#include "dsgw/statetransfer.hpp"

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace dsgw {

enum class ShapeKind { Sphere, Box };

inline const char* to_string(ShapeKind k) { return k == ShapeKind::Sphere ? "sphere" : "box"; }

inline ShapeKind shape_from_string(const std::string& s) {
  if (s == "sphere") return ShapeKind::Sphere;
  if (s == "box") return ShapeKind::Box;
  throw Error(ErrorKind::Input, "unknown shape '" + s + "' (expected sphere or box)");
}

struct ObjectShape {
  ShapeKind kind = ShapeKind::Sphere;
  /// Sphere: radius in x. Box: half extents.
  Vec3 size = Vec3::Constant(0.3);
  Vec3 albedo = Vec3(0.8, 0.3, 0.2);
  double phase = 0.0;

  /// Height of the object center above the ground.
  double rest_height() const { return kind == ShapeKind::Sphere ? size.x() : size.z(); }
  /// Radius of a circle enclosing the ground footprint.
  double footprint_radius() const {
    return kind == ShapeKind::Sphere ? size.x() : std::hypot(size.x(), size.y());
  }
};

/// Upright placement on the ground: position and heading.
struct Pose {
  double x = 0.0;
  double y = 0.0;
  double yaw = 0.0;
};

inline RigidTransform pose_transform(const ObjectShape& s, const Pose& p) {
  return {Quat(Eigen::AngleAxisd(p.yaw, Vec3::UnitZ())), Vec3(p.x, p.y, s.rest_height())};
}

struct SceneSpec {
  int object_count = 2;
  /// Cycled over the objects; empty means alternate sphere, box.
  std::vector<std::string> shapes;
  double ground_half_extent = 2.7;
  double ground_spacing = 0.13;
  double object_point_spacing = 0.065;
  double placement_half_extent = 1.25;
  double sphere_radius_min = 0.28;
  double sphere_radius_max = 0.35;
  double box_half_min = 0.2;
  double box_half_max = 0.27;
  double checker_period = 1.0;
  double checker_sharpness = 2.0;
  double checker_contrast = 0.12;
  double noise_amplitude = 0.04;
  double noise_scale = 0.4;
  int train_views = 24;
  int test_views = 8;
  double camera_radius = 4.0;
  double elevation_deg = 65.0;
  double fov_deg = 38.0;
  int width = 64;
  int height = 64;
  int supersample = 3;
  /// Boundary erosion or dilation applied to training masks, in pixels.
  int mask_noise_px = 0;
  double footprint_margin = 0.1;
  int max_attempts = 1000;
  std::uint64_t seed = 0;

  void validate() const {
    if (object_count < 0 || object_count > 5) {
      throw Error(ErrorKind::Input, "object_count must be in [0, 5]");
    }
    if (width < 11 || height < 11) throw Error(ErrorKind::Input, "images must be at least 11x11");
    if (train_views < 1 || test_views < 0) throw Error(ErrorKind::Input, "need at least one training view");
    if (!(ground_spacing > 0.0) || !(object_point_spacing > 0.0)) {
      throw Error(ErrorKind::Input, "point spacings must be positive");
    }
    if (supersample < 1) throw Error(ErrorKind::Input, "supersample must be >= 1");
    if (mask_noise_px < 0) throw Error(ErrorKind::Input, "mask_noise_px must be >= 0");
    if (!(placement_half_extent > 0.0) || ground_half_extent < placement_half_extent + 0.5) {
      throw Error(ErrorKind::Input, "ground must extend at least 0.5 beyond the placement region");
    }
    for (const auto& s : shapes) shape_from_string(s);
  }
};

/// Everything needed to ray-trace any configuration of the scene.
struct SceneDescription {
  SceneSpec spec;
  std::vector<ObjectShape> objects;

  int object_count() const { return static_cast<int>(objects.size()); }
};

struct PointCloud {
  std::vector<Vec3> positions;
  std::vector<Vec3> colors;
  std::vector<int> labels;

  std::size_t size() const { return positions.size(); }
};

struct StateViews {
  std::vector<Observation> train;
  std::vector<Observation> test;
};

struct DualSceneBundle {
  SceneDescription scene;
  std::vector<Camera> train_cameras;
  std::vector<Camera> test_cameras;
  std::vector<Pose> poses1, poses2, poses_test;
  StateViews state1;
  StateViews state2;
  PointCloud points1;
  PointCloud points2;
  SceneTransform t_12;
  /// From state 1 to the held-out test state.
  SceneTransform t_1t;
  /// Ground truth of the test state seen from the test cameras.
  std::vector<Observation> test_views;
  /// Region pseudo-states may use.
  Aabb bounds;

  int object_count() const { return scene.object_count(); }
};

// ---------------------------------------------------------------------------
// Textures

namespace detail {

inline double lattice_value(std::int64_t ix, std::int64_t iy, std::uint64_t seed) {
  const std::uint64_t h = mix_seed(seed ^ (static_cast<std::uint64_t>(ix) * 0x9E3779B185EBCA87ULL),
                                   static_cast<std::uint64_t>(iy) * 0xC2B2AE3D27D4EB4FULL);
  return static_cast<double>(h >> 11) * 0x1.0p-53 * 2.0 - 1.0;
}

/// Smoothly interpolated lattice noise in [-1, 1].
inline double value_noise(double x, double y, std::uint64_t seed) {
  const double fx = std::floor(x);
  const double fy = std::floor(y);
  const auto ix = static_cast<std::int64_t>(fx);
  const auto iy = static_cast<std::int64_t>(fy);
  double tx = x - fx;
  double ty = y - fy;
  tx = tx * tx * (3.0 - 2.0 * tx);
  ty = ty * ty * (3.0 - 2.0 * ty);
  const double a = lattice_value(ix, iy, seed);
  const double b = lattice_value(ix + 1, iy, seed);
  const double c = lattice_value(ix, iy + 1, seed);
  const double d = lattice_value(ix + 1, iy + 1, seed);
  return (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty;
}

}  // namespace detail

inline Vec3 ground_albedo(const SceneSpec& s, double x, double y) {
  const double w = 2.0 * M_PI / s.checker_period;
  const double checker = std::tanh(s.checker_sharpness * std::sin(w * x) * std::sin(w * y)) /
                         std::tanh(s.checker_sharpness);
  const double n = detail::value_noise(x / s.noise_scale, y / s.noise_scale, s.seed ^ 0x51ED270B27A4D7E3ULL);
  const Vec3 base(0.62, 0.55, 0.45);
  Vec3 c = base * (1.0 + s.checker_contrast * checker) + s.noise_amplitude * n * Vec3(1.0, 0.9, 0.8);
  return c.cwiseMax(0.0).cwiseMin(1.0);
}

/// Albedo at a point given in the object's local frame.
inline Vec3 object_albedo(const ObjectShape& o, const Vec3& local) {
  if (o.kind == ShapeKind::Sphere) {
    const Vec3 d = local.normalized();
    const double lon = std::atan2(d.y(), d.x());
    const double f = 0.8 + 0.2 * std::sin(3.0 * lon + o.phase) + 0.08 * d.z();
    return (o.albedo * f).cwiseMax(0.0).cwiseMin(1.0);
  }
  static const double tint[6] = {0.86, 0.74, 0.95, 0.8, 1.0, 0.7};
  const Vec3 r = local.cwiseQuotient(o.size).cwiseAbs();
  int axis = 0;
  r.maxCoeff(&axis);
  const int face = 2 * axis + (local[axis] > 0.0 ? 1 : 0);
  const double f = tint[face] + 0.06 * std::sin(o.phase + 4.0 * (local.x() + local.y() + local.z()));
  return (o.albedo * f).cwiseMax(0.0).cwiseMin(1.0);
}

// ---------------------------------------------------------------------------
// Ray casting

struct RayHit {
  double t = std::numeric_limits<double>::infinity();
  int label = -1;  // -1 nothing, 0 ground, o >= 1 object
  Vec3 point = Vec3::Zero();
  Vec3 albedo = Vec3::Zero();
};

namespace detail {

inline std::optional<double> intersect_sphere(const Vec3& o, const Vec3& d, double r) {
  const double b = o.dot(d);
  const double c = o.squaredNorm() - r * r;
  const double disc = b * b - c * d.squaredNorm();
  if (disc < 0.0) return std::nullopt;
  const double a = d.squaredNorm();
  const double sq = std::sqrt(disc);
  double t = (-b - sq) / a;
  if (t <= 1e-9) t = (-b + sq) / a;
  if (t <= 1e-9) return std::nullopt;
  return t;
}

inline std::optional<double> intersect_box(const Vec3& o, const Vec3& d, const Vec3& half) {
  double t0 = -std::numeric_limits<double>::infinity();
  double t1 = std::numeric_limits<double>::infinity();
  for (int i = 0; i < 3; ++i) {
    if (std::abs(d[i]) < 1e-15) {
      if (std::abs(o[i]) > half[i]) return std::nullopt;
      continue;
    }
    double a = (-half[i] - o[i]) / d[i];
    double b = (half[i] - o[i]) / d[i];
    if (a > b) std::swap(a, b);
    t0 = std::max(t0, a);
    t1 = std::min(t1, b);
  }
  if (t0 > t1 || t1 <= 1e-9) return std::nullopt;
  return t0 > 1e-9 ? t0 : t1;
}

}  // namespace detail

inline RayHit cast_ray(const SceneDescription& scene, const std::vector<Pose>& poses, const Vec3& origin,
                       const Vec3& dir) {
  RayHit hit;
  for (int k = 0; k < scene.object_count(); ++k) {
    const auto& obj = scene.objects[static_cast<std::size_t>(k)];
    const RigidTransform inv = invert(pose_transform(obj, poses[static_cast<std::size_t>(k)]));
    const Vec3 lo = inv.apply(origin);
    const Vec3 ld = inv.rotation * dir;
    const auto t = obj.kind == ShapeKind::Sphere ? detail::intersect_sphere(lo, ld, obj.size.x())
                                                 : detail::intersect_box(lo, ld, obj.size);
    if (t && *t < hit.t) {
      hit.t = *t;
      hit.label = k + 1;
      hit.point = origin + *t * dir;
      hit.albedo = object_albedo(obj, lo + *t * ld);
    }
  }
  if (dir.z() < 0.0) {
    const double t = -origin.z() / dir.z();
    if (t > 0.0 && t < hit.t) {
      hit.t = t;
      hit.label = 0;
      hit.point = origin + t * dir;
      hit.albedo = ground_albedo(scene.spec, hit.point.x(), hit.point.y());
    }
  }
  return hit;
}

inline Vec3 pixel_ray(const Camera& cam, double u, double v) {
  const Vec3 dc((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0);
  return (cam.world_to_cam.rotation.conjugate() * dc).normalized();
}

struct OracleFrame {
  Image color;
  LabelImage mask;
  /// Ground hit of the center ray per pixel; NaN where an object is hit.
  Eigen::Matrix2Xd ground_xy;
};

inline OracleFrame oracle_render(const SceneDescription& scene, const std::vector<Pose>& poses, const Camera& cam) {
  const int ss = scene.spec.supersample;
  OracleFrame f;
  f.color = Image(3, cam.width, cam.height);
  f.mask = LabelImage(cam.width, cam.height);
  f.ground_xy = Eigen::Matrix2Xd::Constant(2, static_cast<Eigen::Index>(cam.pixel_count()),
                                           std::numeric_limits<double>::quiet_NaN());
  const Vec3 origin = cam.position();
  for (int y = 0; y < cam.height; ++y) {
    for (int x = 0; x < cam.width; ++x) {
      Vec3 acc = Vec3::Zero();
      for (int sy = 0; sy < ss; ++sy) {
        for (int sx = 0; sx < ss; ++sx) {
          const double u = x + (sx + 0.5) / ss - 0.5;
          const double v = y + (sy + 0.5) / ss - 0.5;
          acc += cast_ray(scene, poses, origin, pixel_ray(cam, u, v)).albedo;
        }
      }
      const auto p = static_cast<Eigen::Index>(y) * cam.width + x;
      f.color.data.col(p) = acc / static_cast<double>(ss * ss);
      const RayHit center = cast_ray(scene, poses, origin, pixel_ray(cam, x, y));
      f.mask.at(x, y) = std::max(center.label, 0);
      if (center.label == 0) f.ground_xy.col(p) = center.point.head<2>();
    }
  }
  return f;
}

// ---------------------------------------------------------------------------
// Footprints and placement

/// Whether ground point (x, y) lies under the object, grown by `margin`.
inline bool in_footprint(const ObjectShape& o, const Pose& p, double x, double y, double margin = 0.0) {
  const double dx = x - p.x;
  const double dy = y - p.y;
  if (o.kind == ShapeKind::Sphere) {
    return dx * dx + dy * dy <= (o.size.x() + margin) * (o.size.x() + margin);
  }
  const double c = std::cos(p.yaw);
  const double s = std::sin(p.yaw);
  const double lx = c * dx + s * dy;
  const double ly = -s * dx + c * dy;
  return std::abs(lx) <= o.size.x() + margin && std::abs(ly) <= o.size.y() + margin;
}

inline bool in_any_footprint(const SceneDescription& scene, const std::vector<Pose>& poses, double x, double y,
                             double margin = 0.0) {
  for (std::size_t k = 0; k < poses.size(); ++k) {
    if (in_footprint(scene.objects[k], poses[k], x, y, margin)) return true;
  }
  return false;
}

/// Cells of a ground occupancy grid covered by both configurations.
inline std::size_t footprint_overlap_cells(const SceneDescription& scene, const std::vector<Pose>& a,
                                           const std::vector<Pose>& b, double cell = 0.02) {
  const double e = scene.spec.placement_half_extent + 0.6;
  const int n = static_cast<int>(std::ceil(2.0 * e / cell));
  std::size_t overlap = 0;
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < n; ++i) {
      const double x = -e + (i + 0.5) * cell;
      const double y = -e + (j + 0.5) * cell;
      if (in_any_footprint(scene, a, x, y) && in_any_footprint(scene, b, x, y)) ++overlap;
    }
  }
  return overlap;
}

namespace detail {

// Poses for every object: inside the placement square, clear of each other and
// of every footprint in `avoid`.
inline std::optional<std::vector<Pose>> sample_poses(const SceneDescription& scene, Rng& rng,
                                                     const std::vector<const std::vector<Pose>*>& avoid) {
  const auto& s = scene.spec;
  std::vector<Pose> poses;
  for (int k = 0; k < scene.object_count(); ++k) {
    const auto& obj = scene.objects[static_cast<std::size_t>(k)];
    const double r = obj.footprint_radius();
    bool ok = false;
    for (int attempt = 0; attempt < 200 && !ok; ++attempt) {
      const double lim = s.placement_half_extent - r;
      Pose p{rng.uniform(-lim, lim), rng.uniform(-lim, lim), rng.uniform(0.0, 2.0 * M_PI)};
      ok = true;
      for (std::size_t j = 0; j < poses.size() && ok; ++j) {
        const double d = std::hypot(p.x - poses[j].x, p.y - poses[j].y);
        ok = d > r + scene.objects[j].footprint_radius() + s.footprint_margin;
      }
      for (const auto* other : avoid) {
        for (std::size_t j = 0; j < other->size() && ok; ++j) {
          const double d = std::hypot(p.x - (*other)[j].x, p.y - (*other)[j].y);
          ok = d > r + scene.objects[j].footprint_radius() + s.footprint_margin;
        }
      }
      if (ok) poses.push_back(p);
    }
    if (!ok) return std::nullopt;
  }
  return poses;
}

inline std::vector<Vec3> sphere_surface_points(double r, double spacing) {
  const int n = std::max(8, static_cast<int>(std::lround(4.0 * M_PI * r * r / (spacing * spacing))));
  std::vector<Vec3> pts;
  const double golden = M_PI * (3.0 - std::sqrt(5.0));
  for (int i = 0; i < n; ++i) {
    const double z = 1.0 - 2.0 * (i + 0.5) / n;
    const double rad = std::sqrt(std::max(0.0, 1.0 - z * z));
    const double th = golden * i;
    const Vec3 d(rad * std::cos(th), rad * std::sin(th), z);
    // Points facing the ground are never observed.
    if (d.z() < -0.5) continue;
    pts.push_back(r * d);
  }
  return pts;
}

inline std::vector<Vec3> box_surface_points(const Vec3& half, double spacing) {
  std::vector<Vec3> pts;
  for (int axis = 0; axis < 3; ++axis) {
    for (int sign = -1; sign <= 1; sign += 2) {
      if (axis == 2 && sign < 0) continue;  // bottom face rests on the ground
      const int u = (axis + 1) % 3;
      const int v = (axis + 2) % 3;
      const int nu = std::max(1, static_cast<int>(std::lround(2.0 * half[u] / spacing)));
      const int nv = std::max(1, static_cast<int>(std::lround(2.0 * half[v] / spacing)));
      for (int i = 0; i < nu; ++i) {
        for (int j = 0; j < nv; ++j) {
          Vec3 p;
          p[axis] = sign * half[axis];
          p[u] = -half[u] + (i + 0.5) * 2.0 * half[u] / nu;
          p[v] = -half[v] + (j + 0.5) * 2.0 * half[v] / nv;
          pts.push_back(p);
        }
      }
    }
  }
  return pts;
}

}  // namespace detail

/// Labelled surface samples of one configuration. Ground under the objects is
/// left out because no camera sees it in that state.
inline PointCloud scene_point_cloud(const SceneDescription& scene, const std::vector<Pose>& poses) {
  const auto& s = scene.spec;
  PointCloud pc;
  const int n = static_cast<int>(std::floor(2.0 * s.ground_half_extent / s.ground_spacing + 1e-9)) + 1;
  const double start = -0.5 * (n - 1) * s.ground_spacing;
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < n; ++i) {
      const double x = start + i * s.ground_spacing;
      const double y = start + j * s.ground_spacing;
      if (in_any_footprint(scene, poses, x, y)) continue;
      pc.positions.emplace_back(x, y, 0.0);
      pc.colors.push_back(ground_albedo(s, x, y));
      pc.labels.push_back(0);
    }
  }
  for (int k = 0; k < scene.object_count(); ++k) {
    const auto& obj = scene.objects[static_cast<std::size_t>(k)];
    const auto local = obj.kind == ShapeKind::Sphere ? detail::sphere_surface_points(obj.size.x(), s.object_point_spacing)
                                                     : detail::box_surface_points(obj.size, s.object_point_spacing);
    const RigidTransform t = pose_transform(obj, poses[static_cast<std::size_t>(k)]);
    for (const auto& p : local) {
      pc.positions.push_back(t.apply(p));
      pc.colors.push_back(object_albedo(obj, p));
      pc.labels.push_back(k + 1);
    }
  }
  return pc;
}

/// Per-object motion taking configuration `from` to configuration `to`.
inline SceneTransform transform_between(const SceneDescription& scene, const std::vector<Pose>& from,
                                        const std::vector<Pose>& to) {
  SceneTransform t;
  for (int k = 0; k < scene.object_count(); ++k) {
    const auto& obj = scene.objects[static_cast<std::size_t>(k)];
    t.set(k + 1, compose(pose_transform(obj, to[static_cast<std::size_t>(k)]),
                         invert(pose_transform(obj, from[static_cast<std::size_t>(k)]))));
  }
  return t;
}

/// Object poses reached from `from` by `t` (each object's yaw and position).
inline std::vector<Pose> poses_after(const SceneDescription& scene, const std::vector<Pose>& from,
                                     const SceneTransform& t) {
  std::vector<Pose> out = from;
  for (int k = 0; k < scene.object_count(); ++k) {
    const auto& obj = scene.objects[static_cast<std::size_t>(k)];
    const RigidTransform moved = compose(t.get(k + 1), pose_transform(obj, from[static_cast<std::size_t>(k)]));
    const Mat3 r = moved.rotation_matrix();
    out[static_cast<std::size_t>(k)] = {moved.translation.x(), moved.translation.y(), std::atan2(r(1, 0), r(0, 0))};
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cameras and masks

inline std::vector<Camera> camera_ring(const SceneSpec& s, int count, double azimuth_offset_deg) {
  std::vector<Camera> cams;
  const double el = s.elevation_deg * M_PI / 180.0;
  for (int i = 0; i < count; ++i) {
    const double az = (azimuth_offset_deg + 360.0 * i / count) * M_PI / 180.0;
    const Vec3 eye(s.camera_radius * std::cos(el) * std::cos(az), s.camera_radius * std::cos(el) * std::sin(az),
                   s.camera_radius * std::sin(el));
    cams.push_back(Camera::look_at(eye, Vec3::Zero(), s.width, s.height, s.fov_deg));
  }
  return cams;
}

/// Grows (dilate) or shrinks (erode) each object's mask by `px` pixels, the
/// direction chosen independently per object.
inline LabelImage perturb_mask(const LabelImage& mask, int objects, int px, Rng& rng) {
  LabelImage out = mask;
  if (px <= 0) return out;
  for (int o = 1; o <= objects; ++o) {
    const bool dilate = rng.uniform() < 0.5;
    LabelImage next = out;
    for (int y = 0; y < mask.height; ++y) {
      for (int x = 0; x < mask.width; ++x) {
        const bool self = out.at(x, y) == o;
        if (dilate == self) continue;
        // Within px (disk) of the opposite side?
        bool near = false;
        for (int dy = -px; dy <= px && !near; ++dy) {
          for (int dx = -px; dx <= px && !near; ++dx) {
            if (dx * dx + dy * dy > px * px) continue;
            const int xx = x + dx;
            const int yy = y + dy;
            if (xx < 0 || yy < 0 || xx >= mask.width || yy >= mask.height) continue;
            near = (out.at(xx, yy) == o) == dilate;
          }
        }
        if (!near) continue;
        if (dilate && out.at(x, y) == 0) next.at(x, y) = o;
        if (!dilate) next.at(x, y) = 0;
      }
    }
    out = std::move(next);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Generation

namespace detail {

inline std::vector<Observation> render_views(const SceneDescription& scene, const std::vector<Pose>& poses,
                                             const std::vector<Camera>& cams) {
  std::vector<Observation> out;
  for (const auto& cam : cams) {
    auto f = oracle_render(scene, poses, cam);
    out.push_back({std::move(f.color), std::move(f.mask)});
  }
  return out;
}

// Every ray through every camera's image corners must land on modelled ground.
inline void check_ground_coverage(const SceneSpec& s, const std::vector<Camera>& cams) {
  const double limit = s.ground_half_extent - s.ground_spacing;
  for (const auto& cam : cams) {
    const Vec3 o = cam.position();
    for (const Vec2& uv : {Vec2(-0.5, -0.5), Vec2(cam.width - 0.5, -0.5), Vec2(-0.5, cam.height - 0.5),
                          Vec2(cam.width - 0.5, cam.height - 0.5)}) {
      const Vec3 d = pixel_ray(cam, uv.x(), uv.y());
      if (!(d.z() < 0.0)) {
        throw Error(ErrorKind::Generation, "a camera sees above the horizon");
      }
      const Vec3 p = o - (o.z() / d.z()) * d;
      if (std::abs(p.x()) > limit || std::abs(p.y()) > limit) {
        throw Error(ErrorKind::Generation, "camera view extends past the modelled ground");
      }
    }
  }
}

}  // namespace detail

inline SceneDescription make_scene_description(const SceneSpec& spec) {
  spec.validate();
  SceneDescription scene;
  scene.spec = spec;
  Rng rng(mix_seed(spec.seed, 1));
  static const Vec3 palette[] = {Vec3(0.85, 0.25, 0.2), Vec3(0.2, 0.45, 0.85), Vec3(0.25, 0.7, 0.3),
                                 Vec3(0.9, 0.75, 0.2), Vec3(0.6, 0.3, 0.75)};
  for (int k = 0; k < spec.object_count; ++k) {
    ObjectShape o;
    if (spec.shapes.empty()) {
      o.kind = k % 2 == 0 ? ShapeKind::Sphere : ShapeKind::Box;
    } else {
      o.kind = shape_from_string(spec.shapes[static_cast<std::size_t>(k) % spec.shapes.size()]);
    }
    if (o.kind == ShapeKind::Sphere) {
      o.size = Vec3::Constant(rng.uniform(spec.sphere_radius_min, spec.sphere_radius_max));
    } else {
      o.size = Vec3(rng.uniform(spec.box_half_min, spec.box_half_max), rng.uniform(spec.box_half_min, spec.box_half_max),
                    rng.uniform(spec.box_half_min, spec.box_half_max));
    }
    o.albedo = palette[k % 5];
    o.phase = rng.uniform(0.0, 2.0 * M_PI);
    scene.objects.push_back(o);
  }
  return scene;
}

/// Builds a dual-state bundle. Deterministic in spec.seed.
inline DualSceneBundle generate(const SceneSpec& spec) {
  DualSceneBundle b;
  b.scene = make_scene_description(spec);
  const auto& scene = b.scene;

  Rng rng(mix_seed(spec.seed, 2));
  bool placed = false;
  for (int attempt = 0; attempt < spec.max_attempts && !placed; ++attempt) {
    auto p1 = detail::sample_poses(scene, rng, {});
    if (!p1) continue;
    auto p2 = detail::sample_poses(scene, rng, {&*p1});
    if (!p2) continue;
    if (footprint_overlap_cells(scene, *p1, *p2) != 0) continue;
    // The test state also leaves state 1's footprints uncovered.
    auto pt = detail::sample_poses(scene, rng, {&*p1});
    if (!pt) continue;
    b.poses1 = *p1;
    b.poses2 = *p2;
    b.poses_test = *pt;
    placed = true;
  }
  if (!placed) {
    throw Error(ErrorKind::Generation,
                "could not satisfy dual visibility after " + std::to_string(spec.max_attempts) + " attempts");
  }

  b.train_cameras = camera_ring(spec, spec.train_views, 0.0);
  // Offset by half a test step so that, with the default 24/8 split, no test
  // azimuth coincides with a training one.
  b.test_cameras = camera_ring(spec, spec.test_views, 180.0 / std::max(1, spec.test_views));
  std::vector<Camera> all = b.train_cameras;
  all.insert(all.end(), b.test_cameras.begin(), b.test_cameras.end());
  detail::check_ground_coverage(spec, all);

  b.state1.train = detail::render_views(scene, b.poses1, b.train_cameras);
  b.state1.test = detail::render_views(scene, b.poses1, b.test_cameras);
  b.state2.train = detail::render_views(scene, b.poses2, b.train_cameras);
  b.state2.test = detail::render_views(scene, b.poses2, b.test_cameras);
  b.test_views = detail::render_views(scene, b.poses_test, b.test_cameras);

  if (spec.mask_noise_px > 0) {
    Rng noise(mix_seed(spec.seed, 3));
    for (auto* views : {&b.state1.train, &b.state2.train}) {
      for (auto& obs : *views) obs.mask = perturb_mask(obs.mask, scene.object_count(), spec.mask_noise_px, noise);
    }
  }

  b.points1 = scene_point_cloud(scene, b.poses1);
  b.points2 = scene_point_cloud(scene, b.poses2);
  b.t_12 = transform_between(scene, b.poses1, b.poses2);
  b.t_1t = transform_between(scene, b.poses1, b.poses_test);
  // Pseudo-states may use most of the modelled ground. Trained objects carry
  // 3-sigma boxes much wider than their surfaces, so the placement region
  // alone would often leave no room for them.
  const double reach = spec.ground_half_extent - 0.5;
  b.bounds.lo = Vec3(-reach, -reach, -1.0);
  b.bounds.hi = Vec3(reach, reach, 2.5);
  return b;
}

}  // namespace dsgw
