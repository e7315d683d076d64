#pragma once

// Moving reconstructed scenes between object configurations: pseudo-state
// sampling, collaborative pruning of Gaussians that disagree across the two
// fields, pasting ground from the other field into vacated regions, and the
// assembly of a target state from an optimized pair.

#include "dsgw/core.hpp"
#include "dsgw/kdtree.hpp"
#include "dsgw/random.hpp"

#include <algorithm>
#include <limits>
#include <map>
#include <string>
#include <vector>

namespace dsgw {

inline constexpr double kDefaultPruneTau = 0.5;
inline constexpr double kDefaultPasteTau = 0.05;
inline constexpr double kExtentSigmas = 3.0;

struct Aabb {
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = Vec3::Constant(-std::numeric_limits<double>::infinity());

  bool empty() const { return (lo.array() > hi.array()).any(); }

  void extend(const Vec3& p) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  void extend(const Aabb& b) {
    if (b.empty()) return;
    lo = lo.cwiseMin(b.lo);
    hi = hi.cwiseMax(b.hi);
  }

  bool contains(const Aabb& b) const { return (b.lo.array() >= lo.array()).all() && (b.hi.array() <= hi.array()).all(); }

  bool contains_xy(const Vec3& p) const {
    return p.x() >= lo.x() && p.x() <= hi.x() && p.y() >= lo.y() && p.y() <= hi.y();
  }

  bool intersects(const Aabb& b) const { return (lo.array() <= b.hi.array()).all() && (b.lo.array() <= hi.array()).all(); }

  Vec3 center() const { return 0.5 * (lo + hi); }
  Vec3 extent() const { return hi - lo; }

  /// Box of the eight transformed corners.
  Aabb transformed(const RigidTransform& t) const {
    Aabb out;
    if (empty()) return out;
    for (int c = 0; c < 8; ++c) {
      const Vec3 p((c & 1) ? hi.x() : lo.x(), (c & 2) ? hi.y() : lo.y(), (c & 4) ? hi.z() : lo.z());
      out.extend(t.apply(p));
    }
    return out;
  }
};

/// Axis-aligned box of one Gaussian's k-sigma ellipsoid.
inline Aabb gaussian_extent(const GaussianPrimitive& g, double sigmas = kExtentSigmas) {
  const Mat3 cov = detail::covariance_unchecked(g.rotation, g.log_scale);
  const Vec3 half = sigmas * cov.diagonal().cwiseMax(0.0).cwiseSqrt();
  Aabb b;
  b.lo = g.center - half;
  b.hi = g.center + half;
  return b;
}

/// Union of the 3-sigma boxes of every primitive carrying `label`.
inline Aabb object_extent(const GaussianField& field, int label, double sigmas = kExtentSigmas) {
  Aabb b;
  for (const auto& g : field.primitives) {
    if (g.object_label == label) b.extend(gaussian_extent(g, sigmas));
  }
  return b;
}

inline std::vector<int> foreground_labels(const GaussianField& field) {
  std::vector<int> out;
  for (int label : field.label_set()) {
    if (label > 0) out.push_back(label);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pseudo-states

struct PseudoState {
  SceneTransform t_1p;
  SceneTransform t_2p;
  std::uint64_t seed = 0;
};

struct PseudoStateOptions {
  int max_attempts_per_object = 1000;
  /// Uniform rotations on SO(3) about the object centroid instead of yaw only.
  bool full_rotation = false;
};

/// Samples a collision-free configuration of field1's objects inside `bounds`
/// and the transforms reaching it from both observed states.
inline PseudoState make_pseudo_state(const GaussianField& field1, const SceneTransform& t_12, const Aabb& bounds,
                                     std::uint64_t seed, const PseudoStateOptions& opt = {}) {
  PseudoState ps;
  ps.seed = seed;
  Rng rng(seed);
  std::vector<Aabb> placed;
  for (int label : foreground_labels(field1)) {
    const Aabb local = object_extent(field1, label);
    Vec3 centroid = Vec3::Zero();
    std::size_t count = 0;
    for (const auto& g : field1.primitives) {
      if (g.object_label == label) {
        centroid += g.center;
        ++count;
      }
    }
    centroid /= static_cast<double>(count);

    bool ok = false;
    for (int attempt = 0; attempt < opt.max_attempts_per_object && !ok; ++attempt) {
      Quat q;
      if (opt.full_rotation) {
        q = Quat(rng.normal(), rng.normal(), rng.normal(), rng.normal()).normalized();
      } else {
        q = Quat(Eigen::AngleAxisd(rng.uniform(0.0, 2.0 * M_PI), Vec3::UnitZ()));
      }
      const Vec3 target(rng.uniform(bounds.lo.x(), bounds.hi.x()), rng.uniform(bounds.lo.y(), bounds.hi.y()),
                        centroid.z());
      // Rotate about the centroid, then move the centroid to the target.
      const RigidTransform t{q, target - (q * centroid)};
      const Aabb box = local.transformed(t);
      if (!bounds.contains(box)) continue;
      const bool collides = std::any_of(placed.begin(), placed.end(), [&](const Aabb& o) { return o.intersects(box); });
      if (collides) continue;
      placed.push_back(box);
      ps.t_1p.set(label, t);
      ps.t_2p.set(label, compose(t, invert(t_12.get(label))));
      ok = true;
    }
    if (!ok) {
      throw Error(ErrorKind::Placement, "could not place object " + std::to_string(label) + " after " +
                                            std::to_string(opt.max_attempts_per_object) + " attempts");
    }
  }
  return ps;
}

// ---------------------------------------------------------------------------
// Co-pruning

struct PruneReport {
  std::vector<std::size_t> removed_from_1;
  std::vector<std::size_t> removed_from_2;
  double threshold = kDefaultPruneTau;
};

struct PruneOptions {
  /// Only match against primitives with the same object label.
  bool same_label_only = false;
};

namespace detail {

inline std::vector<Vec3> centers_of(const GaussianField& f) {
  std::vector<Vec3> out;
  out.reserve(f.size());
  for (const auto& g : f.primitives) out.push_back(g.center);
  return out;
}

// Indices of `moved` whose nearest primitive in `target` is farther than tau.
inline std::vector<std::size_t> mark_far(const GaussianField& moved, const GaussianField& target, double tau,
                                         bool same_label_only) {
  std::vector<std::size_t> marked;
  if (moved.empty()) return marked;
  const double tau2 = tau * tau;
  if (!same_label_only) {
    const KdTree tree(centers_of(target));
    for (std::size_t i = 0; i < moved.size(); ++i) {
      if (tree.nearest(moved.primitives[i].center).dist2 > tau2) marked.push_back(i);
    }
    return marked;
  }
  std::map<int, std::vector<Vec3>> by_label;
  for (const auto& g : target.primitives) by_label[g.object_label].push_back(g.center);
  std::map<int, KdTree> trees;
  for (auto& [label, pts] : by_label) trees.emplace(label, KdTree(std::move(pts)));
  for (std::size_t i = 0; i < moved.size(); ++i) {
    const auto it = trees.find(moved.primitives[i].object_label);
    if (it == trees.end() || it->second.nearest(moved.primitives[i].center).dist2 > tau2) marked.push_back(i);
  }
  return marked;
}

}  // namespace detail

/// Symmetric nearest-neighbour consistency check between the two fields, each
/// carried into the other's state first.
inline PruneReport co_prune(const GaussianField& field1, const GaussianField& field2, const SceneTransform& t_12,
                            double tau = kDefaultPruneTau, const PruneOptions& opt = {}) {
  if (!(tau > 0.0)) {
    throw Error(ErrorKind::ParameterDomain, "pruning threshold must be positive");
  }
  PruneReport r;
  r.threshold = tau;
  const auto moved1 = apply_scene_transform(field1, t_12, LabelPolicy::Lenient);
  const auto moved2 = apply_scene_transform(field2, invert(t_12), LabelPolicy::Lenient);
  r.removed_from_1 = detail::mark_far(moved1, field2, tau, opt.same_label_only);
  r.removed_from_2 = detail::mark_far(moved2, field1, tau, opt.same_label_only);
  return r;
}

/// Copy of `field` without the listed indices; order of the rest is kept.
inline GaussianField remove_indices(const GaussianField& field, const std::vector<std::size_t>& indices) {
  std::vector<char> drop(field.size(), 0);
  for (std::size_t i : indices) {
    if (i >= field.size()) {
      throw Error(ErrorKind::Input, "removal index " + std::to_string(i) + " out of range");
    }
    drop[i] = 1;
  }
  GaussianField out;
  out.object_count = field.object_count;
  out.primitives.reserve(field.size());
  for (std::size_t i = 0; i < field.size(); ++i) {
    if (!drop[i]) out.primitives.push_back(field.primitives[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Co-pasting

struct PasteOptions {
  double tau_paste = kDefaultPasteTau;
  double sigmas = kExtentSigmas;
};

/// Ground-plane rectangles that objects of `dst` occupy in dst's state: the
/// boxes of dst's own foreground objects and those of src's objects carried
/// into dst's state by t_sd.
inline std::vector<Aabb> vacated_footprint(const GaussianField& src, const GaussianField& dst,
                                           const SceneTransform& t_sd, double sigmas = kExtentSigmas) {
  std::vector<Aabb> boxes;
  for (int label : foreground_labels(dst)) boxes.push_back(object_extent(dst, label, sigmas));
  const auto moved = apply_scene_transform(src, t_sd, LabelPolicy::Lenient);
  for (int label : foreground_labels(moved)) boxes.push_back(object_extent(moved, label, sigmas));
  return boxes;
}

/// Indices of src background primitives that co_paste would copy.
inline std::vector<std::size_t> paste_candidates(const GaussianField& src, const GaussianField& dst,
                                                 const SceneTransform& t_sd, const PasteOptions& opt = {}) {
  std::vector<std::size_t> out;
  const auto boxes = vacated_footprint(src, dst, t_sd, opt.sigmas);
  if (boxes.empty()) return out;
  std::vector<Vec3> ground;
  for (const auto& g : dst.primitives) {
    if (g.object_label == 0) ground.push_back(g.center);
  }
  const KdTree tree(std::move(ground));
  const double tau2 = opt.tau_paste * opt.tau_paste;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const auto& g = src.primitives[i];
    if (g.object_label != 0) continue;
    const bool inside = std::any_of(boxes.begin(), boxes.end(), [&](const Aabb& b) { return b.contains_xy(g.center); });
    if (!inside) continue;
    if (tree.empty() || tree.nearest(g.center).dist2 > tau2) out.push_back(i);
  }
  return out;
}

/// Appends src ground that fills the regions dst's objects vacate; every dst
/// primitive is kept.
inline GaussianField co_paste(const GaussianField& src, const GaussianField& dst, const SceneTransform& t_sd,
                              const PasteOptions& opt = {}) {
  GaussianField out = dst;
  for (std::size_t i : paste_candidates(src, dst, t_sd, opt)) out.primitives.push_back(src.primitives[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Target synthesis

struct SynthesisOptions {
  bool prune = true;
  bool paste = true;
  double tau = kDefaultPruneTau;
  PasteOptions paste_options;
  PruneOptions prune_options;
};

/// Target-state field hosted in field1's frame: prune both fields, paste
/// field2's ground into field1, then move field1's objects by t_1t. Swap the
/// arguments (with inverted transforms) to host the result in field2 instead.
inline GaussianField synthesize_target(const GaussianField& field1, const GaussianField& field2,
                                       const SceneTransform& t_12, const SceneTransform& t_1t,
                                       const SynthesisOptions& opt = {}) {
  GaussianField f1 = field1;
  GaussianField f2 = field2;
  if (opt.prune) {
    const auto report = co_prune(f1, f2, t_12, opt.tau, opt.prune_options);
    f1 = remove_indices(f1, report.removed_from_1);
    f2 = remove_indices(f2, report.removed_from_2);
  }
  if (opt.paste) {
    f1 = co_paste(f2, f1, invert(t_12), opt.paste_options);
  }
  return apply_scene_transform(f1, t_1t, LabelPolicy::Lenient);
}

}  // namespace dsgw
