#pragma once

// Two-phase optimization of a dual-state pair of segmented Gaussian fields.
// Phase 1 reconstructs each state on its own; phase 2 adds the alignment and
// pseudo-state terms. Finalization prunes and pastes. The phases are exposed
// separately so callers can branch several phase-2 variants off one phase-1
// result.

#include "dsgw/core.hpp"
#include "dsgw/kdtree.hpp"
#include "dsgw/losses.hpp"
#include "dsgw/optim.hpp"
#include "dsgw/random.hpp"
#include "dsgw/scenegen.hpp"
#include "dsgw/segmentation.hpp"
#include "dsgw/statetransfer.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace dsgw {

inline constexpr double kInitialOpacity = 0.1;
inline constexpr double kInitialIdentityStddev = 0.01;
/// Scale given to a lone point, which has no neighbours to measure.
inline constexpr double kIsolatedPointScale = 0.01;

struct TrainConfig {
  int phase1_iters = 10000;
  int phase2_iters = 10000;
  /// Multiplies both iteration counts.
  double desk_scale = 1.0;
  LearningRates lr;
  LossConfig loss;
  double tau = kDefaultPruneTau;
  double tau_paste = kDefaultPasteTau;
  std::uint64_t seed = 0;
  /// Final co-pruning and co-pasting.
  bool prune = true;
  bool paste = true;
  /// Cross-paste ground between the fields before the joint phase. Off by
  /// default; the alignment terms fill the holes on their own.
  bool paste_before_joint = false;
  /// Re-decode object labels from the classifier every this many phase-2
  /// iterations (0 disables). Useful when point-cloud labels are noisy.
  int relabel_interval = 0;
  double relabel_confidence = 0.5;
  /// Co-prune every this many phase-2 iterations (0 disables).
  int prune_interval = 0;
  /// Draw a fresh pseudo-state every this many phase-2 iterations.
  int pseudo_interval = 1;
  PseudoStateOptions pseudo;
  int pseudo_seed_retries = 10;

  int scaled_phase1() const { return static_cast<int>(std::lround(phase1_iters * desk_scale)); }
  int scaled_phase2() const { return static_cast<int>(std::lround(phase2_iters * desk_scale)); }

  void validate() const {
    lr.validate();
    if (phase1_iters < 0 || phase2_iters < 0) throw Error(ErrorKind::ParameterDomain, "iteration counts must be >= 0");
    if (!(desk_scale >= 0.0)) throw Error(ErrorKind::ParameterDomain, "desk_scale must be >= 0");
    if (!(tau > 0.0) || !(tau_paste > 0.0)) throw Error(ErrorKind::ParameterDomain, "thresholds must be positive");
    if (relabel_interval < 0 || prune_interval < 0 || pseudo_interval < 1) {
      throw Error(ErrorKind::ParameterDomain, "intervals must be non-negative (pseudo_interval >= 1)");
    }
    if (!(relabel_confidence >= 0.0 && relabel_confidence <= 1.0)) {
      throw Error(ErrorKind::ParameterDomain, "relabel_confidence must lie in [0, 1]");
    }
  }
};

// ---------------------------------------------------------------------------
// Initialization

/// One Gaussian per point: isotropic scale from the mean distance to the three
/// nearest points of the same label, low opacity, the point's color and label, small random
/// identity.
inline GaussianField initialize_field(const PointCloud& pc, int object_count, std::uint64_t seed) {
  if (pc.size() == 0) {
    throw Error(ErrorKind::Input, "cannot initialize a field from an empty point cloud");
  }
  if (pc.colors.size() != pc.size() || pc.labels.size() != pc.size()) {
    throw Error(ErrorKind::Input, "point cloud attribute counts differ");
  }
  GaussianField f;
  f.object_count = object_count;
  // Neighbours come from the point's own label, so an object starts out the
  // same whatever ground surrounds it.
  std::map<int, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < pc.size(); ++i) members[pc.labels[i]].push_back(i);
  std::map<int, KdTree> trees;
  std::vector<std::size_t> local(pc.size());
  for (const auto& [label, idx] : members) {
    std::vector<Vec3> pts;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      pts.push_back(pc.positions[idx[k]]);
      local[idx[k]] = k;
    }
    trees.emplace(label, KdTree(std::move(pts)));
  }
  Rng rng(seed);
  for (std::size_t i = 0; i < pc.size(); ++i) {
    GaussianPrimitive g;
    g.center = pc.positions[i];
    const auto nbrs = trees.at(pc.labels[i]).knn(pc.positions[i], 3, local[i]);
    double scale = kIsolatedPointScale;
    if (!nbrs.empty()) {
      double sum = 0.0;
      for (const auto& nb : nbrs) sum += std::sqrt(nb.dist2);
      scale = std::max(sum / static_cast<double>(nbrs.size()), 1e-7);
    }
    g.log_scale = Vec3::Constant(std::log(scale));
    g.opacity_logit = logit(kInitialOpacity);
    g.color = pc.colors[i];
    for (int k = 0; k < kIdentityDim; ++k) g.identity[k] = rng.normal(0.0, kInitialIdentityStddev);
    g.object_label = pc.labels[i];
    f.primitives.push_back(g);
  }
  f.validate_labels();
  return f;
}

inline std::pair<GaussianField, GaussianField> initialize_fields(const DualSceneBundle& b, std::uint64_t seed = 0) {
  return {initialize_field(b.points1, b.object_count(), mix_seed(seed, 11)),
          initialize_field(b.points2, b.object_count(), mix_seed(seed, 12))};
}

// ---------------------------------------------------------------------------
// Trainer state and logging

struct TrainerState {
  GaussianField field1;
  GaussianField field2;
  Classifier classifier;
  AdamState adam1;
  AdamState adam2;
  AdamState adam_clf;
  /// Iterations completed in each phase.
  int phase1_done = 0;
  int phase2_done = 0;
  bool joint_prepared = false;
};

struct IterationLog {
  int phase = 1;
  int iteration = 0;
  std::size_t view = 0;
  LossBreakdown loss;
  double seconds = 0.0;
};

using TrainLogger = std::function<void(const IterationLog&)>;

struct TrainResult {
  GaussianField field1;
  GaussianField field2;
  Classifier classifier;
  PruneReport report;
};

inline TrainerState init_trainer(const DualSceneBundle& b, const TrainConfig& cfg) {
  cfg.validate();
  if (b.state1.train.size() != b.train_cameras.size() || b.state2.train.size() != b.train_cameras.size() ||
      b.train_cameras.empty()) {
    throw Error(ErrorKind::Input, "bundle needs one observation per training camera in both states");
  }
  TrainerState s;
  auto [f1, f2] = initialize_fields(b, cfg.seed);
  s.field1 = std::move(f1);
  s.field2 = std::move(f2);
  s.classifier = Classifier::random(mix_seed(cfg.seed, 13));
  return s;
}

namespace detail {

inline void check_finite(double v, int phase, int iter) {
  if (!std::isfinite(v)) {
    throw Error(ErrorKind::Divergence, "non-finite loss in phase " + std::to_string(phase) + " at iteration " +
                                           std::to_string(iter));
  }
}

inline std::size_t sample_view(const TrainConfig& cfg, int phase, int iter, std::size_t n) {
  Rng rng(mix_seed(cfg.seed, (static_cast<std::uint64_t>(phase) << 40) + static_cast<std::uint64_t>(iter)));
  return static_cast<std::size_t>(rng.index(n));
}

inline void apply_updates(TrainerState& s, const FieldGradients& g1, const FieldGradients& g2,
                          const ClassifierGradients& gc, const TrainConfig& cfg) {
  adam_step_field(s.field1, g1, s.adam1, cfg.lr);
  adam_step_field(s.field2, g2, s.adam2, cfg.lr);
  adam_step_classifier(s.classifier, gc, s.adam_clf, cfg.lr.classifier);
}

// Appends copied primitives and gives them fresh optimizer moments.
inline void append_with_moments(GaussianField& field, AdamState& adam, const GaussianField& pasted_into) {
  const std::size_t old = field.size();
  std::vector<std::ptrdiff_t> src(pasted_into.size(), -1);
  std::iota(src.begin(), src.begin() + static_cast<std::ptrdiff_t>(old), std::ptrdiff_t{0});
  field = pasted_into;
  remap_moments(adam, src);
}

inline void remove_with_moments(GaussianField& field, AdamState& adam, const std::vector<std::size_t>& removed) {
  if (removed.empty()) return;
  std::vector<char> drop(field.size(), 0);
  for (auto i : removed) drop[i] = 1;
  std::vector<std::ptrdiff_t> src;
  for (std::size_t i = 0; i < field.size(); ++i) {
    if (!drop[i]) src.push_back(static_cast<std::ptrdiff_t>(i));
  }
  field = remove_indices(field, removed);
  remap_moments(adam, src);
}

}  // namespace detail

/// Object labels decoded from the classifier applied to each identity vector;
/// uncertain primitives keep their current label.
inline void relabel_from_classifier(GaussianField& field, const Classifier& clf, double min_confidence) {
  if (field.empty()) return;
  Eigen::MatrixXd ids(kIdentityDim, static_cast<Eigen::Index>(field.size()));
  std::vector<int> current(field.size());
  for (std::size_t i = 0; i < field.size(); ++i) {
    ids.col(static_cast<Eigen::Index>(i)) = field.primitives[i].identity;
    current[i] = field.primitives[i].object_label;
  }
  const auto labels = decode_labels(classify(ids, clf), field.object_count, min_confidence, current);
  for (std::size_t i = 0; i < field.size(); ++i) field.primitives[i].object_label = labels[i];
}

/// Runs phase-1 iterations until `phase1_done` reaches the scaled target.
inline void run_phase1(TrainerState& s, const DualSceneBundle& b, const TrainConfig& cfg,
                       const TrainLogger& log = {}) {
  const int total = cfg.scaled_phase1();
  LossConfig lc = cfg.loss;
  lc.lambda_a = 0.0;
  lc.lambda_p = 0.0;
  for (; s.phase1_done < total; ++s.phase1_done) {
    const auto t0 = std::chrono::steady_clock::now();
    const int it = s.phase1_done;
    const std::size_t v = detail::sample_view(cfg, 1, it, b.train_cameras.size());
    auto j = joint_loss(s.field1, s.field2, s.classifier, b.t_12, b.state1.train[v], b.state2.train[v],
                        b.train_cameras[v], std::nullopt, lc);
    detail::check_finite(j.breakdown.total, 1, it);
    detail::apply_updates(s, j.grad1, j.grad2, j.clf_grad, cfg);
    if (log) {
      log({1, it, v, j.breakdown, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()});
    }
  }
}

/// Pseudo-state for a phase-2 iteration; a placement failure moves on to the
/// next seed.
inline PseudoState pseudo_state_for(const TrainerState& s, const DualSceneBundle& b, const TrainConfig& cfg,
                                    int iteration) {
  const int slot = iteration / cfg.pseudo_interval;
  for (int attempt = 0;; ++attempt) {
    const std::uint64_t seed = mix_seed(cfg.seed ^ 0xA5A5A5A5ULL, static_cast<std::uint64_t>(slot) * 16 + attempt);
    try {
      return make_pseudo_state(s.field1, b.t_12, b.bounds, seed, cfg.pseudo);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::Placement || attempt + 1 >= cfg.pseudo_seed_retries) throw;
    }
  }
}

/// Phase-2 preparation: decode labels and cross-paste ground between fields.
inline void prepare_joint(TrainerState& s, const DualSceneBundle& b, const TrainConfig& cfg) {
  if (s.joint_prepared) return;
  s.joint_prepared = true;
  if (cfg.relabel_interval > 0) {
    relabel_from_classifier(s.field1, s.classifier, cfg.relabel_confidence);
    relabel_from_classifier(s.field2, s.classifier, cfg.relabel_confidence);
  }
  const bool joint = cfg.loss.lambda_a != 0.0 || cfg.loss.lambda_p != 0.0;
  if (cfg.paste_before_joint && joint) {
    PasteOptions po;
    po.tau_paste = cfg.tau_paste;
    const auto into1 = co_paste(s.field2, s.field1, invert(b.t_12), po);
    const auto into2 = co_paste(s.field1, s.field2, b.t_12, po);
    detail::append_with_moments(s.field1, s.adam1, into1);
    detail::append_with_moments(s.field2, s.adam2, into2);
  }
}

inline void run_phase2(TrainerState& s, const DualSceneBundle& b, const TrainConfig& cfg,
                       const TrainLogger& log = {}) {
  const int total = cfg.scaled_phase2();
  if (s.phase2_done >= total) return;
  prepare_joint(s, b, cfg);
  std::optional<PseudoState> ps;
  for (; s.phase2_done < total; ++s.phase2_done) {
    const auto t0 = std::chrono::steady_clock::now();
    const int it = s.phase2_done;
    if (it > 0 && cfg.relabel_interval > 0 && it % cfg.relabel_interval == 0) {
      relabel_from_classifier(s.field1, s.classifier, cfg.relabel_confidence);
      relabel_from_classifier(s.field2, s.classifier, cfg.relabel_confidence);
    }
    if (it > 0 && cfg.prune_interval > 0 && it % cfg.prune_interval == 0) {
      const auto r = co_prune(s.field1, s.field2, b.t_12, cfg.tau);
      detail::remove_with_moments(s.field1, s.adam1, r.removed_from_1);
      detail::remove_with_moments(s.field2, s.adam2, r.removed_from_2);
    }
    if (cfg.loss.lambda_p != 0.0 && (!ps || it % cfg.pseudo_interval == 0)) {
      ps = pseudo_state_for(s, b, cfg, it);
    }
    const std::size_t v = detail::sample_view(cfg, 2, it, b.train_cameras.size());
    auto j = joint_loss(s.field1, s.field2, s.classifier, b.t_12, b.state1.train[v], b.state2.train[v],
                        b.train_cameras[v], ps, cfg.loss);
    detail::check_finite(j.breakdown.total, 2, it);
    detail::apply_updates(s, j.grad1, j.grad2, j.clf_grad, cfg);
    if (log) {
      log({2, it, v, j.breakdown, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()});
    }
  }
}

/// Final co-pruning and co-pasting of the optimized pair.
inline TrainResult finalize(const TrainerState& s, const DualSceneBundle& b, const TrainConfig& cfg) {
  TrainResult r;
  r.classifier = s.classifier;
  GaussianField f1 = s.field1;
  GaussianField f2 = s.field2;
  r.report.threshold = cfg.tau;
  if (cfg.prune) {
    r.report = co_prune(f1, f2, b.t_12, cfg.tau);
    f1 = remove_indices(f1, r.report.removed_from_1);
    f2 = remove_indices(f2, r.report.removed_from_2);
  }
  if (cfg.paste) {
    PasteOptions po;
    po.tau_paste = cfg.tau_paste;
    r.field1 = co_paste(f2, f1, invert(b.t_12), po);
    r.field2 = co_paste(f1, f2, b.t_12, po);
  } else {
    r.field1 = std::move(f1);
    r.field2 = std::move(f2);
  }
  return r;
}

inline TrainResult train(const DualSceneBundle& b, const TrainConfig& cfg, const TrainLogger& log = {}) {
  TrainerState s = init_trainer(b, cfg);
  run_phase1(s, b, cfg, log);
  run_phase2(s, b, cfg, log);
  return finalize(s, b, cfg);
}

/// Options for synthesize_target that match a training configuration.
inline SynthesisOptions synthesis_options(const TrainConfig& cfg) {
  SynthesisOptions o;
  o.prune = cfg.prune;
  o.paste = cfg.paste;
  o.tau = cfg.tau;
  o.paste_options.tau_paste = cfg.tau_paste;
  return o;
}

}  // namespace dsgw
