#pragma once

// Training objectives. Every loss returns its value together with gradients
// for the Gaussian parameters of each field involved and for the shared
// classifier.
//
//   recon   per-state reconstruction: L1 + D-SSIM + 2D identity CE + 3D kNN
//           identity consistency
//   align   each field carried into the other state and compared with that
//           state's observation
//   pseudo  both fields carried into a sampled configuration and compared with
//           each other

#include "dsgw/core.hpp"
#include "dsgw/image.hpp"
#include "dsgw/kdtree.hpp"
#include "dsgw/metrics.hpp"
#include "dsgw/rasterizer.hpp"
#include "dsgw/segmentation.hpp"
#include "dsgw/statetransfer.hpp"

#include <cmath>
#include <optional>

namespace dsgw {

/// One training view of one state.
struct Observation {
  Image image;  // 3 channels
  LabelImage mask;
};

struct LossConfig {
  double lambda_ssim = 0.2;
  double lambda_id = 1.0;
  double lambda_3d = 1.0;
  int knn_k = 5;
  double lambda_a = 1.0;
  double lambda_p = 1.0;
  SoftCeMode soft_mode = SoftCeMode::Symmetric;
};

struct LossBreakdown {
  double recon_1 = 0.0;
  double recon_2 = 0.0;
  double align_photo = 0.0;
  double align_sem = 0.0;
  double pseudo_photo = 0.0;
  double pseudo_sem = 0.0;
  double total = 0.0;
  double lambda_a = 0.0;
  double lambda_p = 0.0;
};

struct ReconTerms {
  double l1 = 0.0;
  double dssim = 0.0;
  double ce = 0.0;
  double knn = 0.0;
};

// ---------------------------------------------------------------------------
// Shared plumbing

namespace detail {

inline void check_observation(const Observation& obs, const Camera& cam) {
  if (obs.image.width != cam.width || obs.image.height != cam.height || obs.image.channels() != 3) {
    throw Error(ErrorKind::Input, "observation image does not match the camera (" + std::to_string(obs.image.width) +
                                      "x" + std::to_string(obs.image.height) + " vs " + std::to_string(cam.width) +
                                      "x" + std::to_string(cam.height) + ")");
  }
  if (obs.mask.width != cam.width || obs.mask.height != cam.height) {
    throw Error(ErrorKind::Input, "observation mask does not match the camera");
  }
}

/// Mean absolute difference and its gradient with respect to `a`.
inline double l1_with_grad(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, Eigen::MatrixXd* grad, double scale) {
  const double n = static_cast<double>(a.size());
  const Eigen::ArrayXXd diff = a.array() - b.array();
  if (grad) {
    *grad += (scale / n) * diff.sign().matrix();
  }
  return diff.abs().sum() / n;
}

/// Left-multiplication matrix of a quaternion, (w, x, y, z) ordering.
inline Eigen::Matrix4d quat_left_matrix(const Quat& a) {
  Eigen::Matrix4d m;
  m << a.w(), -a.x(), -a.y(), -a.z(),
       a.x(), a.w(), -a.z(), a.y(),
       a.y(), a.z(), a.w(), -a.x(),
       a.z(), -a.y(), a.x(), a.w();
  return m;
}

}  // namespace detail

/// Carries gradients taken at apply_scene_transform(field, t) back to field.
inline void pullback_scene_transform(FieldGradients& grads, const GaussianField& field, const SceneTransform& t) {
  if (t.empty()) return;
  for (std::size_t i = 0; i < field.size(); ++i) {
    const int label = field.primitives[i].object_label;
    if (label == 0 || !t.contains(label)) continue;
    const RigidTransform rt = t.get(label);
    const auto c = static_cast<Eigen::Index>(i);
    grads.center.col(c) = rt.rotation_matrix().transpose() * grads.center.col(c);
    grads.rotation.col(c) = detail::quat_left_matrix(rt.rotation).transpose() * grads.rotation.col(c);
  }
}

/// A render plus the classifier logits of its feature image.
struct SemanticRender {
  RenderOutput render;
  Eigen::MatrixXd logits;  // empty when not requested
};

inline SemanticRender render_semantic(const GaussianField& field, const Camera& cam, const Classifier& clf,
                                      bool with_logits) {
  SemanticRender sr;
  sr.render = render(field, cam);
  if (with_logits) sr.logits = classify(sr.render.feature_image, clf);
  return sr;
}

/// Chains image-space gradients (color and, optionally, logits) back to the
/// field and the classifier, accumulating into the given buffers.
inline void backprop_semantic(const GaussianField& field, const Camera& cam, const SemanticRender& sr,
                              const Classifier& clf, const Eigen::MatrixXd& grad_color,
                              const Eigen::MatrixXd* grad_logits, FieldGradients& field_grads,
                              ClassifierGradients& clf_grads) {
  Eigen::MatrixXd grad_feature;
  if (grad_logits) {
    auto cb = classify_backward(sr.render.feature_image.data, clf, *grad_logits);
    clf_grads += cb.classifier;
    grad_feature = std::move(cb.features);
  } else {
    grad_feature = Eigen::MatrixXd::Zero(kIdentityDim, static_cast<Eigen::Index>(cam.pixel_count()));
  }
  field_grads += render_backward(field, cam, sr.render, grad_color, grad_feature);
}

// ---------------------------------------------------------------------------
// 3D identity consistency

struct KnnIdentity {
  double value = 0.0;
  /// 16 x N gradient for the identity vectors.
  Eigen::MatrixXd grad_identity;
  ClassifierGradients clf;
};

/// Mean KL(P_i || P_j) over every primitive i and its k nearest neighbours j,
/// with P the classifier's softmax of the identity vector. Gradients are
/// scaled by `weight`, the value is not.
inline KnnIdentity knn_identity_loss(const GaussianField& field, const Classifier& clf, int k, double weight) {
  KnnIdentity out;
  const auto n = static_cast<Eigen::Index>(field.size());
  out.grad_identity = Eigen::MatrixXd::Zero(kIdentityDim, n);
  if (k <= 0 || field.size() < 2) return out;
  const std::size_t kk = std::min<std::size_t>(static_cast<std::size_t>(k), field.size() - 1);
  Eigen::MatrixXd ids(kIdentityDim, n);
  for (Eigen::Index i = 0; i < n; ++i) ids.col(i) = field.primitives[static_cast<std::size_t>(i)].identity;
  const Eigen::MatrixXd logits = classify(ids, clf);
  const Eigen::MatrixXd logp = detail::log_softmax(logits);
  const Eigen::MatrixXd p = logp.array().exp();
  const KdTree tree(detail::centers_of(field));
  const double mean = 1.0 / (static_cast<double>(n) * static_cast<double>(kk));
  const double scale = weight * mean;
  Eigen::MatrixXd grad_logits = Eigen::MatrixXd::Zero(kNumClasses, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto nbrs = tree.knn(field.primitives[static_cast<std::size_t>(i)].center, kk, static_cast<std::size_t>(i));
    for (const auto& nb : nbrs) {
      const auto j = static_cast<Eigen::Index>(nb.index);
      const auto diff = logp.col(i).array() - logp.col(j).array();
      const double kl = (p.col(i).array() * diff).sum();
      out.value += mean * kl;
      grad_logits.col(i).array() += scale * p.col(i).array() * (diff - kl);
      grad_logits.col(j).array() += scale * (p.col(j).array() - p.col(i).array());
    }
  }
  auto cb = classify_backward(ids, clf, grad_logits);
  out.clf = cb.classifier;
  out.grad_identity = std::move(cb.features);
  return out;
}

// ---------------------------------------------------------------------------
// Reconstruction

struct ReconResult {
  double value = 0.0;
  ReconTerms terms;
  FieldGradients grad;
  ClassifierGradients clf_grad;
};

inline ReconResult recon_loss(const GaussianField& field, const Classifier& clf, const Observation& obs,
                              const Camera& cam, const LossConfig& cfg = {}) {
  detail::check_observation(obs, cam);
  const bool semantic = cfg.lambda_id != 0.0;
  const auto sr = render_semantic(field, cam, clf, semantic);
  const auto& img = sr.render.color_image;

  ReconResult r;
  r.grad = FieldGradients::zeros(field.size());
  Eigen::MatrixXd grad_color = Eigen::MatrixXd::Zero(3, img.data.cols());
  const double w_l1 = 1.0 - cfg.lambda_ssim;
  r.terms.l1 = detail::l1_with_grad(img.data, obs.image.data, &grad_color, w_l1);
  if (cfg.lambda_ssim != 0.0) {
    const auto s = ssim_with_grad(img, obs.image, true);
    r.terms.dssim = 1.0 - s.value;
    grad_color -= cfg.lambda_ssim * s.grad;
  }
  std::optional<Eigen::MatrixXd> grad_logits;
  if (semantic) {
    auto ce = cross_entropy_hard(sr.logits, obs.mask);
    r.terms.ce = ce.value;
    grad_logits = std::move(ce.grad);
    *grad_logits *= cfg.lambda_id;
  }
  backprop_semantic(field, cam, sr, clf, grad_color, grad_logits ? &*grad_logits : nullptr, r.grad, r.clf_grad);
  if (cfg.lambda_3d != 0.0) {
    auto knn = knn_identity_loss(field, clf, cfg.knn_k, cfg.lambda_3d);
    r.terms.knn = knn.value;
    r.grad.identity += knn.grad_identity;
    r.clf_grad += knn.clf;
  }
  r.value = w_l1 * r.terms.l1 + cfg.lambda_ssim * r.terms.dssim + cfg.lambda_id * r.terms.ce +
            cfg.lambda_3d * r.terms.knn;
  return r;
}

// ---------------------------------------------------------------------------
// Bidirectional alignment

struct PairResult {
  double photo = 0.0;
  double sem = 0.0;
  FieldGradients grad1;
  FieldGradients grad2;
  ClassifierGradients clf_grad;
};

namespace detail {

// One direction of the alignment: render `moved` (field carried by t) and
// compare it with `obs`; gradients are pulled back onto `field`.
inline void align_one_way(const GaussianField& field, const SceneTransform& t, const Classifier& clf,
                          const Observation& obs, const Camera& cam, double weight, double& photo, double& sem,
                          FieldGradients& grad, ClassifierGradients& clf_grad) {
  const auto moved = apply_scene_transform(field, t, LabelPolicy::Lenient);
  const auto sr = render_semantic(moved, cam, clf, true);
  Eigen::MatrixXd grad_color = Eigen::MatrixXd::Zero(3, sr.render.color_image.data.cols());
  photo += l1_with_grad(sr.render.color_image.data, obs.image.data, &grad_color, weight);
  auto ce = cross_entropy_hard(sr.logits, obs.mask);
  sem += ce.value;
  ce.grad *= weight;
  FieldGradients g = FieldGradients::zeros(field.size());
  backprop_semantic(moved, cam, sr, clf, grad_color, &ce.grad, g, clf_grad);
  pullback_scene_transform(g, field, t);
  grad += g;
}

}  // namespace detail

/// Field 1 carried into state 2 against state 2's observation, and the
/// reverse. `weight` scales the returned gradients only.
inline PairResult align_loss(const GaussianField& field1, const GaussianField& field2, const Classifier& clf,
                             const SceneTransform& t_12, const Observation& obs1, const Observation& obs2,
                             const Camera& cam, double weight = 1.0) {
  detail::check_observation(obs1, cam);
  detail::check_observation(obs2, cam);
  PairResult r;
  r.grad1 = FieldGradients::zeros(field1.size());
  r.grad2 = FieldGradients::zeros(field2.size());
  detail::align_one_way(field1, t_12, clf, obs2, cam, weight, r.photo, r.sem, r.grad1, r.clf_grad);
  detail::align_one_way(field2, invert(t_12), clf, obs1, cam, weight, r.photo, r.sem, r.grad2, r.clf_grad);
  return r;
}

// ---------------------------------------------------------------------------
// Pseudo-state consistency

inline PairResult pseudo_loss(const GaussianField& field1, const GaussianField& field2, const Classifier& clf,
                              const PseudoState& ps, const Camera& cam, double weight = 1.0,
                              SoftCeMode mode = SoftCeMode::Symmetric) {
  PairResult r;
  r.grad1 = FieldGradients::zeros(field1.size());
  r.grad2 = FieldGradients::zeros(field2.size());
  const auto moved1 = apply_scene_transform(field1, ps.t_1p, LabelPolicy::Lenient);
  const auto moved2 = apply_scene_transform(field2, ps.t_2p, LabelPolicy::Lenient);
  const auto a = render_semantic(moved1, cam, clf, true);
  const auto b = render_semantic(moved2, cam, clf, true);
  const auto np = a.render.color_image.data.cols();
  Eigen::MatrixXd gca = Eigen::MatrixXd::Zero(3, np);
  r.photo = detail::l1_with_grad(a.render.color_image.data, b.render.color_image.data, &gca, weight);
  const Eigen::MatrixXd gcb = -gca;
  auto soft = cross_entropy_soft(a.logits, b.logits, mode);
  r.sem = soft.value;
  soft.grad_a *= weight;
  soft.grad_b *= weight;
  FieldGradients g1 = FieldGradients::zeros(field1.size());
  FieldGradients g2 = FieldGradients::zeros(field2.size());
  backprop_semantic(moved1, cam, a, clf, gca, &soft.grad_a, g1, r.clf_grad);
  backprop_semantic(moved2, cam, b, clf, gcb, &soft.grad_b, g2, r.clf_grad);
  pullback_scene_transform(g1, field1, ps.t_1p);
  pullback_scene_transform(g2, field2, ps.t_2p);
  r.grad1 += g1;
  r.grad2 += g2;
  return r;
}

// ---------------------------------------------------------------------------
// Joint objective

struct JointResult {
  LossBreakdown breakdown;
  FieldGradients grad1;
  FieldGradients grad2;
  ClassifierGradients clf_grad;
};

/// Both reconstructions on the sampled view, plus alignment and pseudo-state
/// terms weighted by lambda_a and lambda_p. Terms with zero weight (or no
/// pseudo-state) are skipped.
inline JointResult joint_loss(const GaussianField& field1, const GaussianField& field2, const Classifier& clf,
                              const SceneTransform& t_12, const Observation& obs1, const Observation& obs2,
                              const Camera& cam, const std::optional<PseudoState>& ps, const LossConfig& cfg = {}) {
  JointResult j;
  auto& b = j.breakdown;
  b.lambda_a = cfg.lambda_a;
  b.lambda_p = cfg.lambda_p;
  auto r1 = recon_loss(field1, clf, obs1, cam, cfg);
  auto r2 = recon_loss(field2, clf, obs2, cam, cfg);
  b.recon_1 = r1.value;
  b.recon_2 = r2.value;
  j.grad1 = std::move(r1.grad);
  j.grad2 = std::move(r2.grad);
  j.clf_grad = r1.clf_grad;
  j.clf_grad += r2.clf_grad;
  if (cfg.lambda_a != 0.0) {
    const auto a = align_loss(field1, field2, clf, t_12, obs1, obs2, cam, cfg.lambda_a);
    b.align_photo = a.photo;
    b.align_sem = a.sem;
    j.grad1 += a.grad1;
    j.grad2 += a.grad2;
    j.clf_grad += a.clf_grad;
  }
  if (cfg.lambda_p != 0.0 && ps) {
    const auto p = pseudo_loss(field1, field2, clf, *ps, cam, cfg.lambda_p, cfg.soft_mode);
    b.pseudo_photo = p.photo;
    b.pseudo_sem = p.sem;
    j.grad1 += p.grad1;
    j.grad2 += p.grad2;
    j.clf_grad += p.clf_grad;
  }
  b.total = b.recon_1 + b.recon_2 + cfg.lambda_a * (b.align_photo + b.align_sem) +
            cfg.lambda_p * (b.pseudo_photo + b.pseudo_sem);
  return j;
}

}  // namespace dsgw
