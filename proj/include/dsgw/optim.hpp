#pragma once

// Adam over parameter groups, plus conversion between a GaussianField and
// its column-major parameter arrays.

#include "dsgw/core.hpp"
#include "dsgw/rasterizer.hpp"
#include "dsgw/segmentation.hpp"

#include <cmath>
#include <cstdint>
#include <vector>

namespace dsgw {

/// Parameter arrays of a field, one column per primitive.
struct FieldArrays {
  Eigen::MatrixXd center;     // 3 x N
  Eigen::MatrixXd rotation;   // 4 x N, (w, x, y, z)
  Eigen::MatrixXd log_scale;  // 3 x N
  Eigen::MatrixXd opacity;    // 1 x N, logits
  Eigen::MatrixXd color;      // 3 x N
  Eigen::MatrixXd identity;   // 16 x N
  std::vector<int> labels;
  int object_count = 0;

  std::size_t size() const { return static_cast<std::size_t>(center.cols()); }
};

inline FieldArrays pack_field(const GaussianField& f) {
  const auto n = static_cast<Eigen::Index>(f.size());
  FieldArrays a;
  a.center.resize(3, n);
  a.rotation.resize(4, n);
  a.log_scale.resize(3, n);
  a.opacity.resize(1, n);
  a.color.resize(3, n);
  a.identity.resize(kIdentityDim, n);
  a.labels.resize(f.size());
  a.object_count = f.object_count;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& g = f.primitives[static_cast<std::size_t>(i)];
    a.center.col(i) = g.center;
    a.rotation.col(i) << g.rotation.w(), g.rotation.x(), g.rotation.y(), g.rotation.z();
    a.log_scale.col(i) = g.log_scale;
    a.opacity(0, i) = g.opacity_logit;
    a.color.col(i) = g.color;
    a.identity.col(i) = g.identity;
    a.labels[static_cast<std::size_t>(i)] = g.object_label;
  }
  return a;
}

inline GaussianField unpack_field(const FieldArrays& a) {
  const auto n = a.center.cols();
  if (a.rotation.cols() != n || a.log_scale.cols() != n || a.opacity.cols() != n || a.color.cols() != n ||
      a.identity.cols() != n || static_cast<Eigen::Index>(a.labels.size()) != n) {
    throw Error(ErrorKind::Input, "field arrays disagree in primitive count");
  }
  GaussianField f;
  f.object_count = a.object_count;
  f.primitives.resize(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    auto& g = f.primitives[static_cast<std::size_t>(i)];
    g.center = a.center.col(i);
    g.rotation = Quat(a.rotation(0, i), a.rotation(1, i), a.rotation(2, i), a.rotation(3, i));
    g.log_scale = a.log_scale.col(i);
    g.opacity_logit = a.opacity(0, i);
    g.color = a.color.col(i);
    g.identity = a.identity.col(i);
    g.object_label = a.labels[static_cast<std::size_t>(i)];
  }
  return f;
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamMoments {
  Eigen::MatrixXd m;
  Eigen::MatrixXd v;
};

/// Moments for a list of parameter groups and the shared step counter.
struct AdamState {
  std::int64_t step = 0;
  std::vector<AdamMoments> groups;
  AdamConfig config;
};

/// One bias-corrected Adam update of every group. Moments are created on the
/// first call.
inline void adam_step(const std::vector<Eigen::MatrixXd*>& params, const std::vector<const Eigen::MatrixXd*>& grads,
                      AdamState& state, const std::vector<double>& lr) {
  if (params.size() != grads.size() || params.size() != lr.size()) {
    throw Error(ErrorKind::Input, "adam_step: group counts differ");
  }
  if (state.groups.empty()) {
    for (const auto* p : params) {
      state.groups.push_back({Eigen::MatrixXd::Zero(p->rows(), p->cols()), Eigen::MatrixXd::Zero(p->rows(), p->cols())});
    }
  }
  if (state.groups.size() != params.size()) {
    throw Error(ErrorKind::Input, "adam_step: optimizer state has a different group count");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& p = *params[k];
    const auto& g = *grads[k];
    const auto& m = state.groups[k].m;
    if (g.rows() != p.rows() || g.cols() != p.cols() || m.rows() != p.rows() || m.cols() != p.cols()) {
      throw Error(ErrorKind::Input, "adam_step: shape mismatch in group " + std::to_string(k));
    }
  }
  state.step += 1;
  const auto& c = state.config;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& m = state.groups[k].m;
    auto& v = state.groups[k].v;
    const auto& g = *grads[k];
    m = c.beta1 * m + (1.0 - c.beta1) * g;
    v = c.beta2 * v + (1.0 - c.beta2) * g.cwiseProduct(g);
    auto& p = *params[k];
    p.array() -= lr[k] * (m.array() / bc1) / ((v.array() / bc2).sqrt() + c.eps);
  }
}

/// Per-group learning rates for Gaussian parameters and the classifier.
struct LearningRates {
  double center = 1.6e-4;
  double rotation = 1e-3;
  double log_scale = 5e-3;
  double opacity = 5e-2;
  double color = 2.5e-3;
  double identity = 2.5e-3;
  double classifier = 5e-4;

  void validate() const {
    for (double r : {center, rotation, log_scale, opacity, color, identity, classifier}) {
      if (!(r > 0.0)) throw Error(ErrorKind::ParameterDomain, "learning rates must be positive");
    }
  }
};

inline void adam_step_field(GaussianField& field, const FieldGradients& grads, AdamState& state,
                            const LearningRates& lr) {
  if (grads.size() != field.size()) {
    throw Error(ErrorKind::Input, "adam_step_field: gradient count differs from the field");
  }
  FieldArrays a = pack_field(field);
  const Eigen::MatrixXd gc = grads.center, gr = grads.rotation, gs = grads.log_scale, go = grads.opacity_logit,
                        gcol = grads.color, gi = grads.identity;
  adam_step({&a.center, &a.rotation, &a.log_scale, &a.opacity, &a.color, &a.identity}, {&gc, &gr, &gs, &go, &gcol, &gi},
            state, {lr.center, lr.rotation, lr.log_scale, lr.opacity, lr.color, lr.identity});
  for (Eigen::Index i = 0; i < a.rotation.cols(); ++i) {
    const double n = a.rotation.col(i).norm();
    if (n > 0.0) {
      a.rotation.col(i) /= n;
    } else {
      a.rotation.col(i) << 1, 0, 0, 0;
    }
  }
  field = unpack_field(a);
}

inline void adam_step_classifier(Classifier& clf, const ClassifierGradients& grads, AdamState& state, double lr) {
  Eigen::MatrixXd w = clf.weights;
  Eigen::MatrixXd b = clf.bias;
  const Eigen::MatrixXd gw = grads.weights;
  const Eigen::MatrixXd gb = grads.bias;
  adam_step({&w, &b}, {&gw, &gb}, state, {lr, lr});
  clf.weights = w;
  clf.bias = b;
}

/// Rebuilds every group so that column j holds the old column source[j];
/// negative entries start from zero moments. Used when primitives are removed
/// or appended.
inline void remap_moments(AdamState& state, const std::vector<std::ptrdiff_t>& source) {
  for (auto& g : state.groups) {
    AdamMoments next{Eigen::MatrixXd::Zero(g.m.rows(), static_cast<Eigen::Index>(source.size())),
                     Eigen::MatrixXd::Zero(g.v.rows(), static_cast<Eigen::Index>(source.size()))};
    for (std::size_t j = 0; j < source.size(); ++j) {
      if (source[j] < 0 || source[j] >= g.m.cols()) continue;
      next.m.col(static_cast<Eigen::Index>(j)) = g.m.col(source[j]);
      next.v.col(static_cast<Eigen::Index>(j)) = g.v.col(source[j]);
    }
    g = std::move(next);
  }
}

}  // namespace dsgw
