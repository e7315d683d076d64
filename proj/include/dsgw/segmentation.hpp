#pragma once

// Shared linear classifier over rendered identity features, plus the hard and
// soft cross-entropy terms built on it. Logits are stored as a
// kNumClasses x pixels matrix so that one column is one pixel.

#include "dsgw/core.hpp"
#include "dsgw/image.hpp"
#include "dsgw/random.hpp"

#include <cmath>
#include <vector>

namespace dsgw {

using ClassifierWeights = Eigen::Matrix<double, kNumClasses, kIdentityDim>;
using ClassifierBias = Eigen::Matrix<double, kNumClasses, 1>;

struct Classifier {
  ClassifierWeights weights = ClassifierWeights::Zero();
  ClassifierBias bias = ClassifierBias::Zero();

  static Classifier zeros() { return {}; }

  /// Weights drawn from U(-range, range), zero bias.
  static Classifier random(std::uint64_t seed, double range = 0.25) {
    Rng rng(seed);
    Classifier c;
    for (Eigen::Index j = 0; j < c.weights.cols(); ++j) {
      for (Eigen::Index i = 0; i < c.weights.rows(); ++i) c.weights(i, j) = rng.uniform(-range, range);
    }
    return c;
  }

  void validate() const {
    if (!weights.allFinite() || !bias.allFinite()) {
      throw Error(ErrorKind::ParameterDomain, "classifier has non-finite entries");
    }
  }
};

struct ClassifierGradients {
  ClassifierWeights weights = ClassifierWeights::Zero();
  ClassifierBias bias = ClassifierBias::Zero();

  ClassifierGradients& operator+=(const ClassifierGradients& o) {
    weights += o.weights;
    bias += o.bias;
    return *this;
  }
  ClassifierGradients& operator*=(double s) {
    weights *= s;
    bias *= s;
    return *this;
  }
};

/// Per-pixel logits W f + b; `features` is 16 x pixels.
inline Eigen::MatrixXd classify(const Eigen::MatrixXd& features, const Classifier& clf) {
  if (features.rows() != kIdentityDim) {
    throw Error(ErrorKind::Input, "classify expects 16 feature channels");
  }
  Eigen::MatrixXd logits = clf.weights * features;
  logits.colwise() += clf.bias;
  return logits;
}

inline Eigen::MatrixXd classify(const Image& feature_image, const Classifier& clf) {
  return classify(feature_image.data, clf);
}

struct ClassifyBackward {
  ClassifierGradients classifier;
  /// 16 x pixels.
  Eigen::MatrixXd features;
};

inline ClassifyBackward classify_backward(const Eigen::MatrixXd& features, const Classifier& clf,
                                          const Eigen::MatrixXd& grad_logits) {
  if (grad_logits.rows() != kNumClasses || grad_logits.cols() != features.cols()) {
    throw Error(ErrorKind::Input, "classify_backward: gradient shape mismatch");
  }
  ClassifyBackward out;
  out.classifier.weights = grad_logits * features.transpose();
  out.classifier.bias = grad_logits.rowwise().sum();
  out.features = clf.weights.transpose() * grad_logits;
  return out;
}

namespace detail {

/// Column-wise log-softmax, stabilized by the column maximum.
inline Eigen::MatrixXd log_softmax(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd out(logits.rows(), logits.cols());
  for (Eigen::Index p = 0; p < logits.cols(); ++p) {
    const double m = logits.col(p).maxCoeff();
    auto o = out.col(p);
    o.array() = logits.col(p).array() - m;
    o.array() -= std::log(o.array().exp().sum());
  }
  return out;
}

}  // namespace detail

inline Eigen::MatrixXd softmax(const Eigen::MatrixXd& logits) { return detail::log_softmax(logits).array().exp(); }

struct CrossEntropy {
  double value = 0.0;
  Eigen::MatrixXd grad;  // same shape as the logits
};

/// Mean of -log softmax(logits)[target] over valid pixels. An empty `valid`
/// means every pixel counts.
inline CrossEntropy cross_entropy_hard(const Eigen::MatrixXd& logits, const LabelImage& target,
                                       const std::vector<char>& valid = {}) {
  const auto np = static_cast<std::size_t>(logits.cols());
  if (logits.rows() != kNumClasses || target.ids.size() != np) {
    throw Error(ErrorKind::Input, "cross_entropy_hard: logits and target disagree in size");
  }
  if (!valid.empty() && valid.size() != np) {
    throw Error(ErrorKind::Input, "cross_entropy_hard: valid mask has the wrong size");
  }
  target.validate();
  CrossEntropy ce;
  ce.grad = Eigen::MatrixXd::Zero(logits.rows(), logits.cols());
  std::size_t count = 0;
  for (std::size_t p = 0; p < np; ++p) {
    if (valid.empty() || valid[p]) ++count;
  }
  if (count == 0) {
    return ce;
  }
  const double inv = 1.0 / static_cast<double>(count);
  for (std::size_t p = 0; p < np; ++p) {
    if (!valid.empty() && !valid[p]) continue;
    const auto col = static_cast<Eigen::Index>(p);
    const double m = logits.col(col).maxCoeff();
    auto g = ce.grad.col(col);
    g.array() = (logits.col(col).array() - m).exp();
    const double sum = g.sum();
    const int t = target.ids[p];
    ce.value += (std::log(sum) + m - logits(t, col)) * inv;
    g *= inv / sum;
    ce.grad(t, col) -= inv;
  }
  return ce;
}

enum class SoftCeMode {
  /// 1/2 [H(softmax(a), b) + H(softmax(b), a)]
  Symmetric,
  /// H(softmax(a), b) only.
  AToB,
};

struct SoftCrossEntropy {
  double value = 0.0;
  Eigen::MatrixXd grad_a;
  Eigen::MatrixXd grad_b;
};

/// Cross-entropy between two predictions, averaged over pixels, with H(p, q) =
/// -sum p log softmax(q). Gradients flow into both arguments.
inline SoftCrossEntropy cross_entropy_soft(const Eigen::MatrixXd& logits_a, const Eigen::MatrixXd& logits_b,
                                           SoftCeMode mode = SoftCeMode::Symmetric) {
  if (logits_a.rows() != logits_b.rows() || logits_a.cols() != logits_b.cols()) {
    throw Error(ErrorKind::Input, "cross_entropy_soft: logit shapes differ");
  }
  SoftCrossEntropy out;
  out.grad_a = Eigen::MatrixXd::Zero(logits_a.rows(), logits_a.cols());
  out.grad_b = Eigen::MatrixXd::Zero(logits_b.rows(), logits_b.cols());
  if (logits_a.cols() == 0) {
    return out;
  }
  const double inv = 1.0 / static_cast<double>(logits_a.cols());
  const Eigen::MatrixXd la = detail::log_softmax(logits_a);
  const Eigen::MatrixXd lb = detail::log_softmax(logits_b);
  const Eigen::MatrixXd pa = la.array().exp();
  const Eigen::MatrixXd pb = lb.array().exp();

  // H(softmax(x), y) and its partials, scaled by w.
  auto one_way = [&](const Eigen::MatrixXd& px, const Eigen::MatrixXd& py, const Eigen::MatrixXd& ly,
                     Eigen::MatrixXd& gx, Eigen::MatrixXd& gy, double w) {
    for (Eigen::Index p = 0; p < px.cols(); ++p) {
      const double h = -(px.col(p).array() * ly.col(p).array()).sum();
      out.value += w * inv * h;
      // d/dx_j = p_j (-log q_j - H)
      gx.col(p).array() += w * inv * px.col(p).array() * (-ly.col(p).array() - h);
      // d/dy_j = q_j - p_j
      gy.col(p).array() += w * inv * (py.col(p).array() - px.col(p).array());
    }
  };
  if (mode == SoftCeMode::Symmetric) {
    one_way(pa, pb, lb, out.grad_a, out.grad_b, 0.5);
    one_way(pb, pa, la, out.grad_b, out.grad_a, 0.5);
  } else {
    one_way(pa, pb, lb, out.grad_a, out.grad_b, 1.0);
  }
  return out;
}

/// Hard labels from logits: argmax over classes 0..max_label, kept only when
/// its probability reaches `min_confidence`; otherwise `fallback[p]`.
inline std::vector<int> decode_labels(const Eigen::MatrixXd& logits, int max_label, double min_confidence,
                                      const std::vector<int>& fallback) {
  std::vector<int> out(static_cast<std::size_t>(logits.cols()));
  const Eigen::MatrixXd p = softmax(logits);
  for (Eigen::Index c = 0; c < logits.cols(); ++c) {
    Eigen::Index best = 0;
    p.col(c).head(max_label + 1).maxCoeff(&best);
    const bool keep = p(best, c) >= min_confidence || fallback.empty();
    out[static_cast<std::size_t>(c)] = keep ? static_cast<int>(best) : fallback[static_cast<std::size_t>(c)];
  }
  return out;
}

}  // namespace dsgw
