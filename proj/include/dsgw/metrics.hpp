#pragma once

// PSNR and SSIM on float images in [0, 1]. SSIM uses an 11x11 Gaussian window
// (sigma 1.5) over valid positions only, averaged over positions and channels.
// The differentiable variant feeds the D-SSIM term of the reconstruction loss.

#include "dsgw/image.hpp"

#include <array>
#include <cmath>

namespace dsgw {

inline constexpr double kPsnrCap = 99.0;
inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

inline double mse(const Image& a, const Image& b) {
  require_same_shape(a, b, "mse");
  if (a.data.size() == 0) {
    return 0.0;
  }
  return (a.data - b.data).squaredNorm() / static_cast<double>(a.data.size());
}

inline double psnr(const Image& a, const Image& b) {
  const double e = mse(a, b);
  if (e <= 0.0) {
    return kPsnrCap;
  }
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / e));
}

inline std::array<double, kSsimWindow> ssim_kernel() {
  std::array<double, kSsimWindow> k{};
  double sum = 0.0;
  for (int i = 0; i < kSsimWindow; ++i) {
    const double d = i - kSsimWindow / 2;
    k[i] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
    sum += k[i];
  }
  for (auto& v : k) v /= sum;
  return k;
}

namespace detail {

// Valid separable correlation of a w x h plane with the SSIM kernel.
// Output is (w - 10) x (h - 10), row-major.
inline void ssim_filter(const double* in, int w, int h, const std::array<double, kSsimWindow>& k,
                        std::vector<double>& tmp, std::vector<double>& out) {
  const int ow = w - kSsimWindow + 1;
  const int oh = h - kSsimWindow + 1;
  tmp.assign(static_cast<std::size_t>(ow) * h, 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int v = 0; v < kSsimWindow; ++v) s += k[v] * in[y * w + x + v];
      tmp[static_cast<std::size_t>(y) * ow + x] = s;
    }
  }
  out.assign(static_cast<std::size_t>(ow) * oh, 0.0);
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int u = 0; u < kSsimWindow; ++u) s += k[u] * tmp[static_cast<std::size_t>(y + u) * ow + x];
      out[static_cast<std::size_t>(y) * ow + x] = s;
    }
  }
}

// Adjoint of ssim_filter: scatters a (w - 10) x (h - 10) map back onto w x h.
inline void ssim_filter_adjoint(const std::vector<double>& in, int w, int h,
                                const std::array<double, kSsimWindow>& k, std::vector<double>& tmp,
                                std::vector<double>& out) {
  const int ow = w - kSsimWindow + 1;
  const int oh = h - kSsimWindow + 1;
  tmp.assign(static_cast<std::size_t>(ow) * h, 0.0);
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      const double v = in[static_cast<std::size_t>(y) * ow + x];
      for (int u = 0; u < kSsimWindow; ++u) tmp[static_cast<std::size_t>(y + u) * ow + x] += k[u] * v;
    }
  }
  out.assign(static_cast<std::size_t>(w) * h, 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < ow; ++x) {
      const double v = tmp[static_cast<std::size_t>(y) * ow + x];
      for (int u = 0; u < kSsimWindow; ++u) out[static_cast<std::size_t>(y) * w + x + u] += k[u] * v;
    }
  }
}

}  // namespace detail

struct SsimResult {
  double value = 0.0;
  /// d value / d a, same shape as `a`. Empty unless requested.
  Eigen::MatrixXd grad;
};

/// Mean SSIM of `a` against `b`; optionally the gradient with respect to `a`.
inline SsimResult ssim_with_grad(const Image& a, const Image& b, bool want_grad) {
  require_same_shape(a, b, "ssim");
  if (a.width < kSsimWindow || a.height < kSsimWindow) {
    throw Error(ErrorKind::Input, "ssim needs images of at least 11x11 pixels");
  }
  const int w = a.width;
  const int h = a.height;
  const int ow = w - kSsimWindow + 1;
  const int oh = h - kSsimWindow + 1;
  const std::size_t npos = static_cast<std::size_t>(ow) * oh;
  const std::size_t npix = static_cast<std::size_t>(w) * h;
  const auto k = ssim_kernel();
  const double norm = 1.0 / (static_cast<double>(npos) * a.channels());

  SsimResult result;
  if (want_grad) {
    result.grad = Eigen::MatrixXd::Zero(a.channels(), a.data.cols());
  }

  std::vector<double> x(npix), y(npix), xx(npix), yy(npix), xy(npix), tmp;
  std::vector<double> mx, my, exx, eyy, exy;
  std::vector<double> gm, gq, gr;
  double total = 0.0;
  for (int c = 0; c < a.channels(); ++c) {
    for (std::size_t p = 0; p < npix; ++p) {
      x[p] = a.data(c, static_cast<Eigen::Index>(p));
      y[p] = b.data(c, static_cast<Eigen::Index>(p));
      xx[p] = x[p] * x[p];
      yy[p] = y[p] * y[p];
      xy[p] = x[p] * y[p];
    }
    detail::ssim_filter(x.data(), w, h, k, tmp, mx);
    detail::ssim_filter(y.data(), w, h, k, tmp, my);
    detail::ssim_filter(xx.data(), w, h, k, tmp, exx);
    detail::ssim_filter(yy.data(), w, h, k, tmp, eyy);
    detail::ssim_filter(xy.data(), w, h, k, tmp, exy);
    if (want_grad) {
      gm.assign(npos, 0.0);
      gq.assign(npos, 0.0);
      gr.assign(npos, 0.0);
    }
    for (std::size_t i = 0; i < npos; ++i) {
      const double m = mx[i];
      const double n = my[i];
      const double vx = exx[i] - m * m;
      const double vy = eyy[i] - n * n;
      const double cxy = exy[i] - m * n;
      const double a1 = 2.0 * m * n + kSsimC1;
      const double a2 = 2.0 * cxy + kSsimC2;
      const double b1 = m * m + n * n + kSsimC1;
      const double b2 = vx + vy + kSsimC2;
      const double s = (a1 * a2) / (b1 * b2);
      total += s;
      if (want_grad) {
        gm[i] = norm * ((2.0 * n * a2 - 2.0 * n * a1) / (b1 * b2) - s * 2.0 * m / b1 + s * 2.0 * m / b2);
        gq[i] = norm * (-s / b2);
        gr[i] = norm * (2.0 * a1 / (b1 * b2));
      }
    }
    if (want_grad) {
      std::vector<double> bm, bq, br;
      detail::ssim_filter_adjoint(gm, w, h, k, tmp, bm);
      detail::ssim_filter_adjoint(gq, w, h, k, tmp, bq);
      detail::ssim_filter_adjoint(gr, w, h, k, tmp, br);
      for (std::size_t p = 0; p < npix; ++p) {
        result.grad(c, static_cast<Eigen::Index>(p)) = bm[p] + 2.0 * x[p] * bq[p] + y[p] * br[p];
      }
    }
  }
  result.value = total / (static_cast<double>(npos) * a.channels());
  return result;
}

inline double ssim(const Image& a, const Image& b) { return ssim_with_grad(a, b, false).value; }

}  // namespace dsgw
