#pragma once

#include "dsgw/core.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <string>
#include <vector>

namespace dsgw {

/// Planar float image: one row per channel, one column per pixel, pixel index
/// y * width + x.
struct Image {
  int width = 0;
  int height = 0;
  Eigen::MatrixXd data;

  Image() = default;
  Image(int channels, int w, int h) : width(w), height(h), data(Eigen::MatrixXd::Zero(channels, w * h)) {}

  int channels() const { return static_cast<int>(data.rows()); }
  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }

  double& at(int c, int x, int y) { return data(c, static_cast<Eigen::Index>(y) * width + x); }
  double at(int c, int x, int y) const { return data(c, static_cast<Eigen::Index>(y) * width + x); }

  bool same_shape(const Image& o) const {
    return width == o.width && height == o.height && channels() == o.channels();
  }
};

/// Integer class ids per pixel.
struct LabelImage {
  int width = 0;
  int height = 0;
  std::vector<int> ids;

  LabelImage() = default;
  LabelImage(int w, int h, int fill = 0) : width(w), height(h), ids(static_cast<std::size_t>(w) * h, fill) {}

  int& at(int x, int y) { return ids[static_cast<std::size_t>(y) * width + x]; }
  int at(int x, int y) const { return ids[static_cast<std::size_t>(y) * width + x]; }

  void validate() const {
    if (ids.size() != static_cast<std::size_t>(width) * height) {
      throw Error(ErrorKind::Input, "label image size does not match its dimensions");
    }
    for (int id : ids) {
      if (id < 0 || id >= kNumClasses) {
        throw Error(ErrorKind::Input, "label id " + std::to_string(id) + " outside [0, 255]");
      }
    }
  }
};

inline void require_same_shape(const Image& a, const Image& b, const char* what) {
  if (!a.same_shape(b)) {
    throw Error(ErrorKind::Input, std::string(what) + ": image dimensions differ (" +
                                      std::to_string(a.width) + "x" + std::to_string(a.height) + "x" +
                                      std::to_string(a.channels()) + " vs " + std::to_string(b.width) +
                                      "x" + std::to_string(b.height) + "x" +
                                      std::to_string(b.channels()) + ")");
  }
}

}  // namespace dsgw
