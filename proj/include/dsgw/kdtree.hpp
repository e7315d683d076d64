#pragma once

// Static 3D kd-tree for nearest-neighbour queries over Gaussian centers.
// Distances are compared squared and ties go to the lower point index, so the
// answers are identical to an exhaustive scan.

#include "dsgw/core.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <vector>

namespace dsgw {

struct Neighbor {
  std::size_t index = 0;
  double dist2 = std::numeric_limits<double>::infinity();
};

inline bool neighbor_before(const Neighbor& a, const Neighbor& b) {
  return a.dist2 < b.dist2 || (a.dist2 == b.dist2 && a.index < b.index);
}

inline double squared_distance(const Vec3& a, const Vec3& b) {
  const double dx = a.x() - b.x();
  const double dy = a.y() - b.y();
  const double dz = a.z() - b.z();
  return dx * dx + dy * dy + dz * dz;
}

class KdTree {
 public:
  /// Below this many points queries scan every point.
  static constexpr std::size_t kExhaustiveBelow = 256;
  static constexpr std::size_t kLeafSize = 8;

  KdTree() = default;

  explicit KdTree(std::vector<Vec3> points) : points_(std::move(points)) {
    order_.resize(points_.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    if (points_.size() >= kExhaustiveBelow) {
      nodes_.reserve(2 * points_.size() / kLeafSize + 1);
      build(0, points_.size());
    }
  }

  std::size_t size() const { return points_.size(); }
  bool empty() const { return points_.empty(); }
  const Vec3& point(std::size_t i) const { return points_[i]; }

  /// Closest point; index is meaningless when the tree is empty.
  Neighbor nearest(const Vec3& q) const {
    Neighbor best;
    if (nodes_.empty()) {
      for (std::size_t i = 0; i < points_.size(); ++i) {
        const Neighbor cand{i, squared_distance(q, points_[i])};
        if (neighbor_before(cand, best)) best = cand;
      }
      return best;
    }
    nearest_rec(0, q, best);
    return best;
  }

  /// The k closest points in ascending order; `skip` is excluded (pass
  /// SIZE_MAX to keep everything).
  std::vector<Neighbor> knn(const Vec3& q, std::size_t k,
                            std::size_t skip = std::numeric_limits<std::size_t>::max()) const {
    std::vector<Neighbor> heap;  // max-heap on neighbor_before
    if (k == 0) return heap;
    auto push = [&](const Neighbor& cand) {
      if (cand.index == skip) return;
      if (heap.size() < k) {
        heap.push_back(cand);
        std::push_heap(heap.begin(), heap.end(), neighbor_before);
      } else if (neighbor_before(cand, heap.front())) {
        std::pop_heap(heap.begin(), heap.end(), neighbor_before);
        heap.back() = cand;
        std::push_heap(heap.begin(), heap.end(), neighbor_before);
      }
    };
    if (nodes_.empty()) {
      for (std::size_t i = 0; i < points_.size(); ++i) push({i, squared_distance(q, points_[i])});
    } else {
      knn_rec(0, q, k, heap, push);
    }
    std::sort_heap(heap.begin(), heap.end(), neighbor_before);
    return heap;
  }

 private:
  struct Node {
    std::size_t begin = 0, end = 0;
    int axis = -1;  // -1 marks a leaf
    double split = 0.0;
    std::size_t left = 0, right = 0;
  };

  std::size_t build(std::size_t begin, std::size_t end) {
    const std::size_t id = nodes_.size();
    nodes_.push_back({begin, end});
    if (end - begin <= kLeafSize) {
      return id;
    }
    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
    Vec3 hi = -lo;
    for (std::size_t i = begin; i < end; ++i) {
      lo = lo.cwiseMin(points_[order_[i]]);
      hi = hi.cwiseMax(points_[order_[i]]);
    }
    int axis = 0;
    (hi - lo).maxCoeff(&axis);
    const std::size_t mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + static_cast<std::ptrdiff_t>(begin),
                     order_.begin() + static_cast<std::ptrdiff_t>(mid),
                     order_.begin() + static_cast<std::ptrdiff_t>(end),
                     [&](std::size_t a, std::size_t b) { return points_[a][axis] < points_[b][axis]; });
    const double split = points_[order_[mid]][axis];
    const std::size_t l = build(begin, mid);
    const std::size_t r = build(mid, end);
    nodes_[id].axis = axis;
    nodes_[id].split = split;
    nodes_[id].left = l;
    nodes_[id].right = r;
    return id;
  }

  void nearest_rec(std::size_t id, const Vec3& q, Neighbor& best) const {
    const Node& n = nodes_[id];
    if (n.axis < 0) {
      for (std::size_t i = n.begin; i < n.end; ++i) {
        const Neighbor cand{order_[i], squared_distance(q, points_[order_[i]])};
        if (neighbor_before(cand, best)) best = cand;
      }
      return;
    }
    // Left holds coordinates <= split, right holds >= split.
    const double d = q[n.axis] - n.split;
    const std::size_t first = d < 0.0 ? n.left : n.right;
    const std::size_t second = d < 0.0 ? n.right : n.left;
    nearest_rec(first, q, best);
    if (d * d <= best.dist2) nearest_rec(second, q, best);
  }

  template <typename Push>
  void knn_rec(std::size_t id, const Vec3& q, std::size_t k, const std::vector<Neighbor>& heap,
               Push& push) const {
    const Node& n = nodes_[id];
    if (n.axis < 0) {
      for (std::size_t i = n.begin; i < n.end; ++i) push({order_[i], squared_distance(q, points_[order_[i]])});
      return;
    }
    const double d = q[n.axis] - n.split;
    const std::size_t first = d < 0.0 ? n.left : n.right;
    const std::size_t second = d < 0.0 ? n.right : n.left;
    knn_rec(first, q, k, heap, push);
    if (heap.size() < k || d * d <= heap.front().dist2) knn_rec(second, q, k, heap, push);
  }

  std::vector<Vec3> points_;
  std::vector<std::size_t> order_;
  std::vector<Node> nodes_;
};

}  // namespace dsgw
