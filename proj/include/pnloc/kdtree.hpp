// Copyright 2026 The pnloc Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "pnloc/common.hpp"

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

namespace pnloc {

struct Neighbor {
  std::uint32_t index;
  double distance;

  bool operator==(const Neighbor&) const = default;
};

/// Exact K-nearest / radius search over a fixed set of 3D points.
/// Results are ordered by (distance, index); ties on the cut-off resolve to
/// the lower index, which is also what a sorted brute-force scan produces.
class KdTree {
 public:
  static constexpr int kLeafSize = 8;

  KdTree() = default;

  explicit KdTree(std::span<const Vec3> points) : points_(points.begin(), points.end()) {
    order_.resize(points_.size());
    std::iota(order_.begin(), order_.end(), 0u);
    if (!points_.empty()) {
      nodes_.reserve(2 * points_.size() / kLeafSize + 2);
      build(0, static_cast<std::uint32_t>(points_.size()));
    }
  }

  std::size_t size() const noexcept { return points_.size(); }

  /// Up to k neighbors with distance <= radius, ascending.
  std::vector<Neighbor> query(const Vec3& x, std::size_t k, double radius) const {
    std::vector<Neighbor> out;
    query(x, k, radius, out);
    return out;
  }

  /// Allocation-reusing overload for hot loops.
  void query(const Vec3& x, std::size_t k, double radius, std::vector<Neighbor>& out) const {
    out.clear();
    if (nodes_.empty() || k == 0 || !(radius >= 0)) return;
    Heap heap{out, k, radius * radius};
    search(0, x, heap);
    std::sort(out.begin(), out.end(), [](const Neighbor& a, const Neighbor& b) {
      return a.distance < b.distance || (a.distance == b.distance && a.index < b.index);
    });
    for (auto& n : out) n.distance = std::sqrt(n.distance);
  }

 private:
  struct Node {
    Vec3 lo, hi;  // bounding box of the node's points
    std::uint32_t begin, end;
    std::int32_t left = -1, right = -1;
  };

  // Bounded max-heap on (squared distance, index) stored in the output vector.
  struct Heap {
    std::vector<Neighbor>& items;
    std::size_t k;
    double radius2;

    static bool less(const Neighbor& a, const Neighbor& b) {
      return a.distance < b.distance || (a.distance == b.distance && a.index < b.index);
    }
    double bound() const { return items.size() < k ? radius2 : items.front().distance; }
    void offer(std::uint32_t index, double d2) {
      if (d2 > radius2) return;
      const Neighbor cand{index, d2};
      if (items.size() < k) {
        items.push_back(cand);
        std::push_heap(items.begin(), items.end(), less);
      } else if (less(cand, items.front())) {
        std::pop_heap(items.begin(), items.end(), less);
        items.back() = cand;
        std::push_heap(items.begin(), items.end(), less);
      }
    }
  };

  std::int32_t build(std::uint32_t begin, std::uint32_t end) {
    const auto id = static_cast<std::int32_t>(nodes_.size());
    nodes_.push_back({});
    Vec3 lo = points_[order_[begin]], hi = lo;
    for (std::uint32_t i = begin + 1; i < end; ++i) {
      lo = lo.cwiseMin(points_[order_[i]]);
      hi = hi.cwiseMax(points_[order_[i]]);
    }
    nodes_[id].lo = lo;
    nodes_[id].hi = hi;
    nodes_[id].begin = begin;
    nodes_[id].end = end;
    if (end - begin <= kLeafSize) return id;

    int axis = 0;
    (hi - lo).maxCoeff(&axis);
    const std::uint32_t mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](std::uint32_t a, std::uint32_t b) {
                       return points_[a][axis] < points_[b][axis] ||
                              (points_[a][axis] == points_[b][axis] && a < b);
                     });
    const auto left = build(begin, mid);
    const auto right = build(mid, end);
    nodes_[id].left = left;
    nodes_[id].right = right;
    return id;
  }

  static double box_distance2(const Node& node, const Vec3& x) {
    const Vec3 d = (node.lo - x).cwiseMax(x - node.hi).cwiseMax(0.0);
    return d.squaredNorm();
  }

  void search(std::int32_t id, const Vec3& x, Heap& heap) const {
    const Node& node = nodes_[id];
    if (node.left < 0) {
      for (std::uint32_t i = node.begin; i < node.end; ++i) {
        const std::uint32_t idx = order_[i];
        heap.offer(idx, (points_[idx] - x).squaredNorm());
      }
      return;
    }
    const double dl = box_distance2(nodes_[node.left], x);
    const double dr = box_distance2(nodes_[node.right], x);
    const auto first = dl <= dr ? node.left : node.right;
    const auto second = dl <= dr ? node.right : node.left;
    const double d_first = std::min(dl, dr), d_second = std::max(dl, dr);
    // Strict comparison keeps boxes that touch the bound so index tie-breaks stay exact.
    if (!(d_first > heap.bound())) search(first, x, heap);
    if (!(d_second > heap.bound())) search(second, x, heap);
  }

  std::vector<Vec3> points_;
  std::vector<std::uint32_t> order_;
  std::vector<Node> nodes_;
};

}  // namespace pnloc
