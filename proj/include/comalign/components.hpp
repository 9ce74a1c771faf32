#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "comalign/error.hpp"
#include "comalign/numerics/tensor.hpp"

namespace comalign::components {

struct DetectionBox {
  double x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0;
  double confidence = 0.0;
  std::string label;

  double area() const { return (x2 - x1) * (y2 - y1); }
  bool contains(const DetectionBox& o) const {
    return x1 <= o.x1 && y1 <= o.y1 && x2 >= o.x2 && y2 >= o.y2;
  }
  friend bool operator==(const DetectionBox&, const DetectionBox&) = default;
};

inline void validate(const DetectionBox& b) {
  if (!(b.x1 < b.x2) || !(b.y1 < b.y2)) throw FormatError("detection box: coordinates not ordered");
  if (!(b.confidence >= 0.0 && b.confidence <= 1.0))
    throw FormatError("detection box: confidence outside [0,1]");
}

struct RelationCandidate {
  std::size_t subject_index = 0;
  std::size_t object_index = 0;
  DetectionBox box;  // union region; confidence == score
  double score = 0.0;
};

// Smallest box covering both inputs, scored by the product of confidences.
inline DetectionBox enclosing_box(const DetectionBox& a, const DetectionBox& b) {
  return DetectionBox{std::min(a.x1, b.x1), std::min(a.y1, b.y1), std::max(a.x2, b.x2),
                      std::max(a.y2, b.y2), a.confidence * b.confidence, {}};
}

// Every unordered pair of boxes becomes a candidate relation region. The top m
// by score are kept; equal scores prefer the tighter union, then index order.
inline std::vector<RelationCandidate> relation_candidates(std::span<const DetectionBox> boxes,
                                                          std::size_t m) {
  std::vector<RelationCandidate> all;
  if (boxes.size() < 2 || m == 0) return all;
  all.reserve(boxes.size() * (boxes.size() - 1) / 2);
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    for (std::size_t j = i + 1; j < boxes.size(); ++j) {
      DetectionBox u = enclosing_box(boxes[i], boxes[j]);
      all.push_back({i, j, u, u.confidence});
    }
  }
  auto key = [](const RelationCandidate& c) {
    return std::make_tuple(-c.score, c.box.area(), c.subject_index, c.object_index);
  };
  const std::size_t keep = std::min(m, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(keep), all.end(),
                    [&](const auto& a, const auto& b) { return key(a) < key(b); });
  all.resize(keep);
  return all;
}

template <typename T>
struct FittedList {
  std::vector<T> items;
  num::Mask mask;

  std::size_t real_count() const {
    return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
  }
};

// Fits a component list to exactly k slots. With a ranking (visual path) the
// k best-scored survive, best first; without one (textual path) the first k
// in occurrence order survive. Remaining slots hold `pad` and a false mask bit.
template <typename T>
FittedList<T> fit_to_count(std::vector<T> components, std::size_t k, const T& pad,
                           std::optional<std::span<const double>> ranking = std::nullopt) {
  FittedList<T> out;
  out.items.reserve(k);
  out.mask.assign(k, 0);
  std::vector<std::size_t> order(components.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (ranking) {
    if (ranking->size() != components.size())
      throw DimensionError("fit_to_count: ranking length != component count");
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return (*ranking)[a] > (*ranking)[b]; });
  }
  const std::size_t kept = std::min(k, components.size());
  for (std::size_t s = 0; s < kept; ++s) {
    out.items.push_back(std::move(components[order[s]]));
    out.mask[s] = 1;
  }
  while (out.items.size() < k) out.items.push_back(pad);
  return out;
}

}  // namespace comalign::components
