#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <tuple>

#include "comalign/components.hpp"

using comalign::components::DetectionBox;
using comalign::components::enclosing_box;
using comalign::components::fit_to_count;
using comalign::components::relation_candidates;
using comalign::components::RelationCandidate;

namespace {

DetectionBox box(double x1, double y1, double x2, double y2, double c) { return {x1, y1, x2, y2, c, {}}; }

std::vector<DetectionBox> random_boxes(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> pos(0.0, 100.0), ext(1.0, 40.0);
  // Few distinct confidences so score ties actually occur.
  std::uniform_int_distribution<int> conf(1, 4);
  std::vector<DetectionBox> out;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = pos(rng), y = pos(rng);
    out.push_back(box(x, y, x + ext(rng), y + ext(rng), conf(rng) / 4.0));
  }
  return out;
}

}  // namespace

TEST(EnclosingBox, SpecExample) {
  const auto u = enclosing_box(box(0, 0, 2, 2, 0.9), box(1, 1, 3, 3, 0.8));
  EXPECT_EQ(u.x1, 0);
  EXPECT_EQ(u.y1, 0);
  EXPECT_EQ(u.x2, 3);
  EXPECT_EQ(u.y2, 3);
  EXPECT_DOUBLE_EQ(u.confidence, 0.72);
}

TEST(EnclosingBox, IdenticalBoxesSquareTheConfidence) {
  const auto b = box(1, 2, 5, 7, 0.6);
  const auto u = enclosing_box(b, b);
  EXPECT_EQ(std::tie(u.x1, u.y1, u.x2, u.y2), std::tie(b.x1, b.y1, b.x2, b.y2));
  EXPECT_DOUBLE_EQ(u.confidence, 0.36);
}

TEST(EnclosingBox, DisjointBoxes) {
  const auto u = enclosing_box(box(0, 0, 1, 1, 1), box(5, 5, 6, 6, 1));
  EXPECT_EQ(std::tie(u.x1, u.y1, u.x2, u.y2), std::make_tuple(0.0, 0.0, 6.0, 6.0));
}

TEST(EnclosingBox, CommutativeAndContainsBoth) {
  std::mt19937_64 rng(1);
  for (int rep = 0; rep < 50; ++rep) {
    const auto bs = random_boxes(rng, 2);
    const auto a = enclosing_box(bs[0], bs[1]), b = enclosing_box(bs[1], bs[0]);
    EXPECT_EQ(a, b);
    EXPECT_TRUE(a.contains(bs[0]));
    EXPECT_TRUE(a.contains(bs[1]));
  }
}

TEST(RelationCandidates, ThreeBoxExample) {
  const std::vector<DetectionBox> bs{box(0, 0, 1, 1, 0.9), box(2, 2, 3, 3, 0.8), box(4, 4, 5, 5, 0.5)};
  const auto c = relation_candidates(bs, 2);
  ASSERT_EQ(c.size(), 2u);
  EXPECT_DOUBLE_EQ(c[0].score, 0.72);
  EXPECT_EQ(std::tie(c[0].subject_index, c[0].object_index), std::make_tuple(0ul, 1ul));
  EXPECT_DOUBLE_EQ(c[1].score, 0.45);
  EXPECT_EQ(std::tie(c[1].subject_index, c[1].object_index), std::make_tuple(0ul, 2ul));
}

TEST(RelationCandidates, ZeroRequestedIsEmpty) {
  const std::vector<DetectionBox> bs{box(0, 0, 1, 1, 0.9), box(2, 2, 3, 3, 0.8)};
  EXPECT_TRUE(relation_candidates(bs, 0).empty());
}

TEST(RelationCandidates, FewerThanTwoBoxesIsEmpty) {
  const std::vector<DetectionBox> bs{box(0, 0, 1, 1, 0.9)};
  EXPECT_TRUE(relation_candidates(bs, 5).empty());
  EXPECT_TRUE(relation_candidates(std::vector<DetectionBox>{}, 5).empty());
}

TEST(RelationCandidates, MatchesExhaustiveOracle) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<std::size_t> count(0, 8), keep(0, 30);
  for (int rep = 0; rep < 200; ++rep) {
    const auto bs = random_boxes(rng, count(rng));
    const std::size_t m = keep(rng);
    std::vector<std::tuple<double, double, std::size_t, std::size_t>> oracle;
    for (std::size_t i = 0; i < bs.size(); ++i)
      for (std::size_t j = i + 1; j < bs.size(); ++j) {
        const double x1 = std::min(bs[i].x1, bs[j].x1), y1 = std::min(bs[i].y1, bs[j].y1);
        const double x2 = std::max(bs[i].x2, bs[j].x2), y2 = std::max(bs[i].y2, bs[j].y2);
        oracle.emplace_back(-(bs[i].confidence * bs[j].confidence), (x2 - x1) * (y2 - y1), i, j);
      }
    std::sort(oracle.begin(), oracle.end());
    oracle.resize(std::min(m, oracle.size()));
    const auto got = relation_candidates(bs, m);
    ASSERT_EQ(got.size(), oracle.size());
    for (std::size_t k = 0; k < got.size(); ++k) {
      EXPECT_EQ(got[k].subject_index, std::get<2>(oracle[k]));
      EXPECT_EQ(got[k].object_index, std::get<3>(oracle[k]));
      EXPECT_EQ(got[k].score, -std::get<0>(oracle[k]));
      EXPECT_EQ(got[k].box.confidence, got[k].score);
      EXPECT_NE(got[k].subject_index, got[k].object_index);
      EXPECT_TRUE(got[k].box.contains(bs[got[k].subject_index]));
      EXPECT_TRUE(got[k].box.contains(bs[got[k].object_index]));
      if (k > 0) {
        EXPECT_LE(got[k].score, got[k - 1].score);
      }
    }
  }
}

TEST(FitToCount, TruncatesTextualInOccurrenceOrder) {
  std::vector<int> items(12);
  for (int i = 0; i < 12; ++i) items[i] = i;
  const auto f = fit_to_count(items, 10, -1);
  ASSERT_EQ(f.items.size(), 10u);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(f.items[i], i);
  EXPECT_EQ(f.real_count(), 10u);
}

TEST(FitToCount, PadsShortLists) {
  const auto f = fit_to_count(std::vector<int>{4, 5, 6}, 10, 0);
  ASSERT_EQ(f.items.size(), 10u);
  EXPECT_EQ(f.real_count(), 3u);
  for (std::size_t i = 0; i < 10; ++i) {
    EXPECT_EQ(f.mask[i], i < 3 ? 1 : 0);
    if (i >= 3) {
      EXPECT_EQ(f.items[i], 0);
    }
  }
}

TEST(FitToCount, RankedKeepsTopScores) {
  const std::vector<double> scores{0.1, 0.9, 0.5};
  const auto f = fit_to_count(std::vector<std::string>{"a", "b", "c"}, 2, std::string{},
                              std::span<const double>(scores));
  ASSERT_EQ(f.items.size(), 2u);
  EXPECT_EQ(f.items[0], "b");
  EXPECT_EQ(f.items[1], "c");
}

TEST(FitToCount, ZeroPayloadVectorPadding) {
  const std::vector<double> zero(4, 0.0);
  const auto f = fit_to_count(std::vector<std::vector<double>>{{1, 0, 0, 0}}, 3, zero);
  EXPECT_EQ(f.items[1], zero);
  EXPECT_EQ(f.items[2], zero);
}

TEST(FitToCount, RankingLengthMismatchThrows) {
  const std::vector<double> scores{0.1};
  EXPECT_THROW(fit_to_count(std::vector<int>{1, 2}, 2, 0, std::span<const double>(scores)),
               comalign::DimensionError);
}
