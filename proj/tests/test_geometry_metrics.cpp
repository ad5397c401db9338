#include <gtest/gtest.h>

#include <numbers>

#include "itkd/geometry.hpp"
#include "itkd/metrics.hpp"
#include "itkd/rng.hpp"

using namespace itkd;

namespace {

constexpr double kPi = std::numbers::pi;

Box3D box(double cx, double cy, double l, double w, double yaw, int cls = 0) {
    Box3D b;
    b.cx = cx;
    b.cy = cy;
    b.cz = 0.5;
    b.length = l;
    b.width = w;
    b.height = 1.0;
    b.yaw = yaw;
    b.class_id = cls;
    return b;
}

bool point_in_box(double px, double py, const Box3D& b) {
    double c = std::cos(b.yaw), s = std::sin(b.yaw);
    double dx = px - b.cx, dy = py - b.cy;
    double lx = c * dx + s * dy;
    double ly = -s * dx + c * dy;
    return std::fabs(lx) <= 0.5 * b.length && std::fabs(ly) <= 0.5 * b.width;
}

// Monte-Carlo IoU: sample the intersection of the two axis-aligned bounding
// boxes; exact areas for the denominators.
double monte_carlo_iou(const Box3D& a, const Box3D& b, int samples, std::uint64_t seed) {
    auto bounds = [](const Box3D& bx, double& x0, double& x1, double& y0, double& y1) {
        auto cs = bev_corners(bx);
        x0 = y0 = 1e300;
        x1 = y1 = -1e300;
        for (const auto& c : cs) {
            x0 = std::min(x0, c[0]);
            x1 = std::max(x1, c[0]);
            y0 = std::min(y0, c[1]);
            y1 = std::max(y1, c[1]);
        }
    };
    double ax0, ax1, ay0, ay1, bx0, bx1, by0, by1;
    bounds(a, ax0, ax1, ay0, ay1);
    bounds(b, bx0, bx1, by0, by1);
    double x0 = std::max(ax0, bx0), x1 = std::min(ax1, bx1);
    double y0 = std::max(ay0, by0), y1 = std::min(ay1, by1);
    if (x0 >= x1 || y0 >= y1) return 0.0;
    Rng rng(seed);
    int hits = 0;
    for (int i = 0; i < samples; ++i) {
        double px = rng.uniform(x0, x1);
        double py = rng.uniform(y0, y1);
        if (point_in_box(px, py, a) && point_in_box(px, py, b)) ++hits;
    }
    double inter = (x1 - x0) * (y1 - y0) * double(hits) / double(samples);
    double uni = a.length * a.width + b.length * b.width - inter;
    return inter / uni;
}

}  // namespace

TEST(RotatedIou, IdenticalBoxesGiveOne) {
    Box3D a = box(1.0, -2.0, 4.0, 2.0, 0.7);
    EXPECT_NEAR(rotated_iou(a, a), 1.0, 1e-12);
}

TEST(RotatedIou, DisjointGiveZero) {
    EXPECT_DOUBLE_EQ(rotated_iou(box(0, 0, 1, 1, 0), box(2, 0, 1, 1, 0)), 0.0);
}

TEST(RotatedIou, FortyFiveDegreeClosedForm) {
    // unit square vs the same square rotated 45 degrees about its center:
    // intersection is a regular octagon of area 2(sqrt2 - 1)
    double inter = 2.0 * (std::sqrt(2.0) - 1.0);
    double expected = inter / (2.0 - inter);
    double got = rotated_iou(box(0, 0, 1, 1, 0), box(0, 0, 1, 1, kPi / 4));
    EXPECT_NEAR(got, expected, 1e-6);
    EXPECT_NEAR(got, 0.70710678, 1e-6);
}

TEST(RotatedIou, DegenerateBoxGivesZero) {
    EXPECT_DOUBLE_EQ(rotated_iou(box(0, 0, 0, 1, 0), box(0, 0, 1, 1, 0)), 0.0);
}

TEST(RotatedIou, SymmetryTranslationRotationInvariance) {
    Rng rng(31);
    for (int t = 0; t < 50; ++t) {
        Box3D a = box(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(0.5, 3),
                      rng.uniform(0.5, 3), rng.uniform(-kPi, kPi));
        Box3D b = box(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(0.5, 3),
                      rng.uniform(0.5, 3), rng.uniform(-kPi, kPi));
        double iou = rotated_iou(a, b);
        EXPECT_NEAR(iou, rotated_iou(b, a), 1e-9);

        double tx = rng.uniform(-5, 5), ty = rng.uniform(-5, 5);
        Box3D at = a, bt = b;
        at.cx += tx; at.cy += ty; bt.cx += tx; bt.cy += ty;
        EXPECT_NEAR(rotated_iou(at, bt), iou, 1e-9);

        double th = rng.uniform(-kPi, kPi);
        double c = std::cos(th), s = std::sin(th);
        auto rot = [&](const Box3D& in) {
            Box3D r = in;
            r.cx = c * in.cx - s * in.cy;
            r.cy = s * in.cx + c * in.cy;
            r.yaw = wrap_angle(in.yaw + th);
            return r;
        };
        EXPECT_NEAR(rotated_iou(rot(a), rot(b)), iou, 1e-9);
    }
}

TEST(RotatedIou, AgreesWithMonteCarloOracle) {
    Rng rng(77);
    for (int t = 0; t < 100; ++t) {
        Box3D a = box(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.5, 2.5),
                      rng.uniform(0.5, 2.5), rng.uniform(-kPi, kPi));
        Box3D b = box(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.5, 2.5),
                      rng.uniform(0.5, 2.5), rng.uniform(-kPi, kPi));
        double exact = rotated_iou(a, b);
        double mc = monte_carlo_iou(a, b, 200000, 1000 + std::uint64_t(t));
        EXPECT_NEAR(exact, mc, 1e-2) << "pair " << t;
    }
}

TEST(Matching, ExactHitMatchesWithZeroHeading) {
    Box3D gt = box(0, 0, 2, 1, 0.3);
    std::vector<Detection> dets{{gt, 0.9}};
    auto res = match_detections(dets, std::vector<Box3D>{gt}, 0.5);
    ASSERT_EQ(res.records.size(), 1u);
    EXPECT_TRUE(res.records[0].matched);
    EXPECT_NEAR(res.records[0].heading_error, 0.0, 1e-12);
}

TEST(Matching, GreedyHigherScoreWins) {
    Box3D gt = box(0, 0, 2, 1, 0.0);
    std::vector<Detection> dets{{gt, 0.6}, {gt, 0.9}};
    auto res = match_detections(dets, std::vector<Box3D>{gt}, 0.5);
    ASSERT_EQ(res.records.size(), 2u);
    // records come back in score order after internal sorting
    EXPECT_DOUBLE_EQ(res.records[0].score, 0.9);
    EXPECT_TRUE(res.records[0].matched);
    EXPECT_FALSE(res.records[1].matched);
}

TEST(Matching, YawWrapGivesZeroHeadingError) {
    Box3D gt = box(0, 0, 2, 1, -kPi + 1e-15);
    Box3D det_box = box(0, 0, 2, 1, kPi);
    std::vector<Detection> dets{{det_box, 0.9}};
    auto res = match_detections(dets, std::vector<Box3D>{gt}, 0.5);
    ASSERT_TRUE(res.records[0].matched);
    EXPECT_NEAR(res.records[0].heading_error, 0.0, 1e-9);
}

TEST(Matching, EachGtMatchedAtMostOnce) {
    Box3D g1 = box(0, 0, 2, 1, 0), g2 = box(5, 0, 2, 1, 0);
    std::vector<Box3D> gts{g1, g2};
    std::vector<Detection> dets{{g1, 0.9}, {g1, 0.8}, {g2, 0.7}};
    auto res = match_detections(dets, gts, 0.5);
    int matched = 0;
    for (const auto& r : res.records) matched += r.matched;
    EXPECT_EQ(matched, 2);
}

TEST(AveragePrecision, SingleExactDetection) {
    std::vector<MatchRecord> recs{{0.9, true, 0.0}};
    EXPECT_DOUBLE_EQ(average_precision(recs, 1, false), 1.0);
    EXPECT_DOUBLE_EQ(average_precision(recs, 1, true), 1.0);
}

TEST(AveragePrecision, FalsePositiveAboveTruePositive) {
    std::vector<MatchRecord> recs{{0.9, false, 0.0}, {0.8, true, 0.0}};
    EXPECT_DOUBLE_EQ(average_precision(recs, 1, false), 0.5);
}

TEST(AveragePrecision, HeadingPiZeroesAph) {
    std::vector<MatchRecord> recs{{0.9, true, kPi}};
    EXPECT_DOUBLE_EQ(average_precision(recs, 1, false), 1.0);
    EXPECT_DOUBLE_EQ(average_precision(recs, 1, true), 0.0);
}

TEST(AveragePrecision, EmptyDetectionsGiveZero) {
    EXPECT_DOUBLE_EQ(average_precision(std::vector<MatchRecord>{}, 3, false), 0.0);
}

TEST(AveragePrecision, AphNeverExceedsAp) {
    Rng rng(42);
    for (int t = 0; t < 1000; ++t) {
        int n = 1 + int(rng.uniform_int(12));
        int gt = 1 + int(rng.uniform_int(8));
        std::vector<MatchRecord> recs;
        int matched_left = gt;
        for (int i = 0; i < n; ++i) {
            MatchRecord r;
            r.score = rng.uniform();
            r.matched = matched_left > 0 && rng.uniform() < 0.6;
            if (r.matched) {
                --matched_left;
                r.heading_error = rng.uniform(0.0, kPi);
            }
            recs.push_back(r);
        }
        double ap = average_precision(recs, gt, false);
        double aph = average_precision(recs, gt, true);
        EXPECT_LE(aph, ap + 1e-12);
        EXPECT_GE(ap, 0.0);
        EXPECT_LE(ap, 1.0);
    }
}

TEST(AveragePrecision, InvariantUnderMonotoneScoreTransforms) {
    Rng rng(9);
    for (int t = 0; t < 50; ++t) {
        int n = 1 + int(rng.uniform_int(10));
        std::vector<MatchRecord> recs;
        for (int i = 0; i < n; ++i)
            recs.push_back({rng.uniform(), rng.uniform() < 0.5, rng.uniform(0.0, kPi)});
        double base = average_precision(recs, 4, true);
        auto cubed = recs;
        for (auto& r : cubed) r.score = r.score * r.score * r.score;
        auto affine = recs;
        for (auto& r : affine) r.score = 2.0 * r.score + 1.0;
        EXPECT_DOUBLE_EQ(average_precision(cubed, 4, true), base);
        EXPECT_DOUBLE_EQ(average_precision(affine, 4, true), base);
    }
}

TEST(EvalSummary, MacroMeanIsArithmeticMean) {
    std::vector<std::vector<MatchRecord>> recs(3);
    recs[0] = {{0.9, true, 0.0}};
    recs[1] = {{0.9, true, 0.0}, {0.8, false, 0.0}};
    recs[2] = {{0.7, false, 0.0}};
    std::vector<int> gts{1, 1, 2};
    auto s = EvalSummary::from_matches(recs, gts);
    ASSERT_TRUE(s.per_class[0].ap && s.per_class[1].ap && s.per_class[2].ap);
    double mean_ap = (*s.per_class[0].ap + *s.per_class[1].ap + *s.per_class[2].ap) / 3.0;
    EXPECT_NEAR(s.macro_ap, mean_ap, 1e-12);

    // absent class drops out of the macro mean
    std::vector<int> gts2{1, 0, 2};
    auto s2 = EvalSummary::from_matches(recs, gts2);
    EXPECT_FALSE(s2.per_class[1].ap.has_value());
    EXPECT_NEAR(s2.macro_ap, (*s2.per_class[0].ap + *s2.per_class[2].ap) / 2.0, 1e-12);
}

TEST(WrapAngle, RangeAndIdentities) {
    EXPECT_DOUBLE_EQ(wrap_angle(0.0), 0.0);
    EXPECT_NEAR(wrap_angle(kPi), kPi, 1e-12);
    EXPECT_NEAR(wrap_angle(-kPi), kPi, 1e-12);  // -pi maps to pi, range is (-pi, pi]
    EXPECT_NEAR(wrap_angle(2 * kPi), 0.0, 1e-12);
    EXPECT_NEAR(wrap_angle(3 * kPi), kPi, 1e-12);
    Rng rng(4);
    for (int i = 0; i < 100; ++i) {
        double a = rng.uniform(-20, 20);
        double w = wrap_angle(a);
        EXPECT_GT(w, -kPi - 1e-15);
        EXPECT_LE(w, kPi + 1e-15);
        EXPECT_NEAR(std::sin(w), std::sin(a), 1e-9);
        EXPECT_NEAR(std::cos(w), std::cos(a), 1e-9);
    }
}
