#include <gtest/gtest.h>

#include <numbers>

#include "itkd/autodiff.hpp"
#include "itkd/detector.hpp"
#include "itkd/runner.hpp"
#include "test_util.hpp"

using namespace itkd;
using test_util::random_tensor;

namespace {
constexpr double kPi = std::numbers::pi;

TargetMaps blank_targets(int k, int hw) {
    TargetMaps t;
    t.k = k;
    t.h = t.w = hw;
    std::size_t plane = std::size_t(hw) * std::size_t(hw);
    t.heatmap.assign(std::size_t(k) * plane, 0.0);
    t.offset.assign(2 * plane, 0.0);
    t.height_m.assign(plane, 0.0);
    t.size_log.assign(3 * plane, 0.0);
    t.rot_sc.assign(2 * plane, 0.0);
    t.valid.assign(plane, 0.0);
    return t;
}

double logit(double p) { return std::log(p / (1.0 - p)); }

// Treats the targets as if they were predictions. binarize_peaks drives the
// heatmap to ~1 at ground-truth centers and ~0 elsewhere (what the focal
// loss trains toward); otherwise the graded Gaussian is passed through.
HeadOutputs outputs_from_targets(const TargetMaps& t, bool binarize_peaks = false) {
    std::vector<double> hm(t.heatmap.size());
    for (std::size_t i = 0; i < hm.size(); ++i) {
        double y = binarize_peaks ? (t.heatmap[i] == 1.0 ? 1.0 : 0.0) : t.heatmap[i];
        hm[i] = logit(std::min(1.0 - 1e-9, std::max(1e-9, y)));
    }
    HeadOutputs out;
    out.hm = Tensor::from_values({t.k, t.h, t.w}, std::move(hm));
    out.offset = Tensor::from_values({2, t.h, t.w}, t.offset);
    out.height = Tensor::from_values({1, t.h, t.w}, t.height_m);
    out.size = Tensor::from_values({3, t.h, t.w}, t.size_log);
    out.rot = Tensor::from_values({2, t.h, t.w}, t.rot_sc);
    return out;
}

}  // namespace

TEST(NetConfig, DivisorValidation) {
    NetConfig n;
    n.width_divisor = 3;
    EXPECT_THROW(n.validate(), ConfigError);
    n.width_divisor = 4;
    n.blocks = {8, 16, 30};  // 30 not divisible by 4
    EXPECT_THROW(n.validate(), ConfigError);
    n.blocks = {8, 16, 32};
    EXPECT_NO_THROW(n.validate());
}

TEST(Backbone, ShapeContractAcrossDivisors) {
    Rng rng(1);
    Tensor input = random_tensor({6, 64, 64}, rng);
    for (int div : {1, 2, 4}) {
        NetConfig cfg;
        cfg.width_divisor = div;
        DetectorParams det = make_detector(cfg, "net", 9);
        Tensor m = backbone_forward(input, det);
        EXPECT_EQ(m.shape(), (Shape{32 / div, 64, 64})) << "divisor " << div;
        HeadOutputs outs = heads_forward(m, det);
        EXPECT_EQ(outs.hm.shape(), (Shape{3, 64, 64}));
        EXPECT_EQ(outs.offset.shape(), (Shape{2, 64, 64}));
        EXPECT_EQ(outs.height.shape(), (Shape{1, 64, 64}));
        EXPECT_EQ(outs.size.shape(), (Shape{3, 64, 64}));
        EXPECT_EQ(outs.rot.shape(), (Shape{2, 64, 64}));
    }
}

TEST(Backbone, WidthMismatchRejected) {
    NetConfig cfg;
    DetectorParams det = make_detector(cfg, "net", 3);
    Rng rng(2);
    EXPECT_THROW(backbone_forward(random_tensor({5, 64, 64}, rng), det), ShapeError);
    EXPECT_THROW(heads_forward(random_tensor({16, 64, 64}, rng), det), ShapeError);
}

TEST(Backbone, ZeroInputZeroBiasGivesZeroMap) {
    NetConfig cfg;
    DetectorParams det = make_detector(cfg, "net", 3);
    Tensor zero_in = Tensor::zeros({6, 32, 32});
    Tensor m = backbone_forward(zero_in, det);  // backbone biases init to zero
    for (double v : m.values()) EXPECT_EQ(v, 0.0);

    // zero the head biases too: logits collapse to zero
    for (auto& h : const_cast<DetectorParams&>(det).heads) {
        auto b1 = h.b1.tensor.raw_values();
        std::fill(b1.begin(), b1.end(), 0.0);
        auto b2 = h.b2.tensor.raw_values();
        std::fill(b2.begin(), b2.end(), 0.0);
    }
    HeadOutputs outs = heads_forward(m, det);
    for (const Tensor* t : outs.list())
        for (double v : t->values()) EXPECT_EQ(v, 0.0);
}

TEST(SupervisedLoss, PerfectPredictionIsZero) {
    GenConfig gen;
    Scene sc = generate_scene(gen, 8);
    GridConfig grid;
    TargetMaps t = encode_targets(sc, grid, gen.num_classes());
    HeadOutputs outs = outputs_from_targets(t, /*binarize_peaks=*/true);
    double loss = supervised_loss(outs, t).scalar_value();
    EXPECT_NEAR(loss, 0.0, 1e-8);
    EXPECT_GE(loss, 0.0);
}

TEST(SupervisedLoss, FocalClosedFormAtHalfConfidence) {
    // one object; prediction matches the target everywhere except the peak,
    // where p = 0.5; expected focal contribution (1-0.5)^2 * (-log 0.5)
    TargetMaps t = blank_targets(1, 8);
    t.heatmap[9] = 1.0;  // cell (1,1)
    t.valid[9] = 1.0;
    t.objects.push_back({9, 0, 0});
    HeadOutputs outs = outputs_from_targets(t);
    auto hm = outs.hm.raw_values();
    hm[9] = 0.0;  // sigmoid(0) = 0.5
    double expected = 0.25 * std::log(2.0);
    EXPECT_NEAR(supervised_loss(outs, t).scalar_value(), expected, 1e-6);
}

TEST(SupervisedLoss, RotationL1Example) {
    // single valid cell, rot prediction (0,1) against target (1,0):
    // the rot head contributes mean(|0-1|, |1-0|) = 1
    TargetMaps t = blank_targets(1, 4);
    t.heatmap[5] = 1.0;
    t.valid[5] = 1.0;
    t.rot_sc[5] = 1.0;                 // sin target
    t.rot_sc[16 + 5] = 0.0;            // cos target
    t.objects.push_back({5, 0, 0});
    HeadOutputs outs = outputs_from_targets(t);
    auto rot = outs.rot.raw_values();
    rot[5] = 0.0;       // sin prediction
    rot[16 + 5] = 1.0;  // cos prediction
    double loss = supervised_loss(outs, t).scalar_value();
    EXPECT_NEAR(loss, 1.0, 1e-6);  // focal ~ 0, regression contributes exactly 1
}

TEST(SupervisedLoss, EmptySceneHasNoRegressionTerm) {
    TargetMaps t = blank_targets(2, 8);
    Rng rng(3);
    NetConfig cfg;
    cfg.k_classes = 2;
    DetectorParams det = make_detector(cfg, "net", 4);
    Tensor m = backbone_forward(random_tensor({6, 8, 8}, rng), det);
    HeadOutputs outs = heads_forward(m, det);
    double loss = supervised_loss(outs, t).scalar_value();
    EXPECT_GE(loss, 0.0);
    EXPECT_TRUE(std::isfinite(loss));
}

TEST(SupervisedLoss, NonNegativeOnRandomInputs) {
    Rng rng(17);
    GenConfig gen;
    GridConfig grid;
    grid.hw = 16;
    gen.range = 4.0;
    gen.min_boxes = 1;
    gen.max_boxes = 3;
    NetConfig cfg;
    cfg.width_divisor = 4;
    for (std::uint64_t s = 0; s < 10; ++s) {
        Scene sc = generate_scene(gen, 70 + s);
        TargetMaps t = encode_targets(sc, grid, gen.num_classes());
        DetectorParams det = make_detector(cfg, "net", 100 + s);
        HeadOutputs outs = heads_forward(backbone_forward(pillarize(sc, grid).map, det), det);
        EXPECT_GE(supervised_loss(outs, t).scalar_value(), 0.0);
    }
}

TEST(Decode, SharpPeakAtCellCenter) {
    TargetMaps t = blank_targets(1, 8);
    GridConfig grid;
    grid.hw = 8;
    t.heatmap[8 * 4 + 2] = 1.0;  // cell (y=4, x=2), zero offset
    t.valid[8 * 4 + 2] = 1.0;
    t.size_log.assign(t.size_log.size(), 0.0);
    t.rot_sc[8 * 4 + 2 + 64] = 1.0;  // cos = 1
    t.objects.push_back({8 * 4 + 2, 0, 0});
    HeadOutputs outs = outputs_from_targets(t);
    auto dets = decode_detections(outs, grid, 0.1, 10);
    ASSERT_EQ(dets.size(), 1u);
    // decoded center = origin + (cell + 0) * cellsize — the cell's corner
    EXPECT_NEAR(dets[0].box.cx, grid.origin() + 2 * grid.cell, 1e-9);
    EXPECT_NEAR(dets[0].box.cy, grid.origin() + 4 * grid.cell, 1e-9);
    EXPECT_EQ(dets[0].box.class_id, 0);
}

TEST(Decode, HalfCellOffsetShiftsCenter) {
    TargetMaps t = blank_targets(1, 8);
    GridConfig grid;
    grid.hw = 8;
    int cell = 8 * 3 + 5;
    t.heatmap[std::size_t(cell)] = 1.0;
    t.offset[std::size_t(cell)] = 0.5;
    t.offset[std::size_t(64 + cell)] = 0.5;
    t.rot_sc[std::size_t(64 + cell)] = 1.0;
    t.objects.push_back({cell, 0, 0});
    HeadOutputs outs = outputs_from_targets(t);
    auto dets = decode_detections(outs, grid, 0.1, 10);
    ASSERT_EQ(dets.size(), 1u);
    EXPECT_NEAR(dets[0].box.cx, grid.origin() + 5.5 * grid.cell, 1e-9);
    EXPECT_NEAR(dets[0].box.cy, grid.origin() + 3.5 * grid.cell, 1e-9);
}

TEST(Decode, TwoSeparatedPeaks) {
    TargetMaps t = blank_targets(1, 16);
    GridConfig grid;
    grid.hw = 16;
    int c1 = 16 * 2 + 2, c2 = 16 * 2 + 12;
    t.heatmap[std::size_t(c1)] = 1.0;
    t.heatmap[std::size_t(c2)] = 1.0;
    t.rot_sc[std::size_t(256 + c1)] = 1.0;
    t.rot_sc[std::size_t(256 + c2)] = 1.0;
    t.objects.push_back({c1, 0, 0});
    t.objects.push_back({c2, 0, 1});
    HeadOutputs outs = outputs_from_targets(t);
    auto dets = decode_detections(outs, grid, 0.1, 10);
    EXPECT_EQ(dets.size(), 2u);
}

TEST(Decode, RespectsThresholdAndCap) {
    TargetMaps t = blank_targets(1, 16);
    GridConfig grid;
    grid.hw = 16;
    for (int i = 0; i < 5; ++i) {
        int cell = 16 * (2 + 3 * i % 14) + (2 + (5 * i) % 14);
        t.heatmap[std::size_t(cell)] = 0.5 + 0.1 * i;
        t.rot_sc[std::size_t(256 + cell)] = 1.0;
    }
    HeadOutputs outs = outputs_from_targets(t);
    auto all = decode_detections(outs, grid, 0.1, 100);
    auto capped = decode_detections(outs, grid, 0.1, 2);
    EXPECT_LE(capped.size(), 2u);
    if (all.size() >= 2) {
        EXPECT_DOUBLE_EQ(capped[0].score, all[0].score);
        EXPECT_GE(all[0].score, all[1].score);
    }
    auto none = decode_detections(outs, grid, 0.999, 100);
    EXPECT_TRUE(none.empty());
}

TEST(Decode, RecoversEncodedScenes) {
    GenConfig gen;
    GridConfig grid;
    for (std::uint64_t s = 0; s < 10; ++s) {
        Scene sc = generate_scene(gen, 400 + s);
        TargetMaps t = encode_targets(sc, grid, gen.num_classes());
        HeadOutputs outs = outputs_from_targets(t, /*binarize_peaks=*/true);
        auto dets = decode_detections(outs, grid, 0.5, 100);
        ASSERT_EQ(dets.size(), sc.boxes.size()) << "seed " << s;
        for (const auto& gt : sc.boxes) {
            const Detection* best = nullptr;
            double best_d = 1e300;
            for (const auto& d : dets) {
                double dist = std::hypot(d.box.cx - gt.cx, d.box.cy - gt.cy);
                if (dist < best_d) {
                    best_d = dist;
                    best = &d;
                }
            }
            ASSERT_NE(best, nullptr);
            // center within half a cell (offset targets make it essentially exact)
            EXPECT_LT(best_d, 0.5 * grid.cell);
            EXPECT_NEAR(best->box.length, gt.length, 1e-9 * gt.length);
            EXPECT_NEAR(best->box.width, gt.width, 1e-9 * gt.width);
            EXPECT_NEAR(best->box.height, gt.height, 1e-9 * gt.height);
            EXPECT_NEAR(std::fabs(wrap_angle(best->box.yaw - gt.yaw)), 0.0, 1e-9);
            EXPECT_EQ(best->box.class_id, gt.class_id);
            EXPECT_NEAR(best->box.cz, gt.cz, 1e-9);
        }
    }
}

TEST(SupervisedLoss, GradientsPassFiniteDifference) {
    // tiny detector on a 16x16 one-object scene; checks every backbone and
    // head parameter against central differences
    GenConfig gen;
    gen.range = 4.0;
    gen.min_boxes = 1;
    gen.max_boxes = 1;
    gen.base_points = 60;
    gen.clutter_points = 40;
    GridConfig grid;
    grid.hw = 16;
    NetConfig cfg;
    cfg.ct = 4;
    cfg.blocks = {2, 2, 4};
    cfg.head_hidden = 2;
    cfg.k_classes = 3;

    for (std::uint64_t attempt = 0; attempt < 6; ++attempt) {
        Scene sc = generate_scene(gen, 600 + attempt);
        TargetMaps targets = encode_targets(sc, grid, gen.num_classes());
        Tensor input = pillarize(sc, grid).map;
        DetectorParams det = make_detector(cfg, "net", 50 + attempt);
        Rng brng(900 + attempt);
        for (auto& p : det.all())
            if (p.id.ends_with("/b")) {
                auto raw = p.tensor.raw_values();
                for (auto& v : raw) v = brng.normal(0.0, 0.2);
            }
        std::vector<FdLeaf> leaves;
        for (const auto& p : det.all()) leaves.push_back({p.id, p.tensor});
        auto build = [&]() {
            return supervised_loss(heads_forward(backbone_forward(input, det), det), targets);
        };
        auto rep = finite_diff_check(build, leaves, 1e-5, 1e-4);
        if (rep.kink_excluded) continue;
        EXPECT_LT(rep.max_rel_err, 1e-4) << "worst " << rep.worst_leaf;
        SUCCEED();
        return;
    }
    FAIL() << "all scenes landed on kinks";
}

TEST(Manifest, RoundTripAndMismatch) {
    namespace fs = std::filesystem;
    std::string path = (fs::temp_directory_path() / "itkd_manifest_test.txt").string();
    NetConfig net;
    net.ct = 32;
    net.blocks = {8, 16, 32};
    write_manifest(path, net);
    NetConfig back = read_manifest(path);
    EXPECT_EQ(back.ct, net.ct);
    EXPECT_EQ(back.blocks, net.blocks);
    EXPECT_EQ(back.width_divisor, net.width_divisor);

    RunConfig cfg;
    EXPECT_NO_THROW(check_teacher_manifest(back, cfg));
    back.ct = 64;
    EXPECT_THROW(check_teacher_manifest(back, cfg), ConfigError);
    fs::remove(path);

    EXPECT_THROW(read_manifest(path), IoError);
}
