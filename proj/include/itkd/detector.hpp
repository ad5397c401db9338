#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "itkd/grid.hpp"
#include "itkd/metrics.hpp"
#include "itkd/ops.hpp"
#include "itkd/optim.hpp"

namespace itkd {

/// Width-configurable BEV detector. The teacher runs at divisor 1; students
/// shrink every layer (backbone blocks, map-view output, head hidden width)
/// by the divisor while head output channels stay fixed.
struct NetConfig {
    int c_in = 6;
    int ct = 32;  // teacher map-view channels
    int width_divisor = 1;
    std::array<int, 3> blocks{8, 16, 32};
    int k_classes = 3;
    int head_hidden = 8;

    void validate() const {
        if (width_divisor != 1 && width_divisor != 2 && width_divisor != 4)
            throw ConfigError(msg("net: width divisor must be 1, 2 or 4, got ", width_divisor));
        auto divisible = [&](int v, const char* what) {
            if (v % width_divisor != 0 || v / width_divisor < 1)
                throw ConfigError(msg("net: ", what, " width ", v,
                                      " is not divisible by divisor ", width_divisor));
        };
        divisible(ct, "map-view");
        divisible(head_hidden, "head hidden");
        for (int b : blocks) divisible(b, "backbone block");
    }

    int block(int i) const { return blocks[std::size_t(i)] / width_divisor; }
    int map_channels() const { return ct / width_divisor; }
    int hidden() const { return head_hidden / width_divisor; }
};

inline constexpr std::array<const char*, 5> kHeadNames{"hm", "offset", "height", "size", "rot"};

inline std::array<int, 5> head_out_channels(int k_classes) {
    return {k_classes, 2, 1, 3, 2};
}

struct DetectorParams {
    NetConfig cfg;
    std::string prefix;
    Parameter c1w, c1b, c2w, c2b, c3w, c3b;  // three 3x3 blocks (stride 1, 2, 2)
    Parameter m1w, m1b, m2w, m2b;            // 1x1 mixes after each upsample
    struct Head {
        Parameter w1, b1, w2, b2;  // 3x3 then 1x1
    };
    std::array<Head, 5> heads;

    std::vector<Parameter> all() const {
        std::vector<Parameter> out{c1w, c1b, c2w, c2b, c3w, c3b, m1w, m1b, m2w, m2b};
        for (const auto& h : heads) {
            out.push_back(h.w1);
            out.push_back(h.b1);
            out.push_back(h.w2);
            out.push_back(h.b2);
        }
        return out;
    }

    void set_frozen(bool frozen) {
        for (auto& p : all()) p.tensor.set_frozen(frozen);
    }
};

inline DetectorParams make_detector(const NetConfig& cfg, const std::string& prefix,
                                    std::uint64_t seed) {
    cfg.validate();
    ParamInit init(seed);
    DetectorParams d;
    d.cfg = cfg;
    d.prefix = prefix;
    int b0 = cfg.block(0), b1 = cfg.block(1), b2 = cfg.block(2);
    int cm = cfg.map_channels(), hh = cfg.hidden();

    auto conv = [&](const std::string& name, int co, int ci, int k) {
        return init.he_normal(prefix + "/" + name + "/w", {co, ci, k, k}, ci * k * k);
    };
    auto bias = [&](const std::string& name, int co, double v = 0.0) {
        return init.constant(prefix + "/" + name + "/b", {co}, v);
    };

    d.c1w = conv("backbone/conv1", b0, cfg.c_in, 3);
    d.c1b = bias("backbone/conv1", b0);
    d.c2w = conv("backbone/conv2", b1, b0, 3);
    d.c2b = bias("backbone/conv2", b1);
    d.c3w = conv("backbone/conv3", b2, b1, 3);
    d.c3b = bias("backbone/conv3", b2);
    d.m1w = conv("backbone/mix1", b2, b2, 1);
    d.m1b = bias("backbone/mix1", b2);
    d.m2w = conv("backbone/mix2", cm, b2, 1);
    d.m2b = bias("backbone/mix2", cm);

    auto outs = head_out_channels(cfg.k_classes);
    for (int h = 0; h < 5; ++h) {
        std::string hn = std::string("head/") + kHeadNames[std::size_t(h)];
        d.heads[std::size_t(h)].w1 = conv(hn + "/conv1", hh, cm, 3);
        d.heads[std::size_t(h)].b1 = bias(hn + "/conv1", hh);
        d.heads[std::size_t(h)].w2 = conv(hn + "/conv2", outs[std::size_t(h)], hh, 1);
        // heatmap bias starts at the focal-loss prior so early training is stable
        d.heads[std::size_t(h)].b2 = bias(hn + "/conv2", outs[std::size_t(h)], h == 0 ? -2.19 : 0.0);
    }
    return d;
}

/// Backbone: three 3x3 blocks (stride 1, 2, 2) with relu, then two nearest
/// 2x upsamples with 1x1 mixing, so the map-view feature M returns to the
/// input resolution.
inline Tensor backbone_forward(const Tensor& input, const DetectorParams& p) {
    if (input.rank() != 3 || input.dim(0) != p.cfg.c_in)
        throw ShapeError(msg("backbone: expected ", p.cfg.c_in, " input channels, got ",
                             shape_str(input.shape())));
    Tensor h1 = relu(conv2d(input, p.c1w.tensor, p.c1b.tensor, 1));
    Tensor h2 = relu(conv2d(h1, p.c2w.tensor, p.c2b.tensor, 2));
    Tensor h3 = relu(conv2d(h2, p.c3w.tensor, p.c3b.tensor, 2));
    Tensor u1 = relu(conv2d(upsample2x(h3), p.m1w.tensor, p.m1b.tensor, 1));
    Tensor u2 = relu(conv2d(upsample2x(u1), p.m2w.tensor, p.m2b.tensor, 1));
    return u2;
}

struct HeadOutputs {
    Tensor hm;      // K x H x W, pre-sigmoid logits
    Tensor offset;  // 2 x H x W
    Tensor height;  // 1 x H x W
    Tensor size;    // 3 x H x W, log-scale
    Tensor rot;     // 2 x H x W, (sin, cos)

    std::array<const Tensor*, 5> list() const { return {&hm, &offset, &height, &size, &rot}; }
};

inline HeadOutputs heads_forward(const Tensor& m, const DetectorParams& p) {
    if (m.rank() != 3 || m.dim(0) != p.cfg.map_channels())
        throw ShapeError(msg("heads: expected ", p.cfg.map_channels(),
                             "-channel map-view feature, got ", shape_str(m.shape())));
    auto run = [&](const DetectorParams::Head& h) {
        Tensor mid = relu(conv2d(m, h.w1.tensor, h.b1.tensor, 1));
        return conv2d(mid, h.w2.tensor, h.b2.tensor, 1);
    };
    HeadOutputs out;
    out.hm = run(p.heads[0]);
    out.offset = run(p.heads[1]);
    out.height = run(p.heads[2]);
    out.size = run(p.heads[3]);
    out.rot = run(p.heads[4]);
    return out;
}

// ---------------------------------------------------------------------------
// Supervised loss
// ---------------------------------------------------------------------------

/// Penalty-reduced focal loss on the heatmap (alpha 2, beta 4) plus mean-l1
/// regression on the other heads restricted to ground-truth center cells,
/// normalized by the object count (min 1).
inline Tensor supervised_loss(const HeadOutputs& out, const TargetMaps& t) {
    std::int64_t plane = std::int64_t(t.h) * t.w;
    if (out.hm.rank() != 3 || out.hm.dim(0) != t.k || out.hm.dim(1) != t.h || out.hm.dim(2) != t.w)
        throw ShapeError(msg("supervised_loss: heatmap ", shape_str(out.hm.shape()),
                             " does not match targets [", t.k, "x", t.h, "x", t.w, "]"));

    int n_obj = int(t.objects.size());
    double norm = std::max(1, n_obj);

    Shape hm_shape{t.k, t.h, t.w};
    std::vector<double> pos(t.heatmap.size()), negw(t.heatmap.size());
    for (std::size_t i = 0; i < t.heatmap.size(); ++i) {
        double y = t.heatmap[i];
        pos[i] = y == 1.0 ? 1.0 : 0.0;
        double om = 1.0 - y;
        negw[i] = om * om * om * om;
    }
    Tensor pos_mask = Tensor::from_values(hm_shape, std::move(pos));
    Tensor neg_weight = Tensor::from_values(hm_shape, std::move(negw));
    Tensor ones = Tensor::filled(hm_shape, 1.0);

    Tensor p = clamp(sigmoid(out.hm), 1e-6, 1.0 - 1e-6);
    Tensor one_minus_p = sub(ones, p);
    Tensor pos_term = sum(mul(pos_mask, mul(mul(one_minus_p, one_minus_p), log(p))));
    Tensor neg_term = sum(mul(neg_weight, mul(mul(p, p), log(one_minus_p))));
    Tensor focal = scalar_mul(add(pos_term, neg_term), -1.0 / norm);

    if (n_obj == 0) return focal;  // empty valid mask: no regression term

    auto masked_mean_l1 = [&](const Tensor& pred, const std::vector<double>& target, int ch) {
        std::vector<double> mask(std::size_t(ch) * std::size_t(plane));
        for (int c = 0; c < ch; ++c)
            for (std::int64_t i = 0; i < plane; ++i)
                mask[std::size_t(c * plane + i)] = t.valid[std::size_t(i)];
        Tensor target_t = Tensor::from_values({ch, t.h, t.w}, target);
        Tensor mask_t = Tensor::from_values({ch, t.h, t.w}, std::move(mask));
        Tensor diff = mul(abs(sub(pred, target_t)), mask_t);
        return scalar_mul(sum(diff), 1.0 / (norm * ch));
    };

    Tensor reg = masked_mean_l1(out.offset, t.offset, 2);
    reg = add(reg, masked_mean_l1(out.height, t.height_m, 1));
    reg = add(reg, masked_mean_l1(out.size, t.size_log, 3));
    reg = add(reg, masked_mean_l1(out.rot, t.rot_sc, 2));
    return add(focal, reg);
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

/// Decodes detections from head outputs: per-class cells whose sigmoid score
/// equals its 3x3 neighborhood maximum and exceeds the threshold, top
/// max_dets by score.
inline std::vector<Detection> decode_detections(const HeadOutputs& out, const GridConfig& grid,
                                                double score_threshold = 0.1, int max_dets = 100) {
    int k = out.hm.dim(0), h = out.hm.dim(1), w = out.hm.dim(2);
    std::int64_t plane = std::int64_t(h) * w;
    auto hm = out.hm.values();
    auto off = out.offset.values();
    auto hei = out.height.values();
    auto sz = out.size.values();
    auto rot = out.rot.values();

    std::vector<double> score(hm.size());
    for (std::size_t i = 0; i < hm.size(); ++i) score[i] = 1.0 / (1.0 + std::exp(-hm[i]));

    struct Peak {
        double s;
        int cls, y, x;
    };
    std::vector<Peak> peaks;
    for (int c = 0; c < k; ++c) {
        const double* sc = score.data() + std::size_t(c) * std::size_t(plane);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double v = sc[std::size_t(y) * std::size_t(w) + std::size_t(x)];
                if (v <= score_threshold) continue;
                bool is_peak = true;
                for (int dy = -1; dy <= 1 && is_peak; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        int yy = y + dy, xx = x + dx;
                        if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                        if (sc[std::size_t(yy) * std::size_t(w) + std::size_t(xx)] > v) {
                            is_peak = false;
                            break;
                        }
                    }
                if (is_peak) peaks.push_back({v, c, y, x});
            }
    }
    std::sort(peaks.begin(), peaks.end(), [](const Peak& a, const Peak& b) {
        if (a.s != b.s) return a.s > b.s;
        if (a.cls != b.cls) return a.cls < b.cls;
        if (a.y != b.y) return a.y < b.y;
        return a.x < b.x;
    });
    if (int(peaks.size()) > max_dets) peaks.resize(std::size_t(max_dets));

    std::vector<Detection> dets;
    dets.reserve(peaks.size());
    double origin = grid.origin();
    for (const auto& pk : peaks) {
        std::size_t at = std::size_t(pk.y) * std::size_t(w) + std::size_t(pk.x);
        Detection d;
        d.score = pk.s;
        d.box.class_id = pk.cls;
        d.box.cx = origin + (pk.x + off[at]) * grid.cell;
        d.box.cy = origin + (pk.y + off[std::size_t(plane) + at]) * grid.cell;
        d.box.cz = hei[at];
        d.box.length = std::exp(sz[at]);
        d.box.width = std::exp(sz[std::size_t(plane) + at]);
        d.box.height = std::exp(sz[std::size_t(2 * plane) + at]);
        d.box.yaw = wrap_angle(std::atan2(rot[at], rot[std::size_t(plane) + at]));
        dets.push_back(d);
    }
    return dets;
}

}  // namespace itkd
