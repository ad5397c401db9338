#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "itkd/scene.hpp"
#include "itkd/tensor.hpp"

namespace itkd {

struct GridConfig {
    int hw = 64;        // square grid, H == W
    double cell = 0.5;  // meters per cell
    int c_in = 6;

    double origin() const { return -0.5 * hw * cell; }
    double cell_center(int i) const { return origin() + (i + 0.5) * cell; }
};

struct PillarStats {
    int total = 0;
    int dropped = 0;  // points outside the grid, silently skipped
};

struct PillarizeResult {
    Tensor map;  // c_in x hw x hw, all-zero cells where no points landed
    PillarStats stats;
};

/// Per-cell aggregation of the point cloud. Channels: mean in-cell x/y
/// offset (cell units), mean z, mean intensity, normalized point count,
/// occupancy. Points are sorted within each cell before accumulation so the
/// result is bitwise independent of input order.
inline PillarizeResult pillarize(const Scene& scene, const GridConfig& grid) {
    int n = grid.hw;
    PillarizeResult res;
    res.stats.total = int(scene.points.size());

    std::vector<std::vector<PointXYZI>> cells(std::size_t(n) * std::size_t(n));
    double origin = grid.origin();
    for (const auto& p : scene.points) {
        int ix = int(std::floor((p.x - origin) / grid.cell));
        int iy = int(std::floor((p.y - origin) / grid.cell));
        if (ix < 0 || ix >= n || iy < 0 || iy >= n) {
            ++res.stats.dropped;
            continue;
        }
        cells[std::size_t(iy) * std::size_t(n) + std::size_t(ix)].push_back(p);
    }

    std::vector<double> map(std::size_t(grid.c_in) * std::size_t(n) * std::size_t(n), 0.0);
    std::int64_t plane = std::int64_t(n) * n;
    for (int iy = 0; iy < n; ++iy)
        for (int ix = 0; ix < n; ++ix) {
            auto& pts = cells[std::size_t(iy) * std::size_t(n) + std::size_t(ix)];
            if (pts.empty()) continue;
            std::sort(pts.begin(), pts.end(), [](const PointXYZI& a, const PointXYZI& b) {
                if (a.x != b.x) return a.x < b.x;
                if (a.y != b.y) return a.y < b.y;
                if (a.z != b.z) return a.z < b.z;
                return a.intensity < b.intensity;
            });
            double sx = 0, sy = 0, sz = 0, si = 0;
            for (const auto& p : pts) {
                sx += p.x;
                sy += p.y;
                sz += p.z;
                si += p.intensity;
            }
            double inv = 1.0 / double(pts.size());
            std::size_t at = std::size_t(iy) * std::size_t(n) + std::size_t(ix);
            map[at] = (sx * inv - grid.cell_center(ix)) / grid.cell;
            map[std::size_t(plane) + at] = (sy * inv - grid.cell_center(iy)) / grid.cell;
            map[std::size_t(2 * plane) + at] = sz * inv;
            map[std::size_t(3 * plane) + at] = si * inv;
            map[std::size_t(4 * plane) + at] = std::min(1.0, double(pts.size()) / 20.0);
            map[std::size_t(5 * plane) + at] = 1.0;
        }

    res.map = Tensor::from_values({grid.c_in, n, n}, std::move(map));
    return res;
}

// ---------------------------------------------------------------------------
// Training targets
// ---------------------------------------------------------------------------

struct GtObject {
    int cell_index;  // iy * W + ix
    int class_id;
    int box_index;   // into scene.boxes
};

/// CenterPoint-style targets for the five detection heads. Heatmap peaks are
/// exactly 1.0 at each ground-truth center cell; regression channels are
/// written only there.
struct TargetMaps {
    int k = 0, h = 0, w = 0;
    std::vector<double> heatmap;   // k*h*w, in [0,1]
    std::vector<double> offset;    // 2*h*w, sub-cell dx/dy in [0,1)
    std::vector<double> height_m;  // h*w
    std::vector<double> size_log;  // 3*h*w, log(length,width,height)
    std::vector<double> rot_sc;    // 2*h*w, (sin yaw, cos yaw)
    std::vector<double> valid;     // h*w, 1.0 at center cells
    std::vector<GtObject> objects; // canonical order: ascending (cell, class)
};

inline TargetMaps encode_targets(const Scene& scene, const GridConfig& grid, int k_classes) {
    int n = grid.hw;
    std::int64_t plane = std::int64_t(n) * n;
    TargetMaps t;
    t.k = k_classes;
    t.h = n;
    t.w = n;
    t.heatmap.assign(std::size_t(k_classes) * std::size_t(plane), 0.0);
    t.offset.assign(std::size_t(2 * plane), 0.0);
    t.height_m.assign(std::size_t(plane), 0.0);
    t.size_log.assign(std::size_t(3 * plane), 0.0);
    t.rot_sc.assign(std::size_t(2 * plane), 0.0);
    t.valid.assign(std::size_t(plane), 0.0);

    double origin = grid.origin();
    for (std::size_t bi = 0; bi < scene.boxes.size(); ++bi) {
        const Box3D& b = scene.boxes[bi];
        if (b.class_id < 0 || b.class_id >= k_classes)
            throw Error(msg("encode_targets: class ", b.class_id, " outside [0, ", k_classes, ")"));
        double fx = (b.cx - origin) / grid.cell;
        double fy = (b.cy - origin) / grid.cell;
        int ix = int(std::floor(fx));
        int iy = int(std::floor(fy));
        if (ix < 0 || ix >= n || iy < 0 || iy >= n)
            throw Error(msg("encode_targets: box center (", b.cx, ", ", b.cy, ") outside grid"));
        int cell = iy * n + ix;
        for (const auto& o : t.objects)
            if (o.cell_index == cell && o.class_id == b.class_id)
                throw Error(msg("encode_targets: two class-", b.class_id,
                                " boxes share center cell ", cell));

        double sigma = std::max(1.0, std::hypot(b.length, b.width) / (6.0 * grid.cell));
        int radius = int(std::ceil(3.0 * sigma));
        double* heat = t.heatmap.data() + std::size_t(b.class_id) * std::size_t(plane);
        for (int dy = -radius; dy <= radius; ++dy) {
            int yy = iy + dy;
            if (yy < 0 || yy >= n) continue;
            for (int dx = -radius; dx <= radius; ++dx) {
                int xx = ix + dx;
                if (xx < 0 || xx >= n) continue;
                double g = std::exp(-(double(dx) * dx + double(dy) * dy) / (2.0 * sigma * sigma));
                double& cur = heat[std::size_t(yy) * std::size_t(n) + std::size_t(xx)];
                cur = std::max(cur, g);  // overlapping splats combine by max
            }
        }

        std::size_t at = std::size_t(cell);
        t.offset[at] = fx - ix;
        t.offset[std::size_t(plane) + at] = fy - iy;
        t.height_m[at] = b.cz;
        t.size_log[at] = std::log(b.length);
        t.size_log[std::size_t(plane) + at] = std::log(b.width);
        t.size_log[std::size_t(2 * plane) + at] = std::log(b.height);
        t.rot_sc[at] = std::sin(b.yaw);
        t.rot_sc[std::size_t(plane) + at] = std::cos(b.yaw);
        t.valid[at] = 1.0;
        t.objects.push_back({cell, b.class_id, int(bi)});
    }

    std::sort(t.objects.begin(), t.objects.end(), [](const GtObject& a, const GtObject& b) {
        if (a.cell_index != b.cell_index) return a.cell_index < b.cell_index;
        return a.class_id < b.class_id;
    });
    return t;
}

}  // namespace itkd
