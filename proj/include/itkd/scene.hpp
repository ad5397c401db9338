#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "itkd/geometry.hpp"
#include "itkd/rng.hpp"

namespace itkd {

struct ClassTemplate {
    double length, width, height;
};

struct GenConfig {
    double range = 16.0;  // scenes span [-range, range] on x and y
    int min_boxes = 3;
    int max_boxes = 8;
    std::vector<ClassTemplate> templates = {
        {4.5, 2.0, 1.6},  // vehicle-like
        {0.8, 0.8, 1.7},  // pedestrian-like
        {1.8, 0.8, 1.6},  // cyclist-like
    };
    double size_jitter = 0.15;
    // surface point budget decays with distance from the sensor at the origin
    int base_points = 320;
    double ref_dist = 8.0;
    int min_points = 24;
    int clutter_points = 600;
    double surface_noise = 0.02;
    double min_center_dist = 1.25;  // keeps ground-truth centers in distinct grid cells
    int max_retries = 200;

    int num_classes() const { return int(templates.size()); }
};

struct PointXYZI {
    double x, y, z, intensity;

    bool operator==(const PointXYZI&) const = default;
};

struct Scene {
    std::uint64_t seed = 0;
    double range = 0.0;
    std::vector<Box3D> boxes;
    std::vector<PointXYZI> points;

    bool operator==(const Scene&) const = default;
};

inline int points_for_distance(const GenConfig& cfg, double dist) {
    double frac = cfg.ref_dist / (cfg.ref_dist + dist);
    return std::max(cfg.min_points, int(std::lround(cfg.base_points * frac * frac)));
}

/// Samples n points on the visible surfaces of a box (top plus four sides),
/// area-weighted, with Gaussian jitter.
inline void sample_box_surface(const Box3D& b, int n, double noise, Rng& rng,
                               std::vector<PointXYZI>& out) {
    double top = b.length * b.width;
    double side_x = b.width * b.height;   // faces at +-length/2
    double side_y = b.length * b.height;  // faces at +-width/2
    double cum[5] = {top, top + side_x, top + 2 * side_x, top + 2 * side_x + side_y,
                     top + 2 * side_x + 2 * side_y};
    double total = cum[4];
    double c = std::cos(b.yaw), s = std::sin(b.yaw);
    for (int i = 0; i < n; ++i) {
        double pick = rng.uniform() * total;
        int face = 0;
        while (face < 4 && pick > cum[face]) ++face;
        double u = rng.uniform(-0.5, 0.5);
        double v = rng.uniform(-0.5, 0.5);
        double lx, ly, lz;
        switch (face) {
            case 0: lx = u * b.length; ly = v * b.width; lz = 0.5 * b.height; break;
            case 1: lx = 0.5 * b.length; ly = u * b.width; lz = v * b.height; break;
            case 2: lx = -0.5 * b.length; ly = u * b.width; lz = v * b.height; break;
            case 3: lx = u * b.length; ly = 0.5 * b.width; lz = v * b.height; break;
            default: lx = u * b.length; ly = -0.5 * b.width; lz = v * b.height; break;
        }
        lx += rng.normal(0.0, noise);
        ly += rng.normal(0.0, noise);
        lz += rng.normal(0.0, noise);
        out.push_back({b.cx + c * lx - s * ly, b.cy + s * lx + c * ly, b.cz + lz,
                       rng.uniform()});
    }
}

/// Deterministic synthetic scene: non-overlapping boxes (pairwise BEV
/// IoU < 0.01, centers separated), surface points whose density decays with
/// distance from the origin, plus ground clutter.
inline Scene generate_scene(const GenConfig& cfg, std::uint64_t seed) {
    Rng rng(mix_seed(seed, "scene"));
    Scene scene;
    scene.seed = seed;
    scene.range = cfg.range;

    int n_boxes = cfg.min_boxes + int(rng.uniform_int(cfg.max_boxes - cfg.min_boxes + 1));
    for (int bi = 0; bi < n_boxes; ++bi) {
        bool placed = false;
        for (int attempt = 0; attempt < cfg.max_retries && !placed; ++attempt) {
            int cls = int(rng.uniform_int(cfg.num_classes()));
            const ClassTemplate& t = cfg.templates[std::size_t(cls)];
            Box3D b;
            b.class_id = cls;
            b.length = t.length * (1.0 + cfg.size_jitter * rng.uniform(-1.0, 1.0));
            b.width = t.width * (1.0 + cfg.size_jitter * rng.uniform(-1.0, 1.0));
            b.height = t.height * (1.0 + cfg.size_jitter * rng.uniform(-1.0, 1.0));
            b.yaw = wrap_angle(rng.uniform(-std::numbers::pi, std::numbers::pi));
            double margin = 0.5 * std::hypot(b.length, b.width) + 6.0 * cfg.surface_noise;
            if (margin >= cfg.range) continue;
            b.cx = rng.uniform(-cfg.range + margin, cfg.range - margin);
            b.cy = rng.uniform(-cfg.range + margin, cfg.range - margin);
            b.cz = 0.5 * b.height + rng.normal(0.0, 0.05);

            bool ok = true;
            for (const auto& other : scene.boxes) {
                double dx = b.cx - other.cx, dy = b.cy - other.cy;
                if (std::hypot(dx, dy) < cfg.min_center_dist || rotated_iou(b, other) >= 0.01) {
                    ok = false;
                    break;
                }
            }
            if (ok) {
                scene.boxes.push_back(b);
                placed = true;
            }
        }
        if (!placed)
            throw Error(msg("generate_scene: could not place box ", bi + 1, " of ", n_boxes,
                            " after ", cfg.max_retries,
                            " attempts; reduce the box count or enlarge the range"));
    }

    std::vector<PointXYZI> raw;
    for (const auto& b : scene.boxes) {
        int n = points_for_distance(cfg, std::hypot(b.cx, b.cy));
        sample_box_surface(b, n, cfg.surface_noise, rng, raw);
    }
    for (int i = 0; i < cfg.clutter_points; ++i) {
        raw.push_back({rng.uniform(-cfg.range, cfg.range), rng.uniform(-cfg.range, cfg.range),
                       rng.normal(0.0, 0.05), rng.uniform()});
    }
    scene.points.reserve(raw.size());
    for (const auto& p : raw)
        if (std::fabs(p.x) <= cfg.range && std::fabs(p.y) <= cfg.range) scene.points.push_back(p);
    return scene;
}

// ---------------------------------------------------------------------------
// Dataset file
// ---------------------------------------------------------------------------

// Layout (little-endian): magic "ITKDDS01" (8 bytes, the trailing digits are
// the format version), u32 scene count, then per scene:
//   u64 seed, f64 range,
//   u32 box count,   boxes as 7 f64 (cx cy cz length width height yaw) + i32 class,
//   u32 point count, points as 4 f64 (x y z intensity).
inline constexpr char kDatasetMagic[8] = {'I', 'T', 'K', 'D', 'D', 'S', '0', '1'};

namespace detail {

template <class T>
void ds_write(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T ds_read(std::istream& is, const char* what) {
    T v;
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!is) throw IoError(msg("truncated dataset while reading ", what));
    return v;
}

}  // namespace detail

inline void write_dataset(const std::string& path, std::span<const Scene> scenes) {
    if (scenes.empty()) throw IoError("write_dataset: refusing to write an empty dataset");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError(msg("cannot open '", path, "' for writing"));
    os.write(kDatasetMagic, sizeof kDatasetMagic);
    detail::ds_write(os, std::uint32_t(scenes.size()));
    for (const auto& sc : scenes) {
        detail::ds_write(os, std::uint64_t(sc.seed));
        detail::ds_write(os, sc.range);
        detail::ds_write(os, std::uint32_t(sc.boxes.size()));
        for (const auto& b : sc.boxes) {
            detail::ds_write(os, b.cx);
            detail::ds_write(os, b.cy);
            detail::ds_write(os, b.cz);
            detail::ds_write(os, b.length);
            detail::ds_write(os, b.width);
            detail::ds_write(os, b.height);
            detail::ds_write(os, b.yaw);
            detail::ds_write(os, std::int32_t(b.class_id));
        }
        detail::ds_write(os, std::uint32_t(sc.points.size()));
        for (const auto& p : sc.points) {
            detail::ds_write(os, p.x);
            detail::ds_write(os, p.y);
            detail::ds_write(os, p.z);
            detail::ds_write(os, p.intensity);
        }
    }
    if (!os) throw IoError(msg("write failure on '", path, "'"));
}

inline std::vector<Scene> read_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError(msg("cannot open dataset '", path, "'"));
    char magic[8];
    is.read(magic, 8);
    if (!is) throw IoError(msg("truncated dataset '", path, "': missing header"));
    if (std::memcmp(magic, kDatasetMagic, 6) != 0)
        throw IoError(msg("'", path, "' is not a dataset file (bad magic)"));
    if (std::memcmp(magic, kDatasetMagic, 8) != 0)
        throw IoError(msg("dataset version mismatch in '", path, "': found '",
                          std::string(magic + 6, 2), "', expected '01'"));
    auto count = detail::ds_read<std::uint32_t>(is, "scene count");
    std::vector<Scene> scenes;
    scenes.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        Scene sc;
        sc.seed = detail::ds_read<std::uint64_t>(is, "scene seed");
        sc.range = detail::ds_read<double>(is, "scene range");
        auto nb = detail::ds_read<std::uint32_t>(is, "box count");
        sc.boxes.resize(nb);
        for (auto& b : sc.boxes) {
            b.cx = detail::ds_read<double>(is, "box");
            b.cy = detail::ds_read<double>(is, "box");
            b.cz = detail::ds_read<double>(is, "box");
            b.length = detail::ds_read<double>(is, "box");
            b.width = detail::ds_read<double>(is, "box");
            b.height = detail::ds_read<double>(is, "box");
            b.yaw = detail::ds_read<double>(is, "box");
            b.class_id = detail::ds_read<std::int32_t>(is, "box class");
        }
        auto np = detail::ds_read<std::uint32_t>(is, "point count");
        sc.points.resize(np);
        for (auto& p : sc.points) {
            p.x = detail::ds_read<double>(is, "point");
            p.y = detail::ds_read<double>(is, "point");
            p.z = detail::ds_read<double>(is, "point");
            p.intensity = detail::ds_read<double>(is, "point");
        }
        scenes.push_back(std::move(sc));
    }
    return scenes;
}

}  // namespace itkd
