#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "itkd/errors.hpp"

namespace itkd {

/// Oriented 3-D box. yaw is normalized to (-pi, pi].
struct Box3D {
    double cx = 0, cy = 0, cz = 0;
    double length = 1, width = 1, height = 1;
    double yaw = 0;
    int class_id = 0;

    bool operator==(const Box3D&) const = default;
};

/// Wraps an angle into (-pi, pi].
inline double wrap_angle(double a) {
    constexpr double pi = std::numbers::pi;
    a = std::fmod(a + pi, 2.0 * pi);
    if (a <= 0.0) a += 2.0 * pi;
    return a - pi;
}

using Vec2 = std::array<double, 2>;

inline std::array<Vec2, 4> bev_corners(const Box3D& b) {
    double c = std::cos(b.yaw), s = std::sin(b.yaw);
    double hl = 0.5 * b.length, hw = 0.5 * b.width;
    auto world = [&](double x, double y) -> Vec2 {
        return {b.cx + c * x - s * y, b.cy + s * x + c * y};
    };
    // counter-clockwise
    return {world(hl, hw), world(-hl, hw), world(-hl, -hw), world(hl, -hw)};
}

inline double polygon_area(std::span<const Vec2> poly) {
    if (poly.size() < 3) return 0.0;
    double s = 0.0;
    for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++)
        s += poly[j][0] * poly[i][1] - poly[i][0] * poly[j][1];
    return 0.5 * std::fabs(s);
}

/// Sutherland-Hodgman clip of a polygon against a convex CCW polygon.
inline std::vector<Vec2> clip_polygon(std::span<const Vec2> subject, std::span<const Vec2> clip) {
    std::vector<Vec2> out(subject.begin(), subject.end());
    std::vector<Vec2> in;
    for (std::size_t e = 0, f = clip.size() - 1; e < clip.size(); f = e++) {
        const Vec2& a = clip[f];
        const Vec2& b = clip[e];
        in.swap(out);
        out.clear();
        if (in.empty()) break;
        // tolerance keeps vertices that sit exactly on a clip edge (e.g.
        // clipping a polygon against itself) from being rounded away
        constexpr double eps = 1e-9;
        auto side = [&](const Vec2& p) {
            return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        };
        auto intersect = [&](const Vec2& p, const Vec2& q) -> Vec2 {
            double dx = b[0] - a[0], dy = b[1] - a[1];
            double denom = dx * (q[1] - p[1]) - dy * (q[0] - p[0]);
            double t = denom != 0.0 ? (dy * (p[0] - a[0]) - dx * (p[1] - a[1])) / denom : 0.0;
            return {p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])};
        };
        for (std::size_t i = 0, j = in.size() - 1; i < in.size(); j = i++) {
            const Vec2& prev = in[j];
            const Vec2& cur = in[i];
            bool prev_in = side(prev) >= -eps;
            bool cur_in = side(cur) >= -eps;
            if (prev_in && cur_in) {
                out.push_back(cur);
            } else if (prev_in && !cur_in) {
                out.push_back(intersect(prev, cur));
            } else if (!prev_in && cur_in) {
                out.push_back(intersect(prev, cur));
                out.push_back(cur);
            }
        }
    }
    return out;
}

/// BEV IoU of two oriented boxes via convex polygon clipping.
inline double rotated_iou(const Box3D& a, const Box3D& b) {
    double area_a = a.length * a.width;
    double area_b = b.length * b.width;
    constexpr double eps = 1e-12;
    if (area_a < eps || area_b < eps) return 0.0;

    // cheap reject: circumscribed circles do not touch
    double dx = a.cx - b.cx, dy = a.cy - b.cy;
    double reach = 0.5 * (std::hypot(a.length, a.width) + std::hypot(b.length, b.width));
    if (dx * dx + dy * dy > reach * reach) return 0.0;

    auto ca = bev_corners(a);
    auto cb = bev_corners(b);
    auto inter_poly = clip_polygon(ca, cb);
    double inter = polygon_area(inter_poly);
    inter = std::min(inter, std::min(area_a, area_b));
    double uni = area_a + area_b - inter;
    return uni > eps ? inter / uni : 0.0;
}

}  // namespace itkd
