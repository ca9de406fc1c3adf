#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "twinstim/ksum.hpp"

namespace twinstim {

struct Point {
    double x = 0.0;
    double y = 0.0;
};

inline double dist2(const Point& a, const Point& b) {
    const double dx = a.x - b.x, dy = a.y - b.y;
    return dx * dx + dy * dy;
}

using Ring = std::vector<Point>; // closed: front() == back()

struct BoundingBox {
    double min_x = std::numeric_limits<double>::infinity();
    double min_y = std::numeric_limits<double>::infinity();
    double max_x = -std::numeric_limits<double>::infinity();
    double max_y = -std::numeric_limits<double>::infinity();

    void expand(const Point& p) {
        min_x = std::min(min_x, p.x);
        min_y = std::min(min_y, p.y);
        max_x = std::max(max_x, p.x);
        max_y = std::max(max_y, p.y);
    }
    double width() const { return max_x - min_x; }
    double height() const { return max_y - min_y; }
    bool contains(const Point& p) const {
        return p.x >= min_x && p.x <= max_x && p.y >= min_y && p.y <= max_y;
    }
};

struct GeometryError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline double ring_signed_area(const Ring& r) {
    Ksum acc;
    for (std::size_t i = 0; i + 1 < r.size(); ++i)
        acc.add(r[i].x * r[i + 1].y - r[i + 1].x * r[i].y);
    return 0.5 * acc.value();
}

// First ring outer (CCW, positive signed area), later rings holes (CW).
struct Polygon {
    std::vector<Ring> rings;

    BoundingBox bbox() const {
        BoundingBox b;
        for (const auto& r : rings)
            for (const auto& p : r) b.expand(p);
        return b;
    }

    // Basic structural validation; run once at load time.
    void validate() const {
        if (rings.empty()) throw GeometryError("polygon has no rings");
        for (std::size_t k = 0; k < rings.size(); ++k) {
            const Ring& r = rings[k];
            if (r.size() < 4) throw GeometryError("ring " + std::to_string(k) + " has fewer than 3 distinct points");
            if (r.front().x != r.back().x || r.front().y != r.back().y)
                throw GeometryError("ring " + std::to_string(k) + " is not closed");
            std::size_t distinct = 0;
            for (std::size_t i = 0; i + 1 < r.size(); ++i)
                if (r[i].x != r[i + 1].x || r[i].y != r[i + 1].y) ++distinct;
            if (distinct < 3) throw GeometryError("ring " + std::to_string(k) + " has fewer than 3 distinct points");
            const double a = ring_signed_area(r);
            if (k == 0 && a <= 0) throw GeometryError("outer ring must be counter-clockwise");
            if (k > 0 && a >= 0) throw GeometryError("hole ring " + std::to_string(k) + " must be clockwise");
        }
        if (self_intersects()) throw GeometryError("polygon self-intersects");
    }

    bool self_intersects() const {
        // O(n^2) segment check per ring; load-time only
        for (const auto& r : rings) {
            const std::size_t n = r.size() - 1;
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = i + 2; j < n; ++j) {
                    if (i == 0 && j == n - 1) continue; // shared endpoint
                    if (segments_cross(r[i], r[i + 1], r[j], r[j + 1])) return true;
                }
            }
        }
        return false;
    }

    static bool segments_cross(const Point& a, const Point& b, const Point& c, const Point& d) {
        auto orient = [](const Point& p, const Point& q, const Point& r) {
            const double v = (q.x - p.x) * (r.y - p.y) - (q.y - p.y) * (r.x - p.x);
            return (v > 0) - (v < 0);
        };
        const int o1 = orient(a, b, c), o2 = orient(a, b, d);
        const int o3 = orient(c, d, a), o4 = orient(c, d, b);
        return o1 != o2 && o3 != o4 && o1 != 0 && o2 != 0 && o3 != 0 && o4 != 0;
    }
};

struct Disc {
    Point center;
    double radius = 0.0;
};

// Area with holes subtracted; always >= 0 for a valid polygon.
inline double polygon_area(const Polygon& p) {
    Ksum acc;
    for (const auto& r : p.rings) acc.add(ring_signed_area(r));
    return acc.value();
}

// Even-odd rule; boundary points count as inside.
inline bool point_in_ring(const Point& pt, const Ring& r) {
    bool inside = false;
    for (std::size_t i = 0; i + 1 < r.size(); ++i) {
        const Point& a = r[i];
        const Point& b = r[i + 1];
        // boundary check: point on segment ab
        const double cross = (b.x - a.x) * (pt.y - a.y) - (b.y - a.y) * (pt.x - a.x);
        if (cross == 0.0 && std::min(a.x, b.x) <= pt.x && pt.x <= std::max(a.x, b.x) &&
            std::min(a.y, b.y) <= pt.y && pt.y <= std::max(a.y, b.y))
            return true;
        if ((a.y > pt.y) != (b.y > pt.y)) {
            const double x_at = a.x + (pt.y - a.y) / (b.y - a.y) * (b.x - a.x);
            if (pt.x < x_at) inside = !inside;
        }
    }
    return inside;
}

inline bool point_in_polygon(const Point& pt, const Polygon& p) {
    int crossings = 0;
    for (const auto& r : p.rings) {
        bool in = false;
        for (std::size_t i = 0; i + 1 < r.size(); ++i) {
            const Point& a = r[i];
            const Point& b = r[i + 1];
            const double cross = (b.x - a.x) * (pt.y - a.y) - (b.y - a.y) * (pt.x - a.x);
            if (cross == 0.0 && std::min(a.x, b.x) <= pt.x && pt.x <= std::max(a.x, b.x) &&
                std::min(a.y, b.y) <= pt.y && pt.y <= std::max(a.y, b.y))
                return true; // boundary (of any ring) counts as inside
            if ((a.y > pt.y) != (b.y > pt.y)) {
                const double x_at = a.x + (pt.y - a.y) / (b.y - a.y) * (b.x - a.x);
                if (pt.x < x_at) in = !in;
            }
        }
        if (in) ++crossings;
    }
    return (crossings % 2) == 1;
}

// Polygon-with-holes clipped to a disc, translated so the disc center is
// at the origin. Membership is even-odd over the clipped rings.
struct IntegrationRegion {
    std::vector<Ring> rings;
    double clip_radius = 0.0;
    double area = 0.0;
    // relative area discrepancy of the regular-polygon disc approximation
    double disc_area_rel_err = 0.0;
    BoundingBox box;

    bool empty() const { return rings.empty(); }

    bool contains(const Point& pt) const {
        if (!box.contains(pt)) return false;
        int c = 0;
        for (const auto& r : rings)
            if (point_in_ring(pt, r)) ++c;
        return (c % 2) == 1;
    }
};

// Regular n-gon standing in for the disc. The vertex radius is inflated so
// the polygon area equals pi r^2 to machine precision; an inscribed 64-gon
// would already carry a 1.6e-3 area deficit into every spatial integral.
inline Ring disc_ring(double radius, int vertices) {
    const double n = static_cast<double>(vertices);
    const double two_pi = 6.283185307179586476925286766559;
    const double scale = std::sqrt(two_pi / (n * std::sin(two_pi / n)));
    Ring r;
    r.reserve(vertices + 1);
    for (int k = 0; k < vertices; ++k) {
        const double a = two_pi * k / n;
        r.push_back({radius * scale * std::cos(a), radius * scale * std::sin(a)});
    }
    r.push_back(r.front());
    return r;
}

namespace detail {
// Sutherland-Hodgman: clip one ring against one edge of a convex clipper.
inline Ring clip_ring_edge(const Ring& input, const Point& e0, const Point& e1) {
    auto inside = [&](const Point& p) {
        return (e1.x - e0.x) * (p.y - e0.y) - (e1.y - e0.y) * (p.x - e0.x) >= 0.0;
    };
    auto intersect = [&](const Point& a, const Point& b) {
        const double a1 = e1.y - e0.y, b1 = e0.x - e1.x;
        const double c1 = a1 * e0.x + b1 * e0.y;
        const double a2 = b.y - a.y, b2 = a.x - b.x;
        const double c2 = a2 * a.x + b2 * a.y;
        const double det = a1 * b2 - a2 * b1;
        return Point{(b2 * c1 - b1 * c2) / det, (a1 * c2 - a2 * c1) / det};
    };
    Ring out;
    if (input.size() < 2) return out;
    for (std::size_t i = 0; i + 1 < input.size(); ++i) {
        const Point& cur = input[i];
        const Point& nxt = input[i + 1];
        const bool cin = inside(cur), nin = inside(nxt);
        if (cin) {
            out.push_back(cur);
            if (!nin) out.push_back(intersect(cur, nxt));
        } else if (nin) {
            out.push_back(intersect(cur, nxt));
        }
    }
    if (!out.empty()) out.push_back(out.front());
    return out;
}

inline Ring clip_ring_convex(Ring ring, const Ring& clipper) {
    for (std::size_t i = 0; i + 1 < clipper.size() && !ring.empty(); ++i)
        ring = clip_ring_edge(ring, clipper[i], clipper[i + 1]);
    return ring;
}
} // namespace detail

inline IntegrationRegion clip_to_disc(const Polygon& p, const Disc& d, int disc_vertices = 64) {
    if (d.radius <= 0.0) throw GeometryError("disc radius must be positive");
    IntegrationRegion region;
    region.clip_radius = d.radius;
    const double pi = 3.141592653589793238462643383279;
    const double ngon_area = 0.5 * disc_vertices * std::sin(2.0 * pi / disc_vertices);
    region.disc_area_rel_err = std::abs(1.0 - ngon_area / pi); // pre-correction deficit
    const Ring clipper = disc_ring(d.radius, disc_vertices);

    Ksum area;
    for (const auto& src : p.rings) {
        Ring shifted;
        shifted.reserve(src.size());
        for (const auto& pt : src) shifted.push_back({pt.x - d.center.x, pt.y - d.center.y});
        Ring clipped = detail::clip_ring_convex(std::move(shifted), clipper);
        if (clipped.size() < 4) continue;
        const double a = ring_signed_area(clipped);
        if (a == 0.0) continue;
        area.add(a);
        for (const auto& pt : clipped) region.box.expand(pt);
        region.rings.push_back(std::move(clipped));
    }
    region.area = std::max(0.0, area.value());
    if (region.rings.empty()) region.box = BoundingBox{};
    return region;
}

struct CubatureResult {
    double value = 0.0;
    double cell_width = 0.0;
    std::size_t cells_used = 0;
    bool degenerate = false; // cell wider than the region bounding box
};

// Two-dimensional midpoint rule: axis-aligned cells anchored at the region
// bbox corner; cells whose midpoint lies in the region contribute
// kernel(midpoint) * w^2.
template <class Kernel>
CubatureResult cubature_midpoint(Kernel&& kernel, const IntegrationRegion& region, double cell_width) {
    if (cell_width <= 0.0) throw GeometryError("cell_width must be positive");
    CubatureResult res;
    res.cell_width = cell_width;
    if (region.empty()) return res;
    const double w = region.box.width(), h = region.box.height();
    if (cell_width > w || cell_width > h) res.degenerate = true;
    const long nx = std::max<long>(1, static_cast<long>(std::ceil(w / cell_width)));
    const long ny = std::max<long>(1, static_cast<long>(std::ceil(h / cell_width)));
    Ksum acc;
    for (long iy = 0; iy < ny; ++iy) {
        const double my = region.box.min_y + (iy + 0.5) * cell_width;
        for (long ix = 0; ix < nx; ++ix) {
            const Point mid{region.box.min_x + (ix + 0.5) * cell_width, my};
            if (region.contains(mid)) {
                acc.add(kernel(mid));
                ++res.cells_used;
            }
        }
    }
    res.value = acc.value() * cell_width * cell_width;
    return res;
}

// Adaptive variant: halve the cell width until successive estimates agree
// to rel_tol, capped at max_refinements halvings. Returns the final pass.
template <class Kernel>
CubatureResult cubature_adaptive(Kernel&& kernel, const IntegrationRegion& region, double cell_width,
                                 double rel_tol = 1e-4, int max_refinements = 3) {
    CubatureResult res = cubature_midpoint(kernel, region, cell_width);
    for (int i = 0; i < max_refinements; ++i) {
        CubatureResult finer = cubature_midpoint(kernel, region, res.cell_width / 2.0);
        const double denom = std::max(std::abs(finer.value), 1e-300);
        const bool close = std::abs(finer.value - res.value) / denom < rel_tol;
        res = finer;
        if (close) break;
    }
    return res;
}

} // namespace twinstim
