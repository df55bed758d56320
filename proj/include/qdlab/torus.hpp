#ifndef QDLAB_TORUS_HPP
#define QDLAB_TORUS_HPP

#include <array>
#include <cmath>

#include "qdlab/rng.hpp"

namespace qdlab {

// Canonical torus coordinate in [-1/2, 1/2).
inline double wrap_half(double x) {
    double y = x - std::floor(x + 0.5);
    if (y >= 0.5) y -= 1.0;  // guard against floor rounding at the boundary
    return y;
}

// A momentum on the torus [-1/2,1/2)^3. Addition and subtraction wrap mod 1
// componentwise; the stored representative is always canonical.
struct TorusPoint {
    std::array<double, 3> c{0.0, 0.0, 0.0};

    TorusPoint() = default;
    TorusPoint(double a, double b, double d) : c{wrap_half(a), wrap_half(b), wrap_half(d)} {}

    double operator[](int i) const { return c[i]; }

    TorusPoint operator+(const TorusPoint& o) const {
        return {c[0] + o.c[0], c[1] + o.c[1], c[2] + o.c[2]};
    }
    TorusPoint operator-(const TorusPoint& o) const {
        return {c[0] - o.c[0], c[1] - o.c[1], c[2] - o.c[2]};
    }
    TorusPoint operator-() const { return {-c[0], -c[1], -c[2]}; }

    static TorusPoint random(Rng& rng) {
        return {rng.uniform_torus(), rng.uniform_torus(), rng.uniform_torus()};
    }
};

// Euclidean distance between canonical representatives with componentwise wrap.
inline double torus_distance(const TorusPoint& p, const TorusPoint& q) {
    double s = 0.0;
    for (int i = 0; i < 3; ++i) {
        const double d = wrap_half(p.c[i] - q.c[i]);
        s += d * d;
    }
    return std::sqrt(s);
}

inline TorusPoint scale(const TorusPoint& p, double a) {
    return {a * p.c[0], a * p.c[1], a * p.c[2]};
}

}  // namespace qdlab

#endif
