#ifndef QDLAB_DISPERSION_HPP
#define QDLAB_DISPERSION_HPP

#include <array>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "qdlab/torus.hpp"

namespace qdlab {

inline constexpr double kPi = 3.14159265358979323846264338328;
inline constexpr double kTwoPi = 6.283185307179586476925286766559;

// e(p) = sum_j (1 - cos 2 pi p_j) and its gradient 2 pi sin(2 pi p_j).
// The Boltzmann velocity is sin(2 pi p) = grad e / (2 pi); both accessors are
// provided to keep the factor-2pi convention in one place.
struct DispersionValue {
    double energy;
    std::array<double, 3> gradient;  // 2 pi sin(2 pi p_j)

    std::array<double, 3> velocity() const {
        return {gradient[0] / kTwoPi, gradient[1] / kTwoPi, gradient[2] / kTwoPi};
    }
};

inline double dispersion_energy(const TorusPoint& p) {
    double e = 0.0;
    for (int j = 0; j < 3; ++j) e += 1.0 - std::cos(kTwoPi * p[j]);
    return e;
}

inline DispersionValue dispersion(const TorusPoint& p) {
    DispersionValue d;
    d.energy = 0.0;
    for (int j = 0; j < 3; ++j) {
        d.energy += 1.0 - std::cos(kTwoPi * p[j]);
        d.gradient[j] = kTwoPi * std::sin(kTwoPi * p[j]);
    }
    return d;
}

inline std::array<double, 3> boltzmann_velocity(const TorusPoint& p) {
    return {std::sin(kTwoPi * p[0]), std::sin(kTwoPi * p[1]),
            std::sin(kTwoPi * p[2])};
}

struct CriticalValues {
    std::vector<double> criticals;  // even integers 0, 2, ..., 2d
    double special;                 // flat-point value d
};

inline CriticalValues critical_values(int d) {
    if (d < 3) throw std::invalid_argument("critical_values: d >= 3 required");
    CriticalValues cv;
    for (int m = 0; m <= d; ++m) cv.criticals.push_back(2.0 * m);
    cv.special = static_cast<double>(d);
    return cv;
}

// min distance of alpha to the critical values together with the flat value d.
inline double energy_triple_norm(double alpha, int d = 3) {
    double m = std::abs(alpha - d);
    for (int k = 0; k <= d; ++k) m = std::min(m, std::abs(alpha - 2.0 * k));
    return m;
}

// min distance of alpha to the critical values 0, 2, ..., 2d alone.  Unlike
// the triple norm this does not treat the flat value d as bad: the level
// surface at d is regular, only the derivative estimates of Phi degrade there.
inline double critical_distance(double alpha, int d = 3) {
    double m = 1e300;
    for (int k = 0; k <= d; ++k) m = std::min(m, std::abs(alpha - 2.0 * k));
    return m;
}

// eta + minimal torus distance of p from the 2^d critical momenta, i.e. the
// points with every component in {0, 1/2}. Satisfies the triangle inequality.
inline double momentum_triple_norm(const TorusPoint& p, double eta) {
    double best = 1e300;
    for (int j = 0; j < 8; ++j) {
        const TorusPoint g{0.5 * (j & 1), 0.5 * ((j >> 1) & 1), 0.5 * ((j >> 2) & 1)};
        best = std::min(best, torus_distance(p, g));
    }
    return eta + best;
}

}  // namespace qdlab

#endif
