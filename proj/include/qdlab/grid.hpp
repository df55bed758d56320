#ifndef QDLAB_GRID_HPP
#define QDLAB_GRID_HPP

#include <complex>
#include <cstddef>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "qdlab/torus.hpp"

namespace qdlab {

using Complex = std::complex<double>;

// Periodic box with L sites per axis and lattice spacing delta (1 for the
// physical lattice, 1/2 for the Wigner half-lattice). The position measure is
// delta^d times the counting sum; the dual momentum grid is {k/(delta L)} with
// Lebesgue-normalized quadrature of weight (1/(delta L))^d per point.
struct LatticeGrid {
    int L = 0;
    double delta = 1.0;
    int d = 3;

    LatticeGrid() = default;
    LatticeGrid(int L_, double delta_ = 1.0) : L(L_), delta(delta_) {
        if (L <= 0 || L % 2 != 0)
            throw std::invalid_argument("LatticeGrid: L must be positive and even");
        if (delta <= 0.0) throw std::invalid_argument("LatticeGrid: delta > 0 required");
    }

    std::size_t size() const {
        return static_cast<std::size_t>(L) * L * L;
    }
    // flat row-major index of (x1,x2,x3), each in [0,L)
    std::size_t index(int x1, int x2, int x3) const {
        return (static_cast<std::size_t>(x1) * L + x2) * L + x3;
    }
    double position_weight() const { return delta * delta * delta; }
    double momentum_weight() const {
        const double dl = delta * L;
        return 1.0 / (dl * dl * dl);
    }
    // signed momentum index in [-L/2, L/2) from a storage index in [0, L)
    int signed_index(int m) const { return m < L / 2 ? m : m - L; }
    // momentum component of storage index m
    double momentum_coord(int m) const { return signed_index(m) / (delta * L); }
    TorusPoint momentum(int m1, int m2, int m3) const {
        // canonical only for delta = 1; callers on the half grid scale by delta
        return {momentum_coord(m1), momentum_coord(m2), momentum_coord(m3)};
    }

    bool operator==(const LatticeGrid& o) const {
        return L == o.L && delta == o.delta && d == o.d;
    }
};

enum class Representation { position, momentum };

// Complex field on a periodic lattice, flat row-major storage indexed
// (x1,x2,x3). Immutable value semantics: transforms return new fields.
struct ComplexField {
    LatticeGrid grid;
    Representation rep = Representation::position;
    std::vector<Complex> values;

    ComplexField() = default;
    ComplexField(const LatticeGrid& g, Representation r)
        : grid(g), rep(r), values(g.size(), Complex{0.0, 0.0}) {}

    Complex& at(int x1, int x2, int x3) { return values[grid.index(x1, x2, x3)]; }
    const Complex& at(int x1, int x2, int x3) const {
        return values[grid.index(x1, x2, x3)];
    }

    double norm_sq() const {
        double s = 0.0;
        for (const auto& v : values) s += std::norm(v);
        const double w = rep == Representation::position ? grid.position_weight()
                                                         : grid.momentum_weight();
        return s * w;
    }
    double norm() const { return std::sqrt(norm_sq()); }

    void scale_by(double a) {
        for (auto& v : values) v *= a;
    }
};

// CSV dump: header x1,x2,x3,re,im, positions as integers in site units.
inline void dump_field_csv(const ComplexField& f, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("dump_field_csv: cannot open " + path);
    out << "x1,x2,x3,re,im\n";
    out.precision(17);
    const int L = f.grid.L;
    for (int a = 0; a < L; ++a)
        for (int b = 0; b < L; ++b)
            for (int c = 0; c < L; ++c) {
                const Complex v = f.at(a, b, c);
                out << a << ',' << b << ',' << c << ',' << v.real() << ','
                    << v.imag() << '\n';
            }
}

}  // namespace qdlab

#endif
