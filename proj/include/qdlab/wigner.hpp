#ifndef QDLAB_WIGNER_HPP
#define QDLAB_WIGNER_HPP

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "qdlab/dispersion.hpp"
#include "qdlab/fft.hpp"
#include "qdlab/grid.hpp"

namespace qdlab {

// Wigner transform of a state on the side-L box, stored in the Fourier form
//   What(xi, v) = conj(psi_hat(v - xi/2)) * psi_hat(v + xi/2),
// with v on the 1/L momentum grid and xi on the 1/L grid over the double
// torus (side 2L).  psi is treated as finitely supported on the box, so
// psi_hat lives naturally on the half-step 1/(2L) grid (computed by one
// zero-padded FFT) and the shifted arguments fall back on that grid.
struct WignerField {
    int L = 0;
    std::vector<Complex> psi_hat2;  // (2L)^3 values of psi_hat on the 1/(2L) grid

    std::size_t n_xi() const {
        return static_cast<std::size_t>(2 * L) * (2 * L) * (2 * L);
    }
    std::size_t n_v() const { return static_cast<std::size_t>(L) * L * L; }

    // psi_hat at the half-step index (m1, m2, m3) mod 2L
    Complex psi_hat(int m1, int m2, int m3) const {
        const int n = 2 * L;
        auto w = [n](int m) { return ((m % n) + n) % n; };
        return psi_hat2[(static_cast<std::size_t>(w(m1)) * n + w(m2)) * n + w(m3)];
    }

    // What(xi, v) with xi = b/L (b integer over the double torus) and v = a/L
    Complex hat(const std::array<int, 3>& b, const std::array<int, 3>& a) const {
        return std::conj(psi_hat(2 * a[0] - b[0], 2 * a[1] - b[1], 2 * a[2] - b[2])) *
               psi_hat(2 * a[0] + b[0], 2 * a[1] + b[1], 2 * a[2] + b[2]);
    }
};

inline WignerField wigner_transform(const ComplexField& psi) {
    if (psi.rep != Representation::position)
        throw std::invalid_argument("wigner_transform: psi must be in position form");
    const int L = psi.grid.L;
    WignerField w;
    w.L = L;
    // zero-padded transform: psi_hat(p) = sum_x e^{-2 pi i p x} psi(x) on the
    // 1/(2L) grid
    LatticeGrid g2(2 * L);
    ComplexField pad(g2, Representation::position);
    for (int a = 0; a < L; ++a)
        for (int b = 0; b < L; ++b)
            for (int c = 0; c < L; ++c) pad.at(a, b, c) = psi.at(a, b, c);
    const auto ph = fourier_forward(pad);
    w.psi_hat2 = ph.values;
    return w;
}

// Position form W(x, v) for one v index; x runs over the half-lattice
// (side 2L, x = m/2).  W(x,v) = 8 (2L)^{-3} sum_b e^{2 pi i b m / (2L)} What(b, v).
inline std::vector<double> wigner_position_slice(const WignerField& w,
                                                 const std::array<int, 3>& a) {
    const int n = 2 * w.L;
    LatticeGrid g2(n);
    ComplexField f(g2, Representation::momentum);
    for (int b1 = 0; b1 < n; ++b1)
        for (int b2 = 0; b2 < n; ++b2)
            for (int b3 = 0; b3 < n; ++b3)
                f.at(b1, b2, b3) = w.hat({b1, b2, b3}, a);
    // backward transform carries 1/(delta L)^3 = (2L)^{-3}; multiply by 8
    const auto pos = fourier_inverse(f);
    std::vector<double> out(pos.values.size());
    double max_imag = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = 8.0 * pos.values[i].real();
        max_imag = std::max(max_imag, std::abs(pos.values[i].imag()));
    }
    if (max_imag > 1e-9)
        throw std::runtime_error("wigner_position_slice: non-real Wigner values");
    return out;
}

// v-marginal at the half-lattice site with integer coordinates m on the
// side-2L grid (x = m/2): L^{-3} sum_v W(x, v).  Evaluated from the xi side,
//   marginal(m) = 8 (2L)^{-3} sum_b e^{2 pi i b m/(2L)} S(b),
//   S(b) = L^{-3} sum_a What(b, a),
// which should equal 8 |psi(x)|^2 at integer x and 0 at half-integer x.
inline double wigner_v_marginal(const WignerField& w, const std::array<int, 3>& m) {
    const int L = w.L;
    const int n = 2 * L;
    const double wv = 1.0 / (static_cast<double>(L) * L * L);
    Complex total{0.0, 0.0};
    for (int b1 = 0; b1 < n; ++b1)
        for (int b2 = 0; b2 < n; ++b2)
            for (int b3 = 0; b3 < n; ++b3) {
                Complex s{0.0, 0.0};
                for (int a1 = 0; a1 < L; ++a1)
                    for (int a2 = 0; a2 < L; ++a2)
                        for (int a3 = 0; a3 < L; ++a3)
                            s += w.hat({b1, b2, b3}, {a1, a2, a3});
                const double ph = kTwoPi *
                    (static_cast<double>(b1 * m[0] + b2 * m[1] + b3 * m[2]) / n);
                total += s * wv * Complex(std::cos(ph), std::sin(ph));
            }
    return 8.0 * (total / (static_cast<double>(n) * n * n)).real();
}

// x-marginal: 2^{-3} sum_x W(x, v) = What(0, v) = |psi_hat(v)|^2.
inline double wigner_x_marginal(const WignerField& w, const std::array<int, 3>& a) {
    return w.hat({0, 0, 0}, a).real();
}

// ---------------------------------------------------------------------------
// Observables: Gaussian in the macroscopic position X times a trigonometric
// polynomial in v.  Stored analytically; the xi-side form is
//   Ohat(xi, v) = (prod_j sigma_j sqrt(2 pi) e^{-2 pi^2 sigma_j^2 xi_j^2}
//                  e^{-2 pi i xi_j X0_j}) * sum_h c_h e^{2 pi i h . v}.
struct Observable {
    std::array<double, 3> center{0.0, 0.0, 0.0};
    std::array<double, 3> sigma{1.0, 1.0, 1.0};
    struct Harmonic {
        std::array<int, 3> h;
        Complex coeff;
    };
    std::vector<Harmonic> harmonics{{{0, 0, 0}, Complex(1.0, 0.0)}};
    // when set, the X part is the constant 1 (Ohat = delta at xi = 0)
    bool xi_delta = false;

    Complex x_fourier(const std::array<double, 3>& xi) const {
        Complex g{1.0, 0.0};
        for (int j = 0; j < 3; ++j) {
            const double s = sigma[j];
            const double amp = s * std::sqrt(kTwoPi) *
                               std::exp(-2.0 * kPi * kPi * s * s * xi[j] * xi[j]);
            const double ph = -kTwoPi * xi[j] * center[j];
            g *= amp * Complex(std::cos(ph), std::sin(ph));
        }
        return g;
    }
    Complex v_value(const TorusPoint& v) const {
        Complex s{0.0, 0.0};
        for (const auto& hc : harmonics) {
            const double ph = kTwoPi * (hc.h[0] * v[0] + hc.h[1] * v[1] + hc.h[2] * v[2]);
            s += hc.coeff * Complex(std::cos(ph), std::sin(ph));
        }
        return s;
    }
    double sup_v() const {
        double s = 0.0;
        for (const auto& hc : harmonics) s += std::abs(hc.coeff);
        return s;
    }
    // int dxi sup_v |Ohat(xi, v)| over xi in R^3 (Gaussian integral in closed form)
    double l1_sup_norm() const {
        if (xi_delta) return sup_v();
        double g = 1.0;
        // int sigma sqrt(2 pi) e^{-2 pi^2 sigma^2 xi^2} dxi = 1 per axis
        return g * sup_v();
    }
};

// <Ohat, conj(What^eps)> by grid quadrature: xi_b = b / (eps L) with weight
// (eps L)^{-3}, v_a = a / L with weight L^{-3}.  What^eps(xi) = What(eps xi).
inline Complex pair_observable(const WignerField& w, const Observable& obs, double eps) {
    if (eps <= 0.0) throw std::invalid_argument("pair_observable: eps > 0 required");
    const int L = w.L;
    const double wv = 1.0 / (static_cast<double>(L) * L * L);
    const double wxi = 1.0 / (eps * L * eps * L * eps * L);

    // precompute the v-sums of What against the harmonics for each xi
    Complex total{0.0, 0.0};
    const int n = 2 * L;
    for (int b1 = -L; b1 < L; ++b1)
        for (int b2 = -L; b2 < L; ++b2)
            for (int b3 = -L; b3 < L; ++b3) {
                if (obs.xi_delta && (b1 || b2 || b3)) continue;
                const std::array<double, 3> xi = {b1 / (eps * L), b2 / (eps * L),
                                                  b3 / (eps * L)};
                const Complex g = obs.xi_delta
                                      ? Complex(1.0 / wxi, 0.0)  // delta mass 1
                                      : obs.x_fourier(xi);
                if (std::abs(g) < 1e-300) continue;
                Complex vsum{0.0, 0.0};
                for (int a1 = 0; a1 < L; ++a1)
                    for (int a2 = 0; a2 < L; ++a2)
                        for (int a3 = 0; a3 < L; ++a3) {
                            const TorusPoint v(static_cast<double>(a1) / L,
                                               static_cast<double>(a2) / L,
                                               static_cast<double>(a3) / L);
                            vsum += obs.v_value(v) *
                                    std::conj(w.hat({b1, b2, b3}, {a1, a2, a3}));
                        }
                total += g * vsum;
            }
    (void)n;
    return total * wv * wxi;
}

// Position-space pairing oracle: builds the periodized position kernel from
// exactly the sampled Ohat values, so agreement with pair_observable is pure
// Plancherel.
inline Complex pair_observable_position(const WignerField& w, const Observable& obs,
                                        double eps) {
    const int L = w.L;
    const int n = 2 * L;
    // periodized X kernel at half-lattice points x = m/2:
    // G_per(m) = sum_b (eps L)^{-3} Ohat_x(b/(eps L)) e^{2 pi i b m/(2L)}
    LatticeGrid g2(n);
    ComplexField gk(g2, Representation::momentum);
    const double wxi = 1.0 / (eps * L * eps * L * eps * L);
    for (int b1 = -L; b1 < L; ++b1)
        for (int b2 = -L; b2 < L; ++b2)
            for (int b3 = -L; b3 < L; ++b3) {
                const std::array<double, 3> xi = {b1 / (eps * L), b2 / (eps * L),
                                                  b3 / (eps * L)};
                const Complex g = obs.xi_delta
                                      ? ((b1 || b2 || b3) ? Complex(0.0, 0.0)
                                                          : Complex(1.0 / wxi, 0.0))
                                      : obs.x_fourier(xi);
                gk.at((b1 + n) % n, (b2 + n) % n, (b3 + n) % n) = g * (wxi * static_cast<double>(n) * n * n);
            }
    const auto gpos = fourier_inverse(gk);  // carries (2L)^{-3}

    Complex total{0.0, 0.0};
    const double wv = 1.0 / (static_cast<double>(L) * L * L);
    for (int a1 = 0; a1 < L; ++a1)
        for (int a2 = 0; a2 < L; ++a2)
            for (int a3 = 0; a3 < L; ++a3) {
                const auto slice = wigner_position_slice(w, {a1, a2, a3});
                const TorusPoint v(static_cast<double>(a1) / L,
                                   static_cast<double>(a2) / L,
                                   static_cast<double>(a3) / L);
                const Complex vv = obs.v_value(v);
                Complex xsum{0.0, 0.0};
                for (std::size_t i = 0; i < slice.size(); ++i)
                    xsum += std::conj(gpos.values[i]) * slice[i];
                total += vv * std::conj(xsum) * wv / 8.0;
            }
    return total;
}

// Continuity of the Wigner transform under a state decomposition
// psi = psi1 + psi2: returns (bound, actual) for the displayed inequality.
struct ContinuityGap {
    double bound = 0.0;
    double actual = 0.0;
};

inline ContinuityGap wigner_continuity_gap(const ComplexField& psi1,
                                           const ComplexField& psi2,
                                           const Observable& obs, double eps) {
    ComplexField psi = psi1;
    for (std::size_t i = 0; i < psi.values.size(); ++i) psi.values[i] += psi2.values[i];
    const auto w = wigner_transform(psi);
    const auto w1 = wigner_transform(psi1);
    const Complex p = pair_observable(w, obs, eps);
    const Complex p1 = pair_observable(w1, obs, eps);
    ContinuityGap g;
    g.actual = std::abs(p - p1);
    const double n1 = psi1.norm_sq(), n2 = psi2.norm_sq();
    g.bound = obs.l1_sup_norm() * std::sqrt((n1 + n2) * n2);
    return g;
}

// Coarse snapshot: X binned on the integer lattice scaled by eps, v binned by
// energy; CSV rows X1,X2,X3,ebin,value.
inline void save_wigner_snapshot_csv(const WignerField& w, double eps, int n_ebins,
                                     const std::string& path) {
    const int L = w.L;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_wigner_snapshot_csv: cannot open " + path);
    out << "X1,X2,X3,ebin,value\n";
    out.precision(10);
    const double wv = 1.0 / (static_cast<double>(L) * L * L);
    // integer-lattice x only (even half-lattice sites), per-energy-bin v sums
    std::vector<std::vector<double>> acc(
        static_cast<std::size_t>(L) * L * L, std::vector<double>(n_ebins, 0.0));
    for (int a1 = 0; a1 < L; ++a1)
        for (int a2 = 0; a2 < L; ++a2)
            for (int a3 = 0; a3 < L; ++a3) {
                const TorusPoint v(static_cast<double>(a1) / L,
                                   static_cast<double>(a2) / L,
                                   static_cast<double>(a3) / L);
                int eb = static_cast<int>(dispersion_energy(v) / 6.0 * n_ebins);
                if (eb >= n_ebins) eb = n_ebins - 1;
                const auto slice = wigner_position_slice(w, {a1, a2, a3});
                const int n = 2 * L;
                for (int m1 = 0; m1 < n; m1 += 2)
                    for (int m2 = 0; m2 < n; m2 += 2)
                        for (int m3 = 0; m3 < n; m3 += 2) {
                            const double val =
                                slice[(static_cast<std::size_t>(m1) * n + m2) * n + m3];
                            acc[(static_cast<std::size_t>(m1 / 2) * L + m2 / 2) * L +
                                m3 / 2][eb] += val * wv;
                        }
            }
    for (int x1 = 0; x1 < L; ++x1)
        for (int x2 = 0; x2 < L; ++x2)
            for (int x3 = 0; x3 < L; ++x3)
                for (int eb = 0; eb < n_ebins; ++eb) {
                    const double val =
                        acc[(static_cast<std::size_t>(x1) * L + x2) * L + x3][eb];
                    if (val == 0.0) continue;
                    out << eps * x1 << ',' << eps * x2 << ',' << eps * x3 << ',' << eb
                        << ',' << val << '\n';
                }
}

}  // namespace qdlab

#endif
