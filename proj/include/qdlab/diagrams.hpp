#ifndef QDLAB_DIAGRAMS_HPP
#define QDLAB_DIAGRAMS_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "qdlab/dispersion.hpp"
#include "qdlab/fft.hpp"
#include "qdlab/grid.hpp"
#include "qdlab/rng.hpp"
#include "qdlab/schrodinger.hpp"
#include "qdlab/spectral.hpp"
#include "qdlab/torus.hpp"
#include "qdlab/wigner.hpp"

namespace qdlab {

// Kinetic-scaling bookkeeping: everything derived from (lambda, kappa, T,
// delta) on demand so the pieces can never drift apart.  eta may be
// overridden within [lambda^{2+4 kappa}, lambda^{2+kappa}].
struct ExperimentScale {
    double lambda = 0.1;
    double kappa = 1.0 / 12.0;
    double T = 1.0;
    double delta = 0.1;

    ExperimentScale(double lambda_, double kappa_, double T_, double delta_ = 0.1)
        : lambda(lambda_), kappa(kappa_), T(T_), delta(delta_) {
        if (!(lambda > 0.0 && lambda < 1.0))
            throw std::invalid_argument("ExperimentScale: lambda in (0,1) required");
        if (!(kappa > 0.0)) throw std::invalid_argument("ExperimentScale: kappa > 0 required");
        if (!(T >= 0.0)) throw std::invalid_argument("ExperimentScale: T >= 0 required");
        if (!(delta > 0.0)) throw std::invalid_argument("ExperimentScale: delta > 0 required");
    }

    double eps() const { return std::pow(lambda, 2.0 + kappa / 2.0); }
    double eta() const {
        return eta_override_ > 0.0 ? eta_override_ : std::pow(lambda, 2.0 + kappa);
    }
    double t() const { return std::pow(lambda, -2.0 - kappa) * T; }
    int K() const {
        return static_cast<int>(std::floor(std::pow(lambda, -delta) *
                                           (lambda * lambda * t())));
    }

    void override_eta(double eta_new) {
        const double lo = std::pow(lambda, 2.0 + 4.0 * kappa);
        const double hi = std::pow(lambda, 2.0 + kappa);
        if (!(eta_new >= lo && eta_new <= hi))
            throw std::invalid_argument("ExperimentScale: eta outside admissible range");
        eta_override_ = eta_new;
    }

  private:
    double eta_override_ = 0.0;
};

namespace detail {

inline double factorial(int n) {
    double f = 1.0;
    for (int j = 2; j <= n; ++j) f *= j;
    return f;
}

inline double binomial(int n, int k) {
    return factorial(n) / (factorial(k) * factorial(n - k));
}

// Divided difference of f(alpha) = e^{i t alpha} over the given nodes.
// Nodes closer than 1e-8 are merged into confluent (multiple) poles and the
// repeated-pole terms are evaluated through derivatives, so Monte Carlo
// near-collisions stay accurate.
inline Complex exp_divided_difference(std::vector<Complex> nodes, double t) {
    if (nodes.empty())
        throw std::invalid_argument("exp_divided_difference: no nodes");
    std::sort(nodes.begin(), nodes.end(), [](const Complex& a, const Complex& b) {
        if (a.real() != b.real()) return a.real() < b.real();
        return a.imag() < b.imag();
    });
    std::vector<Complex> mu;
    std::vector<int> mult;
    for (const Complex& z : nodes) {
        if (!mu.empty() && std::abs(z - mu.back()) < 1e-8) {
            ++mult.back();
            mu.back() += (z - mu.back()) / static_cast<double>(mult.back());
        } else {
            mu.push_back(z);
            mult.push_back(1);
        }
    }

    const int nc = static_cast<int>(mu.size());
    Complex sum{0.0, 0.0};
    for (int i = 0; i < nc; ++i) {
        const int m = mult[i];
        // g(alpha) = e^{i t alpha} prod_{l != i} (alpha - mu_l)^{-mult_l};
        // the term is g^{(m-1)}(mu_i) / (m-1)!.
        Complex g0 = std::exp(Complex(0.0, t) * mu[i]);
        for (int l = 0; l < nc; ++l)
            if (l != i) g0 /= std::pow(mu[i] - mu[l], mult[l]);
        std::vector<Complex> gd(m);
        gd[0] = g0;
        if (m > 1) {
            // h = g'/g and its derivatives at mu_i
            std::vector<Complex> h(m - 1);
            h[0] = Complex(0.0, t);
            for (int l = 0; l < nc; ++l)
                if (l != i) h[0] -= static_cast<double>(mult[l]) / (mu[i] - mu[l]);
            double sign = -1.0;
            for (int s = 1; s < m - 1; ++s) {
                Complex v{0.0, 0.0};
                for (int l = 0; l < nc; ++l)
                    if (l != i)
                        v -= static_cast<double>(mult[l]) * sign * factorial(s) /
                             std::pow(mu[i] - mu[l], s + 1);
                h[s] = v;
                sign = -sign;
            }
            for (int r = 0; r + 1 < m; ++r) {
                Complex v{0.0, 0.0};
                for (int s = 0; s <= r; ++s) v += binomial(r, s) * h[s] * gd[r - s];
                gd[r + 1] = v;
            }
        }
        sum += gd[m - 1] / factorial(m - 1);
    }
    return sum;
}

}  // namespace detail

// (2 pi)^{-1} int e^{i alpha t} prod_j (alpha - nodes_j - i eta)^{-1} d alpha,
// all poles in the upper half-plane, evaluated as the residue sum
// i sum_j e^{it(nodes_j + i eta)} prod_{l != j} (nodes_j - nodes_l)^{-1}.
inline Complex residue_kernel(const std::vector<Complex>& omega_bar, double t,
                              double eta) {
    if (omega_bar.empty())
        throw std::invalid_argument("residue_kernel: empty momentum list");
    std::vector<Complex> nodes(omega_bar);
    for (auto& z : nodes) {
        if (z.imag() < -1e-12)
            throw std::invalid_argument("residue_kernel: pole below the real axis");
        z += Complex(0.0, eta);
    }
    return Complex(0.0, 1.0) * detail::exp_divided_difference(nodes, t);
}

inline Complex residue_kernel(const std::vector<TorusPoint>& p, double t, double eta,
                              const SpectralTables& tables, double lambda) {
    std::vector<Complex> nodes;
    nodes.reserve(p.size());
    for (const auto& q : p) nodes.push_back(std::conj(tables.omega(q, lambda)));
    return residue_kernel(nodes, t, eta);
}

struct LadderEstimate {
    double V = 0.0;
    double std_err = 0.0;
    bool flagged = false;  // relative stderr above 50%
};

namespace detail {

// Plain estimator: lambda^{2k} e^{2 t eta} |K|^2 averaged over momentum draws.
// Kept as a cross-check; its samples are heavy-tailed at long times, so the
// table-based ladder_value below is the production path.
inline LadderEstimate ladder_value_direct(int k, const ExperimentScale& sc,
                                          const ComplexField& psi0, std::int64_t n_mc,
                                          std::uint64_t seed,
                                          const SpectralTables& tables) {
    if (k < 0 || k > sc.K())
        throw std::invalid_argument("ladder_value: k outside [0, K]");
    if (n_mc <= 0) throw std::invalid_argument("ladder_value: n_mc > 0 required");
    const ComplexField ph = psi0.rep == Representation::momentum
                                ? psi0
                                : fourier_forward(psi0);
    const auto& g = ph.grid;
    std::vector<double> cdf(ph.values.size());
    double total = 0.0;
    for (std::size_t i = 0; i < ph.values.size(); ++i) {
        total += std::norm(ph.values[i]) * g.momentum_weight();
        cdf[i] = total;
    }
    if (total <= 0.0) throw std::invalid_argument("ladder_value: psi0 vanishes");

    const double t = sc.t(), eta = sc.eta();
    const double pref = total * std::pow(sc.lambda, 2 * k);
    const double boost = std::exp(t * eta);
    Rng rng(seed, 9, static_cast<std::uint64_t>(k));
    double sum = 0.0, sum2 = 0.0;
    std::vector<Complex> nodes(k + 1);
    for (std::int64_t s = 0; s < n_mc; ++s) {
        const double u = rng.uniform() * total;
        const std::size_t cell =
            std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin();
        const std::size_t ci = std::min(cell, cdf.size() - 1);
        const int L = g.L;
        const int m1 = static_cast<int>(ci / (static_cast<std::size_t>(L) * L));
        const int m2 = static_cast<int>((ci / L) % L);
        const int m3 = static_cast<int>(ci % L);
        nodes[0] = std::conj(tables.omega(g.momentum(m1, m2, m3), sc.lambda));
        for (int j = 1; j <= k; ++j)
            nodes[j] = std::conj(tables.omega(TorusPoint::random(rng), sc.lambda));
        const Complex kv = residue_kernel(nodes, t, eta) * boost;
        const double val = pref * std::norm(kv);
        sum += val;
        sum2 += val * val;
    }
    LadderEstimate r;
    const double n = static_cast<double>(n_mc);
    r.V = sum / n;
    r.std_err = std::sqrt(std::max(0.0, sum2 / n - r.V * r.V) / n);
    r.flagged = std::abs(r.V) > 0.0 && r.std_err > 0.5 * std::abs(r.V);
    return r;
}

// Weighted energy levels of one momentum factor: statistical weight,
// level shifted by the real self-energy, and the (non-positive) decay rate
// coming from the imaginary part.
struct EnergyPoint {
    double w = 0.0;
    double e = 0.0;
    double rate = 0.0;
};

// chi(a, b) = sum_j w_j exp(i t (a - b) e_j + t (a + b) rate_j) tabulated on
// a (tau = a - b, s = a + b) grid: cubic interpolation in tau with the mean
// frequency factored out, linear in s.  An optional smear width spreads each
// level uniformly over a band of that width (a sinc factor in tau), which
// turns a histogram of levels back into a piecewise-constant density.
class ChiTable {
  public:
    ChiTable(const std::vector<EnergyPoint>& pts, double t, double smear)
        : t_(t) {
        if (pts.empty()) throw std::invalid_argument("ChiTable: no energy points");
        double wsum = 0.0, mean = 0.0;
        for (const auto& p : pts) {
            wsum += p.w;
            mean += p.w * p.e;
        }
        e0_ = mean / wsum;
        double dev = 0.0;
        for (const auto& p : pts) dev = std::max(dev, std::abs(p.e - e0_));
        dtau_ = 0.4 / std::max(8.0, t * dev);
        nt_ = static_cast<int>(std::ceil(2.0 / dtau_)) + 5;
        tau0_ = -0.5 * (nt_ - 1) * dtau_;
        data_.assign(static_cast<std::size_t>(ns_) * nt_, Complex(0.0, 0.0));
        for (const auto& p : pts) {
            const double f = t * (p.e - e0_);
            const Complex rot = std::polar(1.0, f * dtau_);
            for (int row = 0; row < ns_; ++row) {
                const double s = row * ds_;
                Complex cur = std::polar(p.w * std::exp(t * p.rate * s), f * tau0_);
                Complex* d = &data_[static_cast<std::size_t>(row) * nt_];
                for (int i = 0; i < nt_; ++i) {
                    d[i] += cur;
                    cur *= rot;
                }
            }
        }
        if (smear > 0.0) {
            for (int i = 0; i < nt_; ++i) {
                const double x = 0.5 * t * (tau0_ + i * dtau_) * smear;
                const double f = std::abs(x) < 1e-12 ? 1.0 : std::sin(x) / x;
                for (int row = 0; row < ns_; ++row)
                    data_[static_cast<std::size_t>(row) * nt_ + i] *= f;
            }
        }
    }

    Complex operator()(double a, double b) const {
        const double tau = a - b;
        const double s = std::clamp(a + b, 0.0, 2.0);
        const double y = s / ds_;
        const int j = std::min(static_cast<int>(y), ns_ - 2);
        const double fy = y - j;
        const double x = (tau - tau0_) / dtau_;
        const int i = std::clamp(static_cast<int>(x), 1, nt_ - 3);
        const double fx = x - i;
        const Complex lo = cubic(j, i, fx), hi = cubic(j + 1, i, fx);
        return (lo * (1.0 - fy) + hi * fy) * std::polar(1.0, t_ * tau * e0_);
    }

  private:
    Complex cubic(int row, int i, double f) const {
        const Complex* d = &data_[static_cast<std::size_t>(row) * nt_ + i];
        const Complex p0 = d[-1], p1 = d[0], p2 = d[1], p3 = d[2];
        return 0.5 * (2.0 * p1 + f * ((p2 - p0) +
                                      f * ((2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) +
                                           f * (3.0 * (p1 - p2) + p3 - p0))));
    }

    double t_ = 0.0;
    double e0_ = 0.0;
    int nt_ = 0;
    static constexpr int ns_ = 49;
    static constexpr double ds_ = 2.0 / (ns_ - 1);
    double tau0_ = 0.0, dtau_ = 0.0;
    std::vector<Complex> data_;
};

// |psi_hat|^2 collapsed onto its distinct kinetic energies; weights sum to
// the state's mass.
inline std::vector<EnergyPoint> state_energy_points(const ComplexField& psi_hat,
                                                    double lambda,
                                                    const SpectralTables& tables) {
    const auto& g = psi_hat.grid;
    std::vector<std::pair<double, double>> ew;
    for (int m1 = 0; m1 < g.L; ++m1)
        for (int m2 = 0; m2 < g.L; ++m2)
            for (int m3 = 0; m3 < g.L; ++m3) {
                const double w =
                    std::norm(psi_hat.at(m1, m2, m3)) * g.momentum_weight();
                if (w <= 0.0) continue;
                ew.push_back({dispersion_energy(g.momentum(m1, m2, m3)), w});
            }
    std::sort(ew.begin(), ew.end());
    std::vector<EnergyPoint> pts;
    double last_e = -1.0;
    for (const auto& [e, w] : ew) {
        if (!pts.empty() && e - last_e < 1e-12) {
            pts.back().w += w;
            continue;
        }
        const Complex th = tables.theta_interp(e);
        const double l2 = lambda * lambda;
        pts.push_back({w, e + l2 * th.real(), l2 * th.imag()});
        last_e = e;
    }
    return pts;
}

// Density-of-states histogram as energy levels of a uniform momentum draw;
// weights normalized to 1.
inline std::vector<EnergyPoint> uniform_energy_points(double lambda,
                                                      const SpectralTables& tables) {
    const double l2 = lambda * lambda;
    std::vector<EnergyPoint> pts;
    double wsum = 0.0;
    for (std::size_t b = 0; b < tables.centers.size(); ++b) {
        const double w = tables.phi[b] * tables.de;
        if (w <= 0.0) continue;
        pts.push_back({w, tables.centers[b] + l2 * tables.R[b],
                       -kPi * l2 * tables.phi[b]});
        wsum += w;
    }
    if (pts.empty())
        throw std::invalid_argument("uniform_energy_points: empty density table");
    for (auto& p : pts) p.w /= wsum;
    return pts;
}

}  // namespace detail

// V_lambda(t, k): lambda^{2k} e^{2 t eta} E |K(t, p_1..p_{k+1})|^2 with p_1
// drawn from |psi0_hat|^2 and the rest uniform on the torus.  Evaluated
// through the simplex form of the kernel: writing e^{t eta} K as (it)^k times
// the integral of exp(i t u . conj(omega)) over the standard simplex, the
// momentum expectations factor per simplex coordinate into the 1-d energy
// integrals tabulated by ChiTable, leaving a bounded integrand over a pair of
// simplices.  The pair is sampled with the difference coordinates drawn from
// a uniform/Cauchy mixture concentrated at the kernel's correlation scale.
inline LadderEstimate ladder_value(int k, const ExperimentScale& sc,
                                   const ComplexField& psi0, std::int64_t n_mc,
                                   std::uint64_t seed, const SpectralTables& tables) {
    if (k < 0 || k > sc.K())
        throw std::invalid_argument("ladder_value: k outside [0, K]");
    if (n_mc <= 0) throw std::invalid_argument("ladder_value: n_mc > 0 required");
    const ComplexField ph = psi0.rep == Representation::momentum
                                ? psi0
                                : fourier_forward(psi0);
    const auto spts = detail::state_energy_points(ph, sc.lambda, tables);
    if (spts.empty()) throw std::invalid_argument("ladder_value: psi0 vanishes");
    double total = 0.0;
    for (const auto& p : spts) total += p.w;
    if (total <= 0.0) throw std::invalid_argument("ladder_value: psi0 vanishes");

    const double t = sc.t();
    LadderEstimate r;
    if (k == 0) {
        // single coordinate pinned at u = u' = 1: deterministic
        double v = 0.0;
        for (const auto& p : spts) v += p.w * std::exp(2.0 * t * p.rate);
        r.V = v;
        return r;
    }

    const detail::ChiTable chi1(spts, t, 0.0);
    const detail::ChiTable chi(detail::uniform_energy_points(sc.lambda, tables), t,
                               tables.de);

    double pref = total;
    for (int j = 1; j <= k; ++j)
        pref *= sc.lambda * sc.lambda * t * t / static_cast<double>(j);
    const double gam = 1.0 / std::max(t, 1.0);
    const auto qpdf = [gam](double d) {
        const double uni = std::abs(d) <= 1.0 ? 0.3 * 0.5 : 0.0;
        return uni + 0.7 * gam / (kPi * (d * d + gam * gam));
    };

    Rng rng(seed, 9, static_cast<std::uint64_t>(k));
    double sum = 0.0, sum2 = 0.0;
    std::vector<double> u(k + 1), up(k + 1), del(k);
    for (std::int64_t s = 0; s < n_mc; ++s) {
        double tot = 0.0;
        for (int j = 0; j <= k; ++j) {
            u[j] = -std::log(std::max(rng.uniform(), 1e-300));
            tot += u[j];
        }
        for (int j = 0; j <= k; ++j) u[j] /= tot;
        double qw = 1.0, dsum = 0.0;
        for (int j = 0; j < k; ++j) {
            const double d = rng.uniform() < 0.3
                                 ? rng.uniform(-1.0, 1.0)
                                 : gam * std::tan(kPi * (rng.uniform() - 0.5));
            del[j] = d;
            dsum += d;
            qw *= qpdf(d);
        }
        bool ok = true;
        for (int j = 0; j < k && ok; ++j) {
            up[j] = u[j] + del[j];
            ok = up[j] >= 0.0;
        }
        if (ok) {
            up[k] = u[k] - dsum;
            ok = up[k] >= 0.0;
        }
        double val = 0.0;
        if (ok) {
            Complex F = chi1(u[k], up[k]);
            for (int j = 0; j < k; ++j) F *= chi(u[j], up[j]);
            val = pref * F.real() / qw;
        }
        sum += val;
        sum2 += val * val;
    }
    const double n = static_cast<double>(n_mc);
    r.V = sum / n;
    r.std_err = std::sqrt(std::max(0.0, sum2 / n - r.V * r.V) / n);
    r.flagged = std::abs(r.V) > 0.0 && r.std_err > 0.5 * std::abs(r.V);
    return r;
}

struct LadderObservableEstimate {
    Complex W{0.0, 0.0};
    double std_err = 0.0;
    bool flagged = false;
};

// W_lambda(t, k, O): Monte Carlo over (xi, v_1..v_{k+1}) of the factorized
// integrand, with the alpha/beta integrals done by residue_kernel at the
// shifted momenta v_j +- eps xi / 2.  The xi sum runs over the Wigner grid
// points with |xi|_inf <= lambda^{-delta}.  k = 0 is evaluated by the
// explicit free-transport formula and is deterministic.
inline LadderObservableEstimate ladder_observable_value(
    int k, const ExperimentScale& sc, const ComplexField& psi0, const Observable& obs,
    std::int64_t n_mc, std::uint64_t seed, const SpectralTables& tables) {
    if (k < 0 || k > sc.K())
        throw std::invalid_argument("ladder_observable_value: k outside [0, K]");
    const ComplexField pos = psi0.rep == Representation::position
                                 ? psi0
                                 : fourier_inverse(psi0);
    const WignerField w = wigner_transform(pos);
    const int L = w.L;
    const double eps = sc.eps();
    const double wxi = 1.0 / (eps * L * eps * L * eps * L);
    const double wv = 1.0 / (static_cast<double>(L) * L * L);
    const double xi_max = std::pow(sc.lambda, -sc.delta);

    std::vector<std::array<int, 3>> xi_set;
    if (obs.xi_delta) {
        xi_set.push_back({0, 0, 0});
    } else {
        for (int b1 = -L; b1 < L; ++b1)
            for (int b2 = -L; b2 < L; ++b2)
                for (int b3 = -L; b3 < L; ++b3) {
                    const double m = std::max({std::abs(b1), std::abs(b2), std::abs(b3)}) /
                                     (eps * L);
                    if (m <= xi_max) xi_set.push_back({b1, b2, b3});
                }
    }
    if (xi_set.empty())
        throw std::invalid_argument("ladder_observable_value: empty xi range");

    const double t = sc.t(), eta = sc.eta();
    LadderObservableEstimate r;

    if (k == 0) {
        Complex total{0.0, 0.0};
        for (const auto& b : xi_set) {
            const std::array<double, 3> xi = {b[0] / (eps * L), b[1] / (eps * L),
                                              b[2] / (eps * L)};
            const Complex xf = obs.xi_delta ? Complex(1.0 / wxi, 0.0)
                                            : obs.x_fourier(xi);
            if (std::abs(xf) < 1e-300) continue;
            for (int a1 = 0; a1 < L; ++a1)
                for (int a2 = 0; a2 < L; ++a2)
                    for (int a3 = 0; a3 < L; ++a3) {
                        const TorusPoint v(static_cast<double>(a1) / L,
                                           static_cast<double>(a2) / L,
                                           static_cast<double>(a3) / L);
                        const auto d = dispersion(v);
                        const double drift =
                            t * eps *
                            (xi[0] * d.gradient[0] + xi[1] * d.gradient[1] +
                             xi[2] * d.gradient[2]);
                        const double decay = std::exp(
                            2.0 * t * sc.lambda * sc.lambda *
                            tables.theta_interp(d.energy).imag());
                        total += wxi * wv * xf * obs.v_value(v) *
                                 Complex(std::cos(drift), std::sin(drift)) * decay *
                                 std::conj(w.hat(b, {a1, a2, a3}));
                    }
        }
        r.W = total;
        return r;
    }

    if (n_mc <= 0)
        throw std::invalid_argument("ladder_observable_value: n_mc > 0 required");
    // importance-sample xi by the observable's envelope: on coarse grids the
    // envelope concentrates on a handful of points and uniform sampling wastes
    // nearly every draw
    std::vector<double> xi_cdf(xi_set.size());
    double xi_total = 0.0;
    for (std::size_t i = 0; i < xi_set.size(); ++i) {
        const auto& b = xi_set[i];
        const std::array<double, 3> xi = {b[0] / (eps * L), b[1] / (eps * L),
                                          b[2] / (eps * L)};
        xi_total += obs.xi_delta ? 1.0 : std::abs(obs.x_fourier(xi));
        xi_cdf[i] = xi_total;
    }
    if (xi_total <= 0.0)
        throw std::invalid_argument(
            "ladder_observable_value: observable envelope vanishes on the grid");
    const double pref = xi_total * wxi * std::pow(sc.lambda, 2 * k);
    const double boost = std::exp(t * eta);
    Rng rng(seed, 10, static_cast<std::uint64_t>(k));
    Complex sum{0.0, 0.0};
    double sum2 = 0.0;
    std::vector<TorusPoint> mom(k + 1);
    std::vector<Complex> np(k + 1), nm(k + 1);
    for (std::int64_t s = 0; s < n_mc; ++s) {
        const double u = rng.uniform() * xi_total;
        const std::size_t bi =
            std::lower_bound(xi_cdf.begin(), xi_cdf.end(), u) - xi_cdf.begin();
        const auto& b = xi_set[std::min(bi, xi_set.size() - 1)];
        const std::array<double, 3> xi = {b[0] / (eps * L), b[1] / (eps * L),
                                          b[2] / (eps * L)};
        const int a1 = static_cast<int>(rng.below(L));
        const int a2 = static_cast<int>(rng.below(L));
        const int a3 = static_cast<int>(rng.below(L));
        mom[0] = TorusPoint(static_cast<double>(a1) / L, static_cast<double>(a2) / L,
                            static_cast<double>(a3) / L);
        for (int j = 1; j <= k; ++j) mom[j] = TorusPoint::random(rng);
        const TorusPoint half(0.5 * eps * xi[0], 0.5 * eps * xi[1], 0.5 * eps * xi[2]);
        for (int j = 0; j <= k; ++j) {
            np[j] = std::conj(tables.omega(mom[j] + half, sc.lambda));
            nm[j] = std::conj(tables.omega(mom[j] - half, sc.lambda));
        }
        const Complex kp = residue_kernel(np, t, eta) * boost;
        const Complex km = residue_kernel(nm, t, eta) * boost;
        // importance weight: the sampling density is |x_fourier|, leaving the
        // phase; the delta mode samples its single point uniformly
        const Complex imp = obs.xi_delta
                                ? Complex(1.0 / wxi, 0.0)
                                : [&] {
                                      const Complex xf = obs.x_fourier(xi);
                                      return xf / std::abs(xf);
                                  }();
        const Complex val = pref * imp * obs.v_value(mom[k]) *
                            std::conj(w.hat(b, {a1, a2, a3})) * kp * std::conj(km);
        sum += val;
        sum2 += std::norm(val);
    }
    const double n = static_cast<double>(n_mc);
    r.W = sum / n;
    r.std_err = std::sqrt(std::max(0.0, sum2 / n - std::norm(r.W)) / n);
    r.flagged = std::abs(r.W) > 0.0 && r.std_err > 0.5 * std::abs(r.W);
    return r;
}

// c(n) = sum over connected spanning subgraphs of K_n of (-1)^{#edges},
// by brute force over all 2^{n(n-1)/2} edge subsets.
inline long long connected_graph_coefficient(int n) {
    if (n < 1 || n > 6)
        throw std::invalid_argument("connected_graph_coefficient: n in [1,6] required");
    if (n == 1) return 1;
    std::vector<std::array<int, 2>> edges;
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) edges.push_back({i, j});
    const int ne = static_cast<int>(edges.size());
    long long sum = 0;
    for (std::uint32_t mask = 0; mask < (1u << ne); ++mask) {
        // connectivity over all n vertices
        std::array<int, 6> parent{};
        for (int i = 0; i < n; ++i) parent[i] = i;
        auto find = [&](int x) {
            while (parent[x] != x) x = parent[x] = parent[parent[x]];
            return x;
        };
        int bits = 0;
        for (int e = 0; e < ne; ++e)
            if (mask & (1u << e)) {
                ++bits;
                parent[find(edges[e][0])] = find(edges[e][1]);
            }
        bool connected = true;
        for (int i = 1; i < n && connected; ++i) connected = find(i) == find(0);
        if (connected) sum += (bits % 2 == 0) ? 1 : -1;
    }
    return sum;
}

namespace detail {

// all set partitions of {0..k-1} as block-index vectors
inline void partitions_rec(int j, int k, std::vector<int>& assign, int nblocks,
                           std::vector<std::vector<int>>& out) {
    if (j == k) {
        out.push_back(assign);
        return;
    }
    for (int b = 0; b <= nblocks; ++b) {
        assign[j] = b;
        partitions_rec(j + 1, k, assign, std::max(nblocks, b + 1), out);
    }
}

inline std::vector<std::vector<int>> set_partitions(int k) {
    std::vector<std::vector<int>> out;
    std::vector<int> assign(k, 0);
    partitions_rec(0, k, assign, 0, out);
    return out;
}

}  // namespace detail

// Checks sum over distinct gamma-tuples in (Z_M^3)^k of prod e^{2 pi i q_j
// gamma_j / M} against the partition expansion with the c(n) coefficients and
// lattice deltas.  q entries are integer momenta mod M.
inline bool verify_moment_identity(int k, const std::vector<std::array<int, 3>>& q,
                                   int M) {
    if (k < 1 || k > 3)
        throw std::invalid_argument("verify_moment_identity: k in [1,3] required");
    if (static_cast<int>(q.size()) != k)
        throw std::invalid_argument("verify_moment_identity: q size mismatch");
    if (M < 2) throw std::invalid_argument("verify_moment_identity: M >= 2 required");

    const int cells = M * M * M;
    auto site = [&](int idx) {
        return std::array<int, 3>{idx / (M * M), (idx / M) % M, idx % M};
    };
    auto chr = [&](const std::array<int, 3>& qq, const std::array<int, 3>& g) {
        const double ph =
            kTwoPi * (qq[0] * g[0] + qq[1] * g[1] + qq[2] * g[2]) / M;
        return Complex(std::cos(ph), std::sin(ph));
    };

    Complex lhs{0.0, 0.0};
    std::vector<int> gamma(k, 0);
    const long long tuples = [&] {
        long long t = 1;
        for (int j = 0; j < k; ++j) t *= cells;
        return t;
    }();
    for (long long code = 0; code < tuples; ++code) {
        long long c = code;
        bool distinct = true;
        for (int j = 0; j < k; ++j) {
            gamma[j] = static_cast<int>(c % cells);
            c /= cells;
            for (int i = 0; i < j; ++i)
                if (gamma[i] == gamma[j]) distinct = false;
        }
        if (!distinct) continue;
        Complex term{1.0, 0.0};
        for (int j = 0; j < k; ++j) term *= chr(q[j], site(gamma[j]));
        lhs += term;
    }

    Complex rhs{0.0, 0.0};
    for (const auto& assign : detail::set_partitions(k)) {
        const int nb = 1 + *std::max_element(assign.begin(), assign.end());
        Complex term{1.0, 0.0};
        for (int b = 0; b < nb; ++b) {
            int sz = 0;
            std::array<int, 3> qs{0, 0, 0};
            for (int j = 0; j < k; ++j)
                if (assign[j] == b) {
                    ++sz;
                    for (int c = 0; c < 3; ++c) qs[c] += q[j][c];
                }
            const bool zero = qs[0] % M == 0 && qs[1] % M == 0 && qs[2] % M == 0;
            term *= static_cast<double>(connected_graph_coefficient(sz)) *
                    (zero ? static_cast<double>(cells) : 0.0);
        }
        rhs += term;
    }
    return std::abs(lhs - rhs) <= 1e-9 * std::max(1.0, std::abs(lhs));
}

// deg(sigma) = k - #(ladder indices); j is a ladder index iff
// sigma(j) - 1 is in {sigma~(j-1), sigma~(j+1)} with the boundary extension
// sigma~(0) = 0, sigma~(k+1) = k+1.  sigma is 1-based.
inline int permutation_degree(const std::vector<int>& sigma) {
    const int k = static_cast<int>(sigma.size());
    if (k < 1) throw std::invalid_argument("permutation_degree: k >= 1 required");
    auto ext = [&](int j) {
        if (j == 0) return 0;
        if (j == k + 1) return k + 1;
        return sigma[j - 1];
    };
    int ladder = 0;
    for (int j = 1; j <= k; ++j) {
        const int v = sigma[j - 1] - 1;
        if (v == ext(j - 1) || v == ext(j + 1)) ++ladder;
    }
    return k - ladder;
}

// histogram of deg over all of S_k (k <= 8 to keep k! enumerable)
inline std::vector<std::int64_t> degree_distribution(int k) {
    if (k < 1 || k > 8)
        throw std::invalid_argument("degree_distribution: k in [1,8] required");
    std::vector<std::int64_t> counts(k + 1, 0);
    std::vector<int> sigma(k);
    for (int j = 0; j < k; ++j) sigma[j] = j + 1;
    do {
        ++counts[permutation_degree(sigma)];
    } while (std::next_permutation(sigma.begin(), sigma.end()));
    return counts;
}

inline int min_degree_nonidentity(int k) {
    std::vector<int> sigma(k);
    for (int j = 0; j < k; ++j) sigma[j] = j + 1;
    int best = k + 1;
    bool first = true;
    do {
        if (first) {  // identity comes first in lexicographic order
            first = false;
            continue;
        }
        best = std::min(best, permutation_degree(sigma));
    } while (std::next_permutation(sigma.begin(), sigma.end()));
    return best;
}

// ---------------------------------------------------------------------------
// Small-order Duhamel terms on a lattice box (oracle layer).

struct DuhamelConfig {
    double lambda = 0.1;
    double t = 1.0;
    int steps = 64;  // midpoint quadrature points per nesting level
    // renormalized split: free symbol omega(p) = e(p) + lambda^2 theta(e(p))
    // and the -lambda^2 theta counterterm inside the perturbation
    bool renormalized_propagator = false;
    bool theta_counterterm = false;
    const SpectralTables* tables = nullptr;
};

namespace detail {

struct DuhamelWorkspace {
    const LatticeGrid* grid;
    std::vector<Complex> symbol;  // free symbol per momentum cell
    std::vector<Complex> theta;   // theta(e(p)) per cell (renormalized split)
    std::vector<Complex> psi0_hat;
    DuhamelConfig cfg;

    void evolve(std::vector<Complex>& f, double s) const {
        for (std::size_t i = 0; i < f.size(); ++i)
            f[i] *= std::exp(Complex(0.0, -s) * symbol[i]);
    }

    // one application of the perturbation in momentum form
    std::vector<Complex> apply_potential(const std::vector<Complex>& f,
                                         const RandomPotential& V) const {
        ComplexField mom(*grid, Representation::momentum);
        mom.values = f;
        ComplexField pos = fourier_inverse(mom);
        for (std::size_t i = 0; i < pos.values.size(); ++i)
            pos.values[i] *= cfg.lambda * V.values[i];
        auto out = fourier_forward(pos).values;
        if (cfg.theta_counterterm) {
            const double l2 = cfg.lambda * cfg.lambda;
            for (std::size_t i = 0; i < out.size(); ++i)
                out[i] -= l2 * theta[i] * f[i];
        }
        return out;
    }

    // psi_n in momentum form at time s, composite midpoint per nesting level
    std::vector<Complex> term(int n, double s, const RandomPotential& V) const {
        if (n == 0) {
            std::vector<Complex> f = psi0_hat;
            evolve(f, s);
            return f;
        }
        const int m = cfg.steps;
        const double h = s / m;
        std::vector<Complex> acc(psi0_hat.size(), Complex(0.0, 0.0));
        for (int j = 0; j < m; ++j) {
            const double sj = (j + 0.5) * h;
            std::vector<Complex> f = term(n - 1, sj, V);
            f = apply_potential(f, V);
            evolve(f, s - sj);
            for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += f[i];
        }
        const Complex w = Complex(0.0, -1.0) * h;
        for (auto& z : acc) z *= w;
        return acc;
    }
};

inline DuhamelWorkspace make_duhamel_workspace(const ComplexField& psi0,
                                               const DuhamelConfig& cfg) {
    if ((cfg.renormalized_propagator || cfg.theta_counterterm) && !cfg.tables)
        throw std::invalid_argument("duhamel: renormalized split needs spectral tables");
    DuhamelWorkspace ws;
    ws.grid = &psi0.grid;
    ws.cfg = cfg;
    const auto& g = psi0.grid;
    ws.symbol.resize(g.size());
    ws.theta.resize(g.size());
    for (int m1 = 0; m1 < g.L; ++m1)
        for (int m2 = 0; m2 < g.L; ++m2)
            for (int m3 = 0; m3 < g.L; ++m3) {
                const double e = dispersion_energy(g.momentum(m1, m2, m3));
                const std::size_t i = g.index(m1, m2, m3);
                const Complex th =
                    cfg.tables ? cfg.tables->theta_interp(e) : Complex(0.0, 0.0);
                ws.theta[i] = th;
                ws.symbol[i] = cfg.renormalized_propagator
                                   ? Complex(e, 0.0) + cfg.lambda * cfg.lambda * th
                                   : Complex(e, 0.0);
            }
    ws.psi0_hat = (psi0.rep == Representation::momentum ? psi0
                                                        : fourier_forward(psi0))
                      .values;
    return ws;
}

}  // namespace detail

// n-fold expansion term psi_n(t) by iterated midpoint quadrature over the
// time simplex; free factors applied in momentum form via FFT.
inline ComplexField duhamel_term(const ComplexField& psi0, const RandomPotential& V,
                                 int n, const DuhamelConfig& cfg) {
    if (n < 0 || n > 3)
        throw std::invalid_argument("duhamel_term: n in [0,3] required");
    if (cfg.steps < 1) throw std::invalid_argument("duhamel_term: steps >= 1 required");
    if (V.grid.L != psi0.grid.L)
        throw std::invalid_argument("duhamel_term: grid mismatch");
    const auto ws = detail::make_duhamel_workspace(psi0, cfg);
    ComplexField out(psi0.grid, Representation::momentum);
    out.values = ws.term(n, cfg.t, V);
    return fourier_inverse(out);
}

// ||psi^{nr}_{t,1}||^2 for one potential realization: the single-collision
// term with renormalized propagators, time integral done in closed form
// (divided difference of the phase over the two omega values).
inline double nonrepetition_norm_sq_k1(const ComplexField& psi0,
                                       const RandomPotential& V, double lambda,
                                       double t, const SpectralTables& tables) {
    const auto& g = psi0.grid;
    const int L = g.L;
    const ComplexField ph0 =
        psi0.rep == Representation::momentum ? psi0 : fourier_forward(psi0);
    ComplexField vf(g, Representation::position);
    for (std::size_t i = 0; i < vf.values.size(); ++i)
        vf.values[i] = Complex(V.values[i], 0.0);
    const ComplexField vh = fourier_forward(vf);

    std::vector<Complex> omega(g.size()), eph(g.size());
    for (int m1 = 0; m1 < L; ++m1)
        for (int m2 = 0; m2 < L; ++m2)
            for (int m3 = 0; m3 < L; ++m3) {
                const std::size_t i = g.index(m1, m2, m3);
                omega[i] = tables.omega(g.momentum(m1, m2, m3), lambda);
                eph[i] = std::exp(Complex(0.0, -t) * omega[i]);
            }

    // psi1_hat(m) = -i lambda L^{-3} sum_k Vhat(k) psi0_hat(m-k) S(m, m-k),
    // S = int_0^t e^{-i(t-s) omega_m} e^{-is omega_q} ds
    const double invL3 = 1.0 / (static_cast<double>(L) * L * L);
    double nrm = 0.0;
    for (int m1 = 0; m1 < L; ++m1)
        for (int m2 = 0; m2 < L; ++m2)
            for (int m3 = 0; m3 < L; ++m3) {
                const std::size_t im = g.index(m1, m2, m3);
                Complex acc{0.0, 0.0};
                for (int k1 = 0; k1 < L; ++k1)
                    for (int k2 = 0; k2 < L; ++k2)
                        for (int k3 = 0; k3 < L; ++k3) {
                            const std::size_t ik = g.index(k1, k2, k3);
                            const std::size_t iq = g.index(
                                (m1 - k1 + L) % L, (m2 - k2 + L) % L, (m3 - k3 + L) % L);
                            const Complex a = ph0.values[iq];
                            if (a == Complex(0.0, 0.0)) continue;
                            const Complex d = omega[im] - omega[iq];
                            Complex s;
                            if (std::abs(d) < 1e-10) {
                                s = t * eph[im];
                            } else {
                                s = (eph[iq] - eph[im]) / (Complex(0.0, 1.0) * d);
                            }
                            acc += vh.values[ik] * a * s;
                        }
                nrm += std::norm(lambda * invL3 * acc) * g.momentum_weight();
            }
    return nrm;
}

// ||psi^{nr}_{t,2}||^2 for one realization: the full two-collision term
// (renormalized propagators, no theta labels) minus the repeated-site part,
// both by nested midpoint quadrature.
inline double nonrepetition_norm_sq_k2(const ComplexField& psi0,
                                       const RandomPotential& V, double lambda,
                                       double t, int steps,
                                       const SpectralTables& tables) {
    DuhamelConfig cfg;
    cfg.lambda = lambda;
    cfg.t = t;
    cfg.steps = steps;
    cfg.renormalized_propagator = true;
    cfg.theta_counterterm = false;
    cfg.tables = &tables;
    const auto ws = detail::make_duhamel_workspace(psi0, cfg);
    const auto& g = psi0.grid;

    std::vector<Complex> full = ws.term(2, t, V);

    // repeated-site part: both insertions at the same lattice site; the
    // middle propagator collapses to its (site-independent) diagonal
    // G(tau) = L^{-3} sum_p e^{-i tau omega(p)}
    auto diag = [&](double tau) {
        Complex s{0.0, 0.0};
        for (const Complex& z : ws.symbol) s += std::exp(Complex(0.0, -tau) * z);
        return s / static_cast<double>(ws.symbol.size());
    };
    std::vector<Complex> same(g.size(), Complex(0.0, 0.0));
    const double h = t / steps;
    for (int j = 0; j < steps; ++j) {
        const double s = (j + 0.5) * h;  // time of the second insertion
        for (int i = 0; i < steps; ++i) {
            const double u = s * (i + 0.5) / steps;  // first insertion
            std::vector<Complex> f = ws.psi0_hat;
            ws.evolve(f, u);
            ComplexField mom(g, Representation::momentum);
            mom.values = f;
            ComplexField pos = fourier_inverse(mom);
            const Complex gmid = diag(s - u);
            for (std::size_t x = 0; x < pos.values.size(); ++x)
                pos.values[x] *= lambda * lambda * V.values[x] * V.values[x] * gmid;
            auto fh = fourier_forward(pos).values;
            ws.evolve(fh, t - s);
            const Complex w = -h * (s / steps);  // (-i)^2 * dh * du
            for (std::size_t x = 0; x < same.size(); ++x) same[x] += w * fh[x];
        }
    }

    double nrm = 0.0;
    for (std::size_t i = 0; i < full.size(); ++i)
        nrm += std::norm(full[i] - same[i]) * g.momentum_weight();
    return nrm;
}

// ---------------------------------------------------------------------------
// Persistence

inline void save_ladder_csv(const std::vector<LadderEstimate>& vals,
                            const ExperimentScale& sc, const std::string& path) {
    std::ofstream out(path);
    out << "k,V,stderr,lambda,T,eta\n";
    out.precision(17);
    for (std::size_t k = 0; k < vals.size(); ++k)
        out << k << ',' << vals[k].V << ',' << vals[k].std_err << ',' << sc.lambda
            << ',' << sc.T << ',' << sc.eta() << '\n';
}

inline void save_coefficients_csv(int n_max, const std::string& path) {
    std::ofstream out(path);
    out << "n,c_n\n";
    for (int n = 1; n <= n_max; ++n)
        out << n << ',' << connected_graph_coefficient(n) << '\n';
}

}  // namespace qdlab

#endif
