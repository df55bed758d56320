#ifndef QDLAB_HEAT_HPP
#define QDLAB_HEAT_HPP

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "qdlab/boltzmann.hpp"
#include "qdlab/diagrams.hpp"
#include "qdlab/dispersion.hpp"
#include "qdlab/fft.hpp"
#include "qdlab/grid.hpp"
#include "qdlab/rng.hpp"
#include "qdlab/schrodinger.hpp"
#include "qdlab/spectral.hpp"
#include "qdlab/torus.hpp"
#include "qdlab/wigner.hpp"

namespace qdlab {

namespace detail {

// symmetric 3x3 helpers
inline double sym3_det(const double m[3][3]) {
    return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
           m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
           m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

inline void sym3_inverse(const double m[3][3], double out[3][3]) {
    const double d = sym3_det(m);
    if (!(std::abs(d) > 0.0))
        throw std::invalid_argument("sym3_inverse: singular matrix");
    out[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / d;
    out[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / d;
    out[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / d;
    out[1][0] = out[0][1];
    out[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / d;
    out[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / d;
    out[2][0] = out[0][2];
    out[2][1] = out[1][2];
    out[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / d;
}

inline double quad_form(const double m[3][3], const std::array<double, 3>& x) {
    double s = 0.0;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) s += x[i] * m[i][j] * x[j];
    return s;
}

}  // namespace detail

// One energy shell of the macroscopic limit: the projected initial mass
// density g(e) (a density in e whose integral is the state's mass), the
// velocity diffusion matrix D(e), and the closed-form Gaussian solution of
// the shell's heat equation d_T f = div(D grad f), f(0) = delta(X) g(e).
// Under the e^{-2 pi i xi X} Fourier convention the transform is
// fhat(T, xi) = g exp(-(2 pi)^2 T (xi, D xi)), so the X-space covariance is
// 2 T D per axis pair (frozen convention, validated by the finite-difference
// stepper in the test suite).
struct HeatShell {
    double e = 0.0;
    double g = 0.0;
    double D[3][3] = {};
    double D_stderr[3][3] = {};

    double fhat(double T, const std::array<double, 3>& xi) const {
        if (T < 0.0) throw std::invalid_argument("HeatShell::fhat: T >= 0 required");
        return g * std::exp(-kTwoPi * kTwoPi * T * detail::quad_form(D, xi));
    }

    // Gaussian density in X; at T = 0 the solution is a delta and has no
    // pointwise values
    double f(double T, const std::array<double, 3>& X) const {
        if (T <= 0.0)
            throw std::invalid_argument("HeatShell::f: pointwise values need T > 0");
        double cov[3][3], inv[3][3];
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) cov[i][j] = 2.0 * T * D[i][j];
        detail::sym3_inverse(cov, inv);
        const double det = detail::sym3_det(cov);
        const double norm = std::pow(kTwoPi, -1.5) / std::sqrt(det);
        return g * norm * std::exp(-0.5 * detail::quad_form(inv, X));
    }

    double trace_D() const { return D[0][0] + D[1][1] + D[2][2]; }
};

struct HeatSolution {
    double de = 0.0;
    std::vector<HeatShell> shells;  // bins with positive projected mass only

    double mass() const {
        double s = 0.0;
        for (const auto& sh : shells) s += sh.g * de;
        return s;
    }
    // g-weighted mean of 2 T trace D: the predicted squared displacement
    double msd_prediction(double T) const {
        double s = 0.0, m = 0.0;
        for (const auto& sh : shells) {
            s += sh.g * de * 2.0 * T * sh.trace_D();
            m += sh.g * de;
        }
        if (m <= 0.0) throw std::invalid_argument("msd_prediction: empty solution");
        return s / m;
    }
};

// Build the per-shell heat solutions: g(e) as the energy histogram of
// |psi0_hat|^2, and D(e) = <sin(2 pi v_i) sin(2 pi v_j)>_e / (2 pi Phi(e))
// with the shell averages estimated from one uniform momentum sweep.
inline HeatSolution heat_solution(const ComplexField& psi0,
                                  const SpectralTables& tables,
                                  std::int64_t n_samples, std::uint64_t seed) {
    if (n_samples < 1)
        throw std::invalid_argument("heat_solution: n_samples >= 1 required");
    const ComplexField ph =
        psi0.rep == Representation::momentum ? psi0 : fourier_forward(psi0);
    const auto& g = ph.grid;
    const double de = tables.de;
    const std::size_t nbins = tables.centers.size();

    std::vector<double> mass(nbins, 0.0);
    for (int m1 = 0; m1 < g.L; ++m1)
        for (int m2 = 0; m2 < g.L; ++m2)
            for (int m3 = 0; m3 < g.L; ++m3) {
                const double w = std::norm(ph.at(m1, m2, m3)) * g.momentum_weight();
                if (w <= 0.0) continue;
                const double e = dispersion_energy(g.momentum(m1, m2, m3));
                std::size_t b = static_cast<std::size_t>(e / de);
                if (b >= nbins) b = nbins - 1;
                mass[b] += w;
            }

    // shell averages of sin_i sin_j per bin
    std::vector<std::array<double, 6>> s1(nbins), s2(nbins);
    for (auto& a : s1) a.fill(0.0);
    for (auto& a : s2) a.fill(0.0);
    std::vector<std::int64_t> count(nbins, 0);
    Rng rng(seed, /*kind=*/12, 0);
    for (std::int64_t i = 0; i < n_samples; ++i) {
        const TorusPoint v = TorusPoint::random(rng);
        const double e = dispersion_energy(v);
        std::size_t b = static_cast<std::size_t>(e / de);
        if (b >= nbins) b = nbins - 1;
        const auto sv = boltzmann_velocity(v);
        const double prods[6] = {sv[0] * sv[0], sv[1] * sv[1], sv[2] * sv[2],
                                 sv[0] * sv[1], sv[0] * sv[2], sv[1] * sv[2]};
        for (int c = 0; c < 6; ++c) {
            s1[b][c] += prods[c];
            s2[b][c] += prods[c] * prods[c];
        }
        count[b] += 1;
    }

    double total_mass = 0.0;
    for (double m : mass) total_mass += m;

    HeatSolution sol;
    sol.de = de;
    for (std::size_t b = 0; b < nbins; ++b) {
        // skip empty shells and round-trip noise from the transforms
        if (mass[b] <= 1e-12 * total_mass) continue;
        if (count[b] < 2 || tables.phi[b] <= 0.0)
            throw std::runtime_error(
                "heat_solution: occupied energy bin with no shell statistics; "
                "raise n_samples");
        HeatShell sh;
        sh.e = tables.centers[b];
        sh.g = mass[b] / de;
        const double denom = kTwoPi * tables.phi[b];
        const int idx[3][3] = {{0, 3, 4}, {3, 1, 5}, {4, 5, 2}};
        const double n = static_cast<double>(count[b]);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                const int c = idx[i][j];
                const double mean = s1[b][c] / n;
                const double var = std::max(s2[b][c] / n - mean * mean, 0.0);
                sh.D[i][j] = mean / denom;
                sh.D_stderr[i][j] = std::sqrt(var / n) / denom;
            }
        sol.shells.push_back(sh);
    }
    if (sol.shells.empty())
        throw std::invalid_argument("heat_solution: psi0 carries no mass");
    return sol;
}

// Pairing of the heat solution with a phase-space observable O(X, v): the
// energy decomposition of int dX int dv O(X, v) f(T, X, e(v)), evaluated as
// sum over shells of de * g(e) * <O_v>_e * (X overlap of the observable's
// Gaussian with the shell's heat Gaussian).  <O_v>_e is a shell average over
// one uniform momentum sweep; the X overlap is in closed form.
inline Complex pair_heat_with_observable(const HeatSolution& sol,
                                         const Observable& obs, double T,
                                         std::int64_t n_samples,
                                         std::uint64_t seed) {
    if (T < 0.0)
        throw std::invalid_argument("pair_heat_with_observable: T >= 0 required");
    if (n_samples < 1)
        throw std::invalid_argument("pair_heat_with_observable: n_samples >= 1");
    const double de = sol.de;
    const std::size_t nsh = sol.shells.size();

    // shell averages of the v part, binned to the shells present
    std::vector<Complex> vsum(nsh, Complex(0.0, 0.0));
    std::vector<std::int64_t> vcount(nsh, 0);
    Rng rng(seed, /*kind=*/13, 0);
    for (std::int64_t i = 0; i < n_samples; ++i) {
        const TorusPoint v = TorusPoint::random(rng);
        const double e = dispersion_energy(v);
        // locate the shell whose bin contains e (shells are sorted in e)
        std::size_t lo = 0, hi = nsh;
        while (lo < hi) {
            const std::size_t mid = (lo + hi) / 2;
            if (sol.shells[mid].e + 0.5 * de <= e)
                lo = mid + 1;
            else
                hi = mid;
        }
        if (lo >= nsh || std::abs(sol.shells[lo].e - e) > 0.5 * de) continue;
        vsum[lo] += obs.v_value(v);
        vcount[lo] += 1;
    }

    Complex total{0.0, 0.0};
    for (std::size_t s = 0; s < nsh; ++s) {
        const auto& sh = sol.shells[s];
        if (vcount[s] == 0) continue;
        const Complex vavg = vsum[s] / static_cast<double>(vcount[s]);

        double overlap = 1.0;
        if (!obs.xi_delta) {
            // int N(X; 0, 2TD) exp(-(X-c)^2 / 2 sigma^2) dX
            //   = sqrt(det S / det(S + 2TD)) exp(-c (S + 2TD)^{-1} c / 2)
            double m[3][3] = {};
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j) m[i][j] = 2.0 * T * sh.D[i][j];
            double dets = 1.0;
            for (int i = 0; i < 3; ++i) {
                m[i][i] += obs.sigma[i] * obs.sigma[i];
                dets *= obs.sigma[i] * obs.sigma[i];
            }
            double inv[3][3];
            detail::sym3_inverse(m, inv);
            overlap = std::sqrt(dets / detail::sym3_det(m)) *
                      std::exp(-0.5 * detail::quad_form(inv, obs.center));
        }
        total += de * sh.g * vavg * overlap;
    }
    return total;
}

// Same pairing, but with the X overlap evaluated as the Riemann sum over the
// discrete frequency grid the Wigner-side pairings use (spacing 1/(eps L),
// cut off at |xi|_inf <= xi_max).  On a desk-scale box that grid is coarse,
// and comparing collision-expansion sums against the heat solution is only
// meaningful in the same discrete inner product.
inline Complex pair_heat_with_observable_grid(const HeatSolution& sol,
                                              const Observable& obs, double T,
                                              double eps, int L, double xi_max,
                                              std::int64_t n_samples,
                                              std::uint64_t seed) {
    if (T < 0.0)
        throw std::invalid_argument("pair_heat_with_observable_grid: T >= 0");
    if (eps <= 0.0 || L < 2)
        throw std::invalid_argument("pair_heat_with_observable_grid: bad grid");
    if (obs.xi_delta) return pair_heat_with_observable(sol, obs, T, n_samples, seed);

    // per-shell velocity averages, same estimator as the continuum pairing
    const double de = sol.de;
    const std::size_t nsh = sol.shells.size();
    std::vector<Complex> vsum(nsh, Complex(0.0, 0.0));
    std::vector<std::int64_t> vcount(nsh, 0);
    Rng rng(seed, /*kind=*/13, 0);
    for (std::int64_t i = 0; i < n_samples; ++i) {
        const TorusPoint v = TorusPoint::random(rng);
        const double e = dispersion_energy(v);
        std::size_t lo = 0, hi = nsh;
        while (lo < hi) {
            const std::size_t mid = (lo + hi) / 2;
            if (sol.shells[mid].e + 0.5 * de <= e)
                lo = mid + 1;
            else
                hi = mid;
        }
        if (lo >= nsh || std::abs(sol.shells[lo].e - e) > 0.5 * de) continue;
        vsum[lo] += obs.v_value(v);
        vcount[lo] += 1;
    }

    const double wxi = 1.0 / (eps * L * eps * L * eps * L);
    Complex total{0.0, 0.0};
    for (int b1 = -L; b1 < L; ++b1)
        for (int b2 = -L; b2 < L; ++b2)
            for (int b3 = -L; b3 < L; ++b3) {
                const std::array<double, 3> xi = {
                    b1 / (eps * L), b2 / (eps * L), b3 / (eps * L)};
                if (std::max({std::abs(xi[0]), std::abs(xi[1]),
                              std::abs(xi[2])}) > xi_max)
                    continue;
                const Complex xf = obs.x_fourier(xi);
                if (std::abs(xf) < 1e-300) continue;
                for (std::size_t s = 0; s < nsh; ++s) {
                    if (vcount[s] == 0) continue;
                    const auto& sh = sol.shells[s];
                    total += wxi * xf * sh.fhat(T, xi) * de *
                             (vsum[s] / static_cast<double>(vcount[s]));
                }
            }
    return total;
}

// ---------------------------------------------------------------------------
// Three-way comparison pipeline: quantum ensemble vs jump process vs heat
// prediction across a ladder of lambdas, plus ladder-sum observable values
// against the heat pairing.  Desk-scale runs only: the report states finite-
// lambda gaps and trends, never the scaling limit itself.

struct ComparisonConfig {
    // quantum-vs-jump-process variance runs
    std::vector<double> lambdas{0.5, 0.4, 0.3};
    double T = 0.5;          // macroscopic horizon
    int L = 32;              // lattice box
    int realizations = 12;
    double kappa_cap = 1.0 / 12.0;
    double packet_width = 1.0;
    std::array<double, 3> carrier{0.25, 0.25, 0.25};
    double shell_delta = 0.05;
    std::int64_t jump_particles = 20000;
    int fit_points = 4;      // time samples for the growth-exponent fit
    double fit_lo = 0.4;     // fit window starts at this fraction of the horizon
    double dt = 0.05;

    // ladder-sum vs heat pairing
    std::vector<double> ladder_lambdas{0.2, 0.1};
    double ladder_T = 0.5;
    double ladder_kappa = 1.0 / 12.0;
    double ladder_delta = 1.0;
    int ladder_L = 16;
    std::int64_t ladder_mc = 20000;
    std::vector<Observable> observables;

    std::int64_t shell_samples = 2000000;
    std::uint64_t seed = 1;

    static std::vector<Observable> default_observables() {
        Observable gauss;
        gauss.sigma = {0.5, 0.5, 0.5};
        Observable mixed = gauss;
        mixed.harmonics.push_back({{1, 0, 0}, Complex(0.4, 0.0)});
        return {gauss, mixed};
    }
};

struct LambdaComparison {
    double lambda = 0.0;
    double kappa_eff = 0.0;
    double t = 0.0;       // microscopic horizon matching T
    double quantum_msd = 0.0;       // macroscopic units
    double quantum_msd_stderr = 0.0;
    double boltzmann_msd = 0.0;
    double boltzmann_msd_stderr = 0.0;
    double heat_msd = 0.0;
    double gap = 0.0;               // |quantum - boltzmann| / boltzmann
    double gap_stderr = 0.0;
    double exponent = 0.0;          // growth exponent of the quantum variance
    double exponent_stderr = 0.0;
    bool ok = false;
    std::string error;
};

struct LadderHeatComparison {
    double lambda = 0.0;
    int observable = 0;
    Complex ladder_sum{0.0, 0.0};
    double ladder_stderr = 0.0;
    Complex heat_value{0.0, 0.0};
    double rel_gap = 0.0;
    double rel_gap_stderr = 0.0;
    bool ok = false;
    std::string error;
};

struct ComparisonReport {
    ComparisonConfig cfg;
    std::vector<LambdaComparison> lambda_runs;
    std::vector<LadderHeatComparison> ladder_runs;
    bool gap_monotone = false;
    bool ladder_gap_shrinks = false;
    bool partial = false;  // at least one sub-run failed
};

namespace detail {

// least squares slope of log y against log x with slope standard error
inline std::pair<double, double> loglog_slope(const std::vector<double>& x,
                                              const std::vector<double>& y) {
    const std::size_t n = x.size();
    if (n < 2) throw std::invalid_argument("loglog_slope: need >= 2 points");
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double lx = std::log(x[i]), ly = std::log(y[i]);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    const double den = n * sxx - sx * sx;
    const double slope = (n * sxy - sx * sy) / den;
    const double icept = (sy - slope * sx) / n;
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double r = std::log(y[i]) - icept - slope * std::log(x[i]);
        ss += r * r;
    }
    const double se =
        n > 2 ? std::sqrt(ss / (n - 2) * n / den) : 0.0;
    return {slope, se};
}

inline LambdaComparison compare_at_lambda(double lambda,
                                          const ComparisonConfig& cfg,
                                          const SpectralTables& tables) {
    LambdaComparison out;
    out.lambda = lambda;
    LatticeGrid g(cfg.L);
    const TorusPoint carrier(cfg.carrier[0], cfg.carrier[1], cfg.carrier[2]);
    const auto psi0 = gaussian_packet_state(
        g, {cfg.L / 2, cfg.L / 2, cfg.L / 2}, cfg.packet_width, carrier);

    // microscopic horizon: kappa_eff <= cap, clipped so the light cone fits
    const int diam = detail::support_diameter(psi0);
    const double t_box = 0.5 * (cfg.L - diam) - 1.0;
    if (t_box <= 0.0) throw std::invalid_argument("comparison: box too small");
    double kappa_eff = cfg.kappa_cap;
    double t = std::pow(lambda, -2.0 - kappa_eff) * cfg.T;
    if (t > t_box) {
        t = t_box;
        kappa_eff = -std::log(t / cfg.T) / std::log(lambda) - 2.0;
        if (kappa_eff <= 0.0)
            throw std::invalid_argument(
                "comparison: horizon does not fit the box at kinetic scaling");
    }
    out.kappa_eff = kappa_eff;
    out.t = t;
    const double macro = std::pow(lambda, 4.0 + kappa_eff);  // eps^2

    // quantum ensemble: variance growth at fit_points times up to t
    std::vector<double> times(cfg.fit_points);
    for (int i = 0; i < cfg.fit_points; ++i)
        times[i] = t * (cfg.fit_lo + (1.0 - cfg.fit_lo) * i /
                                         std::max(cfg.fit_points - 1, 1));
    const double var0 = position_variance(psi0);
    std::vector<double> growth(cfg.fit_points), gse(cfg.fit_points);
    for (int i = 0; i < cfg.fit_points; ++i) {
        EvolutionConfig ec;
        ec.lambda = lambda;
        ec.t = times[i];
        ec.dt = cfg.dt;
        const auto rec = run_ensemble(
            psi0, ec, PotentialKind::rademacher, cfg.realizations,
            {{"variance", [](const ComplexField& f) { return position_variance(f); }}},
            cfg.seed);
        growth[i] = rec.mean(0) - var0;
        gse[i] = rec.stderr_of(0);
    }
    out.quantum_msd = macro * growth.back();
    out.quantum_msd_stderr = macro * gse.back();
    const auto fit = loglog_slope(times, growth);
    out.exponent = fit.first;
    out.exponent_stderr = fit.second;

    // matching jump process and heat prediction at the packet's mean energy
    const auto sol = heat_solution(psi0, tables, cfg.shell_samples, cfg.seed);
    double gm = 0.0, ge = 0.0;
    for (const auto& sh : sol.shells) {
        gm += sh.g * sol.de;
        ge += sh.g * sol.de * sh.e;
    }
    const double a = ge / gm;
    const auto traj = simulate_jump_process(a, cfg.shell_delta, cfg.jump_particles,
                                            cfg.T, cfg.seed, tables,
                                            /*store_log=*/false);
    const auto msd = mean_square_displacement(traj);
    out.boltzmann_msd = msd.msd;
    out.boltzmann_msd_stderr = msd.msd_stderr;
    out.heat_msd = sol.msd_prediction(cfg.T);

    out.gap = std::abs(out.quantum_msd - out.boltzmann_msd) / out.boltzmann_msd;
    out.gap_stderr = std::sqrt(out.quantum_msd_stderr * out.quantum_msd_stderr +
                               out.boltzmann_msd_stderr * out.boltzmann_msd_stderr) /
                     out.boltzmann_msd;
    out.ok = true;
    return out;
}

inline LadderHeatComparison compare_ladder_at_lambda(double lambda, int obs_idx,
                                                     const ComparisonConfig& cfg,
                                                     const SpectralTables& tables) {
    LadderHeatComparison out;
    out.lambda = lambda;
    out.observable = obs_idx;
    const auto& obs = cfg.observables[obs_idx];
    LatticeGrid g(cfg.ladder_L);
    const auto psi0 = momentum_bump_state(g, 2.3, 2.7);
    ExperimentScale sc(lambda, cfg.ladder_kappa, cfg.ladder_T, cfg.ladder_delta);

    Complex sum{0.0, 0.0};
    double err2 = 0.0;
    for (int k = 0; k < sc.K(); ++k) {
        const auto w = ladder_observable_value(k, sc, psi0, obs, cfg.ladder_mc,
                                               cfg.seed + k, tables);
        sum += w.W;
        err2 += w.std_err * w.std_err;
    }
    out.ladder_sum = sum;
    out.ladder_stderr = std::sqrt(err2);

    const auto sol = heat_solution(psi0, tables, cfg.shell_samples, cfg.seed);
    out.heat_value = pair_heat_with_observable_grid(
        sol, obs, cfg.ladder_T, sc.eps(), cfg.ladder_L,
        std::pow(lambda, -cfg.ladder_delta), cfg.shell_samples, cfg.seed + 99);
    const double ref = std::abs(out.heat_value);
    out.rel_gap = std::abs(sum - out.heat_value) / ref;
    out.rel_gap_stderr = out.ladder_stderr / ref;
    out.ok = true;
    return out;
}

}  // namespace detail

inline ComparisonReport run_comparison(ComparisonConfig cfg,
                                       const SpectralTables& tables) {
    if (cfg.observables.empty())
        cfg.observables = ComparisonConfig::default_observables();
    ComparisonReport rep;
    rep.cfg = cfg;

    for (double lambda : cfg.lambdas) {
        LambdaComparison r;
        try {
            r = detail::compare_at_lambda(lambda, cfg, tables);
        } catch (const std::exception& e) {
            r.lambda = lambda;
            r.error = e.what();
            rep.partial = true;
        }
        rep.lambda_runs.push_back(r);
    }
    rep.gap_monotone = rep.lambda_runs.size() >= 2;
    for (std::size_t i = 1; i < rep.lambda_runs.size(); ++i) {
        const auto& a = rep.lambda_runs[i - 1];
        const auto& b = rep.lambda_runs[i];
        // decreasing within error bars along decreasing lambda
        if (!a.ok || !b.ok ||
            b.gap > a.gap + 2.0 * (a.gap_stderr + b.gap_stderr))
            rep.gap_monotone = false;
    }

    for (std::size_t o = 0; o < cfg.observables.size(); ++o) {
        for (double lambda : cfg.ladder_lambdas) {
            LadderHeatComparison r;
            try {
                r = detail::compare_ladder_at_lambda(lambda, static_cast<int>(o),
                                                     cfg, tables);
            } catch (const std::exception& e) {
                r.lambda = lambda;
                r.observable = static_cast<int>(o);
                r.error = e.what();
                rep.partial = true;
            }
            rep.ladder_runs.push_back(r);
        }
    }
    // shrinking ladder gap: for each observable, the gap at the smallest
    // lambda must not exceed the gap at the largest
    rep.ladder_gap_shrinks = !rep.ladder_runs.empty();
    for (std::size_t o = 0; o < cfg.observables.size(); ++o) {
        const LadderHeatComparison* first = nullptr;
        const LadderHeatComparison* last = nullptr;
        for (const auto& r : rep.ladder_runs)
            if (r.observable == static_cast<int>(o) && r.ok) {
                if (!first) first = &r;
                last = &r;
            }
        if (!first || first == last) {
            rep.ladder_gap_shrinks = false;
            break;
        }
        if (last->rel_gap >
            first->rel_gap + 2.0 * (first->rel_gap_stderr + last->rel_gap_stderr))
            rep.ladder_gap_shrinks = false;
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Persistence: JSON report plus flat CSV curves for plotting.

inline void save_comparison_csv(const ComparisonReport& rep,
                                const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_comparison_csv: cannot open " + path);
    out.precision(12);
    out << "curve,lambda,observable,value,stderr\n";
    for (const auto& r : rep.lambda_runs) {
        if (!r.ok) continue;
        out << "quantum_msd," << r.lambda << ",," << r.quantum_msd << ','
            << r.quantum_msd_stderr << '\n';
        out << "boltzmann_msd," << r.lambda << ",," << r.boltzmann_msd << ','
            << r.boltzmann_msd_stderr << '\n';
        out << "heat_msd," << r.lambda << ",," << r.heat_msd << ",0\n";
        out << "gap," << r.lambda << ",," << r.gap << ',' << r.gap_stderr << '\n';
        out << "exponent," << r.lambda << ",," << r.exponent << ','
            << r.exponent_stderr << '\n';
    }
    for (const auto& r : rep.ladder_runs) {
        if (!r.ok) continue;
        out << "ladder_gap," << r.lambda << ',' << r.observable << ','
            << r.rel_gap << ',' << r.rel_gap_stderr << '\n';
    }
}

inline void save_comparison_json(const ComparisonReport& rep,
                                 const std::string& path);

}  // namespace qdlab

#include <json.hpp>

namespace qdlab {

inline void save_comparison_json(const ComparisonReport& rep,
                                 const std::string& path) {
    nlohmann::json j;
    j["config"] = {
        {"lambdas", rep.cfg.lambdas},
        {"T", rep.cfg.T},
        {"L", rep.cfg.L},
        {"realizations", rep.cfg.realizations},
        {"kappa_cap", rep.cfg.kappa_cap},
        {"packet_width", rep.cfg.packet_width},
        {"shell_delta", rep.cfg.shell_delta},
        {"jump_particles", rep.cfg.jump_particles},
        {"fit_points", rep.cfg.fit_points},
        {"dt", rep.cfg.dt},
        {"ladder_lambdas", rep.cfg.ladder_lambdas},
        {"ladder_T", rep.cfg.ladder_T},
        {"ladder_kappa", rep.cfg.ladder_kappa},
        {"ladder_delta", rep.cfg.ladder_delta},
        {"ladder_L", rep.cfg.ladder_L},
        {"ladder_mc", rep.cfg.ladder_mc},
        {"shell_samples", rep.cfg.shell_samples},
        {"observables", rep.cfg.observables.size()},
        {"seed", rep.cfg.seed},
    };
    j["lambda_runs"] = nlohmann::json::array();
    for (const auto& r : rep.lambda_runs) {
        j["lambda_runs"].push_back({
            {"lambda", r.lambda},
            {"kappa_eff", r.kappa_eff},
            {"t", r.t},
            {"quantum_msd", r.quantum_msd},
            {"quantum_msd_stderr", r.quantum_msd_stderr},
            {"boltzmann_msd", r.boltzmann_msd},
            {"boltzmann_msd_stderr", r.boltzmann_msd_stderr},
            {"heat_msd", r.heat_msd},
            {"gap", r.gap},
            {"gap_stderr", r.gap_stderr},
            {"exponent", r.exponent},
            {"exponent_stderr", r.exponent_stderr},
            {"ok", r.ok},
            {"error", r.error},
        });
    }
    j["ladder_runs"] = nlohmann::json::array();
    for (const auto& r : rep.ladder_runs) {
        j["ladder_runs"].push_back({
            {"lambda", r.lambda},
            {"observable", r.observable},
            {"ladder_sum_re", r.ladder_sum.real()},
            {"ladder_sum_im", r.ladder_sum.imag()},
            {"ladder_stderr", r.ladder_stderr},
            {"heat_value_re", r.heat_value.real()},
            {"heat_value_im", r.heat_value.imag()},
            {"rel_gap", r.rel_gap},
            {"rel_gap_stderr", r.rel_gap_stderr},
            {"ok", r.ok},
            {"error", r.error},
        });
    }
    j["verdict"] = {
        {"gap_monotone", rep.gap_monotone},
        {"ladder_gap_shrinks", rep.ladder_gap_shrinks},
        {"partial", rep.partial},
    };
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_comparison_json: cannot open " + path);
    out << j.dump(2) << '\n';
}

}  // namespace qdlab

#endif
