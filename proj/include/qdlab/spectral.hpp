#ifndef QDLAB_SPECTRAL_HPP
#define QDLAB_SPECTRAL_HPP

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "qdlab/dispersion.hpp"
#include "qdlab/rng.hpp"
#include "qdlab/torus.hpp"

namespace qdlab {

using Complex = std::complex<double>;

// Tabulated level-surface data of the free lattice Laplacian on [0, 2d]:
// Phi(e)  density of states (pushforward density of e under the uniform
//         torus measure),
// R(e)    principal-value part of the boundary self-energy,
// I(e)    its imaginary part, estimated independently by small-epsilon
//         quadrature so that I = pi*Phi is a genuine cross-check.
struct SpectralTables {
    double de = 0.01;
    std::vector<double> centers;      // bin centers
    std::vector<double> phi;
    std::vector<double> phi_stderr;
    std::vector<double> R;
    std::vector<double> I;
    std::int64_t n_samples = 0;
    std::uint64_t seed = 0;

    // log-log cusp fit Phi ~ cusp_coeff * e^cusp_slope used below cusp_edge
    double cusp_edge = 0.0;
    double cusp_slope = 0.5;
    double cusp_coeff = 0.0;

    double emax() const { return 6.0; }

    double phi_at(double e) const {
        if (e <= 0.0 || e >= emax()) return 0.0;
        if (cusp_edge > 0.0 && e < cusp_edge)
            return cusp_coeff * std::pow(e, cusp_slope);
        if (cusp_edge > 0.0 && e > emax() - cusp_edge)
            return cusp_coeff * std::pow(emax() - e, cusp_slope);
        return interp(phi, e);
    }
    double phi_stderr_at(double e) const {
        if (e <= 0.0 || e >= emax()) return 0.0;
        return interp(phi_stderr, e);
    }
    double I_at(double e) const {
        if (e <= 0.0 || e >= emax()) return 0.0;
        return interp(I, e);
    }

    // Theta_eps(alpha) = int Phi(s) / (alpha - s + i eps) ds.  The kernel is
    // integrated exactly over each bin so the result stays accurate even when
    // eps is far below the bin width.
    Complex theta_eps(double alpha, double eps) const {
        if (eps <= 0.0) throw std::invalid_argument("theta_eps: eps > 0 required");
        Complex sum{0.0, 0.0};
        for (std::size_t j = 0; j < centers.size(); ++j) {
            const double lo = centers[j] - 0.5 * de;
            const double hi = centers[j] + 0.5 * de;
            sum += phi[j] * std::log(Complex(alpha - lo, eps) / Complex(alpha - hi, eps));
        }
        return sum;
    }

    // Boundary value: P.V. integral via singularity subtraction plus the
    // explicit -i pi Phi(alpha) term.
    Complex theta(double alpha) const {
        return Complex(principal_value(alpha), -kPi * phi_at(alpha));
    }

    // P.V. int_0^6 Phi(s)/(alpha-s) ds =
    //   int (Phi(s)-Phi(alpha))/(alpha-s) ds + Phi(alpha) log|alpha/(alpha-6)|
    double principal_value(double alpha) const {
        const double pa = phi_at(alpha);
        double sum = 0.0;
        for (std::size_t j = 0; j < centers.size(); ++j) {
            const double x = alpha - centers[j];
            if (std::abs(x) < 1e-12) {
                sum += -phi_derivative(alpha);
            } else {
                sum += (phi[j] - pa) / x;
            }
        }
        double v = sum * de;
        if (pa != 0.0) v += pa * std::log(std::abs(alpha / (alpha - emax())));
        return v;
    }

    double phi_derivative(double e) const {
        const double h = de;
        return (phi_at(e + h) - phi_at(e - h)) / (2.0 * h);
    }

    // Interpolated boundary value, cheap enough for inner Monte Carlo loops.
    Complex theta_interp(double e) const {
        if (e <= 0.0 || e >= emax()) return theta(e);
        return Complex(interp(R, e), -kPi * phi_at(e));
    }

    Complex omega(const TorusPoint& p, double lambda) const {
        const double e = dispersion_energy(p);
        return e + lambda * lambda * theta_interp(e);
    }

    Complex omega_of_energy(double e, double lambda) const {
        return e + lambda * lambda * theta_interp(e);
    }

  private:
    double interp(const std::vector<double>& tab, double e) const {
        const double u = e / de - 0.5;
        if (u <= 0.0) return tab.front();
        const auto n = tab.size();
        if (u >= static_cast<double>(n - 1)) return tab.back();
        const std::size_t j = static_cast<std::size_t>(u);
        const double f = u - static_cast<double>(j);
        return tab[j] * (1.0 - f) + tab[j + 1] * f;
    }
};

namespace detail {

inline void fit_cusp(SpectralTables& t, double lo = 0.01, double hi = 0.2) {
    // log-log least squares of Phi on [lo, hi]
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    int n = 0;
    for (std::size_t j = 0; j < t.centers.size(); ++j) {
        const double e = t.centers[j];
        if (e < lo || e > hi || t.phi[j] <= 0.0) continue;
        const double x = std::log(e), y = std::log(t.phi[j]);
        sx += x; sy += y; sxx += x * x; sxy += x * y; ++n;
    }
    if (n < 3) return;
    const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    const double inter = (sy - slope * sx) / n;
    t.cusp_slope = slope;
    t.cusp_coeff = std::exp(inter);
    t.cusp_edge = lo;
}

}  // namespace detail

// Phi as the histogram density of e(U), U uniform on the torus. Unbiased by
// the co-area identity; per-bin standard errors from the binomial counts.
inline SpectralTables build_phi(std::int64_t n_samples, double de, std::uint64_t seed) {
    if (n_samples < 100000)
        throw std::invalid_argument(
            "build_phi: at least 1e5 samples required for a usable table");
    SpectralTables t;
    t.de = de;
    t.n_samples = n_samples;
    t.seed = seed;
    const int nbins = static_cast<int>(std::lround(6.0 / de));
    std::vector<std::int64_t> counts(nbins, 0);

    // batched so the table is reproducible independently of threading
    const std::int64_t batch = 1 << 20;
    std::int64_t done = 0;
    std::uint64_t batch_idx = 0;
    while (done < n_samples) {
        const std::int64_t m = std::min(batch, n_samples - done);
        Rng rng(seed, /*kind=*/1, batch_idx++);
        for (std::int64_t i = 0; i < m; ++i) {
            const double e = dispersion_energy(TorusPoint::random(rng));
            int b = static_cast<int>(e / de);
            if (b >= nbins) b = nbins - 1;
            counts[b] += 1;
        }
        done += m;
    }

    t.centers.resize(nbins);
    t.phi.resize(nbins);
    t.phi_stderr.resize(nbins);
    const double norm = 1.0 / (static_cast<double>(n_samples) * de);
    for (int b = 0; b < nbins; ++b) {
        t.centers[b] = (b + 0.5) * de;
        t.phi[b] = counts[b] * norm;
        t.phi_stderr[b] = std::sqrt(static_cast<double>(counts[b])) * norm;
    }
    detail::fit_cusp(t);

    // R on the grid and I by Poisson-kernel quadrature with Richardson
    // extrapolation in eps
    t.R.resize(nbins);
    t.I.resize(nbins);
    const double eps1 = 0.08, eps2 = 0.04;
    for (int b = 0; b < nbins; ++b) {
        const double a = t.centers[b];
        t.R[b] = t.principal_value(a);
        const double i1 = -t.theta_eps(a, eps1).imag();
        const double i2 = -t.theta_eps(a, eps2).imag();
        t.I[b] = 2.0 * i2 - i1;
    }
    return t;
}

// Points drawn uniformly from the thin shell {|e(v) - a| < delta/2} by
// rejection from the uniform torus measure; converges to the co-area
// measure <.>_a as delta -> 0.
struct ShellSample {
    std::vector<TorusPoint> points;
    double a = 0.0;
    double delta = 0.0;
    double acceptance = 0.0;
};

inline ShellSample shell_sample(double a, double delta, std::int64_t n,
                                std::uint64_t seed) {
    if (n < 1) throw std::invalid_argument("shell_sample: n >= 1 required");
    const double cd = critical_distance(a);
    if (cd < 0.5 && delta > cd / 4.0)
        throw std::invalid_argument(
            "shell_sample: delta too wide for an energy this close to a critical value");
    ShellSample s;
    s.a = a;
    s.delta = delta;
    s.points.reserve(n);
    Rng rng(seed, /*kind=*/2, 0);
    std::int64_t proposals = 0;
    const std::int64_t check_every = 1 << 22;
    while (static_cast<std::int64_t>(s.points.size()) < n) {
        const TorusPoint v = TorusPoint::random(rng);
        ++proposals;
        if (std::abs(dispersion_energy(v) - a) < delta / 2.0) s.points.push_back(v);
        if (proposals % check_every == 0 &&
            static_cast<double>(s.points.size()) / proposals < 1e-6)
            throw std::runtime_error(
                "shell_sample: acceptance rate below 1e-6; a is too close to 0 or 2d");
    }
    s.acceptance = static_cast<double>(n) / proposals;
    return s;
}

struct DiffusionMatrix {
    double a = 0.0;
    double mat[3][3] = {};
    double mat_stderr[3][3] = {};
    double scalar = 0.0;        // D_a = <sin^2(2 pi v1)>_a / (2 pi Phi(a))
    double scalar_stderr = 0.0;
};

// D_ij(a) = <sin(2 pi v_i) sin(2 pi v_j)>_a / (2 pi Phi(a))
inline DiffusionMatrix diffusion_matrix(double a, const ShellSample& shell,
                                        const SpectralTables& tables) {
    const double pa = tables.phi_at(a);
    if (a <= 0.0 || a >= 6.0 || critical_distance(a) < 1e-9 || pa <= 0.0)
        throw std::invalid_argument("diffusion_matrix: degenerate shell energy");
    const double denom = kTwoPi * pa;
    const std::size_t n = shell.points.size();
    double s1[3][3] = {}, s2[3][3] = {};
    for (const auto& v : shell.points) {
        const auto sv = boltzmann_velocity(v);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                const double x = sv[i] * sv[j];
                s1[i][j] += x;
                s2[i][j] += x * x;
            }
    }
    DiffusionMatrix D;
    D.a = a;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            const double mean = s1[i][j] / n;
            const double var = s2[i][j] / n - mean * mean;
            D.mat[i][j] = mean / denom;
            D.mat_stderr[i][j] = std::sqrt(std::max(var, 0.0) / n) / denom;
        }
    D.scalar = D.mat[0][0];
    D.scalar_stderr = D.mat_stderr[0][0];
    return D;
}

struct McEstimate {
    double value = 0.0;
    double stderr = 0.0;
};

// Monte Carlo estimate of int dp / |alpha - omega(p) + i eta|
inline McEstimate integral_probe_log(double alpha, double lambda, double eta,
                                     const SpectralTables& tables,
                                     std::int64_t n, std::uint64_t seed) {
    Rng rng(seed, /*kind=*/3, 0);
    double s1 = 0.0, s2 = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const TorusPoint p = TorusPoint::random(rng);
        const Complex w = tables.omega(p, lambda);
        const double x = 1.0 / std::abs(Complex(alpha, eta) - w);
        s1 += x;
        s2 += x * x;
    }
    McEstimate r;
    r.value = s1 / n;
    r.stderr = std::sqrt(std::max(s2 / n - r.value * r.value, 0.0) / n);
    return r;
}

// lambda^2 int dp / (|alpha - conj(omega)(p+r) - i eta| |beta - omega(p-r) + i eta|)
inline McEstimate ladder_integral_probe(double alpha, double beta,
                                        const TorusPoint& r, double lambda,
                                        double eta, const SpectralTables& tables,
                                        std::int64_t n, std::uint64_t seed) {
    Rng rng(seed, /*kind=*/4, 0);
    const double l2 = lambda * lambda;
    double s1 = 0.0, s2 = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const TorusPoint p = TorusPoint::random(rng);
        const Complex w1 = std::conj(tables.omega(p + r, lambda));
        const Complex w2 = tables.omega(p - r, lambda);
        const double x = l2 / (std::abs(Complex(alpha, -eta) - w1) *
                               std::abs(Complex(beta, eta) - w2));
        s1 += x;
        s2 += x * x;
    }
    McEstimate res;
    res.value = s1 / n;
    res.stderr = std::sqrt(std::max(s2 / n - res.value * res.value, 0.0) / n);
    return res;
}

// Energy projection [h](e): histogram density of e(U) weighted by h(U),
// U uniform on the torus. By the co-area formula its integral over e equals
// the torus integral of h.
struct EnergyProjection {
    double de = 0.0;
    std::vector<double> centers;
    std::vector<double> values;
    std::vector<double> stderrs;

    double at(double e) const {
        if (centers.empty() || e <= 0.0 || e >= 6.0) return 0.0;
        const double u = e / de - 0.5;
        if (u <= 0.0) return values.front();
        if (u >= static_cast<double>(values.size() - 1)) return values.back();
        const auto j = static_cast<std::size_t>(u);
        const double f = u - static_cast<double>(j);
        return values[j] * (1.0 - f) + values[j + 1] * f;
    }
    double integral() const {
        double s = 0.0;
        for (double v : values) s += v;
        return s * de;
    }
};

template <typename H>
EnergyProjection build_energy_projection(H&& h, std::int64_t n_samples, double de,
                                         std::uint64_t seed) {
    const int nbins = static_cast<int>(std::lround(6.0 / de));
    std::vector<double> sum(nbins, 0.0), sumsq(nbins, 0.0);
    Rng rng(seed, /*kind=*/5, 0);
    for (std::int64_t i = 0; i < n_samples; ++i) {
        const TorusPoint v = TorusPoint::random(rng);
        const double e = dispersion_energy(v);
        int b = static_cast<int>(e / de);
        if (b >= nbins) b = nbins - 1;
        const double w = h(v);
        sum[b] += w;
        sumsq[b] += w * w;
    }
    EnergyProjection proj;
    proj.de = de;
    proj.centers.resize(nbins);
    proj.values.resize(nbins);
    proj.stderrs.resize(nbins);
    const double norm = 1.0 / (static_cast<double>(n_samples) * de);
    for (int b = 0; b < nbins; ++b) {
        proj.centers[b] = (b + 0.5) * de;
        proj.values[b] = sum[b] * norm;
        proj.stderrs[b] = std::sqrt(std::max(sumsq[b], 0.0)) * norm;
    }
    return proj;
}

// Table persistence: CSV e,phi,phi_stderr,R,I plus a JSON sidecar.
inline void save_tables_csv(const SpectralTables& t, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_tables_csv: cannot open " + path);
    out << "e,phi,phi_stderr,R,I\n";
    out.precision(17);
    for (std::size_t j = 0; j < t.centers.size(); ++j)
        out << t.centers[j] << ',' << t.phi[j] << ',' << t.phi_stderr[j] << ','
            << t.R[j] << ',' << t.I[j] << '\n';
}

}  // namespace qdlab

#endif
