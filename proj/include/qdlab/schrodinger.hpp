#ifndef QDLAB_SCHRODINGER_HPP
#define QDLAB_SCHRODINGER_HPP

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "qdlab/dispersion.hpp"
#include "qdlab/fft.hpp"
#include "qdlab/grid.hpp"
#include "qdlab/rng.hpp"

namespace qdlab {

enum class PotentialKind { rademacher, gaussian };

// Site-i.i.d. potential with mean 0 and variance 1.
struct RandomPotential {
    LatticeGrid grid;
    PotentialKind kind = PotentialKind::rademacher;
    std::uint64_t seed = 0;
    std::vector<double> values;

    double sample_mean() const {
        double s = 0.0;
        for (double v : values) s += v;
        return s / static_cast<double>(values.size());
    }
    double sample_second_moment() const {
        double s = 0.0;
        for (double v : values) s += v * v;
        return s / static_cast<double>(values.size());
    }
    // 4-sigma agreement of the first two sample moments with (0, 1)
    bool moments_ok() const {
        const double n = static_cast<double>(values.size());
        if (std::abs(sample_mean()) > 4.0 / std::sqrt(n)) return false;
        // var of v^2 is 2 for gaussian, 0 for rademacher; use the generous bound
        if (kind == PotentialKind::gaussian &&
            std::abs(sample_second_moment() - 1.0) > 4.0 * std::sqrt(2.0 / n))
            return false;
        if (kind == PotentialKind::rademacher &&
            std::abs(sample_second_moment() - 1.0) > 1e-12)
            return false;
        return true;
    }
};

inline RandomPotential sample_potential(const LatticeGrid& grid, PotentialKind kind,
                                        std::uint64_t seed) {
    RandomPotential pot;
    pot.grid = grid;
    pot.kind = kind;
    pot.seed = seed;
    pot.values.resize(grid.size());
    Rng rng(seed, /*kind=*/7, 0);
    switch (kind) {
        case PotentialKind::rademacher:
            for (auto& v : pot.values) v = (rng.next_u64() & 1u) ? 1.0 : -1.0;
            break;
        case PotentialKind::gaussian:
            for (auto& v : pot.values) v = rng.normal();
            break;
        default:
            throw std::invalid_argument("sample_potential: unknown distribution");
    }
    return pot;
}

enum class EvolutionScheme { strang, exact };

struct EvolutionConfig {
    double lambda = 0.0;
    double t = 0.0;
    double dt = 0.05;
    EvolutionScheme scheme = EvolutionScheme::strang;
    // the periodic box wraps; by default we refuse runs whose light cone
    // (speed 1 per axis) could reach around the box
    bool allow_wraparound = false;
};

namespace detail {

// extent of the support of |psi| along each axis (box-aligned, no wrap logic:
// a state touching the boundary counts as full diameter)
inline int support_diameter(const ComplexField& psi) {
    const int L = psi.grid.L;
    int lo[3] = {L, L, L}, hi[3] = {-1, -1, -1};
    for (int a = 0; a < L; ++a)
        for (int b = 0; b < L; ++b)
            for (int c = 0; c < L; ++c) {
                if (std::abs(psi.at(a, b, c)) < 1e-14) continue;
                const int idx[3] = {a, b, c};
                for (int j = 0; j < 3; ++j) {
                    lo[j] = std::min(lo[j], idx[j]);
                    hi[j] = std::max(hi[j], idx[j]);
                }
            }
    int diam = 0;
    for (int j = 0; j < 3; ++j) diam = std::max(diam, hi[j] - lo[j]);
    return diam;
}

}  // namespace detail

// psi_t = e^{-itH} psi_0 with H = -(1/2) Delta + lambda V, kinetic symbol e(p).
inline ComplexField evolve(const ComplexField& psi0, const RandomPotential& V,
                           const EvolutionConfig& cfg) {
    if (psi0.rep != Representation::position)
        throw std::invalid_argument("evolve: psi0 must be in position representation");
    if (psi0.grid.L != V.grid.L)
        throw std::invalid_argument("evolve: psi0 and V grid mismatch");
    if (cfg.t < 0.0 || cfg.dt <= 0.0) throw std::invalid_argument("evolve: bad times");
    if (!cfg.allow_wraparound) {
        const int diam = detail::support_diameter(psi0);
        if (psi0.grid.L <= 2.0 * cfg.t + diam)
            throw std::invalid_argument(
                "evolve: box too small for this time horizon (wrap-around risk); "
                "enlarge L or set allow_wraparound");
    }

    const LatticeGrid& g = psi0.grid;

    if (cfg.scheme == EvolutionScheme::exact) {
        if (g.L > 8)
            throw std::invalid_argument("evolve: exact diagonalization limited to L <= 8");
        const int n = static_cast<int>(g.size());
        Eigen::MatrixXd H = Eigen::MatrixXd::Zero(n, n);
        for (int a = 0; a < g.L; ++a)
            for (int b = 0; b < g.L; ++b)
                for (int c = 0; c < g.L; ++c) {
                    const int i = static_cast<int>(g.index(a, b, c));
                    H(i, i) = 3.0 + cfg.lambda * V.values[i];
                    const int nb[6][3] = {{a + 1, b, c}, {a - 1, b, c}, {a, b + 1, c},
                                          {a, b - 1, c}, {a, b, c + 1}, {a, b, c - 1}};
                    for (const auto& m : nb) {
                        const int j = static_cast<int>(g.index(
                            (m[0] + g.L) % g.L, (m[1] + g.L) % g.L, (m[2] + g.L) % g.L));
                        H(i, j) += -0.5;
                    }
                }
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(H);
        Eigen::VectorXcd v(n);
        for (int i = 0; i < n; ++i) v(i) = psi0.values[i];
        Eigen::VectorXcd w = es.eigenvectors().transpose() * v;
        for (int i = 0; i < n; ++i)
            w(i) *= std::exp(Complex(0.0, -cfg.t * es.eigenvalues()(i)));
        v = es.eigenvectors() * w;
        ComplexField out(g, Representation::position);
        for (int i = 0; i < n; ++i) out.values[i] = v(i);
        return out;
    }

    // Strang splitting: half potential phase, full kinetic phase, half potential
    const int nsteps = std::max(1, static_cast<int>(std::lround(cfg.t / cfg.dt)));
    const double dt = cfg.t / nsteps;

    std::vector<Complex> pot_phase(g.size()), kin_phase(g.size());
    for (std::size_t i = 0; i < g.size(); ++i)
        pot_phase[i] = std::exp(Complex(0.0, -0.5 * dt * cfg.lambda * V.values[i]));
    for (int m1 = 0; m1 < g.L; ++m1)
        for (int m2 = 0; m2 < g.L; ++m2)
            for (int m3 = 0; m3 < g.L; ++m3)
                kin_phase[g.index(m1, m2, m3)] = std::exp(
                    Complex(0.0, -dt * dispersion_energy(g.momentum(m1, m2, m3))));

    ComplexField psi = psi0;
    if (cfg.t == 0.0) return psi;
    for (int s = 0; s < nsteps; ++s) {
        for (std::size_t i = 0; i < g.size(); ++i) psi.values[i] *= pot_phase[i];
        ComplexField ph = fourier_forward(psi);
        for (std::size_t i = 0; i < g.size(); ++i) ph.values[i] *= kin_phase[i];
        psi = fourier_inverse(ph);
        for (std::size_t i = 0; i < g.size(); ++i) psi.values[i] *= pot_phase[i];
    }
    const double nrm = psi.norm_sq();
    if (!std::isfinite(nrm)) throw std::runtime_error("evolve: NaN in state");
    return psi;
}

// ---------------------------------------------------------------------------
// Initial states.

// Momentum-space bump supported on the energy window [e_lo, e_hi] with a
// smooth cosine-squared profile; keeps the state away from the bad energy
// values when the window is chosen inside one regular band region.
inline ComplexField momentum_bump_state(const LatticeGrid& g, double e_lo, double e_hi) {
    if (!(e_lo < e_hi) || e_lo < 0.0 || e_hi > 6.0)
        throw std::invalid_argument("momentum_bump_state: bad energy window");
    ComplexField ph(g, Representation::momentum);
    const double c = 0.5 * (e_lo + e_hi), w = 0.5 * (e_hi - e_lo);
    for (int m1 = 0; m1 < g.L; ++m1)
        for (int m2 = 0; m2 < g.L; ++m2)
            for (int m3 = 0; m3 < g.L; ++m3) {
                const double e = dispersion_energy(g.momentum(m1, m2, m3));
                const double u = (e - c) / w;
                ph.at(m1, m2, m3) =
                    (std::abs(u) < 1.0) ? std::pow(std::cos(0.5 * kPi * u), 2) : 0.0;
            }
    const double n = ph.norm_sq();
    if (n <= 0.0)
        throw std::invalid_argument("momentum_bump_state: window misses the grid");
    ph.scale_by(1.0 / std::sqrt(n));
    ComplexField psi = fourier_inverse(ph);
    psi.scale_by(1.0 / std::sqrt(psi.norm_sq()));
    return psi;
}

// Position-space Gaussian envelope with a plane-wave carrier; spatially
// localized, so variance-growth runs have a well-defined starting spread.
inline ComplexField gaussian_packet_state(const LatticeGrid& g,
                                          const std::array<int, 3>& center,
                                          double width, const TorusPoint& carrier) {
    if (width <= 0.0) throw std::invalid_argument("gaussian_packet_state: width > 0");
    ComplexField psi(g, Representation::position);
    for (int a = 0; a < g.L; ++a)
        for (int b = 0; b < g.L; ++b)
            for (int c = 0; c < g.L; ++c) {
                const int d[3] = {a - center[0], b - center[1], c - center[2]};
                double r2 = 0.0;
                for (int j = 0; j < 3; ++j) {
                    // nearest periodic image
                    int dj = d[j];
                    if (dj > g.L / 2) dj -= g.L;
                    if (dj < -g.L / 2) dj += g.L;
                    r2 += static_cast<double>(dj) * dj;
                }
                const double phase =
                    kTwoPi * (carrier[0] * a + carrier[1] * b + carrier[2] * c);
                psi.at(a, b, c) = std::exp(-r2 / (4.0 * width * width)) *
                                  Complex(std::cos(phase), std::sin(phase));
            }
    psi.scale_by(1.0 / std::sqrt(psi.norm_sq()));
    return psi;
}

// ---------------------------------------------------------------------------
// Ensemble driver: R independent realizations, named scalar observables.

struct EnsembleObservable {
    std::string name;
    std::function<double(const ComplexField&)> eval;  // applied to psi_t
};

struct EnsembleRecord {
    EvolutionConfig cfg;
    PotentialKind kind = PotentialKind::rademacher;
    std::uint64_t master_seed = 0;
    int realizations = 0;
    std::vector<std::string> names;
    std::vector<std::vector<double>> values;  // [observable][realization]
    std::vector<std::uint64_t> seeds;
    int moment_check_failures = 0;

    double mean(std::size_t obs) const {
        double s = 0.0;
        for (double v : values[obs]) s += v;
        return s / static_cast<double>(values[obs].size());
    }
    double stderr_of(std::size_t obs) const {
        const double m = mean(obs);
        double s = 0.0;
        for (double v : values[obs]) s += (v - m) * (v - m);
        const double n = static_cast<double>(values[obs].size());
        return n > 1 ? std::sqrt(s / (n - 1) / n) : 0.0;
    }
};

inline EnsembleRecord run_ensemble(const ComplexField& psi0, const EvolutionConfig& cfg,
                                   PotentialKind kind, int R,
                                   const std::vector<EnsembleObservable>& observables,
                                   std::uint64_t master_seed) {
    if (R < 1) throw std::invalid_argument("run_ensemble: R >= 1 required");
    EnsembleRecord rec;
    rec.cfg = cfg;
    rec.kind = kind;
    rec.master_seed = master_seed;
    rec.realizations = R;
    for (const auto& o : observables) rec.names.push_back(o.name);
    rec.values.assign(observables.size(), {});
    for (auto& v : rec.values) v.reserve(R);

    for (int r = 0; r < R; ++r) {
        const std::uint64_t seed = derive_seed(master_seed, /*kind=*/8,
                                               static_cast<std::uint64_t>(r));
        rec.seeds.push_back(seed);
        const auto V = sample_potential(psi0.grid, kind, seed);
        if (!V.moments_ok()) rec.moment_check_failures += 1;
        const auto psi_t = evolve(psi0, V, cfg);
        for (std::size_t o = 0; o < observables.size(); ++o) {
            double val;
            try {
                val = observables[o].eval(psi_t);
            } catch (const std::exception& e) {
                throw std::runtime_error("run_ensemble: observable '" +
                                         observables[o].name + "' failed at realization " +
                                         std::to_string(r) + ": " + e.what());
            }
            rec.values[o].push_back(val);
        }
    }
    return rec;
}

// Position variance of |psi(x)|^2 (sum over the three axes), with the mean
// taken in the nearest-image sense around the dominant cell.
inline double position_variance(const ComplexField& psi) {
    if (psi.rep != Representation::position)
        throw std::invalid_argument("position_variance: need position representation");
    const int L = psi.grid.L;
    // locate the weight center roughly: use the max-probability cell as anchor
    std::size_t imax = 0;
    double pmax = 0.0;
    for (std::size_t i = 0; i < psi.values.size(); ++i) {
        const double p = std::norm(psi.values[i]);
        if (p > pmax) {
            pmax = p;
            imax = i;
        }
    }
    const int ax = static_cast<int>(imax) / (L * L), bx = (static_cast<int>(imax) / L) % L,
              cx = static_cast<int>(imax) % L;
    const int anchor[3] = {ax, bx, cx};
    double mass = 0.0, mean[3] = {}, m2[3] = {};
    for (int a = 0; a < L; ++a)
        for (int b = 0; b < L; ++b)
            for (int c = 0; c < L; ++c) {
                const double w = std::norm(psi.at(a, b, c));
                if (w == 0.0) continue;
                const int idx[3] = {a, b, c};
                mass += w;
                for (int j = 0; j < 3; ++j) {
                    int d = idx[j] - anchor[j];
                    if (d > L / 2) d -= L;
                    if (d < -L / 2) d += L;
                    mean[j] += w * d;
                    m2[j] += w * static_cast<double>(d) * d;
                }
            }
    double var = 0.0;
    for (int j = 0; j < 3; ++j) {
        const double mu = mean[j] / mass;
        var += m2[j] / mass - mu * mu;
    }
    return var;
}

}  // namespace qdlab

#endif
