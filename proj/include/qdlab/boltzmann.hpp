#ifndef QDLAB_BOLTZMANN_HPP
#define QDLAB_BOLTZMANN_HPP

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "qdlab/dispersion.hpp"
#include "qdlab/rng.hpp"
#include "qdlab/spectral.hpp"
#include "qdlab/torus.hpp"

namespace qdlab {

// One particle of the momentum jump process: free flight at velocity
// sin(2 pi V) between collisions, collisions at rate 2 pi Phi(a), post-jump
// momentum drawn fresh from the energy shell.
struct JumpParticle {
    std::array<double, 3> X{0.0, 0.0, 0.0};
    TorusPoint V;
    double T = 0.0;
    double a = 0.0;
    std::int64_t njumps = 0;
};

struct JumpEvent {
    double time;
    TorusPoint V;
};

struct TrajectorySet {
    double a = 0.0;
    double delta = 0.0;
    double T_max = 0.0;
    double rate = 0.0;  // 2 pi Phi(a)
    std::uint64_t seed = 0;
    std::vector<JumpParticle> particles;       // state at T_max
    std::vector<TorusPoint> initial_momenta;
    std::vector<std::vector<JumpEvent>> jump_log;  // empty unless requested
};

namespace detail {

inline TorusPoint draw_shell(double a, double delta, Rng& rng) {
    for (std::int64_t tries = 0;; ++tries) {
        const TorusPoint v = TorusPoint::random(rng);
        if (std::abs(dispersion_energy(v) - a) < delta / 2.0) return v;
        if (tries > 100'000'000)
            throw std::runtime_error("draw_shell: acceptance rate vanishes");
    }
}

}  // namespace detail

inline TrajectorySet simulate_jump_process(double a, double delta, std::int64_t N,
                                           double T_max, std::uint64_t seed,
                                           const SpectralTables& tables,
                                           bool store_log = true) {
    const double pa = tables.phi_at(a);
    if (pa <= 0.0) throw std::invalid_argument("simulate_jump_process: Phi(a) <= 0");
    if (N < 1 || T_max <= 0.0)
        throw std::invalid_argument("simulate_jump_process: need N >= 1, T_max > 0");
    if (critical_distance(a) < 0.5 && delta > critical_distance(a) / 4.0)
        throw std::invalid_argument("simulate_jump_process: shell width too large");

    TrajectorySet out;
    out.a = a;
    out.delta = delta;
    out.T_max = T_max;
    out.rate = kTwoPi * pa;
    out.seed = seed;
    out.particles.resize(N);
    out.initial_momenta.resize(N);
    if (store_log) out.jump_log.resize(N);

    for (std::int64_t i = 0; i < N; ++i) {
        Rng rng(seed, /*kind=*/6, static_cast<std::uint64_t>(i));
        JumpParticle p;
        p.a = a;
        p.V = detail::draw_shell(a, delta, rng);
        out.initial_momenta[i] = p.V;
        while (true) {
            const double tau = rng.exponential(out.rate);
            const double dt = std::min(tau, T_max - p.T);
            const auto s = boltzmann_velocity(p.V);
            for (int j = 0; j < 3; ++j) p.X[j] += s[j] * dt;
            p.T += dt;
            if (p.T >= T_max) break;
            p.V = detail::draw_shell(a, delta, rng);
            p.njumps += 1;
            if (store_log) out.jump_log[i].push_back({p.T, p.V});
        }
        out.particles[i] = p;
    }
    return out;
}

struct AutocorrelationPoint {
    double lag = 0.0;
    double C[3][3] = {};
    double C_stderr[3][3] = {};
};

// Empirical <sin(2 pi v_i(lag)) sin(2 pi v_j(0))> over the trajectory set.
inline std::vector<AutocorrelationPoint> velocity_autocorrelation(
    const TrajectorySet& traj, const std::vector<double>& lags) {
    if (traj.jump_log.size() != traj.particles.size())
        throw std::invalid_argument("velocity_autocorrelation: jump log not stored");
    for (double lag : lags)
        if (lag < 0.0 || lag > traj.T_max)
            throw std::invalid_argument("velocity_autocorrelation: lag outside [0, T_max]");

    const std::size_t N = traj.particles.size();
    std::vector<AutocorrelationPoint> out(lags.size());
    for (std::size_t li = 0; li < lags.size(); ++li) {
        const double lag = lags[li];
        out[li].lag = lag;
        double s1[3][3] = {}, s2[3][3] = {};
        for (std::size_t i = 0; i < N; ++i) {
            TorusPoint v = traj.initial_momenta[i];
            for (const auto& ev : traj.jump_log[i]) {
                if (ev.time > lag) break;
                v = ev.V;
            }
            const auto st = boltzmann_velocity(v);
            const auto s0 = boltzmann_velocity(traj.initial_momenta[i]);
            for (int a = 0; a < 3; ++a)
                for (int b = 0; b < 3; ++b) {
                    const double x = st[a] * s0[b];
                    s1[a][b] += x;
                    s2[a][b] += x * x;
                }
        }
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) {
                const double mean = s1[a][b] / N;
                const double var = s2[a][b] / N - mean * mean;
                out[li].C[a][b] = mean;
                out[li].C_stderr[a][b] = std::sqrt(std::max(var, 0.0) / N);
            }
    }
    return out;
}

struct MsdEstimate {
    double T = 0.0;
    double msd = 0.0;          // E |X(T)|^2
    double msd_stderr = 0.0;
    double diffusion = 0.0;    // msd / (2 d T)
    double diffusion_stderr = 0.0;
};

inline MsdEstimate mean_square_displacement(const TrajectorySet& traj) {
    const std::size_t N = traj.particles.size();
    double s1 = 0.0, s2 = 0.0;
    for (const auto& p : traj.particles) {
        const double r2 = p.X[0] * p.X[0] + p.X[1] * p.X[1] + p.X[2] * p.X[2];
        s1 += r2;
        s2 += r2 * r2;
    }
    MsdEstimate m;
    m.T = traj.T_max;
    m.msd = s1 / N;
    m.msd_stderr = std::sqrt(std::max(s2 / N - m.msd * m.msd, 0.0) / N);
    const double denom = 2.0 * 3.0 * traj.T_max;
    m.diffusion = m.msd / denom;
    m.diffusion_stderr = m.msd_stderr / denom;
    return m;
}

// ---------------------------------------------------------------------------
// Direct phase-space solver for the kinetic equation: density F(X, V) on an
// (X-grid) x (V-grid), transported semi-Lagrangially in X and relaxed toward
// the per-energy-bin average in V.  Layout is V-major: f[iv * nx^3 + ix] so
// transport works on contiguous X cubes.

struct PhaseSpaceDensity {
    int nx = 0;        // X cells per axis, box [-xmax, xmax) periodic
    int nv = 0;        // V cells per axis over the torus
    double xmax = 0.0;
    std::vector<double> f;

    PhaseSpaceDensity(int nx_, int nv_, double xmax_)
        : nx(nx_), nv(nv_), xmax(xmax_),
          f(static_cast<std::size_t>(nx_) * nx_ * nx_ * nv_ * nv_ * nv_, 0.0) {
        if (nx < 2 || nv < 2 || xmax <= 0.0)
            throw std::invalid_argument("PhaseSpaceDensity: bad grid");
    }

    double hx() const { return 2.0 * xmax / nx; }
    std::size_t ncells_x() const { return static_cast<std::size_t>(nx) * nx * nx; }
    std::size_t ncells_v() const { return static_cast<std::size_t>(nv) * nv * nv; }

    TorusPoint v_center(int iv) const {
        const int i1 = iv / (nv * nv), i2 = (iv / nv) % nv, i3 = iv % nv;
        auto c = [this](int i) { return -0.5 + (i + 0.5) / nv; };
        return TorusPoint(c(i1), c(i2), c(i3));
    }
    double x_center(int i) const { return -xmax + (i + 0.5) * hx(); }

    double* x_cube(int iv) { return f.data() + static_cast<std::size_t>(iv) * ncells_x(); }
    const double* x_cube(int iv) const {
        return f.data() + static_cast<std::size_t>(iv) * ncells_x();
    }

    double mass() const {
        double s = 0.0;
        for (double v : f) s += v;
        return s;
    }
};

class BoltzmannSolver {
  public:
    BoltzmannSolver(PhaseSpaceDensity F0, const SpectralTables& tables,
                    double ebin_width)
        : F_(std::move(F0)), tables_(&tables), ebin_(ebin_width),
          offset_(F_.ncells_v(), {0.0, 0.0, 0.0}) {
        if (ebin_ <= 0.0) throw std::invalid_argument("BoltzmannSolver: ebin_width > 0");
        const int nbins = static_cast<int>(std::ceil(6.0 / ebin_));
        bin_of_vcell_.resize(F_.ncells_v());
        bin_members_.resize(nbins);
        for (std::size_t iv = 0; iv < F_.ncells_v(); ++iv) {
            const double e = dispersion_energy(F_.v_center(static_cast<int>(iv)));
            int b = static_cast<int>(e / ebin_);
            if (b >= nbins) b = nbins - 1;
            bin_of_vcell_[iv] = b;
            bin_members_[b].push_back(static_cast<int>(iv));
        }
        rate_of_bin_.resize(nbins);
        for (int b = 0; b < nbins; ++b)
            rate_of_bin_[b] = kTwoPi * tables_->phi_at((b + 0.5) * ebin_);
    }

    const PhaseSpaceDensity& density() const { return F_; }
    PhaseSpaceDensity& density() { return F_; }

    double max_rate() const {
        double m = 0.0;
        for (std::size_t b = 0; b < rate_of_bin_.size(); ++b)
            if (!bin_members_[b].empty()) m = std::max(m, rate_of_bin_[b]);
        return m;
    }

    void step(double dt, bool collisions = true) {
        if (collisions && dt * max_rate() >= 0.1)
            throw std::invalid_argument("BoltzmannSolver::step: dt too large for the collision rate");
        transport(dt);
        if (collisions) collide(dt);
        for (double v : F_.f)
            if (v < -1e-12) throw std::runtime_error("BoltzmannSolver::step: negative density");
    }

    // Transport each V cell's X cube by sin(2 pi V) * dt.  The displacement
    // is applied exactly: whole cells are shifted on the grid, the sub-cell
    // remainder accumulates in a per-V-cell offset.  This avoids the strong
    // numerical diffusion of fractional mass splitting; the offsets are folded
    // back into the moments and only ignored while mixing during collisions.
    void transport(double dt) {
        const int n = F_.nx;
        std::vector<double> line(n);
        for (std::size_t iv = 0; iv < F_.ncells_v(); ++iv) {
            const auto s = boltzmann_velocity(F_.v_center(static_cast<int>(iv)));
            double* cube = F_.x_cube(static_cast<int>(iv));
            for (int axis = 0; axis < 3; ++axis) {
                offset_[iv][axis] += s[axis] * dt / F_.hx();
                const int m = static_cast<int>(std::lround(offset_[iv][axis]));
                if (m == 0) continue;
                offset_[iv][axis] -= m;
                const int stride = (axis == 0) ? n * n : (axis == 1) ? n : 1;
                for (int a = 0; a < n; ++a)
                    for (int b = 0; b < n; ++b) {
                        int base;
                        if (axis == 0) base = a * n + b;
                        else if (axis == 1) base = a * n * n + b;
                        else base = a * n * n + b * n;
                        for (int i = 0; i < n; ++i)
                            line[i] = cube[base + (((i - m) % n + n) % n) * stride];
                        for (int i = 0; i < n; ++i) cube[base + i * stride] = line[i];
                    }
            }
        }
    }

    std::array<double, 3> x_center_of_mass() const {
        const int n = F_.nx;
        double mass = 0.0;
        std::array<double, 3> mean{0.0, 0.0, 0.0};
        for (std::size_t iv = 0; iv < F_.ncells_v(); ++iv) {
            const double* cube = F_.x_cube(static_cast<int>(iv));
            const auto& o = offset_[iv];
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j)
                    for (int k = 0; k < n; ++k) {
                        const double w = cube[(i * n + j) * n + k];
                        if (w == 0.0) continue;
                        mass += w;
                        mean[0] += w * (F_.x_center(i) + o[0] * F_.hx());
                        mean[1] += w * (F_.x_center(j) + o[1] * F_.hx());
                        mean[2] += w * (F_.x_center(k) + o[2] * F_.hx());
                    }
        }
        for (int ax = 0; ax < 3; ++ax) mean[ax] /= mass;
        return mean;
    }

    // Exact relaxation toward the energy-bin mean: F <- mean + (F - mean) e^{-R dt}.
    void collide(double dt) {
        const std::size_t ncx = F_.ncells_x();
        std::vector<double> mean(ncx);
        for (std::size_t b = 0; b < bin_members_.size(); ++b) {
            const auto& cells = bin_members_[b];
            if (cells.size() < 2) continue;
            const double decay = std::exp(-rate_of_bin_[b] * dt);
            std::fill(mean.begin(), mean.end(), 0.0);
            for (int iv : cells) {
                const double* cube = F_.x_cube(iv);
                for (std::size_t x = 0; x < ncx; ++x) mean[x] += cube[x];
            }
            const double inv = 1.0 / static_cast<double>(cells.size());
            for (std::size_t x = 0; x < ncx; ++x) mean[x] *= inv;
            for (int iv : cells) {
                double* cube = F_.x_cube(iv);
                for (std::size_t x = 0; x < ncx; ++x)
                    cube[x] = mean[x] + (cube[x] - mean[x]) * decay;
            }
        }
    }

    // Variance per axis of the X marginal (average over the three axes),
    // with the per-V-cell sub-cell offsets folded in.
    double x_marginal_variance() const {
        double mass = 0.0, mean[3] = {}, m2[3] = {};
        const int n = F_.nx;
        // per-axis 1-d marginals of each cube, offset applied per cube
        std::vector<double> marg(n);
        for (std::size_t iv = 0; iv < F_.ncells_v(); ++iv) {
            const double* cube = F_.x_cube(static_cast<int>(iv));
            const auto& o = offset_[iv];
            for (int ax = 0; ax < 3; ++ax) {
                std::fill(marg.begin(), marg.end(), 0.0);
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < n; ++j)
                        for (int k = 0; k < n; ++k) {
                            const double w = cube[(i * n + j) * n + k];
                            marg[ax == 0 ? i : ax == 1 ? j : k] += w;
                        }
                for (int i = 0; i < n; ++i) {
                    const double c = F_.x_center(i) + o[ax] * F_.hx();
                    mean[ax] += marg[i] * c;
                    m2[ax] += marg[i] * c * c;
                    if (ax == 0) mass += marg[i];
                }
            }
        }
        double var = 0.0;
        for (int ax = 0; ax < 3; ++ax) {
            const double mu = mean[ax] / mass;
            var += m2[ax] / mass - mu * mu;
        }
        return var / 3.0;
    }

    // L1 distance of the V marginal from the bin-uniform profile with the
    // same per-bin mass.
    double v_marginal_anisotropy() const {
        std::vector<double> vm(F_.ncells_v(), 0.0);
        for (std::size_t iv = 0; iv < F_.ncells_v(); ++iv) {
            const double* cube = F_.x_cube(static_cast<int>(iv));
            for (std::size_t x = 0; x < F_.ncells_x(); ++x) vm[iv] += cube[x];
        }
        double dist = 0.0;
        for (const auto& cells : bin_members_) {
            if (cells.empty()) continue;
            double m = 0.0;
            for (int iv : cells) m += vm[iv];
            const double mean = m / static_cast<double>(cells.size());
            for (int iv : cells) dist += std::abs(vm[iv] - mean);
        }
        return dist;
    }

  private:
    PhaseSpaceDensity F_;
    const SpectralTables* tables_;
    double ebin_;
    std::vector<int> bin_of_vcell_;
    std::vector<std::vector<int>> bin_members_;
    std::vector<double> rate_of_bin_;
    std::vector<std::array<double, 3>> offset_;  // sub-cell X shift per V cell
};

// ---------------------------------------------------------------------------
// CSV outputs.

inline void save_trajectories_csv(const TrajectorySet& traj, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_trajectories_csv: cannot open " + path);
    out << "particle,T,X1,X2,X3,njumps\n";
    out.precision(17);
    for (std::size_t i = 0; i < traj.particles.size(); ++i) {
        const auto& p = traj.particles[i];
        out << i << ',' << p.T << ',' << p.X[0] << ',' << p.X[1] << ',' << p.X[2]
            << ',' << p.njumps << '\n';
    }
}

inline void save_autocorrelation_csv(const std::vector<AutocorrelationPoint>& ac,
                                     const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_autocorrelation_csv: cannot open " + path);
    out << "lag,C11,C12,C13,C21,C22,C23,C31,C32,C33,stderr\n";
    out.precision(17);
    for (const auto& pt : ac) {
        out << pt.lag;
        double maxerr = 0.0;
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) {
                out << ',' << pt.C[a][b];
                maxerr = std::max(maxerr, pt.C_stderr[a][b]);
            }
        out << ',' << maxerr << '\n';
    }
}

}  // namespace qdlab

#endif
