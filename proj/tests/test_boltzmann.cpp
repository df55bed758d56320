#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "qdlab/boltzmann.hpp"

using namespace qdlab;
using Catch::Matchers::WithinAbs;

namespace {

const SpectralTables& tables() {
    static SpectralTables t = build_phi(4'000'000, 0.02, 777);
    return t;
}

double mean_free_time() { return 1.0 / (kTwoPi * tables().phi_at(3.0)); }

}  // namespace

TEST_CASE("jump counts are Poisson with rate 2 pi Phi(a)") {
    const double T = 5.0 * mean_free_time();
    const auto traj = simulate_jump_process(3.0, 0.02, 5000, T, 91, tables(), false);
    const double expect = traj.rate * T;  // = 5
    double m = 0.0, m2 = 0.0;
    for (const auto& p : traj.particles) {
        m += static_cast<double>(p.njumps);
        m2 += static_cast<double>(p.njumps) * p.njumps;
    }
    const double n = static_cast<double>(traj.particles.size());
    m /= n;
    m2 /= n;
    const double var = m2 - m * m;
    REQUIRE_THAT(m, WithinAbs(expect, 3.0 * std::sqrt(expect / n)));
    // Poisson: variance equals the mean
    REQUIRE_THAT(var, WithinAbs(expect, 5.0 * expect * std::sqrt(2.0 / n)));
}

TEST_CASE("mean displacement vanishes by shell symmetry") {
    const double T = 10.0 * mean_free_time();
    const auto traj = simulate_jump_process(3.0, 0.02, 5000, T, 92, tables(), false);
    const double n = static_cast<double>(traj.particles.size());
    for (int j = 0; j < 3; ++j) {
        double m = 0.0, m2 = 0.0;
        for (const auto& p : traj.particles) {
            m += p.X[j];
            m2 += p.X[j] * p.X[j];
        }
        m /= n;
        m2 /= n;
        REQUIRE_THAT(m, WithinAbs(0.0, 3.0 * std::sqrt(m2 / n)));
    }
}

TEST_CASE("long-time diffusion constant matches the shell average", "[oracle]") {
    const double T = 40.0 * mean_free_time();
    const auto traj = simulate_jump_process(3.0, 0.02, 20000, T, 93, tables(), false);
    const auto msd = mean_square_displacement(traj);
    const auto shell = shell_sample(3.0, 0.02, 40000, 94);
    const auto D = diffusion_matrix(3.0, shell, tables());
    REQUIRE_THAT(msd.diffusion, WithinAbs(D.scalar, 0.05 * D.scalar));
}

TEST_CASE("displacement components look Gaussian at long times") {
    const double T = 40.0 * mean_free_time();
    const auto traj = simulate_jump_process(3.0, 0.02, 20000, T, 95, tables(), false);
    const double n = static_cast<double>(traj.particles.size());
    for (int j = 0; j < 3; ++j) {
        double m2 = 0.0, m4 = 0.0;
        for (const auto& p : traj.particles) {
            const double x2 = p.X[j] * p.X[j];
            m2 += x2;
            m4 += x2 * x2;
        }
        m2 /= n;
        m4 /= n;
        const double kurt = m4 / (m2 * m2);
        REQUIRE_THAT(kurt, WithinAbs(3.0, 3.0 * std::sqrt(24.0 / n) + 0.08));
    }
}

TEST_CASE("diffusion estimate is stable under halving the shell width") {
    const double T = 30.0 * mean_free_time();
    const auto t1 = simulate_jump_process(3.0, 0.02, 10000, T, 96, tables(), false);
    const auto t2 = simulate_jump_process(3.0, 0.01, 10000, T, 97, tables(), false);
    const auto m1 = mean_square_displacement(t1);
    const auto m2 = mean_square_displacement(t2);
    REQUIRE_THAT(m1.diffusion, WithinAbs(m2.diffusion,
                 3.0 * (m1.diffusion_stderr + m2.diffusion_stderr)));
}

TEST_CASE("velocity autocorrelation decays at the collision rate", "[oracle]") {
    const double mft = mean_free_time();
    const double T = 6.0 * mft;
    const auto traj = simulate_jump_process(3.0, 0.02, 20000, T, 98, tables(), true);

    std::vector<double> lags;
    for (int i = 0; i <= 20; ++i) lags.push_back(0.25 * mft * i);
    const auto ac = velocity_autocorrelation(traj, lags);

    // lag-0 diagonal equals the shell second moment
    const auto shell = shell_sample(3.0, 0.02, 40000, 99);
    double sq = 0.0;
    for (const auto& v : shell.points) {
        const double s = std::sin(kTwoPi * v[0]);
        sq += s * s;
    }
    sq /= static_cast<double>(shell.points.size());
    REQUIRE_THAT(ac[0].C[0][0], WithinAbs(sq, 3.0 * (ac[0].C_stderr[0][0] + 0.004)));

    // single-jump decorrelation: C(t) = C(0) exp(-rate t); fit the log slope
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    int n = 0;
    for (const auto& pt : ac) {
        const double c = (pt.C[0][0] + pt.C[1][1] + pt.C[2][2]) / 3.0;
        if (pt.lag > 2.5 * mft || c <= 0.0) continue;
        sx += pt.lag; sy += std::log(c); sxx += pt.lag * pt.lag; sxy += pt.lag * std::log(c);
        ++n;
    }
    const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    REQUIRE_THAT(-slope, WithinAbs(traj.rate, 0.05 * traj.rate));

    // time integral (trapezoid plus fitted exponential tail) equals D
    double integral = 0.0;
    for (std::size_t i = 1; i < ac.size(); ++i) {
        const double c0 = (ac[i - 1].C[0][0] + ac[i - 1].C[1][1] + ac[i - 1].C[2][2]) / 3.0;
        const double c1 = (ac[i].C[0][0] + ac[i].C[1][1] + ac[i].C[2][2]) / 3.0;
        integral += 0.5 * (c0 + c1) * (ac[i].lag - ac[i - 1].lag);
    }
    const double clast =
        (ac.back().C[0][0] + ac.back().C[1][1] + ac.back().C[2][2]) / 3.0;
    integral += clast / (-slope);
    const auto D = diffusion_matrix(3.0, shell, tables());
    REQUIRE_THAT(integral, WithinAbs(D.scalar, 0.05 * D.scalar));
}

TEST_CASE("jump process input validation") {
    REQUIRE_THROWS_AS(simulate_jump_process(0.0, 0.02, 10, 1.0, 1, tables()),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(simulate_jump_process(3.0, 0.02, 0, 1.0, 1, tables()),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(simulate_jump_process(2.05, 0.5, 10, 1.0, 1, tables()),
                      std::invalid_argument);
    const auto traj = simulate_jump_process(3.0, 0.02, 10, 1.0, 1, tables(), false);
    REQUIRE_THROWS_AS(velocity_autocorrelation(traj, {0.5}), std::invalid_argument);
    const auto traj2 = simulate_jump_process(3.0, 0.02, 10, 1.0, 1, tables(), true);
    REQUIRE_THROWS_AS(velocity_autocorrelation(traj2, {2.0}), std::invalid_argument);
}

TEST_CASE("energy is conserved along trajectories") {
    const auto traj = simulate_jump_process(2.5, 0.05, 200, 5.0, 101, tables(), true);
    for (std::size_t i = 0; i < traj.particles.size(); ++i) {
        REQUIRE(std::abs(dispersion_energy(traj.initial_momenta[i]) - 2.5) < 0.025);
        for (const auto& ev : traj.jump_log[i])
            REQUIRE(std::abs(dispersion_energy(ev.V) - 2.5) < 0.025);
    }
}

TEST_CASE("collision-free phase-space transport is ballistic") {
    PhaseSpaceDensity F0(24, 4, 3.0);
    const int iv0 = 1 * 16 + 2;  // some V cell
    const auto vc = F0.v_center(iv0);
    const auto s = boltzmann_velocity(vc);
    // X delta at the cell nearest the origin
    F0.x_cube(iv0)[(12 * 24 + 12) * 24 + 12] = 1.0;
    BoltzmannSolver solver(std::move(F0), tables(), 0.5);
    const double mass0 = solver.density().mass();

    const double dt = 0.02, T = 0.6;
    int nsteps = static_cast<int>(T / dt);
    for (int i = 0; i < nsteps; ++i) solver.step(dt, /*collisions=*/false);
    REQUIRE_THAT(solver.density().mass(), WithinAbs(mass0, 1e-10 * (1.0 + mass0)));

    // center of mass along each axis moved by sin(2 pi v) * T, exactly
    const auto mean = solver.x_center_of_mass();
    const double x0 = solver.density().x_center(12);
    for (int ax = 0; ax < 3; ++ax)
        REQUIRE_THAT(mean[ax] - x0, WithinAbs(s[ax] * dt * nsteps, 1e-9));
}

TEST_CASE("collisions relax the velocity marginal toward the shell average") {
    PhaseSpaceDensity F0(4, 8, 1.0);
    Rng rng(103, 0, 0);
    for (auto& v : F0.f) v = rng.uniform();
    BoltzmannSolver solver(std::move(F0), tables(), 0.5);
    const double mass0 = solver.density().mass();

    const double initial = solver.v_marginal_anisotropy();
    REQUIRE(initial > 0.0);
    double prev = initial;
    for (int i = 0; i < 30; ++i) {
        solver.collide(0.04);
        const double cur = solver.v_marginal_anisotropy();
        REQUIRE(cur <= prev + 1e-12);
        prev = cur;
    }
    // low-density bins near the band edges relax slowly, so the overall L1
    // distance shrinks well below the start but not uniformly fast
    REQUIRE(prev < 0.3 * initial);
    REQUIRE_THAT(solver.density().mass(), WithinAbs(mass0, 1e-10 * (1.0 + mass0)));
}

TEST_CASE("phase-space variance grows at the jump-process diffusion rate",
          "[slow][oracle]") {
    const int nv = 6, nx = 60;
    PhaseSpaceDensity F0(nx, nv, 6.0);
    const double ebin = 0.5;
    // populate exactly one solver energy bin, X concentrated at 0; collisions
    // then redistribute only inside that bin
    const double elo = 2.5, ehi = 3.0;
    const int xc = ((nx / 2) * nx + nx / 2) * nx + nx / 2;
    for (std::size_t iv = 0; iv < F0.ncells_v(); ++iv) {
        const double e = dispersion_energy(F0.v_center(static_cast<int>(iv)));
        if (e >= elo && e < ehi) F0.x_cube(static_cast<int>(iv))[xc] = 1.0;
    }
    BoltzmannSolver solver(std::move(F0), tables(), ebin);

    // reference diffusion constant from the same discrete cells and the same
    // per-bin rate the solver uses
    double sq = 0.0;
    int cnt = 0;
    for (std::size_t iv = 0; iv < solver.density().ncells_v(); ++iv) {
        const auto vc = solver.density().v_center(static_cast<int>(iv));
        const double e = dispersion_energy(vc);
        if (e < elo || e >= ehi) continue;
        const auto s = boltzmann_velocity(vc);
        sq += (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]) / 3.0;
        ++cnt;
    }
    const double rate = kTwoPi * tables().phi_at(0.5 * (elo + ehi));
    const double D_cells = (sq / cnt) / rate;

    const double dt = 0.04;
    const double mass0 = solver.density().mass();
    auto run_until = [&](double T, double Tstart) {
        for (double t = Tstart; t < T - 1e-9; t += dt) solver.step(dt);
    };
    run_until(3.0, 0.0);
    const double var3 = solver.x_marginal_variance();
    run_until(6.0, 3.0);
    const double var6 = solver.x_marginal_variance();
    REQUIRE_THAT(solver.density().mass(), WithinAbs(mass0, 1e-10 * (1.0 + mass0)));

    const double slope = (var6 - var3) / 3.0;
    REQUIRE_THAT(slope, WithinAbs(2.0 * D_cells, 0.1 * 2.0 * D_cells));
}

TEST_CASE("phase-space solver input validation") {
    REQUIRE_THROWS_AS(PhaseSpaceDensity(1, 4, 1.0), std::invalid_argument);
    PhaseSpaceDensity F0(4, 4, 1.0);
    F0.f[0] = 1.0;
    BoltzmannSolver solver(std::move(F0), tables(), 0.5);
    REQUIRE_THROWS_AS(solver.step(1.0), std::invalid_argument);  // rate * dt too big
}
