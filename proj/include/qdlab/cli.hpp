#ifndef QDLAB_CLI_HPP
#define QDLAB_CLI_HPP

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "qdlab/boltzmann.hpp"
#include "qdlab/diagrams.hpp"
#include "qdlab/heat.hpp"
#include "qdlab/schrodinger.hpp"
#include "qdlab/spectral.hpp"
#include "qdlab/wigner.hpp"

#include <json.hpp>

namespace qdlab {

inline const char* kArtifactVersion = "1.0.0";

// exit codes of the batch runner
enum ExitCode : int {
    exit_ok = 0,
    exit_config_error = 2,
    exit_numerical_failure = 3,
    exit_partial = 4,
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Fully resolved run description: subcommand, typed parameters (stored as
// strings, validated on parse), output directory, and the master seed every
// derived RNG stream is keyed from.
struct RunConfig {
    std::string subcommand;
    std::map<std::string, std::string> params;
    std::string out_dir = ".";
    std::uint64_t seed = 1;
};

namespace detail {

// recognized keys with their default values, per subcommand; anything else
// in a config file or override list is rejected
inline const std::map<std::string, std::map<std::string, std::string>>&
subcommand_defaults() {
    static const std::map<std::string, std::map<std::string, std::string>> d = {
        {"spectral", {{"n", "4000000"}, {"de", "0.02"}}},
        {"shell", {{"a", "3.0"}, {"delta", "0.05"}, {"n", "200000"},
                   {"phi_n", "2000000"}, {"phi_de", "0.02"}}},
        {"boltzmann", {{"a", "3.0"}, {"delta", "0.05"}, {"n", "20000"},
                       {"T", "10.0"}, {"phi_n", "2000000"}, {"phi_de", "0.02"}}},
        {"evolve", {{"lambda", "0.4"}, {"L", "32"}, {"t", "2.0"}, {"dt", "0.05"},
                    {"width", "1.0"}, {"realizations", "8"}}},
        {"wigner", {{"L", "8"}, {"e_lo", "2.3"}, {"e_hi", "2.7"},
                    {"eps", "0.1"}}},
        {"ladder", {{"lambda", "0.1"}, {"kappa", "0.0833333333333333"},
                    {"T", "1.0"}, {"delta", "1.0"}, {"L", "16"},
                    {"e_lo", "2.3"}, {"e_hi", "2.7"}, {"n_mc", "100000"},
                    {"phi_n", "2000000"}, {"phi_de", "0.02"}}},
        {"coeffs", {{"n_max", "6"}}},
        {"compare",
         {{"lambdas", "0.5,0.4,0.3"}, {"T", "0.5"}, {"L", "48"},
          {"realizations", "12"}, {"kappa", "0.0833333333333333"},
          {"packet_width", "1.0"}, {"shell_delta", "0.05"},
          {"jump_particles", "20000"}, {"fit_points", "4"}, {"dt", "0.05"},
          {"ladder_lambdas", "0.2,0.1"}, {"ladder_T", "0.5"},
          {"ladder_delta", "1.0"}, {"ladder_L", "16"}, {"ladder_mc", "20000"},
          {"shell_samples", "2000000"}, {"phi_n", "2000000"},
          {"phi_de", "0.02"}}},
    };
    return d;
}

inline double parse_double(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    double x = 0.0;
    try {
        x = std::stod(v, &pos);
    } catch (const std::exception&) {
        throw ConfigError("type mismatch for key '" + key + "': '" + v + "'");
    }
    if (pos != v.size())
        throw ConfigError("type mismatch for key '" + key + "': '" + v + "'");
    return x;
}

inline std::int64_t parse_int(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    std::int64_t x = 0;
    try {
        x = std::stoll(v, &pos);
    } catch (const std::exception&) {
        throw ConfigError("type mismatch for key '" + key + "': '" + v + "'");
    }
    if (pos != v.size())
        throw ConfigError("type mismatch for key '" + key + "': '" + v + "'");
    return x;
}

inline std::vector<double> parse_double_list(const std::string& key,
                                             const std::string& v) {
    std::vector<double> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(parse_double(key, item));
    if (out.empty()) throw ConfigError("empty list for key '" + key + "'");
    return out;
}

inline bool is_list_key(const std::string& key) {
    return key == "lambdas" || key == "ladder_lambdas";
}

inline bool is_int_key(const std::string& key) {
    return key == "n" || key == "L" || key == "realizations" || key == "n_mc" ||
           key == "n_max" || key == "jump_particles" || key == "fit_points" ||
           key == "ladder_L" || key == "ladder_mc" || key == "shell_samples" ||
           key == "phi_n";
}

inline void apply_pair(RunConfig& cfg,
                       const std::map<std::string, std::string>& known,
                       const std::string& key, const std::string& value) {
    if (!known.count(key))
        throw ConfigError("unknown key '" + key + "' for subcommand '" +
                          cfg.subcommand + "'");
    // validate the value's type up front
    if (is_list_key(key))
        parse_double_list(key, value);
    else if (is_int_key(key))
        parse_int(key, value);
    else
        parse_double(key, value);
    cfg.params[key] = value;
}

}  // namespace detail

// Resolve a run configuration from defaults, an optional config file, and
// command-line overrides, in that order of increasing precedence.  The config
// file is either plain "key = value" lines (# comments allowed) or a manifest
// JSON written by a previous run, which reproduces that run.
inline RunConfig parse_config(const std::string& subcommand,
                              const std::string& config_path,
                              const std::vector<std::string>& overrides,
                              const std::string& out_dir, std::uint64_t seed) {
    const auto& all = detail::subcommand_defaults();
    const auto it = all.find(subcommand);
    if (it == all.end())
        throw ConfigError("unknown subcommand '" + subcommand + "'");
    RunConfig cfg;
    cfg.subcommand = subcommand;
    cfg.params = it->second;
    cfg.out_dir = out_dir;
    cfg.seed = seed;

    if (!config_path.empty()) {
        std::ifstream in(config_path);
        if (!in) throw ConfigError("cannot open config file " + config_path);
        std::stringstream buf;
        buf << in.rdbuf();
        std::string text = buf.str();
        const std::size_t first = text.find_first_not_of(" \t\r\n");
        if (first != std::string::npos && text[first] == '{') {
            // manifest JSON from a previous run
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(text);
            } catch (const std::exception& e) {
                throw ConfigError(std::string("bad manifest: ") + e.what());
            }
            if (j.value("subcommand", subcommand) != subcommand)
                throw ConfigError("manifest is for subcommand '" +
                                  j.value("subcommand", std::string()) + "'");
            if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
            for (const auto& [k, v] : j.value("params",
                                              std::map<std::string, std::string>()))
                detail::apply_pair(cfg, it->second, k, v);
        } else {
            std::stringstream lines(text);
            std::string line;
            int lineno = 0;
            while (std::getline(lines, line)) {
                ++lineno;
                const std::size_t hash = line.find('#');
                if (hash != std::string::npos) line.erase(hash);
                const auto trim = [](std::string s) {
                    const auto a = s.find_first_not_of(" \t\r");
                    const auto b = s.find_last_not_of(" \t\r");
                    return a == std::string::npos ? std::string()
                                                  : s.substr(a, b - a + 1);
                };
                if (trim(line).empty()) continue;
                const std::size_t eq = line.find('=');
                if (eq == std::string::npos)
                    throw ConfigError("line " + std::to_string(lineno) +
                                      ": expected key = value");
                detail::apply_pair(cfg, it->second, trim(line.substr(0, eq)),
                                   trim(line.substr(eq + 1)));
            }
        }
    }
    for (const auto& ov : overrides) {
        const std::size_t eq = ov.find('=');
        if (eq == std::string::npos)
            throw ConfigError("override '" + ov + "': expected key=value");
        detail::apply_pair(cfg, it->second, ov.substr(0, eq), ov.substr(eq + 1));
    }

    // the ladder expansion is only controlled for kappa in (0, 1/12]
    if (cfg.params.count("kappa")) {
        const double kappa = detail::parse_double("kappa", cfg.params["kappa"]);
        if (!(kappa > 0.0 && kappa <= 1.0 / 12.0 + 1e-12))
            throw ConfigError(
                "kappa = " + cfg.params["kappa"] +
                " violates the ladder-probe precondition kappa in (0, 1/12]");
    }
    return cfg;
}

namespace detail {

struct RunResult {
    int code = exit_ok;
    std::vector<std::string> outputs;
    std::vector<std::string> summary;
};

inline double pget(const RunConfig& c, const std::string& k) {
    return parse_double(k, c.params.at(k));
}
inline std::int64_t iget(const RunConfig& c, const std::string& k) {
    return parse_int(k, c.params.at(k));
}

inline SpectralTables tables_for(const RunConfig& c) {
    return build_phi(iget(c, "phi_n"), pget(c, "phi_de"), c.seed);
}

inline RunResult run_spectral(const RunConfig& c) {
    RunResult r;
    const auto t = build_phi(iget(c, "n"), pget(c, "de"), c.seed);
    const std::string path = c.out_dir + "/phi_table.csv";
    save_tables_csv(t, path);
    r.outputs.push_back(path);
    double integral = 0.0;
    for (double p : t.phi) integral += p * t.de;
    std::ostringstream line;
    line.precision(12);
    line << "phi_integral = " << integral << " (target 1 within 0.01)";
    r.summary.push_back(line.str());
    r.summary.push_back("cusp_exponent_fit = " + std::to_string(t.cusp_slope));
    if (std::abs(integral - 1.0) > 0.01) {
        r.summary.push_back("FAIL: density of states does not integrate to 1");
        r.code = exit_numerical_failure;
    }
    return r;
}

inline RunResult run_shell(const RunConfig& c) {
    RunResult r;
    const auto tab = tables_for(c);
    const double a = pget(c, "a");
    const auto shell = shell_sample(a, pget(c, "delta"), iget(c, "n"), c.seed);
    const auto D = diffusion_matrix(a, shell, tab);
    const std::string path = c.out_dir + "/diffusion_matrix.csv";
    std::ofstream out(path);
    out.precision(17);
    out << "i,j,D,stderr\n";
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            out << i << ',' << j << ',' << D.mat[i][j] << ','
                << D.mat_stderr[i][j] << '\n';
    r.outputs.push_back(path);
    std::ostringstream line;
    line.precision(12);
    line << "scalar_D(" << a << ") = " << D.scalar << " +/- " << D.scalar_stderr
         << ", shell acceptance " << shell.acceptance;
    r.summary.push_back(line.str());
    return r;
}

inline RunResult run_boltzmann(const RunConfig& c) {
    RunResult r;
    const auto tab = tables_for(c);
    const double a = pget(c, "a");
    const auto traj = simulate_jump_process(a, pget(c, "delta"), iget(c, "n"),
                                            pget(c, "T"), c.seed, tab,
                                            /*store_log=*/false);
    const auto msd = mean_square_displacement(traj);
    const std::string path = c.out_dir + "/boltzmann_msd.csv";
    std::ofstream out(path);
    out.precision(17);
    out << "T,msd,msd_stderr,diffusion,diffusion_stderr\n";
    out << msd.T << ',' << msd.msd << ',' << msd.msd_stderr << ','
        << msd.diffusion << ',' << msd.diffusion_stderr << '\n';
    r.outputs.push_back(path);
    std::ostringstream line;
    line.precision(12);
    line << "msd(" << msd.T << ") = " << msd.msd << " +/- " << msd.msd_stderr
         << ", implied D = " << msd.diffusion;
    r.summary.push_back(line.str());
    return r;
}

inline RunResult run_evolve(const RunConfig& c) {
    RunResult r;
    const int L = static_cast<int>(iget(c, "L"));
    LatticeGrid g(L);
    const auto psi0 = gaussian_packet_state(g, {L / 2, L / 2, L / 2},
                                            pget(c, "width"),
                                            TorusPoint(0.25, 0.25, 0.25));
    EvolutionConfig ec;
    ec.lambda = pget(c, "lambda");
    ec.t = pget(c, "t");
    ec.dt = pget(c, "dt");
    const auto rec = run_ensemble(
        psi0, ec, PotentialKind::rademacher,
        static_cast<int>(iget(c, "realizations")),
        {{"variance",
          [](const ComplexField& f) { return position_variance(f); }}},
        c.seed);
    const std::string path = c.out_dir + "/evolve_variance.csv";
    std::ofstream out(path);
    out.precision(17);
    out << "lambda,t,variance,stderr,realizations\n";
    out << ec.lambda << ',' << ec.t << ',' << rec.mean(0) << ','
        << rec.stderr_of(0) << ',' << rec.realizations << '\n';
    r.outputs.push_back(path);
    std::ostringstream line;
    line.precision(12);
    line << "variance(t=" << ec.t << ") = " << rec.mean(0) << " +/- "
         << rec.stderr_of(0) << " from variance(0) = "
         << position_variance(psi0);
    r.summary.push_back(line.str());
    if (rec.moment_check_failures > 0) {
        r.summary.push_back("WARNING: potential moment checks failed on " +
                            std::to_string(rec.moment_check_failures) +
                            " realizations");
        r.code = exit_partial;
    }
    return r;
}

inline RunResult run_wigner(const RunConfig& c) {
    RunResult r;
    const int L = static_cast<int>(iget(c, "L"));
    LatticeGrid g(L);
    const auto psi = momentum_bump_state(g, pget(c, "e_lo"), pget(c, "e_hi"));
    const auto w = wigner_transform(psi);
    const double eps = pget(c, "eps");
    const std::string path = c.out_dir + "/wigner_snapshot.csv";
    save_wigner_snapshot_csv(w, eps, 60, path);
    r.outputs.push_back(path);

    // marginal residuals against |psi|^2 in both representations
    const auto ph = fourier_forward(psi);
    double res_x = 0.0, res_v = 0.0;
    for (int a = 0; a < L; ++a) {
        res_x = std::max(res_x, std::abs(wigner_x_marginal(w, {a, 0, 0}) -
                                         std::norm(ph.at(a, 0, 0))));
        res_v = std::max(
            res_v, std::abs(wigner_v_marginal(w, {2 * a, 0, 0}) -
                            8.0 * std::norm(psi.at(a, 0, 0))));
    }
    std::ostringstream line;
    line.precision(6);
    line << "max marginal residual along an axis: momentum " << res_x
         << ", position " << res_v;
    r.summary.push_back(line.str());

    Observable obs;
    obs.sigma = {0.5, 0.5, 0.5};
    const Complex val = pair_observable(w, obs, eps);
    std::ostringstream line2;
    line2.precision(12);
    line2 << "Gaussian observable pairing at eps = " << eps << ": "
          << val.real() << " + " << val.imag() << "i";
    r.summary.push_back(line2.str());
    return r;
}

inline RunResult run_ladder(const RunConfig& c) {
    RunResult r;
    const auto tab = tables_for(c);
    const int L = static_cast<int>(iget(c, "L"));
    LatticeGrid g(L);
    const auto psi0 = momentum_bump_state(g, pget(c, "e_lo"), pget(c, "e_hi"));
    ExperimentScale sc(pget(c, "lambda"), pget(c, "kappa"), pget(c, "T"),
                       pget(c, "delta"));
    const std::int64_t n_mc = iget(c, "n_mc");
    std::vector<LadderEstimate> vals;
    double total = 0.0, err2 = 0.0;
    bool flagged = false;
    for (int k = 0; k < sc.K(); ++k) {
        vals.push_back(ladder_value(k, sc, psi0, n_mc, c.seed, tab));
        total += vals.back().V;
        err2 += vals.back().std_err * vals.back().std_err;
        flagged = flagged || vals.back().flagged;
    }
    const std::string path = c.out_dir + "/ladder_values.csv";
    save_ladder_csv(vals, sc, path);
    r.outputs.push_back(path);
    std::ostringstream line;
    line.precision(12);
    line << "sum_k V(k) over k < " << sc.K() << " = " << total << " +/- "
         << std::sqrt(err2) << " (state mass 1)";
    r.summary.push_back(line.str());
    if (flagged) {
        r.summary.push_back(
            "WARNING: at least one term has standard error above half its value");
        r.code = exit_partial;
    }
    return r;
}

inline RunResult run_coeffs(const RunConfig& c) {
    RunResult r;
    const int n_max = static_cast<int>(iget(c, "n_max"));
    const std::string path = c.out_dir + "/connected_coefficients.csv";
    save_coefficients_csv(n_max, path);
    r.outputs.push_back(path);
    for (int n = 1; n <= n_max; ++n)
        r.summary.push_back("c(" + std::to_string(n) + ") = " +
                            std::to_string(connected_graph_coefficient(n)));
    return r;
}

inline RunResult run_compare(const RunConfig& c) {
    RunResult r;
    const auto tab = tables_for(c);
    ComparisonConfig cc;
    cc.lambdas = parse_double_list("lambdas", c.params.at("lambdas"));
    cc.T = pget(c, "T");
    cc.L = static_cast<int>(iget(c, "L"));
    cc.realizations = static_cast<int>(iget(c, "realizations"));
    cc.kappa_cap = pget(c, "kappa");
    cc.packet_width = pget(c, "packet_width");
    cc.shell_delta = pget(c, "shell_delta");
    cc.jump_particles = iget(c, "jump_particles");
    cc.fit_points = static_cast<int>(iget(c, "fit_points"));
    cc.dt = pget(c, "dt");
    cc.ladder_lambdas = parse_double_list("ladder_lambdas",
                                          c.params.at("ladder_lambdas"));
    cc.ladder_T = pget(c, "ladder_T");
    cc.ladder_kappa = pget(c, "kappa");
    cc.ladder_delta = pget(c, "ladder_delta");
    cc.ladder_L = static_cast<int>(iget(c, "ladder_L"));
    cc.ladder_mc = iget(c, "ladder_mc");
    cc.shell_samples = iget(c, "shell_samples");
    cc.seed = c.seed;

    const auto rep = run_comparison(cc, tab);
    const std::string jpath = c.out_dir + "/comparison_report.json";
    const std::string cpath = c.out_dir + "/comparison_curves.csv";
    save_comparison_json(rep, jpath);
    save_comparison_csv(rep, cpath);
    r.outputs.push_back(jpath);
    r.outputs.push_back(cpath);
    for (const auto& run : rep.lambda_runs) {
        std::ostringstream line;
        line.precision(6);
        if (run.ok)
            line << "lambda " << run.lambda << ": quantum msd "
                 << run.quantum_msd << " +/- " << run.quantum_msd_stderr
                 << ", jump-process msd " << run.boltzmann_msd << " +/- "
                 << run.boltzmann_msd_stderr << ", heat msd " << run.heat_msd
                 << ", gap " << run.gap << " +/- " << run.gap_stderr;
        else
            line << "lambda " << run.lambda << ": FAILED (" << run.error << ")";
        r.summary.push_back(line.str());
    }
    for (const auto& run : rep.ladder_runs) {
        std::ostringstream line;
        line.precision(6);
        if (run.ok)
            line << "ladder lambda " << run.lambda << " observable "
                 << run.observable << ": relative gap to heat pairing "
                 << run.rel_gap << " +/- " << run.rel_gap_stderr;
        else
            line << "ladder lambda " << run.lambda << ": FAILED (" << run.error
                 << ")";
        r.summary.push_back(line.str());
    }
    r.summary.push_back(std::string("gap monotone along lambda: ") +
                        (rep.gap_monotone ? "yes" : "no"));
    r.summary.push_back(std::string("ladder gap shrinking: ") +
                        (rep.ladder_gap_shrinks ? "yes" : "no"));
    if (rep.partial) {
        r.summary.push_back("WARNING: partial results; see errors above");
        r.code = exit_partial;
    }
    return r;
}

inline void write_manifest(const RunConfig& cfg, const RunResult& r,
                           const std::string& path) {
    nlohmann::json j;
    j["artifact_version"] = kArtifactVersion;
    j["subcommand"] = cfg.subcommand;
    j["seed"] = cfg.seed;
    j["out_dir"] = cfg.out_dir;
    j["params"] = cfg.params;
    j["outputs"] = r.outputs;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write manifest " + path);
    out << j.dump(2) << '\n';
}

}  // namespace detail

// Run one configured subcommand: produces the data files, a human-readable
// summary, and a manifest that reproduces the run bit-for-bit when passed
// back through --config.
inline int dispatch(const RunConfig& cfg, std::ostream& log) {
    detail::RunResult r;
    try {
        if (cfg.subcommand == "spectral")
            r = detail::run_spectral(cfg);
        else if (cfg.subcommand == "shell")
            r = detail::run_shell(cfg);
        else if (cfg.subcommand == "boltzmann")
            r = detail::run_boltzmann(cfg);
        else if (cfg.subcommand == "evolve")
            r = detail::run_evolve(cfg);
        else if (cfg.subcommand == "wigner")
            r = detail::run_wigner(cfg);
        else if (cfg.subcommand == "ladder")
            r = detail::run_ladder(cfg);
        else if (cfg.subcommand == "coeffs")
            r = detail::run_coeffs(cfg);
        else if (cfg.subcommand == "compare")
            r = detail::run_compare(cfg);
        else
            throw ConfigError("unknown subcommand '" + cfg.subcommand + "'");
    } catch (const ConfigError& e) {
        log << "config error: " << e.what() << '\n';
        return exit_config_error;
    } catch (const std::exception& e) {
        log << "numerical failure: " << e.what() << '\n';
        return exit_numerical_failure;
    }

    const std::string mpath =
        cfg.out_dir + "/" + cfg.subcommand + "_manifest.json";
    const std::string spath =
        cfg.out_dir + "/" + cfg.subcommand + "_summary.txt";
    detail::RunResult with_summary = r;
    with_summary.outputs.push_back(spath);
    detail::write_manifest(cfg, with_summary, mpath);
    std::ofstream sum(spath);
    for (const auto& line : r.summary) sum << line << '\n';
    for (const auto& line : r.summary) log << line << '\n';
    log << "outputs and manifest written to " << cfg.out_dir << '\n';
    return r.code;
}

}  // namespace qdlab

#endif
