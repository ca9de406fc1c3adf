// twinstim command-line interface: fit, simulate, diagnose, search, repro, synth.
// Exit codes: 0 success, 2 validation/usage error, 3 non-convergence.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "twinstim/diagnostics.hpp"
#include "twinstim/io.hpp"
#include "twinstim/likelihood.hpp"
#include "twinstim/simulate.hpp"

namespace fs = std::filesystem;
using namespace twinstim;

namespace {

constexpr const char* kVersion = "twinstim 1.0.0";

constexpr const char* kSchema = R"(events file (JSON):
  {"version": 1, "origin_date": "YYYY-MM-DD", "types": ["B", ...],
   "events": [{"t": days>0, "x": km, "y": km, "type": "B",
               "marks": {"name": value}, "source": index|"endemic"}]}

grid file (JSON):
  {"version": 1,
   "tiles": [{"id": "...", "rings": [[[x,y],...]], "population": people}],
   "intervals": [{"start": days, "end": days}],
   "offset": [[rho per tile] per interval],
   "covariates": {"name": [[value per tile] per interval]}}

config file (JSON):
  {"version": 1,
   "endemic": {"intercept": "shared"|"per_type", "covariates": ["name", ...]},
   "epidemic": {"present": bool, "terms": ["type", "mark", ...]},
   "temporal": {"family": "constant"|"exponential", "shared": bool},
   "spatial": {"family": "constant"|"gaussian", "shared": bool},
   "epsilon": days, "delta": km, "Q": [[0|1,...],...],
   "tie_scheme": "epsilon_shift"|"uniform_subdaily", "seed": int,
   "cubature": {"disc_vertices", "cell_width_factor", "rel_tol", "max_refinements"},
   "optimizer": {"max_iterations", "grad_tol", "loglik_rel_tol"},
   "search": {"endemic_subsets": [[...]], "epidemic_subsets": [[...]|null]}}

theta file (JSON): either a plain array or a fit.json (its "theta" field is used).
)";

struct CommonArgs {
    std::string events_path, grid_path, config_path, theta_path, init_path;
    std::string out_dir = ".";
    std::uint64_t seed = 0;
    bool seed_given = false;
    int threads = 1;
    int replicates = -1;
};

void add_io_flags(CLI::App* cmd, CommonArgs& a, bool need_events, bool need_theta) {
    if (need_events)
        cmd->add_option("--events", a.events_path, "events JSON file")->required();
    else
        cmd->add_option("--events", a.events_path, "events JSON file (optional mark pool)");
    cmd->add_option("--grid", a.grid_path, "grid JSON file")->required();
    cmd->add_option("--config", a.config_path, "model config JSON file")->required();
    if (need_theta) cmd->add_option("--theta", a.theta_path, "parameter JSON (array or fit.json)")->required();
    cmd->add_option("--out", a.out_dir, "output directory (created if missing)");
    cmd->add_option("--seed", a.seed, "RNG seed (default: config seed)")
        ->each([&a](const std::string&) { a.seed_given = true; });
    cmd->add_option("--threads", a.threads, "worker threads")->check(CLI::PositiveNumber);
}

std::uint64_t effective_seed(const CommonArgs& a, const ModelSpec& spec) {
    return a.seed_given ? a.seed : spec.seed;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write file: " + path.string());
    out << text;
}

// events loaded with the config's tie scheme applied when duplicates exist
std::vector<Event> events_for_likelihood(const Bundle& b) {
    const auto& evs = b.events();
    bool tied = false;
    std::vector<double> ts;
    for (const auto& e : evs) ts.push_back(e.t);
    std::sort(ts.begin(), ts.end());
    for (std::size_t i = 1; i < ts.size(); ++i) tied = tied || ts[i] == ts[i - 1];
    if (!tied) return evs;
    return break_ties(evs, b.spec().tie_scheme, b.spec().seed);
}

json theta_json(const Vector& th) {
    return json(std::vector<double>(th.data(), th.data() + th.size()));
}

int cmd_fit(const CommonArgs& a) {
    const Bundle b = load_validate(a.events_path, a.grid_path, a.config_path);
    std::optional<Vector> init;
    if (!a.init_path.empty()) init = theta_from_json(io_detail::read_json_file(a.init_path));
    const auto events = events_for_likelihood(b);
    LikelihoodEvaluator ev(events, b.grid, b.spec(), a.threads);
    const FitResult res = fit(ev, init);
    fs::create_directories(a.out_dir);
    io_detail::write_json_file((fs::path(a.out_dir) / "fit.json").string(), fit_result_to_json(res));
    write_text(fs::path(a.out_dir) / "table.txt", wald_table(res));
    for (const auto& w : res.warnings) std::cerr << "warning: " << w << "\n";
    if (!res.converged) {
        std::cerr << "error: optimizer did not converge (gradient norm " << res.grad_norm << ")\n";
        return 3;
    }
    std::cout << "fit: loglik " << res.loglik << ", AIC " << res.aic << ", " << res.iterations
              << " iterations\n";
    return 0;
}

int cmd_simulate(const CommonArgs& a, bool synth_mode) {
    EventsFile pool;
    if (!a.events_path.empty())
        pool = parse_events(io_detail::read_json_file(a.events_path), a.events_path);
    const SpaceTimeGrid grid = parse_grid(io_detail::read_json_file(a.grid_path), a.grid_path);
    const ConfigFile config = parse_config(io_detail::read_json_file(a.config_path), a.config_path);
    config.spec.validate(grid);
    const Vector theta = theta_from_json(io_detail::read_json_file(a.theta_path));
    const auto layout = ParameterLayout::from_spec(config.spec);
    if (static_cast<int>(theta.size()) != layout.dim())
        throw IoError("theta has " + std::to_string(theta.size()) + " entries but the model needs " +
                      std::to_string(layout.dim()));
    if (!pool.types.empty() && static_cast<int>(pool.types.size()) != config.spec.K())
        throw IoError("type table of the mark pool does not match Q");

    fs::create_directories(a.out_dir);
    const std::uint64_t seed = effective_seed(a, config.spec);
    const int reps = synth_mode ? 1 : std::max(1, a.replicates < 0 ? 1 : a.replicates);
    for (int r = 0; r < reps; ++r) {
        const EventsFile out = synth(config, grid, theta, Rng::derive_seed(seed, r),
                                     pool.types, pool.events);
        const std::string name = reps == 1 ? "events.json" : "events_" + std::to_string(r) + ".json";
        io_detail::write_json_file((fs::path(a.out_dir) / name).string(),
                                   events_to_json(out, /*with_source=*/true));
        std::cout << name << ": " << out.events.size() << " events\n";
    }
    return 0;
}

int cmd_diagnose(const CommonArgs& a) {
    const Bundle b = load_validate(a.events_path, a.grid_path, a.config_path);
    const Vector theta = theta_from_json(io_detail::read_json_file(a.theta_path));
    const auto events = events_for_likelihood(b);
    LikelihoodEvaluator ev(events, b.grid, b.spec(), a.threads);
    if (static_cast<int>(theta.size()) != ev.layout().dim())
        throw IoError("theta has " + std::to_string(theta.size()) + " entries but the model needs " +
                      std::to_string(ev.layout().dim()));
    const auto res = rescaled_residuals(ev, theta);
    fs::create_directories(a.out_dir);

    {
        std::ofstream csv(fs::path(a.out_dir) / "residuals.csv");
        csv << "i,t,y,u\n";
        for (std::size_t i = 0; i < res.y.size(); ++i) {
            char line[128];
            std::snprintf(line, sizeof(line), "%zu,%.17g,%.17g,%.17g\n", i + 2,
                          ev.events()[i + 1].t, res.y[i], res.u[i]);
            csv << line;
        }
    }
    {
        json ks;
        ks["n"] = res.u.size();
        ks["statistic"] = res.ks_statistic;
        ks["band_halfwidth"] = res.band_halfwidth;
        ks["pass"] = res.ks_pass;
        io_detail::write_json_file((fs::path(a.out_dir) / "ks.json").string(), ks);
    }
    {
        // empirical CDF of the u-residuals with the 95% KS band, for plotting
        std::vector<double> u = res.u;
        std::sort(u.begin(), u.end());
        std::ofstream csv(fs::path(a.out_dir) / "ks_cdf.csv");
        csv << "u,ecdf,band_lo,band_hi\n";
        for (std::size_t i = 0; i < u.size(); ++i) {
            const double F = (i + 1.0) / u.size();
            char line[160];
            std::snprintf(line, sizeof(line), "%.17g,%.17g,%.17g,%.17g\n", u[i], F,
                          std::max(0.0, u[i] - res.band_halfwidth),
                          std::min(1.0, u[i] + res.band_halfwidth));
            csv << line;
        }
    }
    {
        const int n_sims = a.replicates < 0 ? 100 : a.replicates;
        const auto env = incidence_envelope(theta, events, b.grid, b.spec(), n_sims,
                                            effective_seed(a, b.spec()), a.threads);
        std::ofstream csv(fs::path(a.out_dir) / "envelope.csv");
        csv << "tile,id,observed_per_100k,q2.5,q97.5,status\n";
        for (const auto& te : env.tiles) {
            const char* status = te.excluded ? "excluded"
                                 : te.flagged_low ? "low"
                                 : te.flagged_high ? "high"
                                                   : "ok";
            char line[256];
            std::snprintf(line, sizeof(line), "%zu,%s,%.17g,%.17g,%.17g,%s\n", te.tile,
                          b.grid.tile_ids[te.tile].c_str(), te.observed_incidence, te.q_lo, te.q_hi,
                          status);
            csv << line;
        }
    }
    std::cout << "diagnose: KS statistic " << res.ks_statistic << " (band " << res.band_halfwidth
              << ") " << (res.ks_pass ? "pass" : "fail") << "\n";
    return 0;
}

int cmd_search(const CommonArgs& a) {
    const Bundle b = load_validate(a.events_path, a.grid_path, a.config_path);
    if (!b.config.search) throw IoError("config has no 'search' section");
    const auto& lattice = *b.config.search;
    if (lattice.endemic_subsets.empty() || lattice.epidemic_subsets.empty())
        throw IoError("search lattice must list at least one endemic and one epidemic subset");

    std::vector<std::pair<std::string, ModelSpec>> candidates;
    for (std::size_t ei = 0; ei < lattice.endemic_subsets.size(); ++ei) {
        for (std::size_t pi = 0; pi < lattice.epidemic_subsets.size(); ++pi) {
            ModelSpec spec = b.spec();
            spec.endemic_covariates = lattice.endemic_subsets[ei];
            if (lattice.epidemic_subsets[pi]) {
                spec.epidemic = true;
                spec.epidemic_terms = *lattice.epidemic_subsets[pi];
            } else {
                spec.epidemic = false;
                spec.epidemic_terms.clear();
            }
            spec.validate(b.grid);
            candidates.emplace_back("e" + std::to_string(ei) + "p" + std::to_string(pi), spec);
        }
    }

    const auto events = events_for_likelihood(b);
    const auto ranking = model_search(events, b.grid, candidates, a.threads);
    fs::create_directories(a.out_dir);
    std::ofstream csv(fs::path(a.out_dir) / "ranking.csv");
    csv << "rank,label,dim,loglik,aic,converged,error\n";
    int rank = 1;
    for (const auto& e : ranking) {
        if (e.ok) {
            char line[512];
            std::snprintf(line, sizeof(line), "%d,%s,%d,%.17g,%.17g,%d,\n", rank, e.label.c_str(),
                          e.result.dim(), e.result.loglik, e.result.aic, e.result.converged ? 1 : 0);
            csv << line;
            io_detail::write_json_file(
                (fs::path(a.out_dir) / ("fit_" + std::to_string(rank) + ".json")).string(),
                fit_result_to_json(e.result));
        } else {
            csv << rank << "," << e.label << ",,,,," << e.error << "\n";
        }
        ++rank;
    }
    std::cout << "search: " << ranking.size() << " fits ranked; best "
              << (ranking.empty() || !ranking.front().ok ? std::string("n/a") : ranking.front().label)
              << "\n";
    return 0;
}

int cmd_repro(const CommonArgs& a) {
    const Bundle b = load_validate(a.events_path, a.grid_path, a.config_path);
    if (!b.spec().epidemic) throw IoError("reproduction numbers need an epidemic component");
    const json fit_json = io_detail::read_json_file(a.theta_path);
    const Vector theta = theta_from_json(fit_json);
    const auto layout = ParameterLayout::from_spec(b.spec());
    if (static_cast<int>(theta.size()) != layout.dim())
        throw IoError("theta has " + std::to_string(theta.size()) + " entries but the model needs " +
                      std::to_string(layout.dim()));
    Matrix cov = Matrix::Zero(layout.dim(), layout.dim());
    if (fit_json.is_object() && fit_json.contains("covariance")) {
        const auto& jc = fit_json["covariance"];
        for (int r = 0; r < layout.dim(); ++r)
            for (int c = 0; c < layout.dim(); ++c) cov(r, c) = jc.at(r).at(c).get<double>();
    }
    const int B = a.replicates < 0 ? 999 : a.replicates;
    std::vector<std::string> warnings;
    const auto reps =
        reproduction_numbers(theta, cov, b.events(), b.spec(), B, effective_seed(a, b.spec()), &warnings);
    json out;
    out["version"] = 1;
    out["bootstrap_draws"] = B;
    out["types"] = json::array();
    for (const auto& r : reps) {
        json jt;
        jt["type"] = b.events_file.types.at(r.type);
        jt["mu_hat"] = r.mu_hat;
        jt["ci_2.5"] = r.ci_lo;
        jt["ci_97.5"] = r.ci_hi;
        out["types"].push_back(std::move(jt));
    }
    out["warnings"] = warnings;
    fs::create_directories(a.out_dir);
    io_detail::write_json_file((fs::path(a.out_dir) / "mu.json").string(), out);
    for (const auto& r : reps)
        std::cout << "mu[" << b.events_file.types.at(r.type) << "] = " << r.mu_hat << " (" << r.ci_lo
                  << " - " << r.ci_hi << ")\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"twinstim: two-component spatio-temporal point process modelling"};
    app.require_subcommand(0, 1);
    bool show_version = false, show_schema = false;
    app.add_flag("--version", show_version, "print version and exit");
    app.add_flag("--schema", show_schema, "print the JSON file schemas and exit");

    CommonArgs fit_a, sim_a, synth_a, diag_a, search_a, repro_a;

    auto* c_fit = app.add_subcommand("fit", "maximum likelihood fit");
    add_io_flags(c_fit, fit_a, true, false);
    c_fit->add_option("--init", fit_a.init_path, "initial parameter JSON");

    auto* c_sim = app.add_subcommand("simulate", "simulate trajectories at given parameters");
    add_io_flags(c_sim, sim_a, false, true);
    c_sim->add_option("--replicates", sim_a.replicates, "number of trajectories")
        ->check(CLI::PositiveNumber);

    auto* c_synth = app.add_subcommand("synth", "generate one synthetic events file");
    add_io_flags(c_synth, synth_a, false, true);

    auto* c_diag = app.add_subcommand("diagnose", "residuals, KS test, incidence envelope");
    add_io_flags(c_diag, diag_a, true, true);
    c_diag->add_option("--replicates", diag_a.replicates, "envelope simulations (default 100)")
        ->check(CLI::PositiveNumber);

    auto* c_search = app.add_subcommand("search", "AIC model search over the config lattice");
    add_io_flags(c_search, search_a, true, false);

    auto* c_repro = app.add_subcommand("repro", "reproduction numbers with bootstrap CIs");
    add_io_flags(c_repro, repro_a, true, true);
    c_repro->add_option("--replicates", repro_a.replicates, "bootstrap draws (default 999)")
        ->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n" << app.help();
        return 2;
    }

    if (show_version) {
        std::cout << kVersion << "\n";
        return 0;
    }
    if (show_schema) {
        std::cout << kSchema;
        return 0;
    }

    try {
        if (c_fit->parsed()) return cmd_fit(fit_a);
        if (c_sim->parsed()) return cmd_simulate(sim_a, false);
        if (c_synth->parsed()) return cmd_simulate(synth_a, true);
        if (c_diag->parsed()) return cmd_diagnose(diag_a);
        if (c_search->parsed()) return cmd_search(search_a);
        if (c_repro->parsed()) return cmd_repro(repro_a);
        std::cerr << app.help();
        return 2;
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return 2;
    }
}
