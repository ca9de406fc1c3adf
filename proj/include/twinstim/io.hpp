#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "twinstim/likelihood.hpp"
#include "twinstim/model.hpp"
#include "twinstim/simulate.hpp"

namespace twinstim {

using json = nlohmann::ordered_json;

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace io_detail {

inline json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open file: " + path);
    json j;
    try {
        in >> j;
    } catch (const std::exception& ex) {
        throw IoError(path + ": JSON parse error: " + ex.what());
    }
    return j;
}

inline void write_json_file(const std::string& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write file: " + path);
    out << j.dump(2) << "\n";
}

inline void reject_unknown_keys(const json& obj, const std::set<std::string>& known,
                                const std::string& where) {
    for (const auto& [key, value] : obj.items())
        if (!known.count(key)) throw IoError(where + ": unknown key '" + key + "'");
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw IoError(msg);
}

} // namespace io_detail

// --- events file -----------------------------------------------------------

struct EventsFile {
    int version = 1;
    std::string origin_date;
    std::vector<std::string> types;
    std::vector<Event> events; // Event::type is the index into `types`
};

inline EventsFile parse_events(const json& j, const std::string& where = "events") {
    io_detail::reject_unknown_keys(j, {"version", "origin_date", "types", "events"}, where);
    io_detail::require(j.contains("version") && j["version"].is_number_integer(),
                       where + ": missing integer 'version'");
    EventsFile out;
    out.version = j["version"].get<int>();
    io_detail::require(out.version == 1, where + ": unsupported schema version");
    out.origin_date = j.value("origin_date", "");
    io_detail::require(j.contains("types") && j["types"].is_array() && !j["types"].empty(),
                       where + ": 'types' must be a non-empty array");
    for (const auto& t : j["types"]) out.types.push_back(t.get<std::string>());
    io_detail::require(j.contains("events") && j["events"].is_array(), where + ": 'events' must be an array");
    std::size_t idx = 0;
    for (const auto& je : j["events"]) {
        const std::string at = where + ": event " + std::to_string(idx);
        io_detail::reject_unknown_keys(je, {"t", "x", "y", "type", "marks", "source"}, at);
        Event ev;
        io_detail::require(je.contains("t") && je["t"].is_number(), at + ": missing numeric 't'");
        ev.t = je["t"].get<double>();
        io_detail::require(ev.t > 0.0, at + ": time must be strictly positive (domain is (0,T])");
        io_detail::require(je.contains("x") && je.contains("y"), at + ": missing coordinates");
        ev.s = {je["x"].get<double>(), je["y"].get<double>()};
        io_detail::require(je.contains("type"), at + ": missing 'type'");
        const std::string tname = je["type"].get<std::string>();
        const auto it = std::find(out.types.begin(), out.types.end(), tname);
        io_detail::require(it != out.types.end(), at + ": type '" + tname + "' not in the type table");
        ev.type = static_cast<int>(it - out.types.begin());
        if (je.contains("marks"))
            for (const auto& [name, value] : je["marks"].items()) {
                io_detail::require(value.is_number(), at + ": mark '" + name + "' must be numeric");
                ev.marks[name] = value.get<double>();
                io_detail::require(std::isfinite(ev.marks[name]), at + ": mark '" + name + "' not finite");
            }
        if (je.contains("source")) {
            if (je["source"].is_string()) {
                io_detail::require(je["source"] == "endemic", at + ": source must be an index or 'endemic'");
                ev.source = -1;
            } else {
                ev.source = je["source"].get<int>();
            }
        }
        out.events.push_back(std::move(ev));
        ++idx;
    }
    return out;
}

inline json events_to_json(const EventsFile& ef, bool with_source = false) {
    json j;
    j["version"] = ef.version;
    j["origin_date"] = ef.origin_date;
    j["types"] = ef.types;
    j["events"] = json::array();
    for (const auto& ev : ef.events) {
        json je;
        je["t"] = ev.t;
        je["x"] = ev.s.x;
        je["y"] = ev.s.y;
        je["type"] = ef.types.at(ev.type);
        je["marks"] = json::object();
        for (const auto& [name, value] : ev.marks) je["marks"][name] = value;
        if (with_source) {
            if (ev.source < 0)
                je["source"] = "endemic";
            else
                je["source"] = ev.source;
        }
        j["events"].push_back(std::move(je));
    }
    return j;
}

// --- grid file -------------------------------------------------------------

inline SpaceTimeGrid parse_grid(const json& j, const std::string& where = "grid") {
    io_detail::reject_unknown_keys(j, {"version", "tiles", "intervals", "offset", "covariates"}, where);
    io_detail::require(j.value("version", 1) == 1, where + ": unsupported schema version");
    SpaceTimeGrid grid;
    io_detail::require(j.contains("tiles") && j["tiles"].is_array() && !j["tiles"].empty(),
                       where + ": 'tiles' must be a non-empty array");
    for (const auto& jt : j["tiles"]) {
        io_detail::reject_unknown_keys(jt, {"id", "rings", "population"}, where + ": tile");
        Polygon poly;
        io_detail::require(jt.contains("rings") && jt["rings"].is_array(), where + ": tile missing 'rings'");
        for (const auto& jring : jt["rings"]) {
            Ring ring;
            for (const auto& jpt : jring) {
                io_detail::require(jpt.is_array() && jpt.size() == 2, where + ": ring point must be [x,y]");
                ring.push_back({jpt[0].get<double>(), jpt[1].get<double>()});
            }
            poly.rings.push_back(std::move(ring));
        }
        grid.tiles.push_back(std::move(poly));
        grid.tile_ids.push_back(jt.value("id", std::to_string(grid.tiles.size() - 1)));
        grid.tile_population.push_back(jt.value("population", std::numeric_limits<double>::quiet_NaN()));
    }
    io_detail::require(j.contains("intervals") && j["intervals"].is_array() && !j["intervals"].empty(),
                       where + ": 'intervals' must be a non-empty array");
    for (const auto& ji : j["intervals"]) {
        io_detail::reject_unknown_keys(ji, {"start", "end"}, where + ": interval");
        grid.intervals.emplace_back(ji["start"].get<double>(), ji["end"].get<double>());
    }
    const std::size_t D = grid.intervals.size(), M = grid.tiles.size();
    io_detail::require(j.contains("offset"), where + ": missing 'offset' table");
    {
        const auto& jo = j["offset"];
        io_detail::require(jo.is_array() && jo.size() == D, where + ": offset must have one row per interval");
        for (const auto& row : jo) {
            io_detail::require(row.is_array() && row.size() == M,
                               where + ": offset rows must have one entry per tile");
            std::vector<double> r;
            for (const auto& v : row) r.push_back(v.get<double>());
            grid.offset.push_back(std::move(r));
        }
    }
    if (j.contains("covariates")) {
        for (const auto& [name, table] : j["covariates"].items()) {
            io_detail::require(table.is_array() && table.size() == D,
                               where + ": covariate '" + name + "' must have dimensions " +
                                   std::to_string(D) + "x" + std::to_string(M));
            std::vector<std::vector<double>> t;
            for (const auto& row : table) {
                io_detail::require(row.is_array() && row.size() == M,
                                   where + ": covariate '" + name + "' must have dimensions " +
                                       std::to_string(D) + "x" + std::to_string(M));
                std::vector<double> r;
                for (const auto& v : row) r.push_back(v.get<double>());
                t.push_back(std::move(r));
            }
            grid.covariates[name] = std::move(t);
        }
    }
    try {
        grid.finalize();
    } catch (const std::exception& ex) {
        throw IoError(where + ": " + ex.what());
    }
    return grid;
}

inline json grid_to_json(const SpaceTimeGrid& grid) {
    json j;
    j["version"] = 1;
    j["tiles"] = json::array();
    for (std::size_t m = 0; m < grid.n_tiles(); ++m) {
        json jt;
        jt["id"] = grid.tile_ids[m];
        jt["rings"] = json::array();
        for (const auto& ring : grid.tiles[m].rings) {
            json jr = json::array();
            for (const auto& pt : ring) jr.push_back({pt.x, pt.y});
            jt["rings"].push_back(std::move(jr));
        }
        if (std::isfinite(grid.tile_population[m])) jt["population"] = grid.tile_population[m];
        j["tiles"].push_back(std::move(jt));
    }
    j["intervals"] = json::array();
    for (const auto& iv : grid.intervals) j["intervals"].push_back({{"start", iv.first}, {"end", iv.second}});
    j["offset"] = grid.offset;
    j["covariates"] = json::object();
    for (const auto& [name, table] : grid.covariates) j["covariates"][name] = table;
    return j;
}

// --- config file -----------------------------------------------------------

struct SearchLattice {
    std::vector<std::vector<std::string>> endemic_subsets;
    // one entry per epidemic candidate; nullopt = no epidemic component
    std::vector<std::optional<std::vector<std::string>>> epidemic_subsets;
};

struct ConfigFile {
    ModelSpec spec;
    std::optional<SearchLattice> search;
};

inline ConfigFile parse_config(const json& j, const std::string& where = "config") {
    io_detail::reject_unknown_keys(j,
                                   {"version", "endemic", "epidemic", "temporal", "spatial", "epsilon",
                                    "delta", "Q", "tie_scheme", "seed", "cubature", "optimizer", "search"},
                                   where);
    io_detail::require(j.value("version", 1) == 1, where + ": unsupported schema version");
    ConfigFile out;
    ModelSpec& spec = out.spec;

    if (j.contains("endemic")) {
        const auto& je = j["endemic"];
        io_detail::reject_unknown_keys(je, {"intercept", "covariates"}, where + ".endemic");
        const std::string mode = je.value("intercept", "shared");
        io_detail::require(mode == "shared" || mode == "per_type",
                           where + ": endemic.intercept must be 'shared' or 'per_type'");
        spec.intercept_mode = mode == "shared" ? InterceptMode::shared : InterceptMode::per_type;
        if (je.contains("covariates"))
            for (const auto& c : je["covariates"]) spec.endemic_covariates.push_back(c.get<std::string>());
    }
    if (j.contains("epidemic")) {
        const auto& je = j["epidemic"];
        io_detail::reject_unknown_keys(je, {"present", "terms"}, where + ".epidemic");
        spec.epidemic = je.value("present", true);
        if (je.contains("terms"))
            for (const auto& t : je["terms"]) spec.epidemic_terms.push_back(t.get<std::string>());
    }
    if (j.contains("temporal")) {
        const auto& jt = j["temporal"];
        io_detail::reject_unknown_keys(jt, {"family", "shared"}, where + ".temporal");
        const std::string fam = jt.value("family", "constant");
        io_detail::require(fam == "constant" || fam == "exponential",
                           where + ": temporal.family must be 'constant' or 'exponential'");
        spec.interaction.g_family = fam == "constant" ? TemporalFamily::constant : TemporalFamily::exponential;
        spec.interaction.g_shared = jt.value("shared", true);
    }
    if (j.contains("spatial")) {
        const auto& js = j["spatial"];
        io_detail::reject_unknown_keys(js, {"family", "shared"}, where + ".spatial");
        const std::string fam = js.value("family", "constant");
        io_detail::require(fam == "constant" || fam == "gaussian",
                           where + ": spatial.family must be 'constant' or 'gaussian'");
        spec.interaction.f_family = fam == "constant" ? SpatialFamily::constant : SpatialFamily::gaussian;
        spec.interaction.f_shared = js.value("shared", true);
    }
    if (j.contains("epsilon")) spec.interaction.epsilon = j["epsilon"].get<double>();
    if (j.contains("delta")) spec.interaction.delta = j["delta"].get<double>();
    if (j.contains("Q")) {
        const auto& jq = j["Q"];
        const int K = static_cast<int>(jq.size());
        io_detail::require(K >= 1, where + ": Q must be a nonempty square matrix");
        spec.Q.K = K;
        spec.Q.q.clear();
        for (const auto& row : jq) {
            io_detail::require(row.is_array() && static_cast<int>(row.size()) == K,
                               where + ": Q must be square");
            for (const auto& v : row) {
                const int b = v.get<int>();
                io_detail::require(b == 0 || b == 1, where + ": Q entries must be 0 or 1");
                spec.Q.q.push_back(b);
            }
        }
    }
    if (j.contains("tie_scheme")) {
        const std::string s = j["tie_scheme"].get<std::string>();
        io_detail::require(s == "epsilon_shift" || s == "uniform_subdaily",
                           where + ": tie_scheme must be 'epsilon_shift' or 'uniform_subdaily'");
        spec.tie_scheme = s == "epsilon_shift" ? TieScheme::epsilon_shift : TieScheme::uniform_subdaily;
    }
    if (j.contains("seed")) spec.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("cubature")) {
        const auto& jc = j["cubature"];
        io_detail::reject_unknown_keys(jc, {"disc_vertices", "cell_width_factor", "rel_tol", "max_refinements"},
                                       where + ".cubature");
        spec.cubature.disc_vertices = jc.value("disc_vertices", 64);
        spec.cubature.cell_width_factor = jc.value("cell_width_factor", 40.0);
        spec.cubature.rel_tol = jc.value("rel_tol", 1e-4);
        spec.cubature.max_refinements = jc.value("max_refinements", 3);
    }
    if (j.contains("optimizer")) {
        const auto& jo = j["optimizer"];
        io_detail::reject_unknown_keys(jo, {"max_iterations", "grad_tol", "loglik_rel_tol"},
                                       where + ".optimizer");
        spec.optimizer.max_iterations = jo.value("max_iterations", 500);
        spec.optimizer.grad_tol = jo.value("grad_tol", 1e-6);
        spec.optimizer.loglik_rel_tol = jo.value("loglik_rel_tol", 1e-10);
    }
    if (j.contains("search")) {
        const auto& js = j["search"];
        io_detail::reject_unknown_keys(js, {"endemic_subsets", "epidemic_subsets"}, where + ".search");
        SearchLattice lattice;
        for (const auto& subset : js["endemic_subsets"]) {
            std::vector<std::string> terms;
            for (const auto& t : subset) terms.push_back(t.get<std::string>());
            lattice.endemic_subsets.push_back(std::move(terms));
        }
        for (const auto& subset : js["epidemic_subsets"]) {
            if (subset.is_null()) {
                lattice.epidemic_subsets.push_back(std::nullopt);
            } else {
                std::vector<std::string> terms;
                for (const auto& t : subset) terms.push_back(t.get<std::string>());
                lattice.epidemic_subsets.push_back(std::move(terms));
            }
        }
        out.search = std::move(lattice);
    }
    return out;
}

inline json config_to_json(const ConfigFile& cfg) {
    const ModelSpec& spec = cfg.spec;
    json j;
    j["version"] = 1;
    j["endemic"] = {{"intercept", spec.intercept_mode == InterceptMode::shared ? "shared" : "per_type"},
                    {"covariates", spec.endemic_covariates}};
    j["epidemic"] = {{"present", spec.epidemic}, {"terms", spec.epidemic_terms}};
    j["temporal"] = {{"family", spec.interaction.g_family == TemporalFamily::constant ? "constant"
                                                                                      : "exponential"},
                     {"shared", spec.interaction.g_shared}};
    j["spatial"] = {{"family", spec.interaction.f_family == SpatialFamily::constant ? "constant" : "gaussian"},
                    {"shared", spec.interaction.f_shared}};
    j["epsilon"] = spec.interaction.epsilon;
    j["delta"] = spec.interaction.delta;
    json q = json::array();
    for (int k = 0; k < spec.Q.K; ++k) {
        json row = json::array();
        for (int l = 0; l < spec.Q.K; ++l) row.push_back(spec.Q(k, l));
        q.push_back(std::move(row));
    }
    j["Q"] = std::move(q);
    j["tie_scheme"] = spec.tie_scheme == TieScheme::epsilon_shift ? "epsilon_shift" : "uniform_subdaily";
    j["seed"] = spec.seed;
    j["cubature"] = {{"disc_vertices", spec.cubature.disc_vertices},
                     {"cell_width_factor", spec.cubature.cell_width_factor},
                     {"rel_tol", spec.cubature.rel_tol},
                     {"max_refinements", spec.cubature.max_refinements}};
    j["optimizer"] = {{"max_iterations", spec.optimizer.max_iterations},
                      {"grad_tol", spec.optimizer.grad_tol},
                      {"loglik_rel_tol", spec.optimizer.loglik_rel_tol}};
    if (cfg.search) {
        json js;
        js["endemic_subsets"] = cfg.search->endemic_subsets;
        js["epidemic_subsets"] = json::array();
        for (const auto& subset : cfg.search->epidemic_subsets) {
            if (subset)
                js["epidemic_subsets"].push_back(*subset);
            else
                js["epidemic_subsets"].push_back(nullptr);
        }
        j["search"] = std::move(js);
    }
    return j;
}

// --- validated bundle ------------------------------------------------------

struct Bundle {
    EventsFile events_file;
    SpaceTimeGrid grid;
    ConfigFile config;

    const std::vector<Event>& events() const { return events_file.events; }
    const ModelSpec& spec() const { return config.spec; }
    int K() const { return config.spec.K(); }
};

inline Bundle load_validate(const std::string& events_path, const std::string& grid_path,
                            const std::string& config_path) {
    Bundle b;
    b.events_file = parse_events(io_detail::read_json_file(events_path), events_path);
    b.grid = parse_grid(io_detail::read_json_file(grid_path), grid_path);
    b.config = parse_config(io_detail::read_json_file(config_path), config_path);

    io_detail::require(static_cast<int>(b.events_file.types.size()) == b.K(),
                       "type table has " + std::to_string(b.events_file.types.size()) +
                           " entries but Q is " + std::to_string(b.K()) + "x" + std::to_string(b.K()));
    try {
        b.config.spec.validate(b.grid);
    } catch (const std::exception& ex) {
        throw IoError(std::string("config: ") + ex.what());
    }
    const double T = b.grid.t_end();
    for (std::size_t i = 0; i < b.events_file.events.size(); ++i) {
        const Event& ev = b.events_file.events[i];
        io_detail::require(ev.t > b.grid.t_start() && ev.t <= T,
                           "event " + std::to_string(i) + ": time " + std::to_string(ev.t) +
                               " outside the observation period (0," + std::to_string(T) + "]");
        io_detail::require(b.grid.locate_tile(ev.s) >= 0,
                           "event " + std::to_string(i) + ": location (" + std::to_string(ev.s.x) + ", " +
                               std::to_string(ev.s.y) + ") outside the observation region");
        if (b.spec().epidemic)
            epidemic_design_row(ev, b.spec()); // throws when a mark is missing
    }
    return b;
}

// --- synthetic data --------------------------------------------------------

inline EventsFile synth(const ConfigFile& config, const SpaceTimeGrid& grid, const Vector& theta_true,
                        std::uint64_t seed, std::vector<std::string> type_names = {},
                        std::vector<Event> mark_pool = {}) {
    const ModelSpec& spec = config.spec;
    if (type_names.empty())
        for (int k = 0; k < spec.K(); ++k) type_names.push_back("T" + std::to_string(k));
    const auto result = simulate(theta_true, grid, spec,
                                 mark_pool.empty() ? MarkSampler([](int, Rng&) {
                                     return std::map<std::string, double>{};
                                 })
                                                   : empirical_mark_sampler(std::move(mark_pool)),
                                 seed);
    EventsFile out;
    out.version = 1;
    out.origin_date = "2001-12-31";
    out.types = std::move(type_names);
    out.events = result.events;
    return out;
}

// --- fit result ------------------------------------------------------------

inline json fit_result_to_json(const FitResult& res) {
    json j;
    j["version"] = 1;
    j["names"] = res.layout.names();
    j["theta"] = std::vector<double>(res.theta.data(), res.theta.data() + res.theta.size());
    j["loglik"] = res.loglik;
    j["aic"] = res.aic;
    j["converged"] = res.converged;
    j["iterations"] = res.iterations;
    j["grad_norm"] = res.grad_norm;
    j["score"] = std::vector<double>(res.score.data(), res.score.data() + res.score.size());
    j["parts"] = {{"event_term", res.parts.event_term},
                  {"endemic_integral", res.parts.endemic_integral},
                  {"epidemic_integral", res.parts.epidemic_integral},
                  {"source_set_sizes", res.parts.source_set_sizes}};
    auto matrix_to_json = [](const Matrix& m) {
        json rows = json::array();
        for (int a = 0; a < m.rows(); ++a) {
            json row = json::array();
            for (int b = 0; b < m.cols(); ++b) row.push_back(m(a, b));
            rows.push_back(std::move(row));
        }
        return rows;
    };
    j["information"] = matrix_to_json(res.information);
    j["covariance"] = matrix_to_json(res.covariance);
    j["warnings"] = res.warnings;
    return j;
}

inline Vector theta_from_json(const json& j) {
    std::vector<double> v;
    if (j.is_array())
        v = j.get<std::vector<double>>();
    else if (j.contains("theta"))
        v = j["theta"].get<std::vector<double>>();
    else
        throw IoError("theta file must be a JSON array or a fit result with a 'theta' field");
    Vector th(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) th[i] = v[i];
    return th;
}

} // namespace twinstim
