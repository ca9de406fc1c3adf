#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "twinstim/geometry.hpp"

namespace twinstim {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

struct ModelError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Observed or simulated case. Types are 0-based internally; the string
// labels live in the IO layer. `source` is -1 for endemic / unknown,
// otherwise the index of the triggering event.
struct Event {
    double t = 0.0;
    Point s;
    int type = 0;
    std::map<std::string, double> marks;
    int source = -1;
};

struct SpaceTimeGrid {
    std::vector<Polygon> tiles;
    std::vector<double> tile_areas;                 // cached |A_xi|
    std::vector<double> tile_population;            // NaN when not supplied
    std::vector<std::string> tile_ids;
    std::vector<std::pair<double, double>> intervals; // half-open [start, end)
    std::vector<std::vector<double>> offset;          // rho[tau][xi], D x M
    std::map<std::string, std::vector<std::vector<double>>> covariates; // name -> D x M

    double t_start() const { return intervals.front().first; }
    double t_end() const { return intervals.back().second; }
    std::size_t n_intervals() const { return intervals.size(); }
    std::size_t n_tiles() const { return tiles.size(); }

    double interval_length(std::size_t tau) const {
        return intervals[tau].second - intervals[tau].first;
    }

    double total_area() const {
        Ksum a;
        for (double x : tile_areas) a.add(x);
        return a.value();
    }

    BoundingBox bbox() const {
        BoundingBox b;
        for (const auto& t : tiles) {
            const auto tb = t.bbox();
            b.expand({tb.min_x, tb.min_y});
            b.expand({tb.max_x, tb.max_y});
        }
        return b;
    }

    // interval index for t in (start, end]; intervals are [s,e) but the
    // process domain is (0,T], so t == interval start belongs to the
    // previous interval only at t == t_start (never queried).
    int locate_interval(double t) const {
        if (t <= t_start() || t > t_end()) return -1;
        if (t == t_end()) return static_cast<int>(intervals.size()) - 1;
        // last interval with start <= t; intervals are [start, end)
        std::size_t lo = 0, hi = intervals.size() - 1;
        while (lo < hi) {
            const std::size_t mid = (lo + hi + 1) / 2;
            if (intervals[mid].first <= t)
                lo = mid;
            else
                hi = mid - 1;
        }
        return static_cast<int>(lo);
    }

    // lowest tile index containing s, -1 if outside W
    int locate_tile(const Point& s) const {
        for (std::size_t i = 0; i < tiles.size(); ++i)
            if (point_in_polygon(s, tiles[i])) return static_cast<int>(i);
        return -1;
    }

    void finalize() {
        tile_areas.resize(tiles.size());
        for (std::size_t i = 0; i < tiles.size(); ++i) {
            tiles[i].validate();
            tile_areas[i] = polygon_area(tiles[i]);
        }
        if (tile_population.size() != tiles.size())
            tile_population.assign(tiles.size(), std::numeric_limits<double>::quiet_NaN());
        validate();
    }

    void validate() const {
        if (intervals.empty()) throw ModelError("grid has no time intervals");
        if (tiles.empty()) throw ModelError("grid has no tiles");
        for (std::size_t i = 0; i + 1 < intervals.size(); ++i)
            if (intervals[i].second != intervals[i + 1].first)
                throw ModelError("time intervals are not contiguous at index " + std::to_string(i));
        for (const auto& iv : intervals)
            if (!(iv.second > iv.first)) throw ModelError("empty or reversed time interval");
        const std::size_t D = intervals.size(), M = tiles.size();
        if (offset.size() != D) throw ModelError("offset table has wrong interval dimension");
        for (const auto& row : offset) {
            if (row.size() != M) throw ModelError("offset table has wrong tile dimension");
            for (double v : row)
                if (v < 0.0 || !std::isfinite(v)) throw ModelError("offset rho must be finite and nonnegative");
        }
        for (const auto& [name, table] : covariates) {
            if (table.size() != D) throw ModelError("covariate '" + name + "' has wrong interval dimension");
            for (const auto& row : table)
                if (row.size() != M) throw ModelError("covariate '" + name + "' has wrong tile dimension");
        }
        // cheap disjointness probe: each tile's first vertex centroid-ish
        // interior point must not fall strictly inside another tile
        for (std::size_t i = 0; i < tiles.size(); ++i) {
            Point c{0.0, 0.0};
            const Ring& r = tiles[i].rings.front();
            for (std::size_t k = 0; k + 1 < r.size(); ++k) {
                c.x += r[k].x;
                c.y += r[k].y;
            }
            c.x /= static_cast<double>(r.size() - 1);
            c.y /= static_cast<double>(r.size() - 1);
            if (!point_in_polygon(c, tiles[i])) continue; // concave tile, skip probe
            for (std::size_t j = 0; j < tiles.size(); ++j)
                if (j != i && point_in_polygon(c, tiles[j]) && j < i)
                    throw ModelError("tiles " + std::to_string(j) + " and " + std::to_string(i) + " overlap");
        }
    }
};

struct TransmissionMatrix {
    int K = 1;
    std::vector<int> q; // row-major K x K, entries in {0,1}

    static TransmissionMatrix identity(int K) {
        TransmissionMatrix m;
        m.K = K;
        m.q.assign(static_cast<std::size_t>(K) * K, 0);
        for (int k = 0; k < K; ++k) m.q[k * K + k] = 1;
        return m;
    }
    static TransmissionMatrix full(int K) {
        TransmissionMatrix m;
        m.K = K;
        m.q.assign(static_cast<std::size_t>(K) * K, 1);
        return m;
    }

    int operator()(int from, int to) const { return q[from * K + to]; }

    // number of types an event of type `from` can trigger
    int row_sum(int from) const {
        int s = 0;
        for (int l = 0; l < K; ++l) s += q[from * K + l];
        return s;
    }
};

enum class TemporalFamily { constant, exponential };
enum class SpatialFamily { constant, gaussian };
enum class InterceptMode { shared, per_type };
enum class TieScheme { epsilon_shift, uniform_subdaily };

struct InteractionSpec {
    TemporalFamily g_family = TemporalFamily::constant;
    bool g_shared = true; // one alpha vs per-type alpha
    SpatialFamily f_family = SpatialFamily::constant;
    bool f_shared = true; // one sigma vs per-type sigma
    double epsilon = 30.0; // days
    double delta = 200.0;  // km

    void validate() const {
        if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw ModelError("epsilon must be finite positive");
        if (!(delta > 0.0) || !std::isfinite(delta)) throw ModelError("delta must be finite positive");
    }
};

struct CubatureSettings {
    int disc_vertices = 64;
    double cell_width_factor = 40.0; // default cell width = delta / factor
    double rel_tol = 1e-4;
    int max_refinements = 3;
};

struct OptimizerSettings {
    int max_iterations = 500;
    double grad_tol = 1e-6;     // scaled by max(1, |loglik|)
    double loglik_rel_tol = 1e-10;
};

struct ModelSpec {
    InterceptMode intercept_mode = InterceptMode::shared;
    std::vector<std::string> endemic_covariates;
    bool epidemic = false;
    std::vector<std::string> epidemic_terms; // "type" expands to K-1 dummies
    InteractionSpec interaction;
    TransmissionMatrix Q = TransmissionMatrix::identity(1);
    TieScheme tie_scheme = TieScheme::epsilon_shift;
    std::uint64_t seed = 1;
    CubatureSettings cubature;
    OptimizerSettings optimizer;

    int K() const { return Q.K; }

    double cubature_cell_width() const { return interaction.delta / cubature.cell_width_factor; }

    void validate(const SpaceTimeGrid& grid) const {
        interaction.validate();
        if (Q.K < 1) throw ModelError("need at least one event type");
        for (int v : Q.q)
            if (v != 0 && v != 1) throw ModelError("Q entries must be 0 or 1");
        if (epidemic) {
            bool any = false;
            for (int k = 0; k < Q.K; ++k) any = any || Q.row_sum(k) > 0;
            if (!any) throw ModelError("epidemic component present but Q has no nonzero row");
        }
        for (const auto& name : endemic_covariates)
            if (!grid.covariates.count(name))
                throw ModelError("endemic covariate '" + name + "' not present in grid");
    }
};

// Fixed serialization layout of theta:
//   [beta0 (1 or K)] [beta (p)] [gamma0] [gamma (q)] [log sigma (0|1|K)] [log alpha (0|1|K)]
struct ParameterLayout {
    int K = 1;
    InterceptMode intercept_mode = InterceptMode::shared;
    int p = 0; // endemic covariates
    bool epidemic = false;
    std::vector<std::string> gamma_names; // design columns after gamma0
    int n_sigma = 0;
    int n_alpha = 0;

    static ParameterLayout from_spec(const ModelSpec& spec) {
        ParameterLayout l;
        l.K = spec.K();
        l.intercept_mode = spec.intercept_mode;
        l.p = static_cast<int>(spec.endemic_covariates.size());
        l.epidemic = spec.epidemic;
        if (spec.epidemic) {
            for (const auto& term : spec.epidemic_terms) {
                if (term == "type") {
                    for (int k = 1; k < l.K; ++k) l.gamma_names.push_back("type:" + std::to_string(k));
                } else {
                    l.gamma_names.push_back(term);
                }
            }
            if (spec.interaction.f_family == SpatialFamily::gaussian)
                l.n_sigma = spec.interaction.f_shared ? 1 : l.K;
            if (spec.interaction.g_family == TemporalFamily::exponential)
                l.n_alpha = spec.interaction.g_shared ? 1 : l.K;
        }
        return l;
    }

    int n_beta0() const { return intercept_mode == InterceptMode::shared ? 1 : K; }
    int q() const { return static_cast<int>(gamma_names.size()); }
    int beta0_index(int type) const { return intercept_mode == InterceptMode::shared ? 0 : type; }
    int beta_offset() const { return n_beta0(); }
    int gamma0_offset() const { return n_beta0() + p; }
    int gamma_offset() const { return gamma0_offset() + 1; }
    int logsigma_offset() const { return n_beta0() + p + (epidemic ? 1 + q() : 0); }
    int logalpha_offset() const { return logsigma_offset() + n_sigma; }
    int dim() const { return logalpha_offset() + n_alpha; }

    int sigma_index(int type) const { return n_sigma == 1 ? 0 : type; }
    int alpha_index(int type) const { return n_alpha == 1 ? 0 : type; }

    double beta0(const Vector& th, int type) const { return th[beta0_index(type)]; }
    double gamma0(const Vector& th) const { return th[gamma0_offset()]; }
    // constant kernels carry no scale parameter; the families ignore the value
    double sigma(const Vector& th, int type) const {
        return n_sigma == 0 ? 0.0 : std::exp(th[logsigma_offset() + sigma_index(type)]);
    }
    double alpha(const Vector& th, int type) const {
        return n_alpha == 0 ? 0.0 : std::exp(th[logalpha_offset() + alpha_index(type)]);
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        if (intercept_mode == InterceptMode::shared)
            out.push_back("beta0");
        else
            for (int k = 0; k < K; ++k) out.push_back("beta0[" + std::to_string(k) + "]");
        for (int j = 0; j < p; ++j) out.push_back("beta[" + std::to_string(j) + "]");
        if (epidemic) {
            out.push_back("gamma0");
            for (const auto& g : gamma_names) out.push_back("gamma:" + g);
            for (int k = 0; k < n_sigma; ++k)
                out.push_back(n_sigma == 1 ? "log_sigma" : "log_sigma[" + std::to_string(k) + "]");
            for (int k = 0; k < n_alpha; ++k)
                out.push_back(n_alpha == 1 ? "log_alpha" : "log_alpha[" + std::to_string(k) + "]");
        }
        return out;
    }
};

// Epidemic design row x_j for event j: type dummies (reference type 0)
// followed by the named unpredictable marks, in layout order.
inline std::vector<double> epidemic_design_row(const Event& ev, const ModelSpec& spec) {
    std::vector<double> row;
    if (!spec.epidemic) return row;
    for (const auto& term : spec.epidemic_terms) {
        if (term == "type") {
            for (int k = 1; k < spec.K(); ++k) row.push_back(ev.type == k ? 1.0 : 0.0);
        } else {
            auto it = ev.marks.find(term);
            if (it == ev.marks.end())
                throw ModelError("event is missing epidemic mark '" + term + "'");
            row.push_back(it->second);
        }
    }
    return row;
}

inline double linear_predictor_eta(const Event& ev, const Vector& theta, const ParameterLayout& layout,
                                   const ModelSpec& spec) {
    double eta = layout.gamma0(theta);
    const auto row = epidemic_design_row(ev, spec);
    for (int l = 0; l < layout.q(); ++l) eta += theta[layout.gamma_offset() + l] * row[l];
    return eta;
}

// --- interaction functions -------------------------------------------------

// temporal kernel on (0, eps]; indicator handled by callers
inline double g_eval(const InteractionSpec& is, double alpha, double dt) {
    return is.g_family == TemporalFamily::constant ? 1.0 : std::exp(-alpha * dt);
}

// sup over u > 0 (the exponential attains it only in the limit at 0+)
inline double g_bar(const InteractionSpec& is, double /*alpha*/) {
    (void)is;
    return 1.0;
}

// int_0^u g
inline double g_integral(const InteractionSpec& is, double alpha, double u) {
    if (is.g_family == TemporalFamily::constant) return u;
    return (1.0 - std::exp(-alpha * u)) / alpha;
}

// d/d(log alpha) of g_integral
inline double g_integral_dlogalpha(const InteractionSpec& is, double alpha, double u) {
    if (is.g_family == TemporalFamily::constant) return 0.0;
    return u * std::exp(-alpha * u) - g_integral(is, alpha, u);
}

// spatial kernel on [0, delta]; r2 = squared distance
inline double f_eval(const InteractionSpec& is, double sigma, double r2) {
    return is.f_family == SpatialFamily::constant ? 1.0 : std::exp(-r2 / (2.0 * sigma * sigma));
}

// d f / d(log sigma)
inline double f_eval_dlogsigma(const InteractionSpec& is, double sigma, double r2) {
    if (is.f_family == SpatialFamily::constant) return 0.0;
    return f_eval(is, sigma, r2) * r2 / (sigma * sigma);
}

// int over the full disc b(0, delta); used for mu_j
inline double f_disc_integral(const InteractionSpec& is, double sigma) {
    const double pi = 3.141592653589793238462643383279;
    if (is.f_family == SpatialFamily::constant) return pi * is.delta * is.delta;
    const double s2 = sigma * sigma;
    return 2.0 * pi * s2 * (1.0 - std::exp(-is.delta * is.delta / (2.0 * s2)));
}

// --- pointwise intensities -------------------------------------------------

inline std::pair<int, int> locate(double t, const Point& s, const SpaceTimeGrid& grid) {
    const int tau = grid.locate_interval(t);
    if (tau < 0)
        throw ModelError("time " + std::to_string(t) + " outside the observation period");
    const int xi = grid.locate_tile(s);
    if (xi < 0)
        throw ModelError("point (" + std::to_string(s.x) + ", " + std::to_string(s.y) +
                         ") is outside the observation region");
    return {tau, xi};
}

inline double endemic_linear_predictor(int tau, int xi, const Vector& theta, const ParameterLayout& layout,
                                       const ModelSpec& spec, const SpaceTimeGrid& grid, int type) {
    double lp = layout.beta0(theta, type);
    for (int j = 0; j < layout.p; ++j)
        lp += theta[layout.beta_offset() + j] * grid.covariates.at(spec.endemic_covariates[j])[tau][xi];
    return lp;
}

inline double endemic_intensity(double t, const Point& s, int type, const Vector& theta,
                                const SpaceTimeGrid& grid, const ModelSpec& spec,
                                const ParameterLayout& layout) {
    const auto [tau, xi] = locate(t, s, grid);
    const double rho = grid.offset[tau][xi];
    if (rho == 0.0) return 0.0;
    return rho * std::exp(endemic_linear_predictor(tau, xi, theta, layout, spec, grid, type));
}

// Indices j of strictly-past events within the interaction ranges that can
// trigger type `type`. History must be time-sorted.
inline std::vector<std::size_t> infective_set(double t, const Point& s, int type,
                                              const std::vector<Event>& history, const ModelSpec& spec) {
    std::vector<std::size_t> out;
    if (!spec.epidemic) return out;
    const double eps = spec.interaction.epsilon;
    const double d2 = spec.interaction.delta * spec.interaction.delta;
    // earliest candidate: t - t_j <= eps  <=>  t_j >= t - eps
    auto it = std::lower_bound(history.begin(), history.end(), t - eps,
                               [](const Event& e, double v) { return e.t < v; });
    for (; it != history.end() && it->t < t; ++it) {
        if (spec.Q(it->type, type) != 1) continue;
        if (dist2(it->s, s) > d2) continue;
        out.push_back(static_cast<std::size_t>(it - history.begin()));
    }
    return out;
}

inline double epidemic_intensity(double t, const Point& s, int type, const Vector& theta,
                                 const std::vector<Event>& history, const ModelSpec& spec,
                                 const ParameterLayout& layout) {
    if (!spec.epidemic) return 0.0;
    Ksum acc;
    for (std::size_t j : infective_set(t, s, type, history, spec)) {
        const Event& src = history[j];
        const double eta = linear_predictor_eta(src, theta, layout, spec);
        const double g = g_eval(spec.interaction, layout.alpha(theta, src.type), t - src.t);
        const double f = f_eval(spec.interaction, layout.sigma(theta, src.type), dist2(src.s, s));
        acc.add(std::exp(eta) * g * f);
    }
    return acc.value();
}

inline double cif(double t, const Point& s, int type, const Vector& theta,
                  const std::vector<Event>& history, const SpaceTimeGrid& grid, const ModelSpec& spec,
                  const ParameterLayout& layout) {
    return endemic_intensity(t, s, type, theta, grid, spec, layout) +
           epidemic_intensity(t, s, type, theta, history, spec, layout);
}

} // namespace twinstim
