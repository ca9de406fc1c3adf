#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "twinstim/likelihood.hpp"
#include "twinstim/rng.hpp"
#include "twinstim/simulate.hpp"

namespace twinstim {

struct DiagnosticsError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// --- Kolmogorov-Smirnov helpers --------------------------------------------

// P(D_n < d) by the Marsaglia/Tsang/Wang matrix-power evaluation
inline double ks_cdf_exact(int n, double d) {
    if (d <= 0.0) return 0.0;
    if (d >= 1.0) return 1.0;
    const int k = static_cast<int>(std::ceil(n * d));
    const int m = 2 * k - 1;
    const double h = k - n * d;
    Matrix H = Matrix::Zero(m, m);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j)
            if (i - j + 1 >= 0) H(i, j) = 1.0;
    for (int i = 0; i < m; ++i) {
        H(i, 0) -= std::pow(h, i + 1);
        H(m - 1, i) -= std::pow(h, m - i);
    }
    H(m - 1, 0) += (2.0 * h - 1.0 > 0.0) ? std::pow(2.0 * h - 1.0, m) : 0.0;
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j)
            if (i - j + 1 > 0)
                for (int g = 1; g <= i - j + 1; ++g) H(i, j) /= g;

    // H^n with scaling to avoid overflow
    Matrix Q = Matrix::Identity(m, m);
    int e_q = 0;
    Matrix P = H;
    int e_p = 0;
    int nn = n;
    while (nn > 0) {
        if (nn & 1) {
            Q = Q * P;
            e_q += e_p;
            if (Q(k - 1, k - 1) > 1e140) {
                Q *= 1e-140;
                e_q += 140;
            }
        }
        P = P * P;
        e_p += e_p;
        if (P(k - 1, k - 1) > 1e140) {
            P *= 1e-140;
            e_p += 140;
        }
        nn >>= 1;
    }
    double s = Q(k - 1, k - 1);
    for (int i = 1; i <= n; ++i) {
        s *= static_cast<double>(i) / n;
        if (s < 1e-140) {
            s *= 1e140;
            e_q -= 140;
        }
    }
    return s * std::pow(10.0, e_q);
}

// critical value: smallest d with P(D_n < d) >= 1 - alpha
inline double ks_critical_value(int n, double alpha) {
    if (n >= 35) {
        // asymptotic band constant (1.358 at alpha = 0.05)
        const double c = std::sqrt(-0.5 * std::log(alpha / 2.0));
        return c / std::sqrt(static_cast<double>(n));
    }
    double lo = 0.0, hi = 1.0;
    for (int it = 0; it < 60; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (ks_cdf_exact(n, mid) < 1.0 - alpha)
            lo = mid;
        else
            hi = mid;
    }
    return hi;
}

// one-sample KS statistic against U(0,1); input need not be sorted
inline double ks_statistic_uniform(std::vector<double> u) {
    std::sort(u.begin(), u.end());
    const std::size_t m = u.size();
    double d = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        d = std::max(d, (i + 1.0) / m - u[i]);
        d = std::max(d, u[i] - static_cast<double>(i) / m);
    }
    return d;
}

// --- tie breaking ----------------------------------------------------------

// epsilon_shift: within each tie group the earlier duplicates are shifted
// further back in 0.01-day steps, so (5,5,5) -> (4.98, 4.99, 5.00).
// uniform_subdaily: subtract an independent U(0,1) day from every time.
inline std::vector<Event> break_ties(std::vector<Event> events, TieScheme scheme, std::uint64_t seed) {
    std::stable_sort(events.begin(), events.end(),
                     [](const Event& a, const Event& b) { return a.t < b.t; });
    if (scheme == TieScheme::epsilon_shift) {
        std::size_t i = 0;
        while (i < events.size()) {
            std::size_t j = i;
            while (j + 1 < events.size() && events[j + 1].t == events[i].t) ++j;
            const std::size_t g = j - i + 1;
            for (std::size_t k = i; k <= j; ++k) {
                events[k].t -= 0.01 * static_cast<double>(j - k);
                if (events[k].t <= 0.0)
                    throw DiagnosticsError("epsilon tie shift produced a nonpositive time");
            }
            i = j + 1;
        }
    } else {
        Rng rng(seed);
        for (auto& ev : events) {
            ev.t -= rng.uniform();
            if (ev.t <= 0.0) ev.t = std::nextafter(0.0, 1.0);
        }
    }
    std::stable_sort(events.begin(), events.end(),
                     [](const Event& a, const Event& b) { return a.t < b.t; });
    for (std::size_t k = 1; k < events.size(); ++k)
        if (!(events[k].t > events[k - 1].t))
            throw DiagnosticsError("tie breaking failed to produce strictly increasing times");
    return events;
}

// --- time-rescaling residuals ----------------------------------------------

struct ResidualSeries {
    std::vector<double> y; // Lambda increments, i = 2..n
    std::vector<double> u; // 1 - exp(-y)
    double ks_statistic = 0.0;
    double band_halfwidth = 0.0; // 95% KS band
    bool ks_pass = false;
};

inline ResidualSeries rescaled_residuals(const LikelihoodEvaluator& ev, const Vector& theta) {
    const auto& events = ev.events();
    if (events.size() < 2) throw DiagnosticsError("need at least two events for residuals");
    std::vector<double> times;
    times.reserve(events.size());
    for (const auto& e : events) times.push_back(e.t);
    for (std::size_t i = 1; i < times.size(); ++i)
        if (!(times[i] > times[i - 1]))
            throw DiagnosticsError("event times are not strictly increasing; break ties first");
    const auto cum = ev.cumulative_ground_intensity(theta, times);
    ResidualSeries out;
    out.y.reserve(times.size() - 1);
    out.u.reserve(times.size() - 1);
    for (std::size_t i = 1; i < times.size(); ++i) {
        const double y = cum[i] - cum[i - 1];
        out.y.push_back(y);
        out.u.push_back(-std::expm1(-y));
    }
    out.ks_statistic = ks_statistic_uniform(out.u);
    out.band_halfwidth = ks_critical_value(static_cast<int>(out.u.size()), 0.05);
    out.ks_pass = out.ks_statistic <= out.band_halfwidth;
    return out;
}

// --- reproduction numbers --------------------------------------------------

// mu_j of one event: untruncated temporal and disc-spatial integrals
inline double mu_individual(const Event& ev, const Vector& theta, const ModelSpec& spec,
                            const ParameterLayout& layout) {
    if (!spec.epidemic) throw DiagnosticsError("mu requires a fitted epidemic component");
    const double eta = linear_predictor_eta(ev, theta, layout, spec);
    const double Gfull = g_integral(spec.interaction, layout.alpha(theta, ev.type), spec.interaction.epsilon);
    return std::exp(eta) * Gfull * f_disc_integral(spec.interaction, layout.sigma(theta, ev.type));
}

struct ReproductionSummary {
    int type = 0;
    double mu_hat = 0.0;
    double ci_lo = 0.0;
    double ci_hi = 0.0;
    std::vector<double> bootstrap; // includes the point estimate as draw 0
};

namespace detail {
inline double mu_type_mean(int type, const std::vector<Event>& events, const Vector& theta,
                           const ModelSpec& spec, const ParameterLayout& layout) {
    // expectation over the empirical distribution of the non-type covariates
    Ksum acc;
    for (const auto& ev : events) {
        Event forced = ev;
        forced.type = type;
        acc.add(mu_individual(forced, theta, spec, layout));
    }
    return acc.value() / static_cast<double>(events.size());
}
} // namespace detail

inline std::vector<ReproductionSummary> reproduction_numbers(const Vector& theta, const Matrix& covariance,
                                                             const std::vector<Event>& events,
                                                             const ModelSpec& spec, int B = 999,
                                                             std::uint64_t seed = 1,
                                                             std::vector<std::string>* warnings = nullptr) {
    if (events.empty()) throw DiagnosticsError("no events to average over");
    const auto layout = ParameterLayout::from_spec(spec);
    const int d = layout.dim();

    Matrix chol = Matrix::Zero(d, d);
    Eigen::LLT<Matrix> llt(covariance);
    if (llt.info() == Eigen::Success) {
        chol = llt.matrixL();
    } else {
        // nearest-PSD projection: clip negative eigenvalues to zero. A merely
        // singular PSD matrix (LLT also fails there) projects to itself and
        // needs no warning.
        Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (covariance + covariance.transpose()));
        const double min_ev = es.eigenvalues().minCoeff();
        const double scale = std::max(1e-300, es.eigenvalues().cwiseAbs().maxCoeff());
        Vector ev_clipped = es.eigenvalues().cwiseMax(0.0);
        const Matrix psd =
            es.eigenvectors() * ev_clipped.asDiagonal() * es.eigenvectors().transpose();
        chol = Eigen::LLT<Matrix>(psd + 1e-300 * Matrix::Identity(d, d)).matrixL();
        if (min_ev < -1e-12 * scale && warnings)
            warnings->push_back("covariance not PSD; projected to the nearest PSD matrix");
    }

    Rng rng(seed);
    std::vector<Vector> draws;
    draws.reserve(B + 1);
    draws.push_back(theta);
    for (int b = 0; b < B; ++b) {
        Vector z(d);
        for (int a = 0; a < d; ++a) z[a] = rng.normal();
        draws.push_back(theta + chol * z);
    }

    std::vector<ReproductionSummary> out;
    for (int k = 0; k < spec.K(); ++k) {
        ReproductionSummary s;
        s.type = k;
        s.bootstrap.reserve(draws.size());
        for (const auto& th : draws)
            s.bootstrap.push_back(detail::mu_type_mean(k, events, th, spec, layout));
        s.mu_hat = s.bootstrap.front();
        std::vector<double> sorted = s.bootstrap;
        std::sort(sorted.begin(), sorted.end());
        const auto quantile = [&](double q) {
            const double pos = q * (sorted.size() - 1);
            const std::size_t lo = static_cast<std::size_t>(pos);
            const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
            const double w = pos - lo;
            return (1.0 - w) * sorted[lo] + w * sorted[hi];
        };
        s.ci_lo = quantile(0.025);
        s.ci_hi = quantile(0.975);
        out.push_back(std::move(s));
    }
    return out;
}

// --- simulation envelope ---------------------------------------------------

struct TileEnvelope {
    std::size_t tile = 0;
    double observed_incidence = 0.0; // per 100,000
    double q_lo = 0.0;
    double q_hi = 0.0;
    bool flagged_low = false;
    bool flagged_high = false;
    bool excluded = false; // missing population
};

struct EnvelopeResult {
    std::vector<TileEnvelope> tiles;
    int n_sims = 0;
};

inline EnvelopeResult incidence_envelope(const Vector& theta, const std::vector<Event>& observed,
                                         const SpaceTimeGrid& grid, const ModelSpec& spec, int n_sims = 100,
                                         std::uint64_t seed = 1, int threads = 1) {
    if (n_sims <= 0) throw DiagnosticsError("envelope requires at least one simulation");
    const std::size_t M = grid.n_tiles();

    auto tile_counts = [&](const std::vector<Event>& evs) {
        std::vector<int> counts(M, 0);
        for (const auto& e : evs) {
            const int xi = grid.locate_tile(e.s);
            if (xi >= 0) ++counts[xi];
        }
        return counts;
    };

    const auto obs_counts = tile_counts(observed);
    std::vector<std::vector<int>> sim_counts(n_sims);
    const MarkSampler marks = empirical_mark_sampler(observed);
    parallel_for(static_cast<std::size_t>(n_sims), threads, [&](std::size_t r) {
        Simulator sim(theta, grid, spec);
        const auto res = sim.run(marks, Rng::derive_seed(seed, r));
        sim_counts[r] = tile_counts(res.events);
    });

    EnvelopeResult out;
    out.n_sims = n_sims;
    for (std::size_t m = 0; m < M; ++m) {
        TileEnvelope te;
        te.tile = m;
        const double pop = grid.tile_population[m];
        if (!(pop > 0.0)) {
            te.excluded = true;
            out.tiles.push_back(te);
            continue;
        }
        const double scale = 100000.0 / pop;
        te.observed_incidence = obs_counts[m] * scale;
        std::vector<double> inc(n_sims);
        for (int r = 0; r < n_sims; ++r) inc[r] = sim_counts[r][m] * scale;
        std::sort(inc.begin(), inc.end());
        const auto quantile = [&](double q) {
            const double pos = q * (inc.size() - 1);
            const std::size_t lo = static_cast<std::size_t>(pos);
            const std::size_t hi = std::min(lo + 1, inc.size() - 1);
            const double w = pos - lo;
            return (1.0 - w) * inc[lo] + w * inc[hi];
        };
        te.q_lo = quantile(0.025);
        te.q_hi = quantile(0.975);
        te.flagged_low = te.observed_incidence < te.q_lo;
        te.flagged_high = te.observed_incidence > te.q_hi;
        out.tiles.push_back(te);
    }
    return out;
}

} // namespace twinstim
