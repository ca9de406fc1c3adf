#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "twinstim/geometry.hpp"
#include "twinstim/ksum.hpp"
#include "twinstim/model.hpp"

namespace twinstim {

struct LikelihoodParts {
    double event_term = 0.0;
    double endemic_integral = 0.0;
    double epidemic_integral = 0.0;
    double loglik = -std::numeric_limits<double>::infinity();
    bool finite = false;
    int zero_intensity_event = -1; // index of the offending event when !finite
    std::vector<int> source_set_sizes;
};

struct FitResult {
    ParameterLayout layout;
    Vector theta;
    double loglik = -std::numeric_limits<double>::infinity();
    LikelihoodParts parts;
    Vector score;
    Matrix information;
    Matrix covariance;
    double aic = std::numeric_limits<double>::infinity();
    bool converged = false;
    int iterations = 0;
    double grad_norm = std::numeric_limits<double>::infinity();
    std::vector<std::string> warnings;

    int dim() const { return static_cast<int>(theta.size()); }
};

namespace detail {

struct SourceLink {
    std::size_t j;
    double dt;
    double r2;
};

// Spatial interaction region of one event with frozen midpoint grids.
struct EventRegion {
    IntegrationRegion region;
    std::vector<std::vector<double>> level_r2; // midpoint squared radii per refinement level
    std::vector<double> level_cell_area;       // w^2 per level
    int level = 0;                             // frozen cell set used for F_j and dF_j
    bool degenerate = false;

    void build_level(double w0, int lvl) {
        while (static_cast<int>(level_r2.size()) <= lvl) {
            const int l = static_cast<int>(level_r2.size());
            const double w = w0 / std::pow(2.0, l);
            std::vector<double> r2s;
            if (!region.empty()) {
                const long nx = std::max<long>(1, static_cast<long>(std::ceil(region.box.width() / w)));
                const long ny = std::max<long>(1, static_cast<long>(std::ceil(region.box.height() / w)));
                for (long iy = 0; iy < ny; ++iy) {
                    const double my = region.box.min_y + (iy + 0.5) * w;
                    for (long ix = 0; ix < nx; ++ix) {
                        const Point mid{region.box.min_x + (ix + 0.5) * w, my};
                        if (region.contains(mid)) r2s.push_back(mid.x * mid.x + mid.y * mid.y);
                    }
                }
            }
            level_r2.push_back(std::move(r2s));
            level_cell_area.push_back(w * w);
        }
    }

    // F_j and dF_j/dlogsigma over the frozen cell set
    std::pair<double, double> integrate(const InteractionSpec& is, double sigma) const {
        if (is.f_family == SpatialFamily::constant) return {region.area, 0.0};
        Ksum f_acc, df_acc;
        for (double r2 : level_r2[level]) {
            f_acc.add(f_eval(is, sigma, r2));
            df_acc.add(f_eval_dlogsigma(is, sigma, r2));
        }
        const double a = level_cell_area[level];
        return {f_acc.value() * a, df_acc.value() * a};
    }
};

} // namespace detail

// Precomputes everything theta-independent about (data, grid, spec) and
// evaluates log-likelihood, score and the optional-variation information
// with deterministic blocked reductions (bit-identical for any thread count).
class LikelihoodEvaluator {
  public:
    LikelihoodEvaluator(std::vector<Event> events, const SpaceTimeGrid& grid, const ModelSpec& spec,
                        int threads = 1)
        : events_(std::move(events)), grid_(&grid), spec_(spec),
          layout_(ParameterLayout::from_spec(spec)), threads_(std::max(1, threads)) {
        std::sort(events_.begin(), events_.end(), [](const Event& a, const Event& b) { return a.t < b.t; });
        prepare();
    }

    const ParameterLayout& layout() const { return layout_; }
    const std::vector<Event>& events() const { return events_; }
    const ModelSpec& spec() const { return spec_; }
    const SpaceTimeGrid& grid() const { return *grid_; }
    std::size_t n_events() const { return events_.size(); }
    const std::vector<std::string>& warnings() const { return warnings_; }

    // cached spatial integral of event j's region for the given sigma
    std::pair<double, double> event_spatial_integral(std::size_t j, double sigma) const {
        return regions_[j].integrate(spec_.interaction, sigma);
    }
    double event_region_area(std::size_t j) const { return regions_[j].region.area; }
    const IntegrationRegion& event_region(std::size_t j) const { return regions_[j].region; }

    LikelihoodParts parts(const Vector& theta) const {
        LikelihoodParts out;
        evaluate(theta, out, nullptr, nullptr);
        return out;
    }

    double loglik(const Vector& theta) const { return parts(theta).loglik; }

    Vector score(const Vector& theta) const {
        LikelihoodParts p;
        Vector g = Vector::Zero(layout_.dim());
        evaluate(theta, p, &g, nullptr);
        return g;
    }

    // optional-variation estimator: sum over events of u_i u_i'
    Matrix information(const Vector& theta) const {
        LikelihoodParts p;
        Vector g = Vector::Zero(layout_.dim());
        Matrix info = Matrix::Zero(layout_.dim(), layout_.dim());
        evaluate(theta, p, &g, &info);
        return info;
    }

    void evaluate(const Vector& theta, LikelihoodParts& parts, Vector* score, Matrix* info) const {
        const int d = layout_.dim();
        const std::size_t n = events_.size();
        parts = LikelihoodParts{};
        parts.source_set_sizes.resize(n);
        for (std::size_t i = 0; i < n; ++i)
            parts.source_set_sizes[i] = static_cast<int>(sources_[i].size());

        // per-event triggering weights exp(eta_j), G_j, F_j at this theta
        std::vector<double> exp_eta(n, 0.0), G(n, 0.0), dG(n, 0.0), F(n, 0.0), dF(n, 0.0);
        if (spec_.epidemic) {
            parallel_for(n, threads_, [&](std::size_t j) {
                const Event& ev = events_[j];
                exp_eta[j] = std::exp(layout_.gamma0(theta) + gamma_dot(theta, j));
                const double alpha = layout_.alpha(theta, ev.type);
                G[j] = g_integral(spec_.interaction, alpha, trunc_[j]);
                dG[j] = g_integral_dlogalpha(spec_.interaction, alpha, trunc_[j]);
                auto [fj, dfj] = regions_[j].integrate(spec_.interaction, layout_.sigma(theta, ev.type));
                F[j] = fj;
                dF[j] = dfj;
            });
        }

        // ---- endemic integral over the space-time grid ----
        const std::size_t n_cells = cell_weight_.size();
        const std::size_t h_dim = 1 + layout_.p;
        auto h_sums = det_sum_vec(n_cells, h_dim, threads_, [&](std::size_t c, double* row) {
            double lp = 0.0;
            for (int l = 0; l < layout_.p; ++l) lp += theta[layout_.beta_offset() + l] * cell_z_[c][l];
            const double term = cell_weight_[c] * std::exp(lp);
            row[0] = term;
            for (int l = 0; l < layout_.p; ++l) row[1 + l] = term * cell_z_[c][l];
        });
        double beta0_sum = 0.0;
        for (int k = 0; k < layout_.K; ++k) beta0_sum += std::exp(layout_.beta0(theta, k));
        parts.endemic_integral = beta0_sum * h_sums[0];

        // ---- epidemic integral over events ----
        if (spec_.epidemic) {
            parts.epidemic_integral = det_sum(n, threads_, [&](std::size_t j) {
                return qdot_[j] * exp_eta[j] * G[j] * F[j];
            });
        }

        // ---- event term (+ per-event score contributions u_i) ----
        const std::size_t row_dim = 1 + (score ? d : 0) + (info ? static_cast<std::size_t>(d) * d : 0);
        std::vector<char> bad_flag(n, 0);
        auto ev_sums = det_sum_vec(n, row_dim, threads_, [&](std::size_t i, double* row) {
            const Event& ev = events_[i];
            const double h = endemic_rate_[i] == 0.0
                                 ? 0.0
                                 : endemic_rate_[i] *
                                       std::exp(layout_.beta0(theta, ev.type) + beta_dot(theta, i));
            Ksum e_acc;
            for (const auto& link : sources_[i]) {
                const Event& src = events_[link.j];
                const double w = exp_eta[link.j] *
                                 g_eval(spec_.interaction, layout_.alpha(theta, src.type), link.dt) *
                                 f_eval(spec_.interaction, layout_.sigma(theta, src.type), link.r2);
                e_acc.add(w);
            }
            const double lambda = h + e_acc.value();
            if (!(lambda > 0.0)) {
                bad_flag[i] = 1; // row stays zero; flag handled after the reduction
                return;
            }
            row[0] = std::log(lambda);
            if (!score && !info) return;

            // u_i = grad log lambda_i
            std::vector<double> u(d, 0.0);
            u[layout_.beta0_index(ev.type)] = h;
            for (int l = 0; l < layout_.p; ++l) u[layout_.beta_offset() + l] = h * z_[i][l];
            if (spec_.epidemic) {
                for (const auto& link : sources_[i]) {
                    const Event& src = events_[link.j];
                    const double alpha = layout_.alpha(theta, src.type);
                    const double sigma = layout_.sigma(theta, src.type);
                    const double g = g_eval(spec_.interaction, alpha, link.dt);
                    const double f = f_eval(spec_.interaction, sigma, link.r2);
                    const double w = exp_eta[link.j] * g * f;
                    u[layout_.gamma0_offset()] += w;
                    for (int l = 0; l < layout_.q(); ++l)
                        u[layout_.gamma_offset() + l] += w * design_[link.j][l];
                    if (layout_.n_sigma > 0)
                        u[layout_.logsigma_offset() + layout_.sigma_index(src.type)] +=
                            exp_eta[link.j] * g * f_eval_dlogsigma(spec_.interaction, sigma, link.r2);
                    if (layout_.n_alpha > 0)
                        u[layout_.logalpha_offset() + layout_.alpha_index(src.type)] +=
                            w * (-alpha * link.dt);
                }
            }
            for (int a = 0; a < d; ++a) u[a] /= lambda;
            if (score)
                for (int a = 0; a < d; ++a) row[1 + a] = u[a];
            if (info) {
                double* out = row + 1 + (score ? d : 0);
                for (int a = 0; a < d; ++a)
                    for (int b = 0; b < d; ++b) out[a * d + b] = u[a] * u[b];
            }
        });

        for (std::size_t i = 0; i < n; ++i) {
            if (bad_flag[i]) {
                parts.finite = false;
                parts.zero_intensity_event = static_cast<int>(i);
                parts.loglik = -std::numeric_limits<double>::infinity();
                return;
            }
        }
        parts.event_term = ev_sums[0];
        parts.finite = true;
        parts.loglik = parts.event_term - parts.endemic_integral - parts.epidemic_integral;

        if (score) {
            Vector g = Vector::Zero(d);
            for (int a = 0; a < d; ++a) g[a] = ev_sums[1 + a];
            // minus gradient of the endemic integral
            if (layout_.intercept_mode == InterceptMode::shared) {
                g[0] -= parts.endemic_integral;
            } else {
                for (int k = 0; k < layout_.K; ++k)
                    g[k] -= std::exp(theta[k]) * h_sums[0];
            }
            for (int l = 0; l < layout_.p; ++l) g[layout_.beta_offset() + l] -= beta0_sum * h_sums[1 + l];
            // minus gradient of the epidemic integral
            if (spec_.epidemic) {
                const std::size_t e_dim = 1 + layout_.q() + layout_.n_sigma + layout_.n_alpha;
                auto e_sums = det_sum_vec(n, e_dim, threads_, [&](std::size_t j, double* row) {
                    const double base = qdot_[j] * exp_eta[j];
                    row[0] = base * G[j] * F[j];
                    for (int l = 0; l < layout_.q(); ++l) row[1 + l] = base * G[j] * F[j] * design_[j][l];
                    if (layout_.n_sigma > 0)
                        row[1 + layout_.q() + layout_.sigma_index(events_[j].type)] = base * G[j] * dF[j];
                    if (layout_.n_alpha > 0)
                        row[1 + layout_.q() + layout_.n_sigma + layout_.alpha_index(events_[j].type)] =
                            base * dG[j] * F[j];
                });
                g[layout_.gamma0_offset()] -= e_sums[0];
                for (int l = 0; l < layout_.q(); ++l) g[layout_.gamma_offset() + l] -= e_sums[1 + l];
                for (int k = 0; k < layout_.n_sigma; ++k)
                    g[layout_.logsigma_offset() + k] -= e_sums[1 + layout_.q() + k];
                for (int k = 0; k < layout_.n_alpha; ++k)
                    g[layout_.logalpha_offset() + k] -= e_sums[1 + layout_.q() + layout_.n_sigma + k];
            }
            *score = g;
        }
        if (info) {
            Matrix m = Matrix::Zero(d, d);
            const std::size_t off = 1 + (score ? d : 0);
            for (int a = 0; a < d; ++a)
                for (int b = 0; b < d; ++b) m(a, b) = ev_sums[off + a * d + b];
            *info = 0.5 * (m + m.transpose());
        }
    }

    // fitted cumulative intensity of the ground process at the query times;
    // Lambda_g(T) equals endemic_integral + epidemic_integral exactly
    std::vector<double> cumulative_ground_intensity(const Vector& theta,
                                                    const std::vector<double>& times) const {
        const std::size_t n = events_.size();
        double beta0_sum = 0.0;
        for (int k = 0; k < layout_.K; ++k) beta0_sum += std::exp(layout_.beta0(theta, k));

        // per-interval spatial sums (reuse the tau-major cell ordering)
        const std::size_t D = grid_->n_intervals(), M = grid_->n_tiles();
        std::vector<double> interval_rate(D, 0.0); // events/day within interval tau
        for (std::size_t tau = 0; tau < D; ++tau) {
            Ksum acc;
            for (std::size_t xi = 0; xi < M; ++xi) {
                const std::size_t c = tau * M + xi;
                double lp = 0.0;
                for (int l = 0; l < layout_.p; ++l) lp += theta[layout_.beta_offset() + l] * cell_z_[c][l];
                acc.add(cell_weight_[c] / grid_->interval_length(tau) * std::exp(lp));
            }
            interval_rate[tau] = beta0_sum * acc.value();
        }
        std::vector<double> exp_eta(n, 0.0), F(n, 0.0);
        if (spec_.epidemic) {
            for (std::size_t j = 0; j < n; ++j) {
                exp_eta[j] = std::exp(layout_.gamma0(theta) + gamma_dot(theta, j));
                F[j] = regions_[j].integrate(spec_.interaction, layout_.sigma(theta, events_[j].type)).first;
            }
        }

        std::vector<double> out(times.size(), 0.0);
        for (std::size_t q = 0; q < times.size(); ++q) {
            const double t = std::min(times[q], grid_->t_end());
            if (t <= grid_->t_start()) continue;
            Ksum acc;
            // endemic part: full intervals before t plus the partial one
            for (std::size_t tau = 0; tau < D; ++tau) {
                const auto& iv = grid_->intervals[tau];
                if (t >= iv.second) {
                    acc.add(interval_rate[tau] * grid_->interval_length(tau));
                } else {
                    if (t > iv.first) acc.add(interval_rate[tau] * (t - iv.first));
                    break;
                }
            }
            if (spec_.epidemic) {
                const double eps = spec_.interaction.epsilon;
                for (std::size_t j = 0; j < n && events_[j].t < t; ++j) {
                    const double u = std::min(t - events_[j].t, eps);
                    acc.add(qdot_[j] * exp_eta[j] *
                            g_integral(spec_.interaction, layout_.alpha(theta, events_[j].type), u) * F[j]);
                }
            }
            out[q] = acc.value();
        }
        return out;
    }

    // closed-form-ish default start (endemic intercept from the event count,
    // weak epidemic, sigma at delta/10)
    Vector default_init() const {
        Vector th = Vector::Zero(layout_.dim());
        Ksum wsum;
        for (double w : cell_weight_) wsum.add(w);
        const double denom = std::max(1e-300, layout_.K * wsum.value());
        const double b0 = std::log(std::max<double>(1, events_.size()) / denom);
        for (int k = 0; k < layout_.n_beta0(); ++k) th[k] = b0;
        if (spec_.epidemic) {
            // sigma: method-of-moments from the observed source->target
            // distances; a too-small start puts the kernel at ~0 on every
            // observed pair and the optimizer collapses the epidemic instead
            // of growing sigma
            const double delta = spec_.interaction.delta;
            double sigma0 = delta / 10.0;
            if (layout_.n_sigma > 0) {
                Ksum r2_acc;
                std::size_t n_pairs = 0;
                for (const auto& links : sources_)
                    for (const auto& link : links) {
                        r2_acc.add(link.r2);
                        ++n_pairs;
                    }
                if (n_pairs > 0)
                    sigma0 = std::clamp(std::sqrt(r2_acc.value() / n_pairs / 2.0), delta / 20.0,
                                        delta / 2.0);
            }
            for (int k = 0; k < layout_.n_sigma; ++k)
                th[layout_.logsigma_offset() + k] = std::log(sigma0);
            // aim the initial expected epidemic count at ~20% of the events so
            // the first iterates sit on a responsive part of the gamma0 axis
            // instead of the dead-epidemic plateau
            Ksum expo;
            for (std::size_t j = 0; j < events_.size(); ++j) {
                if (qdot_[j] == 0) continue;
                const double G = g_integral(spec_.interaction, 1.0, trunc_[j]);
                const double F = regions_[j].integrate(spec_.interaction, sigma0).first;
                expo.add(qdot_[j] * G * F);
            }
            const double S = expo.value();
            th[layout_.gamma0_offset()] =
                S > 0.0 ? std::clamp(std::log(0.2 * events_.size() / S), -10.0, 2.0) : -10.0;
        }
        return th;
    }

  private:
    void prepare() {
        const std::size_t n = events_.size();
        const double T = grid_->t_end();
        const double eps = spec_.interaction.epsilon;
        const double delta = spec_.interaction.delta;

        z_.resize(n);
        design_.resize(n);
        qdot_.resize(n);
        trunc_.resize(n);
        endemic_rate_.resize(n);
        sources_.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            const Event& ev = events_[i];
            const auto [tau, xi] = locate(ev.t, ev.s, *grid_);
            endemic_rate_[i] = grid_->offset[tau][xi];
            z_[i].resize(layout_.p);
            for (int l = 0; l < layout_.p; ++l)
                z_[i][l] = grid_->covariates.at(spec_.endemic_covariates[l])[tau][xi];
            design_[i] = epidemic_design_row(ev, spec_);
            qdot_[i] = spec_.epidemic ? spec_.Q.row_sum(ev.type) : 0;
            trunc_[i] = std::min(T - ev.t, eps);
            if (spec_.epidemic) {
                const double d2 = delta * delta;
                auto it = std::lower_bound(events_.begin(), events_.end(), ev.t - eps,
                                           [](const Event& e, double v) { return e.t < v; });
                for (; it != events_.end() && it->t < ev.t; ++it) {
                    if (spec_.Q(it->type, ev.type) != 1) continue;
                    const double r2 = dist2(it->s, ev.s);
                    if (r2 > d2) continue;
                    sources_[i].push_back({static_cast<std::size_t>(it - events_.begin()), ev.t - it->t, r2});
                }
            }
        }

        // endemic grid cells in fixed tau-major order
        const std::size_t D = grid_->n_intervals(), M = grid_->n_tiles();
        cell_weight_.reserve(D * M);
        cell_z_.reserve(D * M);
        for (std::size_t tau = 0; tau < D; ++tau) {
            for (std::size_t xi = 0; xi < M; ++xi) {
                cell_weight_.push_back(grid_->interval_length(tau) * grid_->tile_areas[xi] *
                                       grid_->offset[tau][xi]);
                std::vector<double> z(layout_.p);
                for (int l = 0; l < layout_.p; ++l)
                    z[l] = grid_->covariates.at(spec_.endemic_covariates[l])[tau][xi];
                cell_z_.push_back(std::move(z));
            }
        }

        // spatial interaction regions R_j with frozen midpoint sets
        if (spec_.epidemic) {
            regions_.resize(n);
            const double w0 = spec_.cubature_cell_width();
            const double sigma_ref = delta / 10.0; // default-init sigma; cells frozen here
            parallel_for(n, threads_, [&](std::size_t j) {
                detail::EventRegion er;
                const Disc disc{events_[j].s, delta};
                for (const auto& tile : grid_->tiles) {
                    auto piece = clip_to_disc(tile, disc, spec_.cubature.disc_vertices);
                    for (auto& ring : piece.rings) {
                        for (const auto& pt : ring) er.region.box.expand(pt);
                        er.region.rings.push_back(std::move(ring));
                    }
                    er.region.area += piece.area;
                    er.region.disc_area_rel_err = piece.disc_area_rel_err;
                }
                er.region.clip_radius = delta;
                if (spec_.interaction.f_family == SpatialFamily::gaussian && !er.region.empty()) {
                    // adaptive halving on the reference kernel, then freeze
                    er.build_level(w0, 0);
                    if (w0 > er.region.box.width() || w0 > er.region.box.height()) er.degenerate = true;
                    double prev = kernel_sum(er, 0, sigma_ref);
                    for (int l = 1; l <= spec_.cubature.max_refinements; ++l) {
                        er.build_level(w0, l);
                        const double cur = kernel_sum(er, l, sigma_ref);
                        er.level = l;
                        if (std::abs(cur - prev) / std::max(std::abs(cur), 1e-300) < spec_.cubature.rel_tol)
                            break;
                        prev = cur;
                    }
                }
                regions_[j] = std::move(er);
            });
            for (std::size_t j = 0; j < n; ++j)
                if (regions_[j].degenerate)
                    warnings_.push_back("cubature cell wider than interaction region of event " +
                                        std::to_string(j));
        }
    }

    double kernel_sum(const detail::EventRegion& er, int level, double sigma) const {
        Ksum acc;
        for (double r2 : er.level_r2[level]) acc.add(f_eval(spec_.interaction, sigma, r2));
        return acc.value() * er.level_cell_area[level];
    }

    double gamma_dot(const Vector& theta, std::size_t j) const {
        double v = 0.0;
        for (int l = 0; l < layout_.q(); ++l) v += theta[layout_.gamma_offset() + l] * design_[j][l];
        return v;
    }
    double beta_dot(const Vector& theta, std::size_t i) const {
        double v = 0.0;
        for (int l = 0; l < layout_.p; ++l) v += theta[layout_.beta_offset() + l] * z_[i][l];
        return v;
    }

    std::vector<Event> events_;
    const SpaceTimeGrid* grid_;
    ModelSpec spec_;
    ParameterLayout layout_;
    int threads_;

    std::vector<std::vector<double>> z_;      // endemic covariate row per event
    std::vector<std::vector<double>> design_; // epidemic design row per event
    std::vector<int> qdot_;
    std::vector<double> trunc_;        // min(T - t_j, eps)
    std::vector<double> endemic_rate_; // rho at the event's cell
    std::vector<std::vector<detail::SourceLink>> sources_;
    std::vector<detail::EventRegion> regions_;
    std::vector<double> cell_weight_; // |C_tau| |A_xi| rho
    std::vector<std::vector<double>> cell_z_;
    std::vector<std::string> warnings_;
};

// --- standalone operations -------------------------------------------------

inline double endemic_integral(const Vector& theta, const SpaceTimeGrid& grid, const ModelSpec& spec,
                               int threads = 1) {
    LikelihoodEvaluator ev({}, grid, spec, threads);
    return ev.parts(theta).endemic_integral;
}

inline double epidemic_integral(const Vector& theta, const std::vector<Event>& events,
                                const SpaceTimeGrid& grid, const ModelSpec& spec, int threads = 1) {
    LikelihoodEvaluator ev(events, grid, spec, threads);
    return ev.parts(theta).epidemic_integral;
}

inline LikelihoodParts log_likelihood(const Vector& theta, const std::vector<Event>& events,
                                      const SpaceTimeGrid& grid, const ModelSpec& spec, int threads = 1) {
    LikelihoodEvaluator ev(events, grid, spec, threads);
    return ev.parts(theta);
}

inline Matrix numerical_hessian(const LikelihoodEvaluator& ev, const Vector& theta, double rel_step = 1e-5) {
    const int d = static_cast<int>(theta.size());
    Matrix h(d, d);
    for (int a = 0; a < d; ++a) {
        const double step = rel_step * std::max(1.0, std::abs(theta[a]));
        Vector up = theta, dn = theta;
        up[a] += step;
        dn[a] -= step;
        h.col(a) = (ev.score(up) - ev.score(dn)) / (2.0 * step);
    }
    return 0.5 * (h + h.transpose());
}

// BFGS quasi-Newton ascent with backtracking Armijo line search.
inline FitResult fit(const LikelihoodEvaluator& ev, std::optional<Vector> theta_init = std::nullopt) {
    const auto& layout = ev.layout();
    const auto& opts = ev.spec().optimizer;
    const int d = layout.dim();

    FitResult res;
    res.layout = layout;
    res.warnings = ev.warnings();

    Vector theta = theta_init ? *theta_init : ev.default_init();
    LikelihoodParts parts;
    Vector grad = Vector::Zero(d);
    ev.evaluate(theta, parts, &grad, nullptr);
    if (!parts.finite) {
        res.theta = theta;
        res.parts = parts;
        res.loglik = parts.loglik;
        res.warnings.push_back("zero intensity at event " + std::to_string(parts.zero_intensity_event) +
                               " at the initial parameters");
        return res;
    }

    Matrix Hinv = Matrix::Identity(d, d);
    double ll = parts.loglik;
    bool converged = false;
    int iter = 0;
    bool first_update = true;

    for (; iter < opts.max_iterations; ++iter) {
        if (grad.lpNorm<Eigen::Infinity>() < opts.grad_tol * std::max(1.0, std::abs(ll))) {
            converged = true;
            break;
        }
        Vector dir = Hinv * grad; // ascent direction
        double slope = grad.dot(dir);
        if (!(slope > 0.0)) {
            dir = grad;
            slope = grad.squaredNorm();
            Hinv = Matrix::Identity(d, d);
            first_update = true;
        }

        double ll_new = -std::numeric_limits<double>::infinity();
        Vector theta_new;
        LikelihoodParts parts_new;
        Vector grad_new = Vector::Zero(d);
        bool accepted = false;
        // on a line-search stall along the quasi-Newton direction, restart
        // once along the raw gradient before declaring a dead end
        for (int attempt = 0; attempt < 2 && !accepted; ++attempt) {
            double step = 1.0;
            for (int ls = 0; ls < 50; ++ls) {
                theta_new = theta + step * dir;
                ev.evaluate(theta_new, parts_new, &grad_new, nullptr);
                ll_new = parts_new.loglik;
                if (parts_new.finite && ll_new >= ll + 1e-4 * step * slope) {
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if (!accepted && attempt == 0) {
                dir = grad;
                slope = grad.squaredNorm();
                Hinv = Matrix::Identity(d, d);
                first_update = true;
            }
        }
        if (!accepted) break; // no ascent possible from here

        const Vector s = theta_new - theta;
        const Vector y = grad - grad_new; // gradient of -ll increases along s
        const double sy = s.dot(y);
        if (sy > 1e-12 * s.norm() * y.norm()) {
            if (first_update) {
                Hinv = (sy / y.squaredNorm()) * Matrix::Identity(d, d);
                first_update = false;
            }
            const Vector Hy = Hinv * y;
            const double yHy = y.dot(Hy);
            Hinv += ((sy + yHy) / (sy * sy)) * (s * s.transpose()) -
                    (Hy * s.transpose() + s * Hy.transpose()) / sy;
        }

        const double rel_change = std::abs(ll_new - ll) / std::max(1.0, std::abs(ll_new));
        theta = theta_new;
        parts = parts_new;
        grad = grad_new;
        ll = ll_new;
        if (rel_change < opts.loglik_rel_tol) {
            converged = grad.lpNorm<Eigen::Infinity>() < opts.grad_tol * std::max(1.0, std::abs(ll));
            ++iter;
            break;
        }
    }
    if (!converged && grad.lpNorm<Eigen::Infinity>() < opts.grad_tol * std::max(1.0, std::abs(ll)))
        converged = true;

    res.theta = theta;
    res.loglik = ll;
    res.parts = parts;
    res.score = grad;
    res.grad_norm = grad.lpNorm<Eigen::Infinity>();
    res.iterations = iter;
    res.converged = converged;
    if (!converged) res.warnings.push_back("optimizer did not converge; best iterate returned");

    res.information = ev.information(theta);
    Eigen::LLT<Matrix> llt(res.information);
    if (llt.info() == Eigen::Success) {
        res.covariance = llt.solve(Matrix::Identity(d, d));
    } else {
        // pseudo-inverse on the nonsingular eigenspace
        Eigen::SelfAdjointEigenSolver<Matrix> es(res.information);
        Vector inv_ev = es.eigenvalues();
        for (int a = 0; a < d; ++a) inv_ev[a] = inv_ev[a] > 1e-12 ? 1.0 / inv_ev[a] : 0.0;
        res.covariance = es.eigenvectors() * inv_ev.asDiagonal() * es.eigenvectors().transpose();
        res.warnings.push_back("information matrix singular; covariance is a pseudo-inverse");
    }
    res.aic = -2.0 * res.loglik + 2.0 * d;
    return res;
}

inline FitResult fit(const std::vector<Event>& events, const SpaceTimeGrid& grid, const ModelSpec& spec,
                     std::optional<Vector> theta_init = std::nullopt, int threads = 1) {
    LikelihoodEvaluator ev(events, grid, spec, threads);
    return fit(ev, std::move(theta_init));
}

// --- Wald table ------------------------------------------------------------

inline double normal_sf2(double z) { // two-sided p-value
    return std::erfc(std::abs(z) / std::sqrt(2.0));
}

inline std::string wald_table(const FitResult& res) {
    std::ostringstream os;
    os << "              Estimate  Std. Error     z value    P(|Z|>|z|)\n";
    const auto names = res.layout.names();
    for (int a = 0; a < res.dim(); ++a) {
        const double se = std::sqrt(std::max(0.0, res.covariance(a, a)));
        const double z = se > 0.0 ? res.theta[a] / se : 0.0;
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%-14s %9.4f   %9.4f   %9.2f   %11.3g\n", names[a].c_str(),
                      res.theta[a], se, z, normal_sf2(z));
        os << buf;
    }
    char tail[160];
    std::snprintf(tail, sizeof(tail), "\nlog-likelihood: %.4f   AIC: %.2f   converged: %s (%d iterations)\n",
                  res.loglik, res.aic, res.converged ? "yes" : "no", res.iterations);
    os << tail;
    return os.str();
}

// --- model search ----------------------------------------------------------

struct SearchEntry {
    ModelSpec spec;
    std::string label;
    FitResult result;
    bool ok = false;
    std::string error;
};

// Two-stage search: every candidate is first fitted with a constant spatial
// kernel; the top 10 by AIC are then refitted with gaussian kernels (shared
// sigma, and per-type sigma when K > 1). Ranked by AIC, ties broken by
// fewer parameters.
inline std::vector<SearchEntry> model_search(const std::vector<Event>& events, const SpaceTimeGrid& grid,
                                             std::vector<std::pair<std::string, ModelSpec>> candidates,
                                             int threads = 1) {
    std::vector<SearchEntry> all;
    auto run_one = [&](const std::string& label, ModelSpec spec) {
        SearchEntry e;
        e.label = label;
        e.spec = spec;
        try {
            e.result = fit(events, grid, spec, std::nullopt, threads);
            e.ok = true;
        } catch (const std::exception& ex) {
            e.error = ex.what();
        }
        return e;
    };

    for (auto& [label, spec] : candidates) {
        ModelSpec stage1 = spec;
        stage1.interaction.f_family = SpatialFamily::constant;
        all.push_back(run_one(label + "|f=constant", stage1));
    }

    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < all.size(); ++i)
        if (all[i].ok) order.push_back(i);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return all[a].result.aic < all[b].result.aic; });
    if (order.size() > 10) order.resize(10);

    for (std::size_t idx : order) {
        if (!all[idx].spec.epidemic) continue; // no spatial kernel without an epidemic component
        std::string base = all[idx].label;
        const std::string stage1_suffix = "|f=constant";
        if (base.size() >= stage1_suffix.size() &&
            base.compare(base.size() - stage1_suffix.size(), stage1_suffix.size(), stage1_suffix) == 0)
            base.resize(base.size() - stage1_suffix.size());
        ModelSpec shared = all[idx].spec;
        shared.interaction.f_family = SpatialFamily::gaussian;
        shared.interaction.f_shared = true;
        all.push_back(run_one(base + "|f=gaussian", shared));
        if (shared.K() > 1) {
            ModelSpec per_type = shared;
            per_type.interaction.f_shared = false;
            all.push_back(run_one(base + "|f=gaussian_per_type", per_type));
        }
    }

    std::stable_sort(all.begin(), all.end(), [](const SearchEntry& a, const SearchEntry& b) {
        if (a.ok != b.ok) return a.ok;
        if (!a.ok) return false;
        if (a.result.aic != b.result.aic) return a.result.aic < b.result.aic;
        return a.result.dim() < b.result.dim();
    });
    return all;
}

} // namespace twinstim
