#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "twinstim/geometry.hpp"
#include "twinstim/model.hpp"
#include "twinstim/rng.hpp"

namespace twinstim {

struct SimulationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Supplies unpredictable marks for newborn events of a given type.
using MarkSampler = std::function<std::map<std::string, double>(int type, Rng&)>;

// Default scheme: resample the mark vector of a uniformly chosen seed event.
inline MarkSampler empirical_mark_sampler(std::vector<Event> pool) {
    return [pool = std::move(pool)](int /*type*/, Rng& rng) -> std::map<std::string, double> {
        if (pool.empty()) return {};
        return pool[rng.below(pool.size())].marks;
    };
}

struct SimulationResult {
    std::vector<Event> events; // Event::source: -1 endemic, else parent index
    std::uint64_t seed = 0;
    std::size_t proposals = 0;
    std::size_t accepted = 0;
    std::size_t rejected = 0;
    bool complete = false; // reached T (possibly early via a dead process)
};

// Ogata's modified thinning for the marked two-component model. A single
// trajectory is strictly sequential; run independent replicates with
// per-replicate derived seeds.
class Simulator {
  public:
    Simulator(const Vector& theta, const SpaceTimeGrid& grid, const ModelSpec& spec)
        : theta_(theta), grid_(&grid), spec_(spec), layout_(ParameterLayout::from_spec(spec)) {
        if (static_cast<int>(theta.size()) != layout_.dim())
            throw SimulationError("parameter vector does not match the model layout");
        beta0_sum_ = 0.0;
        for (int k = 0; k < layout_.K; ++k) beta0_sum_ += std::exp(layout_.beta0(theta_, k));
        // per-interval spatial sums and tile weights of the endemic component
        const std::size_t D = grid.n_intervals(), M = grid.n_tiles();
        tile_weight_.assign(D, std::vector<double>(M));
        interval_sum_.assign(D, 0.0);
        for (std::size_t tau = 0; tau < D; ++tau) {
            Ksum acc;
            for (std::size_t xi = 0; xi < M; ++xi) {
                const double w = grid.tile_areas[xi] * grid.offset[tau][xi] *
                                 std::exp(endemic_linear_predictor(static_cast<int>(tau), static_cast<int>(xi),
                                                                   theta_, layout_, spec_, grid, 0) -
                                          layout_.beta0(theta_, 0));
                tile_weight_[tau][xi] = w;
                acc.add(w);
            }
            interval_sum_[tau] = acc.value();
        }
    }

    const ParameterLayout& layout() const { return layout_; }

    // lambda*_g(t): spatially integrated CIF summed over types
    double ground_intensity(double t, const std::vector<Event>& history) const {
        return endemic_ground(t) + epidemic_ground(t, history, /*use_gbar=*/false);
    }

    struct Dominating {
        double value = 0.0;
        double changepoint = 0.0; // bound is constant on [t, changepoint)
    };

    // piecewise-constant upper bound: g replaced by its supremum; jumps only
    // at interval boundaries, event births, expiries t_j + eps, and T
    Dominating dominating_intensity(double t, const std::vector<Event>& history) const {
        Dominating d;
        // the bound holds on the open interval after t; evaluate just past it
        const double tq = std::nextafter(t, std::numeric_limits<double>::infinity());
        d.value = endemic_ground(tq) + epidemic_ground(tq, history, /*use_gbar=*/true);
        double cp = grid_->t_end();
        // next interval boundary strictly after t
        for (const auto& iv : grid_->intervals) {
            if (iv.second > t) {
                cp = std::min(cp, iv.second);
                break;
            }
        }
        const double eps = spec_.interaction.epsilon;
        for (const auto& ev : history) {
            const double expiry = ev.t + eps;
            if (expiry > t) cp = std::min(cp, expiry);
        }
        d.changepoint = cp;
        return d;
    }

    // source of an accepted time: -1 for endemic, else parent event index.
    // Consumes exactly one uniform draw.
    int sample_source(double t, const std::vector<Event>& history, Rng& rng) const {
        const double endemic_mass = endemic_ground(t);
        std::vector<double> mass;
        mass.reserve(history.size());
        Ksum total;
        total.add(endemic_mass);
        const double eps = spec_.interaction.epsilon;
        for (std::size_t j = 0; j < history.size(); ++j) {
            const Event& ev = history[j];
            const double dt = t - ev.t;
            double m = 0.0;
            if (dt > 0.0 && dt <= eps)
                m = spec_.Q.row_sum(ev.type) * event_weight(j) *
                    g_eval(spec_.interaction, layout_.alpha(theta_, ev.type), dt);
            mass.push_back(m);
            total.add(m);
        }
        if (!(total.value() > 0.0))
            throw SimulationError("accepted time has zero ground intensity");
        double u = rng.uniform() * total.value();
        if (u < endemic_mass) return -1;
        u -= endemic_mass;
        for (std::size_t j = 0; j < mass.size(); ++j) {
            if (u < mass[j]) return static_cast<int>(j);
            u -= mass[j];
        }
        return static_cast<int>(mass.size()) - 1; // rounding fell off the end
    }

    // type and location given the resolved source
    std::pair<Point, int> sample_location_and_type(double t, int source, const std::vector<Event>& history,
                                                   Rng& rng) const {
        if (source < 0) {
            // type ~ exp(beta0(k)); tile ~ |A| rho exp(beta'z); uniform in tile
            int type = 0;
            {
                double u = rng.uniform() * beta0_sum_;
                for (int k = 0; k < layout_.K; ++k) {
                    const double m = std::exp(layout_.beta0(theta_, k));
                    if (u < m) {
                        type = k;
                        break;
                    }
                    u -= m;
                    type = k;
                }
            }
            const int tau = grid_->locate_interval(t);
            if (tau < 0) throw SimulationError("simulated time outside the grid");
            std::size_t xi = 0;
            {
                double u = rng.uniform() * interval_sum_[tau];
                for (std::size_t m = 0; m < tile_weight_[tau].size(); ++m) {
                    if (u < tile_weight_[tau][m]) {
                        xi = m;
                        break;
                    }
                    u -= tile_weight_[tau][m];
                    xi = m;
                }
            }
            const auto box = grid_->tiles[xi].bbox();
            for (long i = 0; i < kRejectionCap; ++i) {
                const Point p{rng.uniform(box.min_x, box.max_x), rng.uniform(box.min_y, box.max_y)};
                if (point_in_polygon(p, grid_->tiles[xi])) return {p, type};
            }
            throw SimulationError("rejection sampling failed in tile " + std::to_string(xi));
        }

        const Event& parent = history[source];
        std::vector<int> allowed;
        for (int k = 0; k < layout_.K; ++k)
            if (spec_.Q(parent.type, k) == 1) allowed.push_back(k);
        if (allowed.empty()) throw SimulationError("source event cannot trigger any type");
        const int type = allowed[rng.below(allowed.size())];

        // offset v from the f-density truncated to R_j; proposal uniform on
        // the region bbox, accept with f(v)/f(0) inside the region
        const IntegrationRegion& region = regions_[source];
        if (region.empty()) throw SimulationError("empty interaction region for source event");
        const double sigma = layout_.sigma(theta_, parent.type);
        for (long i = 0; i < kRejectionCap; ++i) {
            const Point v{rng.uniform(region.box.min_x, region.box.max_x),
                          rng.uniform(region.box.min_y, region.box.max_y)};
            if (!region.contains(v)) continue;
            if (rng.uniform() <= f_eval(spec_.interaction, sigma, v.x * v.x + v.y * v.y))
                return {Point{parent.s.x + v.x, parent.s.y + v.y}, type};
        }
        throw SimulationError("rejection sampling failed in interaction region of event " +
                              std::to_string(source));
    }

    // Draw order per loop turn: waiting time, acceptance, then on acceptance
    // source, type, location draws, and finally marks.
    SimulationResult run(const MarkSampler& marks, std::uint64_t seed,
                         std::vector<Event> seed_history = {}) {
        Rng rng(seed);
        SimulationResult out;
        out.seed = seed;
        out.events = std::move(seed_history);
        std::sort(out.events.begin(), out.events.end(),
                  [](const Event& a, const Event& b) { return a.t < b.t; });
        regions_.clear();
        weights_.clear();
        for (const auto& ev : out.events) register_event(ev);

        const double T = grid_->t_end();
        double t0 = grid_->t_start();
        while (t0 < T) {
            const Dominating bar = dominating_intensity(t0, out.events);
            if (!(bar.value > 0.0)) {
                if (bar.changepoint >= T) break; // nothing can ever happen again
                t0 = bar.changepoint;
                continue;
            }
            const double delta_t = rng.exponential(bar.value);
            const double t_prop = t0 + delta_t;
            if (t_prop >= bar.changepoint) {
                t0 = bar.changepoint; // bound was invalid past the changepoint
                continue;
            }
            if (t_prop > T) break;
            ++out.proposals;
            const double lambda = ground_intensity(t_prop, out.events);
            if (rng.uniform() * bar.value > lambda) {
                ++out.rejected;
                t0 = t_prop;
                continue;
            }
            ++out.accepted;
            const int source = sample_source(t_prop, out.events, rng);
            const auto [loc, type] = sample_location_and_type(t_prop, source, out.events, rng);
            Event ev;
            ev.t = t_prop;
            ev.s = loc;
            ev.type = type;
            ev.source = source;
            ev.marks = marks(type, rng);
            out.events.push_back(ev);
            register_event(ev);
            t0 = t_prop;
        }
        out.complete = true;
        return out;
    }

    // cached int_{R_j} f for event j of the current run
    double event_spatial_weight(std::size_t j) const {
        return weights_[j] / std::exp(eta_of(j));
    }

  private:
    static constexpr long kRejectionCap = 1000000;

    double endemic_ground(double t) const {
        const int tau = grid_->locate_interval(t);
        if (tau < 0) return 0.0;
        return beta0_sum_ * interval_sum_[tau];
    }

    double epidemic_ground(double t, const std::vector<Event>& history, bool use_gbar) const {
        if (!spec_.epidemic) return 0.0;
        const double eps = spec_.interaction.epsilon;
        Ksum acc;
        for (std::size_t j = 0; j < history.size(); ++j) {
            const double dt = t - history[j].t;
            if (dt <= 0.0 || dt > eps) continue;
            const double g = use_gbar ? g_bar(spec_.interaction, layout_.alpha(theta_, history[j].type))
                                      : g_eval(spec_.interaction, layout_.alpha(theta_, history[j].type), dt);
            acc.add(spec_.Q.row_sum(history[j].type) * event_weight(j) * g);
        }
        return acc.value();
    }

    // exp(eta_j) * F_j, cached at event birth (sigma is fixed during a run)
    double event_weight(std::size_t j) const { return weights_[j]; }

    double eta_of(std::size_t j) const { return etas_[j]; }

    void register_event(const Event& ev) {
        if (!spec_.epidemic) {
            etas_.push_back(0.0);
            weights_.push_back(0.0);
            regions_.emplace_back();
            return;
        }
        IntegrationRegion region;
        const Disc disc{ev.s, spec_.interaction.delta};
        for (const auto& tile : grid_->tiles) {
            auto piece = clip_to_disc(tile, disc, spec_.cubature.disc_vertices);
            for (auto& ring : piece.rings) {
                for (const auto& pt : ring) region.box.expand(pt);
                region.rings.push_back(std::move(ring));
            }
            region.area += piece.area;
        }
        region.clip_radius = spec_.interaction.delta;

        double F = region.area;
        if (spec_.epidemic && spec_.interaction.f_family == SpatialFamily::gaussian && !region.empty()) {
            const double sigma = layout_.sigma(theta_, ev.type);
            auto kernel = [&](const Point& p) {
                return f_eval(spec_.interaction, sigma, p.x * p.x + p.y * p.y);
            };
            F = cubature_adaptive(kernel, region, spec_.cubature_cell_width(), spec_.cubature.rel_tol,
                                  spec_.cubature.max_refinements)
                    .value;
        }
        const double eta = spec_.epidemic ? linear_predictor_eta(ev, theta_, layout_, spec_) : 0.0;
        etas_.push_back(eta);
        weights_.push_back(spec_.epidemic ? std::exp(eta) * F : 0.0);
        regions_.push_back(std::move(region));
    }

    Vector theta_;
    const SpaceTimeGrid* grid_;
    ModelSpec spec_;
    ParameterLayout layout_;
    double beta0_sum_ = 0.0;
    std::vector<double> interval_sum_;             // per tau
    std::vector<std::vector<double>> tile_weight_; // per tau, xi
    std::vector<IntegrationRegion> regions_;       // per history event
    std::vector<double> weights_;                  // exp(eta_j) * F_j
    std::vector<double> etas_;
};

inline SimulationResult simulate(const Vector& theta, const SpaceTimeGrid& grid, const ModelSpec& spec,
                                 const MarkSampler& marks, std::uint64_t seed,
                                 std::vector<Event> seed_history = {}) {
    Simulator sim(theta, grid, spec);
    return sim.run(marks, seed, std::move(seed_history));
}

} // namespace twinstim
