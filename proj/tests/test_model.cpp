#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "fixtures.hpp"
#include "twinstim/model.hpp"
#include "twinstim/rng.hpp"

using namespace twinstim;
using fixtures::make_event;

namespace {

constexpr double kPi = 3.141592653589793238462643383279;

// exhaustive-scan locate oracle
std::pair<int, int> locate_oracle(double t, const Point& s, const SpaceTimeGrid& grid) {
    int tau = -1;
    for (std::size_t d = 0; d < grid.intervals.size(); ++d) {
        const auto& iv = grid.intervals[d];
        if ((t >= iv.first && t < iv.second) || (t == grid.t_end() && d + 1 == grid.intervals.size()))
            if (tau < 0) tau = static_cast<int>(d);
    }
    int xi = -1;
    for (std::size_t m = 0; m < grid.tiles.size(); ++m)
        if (point_in_polygon(s, grid.tiles[m])) {
            xi = static_cast<int>(m);
            break;
        }
    return {tau, xi};
}

} // namespace

TEST_CASE("locate basics") {
    // weekly intervals over 10 weeks, 3x3 tiles of side 1
    const auto grid = fixtures::make_grid(3, 3, 1.0, 10, 70.0);
    CHECK(grid.locate_interval(0.5) == 0);
    CHECK(grid.locate_interval(7.0) == 1);  // interval starts are [start, end)
    CHECK(grid.locate_interval(70.0) == 9); // right endpoint belongs to the last interval
    CHECK(grid.locate_interval(0.0) == -1);
    CHECK(grid.locate_interval(70.5) == -1);

    // tile centroid maps to its own index
    for (std::size_t m = 0; m < grid.n_tiles(); ++m) {
        const auto b = grid.tiles[m].bbox();
        CHECK(grid.locate_tile({(b.min_x + b.max_x) / 2, (b.min_y + b.max_y) / 2}) == static_cast<int>(m));
    }

    // shared tile boundary resolves to the lowest index
    CHECK(grid.locate_tile({1.0, 0.5}) == 0);

    CHECK_THROWS_AS(locate(0.5, {10.0, 10.0}, grid), ModelError);
    CHECK_THROWS_AS(locate(-1.0, {0.5, 0.5}, grid), ModelError);
}

TEST_CASE("locate agrees with the exhaustive-scan oracle") {
    const auto grid = fixtures::make_grid(4, 3, 0.7, 13, 91.0);
    Rng rng(101);
    int checked = 0;
    for (int i = 0; i < 1000; ++i) {
        const double t = rng.uniform(0.0001, 91.0);
        const Point s{rng.uniform(0, 4 * 0.7), rng.uniform(0, 3 * 0.7)};
        const auto [tau_o, xi_o] = locate_oracle(t, s, grid);
        if (tau_o < 0 || xi_o < 0) continue;
        const auto [tau, xi] = locate(t, s, grid);
        CHECK(tau == tau_o);
        CHECK(xi == xi_o);
        ++checked;
    }
    CHECK(checked > 900);
}

TEST_CASE("endemic intensity closed-form examples") {
    auto spec = fixtures::endemic_only_spec();
    const auto layout = ParameterLayout::from_spec(spec);

    SECTION("rho=1, beta0=0 gives 1") {
        const auto grid = fixtures::unit_grid(10.0);
        Vector theta = Vector::Zero(layout.dim());
        CHECK(endemic_intensity(0.5, {0.5, 0.5}, 0, theta, grid, spec, layout) == Catch::Approx(1.0));
    }

    SECTION("rho=2, beta0=-1, beta'z=1 gives 2") {
        auto grid = fixtures::unit_grid(10.0, 1, 2.0);
        grid.covariates["z"] = {{1.0}};
        spec.endemic_covariates = {"z"};
        const auto l2 = ParameterLayout::from_spec(spec);
        Vector theta(l2.dim());
        theta << -1.0, 1.0;
        CHECK(endemic_intensity(0.5, {0.5, 0.5}, 0, theta, grid, spec, l2) == Catch::Approx(2.0));
    }

    SECTION("rho=0 cell gives exactly 0") {
        const auto grid = fixtures::unit_grid(10.0, 1, 0.0);
        Vector theta = Vector::Constant(layout.dim(), 5.0);
        CHECK(endemic_intensity(0.5, {0.5, 0.5}, 0, theta, grid, spec, layout) == 0.0);
    }
}

TEST_CASE("endemic intensity with trend and annual harmonics") {
    // weekly grid over one year; covariates precomputed at interval starts
    const int D = 52;
    auto grid = fixtures::make_grid(1, 1, 1.0, D, 7.0 * D, 1.0);
    std::vector<std::vector<double>> trend(D), sinv(D), cosv(D);
    for (int d = 0; d < D; ++d) {
        const double t0 = grid.intervals[d].first; // floor(t) at the monday of the week
        trend[d] = {t0 / 365.0};
        sinv[d] = {std::sin(2.0 * kPi * t0 / 365.0)};
        cosv[d] = {std::cos(2.0 * kPi * t0 / 365.0)};
    }
    grid.covariates["trend"] = trend;
    grid.covariates["sin"] = sinv;
    grid.covariates["cos"] = cosv;

    auto spec = fixtures::endemic_only_spec();
    spec.endemic_covariates = {"trend", "sin", "cos"};
    const auto layout = ParameterLayout::from_spec(spec);
    Vector theta(layout.dim());
    theta << -20.3652, -0.0493, 0.2618, 0.2668;

    // t inside week 8 (zero-based interval 7)
    const double t = 7.0 * 7 + 3.2;
    const double got = endemic_intensity(t, {0.5, 0.5}, 0, theta, grid, spec, layout);

    const double t0 = 7.0 * 7;
    const double lp = -20.3652 - 0.0493 * (t0 / 365.0) + 0.2618 * std::sin(2.0 * kPi * t0 / 365.0) +
                      0.2668 * std::cos(2.0 * kPi * t0 / 365.0);
    const double expected = std::exp(lp);
    CHECK(std::abs(got - expected) <= 1e-12 * expected);
}

TEST_CASE("infective_set bounds and oracle") {
    auto spec = fixtures::epidemic_spec(1, 2.0, 3.0);

    SECTION("empty history") {
        CHECK(infective_set(1.0, {0, 0}, 0, {}, spec).empty());
    }

    SECTION("closed bounds: age exactly eps, distance exactly delta") {
        std::vector<Event> hist{make_event(1.0, 3.0, 0.0)};
        const auto in = infective_set(3.0, {0.0, 0.0}, 0, hist, spec); // age 2 = eps, dist 3 = delta
        REQUIRE(in.size() == 1);
        CHECK(in[0] == 0);
        // just beyond either bound drops the event
        CHECK(infective_set(3.0 + 1e-9, {0.0, 0.0}, 0, hist, spec).empty());
        CHECK(infective_set(3.0, {-1e-6, 0.0}, 0, hist, spec).empty());
        // strictly past only: t_j == t excluded
        CHECK(infective_set(1.0, {3.0, 0.0}, 0, hist, spec).empty());
    }

    SECTION("brute-force predicate scan over random history") {
        auto spec2 = fixtures::epidemic_spec(2, 1.5, 0.8);
        spec2.Q = TransmissionMatrix::identity(2);
        spec2.Q.q[0 * 2 + 1] = 1; // type 0 can also trigger type 1
        Rng rng(55);
        std::vector<Event> hist;
        for (int i = 0; i < 1000; ++i)
            hist.push_back(make_event(rng.uniform(0, 10), rng.uniform(0, 3), rng.uniform(0, 3),
                                      static_cast<int>(rng.below(2))));
        std::sort(hist.begin(), hist.end(), [](const Event& a, const Event& b) { return a.t < b.t; });
        for (int rep = 0; rep < 50; ++rep) {
            const double t = rng.uniform(0, 11);
            const Point s{rng.uniform(0, 3), rng.uniform(0, 3)};
            const int type = static_cast<int>(rng.below(2));
            std::vector<std::size_t> expected;
            for (std::size_t j = 0; j < hist.size(); ++j) {
                const double dt = t - hist[j].t;
                if (dt > 0 && dt <= spec2.interaction.epsilon &&
                    dist2(hist[j].s, s) <= spec2.interaction.delta * spec2.interaction.delta &&
                    spec2.Q(hist[j].type, type) == 1)
                    expected.push_back(j);
            }
            CHECK(infective_set(t, s, type, hist, spec2) == expected);
        }
    }
}

TEST_CASE("epidemic intensity examples") {
    SECTION("empty infective set gives 0") {
        auto spec = fixtures::epidemic_spec(1, 2.0, 3.0);
        const auto layout = ParameterLayout::from_spec(spec);
        Vector theta = Vector::Zero(layout.dim());
        CHECK(epidemic_intensity(1.0, {0, 0}, 0, theta, {}, spec, layout) == 0.0);
    }

    SECTION("single gaussian source at distance 1, sigma 1, eta 0") {
        auto spec = fixtures::epidemic_spec(1, 10.0, 10.0, false, SpatialFamily::gaussian);
        const auto layout = ParameterLayout::from_spec(spec);
        Vector theta = Vector::Zero(layout.dim()); // gamma0 = 0, log sigma = 0
        std::vector<Event> hist{make_event(1.0, 0.0, 0.0)};
        const double got = epidemic_intensity(2.0, {1.0, 0.0}, 0, theta, hist, spec, layout);
        CHECK(got == Catch::Approx(std::exp(-0.5)).epsilon(1e-12));
    }

    SECTION("50 random sources vs naive double-loop oracle") {
        auto spec = fixtures::epidemic_spec(2, 5.0, 2.0, true, SpatialFamily::gaussian,
                                            TemporalFamily::exponential);
        spec.interaction.f_shared = false;
        spec.interaction.g_shared = false;
        spec.epidemic_terms.push_back("weight");
        const auto layout = ParameterLayout::from_spec(spec);
        Rng rng(7);
        Vector theta(layout.dim());
        for (int i = 0; i < layout.dim(); ++i) theta[i] = rng.uniform(-0.5, 0.5);
        std::vector<Event> hist;
        for (int i = 0; i < 50; ++i) {
            auto ev = make_event(rng.uniform(0, 8), rng.uniform(0, 2), rng.uniform(0, 2),
                                 static_cast<int>(rng.below(2)));
            ev.marks["weight"] = rng.uniform(-1, 1);
            hist.push_back(ev);
        }
        std::sort(hist.begin(), hist.end(), [](const Event& a, const Event& b) { return a.t < b.t; });

        for (int rep = 0; rep < 20; ++rep) {
            const double t = rng.uniform(0.1, 9);
            const Point s{rng.uniform(0, 2), rng.uniform(0, 2)};
            const int type = static_cast<int>(rng.below(2));
            double expected = 0.0;
            for (const auto& src : hist) {
                const double dt = t - src.t;
                const double r2 = dist2(src.s, s);
                if (!(dt > 0 && dt <= spec.interaction.epsilon)) continue;
                if (r2 > spec.interaction.delta * spec.interaction.delta) continue;
                if (spec.Q(src.type, type) != 1) continue;
                double eta = layout.gamma0(theta);
                int col = layout.gamma_offset();
                if (src.type == 1) eta += theta[col];
                eta += theta[col + 1] * src.marks.at("weight");
                const double sigma = layout.sigma(theta, src.type);
                const double alpha = layout.alpha(theta, src.type);
                expected += std::exp(eta) * std::exp(-alpha * dt) * std::exp(-r2 / (2 * sigma * sigma));
            }
            const double got = epidemic_intensity(t, s, type, theta, hist, spec, layout);
            CHECK(got == Catch::Approx(expected).margin(1e-12));
        }
    }
}

TEST_CASE("cif reductions and properties") {
    const auto grid = fixtures::unit_grid(10.0);
    Rng rng(19);

    SECTION("no epidemic component reduces to the endemic intensity") {
        auto spec = fixtures::endemic_only_spec();
        const auto layout = ParameterLayout::from_spec(spec);
        Vector theta(1);
        theta << 0.7;
        std::vector<Event> hist{make_event(0.2, 0.5, 0.5)};
        CHECK(cif(1.0, {0.3, 0.3}, 0, theta, hist, grid, spec, layout) ==
              endemic_intensity(1.0, {0.3, 0.3}, 0, theta, grid, spec, layout));
    }

    SECTION("zero offset reduces to the epidemic intensity") {
        auto spec = fixtures::epidemic_spec(1, 3.0, 2.0);
        const auto zero_grid = fixtures::unit_grid(10.0, 1, 0.0);
        const auto layout = ParameterLayout::from_spec(spec);
        Vector theta = Vector::Zero(layout.dim());
        std::vector<Event> hist{make_event(0.2, 0.5, 0.5)};
        CHECK(cif(1.0, {0.3, 0.3}, 0, theta, hist, zero_grid, spec, layout) ==
              epidemic_intensity(1.0, {0.3, 0.3}, 0, theta, hist, spec, layout));
    }

    SECTION("random configurations: component sum, nonnegativity, future independence") {
        auto spec = fixtures::epidemic_spec(2, 4.0, 1.0, true, SpatialFamily::gaussian);
        const auto layout = ParameterLayout::from_spec(spec);
        for (int rep = 0; rep < 30; ++rep) {
            Vector theta(layout.dim());
            for (int i = 0; i < layout.dim(); ++i) theta[i] = rng.uniform(-1, 1);
            std::vector<Event> hist;
            for (int i = 0; i < 20; ++i)
                hist.push_back(make_event(rng.uniform(0, 9), rng.uniform(0, 1), rng.uniform(0, 1),
                                          static_cast<int>(rng.below(2))));
            std::sort(hist.begin(), hist.end(), [](const Event& a, const Event& b) { return a.t < b.t; });
            const double t = rng.uniform(0.1, 10);
            const Point s{rng.uniform(0, 1), rng.uniform(0, 1)};
            const int type = static_cast<int>(rng.below(2));
            const double lam = cif(t, s, type, theta, hist, grid, spec, layout);
            CHECK(lam >= 0.0);
            CHECK(lam == endemic_intensity(t, s, type, theta, grid, spec, layout) +
                             epidemic_intensity(t, s, type, theta, hist, spec, layout));

            // appending a future event leaves the intensity unchanged
            auto hist2 = hist;
            hist2.push_back(make_event(t + rng.uniform(0, 1), 0.5, 0.5, 0));
            CHECK(cif(t, s, type, theta, hist2, grid, spec, layout) == lam);

            // monotone superposition: one more past same-type event never decreases it
            auto hist3 = hist;
            hist3.push_back(make_event(t * 0.5, rng.uniform(0, 1), rng.uniform(0, 1), type));
            std::sort(hist3.begin(), hist3.end(), [](const Event& a, const Event& b) { return a.t < b.t; });
            CHECK(epidemic_intensity(t, s, type, theta, hist3, spec, layout) >=
                  epidemic_intensity(t, s, type, theta, hist, spec, layout) - 1e-15);
        }
    }

    SECTION("type masking with Q = I") {
        auto spec = fixtures::epidemic_spec(2, 100.0, 100.0);
        const auto layout = ParameterLayout::from_spec(spec);
        Vector theta = Vector::Zero(layout.dim());
        std::vector<Event> hist{make_event(0.5, 0.5, 0.5, 0)};
        // a type-0 source contributes nothing to type-1 intensity
        CHECK(epidemic_intensity(1.0, {0.5, 0.5}, 1, theta, hist, spec, layout) == 0.0);
        CHECK(epidemic_intensity(1.0, {0.5, 0.5}, 0, theta, hist, spec, layout) > 0.0);
    }
}

TEST_CASE("parameter layout dimensions and names") {
    auto spec = fixtures::epidemic_spec(3, 5.0, 2.0, true, SpatialFamily::gaussian,
                                        TemporalFamily::exponential);
    spec.intercept_mode = InterceptMode::per_type;
    spec.interaction.f_shared = false;
    spec.endemic_covariates = {"z1", "z2"};
    spec.epidemic_terms.push_back("weight");
    const auto layout = ParameterLayout::from_spec(spec);
    // 3 intercepts + 2 beta + gamma0 + (2 type dummies + weight) + 3 log sigma + 1 log alpha
    CHECK(layout.dim() == 3 + 2 + 1 + 3 + 3 + 1);
    const auto names = layout.names();
    REQUIRE(static_cast<int>(names.size()) == layout.dim());
    CHECK(names[0] == "beta0[0]");
    CHECK(names[5] == "gamma0");
    CHECK(names[6] == "gamma:type:1");
    CHECK(names[8] == "gamma:weight");
    CHECK(names[9] == "log_sigma[0]");
    CHECK(names[12] == "log_alpha");

    Event ev = make_event(1.0, 0, 0, 2);
    ev.marks["weight"] = 2.5;
    const auto row = epidemic_design_row(ev, spec);
    CHECK(row == std::vector<double>{0.0, 1.0, 2.5});
    Event missing = make_event(1.0, 0, 0, 0);
    CHECK_THROWS_AS(epidemic_design_row(missing, spec), ModelError);
}

TEST_CASE("grid validation rejects malformed input") {
    auto grid = fixtures::make_grid(2, 1, 1.0, 2, 10.0);
    SECTION("non-contiguous intervals") {
        grid.intervals[1].first = 6.0;
        CHECK_THROWS_AS(grid.validate(), ModelError);
    }
    SECTION("negative offset") {
        grid.offset[0][0] = -1.0;
        CHECK_THROWS_AS(grid.validate(), ModelError);
    }
    SECTION("covariate dimension mismatch") {
        grid.covariates["z"] = {{1.0, 2.0}};
        CHECK_THROWS_AS(grid.validate(), ModelError);
    }
    SECTION("overlapping tiles") {
        grid.tiles[1] = fixtures::square_tile(0.5, 0.0, 1.0);
        grid.tile_areas[1] = 1.0;
        CHECK_THROWS_AS(grid.validate(), ModelError);
    }
    SECTION("spec referencing a missing covariate") {
        auto spec = fixtures::endemic_only_spec();
        spec.endemic_covariates = {"nope"};
        CHECK_THROWS_AS(spec.validate(grid), ModelError);
    }
}

TEST_CASE("interaction kernel identities") {
    InteractionSpec is;
    is.g_family = TemporalFamily::exponential;
    is.f_family = SpatialFamily::gaussian;
    is.epsilon = 10.0;
    is.delta = 2.0;

    const double alpha = 0.7, u = 3.0;
    CHECK(g_integral(is, alpha, u) == Catch::Approx((1 - std::exp(-alpha * u)) / alpha).epsilon(1e-14));
    // d/dlog(alpha) via central differences
    const double h = 1e-6;
    const double fd = (g_integral(is, alpha * std::exp(h), u) - g_integral(is, alpha * std::exp(-h), u)) / (2 * h);
    CHECK(g_integral_dlogalpha(is, alpha, u) == Catch::Approx(fd).epsilon(1e-6));

    const double sigma = 0.8, r2 = 1.3;
    const double fds = (f_eval(is, sigma * std::exp(h), r2) - f_eval(is, sigma * std::exp(-h), r2)) / (2 * h);
    CHECK(f_eval_dlogsigma(is, sigma, r2) == Catch::Approx(fds).epsilon(1e-6));

    // untruncated disc mass: gaussian closed form and constant area
    CHECK(f_disc_integral(is, sigma) ==
          Catch::Approx(2 * kPi * sigma * sigma * (1 - std::exp(-is.delta * is.delta / (2 * sigma * sigma)))));
    is.f_family = SpatialFamily::constant;
    CHECK(f_disc_integral(is, sigma) == Catch::Approx(kPi * is.delta * is.delta));
}
