#pragma once

#include <string>
#include <vector>

#include "twinstim/model.hpp"

namespace fixtures {

using namespace twinstim;

inline Polygon square_tile(double x0, double y0, double side) {
    return Polygon{{{{x0, y0}, {x0 + side, y0}, {x0 + side, y0 + side}, {x0, y0 + side}, {x0, y0}}}};
}

// nx x ny square tiles of given side, D equal intervals on (0, T], constant offset rho
inline SpaceTimeGrid make_grid(int nx, int ny, double side, int D, double T, double rho = 1.0) {
    SpaceTimeGrid grid;
    for (int iy = 0; iy < ny; ++iy)
        for (int ix = 0; ix < nx; ++ix) {
            grid.tiles.push_back(square_tile(ix * side, iy * side, side));
            grid.tile_ids.push_back("tile" + std::to_string(grid.tiles.size() - 1));
            grid.tile_population.push_back(1000.0);
        }
    for (int d = 0; d < D; ++d) grid.intervals.emplace_back(T * d / D, T * (d + 1) / D);
    grid.offset.assign(D, std::vector<double>(nx * ny, rho));
    grid.finalize();
    return grid;
}

inline SpaceTimeGrid unit_grid(double T, int D = 1, double rho = 1.0) {
    return make_grid(1, 1, 1.0, D, T, rho);
}

inline ModelSpec endemic_only_spec(int K = 1) {
    ModelSpec spec;
    spec.epidemic = false;
    spec.Q = TransmissionMatrix::identity(K);
    return spec;
}

inline ModelSpec epidemic_spec(int K, double eps, double delta, bool type_term = false,
                               SpatialFamily f = SpatialFamily::constant,
                               TemporalFamily g = TemporalFamily::constant) {
    ModelSpec spec;
    spec.epidemic = true;
    spec.Q = TransmissionMatrix::identity(K);
    if (type_term && K > 1) spec.epidemic_terms.push_back("type");
    spec.interaction.epsilon = eps;
    spec.interaction.delta = delta;
    spec.interaction.f_family = f;
    spec.interaction.g_family = g;
    return spec;
}

inline Event make_event(double t, double x, double y, int type = 0) {
    Event ev;
    ev.t = t;
    ev.s = {x, y};
    ev.type = type;
    return ev;
}

} // namespace fixtures
