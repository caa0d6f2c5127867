#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>

#include "rte/fields.hpp"
#include "rte/grid.hpp"
#include "rte/phase_function.hpp"
#include "rte/transport.hpp"

namespace rte {

/// psi(x) = int u(x,v) u(x,-v) dv, the quadratic angular correlator.
inline NodalField correlator_psi(const PhaseSpaceField& u, const AngularGrid& ang) {
    const int n = u.num_nodes();
    NodalField psi(n, 0.0);
    double w = ang.weight();
    for (int k = 0; k < ang.size(); ++k) {
        auto a = u.slice(k);
        auto b = u.slice(ang.antipode(k));
        for (int i = 0; i < n; ++i) psi[i] += w * a[i] * b[i];
    }
    return psi;
}

/// int f(x) dv over directions.
inline NodalField angular_integral(const PhaseSpaceField& f, const AngularGrid& ang) {
    const int n = f.num_nodes();
    NodalField out(n, 0.0);
    double w = ang.weight();
    for (int k = 0; k < f.num_dirs(); ++k) {
        auto s = f.slice(k);
        for (int i = 0; i < n; ++i) out[i] += w * s[i];
    }
    return out;
}

/// Correlation of a against the direction-reversed b: int a(x,v) b(x,-v) dv.
inline NodalField reversed_correlation(const PhaseSpaceField& a, const PhaseSpaceField& b,
                                       const AngularGrid& ang) {
    const int n = a.num_nodes();
    NodalField out(n, 0.0);
    double w = ang.weight();
    for (int k = 0; k < ang.size(); ++k) {
        auto sa = a.slice(k);
        auto sb = b.slice(ang.antipode(k));
        for (int i = 0; i < n; ++i) out[i] += w * sa[i] * sb[i];
    }
    return out;
}

/// Plain angular correlation int a(x,v) b(x,v) dv.
inline NodalField correlation(const PhaseSpaceField& a, const PhaseSpaceField& b,
                              const AngularGrid& ang) {
    const int n = a.num_nodes();
    NodalField out(n, 0.0);
    double w = ang.weight();
    for (int k = 0; k < ang.size(); ++k) {
        auto sa = a.slice(k);
        auto sb = b.slice(k);
        for (int i = 0; i < n; ++i) out[i] += w * sa[i] * sb[i];
    }
    return out;
}

/// Internal data at the excitation stage:
/// H = -sigma_xtf int u(v) u(-v) dv + sigma_xs int (K u)(v) u(-v) dv.
inline NodalField internal_H(const PhaseSpaceField& u, const NodalField& sigma_xtf,
                             const NodalField& sigma_xs, const PhaseFunction& pf,
                             const AngularGrid& ang) {
    PhaseSpaceField ku = scatter(u, pf);
    NodalField psi = correlator_psi(u, ang);
    NodalField xi = reversed_correlation(ku, u, ang);
    NodalField h(u.num_nodes());
    for (int i = 0; i < u.num_nodes(); ++i) h[i] = -sigma_xtf[i] * psi[i] + sigma_xs[i] * xi[i];
    return h;
}

/// Auxiliary emission-stage weight: -v.grad W + sigma_mt W = sigma_ms K W with
/// W = h on Gamma_+. Solved through the reversed-direction machinery.
inline SolveResult solve_W(const TransportSystem& emission, const BoundarySource& h_bdy,
                           const SolveOptions& opts = {}) {
    for (const auto& b : emission.grid->boundary_nodes())
        if (!(h_bdy(b.pos) > 0.0))
            throw std::domain_error("solve_W: boundary weight h must be strictly positive");
    SolveResult res = solve_forward(emission, &h_bdy, nullptr, opts);
    res.field = res.field.antipode_map(*emission.ang);
    return res;
}

/// Auxiliary excitation-stage field: -v.grad phi + sigma_xtf phi =
/// sigma_xs K phi + eta sigma_xf (I W), phi = 0 on Gamma_+.
inline SolveResult solve_phi(const TransportSystem& excitation, const PhaseSpaceField& W,
                             const NodalField& eta, const NodalField& sigma_xf,
                             const SolveOptions& opts = {}) {
    const int n = excitation.grid->num_nodes();
    const int m = excitation.ang->size();
    NodalField iw = angular_integral(W, *excitation.ang);
    PhaseSpaceField q(n, m);
    for (int k = 0; k < m; ++k) {
        auto s = q.slice(k);
        for (int i = 0; i < n; ++i) s[i] = eta[i] * sigma_xf[i] * iw[i];
    }
    return solve_adjoint(excitation, q, opts);
}

/// Isotropic emission source eta sigma_xf (I u) as a phase-space field.
inline PhaseSpaceField emission_source(const NodalField& eta, const NodalField& sigma_xf,
                                       const PhaseSpaceField& u, const AngularGrid& ang) {
    NodalField iu = angular_integral(u, ang);
    PhaseSpaceField q(u.num_nodes(), ang.size());
    for (int k = 0; k < ang.size(); ++k) {
        auto s = q.slice(k);
        for (int i = 0; i < u.num_nodes(); ++i) s[i] = eta[i] * sigma_xf[i] * iu[i];
    }
    return q;
}

/// Internal data at the emission stage, Eq.-wise the five-term angular sum
/// S = -(sigma_ma+sigma_ms) int w W + sigma_ms int (K w) W
///     + eta sigma_xf (I u)(I W) - sigma_xtf int u phi + sigma_xs int (K u) phi.
inline NodalField internal_S(const PhaseSpaceField& u, const PhaseSpaceField& w,
                             const PhaseSpaceField& W, const PhaseSpaceField& phi,
                             const CoefficientSet& c, const PhaseFunction& pf,
                             const AngularGrid& ang) {
    const int n = u.num_nodes();
    PhaseSpaceField kw = scatter(w, pf);
    PhaseSpaceField ku = scatter(u, pf);
    NodalField wW = correlation(w, W, ang);
    NodalField kwW = correlation(kw, W, ang);
    NodalField iu = angular_integral(u, ang);
    NodalField iW = angular_integral(W, ang);
    NodalField uphi = correlation(u, phi, ang);
    NodalField kuphi = correlation(ku, phi, ang);
    NodalField s(n);
    for (int i = 0; i < n; ++i) {
        double sigma_mt = c.sigma_ma[i] + c.sigma_ms[i];
        double sigma_xtf = c.sigma_xa[i] + c.sigma_xs[i] + c.sigma_xf[i];
        s[i] = -sigma_mt * wW[i] + c.sigma_ms[i] * kwW[i] + c.eta[i] * c.sigma_xf[i] * iu[i] * iW[i] -
               sigma_xtf * uphi[i] + c.sigma_xs[i] * kuphi[i];
    }
    return s;
}

/// J f(x) = int f(x,v) v.n(x) dv at the lattice boundary nodes; entries are
/// ordered like grid.boundary_nodes(). Only valid when the boundary nodes are
/// lattice nodes (the square); disk rings go through boundary_current_eval.
inline std::vector<double> boundary_current(const PhaseSpaceField& f, const SpatialGrid& grid,
                                            const AngularGrid& ang) {
    std::vector<double> out;
    out.reserve(grid.boundary_nodes().size());
    for (const auto& b : grid.boundary_nodes()) {
        if (b.node_id < 0)
            throw std::invalid_argument("boundary_current: off-lattice boundary node");
        double acc = 0.0;
        for (int k = 0; k < ang.size(); ++k)
            acc += f.at(b.node_id, k) * dot(ang.dir(k), b.normal) * ang.weight();
        out.push_back(acc);
    }
    return out;
}

/// Same current from a point evaluator (pos, k) -> value.
template <class Eval>
inline std::vector<double> boundary_current_eval(Eval&& eval, const SpatialGrid& grid,
                                                 const AngularGrid& ang) {
    std::vector<double> out;
    out.reserve(grid.boundary_nodes().size());
    for (const auto& b : grid.boundary_nodes()) {
        double acc = 0.0;
        for (int k = 0; k < ang.size(); ++k)
            acc += eval(b.pos, k) * dot(ang.dir(k), b.normal) * ang.weight();
        out.push_back(acc);
    }
    return out;
}

struct NoiseSpec {
    double level = 0.0; // tau in [0, 1)
    std::uint64_t seed = 0;
};

/// Multiplicative noise out = in * (1 + tau * xi), xi iid uniform on [-1, 1].
/// The mapping from raw generator output is pinned so runs with the same seed
/// are bit-identical regardless of worker count.
inline NodalField add_noise(const NodalField& field, const NoiseSpec& spec) {
    if (!(spec.level >= 0.0 && spec.level < 1.0))
        throw std::invalid_argument("add_noise: noise level must lie in [0, 1)");
    NodalField out(field.size());
    std::mt19937_64 rng(spec.seed);
    for (std::size_t i = 0; i < field.size(); ++i) {
        double xi = 2.0 * (double(rng() >> 11) * 0x1.0p-53) - 1.0;
        out[i] = field[i] * (1.0 + spec.level * xi);
    }
    return out;
}

}  // namespace rte
