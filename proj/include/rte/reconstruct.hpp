#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "rte/fields.hpp"
#include "rte/functionals.hpp"
#include "rte/grid.hpp"
#include "rte/phase_function.hpp"
#include "rte/transport.hpp"

namespace rte {

// ---------------------------------------------------------------------------
// H1 regularizer: 5-point stiffness with natural (zero-flux) boundary rows.

/// sum over lattice edges of c_e (sigma_a - sigma_b)^2, approximating
/// int |grad sigma|^2 with trapezoid transverse weights.
inline double h1_energy(const SpatialGrid& grid, const NodalField& f) {
    double acc = 0.0;
    const int nx = grid.nx(), ny = grid.ny();
    for (int j = 0; j < ny; ++j) {
        double cy = (j == 0 || j == ny - 1) ? 0.5 : 1.0;
        for (int i = 0; i + 1 < nx; ++i) {
            int a = grid.id(i, j), b = grid.id(i + 1, j);
            if (!grid.active(a) || !grid.active(b)) continue;
            double d = f[b] - f[a];
            acc += cy * grid.hy() / grid.hx() * d * d;
        }
    }
    for (int i = 0; i < nx; ++i) {
        double cx = (i == 0 || i == nx - 1) ? 0.5 : 1.0;
        for (int j = 0; j + 1 < ny; ++j) {
            int a = grid.id(i, j), b = grid.id(i, j + 1);
            if (!grid.active(a) || !grid.active(b)) continue;
            double d = f[b] - f[a];
            acc += cx * grid.hx() / grid.hy() * d * d;
        }
    }
    return acc;
}

/// Gradient of h1_energy; the discrete Laplacian with zero-Neumann rows.
inline NodalField h1_energy_gradient(const SpatialGrid& grid, const NodalField& f) {
    NodalField g(grid.num_nodes(), 0.0);
    const int nx = grid.nx(), ny = grid.ny();
    for (int j = 0; j < ny; ++j) {
        double cy = (j == 0 || j == ny - 1) ? 0.5 : 1.0;
        for (int i = 0; i + 1 < nx; ++i) {
            int a = grid.id(i, j), b = grid.id(i + 1, j);
            if (!grid.active(a) || !grid.active(b)) continue;
            double d = 2.0 * cy * grid.hy() / grid.hx() * (f[b] - f[a]);
            g[b] += d;
            g[a] -= d;
        }
    }
    for (int i = 0; i < nx; ++i) {
        double cx = (i == 0 || i == nx - 1) ? 0.5 : 1.0;
        for (int j = 0; j + 1 < ny; ++j) {
            int a = grid.id(i, j), b = grid.id(i, j + 1);
            if (!grid.active(a) || !grid.active(b)) continue;
            double d = 2.0 * cx * grid.hx() / grid.hy() * (f[b] - f[a]);
            g[b] += d;
            g[a] -= d;
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Frechet derivative of the map sigma_xf -> H.

/// Exact directional derivative of the discrete internal data:
/// dH = -dsigma psi - 2 sigma_xtf int v u(-v) + 2 sigma_xs int (K v) u(-v),
/// where v is the linearized transport response. Matching the discrete
/// forward operator keeps the remainder O(|dsigma|^2) down to roundoff.
inline NodalField frechet_H(const TransportSystem& sys, const BoundarySource& g,
                            const PhaseSpaceField& u, const NodalField& dsigma,
                            const SolveOptions& opts = {}) {
    const AngularGrid& ang = *sys.ang;
    PhaseSpaceField src = frozen_source(sys, u);
    PhaseSpaceField rhs = linearized_transport(sys, &g, src, dsigma, opts.threads);
    SolveResult vres = solve_fixed_rhs(sys, rhs, opts);
    if (!vres.converged)
        throw std::runtime_error("frechet_H: linearized transport solve did not converge");
    const PhaseSpaceField& v = vres.field;
    PhaseSpaceField kv = scatter(v, *sys.phase);
    NodalField psi = correlator_psi(u, ang);
    NodalField vu = reversed_correlation(v, u, ang);
    NodalField kvu = reversed_correlation(kv, u, ang);
    NodalField dh(u.num_nodes());
    for (int i = 0; i < u.num_nodes(); ++i)
        dh[i] = -dsigma[i] * psi[i] - 2.0 * sys.sigma_total[i] * vu[i] +
                2.0 * sys.sigma_scat[i] * kvu[i];
    return dh;
}

// ---------------------------------------------------------------------------
// Stage 1 objective: J = 1/2 int (H - H*)^2 + beta/2 int |grad sigma|^2.

struct SigmaObjective {
    const SpatialGrid* grid;
    const AngularGrid* ang;
    const PhaseFunction* phase;
    NodalField sigma_xa;
    NodalField sigma_xs;
    BoundarySource source;
    NodalField h_star;
    double beta = 0.0;
    SolveOptions solve_opts;

    // cache: forward solution at the last evaluated sigma, reused as the warm
    // start of the next solve.
    PhaseSpaceField u_cache;
    bool has_cache = false;

    TransportSystem system(const NodalField& sigma_xf) const {
        NodalField total(grid->num_nodes());
        for (int i = 0; i < grid->num_nodes(); ++i)
            total[i] = sigma_xa[i] + sigma_xs[i] + sigma_xf[i];
        return {grid, ang, phase, std::move(total), sigma_xs};
    }

    PhaseSpaceField solve(const TransportSystem& sys) {
        SolveOptions opts = solve_opts;
        if (has_cache) opts.warm_start = &u_cache;
        SolveResult res = solve_forward(sys, &source, nullptr, opts);
        if (!res.converged)
            throw std::runtime_error("sigma objective: forward solve did not converge (residual " +
                                     std::to_string(res.last_update) + ")");
        u_cache = res.field;
        has_cache = true;
        return res.field;
    }

    double objective(const NodalField& sigma_xf) {
        TransportSystem sys = system(sigma_xf);
        PhaseSpaceField u = solve(sys);
        NodalField h = internal_H(u, sys.sigma_total, sys.sigma_scat, *phase, *ang);
        const auto& mu = grid->node_measure();
        double misfit = 0.0;
        for (int i = 0; i < grid->num_nodes(); ++i) {
            double r = h[i] - h_star[i];
            misfit += 0.5 * mu[i] * r * r;
        }
        return misfit + 0.5 * beta * h1_energy(*grid, sigma_xf);
    }

    /// Objective value and its exact discrete gradient via one transposed
    /// (adjoint) solve; the grid measure is folded into the returned field.
    double objective_and_gradient(const NodalField& sigma_xf, NodalField& grad) {
        TransportSystem sys = system(sigma_xf);
        PhaseSpaceField u = solve(sys);
        const AngularGrid& a = *ang;
        PhaseSpaceField ku = scatter(u, *phase);
        NodalField psi = correlator_psi(u, a);
        NodalField xi = reversed_correlation(ku, u, a);
        const auto& mu = grid->node_measure();
        const int n = grid->num_nodes();
        NodalField residual(n);
        double misfit = 0.0;
        for (int i = 0; i < n; ++i) {
            double h = -sys.sigma_total[i] * psi[i] + sys.sigma_scat[i] * xi[i];
            residual[i] = h - h_star[i];
            misfit += 0.5 * mu[i] * residual[i] * residual[i];
        }

        // dJ/du as a phase-space field: mu r w Q, Q = -2 sigma_xtf u(-v) + 2 sigma_xs (K u)(-v).
        PhaseSpaceField dj_du(n, a.size());
        double w = a.weight();
        for (int k = 0; k < a.size(); ++k) {
            auto uf = u.slice(a.antipode(k));
            auto kf = ku.slice(a.antipode(k));
            auto out = dj_du.slice(k);
            for (int i = 0; i < n; ++i) {
                double q = -2.0 * sys.sigma_total[i] * uf[i] + 2.0 * sys.sigma_scat[i] * kf[i];
                out[i] = mu[i] * residual[i] * w * q;
            }
        }
        SolveOptions topts = solve_opts;
        topts.warm_start = nullptr;
        SolveResult lam = solve_transposed(sys, dj_du, topts);
        if (!lam.converged)
            throw std::runtime_error("sigma objective: adjoint solve did not converge");

        PhaseSpaceField src = frozen_source(sys, u);
        grad = attenuation_gradient(sys, lam.field, &source, src, solve_opts.threads);
        NodalField reg = h1_energy_gradient(*grid, sigma_xf);
        double reg_energy = h1_energy(*grid, sigma_xf);
        for (int i = 0; i < n; ++i)
            grad[i] += -mu[i] * residual[i] * psi[i] + 0.5 * beta * reg[i];
        return misfit + 0.5 * beta * reg_energy;
    }
};

// ---------------------------------------------------------------------------
// Projected L-BFGS with Armijo backtracking.

struct LbfgsOptions {
    int memory = 10;
    int max_iter = 200;
    double grad_tol = 1e-6; // on the sup norm of the projected gradient
    double armijo_c = 1e-4;
    int max_line_search = 40;
};

struct LbfgsTraceEntry {
    int iteration;
    double objective;
    double grad_norm;
    double step;
};

struct LbfgsResult {
    NodalField x;
    double objective = 0.0;
    bool converged = false;
    bool line_search_failed = false;
    std::vector<LbfgsTraceEntry> trace;
};

/// Minimizes fn over the box [lo, hi]^n. fn(x, grad) returns the objective
/// and fills the gradient. Iterates are clamped to the box after every step
/// and convergence is measured on the projected gradient.
template <class Fn>
LbfgsResult lbfgs_minimize(Fn&& fn, NodalField x0, double lo, double hi,
                           const LbfgsOptions& opts = {}) {
    auto clamp = [&](NodalField& x) {
        for (double& v : x) v = std::clamp(v, lo, hi);
    };
    auto projected_grad_norm = [&](const NodalField& x, const NodalField& g) {
        double m = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            double gi = g[i];
            if (x[i] <= lo && gi > 0) gi = 0;
            if (x[i] >= hi && gi < 0) gi = 0;
            m = std::max(m, std::abs(gi));
        }
        return m;
    };

    LbfgsResult res;
    clamp(x0);
    res.x = std::move(x0);
    const std::size_t n = res.x.size();
    NodalField grad(n);
    double f = fn(res.x, grad);
    std::vector<NodalField> s_hist, y_hist;
    std::vector<double> rho_hist;
    res.trace.push_back({0, f, projected_grad_norm(res.x, grad), 0.0});

    for (int it = 1; it <= opts.max_iter; ++it) {
        if (projected_grad_norm(res.x, grad) <= opts.grad_tol) {
            res.converged = true;
            break;
        }
        // Two-loop recursion.
        NodalField d = grad;
        std::vector<double> alpha(s_hist.size());
        for (int h = int(s_hist.size()) - 1; h >= 0; --h) {
            double a = 0.0;
            for (std::size_t i = 0; i < n; ++i) a += s_hist[h][i] * d[i];
            a *= rho_hist[h];
            alpha[h] = a;
            for (std::size_t i = 0; i < n; ++i) d[i] -= a * y_hist[h][i];
        }
        if (!s_hist.empty()) {
            double sy = 1.0 / rho_hist.back(), yy = 0.0;
            for (double v : y_hist.back()) yy += v * v;
            double scale = sy / yy;
            for (double& v : d) v *= scale;
        }
        for (int h = 0; h < int(s_hist.size()); ++h) {
            double b = 0.0;
            for (std::size_t i = 0; i < n; ++i) b += y_hist[h][i] * d[i];
            b *= rho_hist[h];
            for (std::size_t i = 0; i < n; ++i) d[i] += (alpha[h] - b) * s_hist[h][i];
        }
        for (double& v : d) v = -v;

        // Ensure descent; fall back to steepest descent otherwise.
        double gd = 0.0;
        for (std::size_t i = 0; i < n; ++i) gd += grad[i] * d[i];
        if (!(gd < 0)) {
            for (std::size_t i = 0; i < n; ++i) d[i] = -grad[i];
        }

        // Backtracking Armijo on the projected path.
        double step = 1.0;
        NodalField x_new(n), g_new(n);
        double f_new = f;
        bool accepted = false;
        for (int ls = 0; ls < opts.max_line_search; ++ls) {
            for (std::size_t i = 0; i < n; ++i) x_new[i] = res.x[i] + step * d[i];
            clamp(x_new);
            double decrease = 0.0;
            for (std::size_t i = 0; i < n; ++i) decrease += grad[i] * (x_new[i] - res.x[i]);
            if (decrease >= 0) {
                step *= 0.5;
                continue;
            }
            f_new = fn(x_new, g_new);
            if (f_new <= f + opts.armijo_c * decrease) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) {
            res.line_search_failed = true;
            break;
        }

        NodalField s(n), y(n);
        double sy = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = x_new[i] - res.x[i];
            y[i] = g_new[i] - grad[i];
            sy += s[i] * y[i];
        }
        double ss = 0.0, yy = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            ss += s[i] * s[i];
            yy += y[i] * y[i];
        }
        if (sy > 1e-12 * std::sqrt(ss * yy)) {
            s_hist.push_back(std::move(s));
            y_hist.push_back(std::move(y));
            rho_hist.push_back(1.0 / sy);
            if (int(s_hist.size()) > opts.memory) {
                s_hist.erase(s_hist.begin());
                y_hist.erase(y_hist.begin());
                rho_hist.erase(rho_hist.begin());
            }
        }
        res.x = std::move(x_new);
        x_new.assign(n, 0.0);
        grad = g_new;
        f = f_new;
        res.trace.push_back({it, f, projected_grad_norm(res.x, grad), step});
    }
    res.objective = f;
    return res;
}

// ---------------------------------------------------------------------------
// Stage 1 driver.

struct SigmaReconstructionOptions {
    double beta = 1e-3;
    double sigma_lo = 0.0;
    double sigma_hi = 1.0;
    LbfgsOptions lbfgs;
    SolveOptions solve;
};

struct SigmaReconstruction {
    NodalField sigma;
    LbfgsResult optimizer;
    double relative_misfit = 0.0; // ||H(sigma) - H*|| / ||H*||, measure-weighted
};

inline SigmaReconstruction reconstruct_sigma(const SpatialGrid& grid, const AngularGrid& ang,
                                             const PhaseFunction& pf, const NodalField& sigma_xa,
                                             const NodalField& sigma_xs, const BoundarySource& g,
                                             const NodalField& h_star, const NodalField& init,
                                             const SigmaReconstructionOptions& opts) {
    SigmaObjective obj{&grid, &ang, &pf, sigma_xa, sigma_xs, g, h_star, opts.beta, opts.solve};
    auto fn = [&obj](const NodalField& x, NodalField& grad) {
        return obj.objective_and_gradient(x, grad);
    };
    SigmaReconstruction out;
    out.optimizer = lbfgs_minimize(fn, init, opts.sigma_lo, opts.sigma_hi, opts.lbfgs);
    out.sigma = out.optimizer.x;

    TransportSystem sys = obj.system(out.sigma);
    PhaseSpaceField u = obj.solve(sys);
    NodalField h = internal_H(u, sys.sigma_total, sys.sigma_scat, pf, ang);
    NodalField diff(h.size());
    for (std::size_t i = 0; i < h.size(); ++i) diff[i] = h[i] - h_star[i];
    double denom = l2_norm(h_star, grid);
    out.relative_misfit = denom > 0 ? l2_norm(diff, grid) / denom : l2_norm(diff, grid);
    return out;
}

// ---------------------------------------------------------------------------
// Stage 2: linear recovery of eta from S*.

/// Matrix-free linear map eta -> S(eta) for fixed sigma_xf, with its algebraic
/// transpose. One application costs a w-solve and a phi-solve.
struct EtaLinearMap {
    const SpatialGrid* grid;
    const AngularGrid* ang;
    const PhaseFunction* phase;
    CoefficientSet coeffs; // eta entry unused
    PhaseSpaceField u;     // excitation solution for the fixed sigma_xf
    PhaseSpaceField W;     // auxiliary emission weight
    SolveOptions solve_opts;

    // precomputed pieces
    NodalField iu, iW, a1;
    PhaseSpaceField ku;
    TransportSystem x_sys, m_sys;

    EtaLinearMap(const SpatialGrid& g, const AngularGrid& a, const PhaseFunction& p,
                 CoefficientSet c, PhaseSpaceField u_, PhaseSpaceField W_, SolveOptions opts)
        : grid(&g), ang(&a), phase(&p), coeffs(std::move(c)), u(std::move(u_)), W(std::move(W_)),
          solve_opts(opts), x_sys{&g, &a, &p, coeffs.sigma_xtf(), coeffs.sigma_xs},
          m_sys{&g, &a, &p, coeffs.sigma_mt(), coeffs.sigma_ms} {
        iu = angular_integral(u, a);
        iW = angular_integral(W, a);
        ku = scatter(u, *phase);
        a1.resize(g.num_nodes());
        for (int i = 0; i < g.num_nodes(); ++i) a1[i] = coeffs.sigma_xf[i] * iu[i] * iW[i];
    }

    NodalField apply(const NodalField& eta) const {
        const int n = grid->num_nodes();
        const int m = ang->size();
        PhaseSpaceField q2(n, m), q3(n, m);
        for (int k = 0; k < m; ++k) {
            auto s2 = q2.slice(k);
            auto s3 = q3.slice(k);
            for (int i = 0; i < n; ++i) {
                s2[i] = eta[i] * coeffs.sigma_xf[i] * iu[i];
                s3[i] = eta[i] * coeffs.sigma_xf[i] * iW[i];
            }
        }
        SolveResult wres = solve_forward(m_sys, nullptr, &q2, solve_opts);
        SolveResult pres = solve_fixed_rhs_phi(q3);
        if (!wres.converged || !pres.converged)
            throw std::runtime_error("eta map: transport solve did not converge");
        const PhaseSpaceField& w = wres.field;
        PhaseSpaceField phi = pres.field.antipode_map(*ang);

        PhaseSpaceField kw = scatter(w, *phase);
        NodalField wW = correlation(w, W, *ang);
        NodalField kwW = correlation(kw, W, *ang);
        NodalField uphi = correlation(u, phi, *ang);
        NodalField kuphi = correlation(ku, phi, *ang);
        NodalField s(n);
        for (int i = 0; i < n; ++i) {
            double sigma_mt = coeffs.sigma_ma[i] + coeffs.sigma_ms[i];
            double sigma_xtf = coeffs.sigma_xa[i] + coeffs.sigma_xs[i] + coeffs.sigma_xf[i];
            s[i] = -sigma_mt * wW[i] + coeffs.sigma_ms[i] * kwW[i] + a1[i] * eta[i] -
                   sigma_xtf * uphi[i] + coeffs.sigma_xs[i] * kuphi[i];
        }
        return s;
    }

    NodalField apply_transpose(const NodalField& y) const {
        const int n = grid->num_nodes();
        const int m = ang->size();
        double w = ang->weight();

        // D2^T y and D3^T y as phase-space fields.
        PhaseSpaceField d2(n, m), d3(n, m), tmp(n, m);
        for (int k = 0; k < m; ++k) {
            auto sW = W.slice(k);
            auto su = u.slice(k);
            auto t2 = tmp.slice(k);
            for (int i = 0; i < n; ++i) t2[i] = coeffs.sigma_ms[i] * y[i] * sW[i];
            (void)su;
        }
        phase->apply_into(tmp, d2);
        for (int k = 0; k < m; ++k) {
            auto sW = W.slice(k);
            auto o = d2.slice(k);
            for (int i = 0; i < n; ++i) {
                double sigma_mt = coeffs.sigma_ma[i] + coeffs.sigma_ms[i];
                o[i] = w * (o[i] - sigma_mt * y[i] * sW[i]);
            }
        }
        for (int k = 0; k < m; ++k) {
            auto su = u.slice(k);
            auto t3 = tmp.slice(k);
            for (int i = 0; i < n; ++i) t3[i] = coeffs.sigma_xs[i] * y[i] * su[i];
        }
        phase->apply_into(tmp, d3);
        for (int k = 0; k < m; ++k) {
            auto su = u.slice(k);
            auto o = d3.slice(k);
            for (int i = 0; i < n; ++i) {
                double sigma_xtf = coeffs.sigma_xa[i] + coeffs.sigma_xs[i] + coeffs.sigma_xf[i];
                o[i] = w * (o[i] - sigma_xtf * y[i] * su[i]);
            }
        }

        // Transposed solve chains: diag * iota^T * T^T * (I - (TS)^T)^{-1}.
        SolveResult l2 = solve_transposed(m_sys, d2, solve_opts);
        SolveResult l3 = solve_transposed(x_sys, d3.antipode_map(*ang), solve_opts);
        if (!l2.converged || !l3.converged)
            throw std::runtime_error("eta map transpose: solve did not converge");
        PhaseSpaceField t2(n, m), t3(n, m);
        apply_T_transpose_into(m_sys, l2.field, t2, solve_opts.threads);
        apply_T_transpose_into(x_sys, l3.field, t3, solve_opts.threads);

        NodalField out(n, 0.0);
        for (int k = 0; k < m; ++k) {
            auto s2 = t2.slice(k);
            auto s3 = t3.slice(k);
            for (int i = 0; i < n; ++i)
                out[i] += coeffs.sigma_xf[i] * (iu[i] * s2[i] + iW[i] * s3[i]);
        }
        for (int i = 0; i < n; ++i) out[i] += a1[i] * y[i];
        return out;
    }

  private:
    // phi solve in flipped orientation: phi~ = (I - T S)^{-1} T q3.
    SolveResult solve_fixed_rhs_phi(const PhaseSpaceField& q3) const {
        return solve_forward(x_sys, nullptr, &q3, solve_opts);
    }
};

struct EtaReconstructionOptions {
    double beta_prime = 1e-8;
    double eta_lo = 0.0;
    double eta_hi = 0.999;
    int cg_max_iter = 60;
    double cg_tol = 1e-8; // relative residual of the normal equations
    SolveOptions solve;
    bool verify_linearity = true;
    std::uint64_t verify_seed = 2718;
};

struct EtaReconstruction {
    NodalField eta;
    int cg_iterations = 0;
    double cg_relative_residual = 0.0;
    bool converged = false;
    std::vector<double> residual_history;
};

/// Tikhonov-regularized linear least squares for eta by conjugate gradients on
/// the matrix-free normal equations (A^T M A + beta' M) eta = A^T M S*.
inline EtaReconstruction reconstruct_eta(const EtaLinearMap& map, const NodalField& s_star,
                                         const EtaReconstructionOptions& opts) {
    const SpatialGrid& grid = *map.grid;
    const int n = grid.num_nodes();
    const auto& mu = grid.node_measure();

    if (opts.verify_linearity) {
        std::mt19937_64 rng(opts.verify_seed);
        std::uniform_real_distribution<double> unif(0.0, 0.5);
        NodalField e1(n), e2(n), e12(n);
        for (int i = 0; i < n; ++i) {
            e1[i] = unif(rng);
            e2[i] = unif(rng);
            e12[i] = e1[i] + e2[i];
        }
        NodalField s1 = map.apply(e1), s2 = map.apply(e2), s12 = map.apply(e12);
        double scale = sup_norm(s1) + sup_norm(s2);
        for (int i = 0; i < n; ++i)
            if (std::abs(s12[i] - s1[i] - s2[i]) > 1e-8 * scale)
                throw std::runtime_error("eta map failed the superposition check");
    }

    auto normal_apply = [&](const NodalField& x) {
        NodalField ax = map.apply(x);
        for (int i = 0; i < n; ++i) ax[i] *= mu[i];
        NodalField out = map.apply_transpose(ax);
        for (int i = 0; i < n; ++i) out[i] += opts.beta_prime * mu[i] * x[i];
        return out;
    };

    NodalField ms(n);
    for (int i = 0; i < n; ++i) ms[i] = mu[i] * s_star[i];
    NodalField b = map.apply_transpose(ms);

    EtaReconstruction out;
    out.eta.assign(n, 0.0);
    NodalField r = b, p = b, ap(n);
    double rr = 0.0, bnorm = 0.0;
    for (int i = 0; i < n; ++i) {
        rr += r[i] * r[i];
        bnorm += b[i] * b[i];
    }
    bnorm = std::sqrt(bnorm);
    if (bnorm == 0.0) {
        out.converged = true;
        return out;
    }
    for (int it = 1; it <= opts.cg_max_iter; ++it) {
        ap = normal_apply(p);
        double pap = 0.0;
        for (int i = 0; i < n; ++i) pap += p[i] * ap[i];
        if (!(pap > 0)) break; // numerical stagnation
        double alpha = rr / pap;
        for (int i = 0; i < n; ++i) {
            out.eta[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        double rr_new = 0.0;
        for (int i = 0; i < n; ++i) rr_new += r[i] * r[i];
        out.cg_iterations = it;
        out.cg_relative_residual = std::sqrt(rr_new) / bnorm;
        out.residual_history.push_back(out.cg_relative_residual);
        if (out.cg_relative_residual <= opts.cg_tol) {
            out.converged = true;
            break;
        }
        double beta = rr_new / rr;
        rr = rr_new;
        for (int i = 0; i < n; ++i) p[i] = r[i] + beta * p[i];
    }
    for (double& v : out.eta) v = std::clamp(v, opts.eta_lo, opts.eta_hi);
    return out;
}

// ---------------------------------------------------------------------------
// Linearized-uniqueness conditions.

struct ConditionsReport {
    double ell_omega = 0.0;
    double gamma = 0.0; // smallest gamma with exp(l sup sigma_xtf) = 1 + gamma
    double delta = 0.0; // sup sigma_xs / sigma_xtf
    double mu = 0.0;    // sup g / inf g on the boundary
    double lhs = 0.0;   // (1 + delta)(1 + 2 mu^2 (1 + gamma)^2)
    double rhs = 0.0;   // (1 + 2 gamma) / gamma
    bool optically_thin = false;
    bool weakly_scattering = false;
    bool contraction_ok = false;
    bool pass = false;
};

inline ConditionsReport check_linearized_conditions(const SpatialGrid& grid,
                                                    const NodalField& sigma_xtf,
                                                    const NodalField& sigma_xs,
                                                    const BoundarySource& g) {
    ConditionsReport rep;
    rep.ell_omega = grid.diameter();
    double sig_sup = 0.0, ratio_sup = 0.0;
    for (int i = 0; i < grid.num_nodes(); ++i) {
        if (!grid.active(i)) continue;
        sig_sup = std::max(sig_sup, sigma_xtf[i]);
        ratio_sup = std::max(ratio_sup, sigma_xs[i] / sigma_xtf[i]);
    }
    double g_min = std::numeric_limits<double>::infinity(), g_max = 0.0;
    for (const auto& b : grid.boundary_nodes()) {
        double v = g(b.pos);
        g_min = std::min(g_min, v);
        g_max = std::max(g_max, v);
    }
    rep.gamma = std::exp(rep.ell_omega * sig_sup) - 1.0;
    rep.delta = ratio_sup;
    rep.mu = g_max / g_min;
    rep.lhs = (1.0 + rep.delta) * (1.0 + 2.0 * rep.mu * rep.mu * (1.0 + rep.gamma) * (1.0 + rep.gamma));
    rep.rhs = (1.0 + 2.0 * rep.gamma) / rep.gamma;
    rep.optically_thin = rep.gamma < 1.0;
    rep.weakly_scattering = rep.delta < 1.0;
    rep.contraction_ok = rep.lhs < rep.rhs;
    rep.pass = rep.optically_thin && rep.weakly_scattering && rep.contraction_ok;
    return rep;
}

}  // namespace rte
