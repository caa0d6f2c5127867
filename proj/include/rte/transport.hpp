#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "rte/fields.hpp"
#include "rte/grid.hpp"
#include "rte/phase_function.hpp"
#include "rte/threading.hpp"

namespace rte {

/// Isotropic boundary source g(x), evaluated at boundary points.
struct BoundarySource {
    std::function<double(Vec2)> value;
    double operator()(Vec2 p) const { return value(p); }
};

inline BoundarySource constant_source(double c) {
    return {[c](Vec2) { return c; }};
}

/// Everything a sweep needs: geometry, directions, the total attenuation
/// coefficient along rays and the scattering coefficient in front of K.
struct TransportSystem {
    const SpatialGrid* grid;
    const AngularGrid* ang;
    const PhaseFunction* phase;
    NodalField sigma_total;
    NodalField sigma_scat;
    double step = 0.0; // ray step; defaults to the grid spacing

    double ray_step() const { return step > 0.0 ? step : grid->step(); }
};

namespace detail {

/// Walks the backward ray from x along -v with the solver's sample layout:
/// a single trapezoid interval for degenerate rays, otherwise an even number
/// of equal intervals (composite Simpson for sources, cumulative trapezoid
/// for the attenuation). Body receives (j, n, d, stencil, E_j).
template <class Body>
inline std::pair<double, double> march_ray(const TransportSystem& sys, Vec2 x, Vec2 v,
                                           Body&& body) {
    const SpatialGrid& grid = *sys.grid;
    double tau = exit_times(x, v, grid).tau_minus;
    double step = sys.ray_step();
    int n = tau < 0.5 * step ? 1 : ray_interval_count(tau, step, QuadratureRule::Simpson);
    double d = tau / n;
    double depth = 0.0;
    double att = 1.0;
    double sigma_prev = 0.0;
    for (int j = 0; j <= n; ++j) {
        Vec2 p = grid.clamp_inside(x - (j * d) * v);
        InterpStencil s = grid.stencil(p);
        double sigma = s.w[0] * sys.sigma_total[s.idx[0]] + s.w[1] * sys.sigma_total[s.idx[1]] +
                       s.w[2] * sys.sigma_total[s.idx[2]] + s.w[3] * sys.sigma_total[s.idx[3]];
        if (j > 0) {
            depth += 0.5 * d * (sigma_prev + sigma);
            att = std::exp(-depth);
        }
        sigma_prev = sigma;
        body(j, n, d, s, att);
    }
    return {tau, att};
}

inline double source_weight(int j, int n, double d) {
    if (n == 1) return 0.5 * d;
    if (j == 0 || j == n) return d / 3.0;
    return (j % 2 == 1) ? 4.0 * d / 3.0 : 2.0 * d / 3.0;
}

template <class Fn>
inline void for_direction_blocks(int m, int threads, Fn&& fn) {
    threads = std::min(std::max(threads, 1), m);
    std::vector<std::pair<int, int>> ranges;
    int base = m / threads, rem = m % threads, begin = 0;
    for (int t = 0; t < threads; ++t) {
        int end = begin + base + (t < rem ? 1 : 0);
        ranges.emplace_back(begin, end);
        begin = end;
    }
    parallel_for(int(ranges.size()), threads, [&](int b) { fn(b, ranges[b].first, ranges[b].second); });
}

}  // namespace detail

/// Ballistic part: (B g)(x, v) = g(x - tau_- v) exp(-int_0^{tau_-} sigma_total).
inline PhaseSpaceField ballistic(const TransportSystem& sys, const BoundarySource& g,
                                 int threads = 1) {
    const SpatialGrid& grid = *sys.grid;
    const AngularGrid& ang = *sys.ang;
    PhaseSpaceField out(grid.num_nodes(), ang.size());
    detail::for_direction_blocks(ang.size(), threads, [&](int, int kb, int ke) {
        for (int k = kb; k < ke; ++k) {
            Vec2 v = ang.dir(k);
            auto dst = out.slice(k);
            for (int i = 0; i < grid.num_nodes(); ++i) {
                if (!grid.active(i)) continue;
                Vec2 x = grid.node(i);
                double tau = exit_times(x, v, grid).tau_minus;
                double gv = g(grid.clamp_inside(x - tau * v));
                if (gv == 0.0) {
                    dst[i] = 0.0;
                    continue;
                }
                auto [t, att] = detail::march_ray(sys, x, v, [](int, int, double, const InterpStencil&, double) {});
                dst[i] = gv * att;
            }
        }
    });
    return out;
}

/// Path-integral transport of a volumetric source field:
/// (T f)(x, v) = int_0^{tau_-} exp(-int_0^l sigma_total) f(x - l v, v) dl.
inline void apply_T_into(const TransportSystem& sys, const PhaseSpaceField& f,
                         PhaseSpaceField& out, int threads = 1) {
    const SpatialGrid& grid = *sys.grid;
    const AngularGrid& ang = *sys.ang;
    detail::for_direction_blocks(ang.size(), threads, [&](int, int kb, int ke) {
        for (int k = kb; k < ke; ++k) {
            Vec2 v = ang.dir(k);
            auto src = f.slice(k);
            auto dst = out.slice(k);
            for (int i = 0; i < grid.num_nodes(); ++i) {
                if (!grid.active(i)) {
                    dst[i] = 0.0;
                    continue;
                }
                double acc = 0.0;
                detail::march_ray(sys, grid.node(i), v,
                                  [&](int j, int n, double d, const InterpStencil& s, double att) {
                                      double fv = s.w[0] * src[s.idx[0]] + s.w[1] * src[s.idx[1]] +
                                                  s.w[2] * src[s.idx[2]] + s.w[3] * src[s.idx[3]];
                                      acc += detail::source_weight(j, n, d) * att * fv;
                                  });
                dst[i] = acc;
            }
        }
    });
}

/// Algebraic transpose of apply_T under the plain (unweighted) dot product.
/// Each direction slice is written only by rays of that direction, so the
/// block partition stays race-free and deterministic.
inline void apply_T_transpose_into(const TransportSystem& sys, const PhaseSpaceField& lambda,
                                   PhaseSpaceField& out, int threads = 1) {
    const SpatialGrid& grid = *sys.grid;
    const AngularGrid& ang = *sys.ang;
    detail::for_direction_blocks(ang.size(), threads, [&](int, int kb, int ke) {
        for (int k = kb; k < ke; ++k) {
            Vec2 v = ang.dir(k);
            auto lam = lambda.slice(k);
            auto dst = out.slice(k);
            for (int i = 0; i < grid.num_nodes(); ++i) dst[i] = 0.0;
            for (int i = 0; i < grid.num_nodes(); ++i) {
                if (!grid.active(i) || lam[i] == 0.0) continue;
                double li = lam[i];
                detail::march_ray(sys, grid.node(i), v,
                                  [&](int j, int n, double d, const InterpStencil& s, double att) {
                                      double c = li * detail::source_weight(j, n, d) * att;
                                      dst[s.idx[0]] += c * s.w[0];
                                      dst[s.idx[1]] += c * s.w[1];
                                      dst[s.idx[2]] += c * s.w[2];
                                      dst[s.idx[3]] += c * s.w[3];
                                  });
            }
        }
    });
}

/// Directional derivative of B g + T src with respect to the attenuation
/// coefficient, in direction dsigma (forward mode).
inline PhaseSpaceField linearized_transport(const TransportSystem& sys, const BoundarySource* g,
                                            const PhaseSpaceField& src, const NodalField& dsigma,
                                            int threads = 1) {
    const SpatialGrid& grid = *sys.grid;
    const AngularGrid& ang = *sys.ang;
    PhaseSpaceField out(grid.num_nodes(), ang.size());
    detail::for_direction_blocks(ang.size(), threads, [&](int, int kb, int ke) {
        std::vector<double> ddepth;
        for (int k = kb; k < ke; ++k) {
            Vec2 v = ang.dir(k);
            auto sf = src.slice(k);
            auto dst = out.slice(k);
            for (int i = 0; i < grid.num_nodes(); ++i) {
                if (!grid.active(i)) continue;
                Vec2 x = grid.node(i);
                double gv = 0.0;
                if (g) {
                    double tau = exit_times(x, v, grid).tau_minus;
                    gv = (*g)(grid.clamp_inside(x - tau * v));
                }
                double acc = 0.0;
                double dD = 0.0;
                double ds_prev = 0.0;
                double att_end = 1.0;
                detail::march_ray(sys, x, v,
                                  [&](int j, int n, double d, const InterpStencil& s, double att) {
                                      double dsv = s.w[0] * dsigma[s.idx[0]] + s.w[1] * dsigma[s.idx[1]] +
                                                   s.w[2] * dsigma[s.idx[2]] + s.w[3] * dsigma[s.idx[3]];
                                      if (j > 0) dD += 0.5 * d * (ds_prev + dsv);
                                      ds_prev = dsv;
                                      double fv = s.w[0] * sf[s.idx[0]] + s.w[1] * sf[s.idx[1]] +
                                                  s.w[2] * sf[s.idx[2]] + s.w[3] * sf[s.idx[3]];
                                      acc -= detail::source_weight(j, n, d) * att * dD * fv;
                                      if (j == n) att_end = att;
                                  });
                dst[i] = acc - gv * att_end * dD;
            }
        }
    });
    return out;
}

/// Reverse-mode companion of linearized_transport: accumulates
/// d/dsigma [ sum_{i,k} lambda(i,k) (B g + T src)(i,k) ] as a nodal field.
inline NodalField attenuation_gradient(const TransportSystem& sys, const PhaseSpaceField& lambda,
                                       const BoundarySource* g, const PhaseSpaceField& src,
                                       int threads = 1) {
    const SpatialGrid& grid = *sys.grid;
    const AngularGrid& ang = *sys.ang;
    threads = std::min(std::max(threads, 1), ang.size());
    std::vector<NodalField> partial(threads, NodalField(grid.num_nodes(), 0.0));
    detail::for_direction_blocks(ang.size(), threads, [&](int block, int kb, int ke) {
        NodalField& acc = partial[block];
        std::vector<double> suffix;
        std::vector<InterpStencil> stencils;
        for (int k = kb; k < ke; ++k) {
            Vec2 v = ang.dir(k);
            auto sf = src.slice(k);
            auto lam = lambda.slice(k);
            for (int i = 0; i < grid.num_nodes(); ++i) {
                if (!grid.active(i) || lam[i] == 0.0) continue;
                Vec2 x = grid.node(i);
                double gv = 0.0;
                if (g) {
                    double tau = exit_times(x, v, grid).tau_minus;
                    gv = (*g)(grid.clamp_inside(x - tau * v));
                }
                suffix.clear();
                stencils.clear();
                double bval = 0.0;
                double dcur = 0.0;
                detail::march_ray(sys, x, v,
                                  [&](int j, int n, double d, const InterpStencil& s, double att) {
                                      double fv = s.w[0] * sf[s.idx[0]] + s.w[1] * sf[s.idx[1]] +
                                                  s.w[2] * sf[s.idx[2]] + s.w[3] * sf[s.idx[3]];
                                      suffix.push_back(detail::source_weight(j, n, d) * att * fv);
                                      stencils.push_back(s);
                                      if (j == n) bval = gv * att;
                                      dcur = d;
                                  });
                int n = int(suffix.size()) - 1;
                // suffix[j] <- sum_{j' >= j} w_{j'} E_{j'} f_{j'}
                for (int j = n - 1; j >= 0; --j) suffix[std::size_t(j)] += suffix[std::size_t(j) + 1];
                double li = lam[i];
                for (int j = 0; j <= n; ++j) {
                    double cnext = (j + 1 <= n) ? suffix[std::size_t(j) + 1] : 0.0;
                    double gj = 0.0;
                    if (j < n) gj += 0.5 * dcur * (bval + cnext);
                    if (j >= 1) gj += 0.5 * dcur * (bval + suffix[std::size_t(j)]);
                    double c = -li * gj;
                    const InterpStencil& s = stencils[std::size_t(j)];
                    acc[s.idx[0]] += c * s.w[0];
                    acc[s.idx[1]] += c * s.w[1];
                    acc[s.idx[2]] += c * s.w[2];
                    acc[s.idx[3]] += c * s.w[3];
                }
            }
        }
    });
    NodalField grad(grid.num_nodes(), 0.0);
    for (const NodalField& p : partial)
        for (int i = 0; i < grid.num_nodes(); ++i) grad[i] += p[i];
    return grad;
}

struct SolveOptions {
    double tol = 1e-8;
    int max_iter = 2000;
    int threads = 1;
    const PhaseSpaceField* warm_start = nullptr;
};

struct SolveResult {
    PhaseSpaceField field;
    int iterations = 0;
    double last_update = 0.0; // relative sup-norm of the final update
    bool converged = false;
    std::vector<double> update_history; // sup-norm of each update
};

/// Source iteration for the stationary RTE: fixed point of
/// u <- B g + T (sigma_scat K u + q_vol), stopping when the relative sup-norm
/// update drops below tol.
inline SolveResult solve_forward(const TransportSystem& sys, const BoundarySource* g,
                                 const PhaseSpaceField* q_vol, const SolveOptions& opts = {}) {
    const int n = sys.grid->num_nodes();
    const int m = sys.ang->size();
    PhaseSpaceField B = g ? ballistic(sys, *g, opts.threads) : PhaseSpaceField(n, m);
    SolveResult res;
    res.field = opts.warm_start ? *opts.warm_start : B;
    PhaseSpaceField kbuf(n, m), src(n, m), next(n, m);
    for (int it = 1; it <= opts.max_iter; ++it) {
        sys.phase->apply_into(res.field, kbuf);
        for (int k = 0; k < m; ++k) {
            auto kb = kbuf.slice(k);
            auto sb = src.slice(k);
            const double* q = q_vol ? q_vol->slice(k).data() : nullptr;
            for (int i = 0; i < n; ++i) sb[i] = sys.sigma_scat[i] * kb[i] + (q ? q[i] : 0.0);
        }
        apply_T_into(sys, src, next, opts.threads);
        for (std::size_t i = 0; i < next.data().size(); ++i) next.data()[i] += B.data()[i];
        double delta = sup_diff(next, res.field);
        double scale = std::max(sup_norm(next), 1e-300);
        res.field = next;
        res.iterations = it;
        res.last_update = delta / scale;
        res.update_history.push_back(delta);
        if (delta <= opts.tol * scale) {
            res.converged = true;
            break;
        }
    }
    return res;
}

/// Fixed point of u = rhs + T (sigma_scat K u): the solve with an explicit
/// right-hand side instead of a transported source, needed by the exact
/// discrete linearization.
inline SolveResult solve_fixed_rhs(const TransportSystem& sys, const PhaseSpaceField& rhs,
                                   const SolveOptions& opts = {}) {
    const int n = sys.grid->num_nodes();
    const int m = sys.ang->size();
    SolveResult res;
    res.field = opts.warm_start ? *opts.warm_start : rhs;
    PhaseSpaceField kbuf(n, m), tbuf(n, m), next(n, m);
    for (int it = 1; it <= opts.max_iter; ++it) {
        sys.phase->apply_into(res.field, kbuf);
        for (int k = 0; k < m; ++k) {
            auto kb = kbuf.slice(k);
            for (int i = 0; i < n; ++i) kb[i] *= sys.sigma_scat[i];
        }
        apply_T_into(sys, kbuf, tbuf, opts.threads);
        for (std::size_t i = 0; i < next.data().size(); ++i)
            next.data()[i] = rhs.data()[i] + tbuf.data()[i];
        double delta = sup_diff(next, res.field);
        double scale = std::max(sup_norm(next), 1e-300);
        res.field = next;
        res.iterations = it;
        res.last_update = delta / scale;
        res.update_history.push_back(delta);
        if (delta <= opts.tol * scale) {
            res.converged = true;
            break;
        }
    }
    return res;
}

/// Adjoint RTE solve (-v grad + attenuation, inflow on Gamma_+): reverses all
/// directions through the antipode map, never by re-solving geometry.
inline SolveResult solve_adjoint(const TransportSystem& sys, const PhaseSpaceField& q_vol,
                                 const SolveOptions& opts = {}) {
    const AngularGrid& ang = *sys.ang;
    PhaseSpaceField q_flipped = q_vol.antipode_map(ang);
    SolveOptions inner = opts;
    PhaseSpaceField warm_flipped;
    if (opts.warm_start) {
        warm_flipped = opts.warm_start->antipode_map(ang);
        inner.warm_start = &warm_flipped;
    }
    SolveResult res = solve_forward(sys, nullptr, &q_flipped, inner);
    res.field = res.field.antipode_map(ang);
    return res;
}

/// Transposed solve: lambda = (I - (T diag(sigma_scat) K)^T)^{-1} rhs, used by
/// the adjoint-gradient and normal-equation machinery. K is symmetric on the
/// uniform angular grid, so only T needs an explicit transpose.
inline SolveResult solve_transposed(const TransportSystem& sys, const PhaseSpaceField& rhs,
                                    const SolveOptions& opts = {}) {
    const int n = sys.grid->num_nodes();
    const int m = sys.ang->size();
    SolveResult res;
    res.field = opts.warm_start ? *opts.warm_start : rhs;
    PhaseSpaceField tbuf(n, m), kbuf(n, m), next(n, m);
    for (int it = 1; it <= opts.max_iter; ++it) {
        apply_T_transpose_into(sys, res.field, tbuf, opts.threads);
        for (int k = 0; k < m; ++k) {
            auto tb = tbuf.slice(k);
            for (int i = 0; i < n; ++i) tb[i] *= sys.sigma_scat[i];
        }
        sys.phase->apply_into(tbuf, kbuf);
        for (std::size_t i = 0; i < next.data().size(); ++i)
            next.data()[i] = rhs.data()[i] + kbuf.data()[i];
        double delta = sup_diff(next, res.field);
        double scale = std::max(sup_norm(next), 1e-300);
        res.field = next;
        res.iterations = it;
        res.last_update = delta / scale;
        res.update_history.push_back(delta);
        if (delta <= opts.tol * scale) {
            res.converged = true;
            break;
        }
    }
    return res;
}

/// Sup-norm residual of the discrete fixed point, the upwind-along-rays
/// substitution check for a converged solution.
inline double fixed_point_residual(const TransportSystem& sys, const BoundarySource* g,
                                   const PhaseSpaceField* q_vol, const PhaseSpaceField& u,
                                   int threads = 1) {
    const int n = sys.grid->num_nodes();
    const int m = sys.ang->size();
    PhaseSpaceField B = g ? ballistic(sys, *g, threads) : PhaseSpaceField(n, m);
    PhaseSpaceField kbuf(n, m), src(n, m), out(n, m);
    sys.phase->apply_into(u, kbuf);
    for (int k = 0; k < m; ++k) {
        auto kb = kbuf.slice(k);
        auto sb = src.slice(k);
        const double* q = q_vol ? q_vol->slice(k).data() : nullptr;
        for (int i = 0; i < n; ++i) sb[i] = sys.sigma_scat[i] * kb[i] + (q ? q[i] : 0.0);
    }
    apply_T_into(sys, src, out, threads);
    double r = 0.0;
    for (std::size_t i = 0; i < out.data().size(); ++i)
        r = std::max(r, std::abs(out.data()[i] + B.data()[i] - u.data()[i]));
    return r;
}

/// Evaluates a converged solution at an arbitrary point: one ray integral of
/// the frozen source field plus the ballistic term. `src` must be the field
/// sigma_scat * K u + q_vol of the converged iterate.
inline double evaluate_solution_at(const TransportSystem& sys, const BoundarySource* g,
                                   const PhaseSpaceField& src, Vec2 p, int k) {
    const SpatialGrid& grid = *sys.grid;
    Vec2 v = sys.ang->dir(k);
    p = grid.clamp_inside(p);
    double gv = 0.0;
    if (g) {
        double tau = exit_times(p, v, grid).tau_minus;
        gv = (*g)(grid.clamp_inside(p - tau * v));
    }
    auto sf = src.slice(k);
    double acc = 0.0;
    double att_end = 1.0;
    detail::march_ray(sys, p, v, [&](int j, int n, double d, const InterpStencil& s, double att) {
        double fv = s.w[0] * sf[s.idx[0]] + s.w[1] * sf[s.idx[1]] + s.w[2] * sf[s.idx[2]] +
                    s.w[3] * sf[s.idx[3]];
        acc += detail::source_weight(j, n, d) * att * fv;
        if (j == n) att_end = att;
    });
    return gv * att_end + acc;
}

/// Convenience: the frozen source field of a converged solve.
inline PhaseSpaceField frozen_source(const TransportSystem& sys, const PhaseSpaceField& u,
                                     const PhaseSpaceField* q_vol = nullptr) {
    const int n = sys.grid->num_nodes();
    const int m = sys.ang->size();
    PhaseSpaceField src(n, m);
    sys.phase->apply_into(u, src);
    for (int k = 0; k < m; ++k) {
        auto sb = src.slice(k);
        const double* q = q_vol ? q_vol->slice(k).data() : nullptr;
        for (int i = 0; i < n; ++i) sb[i] = sys.sigma_scat[i] * sb[i] + (q ? q[i] : 0.0);
    }
    return src;
}

}  // namespace rte
