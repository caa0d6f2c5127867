#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "rte/vec.hpp"

namespace rte {

enum class DomainKind { UnitSquare, UnitDisk };

inline std::string to_string(DomainKind k) {
    return k == DomainKind::UnitSquare ? "unit-square" : "unit-disk";
}

/// Four-corner bilinear stencil; on the disk, weights of inactive corners are
/// folded onto the active ones so the weights always sum to one.
struct InterpStencil {
    int idx[4];
    double w[4];
};

struct BoundaryNode {
    Vec2 pos;
    Vec2 normal;   // unit outward
    double weight; // length measure along the boundary
    int node_id;   // lattice node index, or -1 for off-lattice ring points
};

/// Uniform lattice over [0,1]^2 (unit square) or the bounding box [-1,1]^2 of
/// the unit disk. Fields live on all lattice nodes; on the disk only nodes
/// with |x| <= 1 are active.
class SpatialGrid {
  public:
    SpatialGrid(DomainKind kind, int nx, int ny) : kind_(kind), nx_(nx), ny_(ny) {
        if (nx < 2 || ny < 2) throw std::invalid_argument("SpatialGrid: need nx, ny >= 2");
        if (kind == DomainKind::UnitSquare) {
            x0_ = 0.0; y0_ = 0.0;
            hx_ = 1.0 / (nx - 1);
            hy_ = 1.0 / (ny - 1);
        } else {
            x0_ = -1.0; y0_ = -1.0;
            hx_ = 2.0 / (nx - 1);
            hy_ = 2.0 / (ny - 1);
        }
        active_.assign(std::size_t(nx) * ny, 1);
        if (kind == DomainKind::UnitDisk) {
            for (int j = 0; j < ny; ++j)
                for (int i = 0; i < nx; ++i) {
                    Vec2 p = node({i, j});
                    active_[id(i, j)] = norm(p) <= 1.0 + 1e-12 ? 1 : 0;
                }
        }
        build_boundary();
    }

    DomainKind kind() const { return kind_; }
    int nx() const { return nx_; }
    int ny() const { return ny_; }
    int num_nodes() const { return nx_ * ny_; }
    double hx() const { return hx_; }
    double hy() const { return hy_; }
    double step() const { return std::min(hx_, hy_); }

    int id(int i, int j) const { return j * nx_ + i; }
    Vec2 node(std::pair<int, int> ij) const {
        return {x0_ + ij.first * hx_, y0_ + ij.second * hy_};
    }
    Vec2 node(int id) const { return node({id % nx_, id / nx_}); }
    bool active(int id) const { return active_[std::size_t(id)] != 0; }

    /// diam(Omega): sqrt(2) for the unit square, 2 for the unit disk.
    double diameter() const { return kind_ == DomainKind::UnitSquare ? std::numbers::sqrt2 : 2.0; }

    bool contains(Vec2 p, double tol = 1e-10) const {
        if (kind_ == DomainKind::UnitSquare)
            return p.x >= -tol && p.x <= 1.0 + tol && p.y >= -tol && p.y <= 1.0 + tol;
        return norm(p) <= 1.0 + tol;
    }

    /// Projects points that stray outside by <= tol back onto the closure.
    Vec2 clamp_inside(Vec2 p) const {
        if (kind_ == DomainKind::UnitSquare)
            return {std::clamp(p.x, 0.0, 1.0), std::clamp(p.y, 0.0, 1.0)};
        double r = norm(p);
        if (r > 1.0) return {p.x / r, p.y / r};
        return p;
    }

    InterpStencil stencil(Vec2 p) const {
        double fx = (p.x - x0_) / hx_;
        double fy = (p.y - y0_) / hy_;
        int ix = std::clamp(int(std::floor(fx)), 0, nx_ - 2);
        int iy = std::clamp(int(std::floor(fy)), 0, ny_ - 2);
        double ax = std::clamp(fx - ix, 0.0, 1.0);
        double ay = std::clamp(fy - iy, 0.0, 1.0);
        InterpStencil s;
        s.idx[0] = id(ix, iy);
        s.idx[1] = id(ix + 1, iy);
        s.idx[2] = id(ix, iy + 1);
        s.idx[3] = id(ix + 1, iy + 1);
        s.w[0] = (1 - ax) * (1 - ay);
        s.w[1] = ax * (1 - ay);
        s.w[2] = (1 - ax) * ay;
        s.w[3] = ax * ay;
        if (kind_ == DomainKind::UnitDisk) {
            double total = 0.0;
            for (int c = 0; c < 4; ++c) {
                if (!active(s.idx[c])) s.w[c] = 0.0;
                total += s.w[c];
            }
            if (total > 0.0) {
                for (double& w : s.w) w /= total;
            } else {
                // p inside the disk but the whole cell is inactive: nearest corner.
                s.w[0] = 1.0;
            }
        }
        return s;
    }

    double interpolate(const std::vector<double>& nodal, Vec2 p) const {
        InterpStencil s = stencil(p);
        return s.w[0] * nodal[s.idx[0]] + s.w[1] * nodal[s.idx[1]] +
               s.w[2] * nodal[s.idx[2]] + s.w[3] * nodal[s.idx[3]];
    }

    /// Trapezoid cell measure per node; used for discrete L2 norms and the
    /// objective. Disk nodes get the plain cell area on active nodes.
    const std::vector<double>& node_measure() const { return measure_; }

    const std::vector<BoundaryNode>& boundary_nodes() const { return boundary_; }

  private:
    void build_boundary() {
        measure_.assign(std::size_t(nx_) * ny_, 0.0);
        for (int j = 0; j < ny_; ++j)
            for (int i = 0; i < nx_; ++i) {
                double cx = (i == 0 || i == nx_ - 1) ? 0.5 : 1.0;
                double cy = (j == 0 || j == ny_ - 1) ? 0.5 : 1.0;
                measure_[id(i, j)] = active(id(i, j)) ? cx * cy * hx_ * hy_ : 0.0;
            }
        if (kind_ == DomainKind::UnitSquare) {
            auto face = [&](int i, int j, Vec2 n, double w) {
                boundary_.push_back({node({i, j}), n, w, id(i, j)});
            };
            for (int i = 0; i < nx_; ++i) {
                double w = (i == 0 || i == nx_ - 1) ? 0.5 * hx_ : hx_;
                face(i, 0, {0, -1}, w);
                face(i, ny_ - 1, {0, 1}, w);
            }
            for (int j = 0; j < ny_; ++j) {
                double w = (j == 0 || j == ny_ - 1) ? 0.5 * hy_ : hy_;
                face(0, j, {-1, 0}, w);
                face(nx_ - 1, j, {1, 0}, w);
            }
        } else {
            // Uniform-angle ring; boundary integrals use arc-length weights.
            int n = std::max(16, int(std::ceil(2.0 * std::numbers::pi / step())));
            double dphi = 2.0 * std::numbers::pi / n;
            for (int k = 0; k < n; ++k) {
                double phi = k * dphi;
                Vec2 p{std::cos(phi), std::sin(phi)};
                boundary_.push_back({p, p, dphi, -1});
            }
        }
    }

    DomainKind kind_;
    int nx_, ny_;
    double x0_, y0_, hx_, hy_;
    std::vector<std::uint8_t> active_;
    std::vector<double> measure_;
    std::vector<BoundaryNode> boundary_;
};

/// Uniformly spaced directions on S^1 with uniform quadrature weight 2*pi/M.
/// The antipode map is pure index arithmetic, which keeps v(k-) == -v(k) exact.
class AngularGrid {
  public:
    /// index_offset relabels the direction set by an exact index rotation:
    /// dir(k) of the offset grid is bitwise dir(k + offset) of the plain one.
    explicit AngularGrid(int m, double phase = 0.0, int index_offset = 0)
        : m_(m), phase_(phase) {
        if (m < 2 || m % 2 != 0) throw std::invalid_argument("AngularGrid: M must be even, >= 2");
        dirs_.resize(m);
        for (int k = 0; k < m; ++k) {
            double a = phase + 2.0 * std::numbers::pi * k / m;
            dirs_[k] = {std::cos(a), std::sin(a)};
        }
        // Make antipodal pairs bitwise negatives of each other.
        for (int k = 0; k < m / 2; ++k)
            dirs_[k + m / 2] = {-dirs_[k].x, -dirs_[k].y};
        if (index_offset != 0) {
            std::vector<Vec2> rolled(m);
            for (int k = 0; k < m; ++k) rolled[k] = dirs_[((k + index_offset) % m + m) % m];
            dirs_ = std::move(rolled);
        }
    }

    int size() const { return m_; }
    double phase() const { return phase_; }
    Vec2 dir(int k) const { return dirs_[std::size_t(k)]; }
    double weight() const { return 2.0 * std::numbers::pi / m_; }
    int antipode(int k) const { return (k + m_ / 2) % m_; }

  private:
    int m_;
    double phase_;
    std::vector<Vec2> dirs_;
};

struct ExitTimes {
    double tau_minus; // distance to the boundary along -v
    double tau_plus;  // distance to the boundary along +v
};

/// Distances from x to the boundary along -v (tau_minus) and +v (tau_plus).
/// Rejects x outside the domain beyond 1e-10; slightly outside points are
/// treated as their projection onto the boundary.
inline ExitTimes exit_times(Vec2 x, Vec2 v, const SpatialGrid& grid) {
    if (!grid.contains(x, 1e-10))
        throw std::domain_error("exit_times: point outside the domain");
    x = grid.clamp_inside(x);
    if (grid.kind() == DomainKind::UnitSquare) {
        auto axis = [](double pos, double vel, double lo, double hi, double& back, double& fwd) {
            if (vel > 0) {
                back = std::min(back, (pos - lo) / vel);
                fwd = std::min(fwd, (hi - pos) / vel);
            } else if (vel < 0) {
                back = std::min(back, (pos - hi) / vel);
                fwd = std::min(fwd, (lo - pos) / vel);
            }
        };
        double back = std::numeric_limits<double>::infinity();
        double fwd = back;
        axis(x.x, v.x, 0.0, 1.0, back, fwd);
        axis(x.y, v.y, 0.0, 1.0, back, fwd);
        return {std::max(back, 0.0), std::max(fwd, 0.0)};
    }
    double b = dot(x, v);
    double disc = std::max(b * b + 1.0 - dot(x, x), 0.0);
    double root = std::sqrt(disc);
    return {std::max(b + root, 0.0), std::max(root - b, 0.0)};
}

struct RayTrace {
    Vec2 origin;
    Vec2 dir;
    double tau_minus;
    double tau_plus;
    Vec2 entry_point; // x - tau_minus * v
    Vec2 exit_point;  // x + tau_plus * v
};

inline RayTrace trace_ray(Vec2 x, Vec2 v, const SpatialGrid& grid) {
    ExitTimes t = exit_times(x, v, grid);
    return {x, v, t.tau_minus, t.tau_plus, x - t.tau_minus * v, x + t.tau_plus * v};
}

enum class QuadratureRule { Trapezoid, Simpson };

/// Number of equal subintervals used on a ray of length tau at the given step.
/// Simpson rounds up to an even count so the node count stays odd.
inline int ray_interval_count(double tau, double step, QuadratureRule rule) {
    int n = std::max(1, int(std::ceil(tau / step - 1e-12)));
    if (rule == QuadratureRule::Simpson && n % 2 != 0) ++n;
    return n;
}

struct RayQuadrature {
    std::vector<double> s;       // distances from the ray start, ascending
    std::vector<double> weights; // sum to the ray length
};

/// Composite quadrature nodes/weights on [0, tau]. Degenerate rays
/// (tau < step/2) fall back to a two-node trapezoid.
inline RayQuadrature ray_quadrature(double tau, double step, QuadratureRule rule) {
    if (step <= 0) throw std::invalid_argument("ray_quadrature: step must be positive");
    RayQuadrature q;
    if (tau < 0.5 * step) {
        q.s = {0.0, tau};
        q.weights = {0.5 * tau, 0.5 * tau};
        return q;
    }
    int n = ray_interval_count(tau, step, rule);
    double d = tau / n;
    q.s.resize(n + 1);
    q.weights.assign(n + 1, 0.0);
    for (int j = 0; j <= n; ++j) q.s[j] = j * d;
    q.s[n] = tau;
    if (rule == QuadratureRule::Trapezoid) {
        for (int j = 0; j <= n; ++j) q.weights[j] = (j == 0 || j == n) ? 0.5 * d : d;
    } else {
        for (int j = 0; j + 2 <= n; j += 2) {
            q.weights[j] += d / 3.0;
            q.weights[j + 1] += 4.0 * d / 3.0;
            q.weights[j + 2] += d / 3.0;
        }
    }
    return q;
}

}  // namespace rte
