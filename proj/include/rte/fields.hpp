#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "rte/grid.hpp"

namespace rte {

using NodalField = std::vector<double>;

/// Scalar function sampled on spatial nodes x angular directions, stored
/// direction-major so each direction slice is contiguous for the sweeps.
class PhaseSpaceField {
  public:
    PhaseSpaceField() = default;
    PhaseSpaceField(int num_nodes, int num_dirs, double fill = 0.0)
        : n_(num_nodes), m_(num_dirs), v_(std::size_t(num_nodes) * num_dirs, fill) {}

    int num_nodes() const { return n_; }
    int num_dirs() const { return m_; }

    double& at(int node, int k) { return v_[std::size_t(k) * n_ + node]; }
    double at(int node, int k) const { return v_[std::size_t(k) * n_ + node]; }

    std::span<double> slice(int k) { return {v_.data() + std::size_t(k) * n_, std::size_t(n_)}; }
    std::span<const double> slice(int k) const {
        return {v_.data() + std::size_t(k) * n_, std::size_t(n_)};
    }

    std::vector<double>& data() { return v_; }
    const std::vector<double>& data() const { return v_; }

    /// Field with directions relabeled through the antipode map:
    /// out(x, k) = in(x, antipode(k)).
    PhaseSpaceField antipode_map(const AngularGrid& ang) const {
        PhaseSpaceField out(n_, m_);
        for (int k = 0; k < m_; ++k) {
            auto src = slice(ang.antipode(k));
            auto dst = out.slice(k);
            for (int i = 0; i < n_; ++i) dst[i] = src[i];
        }
        return out;
    }

  private:
    int n_ = 0;
    int m_ = 0;
    std::vector<double> v_;
};

inline double sup_norm(const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

inline double sup_norm(const PhaseSpaceField& f) { return sup_norm(f.data()); }

inline double sup_diff(const PhaseSpaceField& a, const PhaseSpaceField& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.data().size(); ++i)
        m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

/// Measure-weighted L2 norm over nodes.
inline double l2_norm(const NodalField& f, const SpatialGrid& grid) {
    double s = 0.0;
    const auto& mu = grid.node_measure();
    for (int i = 0; i < grid.num_nodes(); ++i) s += mu[i] * f[i] * f[i];
    return std::sqrt(s);
}

inline double relative_l2_error(const NodalField& approx, const NodalField& exact,
                                const SpatialGrid& grid) {
    NodalField diff(exact.size());
    for (std::size_t i = 0; i < exact.size(); ++i) diff[i] = approx[i] - exact[i];
    double denom = l2_norm(exact, grid);
    return denom > 0 ? l2_norm(diff, grid) / denom : l2_norm(diff, grid);
}

/// Per-node optical coefficients and the derived totals
/// sigma_xt = sigma_xa + sigma_xs, sigma_xtf = sigma_xt + sigma_xf.
struct CoefficientSet {
    NodalField sigma_xa;
    NodalField sigma_xs;
    NodalField sigma_xf;
    NodalField sigma_ma;
    NodalField sigma_ms;
    NodalField eta;

    NodalField sigma_xt() const {
        NodalField out(sigma_xa.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigma_xa[i] + sigma_xs[i];
        return out;
    }
    NodalField sigma_xtf() const {
        NodalField out(sigma_xa.size());
        for (std::size_t i = 0; i < out.size(); ++i)
            out[i] = sigma_xa[i] + sigma_xs[i] + sigma_xf[i];
        return out;
    }
    NodalField sigma_mt() const {
        NodalField out(sigma_ma.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigma_ma[i] + sigma_ms[i];
        return out;
    }
};

struct AdmissibleBounds {
    double background_lo = 1e-6; // floor for sigma_xa, sigma_xs, sigma_ma, sigma_ms
    double background_hi = 1e6;
    double sigma_f_lo = 0.0;
    double sigma_f_hi = 1e6;
    double eta_lo = 0.0;
    double eta_hi = 1.0; // exclusive
};

inline void check_admissible(const CoefficientSet& c, const AdmissibleBounds& b = {}) {
    auto in_range = [](const NodalField& f, double lo, double hi) {
        for (double v : f)
            if (!(v >= lo && v <= hi)) return false;
        return true;
    };
    if (!in_range(c.sigma_xa, b.background_lo, b.background_hi) ||
        !in_range(c.sigma_xs, b.background_lo, b.background_hi) ||
        !in_range(c.sigma_ma, b.background_lo, b.background_hi) ||
        !in_range(c.sigma_ms, b.background_lo, b.background_hi))
        throw std::domain_error("coefficients violate the admissible background bounds");
    if (!in_range(c.sigma_xf, b.sigma_f_lo, b.sigma_f_hi))
        throw std::domain_error("sigma_xf outside its admissible box");
    for (double v : c.eta)
        if (!(v >= b.eta_lo && v <= b.eta_hi && v < 1.0))
            throw std::domain_error("eta outside [0, 1)");
}

}  // namespace rte
