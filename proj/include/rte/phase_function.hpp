#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "rte/fields.hpp"
#include "rte/grid.hpp"

namespace rte {

/// Two-dimensional Henyey-Greenstein phase function value, before discrete
/// renormalization.
inline double hg_value(double g_aniso, double cos_theta) {
    double g2 = g_aniso * g_aniso;
    return (1.0 - g2) / (2.0 * std::numbers::pi * (1.0 + g2 - 2.0 * g_aniso * cos_theta));
}

/// Discrete scattering kernel on a uniform angular grid. The quadrature weight
/// is folded in and rows are renormalized, so sum_{k'} kernel(k,k') == 1.
/// The kernel depends on k - k' only and is stored as its circulant generator,
/// mirrored so the matrix is exactly symmetric.
class PhaseFunction {
  public:
    PhaseFunction(double g_aniso, const AngularGrid& ang) : m_(ang.size()), g_(g_aniso) {
        if (!(std::abs(g_aniso) < 1.0))
            throw std::invalid_argument("hg_kernel: anisotropy must satisfy |g| < 1");
        gen_.resize(m_);
        for (int d = 0; d <= m_ / 2; ++d) {
            double cos_theta = std::cos(2.0 * std::numbers::pi * d / m_);
            gen_[d] = hg_value(g_aniso, cos_theta) * ang.weight();
        }
        for (int d = m_ / 2 + 1; d < m_; ++d) gen_[d] = gen_[m_ - d];
        double row_sum = 0.0;
        for (double v : gen_) row_sum += v;
        for (double& v : gen_) v /= row_sum;
        min_entry_ = gen_[0];
        for (double v : gen_) min_entry_ = std::min(min_entry_, v);
        if (!(min_entry_ > 0.0))
            throw std::domain_error("phase function lost strict positivity");
    }

    int num_dirs() const { return m_; }
    double anisotropy() const { return g_; }
    /// Weight-folded kernel entry p(v_k . v_k') * w_k'.
    double kernel(int k, int kp) const { return gen_[((k - kp) % m_ + m_) % m_]; }
    double min_kernel() const { return min_entry_; }

    /// K f(x, v_k) = sum_{k'} p(v_k . v_k') f(x, v_k') w_k'.
    void apply_into(const PhaseSpaceField& f, PhaseSpaceField& out) const {
        const int n = f.num_nodes();
        for (int k = 0; k < m_; ++k) {
            auto dst = out.slice(k);
            for (int i = 0; i < n; ++i) dst[i] = 0.0;
            for (int kp = 0; kp < m_; ++kp) {
                double c = kernel(k, kp);
                auto src = f.slice(kp);
                for (int i = 0; i < n; ++i) dst[i] += c * src[i];
            }
        }
    }

  private:
    int m_;
    double g_;
    double min_entry_;
    std::vector<double> gen_;
};

inline PhaseFunction hg_kernel(double g_aniso, const AngularGrid& ang) {
    return PhaseFunction(g_aniso, ang);
}

inline PhaseSpaceField scatter(const PhaseSpaceField& f, const PhaseFunction& p) {
    PhaseSpaceField out(f.num_nodes(), f.num_dirs());
    p.apply_into(f, out);
    return out;
}

}  // namespace rte
