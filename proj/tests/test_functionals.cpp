#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "rte/functionals.hpp"
#include "support/test_problems.hpp"

using namespace rte;
using namespace rte::testing;

TEST_CASE("correlator psi") {
    SpatialGrid grid(DomainKind::UnitSquare, 7, 7);
    AngularGrid ang(12);
    std::mt19937_64 rng(3);

    SUBCASE("constant field gives 2 pi c^2") {
        PhaseSpaceField u(grid.num_nodes(), ang.size(), 1.7);
        NodalField psi = correlator_psi(u, ang);
        for (double v : psi)
            CHECK(v == doctest::Approx(2 * std::numbers::pi * 1.7 * 1.7).epsilon(1e-13));
    }

    SUBCASE("mass on one direction with empty antipode vanishes") {
        PhaseSpaceField u(grid.num_nodes(), ang.size(), 0.0);
        for (int i = 0; i < grid.num_nodes(); ++i) u.at(i, 3) = 5.0;
        NodalField psi = correlator_psi(u, ang);
        for (double v : psi) CHECK(v == 0.0);
    }

    SUBCASE("matches the double-loop oracle") {
        PhaseSpaceField u = random_phase_field(rng, grid, ang);
        NodalField psi = correlator_psi(u, ang);
        for (int i = 0; i < grid.num_nodes(); ++i) {
            double ref = 0.0;
            for (int k = 0; k < ang.size(); ++k)
                ref += u.at(i, k) * u.at(i, ang.antipode(k)) * ang.weight();
            CHECK(psi[i] == doctest::Approx(ref).epsilon(1e-13));
        }
    }

    SUBCASE("invariant under direction reversal and nonnegative on u >= 0") {
        PhaseSpaceField u = random_phase_field(rng, grid, ang, 0.0, 2.0);
        NodalField psi = correlator_psi(u, ang);
        NodalField psi_flipped = correlator_psi(u.antipode_map(ang), ang);
        for (int i = 0; i < grid.num_nodes(); ++i) {
            CHECK(psi[i] >= 0.0);
            CHECK(psi[i] == doctest::Approx(psi_flipped[i]).epsilon(1e-14));
        }
    }
}

TEST_CASE("internal data H") {
    SpatialGrid grid(DomainKind::UnitSquare, 9, 9);
    AngularGrid ang(12);
    PhaseFunction pf = hg_kernel(0.4, ang);
    std::mt19937_64 rng(7);

    SUBCASE("zero scattering collapses to -sigma_xtf psi") {
        PhaseSpaceField u = random_phase_field(rng, grid, ang, 0.0, 2.0);
        NodalField sigma_xtf = random_smooth_field(rng, grid, 0.5, 1.5);
        NodalField zero(grid.num_nodes(), 0.0);
        NodalField h = internal_H(u, sigma_xtf, zero, pf, ang);
        NodalField psi = correlator_psi(u, ang);
        for (int i = 0; i < grid.num_nodes(); ++i) {
            CHECK(h[i] == -sigma_xtf[i] * psi[i]); // exact cancellation of the K term
            if (psi[i] > 0) CHECK(h[i] < 0.0);
        }
    }

    SUBCASE("angular constant collapses to -(sigma_xa + sigma_xf) 2 pi c^2") {
        double c = 0.8;
        PhaseSpaceField u(grid.num_nodes(), ang.size(), c);
        NodalField sigma_xa = random_smooth_field(rng, grid, 0.2, 0.6);
        NodalField sigma_xs = random_smooth_field(rng, grid, 0.2, 0.6);
        NodalField sigma_xf = random_smooth_field(rng, grid, 0.2, 0.6);
        NodalField sigma_xtf(grid.num_nodes());
        for (int i = 0; i < grid.num_nodes(); ++i)
            sigma_xtf[i] = sigma_xa[i] + sigma_xs[i] + sigma_xf[i];
        NodalField h = internal_H(u, sigma_xtf, sigma_xs, pf, ang);
        for (int i = 0; i < grid.num_nodes(); ++i) {
            double expect = -(sigma_xa[i] + sigma_xf[i]) * 2 * std::numbers::pi * c * c;
            CHECK(h[i] == doctest::Approx(expect).epsilon(1e-11));
        }
    }
}

TEST_CASE("auxiliary field W") {
    SpatialGrid grid(DomainKind::UnitSquare, 13, 13);
    AngularGrid ang(12);
    PhaseFunction pf = hg_kernel(0.0, ang);

    SUBCASE("pure absorption: W = exp(-sigma_ma tau_plus)") {
        double sigma_ma = 0.6;
        TransportSystem sys{&grid, &ang, &pf, NodalField(grid.num_nodes(), sigma_ma),
                            NodalField(grid.num_nodes(), 0.0)};
        BoundarySource one = constant_source(1.0);
        SolveResult res = solve_W(sys, one);
        REQUIRE(res.converged);
        for (int k = 0; k < ang.size(); ++k)
            for (int i = 0; i < grid.num_nodes(); ++i) {
                double tp = exit_times(grid.node(i), ang.dir(k), grid).tau_plus;
                CHECK(res.field.at(i, k) ==
                      doctest::Approx(std::exp(-sigma_ma * tp)).epsilon(1e-11));
            }
    }

    SUBCASE("maximum principle and discrete residual") {
        std::mt19937_64 rng(11);
        CoefficientSet c = random_coefficients(rng, grid);
        TransportSystem sys = emission_system(grid, ang, pf, c);
        BoundarySource one = constant_source(1.0);
        SolveOptions opts;
        opts.tol = 1e-10;
        SolveResult res = solve_W(sys, one, opts);
        REQUIRE(res.converged);
        for (double v : res.field.data()) {
            CHECK(v > 0.0);
            CHECK(v <= 1.0 + 1e-12);
        }
        // Substitute back through the forward form of the reversed equation.
        PhaseSpaceField flipped = res.field.antipode_map(ang);
        BoundarySource one2 = constant_source(1.0);
        double r = fixed_point_residual(sys, &one2, nullptr, flipped);
        CHECK(r <= 10 * opts.tol * sup_norm(res.field));
    }

    SUBCASE("non-positive boundary weight is rejected") {
        TransportSystem sys{&grid, &ang, &pf, NodalField(grid.num_nodes(), 0.5),
                            NodalField(grid.num_nodes(), 0.0)};
        BoundarySource bad = constant_source(0.0);
        CHECK_THROWS_AS((void)solve_W(sys, bad), std::domain_error);
    }
}

TEST_CASE("auxiliary field phi") {
    SpatialGrid grid(DomainKind::UnitSquare, 11, 11);
    AngularGrid ang(12);
    PhaseFunction pf = hg_kernel(0.3, ang);
    std::mt19937_64 rng(13);
    CoefficientSet c = random_coefficients(rng, grid);
    TransportSystem x_sys = excitation_system(grid, ang, pf, c);
    TransportSystem m_sys = emission_system(grid, ang, pf, c);
    BoundarySource one = constant_source(1.0);
    PhaseSpaceField W = solve_W(m_sys, one).field;

    SUBCASE("eta = 0 gives phi = 0") {
        NodalField zero(grid.num_nodes(), 0.0);
        SolveResult res = solve_phi(x_sys, W, zero, c.sigma_xf);
        CHECK(res.converged);
        CHECK(sup_norm(res.field) == 0.0);
    }

    SUBCASE("positive eta gives a positive interior field, small residual") {
        SolveOptions opts;
        opts.tol = 1e-10;
        SolveResult res = solve_phi(x_sys, W, c.eta, c.sigma_xf, opts);
        REQUIRE(res.converged);
        for (int j = 1; j + 1 < grid.ny(); ++j)
            for (int i = 1; i + 1 < grid.nx(); ++i)
                for (int k = 0; k < ang.size(); ++k) CHECK(res.field.at(grid.id(i, j), k) > 0.0);
        NodalField iw = angular_integral(W, ang);
        PhaseSpaceField q(grid.num_nodes(), ang.size());
        for (int k = 0; k < ang.size(); ++k)
            for (int i = 0; i < grid.num_nodes(); ++i)
                q.at(i, k) = c.eta[i] * c.sigma_xf[i] * iw[i];
        PhaseSpaceField flipped = res.field.antipode_map(ang);
        double r = fixed_point_residual(x_sys, nullptr, &q, flipped);
        CHECK(r <= 10 * opts.tol * std::max(sup_norm(res.field), 1.0));
    }
}

namespace {

NodalField compute_S_for_eta(const SpatialGrid& grid, const AngularGrid& ang,
                             const PhaseFunction& pf, CoefficientSet c, const NodalField& eta,
                             const PhaseSpaceField& u, const PhaseSpaceField& W) {
    c.eta = eta;
    TransportSystem m_sys{&grid, &ang, &pf, c.sigma_mt(), c.sigma_ms};
    TransportSystem x_sys{&grid, &ang, &pf, c.sigma_xtf(), c.sigma_xs};
    SolveOptions opts;
    opts.tol = 1e-11;
    PhaseSpaceField q = emission_source(c.eta, c.sigma_xf, u, ang);
    PhaseSpaceField w = solve_forward(m_sys, nullptr, &q, opts).field;
    PhaseSpaceField phi = solve_phi(x_sys, W, c.eta, c.sigma_xf, opts).field;
    return internal_S(u, w, W, phi, c, pf, ang);
}

}  // namespace

TEST_CASE("internal data S") {
    SpatialGrid grid(DomainKind::UnitSquare, 9, 9);
    AngularGrid ang(8);
    PhaseFunction pf = hg_kernel(0.5, ang);
    std::mt19937_64 rng(17);
    CoefficientSet c = random_coefficients(rng, grid);
    TransportSystem x_sys = excitation_system(grid, ang, pf, c);
    TransportSystem m_sys = emission_system(grid, ang, pf, c);
    BoundarySource g = random_positive_source(rng);
    BoundarySource one = constant_source(1.0);
    SolveOptions opts;
    opts.tol = 1e-11;
    PhaseSpaceField u = solve_forward(x_sys, &g, nullptr, opts).field;
    PhaseSpaceField W = solve_W(m_sys, one, opts).field;

    SUBCASE("eta = 0 gives S = 0") {
        NodalField zero(grid.num_nodes(), 0.0);
        NodalField s = compute_S_for_eta(grid, ang, pf, c, zero, u, W);
        CHECK(sup_norm(s) == 0.0);
    }

    SUBCASE("superposition in eta") {
        NodalField e1 = random_smooth_field(rng, grid, 0.05, 0.5);
        NodalField e2 = random_smooth_field(rng, grid, 0.05, 0.5);
        NodalField sum(grid.num_nodes());
        for (int i = 0; i < grid.num_nodes(); ++i) sum[i] = e1[i] + e2[i];
        NodalField s1 = compute_S_for_eta(grid, ang, pf, c, e1, u, W);
        NodalField s2 = compute_S_for_eta(grid, ang, pf, c, e2, u, W);
        NodalField s12 = compute_S_for_eta(grid, ang, pf, c, sum, u, W);
        double scale = sup_norm(s1) + sup_norm(s2);
        for (int i = 0; i < grid.num_nodes(); ++i)
            CHECK(std::abs(s12[i] - s1[i] - s2[i]) <= 1e-10 * scale);
    }
}

TEST_CASE("boundary currents") {
    SpatialGrid grid(DomainKind::UnitSquare, 9, 9);
    AngularGrid ang(16);

    SUBCASE("isotropic field has zero current") {
        PhaseSpaceField f(grid.num_nodes(), ang.size(), 3.0);
        for (double j : boundary_current(f, grid, ang)) CHECK(std::abs(j) <= 1e-12);
    }

    SUBCASE("angle-even fields have zero current") {
        std::mt19937_64 rng(19);
        PhaseSpaceField f = random_phase_field(rng, grid, ang, 0.0, 1.0);
        PhaseSpaceField even(grid.num_nodes(), ang.size());
        for (int k = 0; k < ang.size(); ++k)
            for (int i = 0; i < grid.num_nodes(); ++i)
                even.at(i, k) = f.at(i, k) + f.at(i, ang.antipode(k));
        double scale = sup_norm(even);
        for (double j : boundary_current(even, grid, ang)) CHECK(std::abs(j) <= 1e-12 * scale);
    }

    SUBCASE("outflow half-space ramp stays within O(M^-2) of pi/2") {
        // Tilted normal so the integrand kink does not sit on grid directions.
        Vec2 n{std::cos(0.3), std::sin(0.3)};
        auto current_at = [&](int m) {
            AngularGrid a(m);
            double acc = 0.0;
            for (int k = 0; k < m; ++k) {
                double vn = dot(a.dir(k), n);
                acc += std::max(vn, 0.0) * vn * a.weight();
            }
            return acc;
        };
        double dense = current_at(4096);
        CHECK(dense == doctest::Approx(std::numbers::pi / 2).epsilon(1e-6));
        for (int m : {12, 16, 20, 28}) {
            double err = std::abs(current_at(m) - dense);
            CHECK(err <= 10.0 / (m * m));
        }
    }

    SUBCASE("pure absorption balances inflow, absorption and outflow") {
        SpatialGrid g2(DomainKind::UnitSquare, 33, 33);
        AngularGrid a2(32);
        PhaseFunction pf = hg_kernel(0.0, a2);
        double sigma_a = 0.8;
        TransportSystem sys{&g2, &a2, &pf, NodalField(g2.num_nodes(), sigma_a),
                            NodalField(g2.num_nodes(), 0.0)};
        BoundarySource g = constant_source(1.0);
        PhaseSpaceField u = solve_forward(sys, &g, nullptr).field;
        double inflow = 0.0, outflow = 0.0;
        for (const auto& b : g2.boundary_nodes())
            for (int k = 0; k < a2.size(); ++k) {
                double vn = dot(a2.dir(k), b.normal);
                double val = u.at(b.node_id, k) * vn * a2.weight() * b.weight;
                if (vn > 0)
                    outflow += val;
                else
                    inflow += -g(b.pos) * vn * a2.weight() * b.weight;
            }
        NodalField iu = angular_integral(u, a2);
        double absorbed = 0.0;
        for (int i = 0; i < g2.num_nodes(); ++i) absorbed += sigma_a * iu[i] * g2.node_measure()[i];
        CHECK(inflow == doctest::Approx(absorbed + outflow).epsilon(0.02));
    }
}

TEST_CASE("multiplicative noise") {
    NodalField f(50000, 2.0);

    SUBCASE("zero level reproduces the input") {
        NodalField out = add_noise(f, {0.0, 123});
        for (std::size_t i = 0; i < f.size(); ++i) CHECK(out[i] == f[i]);
    }

    SUBCASE("fixed seed is bit-reproducible") {
        NodalField a = add_noise(f, {0.05, 42});
        NodalField b = add_noise(f, {0.05, 42});
        for (std::size_t i = 0; i < f.size(); ++i) CHECK(a[i] == b[i]);
    }

    SUBCASE("level bounds the relative perturbation; sample mean is centred") {
        double tau = 0.05;
        NodalField out = add_noise(f, {tau, 7});
        double mean = 0.0;
        for (std::size_t i = 0; i < f.size(); ++i) {
            double rel = out[i] / f[i] - 1.0;
            CHECK(std::abs(rel) <= tau);
            mean += rel / double(f.size());
        }
        // xi has std 1/sqrt(3): three sigma of the sample mean.
        double three_sigma = 3.0 * tau / std::sqrt(3.0 * double(f.size()));
        CHECK(std::abs(mean) <= three_sigma);
    }

    SUBCASE("invalid level rejected") {
        CHECK_THROWS(add_noise(f, {1.0, 1}));
        CHECK_THROWS(add_noise(f, {-0.1, 1}));
    }
}
