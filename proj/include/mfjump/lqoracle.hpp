#pragma once

#include <vector>

#include "mfjump/measure.hpp"
#include "mfjump/model.hpp"

namespace mfjump {

struct TimeGrid;  // simulate.hpp

// Scalar linear-quadratic problem data for one state coordinate:
//   drift      a x + abar mean + c v
//   diffusion  sigma0 + sigma1 x + sigma2 mean            (control-free)
//   jump       (jump0 + jump1 x + jump2 mean) * e         (per mark e)
//   running    q/2 x^2 + qbar/2 mean^2 + r/2 v^2
//   terminal   h/2 x^2 + hbar/2 mean^2
struct LQSpec {
    double a = 0.0, abar = 0.0, c = 1.0;
    double sigma0 = 1.0, sigma1 = 0.0, sigma2 = 0.0;
    double jump0 = 0.0, jump1 = 0.0, jump2 = 0.0;
    double q = 1.0, qbar = 0.0, r = 1.0, h = 1.0, hbar = 0.0;
};

// Backward coefficient system obtained by matching the affine ansatz
// P_t = p(t) Y_t + pi(t) E[Y_t] + s(t) in the adjoint equation:
//   p'   = (c^2/r) p^2 - 2a p - (sigma1^2 + S11) p - q,              p(T) = h
//   Pi'  = (c^2/r) Pi^2 - 2(a+abar) Pi
//          - ((sigma1+sigma2)^2 + Sbb) p - (q+qbar),                 Pi(T) = h + hbar
//   s'   = ((c^2/r) Pi - (a+abar)) s
//          - p (sigma0 (sigma1+sigma2) + S0b),                       s(T) = 0
//   eps' = -p (sigma0^2 + S00)/2 + c^2 s^2 / (2r),                   eps(T) = 0
// with pi = Pi - p and the atomic jump moments
//   S11 = sum_a w_a (jump1 e_a)^2, Sbb = sum_a w_a ((jump1+jump2) e_a)^2,
//   S00 = sum_a w_a (jump0 e_a)^2, S0b = sum_a w_a jump0 (jump1+jump2) e_a^2.
// Value: V(t,mu) = p(t)/2 Var(mu) + Pi(t)/2 mean^2 + s(t) mean + eps(t).
// Feedback: v = -(c/r) (p x + pi mean + s).
struct RiccatiSolution {
    double t0 = 0.0, T = 1.0;
    std::vector<double> times;  // refined grid knots
    std::vector<double> p, Pi, s, eps;

    double p_at(double t) const;
    double Pi_at(double t) const;
    double pi_at(double t) const { return Pi_at(t) - p_at(t); }
    double s_at(double t) const;
    double eps_at(double t) const;

    LQSpec spec;
    double gain_k(double t) const { return -spec.c / spec.r * p_at(t); }
    double gain_kbar(double t) const { return -spec.c / spec.r * pi_at(t); }
    double gain_k0(double t) const { return -spec.c / spec.r * s_at(t); }

    double value(double t, double mean, double var) const;
    double feedback(double t, double x, double mean) const;
};

// RK4 backward integration on a grid refined 10x over the solver grid.
RiccatiSolution solve_riccati(const LQSpec& spec, const JumpMeasure& jm, const TimeGrid& grid,
                              int refine = 10);

// Deterministic cost of an affine feedback policy v = k x + kbar mean + k0,
// computed by integrating the closed (mean, second-moment) ODEs with RK4.
double lq_affine_policy_cost(const LQSpec& spec, const JumpMeasure& jm, double t0, double T,
                             double mean0, double m2_0, double k, double kbar, double k0,
                             int ode_steps = 2000);

struct RiccatiValidation {
    bool passed = false;
    double refine_drift = 0.0;      // |p(t0)| change when the RK4 grid is doubled
    double grid_best_cost = 0.0;    // best cost over the dense affine-gain grid
    double oracle_value = 0.0;      // V(t0, mu0)
    double grid_gap = 0.0;          // grid_best_cost - oracle_value (>= -resolution)
    double grid_resolution = 0.0;   // quadratic tolerance at the final grid pitch
    double best_k = 0.0, best_kbar = 0.0, best_k0 = 0.0;
    double mc_value = 0.0;          // simulated cost of the oracle feedback
    double mc_stderr = 0.0;
    double mc_gap = 0.0;            // |mc_value - oracle_value|
    std::string summary;
};

// Brute-force policy-search gate: the oracle value must match the best affine
// feedback found by (1) a dense two-stage gain grid evaluated through the
// moment ODEs and (2) a Monte Carlo simulation of the optimal gains at large N.
// Run this before trusting the oracle anywhere else.
RiccatiValidation validate_riccati(const LQSpec& spec, const JumpMeasure& jm, const TimeGrid& grid,
                                   double mean0, double var0, int mc_particles = 100000,
                                   uint64_t seed = 7);

}  // namespace mfjump
