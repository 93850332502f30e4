#pragma once

#include <string>

#include "mfjump/adjoint.hpp"
#include "mfjump/control.hpp"
#include "mfjump/simulate.hpp"

namespace mfjump {

struct SolveConfig {
    int particles = 10000;
    TimeGrid grid{0.0, 1.0, 100};
    double damping = 0.5;       // Picard relaxation on the control field
    double tol_control = 1e-4;  // L2(dt x ensemble) change threshold
    int max_picard = 200;
    uint64_t seed = 1;
    RegressionConfig regression{};
    MinimizerSettings minimizer{};
    double blowup_cap = 1e8;
    bool require_sufficiency = true;  // warn-and-continue when false
    void validate() const;
};

struct SolverReport {
    bool converged = false;
    int iterations = 0;
    std::vector<double> control_change_history;
    double final_cost = 0.0;
    double optimality_residual = 0.0;
    ConeMargins cone;
    ConditionReport sufficiency;
    double state_moment_ratio = 0.0;    // E sup|Y|^2 over the data size
    double adjoint_energy_ratio = 0.0;  // costate energy over the data size
    double wallclock_seconds = 0.0;
    std::string to_json() const;
};

struct SolveResult {
    ParticleEnsemble ensemble;
    AdjointEnsemble adjoint;
    SolverReport report;
};

// Damped Picard iteration on the control field: forward simulation, backward
// regression sweep, pointwise feedback, relaxed update. Stops when the
// L2(dt x ensemble) control change drops below tol_control.
SolveResult solve_mftc(const ModelSpec& m, const JumpMeasure& jm, const EmpiricalMeasure& init,
                       const SolveConfig& cfg);

// L2 control change between two fields, sqrt(sum_k dt mean_i |du|^2).
double control_field_distance(const std::vector<Mat>& a, const std::vector<Mat>& b, double dt);

// Solution-map seminorm: sup-in-time second moments of the state and costate
// plus the dt-weighted energies of Q, u and the jump costate.
double snorm_gap(const SolveResult& a, const SolveResult& b, const JumpMeasure& jm);

struct LipschitzProbe {
    double initial_gap = 0.0;   // coupled per-particle L2 distance of the initials
    double solution_gap = 0.0;  // seminorm distance of the coupled solutions
    double ratio = 0.0;         // solution_gap / initial_gap (0 when initials coincide)
};

// Common-random-number sensitivity of the solution map to the initial
// condition; the ratio reflects the Lipschitz stability bound.
LipschitzProbe lipschitz_probe(const ModelSpec& m, const JumpMeasure& jm,
                               const EmpiricalMeasure& init1, const EmpiricalMeasure& init2,
                               const SolveConfig& cfg);

}  // namespace mfjump
