#pragma once

#include "mfjump/solver.hpp"

namespace mfjump {

// Directional derivative of a full solve: same array layout as the solution
// it differentiates.
struct FlowArrays {
    std::vector<Mat> dY;  // steps+1, N x n
    std::vector<Mat> dP;  // steps+1, N x n
    std::vector<Mat> dQ;  // steps, N x (n*n)
    std::vector<Mat> dR;  // steps, N x (atoms*n)
    std::vector<Mat> dU;  // steps, N x d
};

// Seminorm matching snorm_gap: sup-in-time second moments of dY, dP plus the
// dt-weighted energies of dQ, dU and the weighted jump component.
double flow_snorm(const FlowArrays& f, const JumpMeasure& jm, const TimeGrid& grid);

struct JacobianFlow {
    Mat eta;  // N x n direction
    FlowArrays flow;
};

struct SensitivityConfig {
    double tol = 1e-10;   // relative fixed-point tolerance of the linear sweep
    int max_iter = 80;
    void validate() const;
};

// Derivative of the solution map in its initial data along eta, obtained by
// running the linearized forward/backward/feedback sweep to its fixed point
// with every conditional-expectation fit differentiated explicitly. Exactly
// linear in eta. Requires the second-order callbacks.
JacobianFlow solve_jacobian_flow(const ModelSpec& m, const JumpMeasure& jm, const SolveResult& base,
                                 uint64_t base_seed, const Mat& eta, const RegressionConfig& reg,
                                 const MinimizerSettings& min_settings,
                                 const SensitivityConfig& scfg = {});

// Tagged-particle system: fresh particles started from the probe points ys,
// every coefficient and mean-field average frozen on the baseline flow. The
// tagged cloud never contributes to the baseline measure.
struct PinnedFlow {
    Mat tags;              // M x n probe initials
    int copies_per_tag = 1;
    ParticleEnsemble ens;  // M*copies tagged trajectories
    AdjointEnsemble adj;
    int tag_of(int particle) const { return particle % static_cast<int>(tags.rows()); }
};

struct PinnedConfig {
    int copies_per_tag = 64;
    double tol_control = 1e-7;
    int max_picard = 200;
    double damping = 0.5;
    uint64_t seed = 99;            // pinned noise streams
    std::vector<int> mirror;       // per tagged particle: reuse this baseline stream index
    void validate() const;
};

PinnedFlow solve_pinned_flow(const ModelSpec& m, const JumpMeasure& jm, const SolveResult& base,
                             const Mat& ys, const PinnedConfig& pcfg, const RegressionConfig& reg,
                             const MinimizerSettings& min_settings);

// State-derivative of the tagged system: one linearized sweep per state
// coordinate, started from the matching unit direction, with the baseline
// population held fixed. columns[c] solves the direction e_c.
struct PinnedJacobian {
    std::vector<FlowArrays> columns;
};

PinnedJacobian solve_pinned_jacobian(const ModelSpec& m, const JumpMeasure& jm,
                                     const SolveResult& base, const PinnedFlow& pinned,
                                     const PinnedConfig& pcfg, const RegressionConfig& reg,
                                     const MinimizerSettings& min_settings,
                                     const SensitivityConfig& scfg = {});

}  // namespace mfjump
