#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "mfjump/measure.hpp"
#include "mfjump/model.hpp"

namespace mfjump {

struct TimeGrid {
    double t0 = 0.0;
    double T = 1.0;
    int steps = 100;

    double dt() const { return (T - t0) / steps; }
    double time(int k) const { return t0 + k * dt(); }
    void validate() const;
};

// Deterministic noise source: every increment is reproducible from
// (seed, particle, step[, atom]) alone, so results never depend on worker
// count or evaluation order. pinned_stream switches to an independent family
// of streams used for tagged particles.
struct NoiseBundle {
    uint64_t seed = 0;
    bool pinned_stream = false;

    Vec brownian(int particle, int step, int dim, double dt) const;
    int jump_count(int particle, int step, int atom, double mean) const;
};

// Particle system on the grid. states[k] is the N x n cross-section at knot
// k (post-jump values); controls[k] is the N x d control applied on
// [t_k, t_{k+1}), measurable with respect to time-t_k information.
struct ParticleEnsemble {
    TimeGrid grid;
    std::vector<Mat> states;    // steps+1 entries
    std::vector<Mat> controls;  // steps entries

    int particles() const { return states.empty() ? 0 : static_cast<int>(states[0].rows()); }
    int dim() const { return states.empty() ? 0 : static_cast<int>(states[0].cols()); }
    EmpiricalMeasure measure_at(int step) const { return EmpiricalMeasure(states[static_cast<size_t>(step)]); }
};

// Policy evaluated per particle while stepping forward. Wraps either an
// explicit state-feedback callback or a stored control field.
struct FeedbackPolicy {
    std::function<Vec(int step, int particle, double t, const Vec& x, const EmpiricalMeasure& mu)> eval;

    static FeedbackPolicy zero(int dim_control);
    static FeedbackPolicy from_callback(std::function<Vec(double t, const Vec& x, const EmpiricalMeasure& mu)> cb);
    static FeedbackPolicy from_field(const std::vector<Mat>& field);
};

struct SimulateOptions {
    double blowup_cap = 1e8;
};

// Euler scheme with left-point coefficients and compensated atomic jumps:
//   X' = X + b dt + sigma dB + sum_atoms gamma(e_a) (dN_a - w_a dt),
// the cross-section's own empirical measure standing in for the law.
ParticleEnsemble simulate_forward(const ModelSpec& m, const JumpMeasure& jm,
                                  const EmpiricalMeasure& init, const FeedbackPolicy& policy,
                                  const TimeGrid& grid, const NoiseBundle& noise,
                                  const SimulateOptions& opt = {});

// First variation of the forward flow along direction eta, with coefficients
// frozen on the base ensemble and the base Brownian/jump increments reused.
// du_field supplies the control perturbation (empty means zero).
std::vector<Mat> simulate_linearized(const ModelSpec& m, const JumpMeasure& jm,
                                     const ParticleEnsemble& base, const std::vector<Mat>& du_field,
                                     const Mat& eta, const NoiseBundle& noise,
                                     const SimulateOptions& opt = {});

// Gaussian cloud helper used by fixtures and the CLI.
Mat gaussian_cloud(int particles, int dim, const Vec& mean, double stddev, uint64_t seed);

}  // namespace mfjump
