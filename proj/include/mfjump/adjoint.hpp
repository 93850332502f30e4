#pragma once

#include "mfjump/model.hpp"
#include "mfjump/regression.hpp"
#include "mfjump/simulate.hpp"

namespace mfjump {

// Costate arrays along a forward ensemble. Per step k and particle i:
//   P[k].row(i)                      n-vector
//   Q[k].row(i).segment(j*n, n)      column j of the Brownian costate
//   R[k].row(i).segment(a*n, n)      jump costate at atom a
struct AdjointEnsemble {
    std::vector<Mat> P;  // steps+1 entries, N x n
    std::vector<Mat> Q;  // steps entries, N x (n*n)
    std::vector<Mat> R;  // steps entries, N x (atoms*n)

    int particles() const { return P.empty() ? 0 : static_cast<int>(P[0].rows()); }
    int dim() const { return P.empty() ? 0 : static_cast<int>(P[0].cols()); }
};

// Terminal costate: per particle i,
//   g_x(Y_T^i, mu_T) + (1/N) sum_k D_y (dg/dnu)(Y_T^k, mu_T)(Y_T^i);
// the average runs over the first argument with the derivative point held at
// particle i (the expectation-swap convention used throughout the drivers).
Mat terminal_condition(const ModelSpec& m, const Mat& final_states);

// Generator part of the backward equation for all particles at one step.
// P here should be the time-k conditional-expectation estimate.
Mat adjoint_driver(const ModelSpec& m, const JumpMeasure& jm, double t, const Mat& states,
                   const EmpiricalMeasure& mu, const Mat& controls, const Mat& P, const Mat& Q,
                   const Mat& R);

// Same value computed by the plain O(N^2) double sum over the kernel
// evaluations; used to cross-check the factorized path.
Mat adjoint_driver_dense(const ModelSpec& m, const JumpMeasure& jm, double t, const Mat& states,
                         const EmpiricalMeasure& mu, const Mat& controls, const Mat& P,
                         const Mat& Q, const Mat& R);

// Backward regression sweep: at each step the Brownian and jump costates are
// estimated from the centered martingale increments
//   Q^j ~ E[(P' - E[P'|Y]) dB^j | Y] / dt,
//   R_a ~ E[(P' - E[P'|Y]) (dN_a - w_a dt) | Y] / (w_a dt),
// with conditional expectations realized by one shared polynomial ridge fit,
// then P steps back explicitly through the driver.
AdjointEnsemble solve_adjoint(const ModelSpec& m, const JumpMeasure& jm, const ParticleEnsemble& ens,
                              const NoiseBundle& noise, const RegressionConfig& cfg);

// Energy of the costate triple relative to the data size:
//   [ E sup|P|^2 + E int (|Q|^2 + sum_a w_a |R_a|^2) dt ] / E[1 + |xi|^2 + int |u|^2 dt].
double adjoint_energy_ratio(const ParticleEnsemble& ens, const AdjointEnsemble& adj,
                            const JumpMeasure& jm);

}  // namespace mfjump
