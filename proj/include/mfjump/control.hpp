#pragma once

#include "mfjump/adjoint.hpp"
#include "mfjump/model.hpp"

namespace mfjump {

struct MinimizerSettings {
    double newton_tol = 1e-10;
    int max_newton = 50;
    double damping = 1.0;  // halved on residual increase
    void validate() const;
};

// Stationary point of the control-block Lagrangian in v^0:
//   B_v(t,x,mu,v)^T p + f^0_v(t,x,mu,v) = 0,
// by damped Newton with a fixed-point fallback at rate lambda_v / L^2.
Vec phi0(const ModelSpec& m, double t, const Vec& x, const EmpiricalMeasure& mu, const Vec& p,
         const MinimizerSettings& s);

// Same for block j (d_j > 0): A^j_v^T q^j + f^j_v = 0.
Vec phij(const ModelSpec& m, int j, double t, const Vec& x, const EmpiricalMeasure& mu,
         const Vec& qj, const MinimizerSettings& s);

// Per-particle feedback control: concatenates phi0(P_i) and phij(Q_i^j) into
// the split control layout. P and Q are N x n and N x (n*n) slices.
Mat assemble_feedback(const ModelSpec& m, const JumpMeasure& jm, double t, const Mat& states,
                      const EmpiricalMeasure& mu, const Mat& P, const Mat& Q,
                      const MinimizerSettings& s);

// First-order-condition residual of a control field along an ensemble,
// normalized per particle by 1 + |p|; the admissibility monitor threshold is
// 1e-6 in this scale.
double optimality_residual(const ModelSpec& m, const ParticleEnsemble& ens,
                           const AdjointEnsemble& adj);

struct ConeMargins {
    double min_margin_P = 0.0;
    double min_margin_Q = 0.0;  // +inf when no controlled diffusion column exists
    double min_margin_u = 0.0;
    // scale of the bounds, for tolerance-relative slack: L^2/lambda0 * max(1+|Y|+|mu|_1+|u|)
    double scale = 0.0;
};

// Linear-growth envelope of the costates and controls:
//   |P|   <= L^2/lambda0 (1 + |Y| + |mu|_1 + |u^0|)
//   |Q^j| <= L^2/lambda0 (1 + |Y| + |mu|_1 + |u^j|)    (d_j > 0)
//   |u^0| <= L/(2 lambda_v) (1 + |P| + |Y| + |mu|_1)
//   |u^j| <= L/(2 lambda_v) (1 + |Q^j| + |Y| + |mu|_1)
// margins are bound minus value, minimized over particles and steps.
ConeMargins cone_margins(const ModelSpec& m, const ParticleEnsemble& ens, const AdjointEnsemble& adj);

}  // namespace mfjump
