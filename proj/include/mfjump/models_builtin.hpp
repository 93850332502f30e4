#pragma once

#include <optional>

#include "mfjump/lqoracle.hpp"
#include "mfjump/model.hpp"

namespace mfjump {

// Optional controlled diffusion block for the 1-D LQ family: the Brownian
// column becomes sigma0 + sigma1 x + sigma2 mean + cv * v^1 and the running
// cost gains rv/2 |v^1|^2, turning the control split into (1, 1).
struct ControlledSigma {
    double cv = 0.5;
    double rv = 1.0;
};

// Diagonal linear-quadratic model: one scalar LQSpec per state coordinate,
// marks read coordinate-wise (1-D marks for n = 1). Constants are filled with
// the natural mapping L0 = L1 = L2 = 0, lambda0 = min c^2, lambda_v = min r/2,
// lambda_x = min q/2, lambda_m = min qbar/2.
ModelSpec make_lq_model(const std::vector<LQSpec>& coords,
                        const std::optional<ControlledSigma>& ctrl = {});
ModelSpec make_lq_model(const LQSpec& spec, const std::optional<ControlledSigma>& ctrl = {});

// Piecewise shape used by the nonlinear drift example: |y| outside [-1, 1]
// and the matching quartic inside; C^2 everywhere.
double example_phi(double y);
double example_phi_d1(double y);
double example_phi_d2(double y);

// Nonlinear 1-D drift
//   B(t,x,m,v) = x + v + mean(m) + eps * x * exp(-x^2 - v^2 - (int phi dm)^2),
// with the full analytic derivative set. |eps| <= 1 enforced.
struct ExampleDriftFragment {
    std::function<Vec(double, const Vec&, const EmpiricalMeasure&, const Vec&)> B;
    CoefArgs B_x, B_v;
    Kernel B_dnu;
    CoefArgsT B_xx, B_xv, B_vv;
    KernelT B_dnu_x, B_dnu_v, B_dnu_yy;
    KernelT2 B_dnu2;
};
ExampleDriftFragment builtin_example_drift(double epsilon);

// Full 1-D model with the example drift and quadratic costs / affine noise
// taken from `base` (the base drift coefficients a, abar, c are fixed at 1 by
// the drift's shape and ignored).
ModelSpec make_example_model(double epsilon, const LQSpec& base);

JumpMeasure single_atom_measure(double mark, double weight);

}  // namespace mfjump
