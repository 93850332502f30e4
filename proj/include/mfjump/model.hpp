#pragma once

#include <functional>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "mfjump/measure.hpp"

namespace mfjump {

// Slices of a third-order object: tensor[i] is the matrix block attached to
// output component i.
using Tensor3 = std::vector<Mat>;

using CoefArgs = std::function<Mat(double t, const Vec& x, const EmpiricalMeasure& mu, const Vec& v)>;
using CoefArgsT = std::function<Tensor3(double t, const Vec& x, const EmpiricalMeasure& mu, const Vec& v)>;
using ShapeFn = std::function<double(const Vec& y)>;

// Measure-derivative kernel K(t,x,mu,v)(y), stored as a sum of separable
// terms coef_r(t,x,mu,v) * shape_r(y). The separable form is what lets the
// mean-field driver sums over an N-particle cloud factor into O(N * rank)
// instead of O(N^2) work.
struct Kernel {
    struct Term {
        CoefArgs coef;   // rows x cols
        ShapeFn shape;
    };
    std::vector<Term> terms;

    bool empty() const { return terms.empty(); }
    Mat eval(double t, const Vec& x, const EmpiricalMeasure& mu, const Vec& v, const Vec& y) const;
};

// Tensor-valued kernel (one matrix block per output component).
struct KernelT {
    struct Term {
        CoefArgsT coef;
        ShapeFn shape;
    };
    std::vector<Term> terms;

    bool empty() const { return terms.empty(); }
    Tensor3 eval(double t, const Vec& x, const EmpiricalMeasure& mu, const Vec& v, const Vec& y) const;
};

// Two-point kernel K(t,x,mu,v)(y,y') = sum coef_r * shape_r(y) * shape2_r(y').
struct Kernel2 {
    struct Term {
        CoefArgs coef;
        ShapeFn shape;
        ShapeFn shape2;
    };
    std::vector<Term> terms;

    bool empty() const { return terms.empty(); }
    Mat eval(double t, const Vec& x, const EmpiricalMeasure& mu, const Vec& v, const Vec& y, const Vec& yp) const;
};

struct KernelT2 {
    struct Term {
        CoefArgsT coef;
        ShapeFn shape;
        ShapeFn shape2;
    };
    std::vector<Term> terms;

    bool empty() const { return terms.empty(); }
    Tensor3 eval(double t, const Vec& x, const EmpiricalMeasure& mu, const Vec& v, const Vec& y, const Vec& yp) const;
};

// Structural constants entering the closed-form certificates. User-supplied,
// auditable inputs; see estimate_constants for the empirical cross-check.
struct AssumptionConstants {
    double L = 1.0;
    double L0 = 0.0, L1 = 0.0, L2 = 0.0;
    double lambda0 = 1.0;   // uniform ellipticity of B_v B_v^T and A^j_v (A^j_v)^T
    double lambda_v = 1.0;  // convexity of the running cost in the control
    double lambda_x = 0.0;  // convexity in the state
    double lambda_m = 0.0;  // convexity in the measure
    int l = 0;              // number of controlled diffusion columns
};

struct ConditionReport {
    bool holds_i = false;
    bool holds_ii = false;
    double margin_i = 0.0;
    double margin_ii = 0.0;
    bool holds() const { return holds_i && holds_ii; }
};

// Strict-optimality certificate conditions on the structural constants:
//   (i)  2 lambda_v > L^2 L2 / lambda0
//   (ii) (2 lambda_v - L^2 L2/lambda0) (2 lambda_x + 2 lambda_m - 5(l+1) L^2 L0/lambda0)
//          > 4 (l+1) L^4 L1^2 / lambda0^2
ConditionReport check_sufficiency_condition(const AssumptionConstants& c);

// Coefficient of the quadratic optimality gap J(v) - J(u) >= c_gap * int ||v-u||^2 dt.
double sufficiency_gap_coefficient(const AssumptionConstants& c);

// Finite atomic intensity measure; the compensated Poisson integral over it
// is an exact finite sum.
struct JumpMeasure {
    struct Atom {
        Vec mark;
        double weight = 0.0;
    };
    std::vector<Atom> atoms;

    int count() const { return static_cast<int>(atoms.size()); }
    double total_intensity() const;
    void validate() const;  // positive weights, non-zero marks, finite mass
};

// Diffusion column driven by its own control sub-vector.
struct ControlledColumn {
    std::function<Vec(double, const Vec&, const EmpiricalMeasure&, const Vec&)> A;  // n-vector
    CoefArgs A_x;   // n x n
    CoefArgs A_v;   // n x d_j
    Kernel A_dnu;   // (i,a): d/dy_a of the measure derivative of A_i
    // second order (optional; required by the sensitivity/value modules)
    CoefArgsT A_xx;      // [i] n x n
    CoefArgsT A_xv;      // [i] n x d_j
    CoefArgsT A_vv;      // [i] d_j x d_j
    KernelT A_dnu_x;     // [i] (a, xb)
    KernelT A_dnu_v;     // [i] (a, vc)
    KernelT A_dnu_yy;    // [i] (a, a')
    KernelT2 A_dnu2;     // [i] (a, a'), shapes in (y, y')
};

// Affine control-free column sigma^j(t,x,m) = s0(t) + s1(t) x + s2(t) mean(m).
struct LinearColumn {
    std::function<Vec(double)> s0;
    std::function<Mat(double)> s1;
    std::function<Mat(double)> s2;
};

using DiffusionColumn = std::variant<ControlledColumn, LinearColumn>;

// Jump coefficient gamma(t,x,m,e) = g0(t,e) + g1(t,e) x + g2(t,e) mean(m);
// affine in (x, mean) and control-free by construction.
struct LinearJump {
    std::function<Vec(double, const Vec& e)> g0;
    std::function<Mat(double, const Vec& e)> g1;
    std::function<Mat(double, const Vec& e)> g2;
};

// One separable block f^j(t,x,m,v^j) of the running cost.
struct CostTerm {
    int block = 0;  // control block index j (0..n); blocks with d_j = 0 only allowed for j = 0
    std::function<double(double, const Vec&, const EmpiricalMeasure&, const Vec&)> f;
    std::function<Vec(double, const Vec&, const EmpiricalMeasure&, const Vec&)> f_x;
    std::function<Vec(double, const Vec&, const EmpiricalMeasure&, const Vec&)> f_v;  // d_j
    Kernel f_dnu;  // (a,1)
    // second order (optional)
    CoefArgs f_xx;     // n x n
    CoefArgs f_xv;     // n x d_j
    CoefArgs f_vv;     // d_j x d_j
    Kernel f_dnu_x;    // (a, xb)
    Kernel f_dnu_v;    // (a, vc)
    Kernel f_dnu_yy;   // (a, a')
    Kernel2 f_dnu2;    // (a, a')
};

struct TerminalCost {
    std::function<double(const Vec&, const EmpiricalMeasure&)> g;
    std::function<Vec(const Vec&, const EmpiricalMeasure&)> g_x;
    Kernel g_dnu;  // (a,1); evaluated with t=0, v empty
    // second order (optional)
    std::function<Mat(const Vec&, const EmpiricalMeasure&)> g_xx;
    Kernel g_dnu_x;
    Kernel g_dnu_yy;
    Kernel2 g_dnu2;
};

// Problem data: coefficients, their derivative callbacks and the structural
// constants. Immutable after construction; all callbacks must be pure.
struct ModelSpec {
    int dim_state = 1;
    int dim_control = 1;
    std::vector<int> control_split;  // d_0 .. d_n, sums to dim_control, d_0 >= 1

    // drift b(t,x,m,v) = B(t,x,m,v^0)
    std::function<Vec(double, const Vec&, const EmpiricalMeasure&, const Vec&)> B;
    CoefArgs B_x;   // n x n
    CoefArgs B_v;   // n x d_0
    Kernel B_dnu;   // (i,a)
    CoefArgsT B_xx;     // [i] n x n
    CoefArgsT B_xv;     // [i] n x d0
    CoefArgsT B_vv;     // [i] d0 x d0
    KernelT B_dnu_x;    // [i] (a, xb)
    KernelT B_dnu_v;    // [i] (a, vc)
    KernelT B_dnu_yy;   // [i] (a, a')
    KernelT2 B_dnu2;    // [i] (a, a')

    std::vector<DiffusionColumn> sigma;  // one per Brownian component
    LinearJump jump;

    std::vector<CostTerm> cost_terms;
    TerminalCost terminal;

    AssumptionConstants constants;

    // -- helpers -------------------------------------------------------------
    int n() const { return dim_state; }
    int d() const { return dim_control; }
    int d_of_block(int j) const { return control_split[static_cast<size_t>(j)]; }
    int block_offset(int j) const;           // start of v^j inside v
    Vec block_of(const Vec& v, int j) const; // extract v^j
    int controlled_columns() const;          // the count l
    bool sigma_control_free() const;         // every column linear
    bool has_second_order() const;
    void validate() const;

    // full drift/diffusion on the whole control vector
    Vec drift(double t, const Vec& x, const EmpiricalMeasure& mu, const Vec& v) const;
    Vec sigma_col(int j, double t, const Vec& x, const EmpiricalMeasure& mu, const Vec& v) const;
    Mat sigma_full(double t, const Vec& x, const EmpiricalMeasure& mu, const Vec& v) const;
    Vec gamma(double t, const Vec& x, const EmpiricalMeasure& mu, const Vec& e) const;
    double running_cost(double t, const Vec& x, const EmpiricalMeasure& mu, const Vec& v) const;
    Vec running_cost_x(double t, const Vec& x, const EmpiricalMeasure& mu, const Vec& v) const;
};

struct DerivativeViolation {
    std::string callback;
    int probe = 0;
    double error = 0.0;
    double tolerance = 0.0;
};

// Central finite-difference cross-check of every analytic derivative callback
// at random probe points. Measure derivatives are probed by displacing one
// particle of a size-M cloud and rescaling by M.
std::vector<DerivativeViolation> verify_derivative_consistency(const ModelSpec& m, int probes,
                                                               double h, double tol,
                                                               uint64_t seed = 13);

// Empirical Lipschitz/convexity constants sampled on a probe box; reported so
// a user-supplied AssumptionConstants bundle can be audited against them.
struct ConstantEstimate {
    double L = 0.0;        // growth/derivative bound seen
    double lambda0 = 0.0;  // smallest eigenvalue of B_v B_v^T (and A_v A_v^T) seen
    double lambda_v = 0.0; // strong convexity of f in v seen
};
ConstantEstimate estimate_constants(const ModelSpec& m, int probes, uint64_t seed = 29);

}  // namespace mfjump
