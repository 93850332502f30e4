#include "mfjump/model.hpp"

#include <cmath>

#include "mfjump/errors.hpp"
#include "mfjump/rng.hpp"

namespace mfjump {

Mat Kernel::eval(double t, const Vec& x, const EmpiricalMeasure& mu, const Vec& v, const Vec& y) const {
    Mat acc;
    for (const auto& term : terms) {
        Mat c = term.coef(t, x, mu, v) * term.shape(y);
        if (acc.size() == 0)
            acc = std::move(c);
        else
            acc += c;
    }
    return acc;
}

Tensor3 KernelT::eval(double t, const Vec& x, const EmpiricalMeasure& mu, const Vec& v, const Vec& y) const {
    Tensor3 acc;
    for (const auto& term : terms) {
        Tensor3 c = term.coef(t, x, mu, v);
        double s = term.shape(y);
        if (acc.empty()) {
            acc = std::move(c);
            for (auto& m : acc) m *= s;
        } else {
            for (size_t i = 0; i < acc.size(); ++i) acc[i] += c[i] * s;
        }
    }
    return acc;
}

Mat Kernel2::eval(double t, const Vec& x, const EmpiricalMeasure& mu, const Vec& v, const Vec& y, const Vec& yp) const {
    Mat acc;
    for (const auto& term : terms) {
        Mat c = term.coef(t, x, mu, v) * (term.shape(y) * term.shape2(yp));
        if (acc.size() == 0)
            acc = std::move(c);
        else
            acc += c;
    }
    return acc;
}

Tensor3 KernelT2::eval(double t, const Vec& x, const EmpiricalMeasure& mu, const Vec& v, const Vec& y, const Vec& yp) const {
    Tensor3 acc;
    for (const auto& term : terms) {
        Tensor3 c = term.coef(t, x, mu, v);
        double s = term.shape(y) * term.shape2(yp);
        if (acc.empty()) {
            acc = std::move(c);
            for (auto& m : acc) m *= s;
        } else {
            for (size_t i = 0; i < acc.size(); ++i) acc[i] += c[i] * s;
        }
    }
    return acc;
}

ConditionReport check_sufficiency_condition(const AssumptionConstants& c) {
    ConditionReport r;
    const double L2 = c.L * c.L;
    const double lhs_i = 2.0 * c.lambda_v;
    const double rhs_i = L2 * c.L2 / c.lambda0;
    r.margin_i = lhs_i - rhs_i;
    r.holds_i = r.margin_i > 0.0;

    const double factor = 2.0 * c.lambda_x + 2.0 * c.lambda_m -
                          5.0 * (c.l + 1) * L2 * c.L0 / c.lambda0;
    const double lhs_ii = r.margin_i * factor;
    const double rhs_ii = 4.0 * (c.l + 1) * L2 * L2 * c.L1 * c.L1 / (c.lambda0 * c.lambda0);
    r.margin_ii = lhs_ii - rhs_ii;
    r.holds_ii = r.margin_ii > 0.0;
    return r;
}

double sufficiency_gap_coefficient(const AssumptionConstants& c) {
    const double L2 = c.L * c.L;
    const double denom = 2.0 * c.lambda_x * c.lambda0 + 2.0 * c.lambda_m * c.lambda0 -
                         5.0 * (c.l + 1) * L2 * c.L0;
    double cross = 0.0;
    if (c.L1 != 0.0) {
        if (denom <= 0.0)
            throw DomainError("sufficiency_gap_coefficient: convexity deficit, certificate unavailable");
        cross = 2.0 * (c.l + 1) * L2 * L2 * c.L1 * c.L1 / (c.lambda0 * denom);
    }
    return c.lambda_v - L2 * c.L2 / (2.0 * c.lambda0) - cross;
}

double JumpMeasure::total_intensity() const {
    double s = 0.0;
    for (const auto& a : atoms) s += a.weight;
    return s;
}

void JumpMeasure::validate() const {
    for (const auto& a : atoms) {
        if (!(a.weight > 0.0) || !std::isfinite(a.weight))
            throw DomainError("JumpMeasure: atom weight must be positive and finite");
        if (a.mark.size() == 0 || a.mark.norm() == 0.0)
            throw DomainError("JumpMeasure: atom mark must be a non-zero vector");
    }
    if (!std::isfinite(total_intensity()))
        throw DomainError("JumpMeasure: intensity must be finite");
}

int ModelSpec::block_offset(int j) const {
    int off = 0;
    for (int k = 0; k < j; ++k) off += control_split[static_cast<size_t>(k)];
    return off;
}

Vec ModelSpec::block_of(const Vec& v, int j) const {
    return v.segment(block_offset(j), d_of_block(j));
}

int ModelSpec::controlled_columns() const {
    int l = 0;
    for (size_t j = 1; j < control_split.size(); ++j)
        if (control_split[j] > 0) ++l;
    return l;
}

bool ModelSpec::sigma_control_free() const {
    for (const auto& col : sigma)
        if (std::holds_alternative<ControlledColumn>(col)) return false;
    return true;
}

bool ModelSpec::has_second_order() const {
    if (!B_xx || !B_xv || !B_vv) return false;
    for (const auto& col : sigma) {
        if (const auto* cc = std::get_if<ControlledColumn>(&col))
            if (!cc->A_xx || !cc->A_xv || !cc->A_vv) return false;
    }
    for (const auto& term : cost_terms)
        if (!term.f_xx || !term.f_vv) return false;
    return static_cast<bool>(terminal.g_xx);
}

void ModelSpec::validate() const {
    if (dim_state < 1 || dim_control < 1) throw DomainError("ModelSpec: dimensions must be positive");
    if (control_split.empty() || control_split[0] < 1)
        throw DomainError("ModelSpec: control split needs d_0 >= 1");
    if (static_cast<int>(control_split.size()) != dim_state + 1)
        throw DomainError("ModelSpec: control split must list d_0..d_n");
    int total = 0;
    for (int dj : control_split) {
        if (dj < 0) throw DomainError("ModelSpec: negative control block");
        total += dj;
    }
    if (total != dim_control) throw DomainError("ModelSpec: control split must sum to dim_control");
    if (static_cast<int>(sigma.size()) != dim_state)
        throw DomainError("ModelSpec: need one diffusion column per state dimension");
    for (int j = 1; j <= dim_state; ++j) {
        bool controlled = std::holds_alternative<ControlledColumn>(sigma[static_cast<size_t>(j - 1)]);
        if (controlled != (control_split[static_cast<size_t>(j)] > 0))
            throw DomainError("ModelSpec: diffusion column kind must match the control split");
    }
    for (const auto& term : cost_terms) {
        if (term.block < 0 || term.block > dim_state)
            throw DomainError("ModelSpec: cost term block out of range");
        if (term.block > 0 && control_split[static_cast<size_t>(term.block)] == 0)
            throw DomainError("ModelSpec: cost term attached to an empty control block");
    }
    if (constants.l != controlled_columns())
        throw DomainError("ModelSpec: constants.l disagrees with the control split");
    if (!(constants.lambda0 > 0.0) || !(constants.lambda_v > 0.0))
        throw DomainError("ModelSpec: lambda0 and lambda_v must be positive");
    if (!(constants.lambda_x + constants.lambda_m > 0.0))
        throw DomainError("ModelSpec: lambda_x + lambda_m must be positive");
}

Vec ModelSpec::drift(double t, const Vec& x, const EmpiricalMeasure& mu, const Vec& v) const {
    return B(t, x, mu, block_of(v, 0));
}

Vec ModelSpec::sigma_col(int j, double t, const Vec& x, const EmpiricalMeasure& mu, const Vec& v) const {
    const auto& col = sigma[static_cast<size_t>(j)];
    if (const auto* lin = std::get_if<LinearColumn>(&col))
        return lin->s0(t) + lin->s1(t) * x + lin->s2(t) * mu.mean();
    const auto& cc = std::get<ControlledColumn>(col);
    return cc.A(t, x, mu, block_of(v, j + 1));
}

Mat ModelSpec::sigma_full(double t, const Vec& x, const EmpiricalMeasure& mu, const Vec& v) const {
    Mat s(dim_state, dim_state);
    for (int j = 0; j < dim_state; ++j) s.col(j) = sigma_col(j, t, x, mu, v);
    return s;
}

Vec ModelSpec::gamma(double t, const Vec& x, const EmpiricalMeasure& mu, const Vec& e) const {
    return jump.g0(t, e) + jump.g1(t, e) * x + jump.g2(t, e) * mu.mean();
}

double ModelSpec::running_cost(double t, const Vec& x, const EmpiricalMeasure& mu, const Vec& v) const {
    double acc = 0.0;
    for (const auto& term : cost_terms) acc += term.f(t, x, mu, block_of(v, term.block));
    return acc;
}

Vec ModelSpec::running_cost_x(double t, const Vec& x, const EmpiricalMeasure& mu, const Vec& v) const {
    Vec acc = Vec::Zero(dim_state);
    for (const auto& term : cost_terms) acc += term.f_x(t, x, mu, block_of(v, term.block));
    return acc;
}

// ---------------------------------------------------------------------------
// finite-difference consistency checks

namespace {

struct ProbePoint {
    double t;
    Vec x;
    Mat cloud;
    Vec v;
};

ProbePoint random_probe(const ModelSpec& m, CounterRng& rng, int cloud_size) {
    ProbePoint p;
    p.t = rng.next_uniform();
    p.x = Vec::NullaryExpr(m.n(), [&](Eigen::Index) { return rng.next_normal(); });
    p.cloud = Mat::NullaryExpr(cloud_size, m.n(), [&](Eigen::Index, Eigen::Index) { return rng.next_normal(); });
    p.v = Vec::NullaryExpr(m.d(), [&](Eigen::Index) { return rng.next_normal(); });
    return p;
}

using ScalarFn = std::function<double(const ProbePoint&)>;

double central_diff(const ScalarFn& f, ProbePoint p, double* slot, double h) {
    double orig = *slot;
    *slot = orig + h;
    double up = f(p);
    *slot = orig - h;
    double dn = f(p);
    *slot = orig;
    return (up - dn) / (2.0 * h);
}

}  // namespace

std::vector<DerivativeViolation> verify_derivative_consistency(const ModelSpec& m, int probes,
                                                               double h, double tol,
                                                               uint64_t seed) {
    if (probes < 1 || !(h > 0.0) || !(tol > 0.0))
        throw DomainError("verify_derivative_consistency: probes >= 1, h > 0, tol > 0 required");
    std::vector<DerivativeViolation> out;
    const int n = m.n();
    const int d0 = m.d_of_block(0);
    const int M = 16;  // probe cloud size

    auto record = [&](const std::string& name, int probe, double analytic, double numeric) {
        double err = std::abs(analytic - numeric);
        double scale = 1.0 + std::abs(numeric);
        if (err > tol * scale) out.push_back({name, probe, err, tol * scale});
    };

    for (int pr = 0; pr < probes; ++pr) {
        CounterRng rng(seed, static_cast<uint64_t>(StreamTag::probe), static_cast<uint64_t>(pr));
        ProbePoint p = random_probe(m, rng, M);
        EmpiricalMeasure mu(p.cloud);
        const Vec v0 = m.block_of(p.v, 0);

        auto check_jacobian = [&](const std::string& name, const Vec& base_out, const Mat& jac,
                                  Vec& arg, const std::function<Vec()>& eval) {
            for (int c = 0; c < arg.size(); ++c) {
                double orig = arg(c);
                arg(c) = orig + h;
                Vec up = eval();
                arg(c) = orig - h;
                Vec dn = eval();
                arg(c) = orig;
                for (int r = 0; r < base_out.size(); ++r)
                    record(name, pr, jac(r, c), (up(r) - dn(r)) / (2.0 * h));
            }
        };

        // drift first derivatives
        try {
            Vec bval = m.B(p.t, p.x, mu, v0);
            Mat bx = m.B_x(p.t, p.x, mu, v0);
            Vec xcopy = p.x;
            check_jacobian("drift_dx", bval, bx, xcopy,
                           [&]() { return m.B(p.t, xcopy, mu, v0); });
            Mat bv = m.B_v(p.t, p.x, mu, v0);
            Vec vcopy = v0;
            check_jacobian("drift_dv", bval, bv, vcopy,
                           [&]() { return m.B(p.t, p.x, mu, vcopy); });

            // measure derivative: displace one cloud particle, scale by M
            if (!m.B_dnu.empty()) {
                int target = static_cast<int>(rng.next_u64() % M);
                Vec y = p.cloud.row(target).transpose();
                Mat dnu = m.B_dnu.eval(p.t, p.x, mu, v0, y);
                for (int a = 0; a < n; ++a) {
                    Mat up_cloud = p.cloud, dn_cloud = p.cloud;
                    up_cloud(target, a) += h;
                    dn_cloud(target, a) -= h;
                    Vec up = m.B(p.t, p.x, EmpiricalMeasure(up_cloud), v0);
                    Vec dn = m.B(p.t, p.x, EmpiricalMeasure(dn_cloud), v0);
                    for (int i = 0; i < n; ++i)
                        record("drift_dnu", pr, dnu(i, a), M * (up(i) - dn(i)) / (2.0 * h));
                }
            }

            // drift second derivatives, when present
            if (m.B_xx) {
                Tensor3 bxx = m.B_xx(p.t, p.x, mu, v0);
                for (int i = 0; i < n; ++i)
                    for (int a = 0; a < n; ++a)
                        for (int b = 0; b < n; ++b) {
                            ScalarFn fn = [&, i, a](const ProbePoint& q) {
                                return m.B_x(q.t, q.x, mu, m.block_of(q.v, 0))(i, a);
                            };
                            ProbePoint q = p;
                            record("drift_dxx", pr, bxx[static_cast<size_t>(i)](a, b),
                                   central_diff(fn, q, &q.x(b), h));
                        }
            }
            if (m.B_vv) {
                Tensor3 bvv = m.B_vv(p.t, p.x, mu, v0);
                for (int i = 0; i < n; ++i)
                    for (int a = 0; a < d0; ++a)
                        for (int b = 0; b < d0; ++b) {
                            ScalarFn fn = [&, i, a](const ProbePoint& q) {
                                return m.B_v(q.t, q.x, mu, m.block_of(q.v, 0))(i, a);
                            };
                            ProbePoint q = p;
                            record("drift_dvv", pr, bvv[static_cast<size_t>(i)](a, b),
                                   central_diff(fn, q, &q.v(m.block_offset(0) + b), h));
                        }
            }
        } catch (const std::exception& e) {
            throw CallbackFailure(std::string("drift callback failed: ") + e.what());
        }

        // controlled diffusion columns
        for (int j = 0; j < n; ++j) {
            const auto* cc = std::get_if<ControlledColumn>(&m.sigma[static_cast<size_t>(j)]);
            if (!cc) continue;
            Vec vj = m.block_of(p.v, j + 1);
            Vec aval = cc->A(p.t, p.x, mu, vj);
            Mat ax = cc->A_x(p.t, p.x, mu, vj);
            Vec xcopy = p.x;
            check_jacobian("sigma" + std::to_string(j + 1) + "_dx", aval, ax, xcopy,
                           [&]() { return cc->A(p.t, xcopy, mu, vj); });
            Mat av = cc->A_v(p.t, p.x, mu, vj);
            Vec vcopy = vj;
            check_jacobian("sigma" + std::to_string(j + 1) + "_dv", aval, av, vcopy,
                           [&]() { return cc->A(p.t, p.x, mu, vcopy); });
        }

        // running cost terms
        for (size_t ti = 0; ti < m.cost_terms.size(); ++ti) {
            const auto& term = m.cost_terms[ti];
            Vec vj = m.block_of(p.v, term.block);
            std::string base = "cost" + std::to_string(ti);
            Vec fx = term.f_x(p.t, p.x, mu, vj);
            for (int a = 0; a < n; ++a) {
                Vec xu = p.x, xd = p.x;
                xu(a) += h;
                xd(a) -= h;
                record(base + "_dx", pr, fx(a),
                       (term.f(p.t, xu, mu, vj) - term.f(p.t, xd, mu, vj)) / (2.0 * h));
            }
            Vec fv = term.f_v(p.t, p.x, mu, vj);
            for (int a = 0; a < vj.size(); ++a) {
                Vec vu = vj, vd = vj;
                vu(a) += h;
                vd(a) -= h;
                record(base + "_dv", pr, fv(a),
                       (term.f(p.t, p.x, mu, vu) - term.f(p.t, p.x, mu, vd)) / (2.0 * h));
            }
            if (!term.f_dnu.empty()) {
                int target = static_cast<int>(rng.next_u64() % M);
                Vec y = p.cloud.row(target).transpose();
                Mat dnu = term.f_dnu.eval(p.t, p.x, mu, vj, y);
                for (int a = 0; a < n; ++a) {
                    Mat up_cloud = p.cloud, dn_cloud = p.cloud;
                    up_cloud(target, a) += h;
                    dn_cloud(target, a) -= h;
                    double up = term.f(p.t, p.x, EmpiricalMeasure(up_cloud), vj);
                    double dn = term.f(p.t, p.x, EmpiricalMeasure(dn_cloud), vj);
                    record(base + "_dnu", pr, dnu(a, 0), M * (up - dn) / (2.0 * h));
                }
            }
        }

        // terminal cost
        {
            Vec gx = m.terminal.g_x(p.x, mu);
            for (int a = 0; a < n; ++a) {
                Vec xu = p.x, xd = p.x;
                xu(a) += h;
                xd(a) -= h;
                record("terminal_dx", pr, gx(a),
                       (m.terminal.g(xu, mu) - m.terminal.g(xd, mu)) / (2.0 * h));
            }
            if (!m.terminal.g_dnu.empty()) {
                Vec empty(0);
                int target = static_cast<int>(rng.next_u64() % M);
                Vec y = p.cloud.row(target).transpose();
                Mat dnu = m.terminal.g_dnu.eval(0.0, p.x, mu, empty, y);
                for (int a = 0; a < n; ++a) {
                    Mat up_cloud = p.cloud, dn_cloud = p.cloud;
                    up_cloud(target, a) += h;
                    dn_cloud(target, a) -= h;
                    double up = m.terminal.g(p.x, EmpiricalMeasure(up_cloud));
                    double dn = m.terminal.g(p.x, EmpiricalMeasure(dn_cloud));
                    record("terminal_dnu", pr, dnu(a, 0), M * (up - dn) / (2.0 * h));
                }
            }
        }
    }
    return out;
}

ConstantEstimate estimate_constants(const ModelSpec& m, int probes, uint64_t seed) {
    ConstantEstimate est;
    est.lambda0 = std::numeric_limits<double>::infinity();
    est.lambda_v = std::numeric_limits<double>::infinity();
    for (int pr = 0; pr < probes; ++pr) {
        CounterRng rng(seed, static_cast<uint64_t>(StreamTag::probe), static_cast<uint64_t>(pr), 77);
        ProbePoint p = random_probe(m, rng, 16);
        EmpiricalMeasure mu(p.cloud);
        Vec v0 = m.block_of(p.v, 0);
        Mat bx = m.B_x(p.t, p.x, mu, v0);
        Mat bv = m.B_v(p.t, p.x, mu, v0);
        est.L = std::max({est.L, bx.norm(), bv.norm()});
        Eigen::SelfAdjointEigenSolver<Mat> es(bv * bv.transpose());
        est.lambda0 = std::min(est.lambda0, es.eigenvalues().minCoeff());
        for (int j = 0; j < m.n(); ++j) {
            if (const auto* cc = std::get_if<ControlledColumn>(&m.sigma[static_cast<size_t>(j)])) {
                Mat av = cc->A_v(p.t, p.x, mu, m.block_of(p.v, j + 1));
                Eigen::SelfAdjointEigenSolver<Mat> es2(av * av.transpose());
                est.lambda0 = std::min(est.lambda0, es2.eigenvalues().minCoeff());
                est.L = std::max(est.L, av.norm());
            }
        }
        // strong convexity of f in v along a random secant
        Vec w = Vec::NullaryExpr(m.d(), [&](Eigen::Index) { return rng.next_normal(); });
        w /= w.norm();
        double step = 0.5;
        Vec va = p.v, vb = p.v + step * w;
        double fa = m.running_cost(p.t, p.x, mu, va);
        double fb = m.running_cost(p.t, p.x, mu, vb);
        Vec grad = Vec::Zero(m.d());
        for (const auto& term : m.cost_terms) {
            Vec gv = term.f_v(p.t, p.x, mu, m.block_of(va, term.block));
            grad.segment(m.block_offset(term.block), m.d_of_block(term.block)) += gv;
        }
        double gap = fb - fa - grad.dot(vb - va);
        est.lambda_v = std::min(est.lambda_v, gap / (step * step));
    }
    return est;
}

}  // namespace mfjump
