#include "mfjump/models_builtin.hpp"

#include <cmath>

#include "mfjump/errors.hpp"

namespace mfjump {

namespace {

ShapeFn unit_shape() {
    return [](const Vec&) { return 1.0; };
}

Mat scalar_mat(double v) {
    Mat m(1, 1);
    m(0, 0) = v;
    return m;
}

}  // namespace

ModelSpec make_lq_model(const std::vector<LQSpec>& coords,
                        const std::optional<ControlledSigma>& ctrl) {
    const int n = static_cast<int>(coords.size());
    if (n < 1) throw DomainError("make_lq_model: need at least one coordinate");
    if (ctrl && n != 1) throw DomainError("make_lq_model: controlled diffusion only for n = 1");

    ModelSpec m;
    m.dim_state = n;
    m.dim_control = ctrl ? 2 : n;
    m.control_split.assign(static_cast<size_t>(n) + 1, 0);
    m.control_split[0] = ctrl ? 1 : n;
    if (ctrl) m.control_split[1] = 1;

    // drift B(t,x,mu,v0) = diag(a) x + diag(abar) mean + diag(c) v0
    Vec av(n), abarv(n), cv(n), qv(n), qbarv(n), rv(n), hv(n), hbarv(n);
    for (int i = 0; i < n; ++i) {
        av(i) = coords[static_cast<size_t>(i)].a;
        abarv(i) = coords[static_cast<size_t>(i)].abar;
        cv(i) = coords[static_cast<size_t>(i)].c;
        qv(i) = coords[static_cast<size_t>(i)].q;
        qbarv(i) = coords[static_cast<size_t>(i)].qbar;
        rv(i) = coords[static_cast<size_t>(i)].r;
        hv(i) = coords[static_cast<size_t>(i)].h;
        hbarv(i) = coords[static_cast<size_t>(i)].hbar;
    }
    m.B = [av, abarv, cv](double, const Vec& x, const EmpiricalMeasure& mu, const Vec& v0) {
        return Vec(av.cwiseProduct(x) + abarv.cwiseProduct(mu.mean()) + cv.cwiseProduct(v0));
    };
    m.B_x = [av, n](double, const Vec&, const EmpiricalMeasure&, const Vec&) {
        return Mat(av.asDiagonal());
        (void)n;
    };
    m.B_v = [cv, n](double, const Vec&, const EmpiricalMeasure&, const Vec&) {
        return Mat(cv.asDiagonal());
        (void)n;
    };
    m.B_dnu.terms.push_back({[abarv](double, const Vec&, const EmpiricalMeasure&, const Vec&) {
                                 return Mat(abarv.asDiagonal());
                             },
                             unit_shape()});
    auto zero_t3 = [n](int rows, int cols) {
        return [n, rows, cols](double, const Vec&, const EmpiricalMeasure&, const Vec&) {
            return Tensor3(static_cast<size_t>(n), Mat::Zero(rows, cols));
        };
    };
    const int d0 = m.control_split[0];
    m.B_xx = zero_t3(n, n);
    m.B_xv = zero_t3(n, d0);
    m.B_vv = zero_t3(d0, d0);

    // diffusion columns
    for (int j = 0; j < n; ++j) {
        const LQSpec c = coords[static_cast<size_t>(j)];
        if (ctrl && j == 0) {
            ControlledColumn cc;
            double c1 = ctrl->cv;
            cc.A = [c, c1](double, const Vec& x, const EmpiricalMeasure& mu, const Vec& v1) {
                Vec out(1);
                out(0) = c.sigma0 + c.sigma1 * x(0) + c.sigma2 * mu.mean()(0) + c1 * v1(0);
                return out;
            };
            cc.A_x = [c](double, const Vec&, const EmpiricalMeasure&, const Vec&) {
                return scalar_mat(c.sigma1);
            };
            cc.A_v = [c1](double, const Vec&, const EmpiricalMeasure&, const Vec&) {
                return scalar_mat(c1);
            };
            cc.A_dnu.terms.push_back({[c](double, const Vec&, const EmpiricalMeasure&, const Vec&) {
                                          return scalar_mat(c.sigma2);
                                      },
                                      unit_shape()});
            auto zero1 = [](double, const Vec&, const EmpiricalMeasure&, const Vec&) {
                return Tensor3(1, Mat::Zero(1, 1));
            };
            cc.A_xx = zero1;
            cc.A_xv = zero1;
            cc.A_vv = zero1;
            m.sigma.push_back(std::move(cc));
        } else {
            LinearColumn lin;
            int jj = j;
            lin.s0 = [c, jj, n](double) {
                Vec out = Vec::Zero(n);
                out(jj) = c.sigma0;
                return out;
            };
            lin.s1 = [c, jj, n](double) {
                Mat out = Mat::Zero(n, n);
                out(jj, jj) = c.sigma1;
                return out;
            };
            lin.s2 = [c, jj, n](double) {
                Mat out = Mat::Zero(n, n);
                out(jj, jj) = c.sigma2;
                return out;
            };
            m.sigma.push_back(std::move(lin));
        }
    }

    // jump coefficients proportional to the mark, coordinate-wise
    Vec j0(n), j1(n), j2(n);
    for (int i = 0; i < n; ++i) {
        j0(i) = coords[static_cast<size_t>(i)].jump0;
        j1(i) = coords[static_cast<size_t>(i)].jump1;
        j2(i) = coords[static_cast<size_t>(i)].jump2;
    }
    m.jump.g0 = [j0](double, const Vec& e) { return Vec(j0.cwiseProduct(e)); };
    m.jump.g1 = [j1](double, const Vec& e) { return Mat((j1.cwiseProduct(e)).asDiagonal()); };
    m.jump.g2 = [j2](double, const Vec& e) { return Mat((j2.cwiseProduct(e)).asDiagonal()); };

    // running cost block 0: sum_i q_i/2 x_i^2 + qbar_i/2 mean_i^2 + r_i/2 v_i^2
    CostTerm f0;
    f0.block = 0;
    f0.f = [qv, qbarv, rv](double, const Vec& x, const EmpiricalMeasure& mu, const Vec& v0) {
        Vec mean = mu.mean();
        double acc = 0.0;
        for (int i = 0; i < x.size(); ++i)
            acc += 0.5 * qv(i) * x(i) * x(i) + 0.5 * qbarv(i) * mean(i) * mean(i);
        for (int i = 0; i < v0.size(); ++i) acc += 0.5 * rv(i) * v0(i) * v0(i);
        return acc;
    };
    f0.f_x = [qv](double, const Vec& x, const EmpiricalMeasure&, const Vec&) {
        return Vec(qv.cwiseProduct(x));
    };
    f0.f_v = [rv, d0](double, const Vec&, const EmpiricalMeasure&, const Vec& v0) {
        Vec out(d0);
        for (int i = 0; i < d0; ++i) out(i) = rv(i) * v0(i);
        return out;
    };
    // d(mean_i^2/2)/dnu (y) = mean_i y_i, so the y-gradient is qbar_i mean_i
    f0.f_dnu.terms.push_back({[qbarv](double, const Vec&, const EmpiricalMeasure& mu, const Vec&) {
                                  return Mat(qbarv.cwiseProduct(mu.mean()));
                              },
                              unit_shape()});
    f0.f_xx = [qv](double, const Vec&, const EmpiricalMeasure&, const Vec&) {
        return Mat(qv.asDiagonal());
    };
    f0.f_xv = [n, d0](double, const Vec&, const EmpiricalMeasure&, const Vec&) {
        return Mat::Zero(n, d0);
    };
    f0.f_vv = [rv, d0](double, const Vec&, const EmpiricalMeasure&, const Vec&) {
        Mat out = Mat::Zero(d0, d0);
        for (int i = 0; i < d0; ++i) out(i, i) = rv(i);
        return out;
    };
    f0.f_dnu_x.terms.push_back({[n](double, const Vec&, const EmpiricalMeasure&, const Vec&) {
                                    return Mat::Zero(n, n);
                                },
                                unit_shape()});
    f0.f_dnu_v.terms.push_back({[n, d0](double, const Vec&, const EmpiricalMeasure&, const Vec&) {
                                    return Mat::Zero(n, d0);
                                },
                                unit_shape()});
    f0.f_dnu_yy.terms.push_back({[n](double, const Vec&, const EmpiricalMeasure&, const Vec&) {
                                     return Mat::Zero(n, n);
                                 },
                                 unit_shape()});
    // d^2(mean_i^2/2)/dnu^2 (y,y') = y_i y'_i, mixed derivative qbar_i
    f0.f_dnu2.terms.push_back({[qbarv](double, const Vec&, const EmpiricalMeasure&, const Vec&) {
                                   return Mat(qbarv.asDiagonal());
                               },
                               unit_shape(), unit_shape()});
    m.cost_terms.push_back(std::move(f0));

    if (ctrl) {
        CostTerm f1;
        f1.block = 1;
        double r1 = ctrl->rv;
        f1.f = [r1](double, const Vec&, const EmpiricalMeasure&, const Vec& v1) {
            return 0.5 * r1 * v1.squaredNorm();
        };
        f1.f_x = [n](double, const Vec&, const EmpiricalMeasure&, const Vec&) { return Vec::Zero(n); };
        f1.f_v = [r1](double, const Vec&, const EmpiricalMeasure&, const Vec& v1) {
            return Vec(r1 * v1);
        };
        f1.f_dnu.terms.push_back({[n](double, const Vec&, const EmpiricalMeasure&, const Vec&) {
                                      return Mat::Zero(n, 1);
                                  },
                                  unit_shape()});
        f1.f_xx = [n](double, const Vec&, const EmpiricalMeasure&, const Vec&) {
            return Mat::Zero(n, n);
        };
        f1.f_xv = [n](double, const Vec&, const EmpiricalMeasure&, const Vec&) {
            return Mat::Zero(n, 1);
        };
        f1.f_vv = [r1](double, const Vec&, const EmpiricalMeasure&, const Vec&) {
            return scalar_mat(r1);
        };
        m.cost_terms.push_back(std::move(f1));
    }

    // terminal g = sum_i h_i/2 x_i^2 + hbar_i/2 mean_i^2
    m.terminal.g = [hv, hbarv](const Vec& x, const EmpiricalMeasure& mu) {
        Vec mean = mu.mean();
        double acc = 0.0;
        for (int i = 0; i < x.size(); ++i)
            acc += 0.5 * hv(i) * x(i) * x(i) + 0.5 * hbarv(i) * mean(i) * mean(i);
        return acc;
    };
    m.terminal.g_x = [hv](const Vec& x, const EmpiricalMeasure&) { return Vec(hv.cwiseProduct(x)); };
    m.terminal.g_dnu.terms.push_back({[hbarv](double, const Vec&, const EmpiricalMeasure& mu, const Vec&) {
                                          return Mat(hbarv.cwiseProduct(mu.mean()));
                                      },
                                      unit_shape()});
    m.terminal.g_xx = [hv](const Vec&, const EmpiricalMeasure&) { return Mat(hv.asDiagonal()); };
    m.terminal.g_dnu_x.terms.push_back({[n](double, const Vec&, const EmpiricalMeasure&, const Vec&) {
                                            return Mat::Zero(n, n);
                                        },
                                        unit_shape()});
    m.terminal.g_dnu_yy.terms.push_back({[n](double, const Vec&, const EmpiricalMeasure&, const Vec&) {
                                             return Mat::Zero(n, n);
                                         },
                                         unit_shape()});
    m.terminal.g_dnu2.terms.push_back({[hbarv](double, const Vec&, const EmpiricalMeasure&, const Vec&) {
                                           return Mat(hbarv.asDiagonal());
                                       },
                                       unit_shape(), unit_shape()});

    // structural constants for the certificates
    AssumptionConstants& cst = m.constants;
    cst.L0 = cst.L1 = cst.L2 = 0.0;
    double L = 1.0;
    double lam0 = std::numeric_limits<double>::infinity();
    double lamv = std::numeric_limits<double>::infinity();
    double lamx = std::numeric_limits<double>::infinity();
    double lamm = std::numeric_limits<double>::infinity();
    for (const auto& c : coords) {
        L = std::max({L, std::abs(c.a), std::abs(c.abar), std::abs(c.c), std::abs(c.sigma0),
                      std::abs(c.sigma1), std::abs(c.sigma2), std::abs(c.jump0), std::abs(c.jump1),
                      std::abs(c.jump2), c.q + std::abs(c.qbar), c.r, c.h + std::abs(c.hbar)});
        lam0 = std::min(lam0, c.c * c.c);
        lamv = std::min(lamv, c.r / 2.0);
        lamx = std::min(lamx, c.q / 2.0);
        lamm = std::min(lamm, c.qbar / 2.0);
    }
    if (ctrl) {
        L = std::max({L, std::abs(ctrl->cv), ctrl->rv});
        lam0 = std::min(lam0, ctrl->cv * ctrl->cv);
        lamv = std::min(lamv, ctrl->rv / 2.0);
    }
    cst.L = L;
    cst.lambda0 = lam0;
    cst.lambda_v = lamv;
    cst.lambda_x = lamx;
    cst.lambda_m = lamm;
    cst.l = ctrl ? 1 : 0;

    m.validate();
    return m;
}

ModelSpec make_lq_model(const LQSpec& spec, const std::optional<ControlledSigma>& ctrl) {
    return make_lq_model(std::vector<LQSpec>{spec}, ctrl);
}

double example_phi(double y) {
    double ay = std::abs(y);
    if (ay >= 1.0) return ay;
    double y2 = y * y;
    return -y2 * y2 / 8.0 + 0.75 * y2 + 0.375;
}

double example_phi_d1(double y) {
    if (std::abs(y) >= 1.0) return y > 0.0 ? 1.0 : -1.0;
    return -0.5 * y * y * y + 1.5 * y;
}

double example_phi_d2(double y) {
    if (std::abs(y) >= 1.0) return 0.0;
    return -1.5 * y * y + 1.5;
}

namespace {

double phi_mean(const EmpiricalMeasure& mu) {
    double acc = 0.0;
    for (int i = 0; i < mu.size(); ++i) acc += example_phi(mu.points()(i, 0));
    return acc / mu.size();
}

struct ExpState {
    double E;    // exp(-x^2 - v^2 - Phi^2)
    double Phi;  // int phi dm
};

ExpState exp_state(double eps, const Vec& x, const EmpiricalMeasure& mu, const Vec& v) {
    (void)eps;
    ExpState s;
    s.Phi = phi_mean(mu);
    s.E = std::exp(-x(0) * x(0) - v(0) * v(0) - s.Phi * s.Phi);
    return s;
}

}  // namespace

ExampleDriftFragment builtin_example_drift(double epsilon) {
    if (std::abs(epsilon) > 1.0)
        throw DomainError("builtin_example_drift: |epsilon| <= 1 required");
    const double eps = epsilon;
    ExampleDriftFragment fr;

    fr.B = [eps](double, const Vec& x, const EmpiricalMeasure& mu, const Vec& v) {
        auto s = exp_state(eps, x, mu, v);
        Vec out(1);
        out(0) = x(0) + v(0) + mu.mean()(0) + eps * x(0) * s.E;
        return out;
    };
    fr.B_x = [eps](double, const Vec& x, const EmpiricalMeasure& mu, const Vec& v) {
        auto s = exp_state(eps, x, mu, v);
        return scalar_mat(1.0 + eps * s.E * (1.0 - 2.0 * x(0) * x(0)));
    };
    fr.B_v = [eps](double, const Vec& x, const EmpiricalMeasure& mu, const Vec& v) {
        auto s = exp_state(eps, x, mu, v);
        return scalar_mat(1.0 - 2.0 * eps * x(0) * v(0) * s.E);
    };
    // D_y dB/dnu (y) = 1 - 2 eps x Phi E phi'(y): identity term plus one
    // separable term in phi'
    fr.B_dnu.terms.push_back(
        {[](double, const Vec&, const EmpiricalMeasure&, const Vec&) { return scalar_mat(1.0); },
         unit_shape()});
    fr.B_dnu.terms.push_back(
        {[eps](double, const Vec& x, const EmpiricalMeasure& mu, const Vec& v) {
             auto s = exp_state(eps, x, mu, v);
             return scalar_mat(-2.0 * eps * x(0) * s.Phi * s.E);
         },
         [](const Vec& y) { return example_phi_d1(y(0)); }});

    auto t3 = [](double v) { return Tensor3(1, scalar_mat(v)); };
    fr.B_xx = [eps, t3](double, const Vec& x, const EmpiricalMeasure& mu, const Vec& v) {
        auto s = exp_state(eps, x, mu, v);
        return t3(-2.0 * eps * x(0) * s.E * (3.0 - 2.0 * x(0) * x(0)));
    };
    fr.B_xv = [eps, t3](double, const Vec& x, const EmpiricalMeasure& mu, const Vec& v) {
        auto s = exp_state(eps, x, mu, v);
        return t3(-2.0 * eps * v(0) * s.E * (1.0 - 2.0 * x(0) * x(0)));
    };
    fr.B_vv = [eps, t3](double, const Vec& x, const EmpiricalMeasure& mu, const Vec& v) {
        auto s = exp_state(eps, x, mu, v);
        return t3(-2.0 * eps * x(0) * s.E * (1.0 - 2.0 * v(0) * v(0)));
    };
    auto phi1_shape = [](const Vec& y) { return example_phi_d1(y(0)); };
    auto phi2_shape = [](const Vec& y) { return example_phi_d2(y(0)); };
    fr.B_dnu_x.terms.push_back({[eps, t3](double, const Vec& x, const EmpiricalMeasure& mu, const Vec& v) {
                                    auto s = exp_state(eps, x, mu, v);
                                    return t3(-2.0 * eps * s.Phi * s.E * (1.0 - 2.0 * x(0) * x(0)));
                                },
                                phi1_shape});
    fr.B_dnu_v.terms.push_back({[eps, t3](double, const Vec& x, const EmpiricalMeasure& mu, const Vec& v) {
                                    auto s = exp_state(eps, x, mu, v);
                                    return t3(4.0 * eps * x(0) * v(0) * s.Phi * s.E);
                                },
                                phi1_shape});
    fr.B_dnu_yy.terms.push_back({[eps, t3](double, const Vec& x, const EmpiricalMeasure& mu, const Vec& v) {
                                     auto s = exp_state(eps, x, mu, v);
                                     return t3(-2.0 * eps * x(0) * s.Phi * s.E);
                                 },
                                 phi2_shape});
    fr.B_dnu2.terms.push_back({[eps, t3](double, const Vec& x, const EmpiricalMeasure& mu, const Vec& v) {
                                   auto s = exp_state(eps, x, mu, v);
                                   return t3(eps * x(0) * s.E * (4.0 * s.Phi * s.Phi - 2.0));
                               },
                               phi1_shape, phi1_shape});
    return fr;
}

ModelSpec make_example_model(double epsilon, const LQSpec& base) {
    LQSpec affine = base;
    affine.a = 1.0;
    affine.abar = 1.0;
    affine.c = 1.0;
    ModelSpec m = make_lq_model(affine);
    ExampleDriftFragment fr = builtin_example_drift(epsilon);
    m.B = fr.B;
    m.B_x = fr.B_x;
    m.B_v = fr.B_v;
    m.B_dnu = fr.B_dnu;
    m.B_xx = fr.B_xx;
    m.B_xv = fr.B_xv;
    m.B_vv = fr.B_vv;
    m.B_dnu_x = fr.B_dnu_x;
    m.B_dnu_v = fr.B_dnu_v;
    m.B_dnu_yy = fr.B_dnu_yy;
    m.B_dnu2 = fr.B_dnu2;

    // derivative-ratio constants: sampled suprema of the scaled second
    // derivatives stay below 2.2|eps| on the whole domain, rounded up here
    AssumptionConstants& c = m.constants;
    const double e = std::abs(epsilon);
    c.L = std::max(c.L, 1.0 + e);
    c.L0 = 2.5 * e;
    c.L1 = 2.5 * e;
    c.L2 = 2.5 * e;
    // B_v = 1 - 2 eps x v E >= 1 - 0.37 eps on the whole domain
    double bv_min = 1.0 - 0.37 * e;
    c.lambda0 = bv_min * bv_min;
    m.validate();
    return m;
}

JumpMeasure single_atom_measure(double mark, double weight) {
    JumpMeasure jm;
    Vec e(1);
    e(0) = mark;
    jm.atoms.push_back({e, weight});
    jm.validate();
    return jm;
}

}  // namespace mfjump
