#include "mfjump/control.hpp"

#include <cmath>

#include "mfjump/errors.hpp"
#include "mfjump/parallel.hpp"

namespace mfjump {

void MinimizerSettings::validate() const {
    if (!(newton_tol > 0.0)) throw DomainError("MinimizerSettings: tolerance must be positive");
    if (max_newton < 1) throw DomainError("MinimizerSettings: max_newton >= 1");
    if (!(damping > 0.0) || damping > 1.0) throw DomainError("MinimizerSettings: damping in (0,1]");
}

namespace {

using ResidualFn = std::function<Vec(const Vec&)>;

// damped Newton on G(v) = 0 with finite-difference Jacobian, falling back to
// the contraction v <- v - tau G(v) when Newton stalls
Vec stationary_point(const ResidualFn& G, int dim, double scale, const MinimizerSettings& s,
                     double fallback_rate) {
    Vec v = Vec::Zero(dim);
    Vec g = G(v);
    double tol = s.newton_tol * scale;
    const double fd = 1e-7;
    for (int it = 0; it < s.max_newton; ++it) {
        if (g.norm() <= tol) return v;
        Mat J(dim, dim);
        for (int c = 0; c < dim; ++c) {
            Vec vp = v, vm = v;
            double h = fd * (1.0 + std::abs(v(c)));
            vp(c) += h;
            vm(c) -= h;
            J.col(c) = (G(vp) - G(vm)) / (2.0 * h);
        }
        Vec step = J.fullPivLu().solve(-g);
        if (!step.allFinite()) break;
        double lam = s.damping;
        bool accepted = false;
        for (int half = 0; half < 30; ++half) {
            Vec cand = v + lam * step;
            Vec gc = G(cand);
            if (gc.allFinite() && gc.norm() < g.norm()) {
                v = cand;
                g = gc;
                accepted = true;
                break;
            }
            lam *= 0.5;
        }
        if (!accepted) break;
    }
    if (g.norm() <= tol) return v;
    // fixed-point fallback
    for (int it = 0; it < 200; ++it) {
        v -= fallback_rate * g;
        g = G(v);
        if (!g.allFinite()) throw NoConvergence("control minimizer: residual diverged");
        if (g.norm() <= tol) return v;
    }
    throw NoConvergence("control minimizer: no convergence, residual " + std::to_string(g.norm()));
}

}  // namespace

Vec phi0(const ModelSpec& m, double t, const Vec& x, const EmpiricalMeasure& mu, const Vec& p,
         const MinimizerSettings& s) {
    s.validate();
    const int d0 = m.d_of_block(0);
    ResidualFn G = [&](const Vec& v0) -> Vec {
        Vec g = m.B_v(t, x, mu, v0).transpose() * p;
        for (const auto& term : m.cost_terms)
            if (term.block == 0) g += term.f_v(t, x, mu, v0);
        return g;
    };
    double rate = m.constants.lambda_v / (m.constants.L * m.constants.L);
    return stationary_point(G, d0, 1.0 + p.norm(), s, rate);
}

Vec phij(const ModelSpec& m, int j, double t, const Vec& x, const EmpiricalMeasure& mu,
         const Vec& qj, const MinimizerSettings& s) {
    s.validate();
    const int dj = m.d_of_block(j);
    if (j < 1 || dj == 0) throw DomainError("phij: block must have d_j > 0");
    const auto& cc = std::get<ControlledColumn>(m.sigma[static_cast<size_t>(j - 1)]);
    ResidualFn G = [&](const Vec& vj) -> Vec {
        Vec g = cc.A_v(t, x, mu, vj).transpose() * qj;
        for (const auto& term : m.cost_terms)
            if (term.block == j) g += term.f_v(t, x, mu, vj);
        return g;
    };
    double rate = m.constants.lambda_v / (m.constants.L * m.constants.L);
    return stationary_point(G, dj, 1.0 + qj.norm(), s, rate);
}

Mat assemble_feedback(const ModelSpec& m, const JumpMeasure& jm, double t, const Mat& states,
                      const EmpiricalMeasure& mu, const Mat& P, const Mat& Q,
                      const MinimizerSettings& s) {
    (void)jm;
    const int N = static_cast<int>(states.rows());
    const int n = m.n();
    Mat out(N, m.d());
    parallel_for(N, [&](int i) {
        Vec x = states.row(i).transpose();
        Vec v = Vec::Zero(m.d());
        try {
            Vec p = P.row(i).transpose();
            v.segment(m.block_offset(0), m.d_of_block(0)) = phi0(m, t, x, mu, p, s);
            for (int j = 1; j <= n; ++j) {
                if (m.d_of_block(j) == 0) continue;
                Vec qj = Q.row(i).segment((j - 1) * n, n).transpose();
                v.segment(m.block_offset(j), m.d_of_block(j)) = phij(m, j, t, x, mu, qj, s);
            }
        } catch (const NoConvergence& e) {
            throw NoConvergence(std::string(e.what()) + " (particle " + std::to_string(i) + ")");
        }
        out.row(i) = v.transpose();
    });
    return out;
}

double optimality_residual(const ModelSpec& m, const ParticleEnsemble& ens,
                           const AdjointEnsemble& adj) {
    const int K = ens.grid.steps;
    const int n = m.n();
    double worst = 0.0;
    for (int k = 0; k < K; ++k) {
        const double t = ens.grid.time(k);
        const Mat& Xk = ens.states[static_cast<size_t>(k)];
        const Mat& Uk = ens.controls[static_cast<size_t>(k)];
        EmpiricalMeasure mu(Xk);
        std::vector<double> chunk_max(static_cast<size_t>(chunk_count(ens.particles())), 0.0);
        parallel_chunks(ens.particles(), [&](int chunk, int begin, int end) {
            double local = 0.0;
            for (int i = begin; i < end; ++i) {
                Vec x = Xk.row(i).transpose();
                Vec u = Uk.row(i).transpose();
                Vec p = adj.P[static_cast<size_t>(k)].row(i).transpose();
                Vec v0 = m.block_of(u, 0);
                Vec g = m.B_v(t, x, mu, v0).transpose() * p;
                for (const auto& term : m.cost_terms)
                    if (term.block == 0) g += term.f_v(t, x, mu, v0);
                local = std::max(local, g.norm() / (1.0 + p.norm()));
                for (int j = 1; j <= n; ++j) {
                    if (m.d_of_block(j) == 0) continue;
                    const auto& cc = std::get<ControlledColumn>(m.sigma[static_cast<size_t>(j - 1)]);
                    Vec qj = adj.Q[static_cast<size_t>(k)].row(i).segment((j - 1) * n, n).transpose();
                    Vec vj = m.block_of(u, j);
                    Vec gj = cc.A_v(t, x, mu, vj).transpose() * qj;
                    for (const auto& term : m.cost_terms)
                        if (term.block == j) gj += term.f_v(t, x, mu, vj);
                    local = std::max(local, gj.norm() / (1.0 + qj.norm()));
                }
            }
            chunk_max[static_cast<size_t>(chunk)] = local;
        });
        for (double v : chunk_max) worst = std::max(worst, v);
    }
    return worst;
}

ConeMargins cone_margins(const ModelSpec& m, const ParticleEnsemble& ens, const AdjointEnsemble& adj) {
    const int K = ens.grid.steps;
    const int N = ens.particles();
    const int n = m.n();
    const double cone = m.constants.L * m.constants.L / m.constants.lambda0;
    const double ucone = m.constants.L / (2.0 * m.constants.lambda_v);

    ConeMargins out;
    out.min_margin_P = std::numeric_limits<double>::infinity();
    out.min_margin_Q = std::numeric_limits<double>::infinity();
    out.min_margin_u = std::numeric_limits<double>::infinity();

    for (int k = 0; k < K; ++k) {
        const Mat& Xk = ens.states[static_cast<size_t>(k)];
        const Mat& Uk = ens.controls[static_cast<size_t>(k)];
        double mu1 = EmpiricalMeasure(Xk).moment1();
        for (int i = 0; i < N; ++i) {
            double ynorm = Xk.row(i).norm();
            Vec u = Uk.row(i).transpose();
            double u0 = m.block_of(u, 0).norm();
            double pnorm = adj.P[static_cast<size_t>(k)].row(i).norm();
            double base = 1.0 + ynorm + mu1;
            out.min_margin_P = std::min(out.min_margin_P, cone * (base + u0) - pnorm);
            out.min_margin_u = std::min(out.min_margin_u, ucone * (1.0 + pnorm + ynorm + mu1) - u0);
            out.scale = std::max(out.scale, cone * (base + u0));
            for (int j = 1; j <= n; ++j) {
                if (m.d_of_block(j) == 0) continue;
                double qnorm = adj.Q[static_cast<size_t>(k)].row(i).segment((j - 1) * n, n).norm();
                double uj = m.block_of(u, j).norm();
                out.min_margin_Q = std::min(out.min_margin_Q, cone * (base + uj) - qnorm);
                out.min_margin_u =
                    std::min(out.min_margin_u, ucone * (1.0 + qnorm + ynorm + mu1) - uj);
            }
        }
    }
    return out;
}

}  // namespace mfjump
