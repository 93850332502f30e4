#include "mfjump/adjoint.hpp"

#include "mfjump/errors.hpp"
#include "mfjump/parallel.hpp"

namespace mfjump {

Mat terminal_condition(const ModelSpec& m, const Mat& final_states) {
    const int N = static_cast<int>(final_states.rows());
    const int n = m.n();
    EmpiricalMeasure mu(final_states);
    Mat out(N, n);

    // factor the averaged kernel: (1/N) sum_k coef_r(Y_k) then shape_r(Y_i)
    std::vector<Vec> avg_coefs;
    Vec empty(0);
    for (const auto& term : m.terminal.g_dnu.terms) {
        Vec acc = Vec::Zero(n);
        for (int k = 0; k < N; ++k)
            acc += term.coef(0.0, final_states.row(k).transpose(), mu, empty).col(0);
        avg_coefs.push_back(acc / N);
    }
    parallel_for(N, [&](int i) {
        Vec x = final_states.row(i).transpose();
        Vec p = m.terminal.g_x(x, mu);
        for (size_t r = 0; r < m.terminal.g_dnu.terms.size(); ++r)
            p += m.terminal.g_dnu.terms[r].shape(x) * avg_coefs[r];
        out.row(i) = p.transpose();
    });
    return out;
}

namespace {

// per-step averages for the mean-field (hatted) driver terms
struct MeanFieldSums {
    std::vector<Vec> drift;                       // per B_dnu term: (1/N) sum coef^T P
    std::vector<std::vector<Vec>> cols;           // per column, per A_dnu term
    std::vector<Vec> linear_cols;                 // per linear column: s2^T mean(Q^j)
    Vec jump;                                     // sum_a w_a g2^T mean(R_a)
    std::vector<std::vector<Vec>> costs;          // per cost term, per f_dnu term
};

MeanFieldSums meanfield_sums(const ModelSpec& m, const JumpMeasure& jm, double t, const Mat& states,
                             const EmpiricalMeasure& mu, const Mat& controls, const Mat& P,
                             const Mat& Q, const Mat& R) {
    const int N = static_cast<int>(states.rows());
    const int n = m.n();
    MeanFieldSums s;

    for (const auto& term : m.B_dnu.terms) {
        Vec acc = Vec::Zero(n);
        for (int mi = 0; mi < N; ++mi) {
            Vec x = states.row(mi).transpose();
            Vec v0 = m.block_of(controls.row(mi).transpose(), 0);
            acc += term.coef(t, x, mu, v0).transpose() * P.row(mi).transpose();
        }
        s.drift.push_back(acc / N);
    }

    s.cols.resize(static_cast<size_t>(n));
    s.linear_cols.assign(static_cast<size_t>(n), Vec());
    for (int j = 0; j < n; ++j) {
        if (const auto* lin = std::get_if<LinearColumn>(&m.sigma[static_cast<size_t>(j)])) {
            Vec qmean = Vec::Zero(n);
            for (int mi = 0; mi < N; ++mi) qmean += Q.row(mi).segment(j * n, n).transpose();
            qmean /= N;
            s.linear_cols[static_cast<size_t>(j)] = lin->s2(t).transpose() * qmean;
        } else {
            const auto& cc = std::get<ControlledColumn>(m.sigma[static_cast<size_t>(j)]);
            for (const auto& term : cc.A_dnu.terms) {
                Vec acc = Vec::Zero(n);
                for (int mi = 0; mi < N; ++mi) {
                    Vec x = states.row(mi).transpose();
                    Vec vj = m.block_of(controls.row(mi).transpose(), j + 1);
                    acc += term.coef(t, x, mu, vj).transpose() * Q.row(mi).segment(j * n, n).transpose();
                }
                s.cols[static_cast<size_t>(j)].push_back(acc / N);
            }
        }
    }

    s.jump = Vec::Zero(n);
    for (int a = 0; a < jm.count(); ++a) {
        const auto& atom = jm.atoms[static_cast<size_t>(a)];
        Vec rmean = Vec::Zero(n);
        for (int mi = 0; mi < N; ++mi) rmean += R.row(mi).segment(a * n, n).transpose();
        rmean /= N;
        s.jump += atom.weight * (m.jump.g2(t, atom.mark).transpose() * rmean);
    }

    for (const auto& term : m.cost_terms) {
        std::vector<Vec> per_term;
        for (const auto& kt : term.f_dnu.terms) {
            Vec acc = Vec::Zero(n);
            for (int mi = 0; mi < N; ++mi) {
                Vec x = states.row(mi).transpose();
                Vec vj = m.block_of(controls.row(mi).transpose(), term.block);
                acc += kt.coef(t, x, mu, vj).col(0);
            }
            per_term.push_back(acc / N);
        }
        s.costs.push_back(std::move(per_term));
    }
    return s;
}

}  // namespace

Mat adjoint_driver(const ModelSpec& m, const JumpMeasure& jm, double t, const Mat& states,
                   const EmpiricalMeasure& mu, const Mat& controls, const Mat& P, const Mat& Q,
                   const Mat& R) {
    const int N = static_cast<int>(states.rows());
    const int n = m.n();
    MeanFieldSums mf = meanfield_sums(m, jm, t, states, mu, controls, P, Q, R);
    Mat out(N, n);

    parallel_for(N, [&](int i) {
        Vec x = states.row(i).transpose();
        Vec v = controls.row(i).transpose();
        Vec v0 = m.block_of(v, 0);
        Vec acc = m.B_x(t, x, mu, v0).transpose() * P.row(i).transpose();

        for (int j = 0; j < n; ++j) {
            Vec qj = Q.row(i).segment(j * n, n).transpose();
            if (const auto* lin = std::get_if<LinearColumn>(&m.sigma[static_cast<size_t>(j)])) {
                acc += lin->s1(t).transpose() * qj;
            } else {
                const auto& cc = std::get<ControlledColumn>(m.sigma[static_cast<size_t>(j)]);
                acc += cc.A_x(t, x, mu, m.block_of(v, j + 1)).transpose() * qj;
            }
        }
        for (int a = 0; a < jm.count(); ++a) {
            const auto& atom = jm.atoms[static_cast<size_t>(a)];
            acc += atom.weight * (m.jump.g1(t, atom.mark).transpose() * R.row(i).segment(a * n, n).transpose());
        }
        acc += m.running_cost_x(t, x, mu, v);

        // mean-field block: kernels evaluated at the derivative point x = Y_i
        for (size_t r = 0; r < m.B_dnu.terms.size(); ++r)
            acc += m.B_dnu.terms[r].shape(x) * mf.drift[r];
        for (int j = 0; j < n; ++j) {
            if (std::holds_alternative<LinearColumn>(m.sigma[static_cast<size_t>(j)])) {
                acc += mf.linear_cols[static_cast<size_t>(j)];
            } else {
                const auto& cc = std::get<ControlledColumn>(m.sigma[static_cast<size_t>(j)]);
                for (size_t r = 0; r < cc.A_dnu.terms.size(); ++r)
                    acc += cc.A_dnu.terms[r].shape(x) * mf.cols[static_cast<size_t>(j)][r];
            }
        }
        acc += mf.jump;
        for (size_t ti = 0; ti < m.cost_terms.size(); ++ti) {
            const auto& kt = m.cost_terms[ti].f_dnu.terms;
            for (size_t r = 0; r < kt.size(); ++r) acc += kt[r].shape(x) * mf.costs[ti][r];
        }
        out.row(i) = acc.transpose();
    });
    return out;
}

Mat adjoint_driver_dense(const ModelSpec& m, const JumpMeasure& jm, double t, const Mat& states,
                         const EmpiricalMeasure& mu, const Mat& controls, const Mat& P, const Mat& Q,
                         const Mat& R) {
    const int N = static_cast<int>(states.rows());
    const int n = m.n();
    Mat out(N, n);
    for (int i = 0; i < N; ++i) {
        Vec yi = states.row(i).transpose();
        Vec v = controls.row(i).transpose();
        Vec v0 = m.block_of(v, 0);
        Vec acc = m.B_x(t, yi, mu, v0).transpose() * P.row(i).transpose();
        for (int j = 0; j < n; ++j) {
            Vec qj = Q.row(i).segment(j * n, n).transpose();
            if (const auto* lin = std::get_if<LinearColumn>(&m.sigma[static_cast<size_t>(j)]))
                acc += lin->s1(t).transpose() * qj;
            else
                acc += std::get<ControlledColumn>(m.sigma[static_cast<size_t>(j)])
                           .A_x(t, yi, mu, m.block_of(v, j + 1))
                           .transpose() *
                       qj;
        }
        for (int a = 0; a < jm.count(); ++a)
            acc += jm.atoms[static_cast<size_t>(a)].weight *
                   (m.jump.g1(t, jm.atoms[static_cast<size_t>(a)].mark).transpose() *
                    R.row(i).segment(a * n, n).transpose());
        acc += m.running_cost_x(t, yi, mu, v);

        for (int mi = 0; mi < N; ++mi) {
            Vec xm = states.row(mi).transpose();
            Vec vm = controls.row(mi).transpose();
            Vec vm0 = m.block_of(vm, 0);
            if (!m.B_dnu.empty())
                acc += m.B_dnu.eval(t, xm, mu, vm0, yi).transpose() * P.row(mi).transpose() / N;
            for (int j = 0; j < n; ++j) {
                Vec qm = Q.row(mi).segment(j * n, n).transpose();
                if (const auto* lin = std::get_if<LinearColumn>(&m.sigma[static_cast<size_t>(j)]))
                    acc += lin->s2(t).transpose() * qm / N;
                else {
                    const auto& cc = std::get<ControlledColumn>(m.sigma[static_cast<size_t>(j)]);
                    if (!cc.A_dnu.empty())
                        acc += cc.A_dnu.eval(t, xm, mu, m.block_of(vm, j + 1), yi).transpose() * qm / N;
                }
            }
            for (int a = 0; a < jm.count(); ++a)
                acc += jm.atoms[static_cast<size_t>(a)].weight *
                       (m.jump.g2(t, jm.atoms[static_cast<size_t>(a)].mark).transpose() *
                        R.row(mi).segment(a * n, n).transpose()) /
                       N;
            for (const auto& term : m.cost_terms)
                if (!term.f_dnu.empty())
                    acc += term.f_dnu.eval(t, xm, mu, m.block_of(vm, term.block), yi).col(0) / N;
        }
        out.row(i) = acc.transpose();
    }
    return out;
}

AdjointEnsemble solve_adjoint(const ModelSpec& m, const JumpMeasure& jm, const ParticleEnsemble& ens,
                              const NoiseBundle& noise, const RegressionConfig& cfg) {
    cfg.validate();
    const int K = ens.grid.steps;
    const int N = ens.particles();
    const int n = m.n();
    const int A = jm.count();
    const double dt = ens.grid.dt();

    AdjointEnsemble adj;
    adj.P.assign(static_cast<size_t>(K) + 1, Mat());
    adj.Q.assign(static_cast<size_t>(K), Mat());
    adj.R.assign(static_cast<size_t>(K), Mat());
    adj.P[static_cast<size_t>(K)] = terminal_condition(m, ens.states[static_cast<size_t>(K)]);

    PolyBasis basis(n, cfg.basis_degree);

    for (int k = K - 1; k >= 0; --k) {
        const double t = ens.grid.time(k);
        const Mat& Xk = ens.states[static_cast<size_t>(k)];
        const Mat& Uk = ens.controls[static_cast<size_t>(k)];
        const Mat& Pn = adj.P[static_cast<size_t>(k) + 1];
        EmpiricalMeasure mu(Xk);

        Mat X = basis.features_all(Xk);
        RidgeFit pfit = RidgeFit::fit(X, Pn, cfg.ridge);
        Mat Phat = pfit.predict(X);
        Mat centered = Pn - Phat;

        // Brownian and compensated-jump multipliers from the shared noise
        Mat dB(N, n);
        Mat dJ(N, A);
        parallel_for(N, [&](int i) {
            dB.row(i) = noise.brownian(i, k, n, dt).transpose();
            for (int a = 0; a < A; ++a) {
                double mean = jm.atoms[static_cast<size_t>(a)].weight * dt;
                dJ(i, a) = (noise.jump_count(i, k, a, mean) - mean) / mean;
            }
        });

        Mat Qk(N, n * n);
        for (int j = 0; j < n; ++j) {
            Mat z = centered.array().colwise() * (dB.col(j).array() / dt);
            RidgeFit qfit = RidgeFit::fit(X, z, cfg.ridge);
            Qk.middleCols(j * n, n) = qfit.predict(X);
        }
        Mat Rk(N, A * n);
        for (int a = 0; a < A; ++a) {
            Mat z = centered.array().colwise() * dJ.col(a).array();
            RidgeFit rfit = RidgeFit::fit(X, z, cfg.ridge);
            Rk.middleCols(a * n, n) = rfit.predict(X);
        }

        Mat driver = adjoint_driver(m, jm, t, Xk, mu, Uk, Phat, Qk, Rk);
        Mat Pk = Phat + dt * driver;
        if (!Pk.allFinite() || Pk.cwiseAbs().maxCoeff() > 1e8)
            throw BlowUp("solve_adjoint: costate escaped the cap", k, -1);

        adj.P[static_cast<size_t>(k)] = std::move(Pk);
        adj.Q[static_cast<size_t>(k)] = std::move(Qk);
        adj.R[static_cast<size_t>(k)] = std::move(Rk);
    }
    return adj;
}

double adjoint_energy_ratio(const ParticleEnsemble& ens, const AdjointEnsemble& adj,
                            const JumpMeasure& jm) {
    const int K = ens.grid.steps;
    const int N = ens.particles();
    const int n = adj.dim();
    const double dt = ens.grid.dt();

    double sup_p2 = 0.0;
    for (int i = 0; i < N; ++i) {
        double best = 0.0;
        for (int k = 0; k <= K; ++k)
            best = std::max(best, adj.P[static_cast<size_t>(k)].row(i).squaredNorm());
        sup_p2 += best;
    }
    sup_p2 /= N;

    double qr = 0.0;
    for (int k = 0; k < K; ++k) {
        qr += adj.Q[static_cast<size_t>(k)].squaredNorm() / N * dt;
        for (int a = 0; a < jm.count(); ++a)
            qr += jm.atoms[static_cast<size_t>(a)].weight *
                  adj.R[static_cast<size_t>(k)].middleCols(a * n, n).squaredNorm() / N * dt;
    }

    double data = 1.0 + ens.states[0].squaredNorm() / N;
    for (int k = 0; k < K; ++k) data += ens.controls[static_cast<size_t>(k)].squaredNorm() / N * dt;
    return (sup_p2 + qr) / data;
}

}  // namespace mfjump
