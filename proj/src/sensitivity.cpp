#include "mfjump/sensitivity.hpp"

#include <cmath>

#include "mfjump/errors.hpp"
#include "mfjump/parallel.hpp"

namespace mfjump {

void SensitivityConfig::validate() const {
    if (!(tol > 0.0) || max_iter < 1) throw DomainError("SensitivityConfig: bad tolerance/iterations");
}

void PinnedConfig::validate() const {
    if (copies_per_tag < 1) throw DomainError("PinnedConfig: copies_per_tag >= 1");
    if (!(tol_control > 0.0) || max_picard < 1 || !(damping > 0.0) || damping > 1.0)
        throw DomainError("PinnedConfig: bad iteration parameters");
}

double flow_snorm(const FlowArrays& f, const JumpMeasure& jm, const TimeGrid& grid) {
    const int N = static_cast<int>(f.dY[0].rows());
    const int n = static_cast<int>(f.dY[0].cols());
    const double dt = grid.dt();
    double supY = 0.0, supP = 0.0;
    for (int i = 0; i < N; ++i) {
        double by = 0.0, bp = 0.0;
        for (const auto& s : f.dY) by = std::max(by, s.row(i).squaredNorm());
        for (const auto& s : f.dP) bp = std::max(bp, s.row(i).squaredNorm());
        supY += by;
        supP += bp;
    }
    double acc = (supY + supP) / N;
    for (size_t k = 0; k < f.dQ.size(); ++k) {
        acc += dt * f.dQ[k].squaredNorm() / N;
        acc += dt * f.dU[k].squaredNorm() / N;
        for (int a = 0; a < jm.count(); ++a)
            acc += dt * jm.atoms[static_cast<size_t>(a)].weight *
                   f.dR[k].middleCols(a * n, n).squaredNorm() / N;
    }
    return std::sqrt(acc);
}

namespace {

struct Pop {
    const Mat& X;
    const Mat& U;
    const Mat& P;
    const Mat& Q;
    const Mat& R;
    const EmpiricalMeasure& mu;
};

Vec shape_moment(const ShapeFn& shape, const Mat& pts, const Mat& dirs) {
    Vec acc = Vec::Zero(dirs.cols());
    for (int i = 0; i < pts.rows(); ++i) acc += shape(pts.row(i).transpose()) * dirs.row(i).transpose();
    return acc / pts.rows();
}

void require_second_order(const ModelSpec& m) {
    if (!m.has_second_order())
        throw MissingDerivatives("sensitivity: second-order derivative callbacks are required");
}

// ---------------------------------------------------------------------------
// generalized driver and terminal (system slice vs population slice)

Mat driver_general(const ModelSpec& m, const JumpMeasure& jm, double t, const Mat& sysX,
                   const Mat& sysU, const Mat& sysP, const Mat& sysQ, const Mat& sysR,
                   const Pop& pop) {
    const int Ns = static_cast<int>(sysX.rows());
    const int Np = static_cast<int>(pop.X.rows());
    const int n = m.n();

    std::vector<Vec> drift_w;
    for (const auto& term : m.B_dnu.terms) {
        Vec acc = Vec::Zero(n);
        for (int mi = 0; mi < Np; ++mi)
            acc += term.coef(t, pop.X.row(mi).transpose(), pop.mu,
                             m.block_of(pop.U.row(mi).transpose(), 0))
                       .transpose() *
                   pop.P.row(mi).transpose();
        drift_w.push_back(acc / Np);
    }
    std::vector<std::vector<Vec>> col_w(static_cast<size_t>(n));
    std::vector<Vec> lin_w(static_cast<size_t>(n));
    for (int j = 0; j < n; ++j) {
        if (const auto* lin = std::get_if<LinearColumn>(&m.sigma[static_cast<size_t>(j)])) {
            Vec qmean = Vec::Zero(n);
            for (int mi = 0; mi < Np; ++mi) qmean += pop.Q.row(mi).segment(j * n, n).transpose();
            lin_w[static_cast<size_t>(j)] = lin->s2(t).transpose() * (qmean / Np);
        } else {
            const auto& cc = std::get<ControlledColumn>(m.sigma[static_cast<size_t>(j)]);
            for (const auto& term : cc.A_dnu.terms) {
                Vec acc = Vec::Zero(n);
                for (int mi = 0; mi < Np; ++mi)
                    acc += term.coef(t, pop.X.row(mi).transpose(), pop.mu,
                                     m.block_of(pop.U.row(mi).transpose(), j + 1))
                               .transpose() *
                           pop.Q.row(mi).segment(j * n, n).transpose();
                col_w[static_cast<size_t>(j)].push_back(acc / Np);
            }
        }
    }
    Vec jump_w = Vec::Zero(n);
    for (int a = 0; a < jm.count(); ++a) {
        const auto& atom = jm.atoms[static_cast<size_t>(a)];
        Vec rmean = Vec::Zero(n);
        for (int mi = 0; mi < Np; ++mi) rmean += pop.R.row(mi).segment(a * n, n).transpose();
        jump_w += atom.weight * (m.jump.g2(t, atom.mark).transpose() * (rmean / Np));
    }
    std::vector<std::vector<Vec>> cost_w;
    for (const auto& term : m.cost_terms) {
        std::vector<Vec> per;
        for (const auto& kt : term.f_dnu.terms) {
            Vec acc = Vec::Zero(n);
            for (int mi = 0; mi < Np; ++mi)
                acc += kt.coef(t, pop.X.row(mi).transpose(), pop.mu,
                               m.block_of(pop.U.row(mi).transpose(), term.block))
                           .col(0);
            per.push_back(acc / Np);
        }
        cost_w.push_back(std::move(per));
    }

    Mat out(Ns, n);
    parallel_for(Ns, [&](int i) {
        Vec x = sysX.row(i).transpose();
        Vec v = sysU.row(i).transpose();
        Vec v0 = m.block_of(v, 0);
        Vec acc = m.B_x(t, x, pop.mu, v0).transpose() * sysP.row(i).transpose();
        for (int j = 0; j < n; ++j) {
            Vec qj = sysQ.row(i).segment(j * n, n).transpose();
            if (const auto* lin = std::get_if<LinearColumn>(&m.sigma[static_cast<size_t>(j)]))
                acc += lin->s1(t).transpose() * qj;
            else
                acc += std::get<ControlledColumn>(m.sigma[static_cast<size_t>(j)])
                           .A_x(t, x, pop.mu, m.block_of(v, j + 1))
                           .transpose() *
                       qj;
        }
        for (int a = 0; a < jm.count(); ++a)
            acc += jm.atoms[static_cast<size_t>(a)].weight *
                   (m.jump.g1(t, jm.atoms[static_cast<size_t>(a)].mark).transpose() *
                    sysR.row(i).segment(a * n, n).transpose());
        acc += m.running_cost_x(t, x, pop.mu, v);

        for (size_t r = 0; r < m.B_dnu.terms.size(); ++r)
            acc += m.B_dnu.terms[r].shape(x) * drift_w[r];
        for (int j = 0; j < n; ++j) {
            if (std::holds_alternative<LinearColumn>(m.sigma[static_cast<size_t>(j)]))
                acc += lin_w[static_cast<size_t>(j)];
            else {
                const auto& cc = std::get<ControlledColumn>(m.sigma[static_cast<size_t>(j)]);
                for (size_t r = 0; r < cc.A_dnu.terms.size(); ++r)
                    acc += cc.A_dnu.terms[r].shape(x) * col_w[static_cast<size_t>(j)][r];
            }
        }
        acc += jump_w;
        for (size_t ti = 0; ti < m.cost_terms.size(); ++ti)
            for (size_t r = 0; r < m.cost_terms[ti].f_dnu.terms.size(); ++r)
                acc += m.cost_terms[ti].f_dnu.terms[r].shape(x) * cost_w[ti][r];
        out.row(i) = acc.transpose();
    });
    return out;
}

Mat terminal_general(const ModelSpec& m, const Mat& sysX, const Mat& popX) {
    const int Ns = static_cast<int>(sysX.rows());
    const int Np = static_cast<int>(popX.rows());
    const int n = m.n();
    EmpiricalMeasure mu(popX);
    Vec empty(0);
    std::vector<Vec> avg;
    for (const auto& term : m.terminal.g_dnu.terms) {
        Vec acc = Vec::Zero(n);
        for (int k = 0; k < Np; ++k) acc += term.coef(0.0, popX.row(k).transpose(), mu, empty).col(0);
        avg.push_back(acc / Np);
    }
    Mat out(Ns, n);
    parallel_for(Ns, [&](int i) {
        Vec x = sysX.row(i).transpose();
        Vec p = m.terminal.g_x(x, mu);
        for (size_t r = 0; r < m.terminal.g_dnu.terms.size(); ++r)
            p += m.terminal.g_dnu.terms[r].shape(x) * avg[r];
        out.row(i) = p.transpose();
    });
    return out;
}

// ---------------------------------------------------------------------------
// pinned solve

Vec stream_brownian(const NoiseBundle& own, const NoiseBundle& base, const std::vector<int>& mirror,
                    int i, int k, int n, double dt) {
    if (!mirror.empty() && mirror[static_cast<size_t>(i)] >= 0)
        return base.brownian(mirror[static_cast<size_t>(i)], k, n, dt);
    return own.brownian(i, k, n, dt);
}

int stream_jumps(const NoiseBundle& own, const NoiseBundle& base, const std::vector<int>& mirror,
                 int i, int k, int a, double mean) {
    if (!mirror.empty() && mirror[static_cast<size_t>(i)] >= 0)
        return base.jump_count(mirror[static_cast<size_t>(i)], k, a, mean);
    return own.jump_count(i, k, a, mean);
}

ParticleEnsemble pinned_forward(const ModelSpec& m, const JumpMeasure& jm, const SolveResult& base,
                                const Mat& init, const std::vector<Mat>& control,
                                const NoiseBundle& pin, const NoiseBundle& base_noise,
                                const std::vector<int>& mirror) {
    const TimeGrid& grid = base.ensemble.grid;
    const int Np = static_cast<int>(init.rows());
    const int n = m.n();
    const int A = jm.count();
    const double dt = grid.dt();

    ParticleEnsemble ens;
    ens.grid = grid;
    ens.states.assign(static_cast<size_t>(grid.steps) + 1, Mat(Np, n));
    ens.controls = control;
    ens.states[0] = init;

    for (int k = 0; k < grid.steps; ++k) {
        const double t = grid.time(k);
        EmpiricalMeasure mu = base.ensemble.measure_at(k);
        const Mat& cur = ens.states[static_cast<size_t>(k)];
        Mat& nxt = ens.states[static_cast<size_t>(k) + 1];
        parallel_for(Np, [&](int i) {
            Vec x = cur.row(i).transpose();
            Vec v = control[static_cast<size_t>(k)].row(i).transpose();
            Vec dB = stream_brownian(pin, base_noise, mirror, i, k, n, dt);
            Vec next = x + m.drift(t, x, mu, v) * dt;
            for (int j = 0; j < n; ++j) next += m.sigma_col(j, t, x, mu, v) * dB(j);
            for (int a = 0; a < A; ++a) {
                const auto& atom = jm.atoms[static_cast<size_t>(a)];
                int cnt = stream_jumps(pin, base_noise, mirror, i, k, a, atom.weight * dt);
                double comp = cnt - atom.weight * dt;
                if (comp != 0.0) next += m.gamma(t, x, mu, atom.mark) * comp;
            }
            nxt.row(i) = next.transpose();
        });
        for (int i = 0; i < Np; ++i)
            if (!nxt.row(i).allFinite() || nxt.row(i).cwiseAbs().maxCoeff() > 1e8)
                throw BlowUp("pinned forward: state escaped the cap", k + 1, i);
    }
    return ens;
}

AdjointEnsemble pinned_adjoint(const ModelSpec& m, const JumpMeasure& jm, const SolveResult& base,
                               const ParticleEnsemble& pens, const NoiseBundle& pin,
                               const NoiseBundle& base_noise, const std::vector<int>& mirror,
                               const RegressionConfig& reg) {
    const TimeGrid& grid = pens.grid;
    const int K = grid.steps;
    const int Np = pens.particles();
    const int n = m.n();
    const int A = jm.count();
    const double dt = grid.dt();

    AdjointEnsemble adj;
    adj.P.assign(static_cast<size_t>(K) + 1, Mat());
    adj.Q.assign(static_cast<size_t>(K), Mat());
    adj.R.assign(static_cast<size_t>(K), Mat());
    adj.P[static_cast<size_t>(K)] = terminal_general(m, pens.states[static_cast<size_t>(K)],
                                                     base.ensemble.states[static_cast<size_t>(K)]);

    PolyBasis basis(n, reg.basis_degree);
    for (int k = K - 1; k >= 0; --k) {
        const double t = grid.time(k);
        const Mat& Xk = pens.states[static_cast<size_t>(k)];
        const Mat& Uk = pens.controls[static_cast<size_t>(k)];
        const Mat& Pn = adj.P[static_cast<size_t>(k) + 1];
        EmpiricalMeasure base_mu = base.ensemble.measure_at(k);

        Mat X = basis.features_all(Xk);
        RidgeFit pfit = RidgeFit::fit(X, Pn, reg.ridge);
        Mat Phat = pfit.predict(X);
        Mat centered = Pn - Phat;

        Mat dB(Np, n), dJ(Np, A);
        parallel_for(Np, [&](int i) {
            dB.row(i) = stream_brownian(pin, base_noise, mirror, i, k, n, dt).transpose();
            for (int a = 0; a < A; ++a) {
                double mean = jm.atoms[static_cast<size_t>(a)].weight * dt;
                dJ(i, a) = (stream_jumps(pin, base_noise, mirror, i, k, a, mean) - mean) / mean;
            }
        });

        Mat Qk(Np, n * n), Rk(Np, A * n);
        for (int j = 0; j < n; ++j) {
            Mat z = centered.array().colwise() * (dB.col(j).array() / dt);
            Qk.middleCols(j * n, n) = RidgeFit::fit(X, z, reg.ridge).predict(X);
        }
        for (int a = 0; a < A; ++a) {
            Mat z = centered.array().colwise() * dJ.col(a).array();
            Rk.middleCols(a * n, n) = RidgeFit::fit(X, z, reg.ridge).predict(X);
        }

        Pop pop{base.ensemble.states[static_cast<size_t>(k)],
                base.ensemble.controls[static_cast<size_t>(k)],
                base.adjoint.P[static_cast<size_t>(k)],
                base.adjoint.Q[static_cast<size_t>(k)],
                base.adjoint.R[static_cast<size_t>(k)],
                base_mu};
        Mat driver = driver_general(m, jm, t, Xk, Uk, Phat, Qk, Rk, pop);
        adj.P[static_cast<size_t>(k)] = Phat + dt * driver;
        adj.Q[static_cast<size_t>(k)] = std::move(Qk);
        adj.R[static_cast<size_t>(k)] = std::move(Rk);
    }
    return adj;
}

}  // namespace

PinnedFlow solve_pinned_flow(const ModelSpec& m, const JumpMeasure& jm, const SolveResult& base,
                             const Mat& ys, const PinnedConfig& pcfg, const RegressionConfig& reg,
                             const MinimizerSettings& min_settings) {
    pcfg.validate();
    const int M = static_cast<int>(ys.rows());
    const int Np = M * pcfg.copies_per_tag;
    const TimeGrid& grid = base.ensemble.grid;
    const double dt = grid.dt();

    Mat init(Np, m.n());
    for (int i = 0; i < Np; ++i) init.row(i) = ys.row(i % M);

    NoiseBundle pin{pcfg.seed, true};
    NoiseBundle base_noise{pcfg.seed, false};
    if (!pcfg.mirror.empty() && static_cast<int>(pcfg.mirror.size()) != Np)
        throw DomainError("solve_pinned_flow: mirror must list one stream per tagged particle");

    std::vector<Mat> control(static_cast<size_t>(grid.steps), Mat::Zero(Np, m.d()));
    ParticleEnsemble pens;
    AdjointEnsemble padj;
    bool converged = false;
    for (int it = 0; it < pcfg.max_picard; ++it) {
        pens = pinned_forward(m, jm, base, init, control, pin, base_noise, pcfg.mirror);
        padj = pinned_adjoint(m, jm, base, pens, pin, base_noise, pcfg.mirror, reg);
        std::vector<Mat> updated(control.size());
        for (int k = 0; k < grid.steps; ++k) {
            EmpiricalMeasure base_mu = base.ensemble.measure_at(k);
            Mat fresh = assemble_feedback(m, jm, grid.time(k), pens.states[static_cast<size_t>(k)],
                                          base_mu, padj.P[static_cast<size_t>(k)],
                                          padj.Q[static_cast<size_t>(k)], min_settings);
            updated[static_cast<size_t>(k)] =
                (1.0 - pcfg.damping) * control[static_cast<size_t>(k)] + pcfg.damping * fresh;
        }
        double change = control_field_distance(updated, control, dt);
        control = std::move(updated);
        if (change <= pcfg.tol_control) {
            converged = true;
            break;
        }
    }
    if (!converged) throw NoConvergence("solve_pinned_flow: tagged control field did not settle");

    pens = pinned_forward(m, jm, base, init, control, pin, base_noise, pcfg.mirror);
    pens.controls = control;
    padj = pinned_adjoint(m, jm, base, pens, pin, base_noise, pcfg.mirror, reg);

    PinnedFlow out;
    out.tags = ys;
    out.copies_per_tag = pcfg.copies_per_tag;
    out.ens = std::move(pens);
    out.adj = std::move(padj);
    return out;
}

// ---------------------------------------------------------------------------
// directional sweep: derivative of a solve along one initial direction.
// coupled mode differentiates the population (the system itself); the frozen
// mode treats the population as constants (state derivative of the tagged
// system).

namespace {

struct DirectionalProblem {
    const ModelSpec& m;
    const JumpMeasure& jm;
    const ParticleEnsemble& ens;    // system
    const AdjointEnsemble& adj;     // system costates
    const NoiseBundle& noise;
    const NoiseBundle& base_noise;
    const std::vector<int>& mirror;
    const ParticleEnsemble& pop_ens;
    const AdjointEnsemble& pop_adj;
    bool coupled;
    const RegressionConfig& reg;
};

void directional_forward(const DirectionalProblem& pr, const std::vector<Mat>& dU, const Mat& eta,
                         std::vector<Mat>& dY) {
    const ModelSpec& m = pr.m;
    const TimeGrid& grid = pr.ens.grid;
    const int N = pr.ens.particles();
    const int n = m.n();
    const int A = pr.jm.count();
    const double dt = grid.dt();
    dY[0] = eta;

    for (int k = 0; k < grid.steps; ++k) {
        const double t = grid.time(k);
        const Mat& cur = pr.ens.states[static_cast<size_t>(k)];
        const Mat& ctrl = pr.ens.controls[static_cast<size_t>(k)];
        const Mat& dcur = dY[static_cast<size_t>(k)];
        Mat& dnxt = dY[static_cast<size_t>(k) + 1];
        EmpiricalMeasure mu = pr.pop_ens.measure_at(k);

        Vec dmean = Vec::Zero(n);
        std::vector<Vec> drift_moms;
        std::vector<std::vector<Vec>> col_moms(static_cast<size_t>(n));
        if (pr.coupled) {
            dmean = dcur.colwise().mean().transpose();
            for (const auto& term : m.B_dnu.terms)
                drift_moms.push_back(shape_moment(term.shape, cur, dcur));
            for (int j = 0; j < n; ++j)
                if (const auto* cc = std::get_if<ControlledColumn>(&m.sigma[static_cast<size_t>(j)]))
                    for (const auto& term : cc->A_dnu.terms)
                        col_moms[static_cast<size_t>(j)].push_back(shape_moment(term.shape, cur, dcur));
        }

        parallel_for(N, [&](int i) {
            Vec x = cur.row(i).transpose();
            Vec v = ctrl.row(i).transpose();
            Vec dx = dcur.row(i).transpose();
            Vec du = dU[static_cast<size_t>(k)].row(i).transpose();
            Vec v0 = m.block_of(v, 0);

            Vec incr = m.B_x(t, x, mu, v0) * dx + m.B_v(t, x, mu, v0) * m.block_of(du, 0);
            if (pr.coupled)
                for (size_t r = 0; r < m.B_dnu.terms.size(); ++r)
                    incr += m.B_dnu.terms[r].coef(t, x, mu, v0) * drift_moms[r];
            Vec next = dx + incr * dt;

            Vec dB = stream_brownian(pr.noise, pr.base_noise, pr.mirror, i, k, n, dt);
            for (int j = 0; j < n; ++j) {
                Vec dcol;
                if (const auto* lin = std::get_if<LinearColumn>(&m.sigma[static_cast<size_t>(j)])) {
                    dcol = lin->s1(t) * dx;
                    if (pr.coupled) dcol += lin->s2(t) * dmean;
                } else {
                    const auto& cc = std::get<ControlledColumn>(m.sigma[static_cast<size_t>(j)]);
                    Vec vj = m.block_of(v, j + 1);
                    dcol = cc.A_x(t, x, mu, vj) * dx + cc.A_v(t, x, mu, vj) * m.block_of(du, j + 1);
                    if (pr.coupled)
                        for (size_t r = 0; r < cc.A_dnu.terms.size(); ++r)
                            dcol += cc.A_dnu.terms[r].coef(t, x, mu, vj) *
                                    col_moms[static_cast<size_t>(j)][r];
                }
                next += dcol * dB(j);
            }
            for (int a = 0; a < A; ++a) {
                const auto& atom = pr.jm.atoms[static_cast<size_t>(a)];
                int cnt = stream_jumps(pr.noise, pr.base_noise, pr.mirror, i, k, a, atom.weight * dt);
                double comp = cnt - atom.weight * dt;
                if (comp != 0.0) {
                    Vec jterm = m.jump.g1(t, atom.mark) * dx;
                    if (pr.coupled) jterm += m.jump.g2(t, atom.mark) * dmean;
                    next += jterm * comp;
                }
            }
            dnxt.row(i) = next.transpose();
        });
    }
}

// sum_{i'} w_{i'} * [Delta M][i'] for a matrix coefficient M in {B_x, A^j_x},
// transposed onto the state index; moms are the population shape moments of
// the matching measure kernel (empty in frozen mode).
Vec delta_coeff_x_T_w(const CoefArgsT& hess_xx, const CoefArgsT& hess_xv, const KernelT& dnu_x,
                      double t, const Vec& x, const EmpiricalMeasure& mu, const Vec& vblk,
                      const Vec& dx, const Vec& dvblk, const std::vector<Vec>& moms, const Vec& w,
                      int n) {
    Vec out = Vec::Zero(n);
    Tensor3 xx = hess_xx(t, x, mu, vblk);
    for (int ip = 0; ip < n; ++ip) out += w(ip) * (xx[static_cast<size_t>(ip)] * dx);
    if (dvblk.size() > 0) {
        Tensor3 xv = hess_xv(t, x, mu, vblk);
        for (int ip = 0; ip < n; ++ip) out += w(ip) * (xv[static_cast<size_t>(ip)] * dvblk);
    }
    for (size_t s = 0; s < dnu_x.terms.size(); ++s) {
        if (s >= moms.size() || moms[s].size() == 0) continue;
        Tensor3 c = dnu_x.terms[s].coef(t, x, mu, vblk);
        for (int ip = 0; ip < n; ++ip)
            out += w(ip) * (c[static_cast<size_t>(ip)].transpose() * moms[s]);
    }
    return out;
}

Mat directional_driver(const DirectionalProblem& pr, int k, const Mat& Phat, const Mat& Qk,
                       const Mat& Rk, const Mat& dYk, const Mat& dUk, const Mat& dPhat,
                       const Mat& dQk, const Mat& dRk) {
    const ModelSpec& m = pr.m;
    const JumpMeasure& jm = pr.jm;
    const double t = pr.ens.grid.time(k);
    const int N = pr.ens.particles();
    const int Npop = pr.pop_ens.particles();
    const int n = m.n();
    const Mat& sysX = pr.ens.states[static_cast<size_t>(k)];
    const Mat& sysU = pr.ens.controls[static_cast<size_t>(k)];
    const Mat& popX = pr.pop_ens.states[static_cast<size_t>(k)];
    const Mat& popU = pr.pop_ens.controls[static_cast<size_t>(k)];
    EmpiricalMeasure mu = pr.pop_ens.measure_at(k);

    const Mat& popP = pr.coupled ? Phat : pr.pop_adj.P[static_cast<size_t>(k)];
    const Mat& popQ = pr.coupled ? Qk : pr.pop_adj.Q[static_cast<size_t>(k)];
    const Mat& popR = pr.coupled ? Rk : pr.pop_adj.R[static_cast<size_t>(k)];
    (void)popR;

    auto kernel_moments = [&](const auto& kernel) {
        std::vector<Vec> out;
        for (const auto& term : kernel.terms)
            out.push_back(pr.coupled ? shape_moment(term.shape, popX, dYk) : Vec());
        return out;
    };

    // drift reductions
    std::vector<Vec> bx_moms = kernel_moments(m.B_dnu_x);
    std::vector<Vec> b2_psi;
    for (const auto& term : m.B_dnu2.terms)
        b2_psi.push_back(pr.coupled ? shape_moment(term.shape2, popX, dYk) : Vec());
    std::vector<Vec> w_dP(m.B_dnu.terms.size(), Vec::Zero(n));
    std::vector<Vec> w_x(m.B_dnu_x.terms.size(), Vec::Zero(n));
    std::vector<Vec> w_v(m.B_dnu_v.terms.size(), Vec::Zero(n));
    std::vector<Mat> w_yy(m.B_dnu_yy.terms.size(), Mat::Zero(n, n));
    std::vector<Mat> w_2(m.B_dnu2.terms.size(), Mat::Zero(n, n));
    for (int mi = 0; mi < Npop; ++mi) {
        Vec x = popX.row(mi).transpose();
        Vec v0 = m.block_of(popU.row(mi).transpose(), 0);
        Vec pw = popP.row(mi).transpose();
        if (pr.coupled) {
            Vec dpw = dPhat.row(mi).transpose();
            for (size_t r = 0; r < m.B_dnu.terms.size(); ++r)
                w_dP[r] += m.B_dnu.terms[r].coef(t, x, mu, v0).transpose() * dpw;
            Vec dym = dYk.row(mi).transpose();
            Vec dum = m.block_of(dUk.row(mi).transpose(), 0);
            for (size_t s = 0; s < m.B_dnu_x.terms.size(); ++s) {
                Tensor3 c = m.B_dnu_x.terms[s].coef(t, x, mu, v0);
                for (int ip = 0; ip < n; ++ip) w_x[s] += pw(ip) * (c[static_cast<size_t>(ip)] * dym);
            }
            for (size_t s = 0; s < m.B_dnu_v.terms.size(); ++s) {
                Tensor3 c = m.B_dnu_v.terms[s].coef(t, x, mu, v0);
                for (int ip = 0; ip < n; ++ip) w_v[s] += pw(ip) * (c[static_cast<size_t>(ip)] * dum);
            }
            for (size_t s = 0; s < m.B_dnu2.terms.size(); ++s) {
                Tensor3 c = m.B_dnu2.terms[s].coef(t, x, mu, v0);
                for (int ip = 0; ip < n; ++ip) w_2[s] += pw(ip) * c[static_cast<size_t>(ip)];
            }
        }
        for (size_t s = 0; s < m.B_dnu_yy.terms.size(); ++s) {
            Tensor3 c = m.B_dnu_yy.terms[s].coef(t, x, mu, v0);
            for (int ip = 0; ip < n; ++ip) w_yy[s] += pw(ip) * c[static_cast<size_t>(ip)];
        }
    }
    for (auto& w : w_dP) w /= Npop;
    for (auto& w : w_x) w /= Npop;
    for (auto& w : w_v) w /= Npop;
    for (auto& w : w_yy) w /= Npop;
    for (auto& w : w_2) w /= Npop;

    // controlled-column reductions
    struct ColRed {
        std::vector<Vec> w_dQ, w_x, w_v, x_moms, psi2;
        std::vector<Mat> w_yy, w_2;
    };
    std::vector<ColRed> cols(static_cast<size_t>(n));
    for (int j = 0; j < n; ++j) {
        const auto* ccp = std::get_if<ControlledColumn>(&m.sigma[static_cast<size_t>(j)]);
        if (!ccp) continue;
        const auto& cc = *ccp;
        ColRed red;
        red.w_dQ.assign(cc.A_dnu.terms.size(), Vec::Zero(n));
        red.w_x.assign(cc.A_dnu_x.terms.size(), Vec::Zero(n));
        red.w_v.assign(cc.A_dnu_v.terms.size(), Vec::Zero(n));
        red.w_yy.assign(cc.A_dnu_yy.terms.size(), Mat::Zero(n, n));
        red.w_2.assign(cc.A_dnu2.terms.size(), Mat::Zero(n, n));
        red.x_moms = kernel_moments(cc.A_dnu_x);
        for (const auto& term : cc.A_dnu2.terms)
            red.psi2.push_back(pr.coupled ? shape_moment(term.shape2, popX, dYk) : Vec());
        for (int mi = 0; mi < Npop; ++mi) {
            Vec x = popX.row(mi).transpose();
            Vec vj = m.block_of(popU.row(mi).transpose(), j + 1);
            Vec qw = popQ.row(mi).segment(j * n, n).transpose();
            if (pr.coupled) {
                Vec dqw = dQk.row(mi).segment(j * n, n).transpose();
                for (size_t r = 0; r < cc.A_dnu.terms.size(); ++r)
                    red.w_dQ[r] += cc.A_dnu.terms[r].coef(t, x, mu, vj).transpose() * dqw;
                Vec dym = dYk.row(mi).transpose();
                Vec dum = m.block_of(dUk.row(mi).transpose(), j + 1);
                for (size_t s = 0; s < cc.A_dnu_x.terms.size(); ++s) {
                    Tensor3 c = cc.A_dnu_x.terms[s].coef(t, x, mu, vj);
                    for (int ip = 0; ip < n; ++ip)
                        red.w_x[s] += qw(ip) * (c[static_cast<size_t>(ip)] * dym);
                }
                for (size_t s = 0; s < cc.A_dnu_v.terms.size(); ++s) {
                    Tensor3 c = cc.A_dnu_v.terms[s].coef(t, x, mu, vj);
                    for (int ip = 0; ip < n; ++ip)
                        red.w_v[s] += qw(ip) * (c[static_cast<size_t>(ip)] * dum);
                }
                for (size_t s = 0; s < cc.A_dnu2.terms.size(); ++s) {
                    Tensor3 c = cc.A_dnu2.terms[s].coef(t, x, mu, vj);
                    for (int ip = 0; ip < n; ++ip) red.w_2[s] += qw(ip) * c[static_cast<size_t>(ip)];
                }
            }
            for (size_t s = 0; s < cc.A_dnu_yy.terms.size(); ++s) {
                Tensor3 c = cc.A_dnu_yy.terms[s].coef(t, x, mu, vj);
                for (int ip = 0; ip < n; ++ip) red.w_yy[s] += qw(ip) * c[static_cast<size_t>(ip)];
            }
        }
        for (auto& w : red.w_dQ) w /= Npop;
        for (auto& w : red.w_x) w /= Npop;
        for (auto& w : red.w_v) w /= Npop;
        for (auto& w : red.w_yy) w /= Npop;
        for (auto& w : red.w_2) w /= Npop;
        cols[static_cast<size_t>(j)] = std::move(red);
    }

    // linear columns / jump first-order population terms
    std::vector<Vec> lin_w(static_cast<size_t>(n), Vec::Zero(n));
    Vec jump_w = Vec::Zero(n);
    if (pr.coupled) {
        for (int j = 0; j < n; ++j)
            if (const auto* lin = std::get_if<LinearColumn>(&m.sigma[static_cast<size_t>(j)])) {
                Vec dqmean = Vec::Zero(n);
                for (int mi = 0; mi < Npop; ++mi) dqmean += dQk.row(mi).segment(j * n, n).transpose();
                lin_w[static_cast<size_t>(j)] = lin->s2(t).transpose() * (dqmean / Npop);
            }
        for (int a = 0; a < jm.count(); ++a) {
            Vec drmean = Vec::Zero(n);
            for (int mi = 0; mi < Npop; ++mi) drmean += dRk.row(mi).segment(a * n, n).transpose();
            jump_w += jm.atoms[static_cast<size_t>(a)].weight *
                      (m.jump.g2(t, jm.atoms[static_cast<size_t>(a)].mark).transpose() * (drmean / Npop));
        }
    }

    // cost reductions
    struct CostRed {
        std::vector<Vec> w_x, w_v, x_moms, v_moms, psi2;
        std::vector<Mat> w_yy, w_2;
    };
    std::vector<CostRed> costs(m.cost_terms.size());
    for (size_t ti = 0; ti < m.cost_terms.size(); ++ti) {
        const auto& term = m.cost_terms[ti];
        CostRed red;
        red.w_x.assign(term.f_dnu_x.terms.size(), Vec::Zero(n));
        red.w_v.assign(term.f_dnu_v.terms.size(), Vec::Zero(n));
        red.w_yy.assign(term.f_dnu_yy.terms.size(), Mat::Zero(n, n));
        red.w_2.assign(term.f_dnu2.terms.size(), Mat::Zero(n, n));
        red.x_moms = kernel_moments(term.f_dnu_x);
        for (const auto& kt : term.f_dnu2.terms)
            red.psi2.push_back(pr.coupled ? shape_moment(kt.shape2, popX, dYk) : Vec());
        for (int mi = 0; mi < Npop; ++mi) {
            Vec x = popX.row(mi).transpose();
            Vec vb = m.block_of(popU.row(mi).transpose(), term.block);
            if (pr.coupled) {
                Vec dym = dYk.row(mi).transpose();
                Vec dum = m.block_of(dUk.row(mi).transpose(), term.block);
                for (size_t s = 0; s < term.f_dnu_x.terms.size(); ++s)
                    red.w_x[s] += term.f_dnu_x.terms[s].coef(t, x, mu, vb) * dym;
                for (size_t s = 0; s < term.f_dnu_v.terms.size(); ++s)
                    red.w_v[s] += term.f_dnu_v.terms[s].coef(t, x, mu, vb) * dum;
                for (size_t s = 0; s < term.f_dnu2.terms.size(); ++s)
                    red.w_2[s] += term.f_dnu2.terms[s].coef(t, x, mu, vb);
            }
            for (size_t s = 0; s < term.f_dnu_yy.terms.size(); ++s)
                red.w_yy[s] += term.f_dnu_yy.terms[s].coef(t, x, mu, vb);
        }
        for (auto& w : red.w_x) w /= Npop;
        for (auto& w : red.w_v) w /= Npop;
        for (auto& w : red.w_yy) w /= Npop;
        for (auto& w : red.w_2) w /= Npop;
        costs[ti] = std::move(red);
    }

    Mat out(N, n);
    parallel_for(N, [&](int i) {
        Vec x = sysX.row(i).transpose();
        Vec v = sysU.row(i).transpose();
        Vec v0 = m.block_of(v, 0);
        Vec dx = dYk.row(i).transpose();
        Vec du = dUk.row(i).transpose();
        Vec du0 = m.block_of(du, 0);
        Vec p = Phat.row(i).transpose();
        Vec dp = dPhat.row(i).transpose();

        Vec acc = m.B_x(t, x, mu, v0).transpose() * dp;
        acc += delta_coeff_x_T_w(m.B_xx, m.B_xv, m.B_dnu_x, t, x, mu, v0, dx, du0, bx_moms, p, n);
        for (int j = 0; j < n; ++j) {
            Vec dqj = dQk.row(i).segment(j * n, n).transpose();
            if (const auto* lin = std::get_if<LinearColumn>(&m.sigma[static_cast<size_t>(j)])) {
                acc += lin->s1(t).transpose() * dqj;
            } else {
                const auto& cc = std::get<ControlledColumn>(m.sigma[static_cast<size_t>(j)]);
                Vec vj = m.block_of(v, j + 1);
                Vec qj = Qk.row(i).segment(j * n, n).transpose();
                acc += cc.A_x(t, x, mu, vj).transpose() * dqj;
                acc += delta_coeff_x_T_w(cc.A_xx, cc.A_xv, cc.A_dnu_x, t, x, mu, vj, dx,
                                         m.block_of(du, j + 1), cols[static_cast<size_t>(j)].x_moms,
                                         qj, n);
            }
        }
        for (int a = 0; a < jm.count(); ++a)
            acc += jm.atoms[static_cast<size_t>(a)].weight *
                   (m.jump.g1(t, jm.atoms[static_cast<size_t>(a)].mark).transpose() *
                    dRk.row(i).segment(a * n, n).transpose());
        for (size_t ti = 0; ti < m.cost_terms.size(); ++ti) {
            const auto& term = m.cost_terms[ti];
            const auto& red = costs[ti];
            Vec vb = m.block_of(v, term.block);
            Vec dub = m.block_of(du, term.block);
            acc += term.f_xx(t, x, mu, vb) * dx;
            if (dub.size() > 0 && term.f_xv) acc += term.f_xv(t, x, mu, vb) * dub;
            if (pr.coupled)
                for (size_t s = 0; s < term.f_dnu_x.terms.size(); ++s)
                    if (red.x_moms[s].size() > 0)
                        acc += term.f_dnu_x.terms[s].coef(t, x, mu, vb).transpose() * red.x_moms[s];
        }

        if (pr.coupled) {
            for (size_t r = 0; r < m.B_dnu.terms.size(); ++r)
                acc += m.B_dnu.terms[r].shape(x) * w_dP[r];
            for (size_t s = 0; s < m.B_dnu_x.terms.size(); ++s)
                acc += m.B_dnu_x.terms[s].shape(x) * w_x[s];
            for (size_t s = 0; s < m.B_dnu_v.terms.size(); ++s)
                acc += m.B_dnu_v.terms[s].shape(x) * w_v[s];
            for (size_t s = 0; s < m.B_dnu2.terms.size(); ++s)
                acc += m.B_dnu2.terms[s].shape(x) * (w_2[s] * b2_psi[s]);
        }
        for (size_t s = 0; s < m.B_dnu_yy.terms.size(); ++s)
            acc += m.B_dnu_yy.terms[s].shape(x) * (w_yy[s] * dx);

        for (int j = 0; j < n; ++j) {
            if (std::holds_alternative<LinearColumn>(m.sigma[static_cast<size_t>(j)])) {
                if (pr.coupled) acc += lin_w[static_cast<size_t>(j)];
                continue;
            }
            const auto& cc = std::get<ControlledColumn>(m.sigma[static_cast<size_t>(j)]);
            const auto& red = cols[static_cast<size_t>(j)];
            if (pr.coupled) {
                for (size_t r = 0; r < cc.A_dnu.terms.size(); ++r)
                    acc += cc.A_dnu.terms[r].shape(x) * red.w_dQ[r];
                for (size_t s = 0; s < cc.A_dnu_x.terms.size(); ++s)
                    acc += cc.A_dnu_x.terms[s].shape(x) * red.w_x[s];
                for (size_t s = 0; s < cc.A_dnu_v.terms.size(); ++s)
                    acc += cc.A_dnu_v.terms[s].shape(x) * red.w_v[s];
                for (size_t s = 0; s < cc.A_dnu2.terms.size(); ++s)
                    acc += cc.A_dnu2.terms[s].shape(x) * (red.w_2[s] * red.psi2[s]);
            }
            for (size_t s = 0; s < cc.A_dnu_yy.terms.size(); ++s)
                acc += cc.A_dnu_yy.terms[s].shape(x) * (red.w_yy[s] * dx);
        }
        if (pr.coupled) acc += jump_w;

        for (size_t ti = 0; ti < m.cost_terms.size(); ++ti) {
            const auto& term = m.cost_terms[ti];
            const auto& red = costs[ti];
            if (pr.coupled) {
                for (size_t s = 0; s < term.f_dnu_x.terms.size(); ++s)
                    acc += term.f_dnu_x.terms[s].shape(x) * red.w_x[s];
                for (size_t s = 0; s < term.f_dnu_v.terms.size(); ++s)
                    acc += term.f_dnu_v.terms[s].shape(x) * red.w_v[s];
                for (size_t s = 0; s < term.f_dnu2.terms.size(); ++s)
                    acc += term.f_dnu2.terms[s].shape(x) * (red.w_2[s] * red.psi2[s]);
            }
            for (size_t s = 0; s < term.f_dnu_yy.terms.size(); ++s)
                acc += term.f_dnu_yy.terms[s].shape(x) * (red.w_yy[s] * dx);
        }
        out.row(i) = acc.transpose();
    });
    return out;
}

Mat directional_terminal(const DirectionalProblem& pr, const Mat& dYT, const Mat& dYT_pop) {
    const ModelSpec& m = pr.m;
    const int N = pr.ens.particles();
    const int Npop = pr.pop_ens.particles();
    const int n = m.n();
    const Mat& sysX = pr.ens.states.back();
    const Mat& popX = pr.pop_ens.states.back();
    EmpiricalMeasure mu(popX);
    Vec empty(0);

    std::vector<Vec> gx_moms;
    for (const auto& term : m.terminal.g_dnu_x.terms)
        gx_moms.push_back(pr.coupled ? shape_moment(term.shape, popX, dYT_pop) : Vec());
    std::vector<Vec> psi2_moms;
    for (const auto& term : m.terminal.g_dnu2.terms)
        psi2_moms.push_back(pr.coupled ? shape_moment(term.shape2, popX, dYT_pop) : Vec());
    std::vector<Vec> hat_x(m.terminal.g_dnu_x.terms.size(), Vec::Zero(n));
    std::vector<Mat> hat_yy(m.terminal.g_dnu_yy.terms.size(), Mat::Zero(n, n));
    std::vector<Mat> hat_2(m.terminal.g_dnu2.terms.size(), Mat::Zero(n, n));
    for (int mi = 0; mi < Npop; ++mi) {
        Vec x = popX.row(mi).transpose();
        if (pr.coupled) {
            Vec dym = dYT_pop.row(mi).transpose();
            for (size_t s = 0; s < m.terminal.g_dnu_x.terms.size(); ++s)
                hat_x[s] += m.terminal.g_dnu_x.terms[s].coef(0.0, x, mu, empty) * dym;
            for (size_t s = 0; s < m.terminal.g_dnu2.terms.size(); ++s)
                hat_2[s] += m.terminal.g_dnu2.terms[s].coef(0.0, x, mu, empty);
        }
        for (size_t s = 0; s < m.terminal.g_dnu_yy.terms.size(); ++s)
            hat_yy[s] += m.terminal.g_dnu_yy.terms[s].coef(0.0, x, mu, empty);
    }
    for (auto& w : hat_x) w /= Npop;
    for (auto& w : hat_yy) w /= Npop;
    for (auto& w : hat_2) w /= Npop;

    Mat out(N, n);
    parallel_for(N, [&](int i) {
        Vec x = sysX.row(i).transpose();
        Vec dx = dYT.row(i).transpose();
        Vec acc = m.terminal.g_xx(x, mu) * dx;
        if (pr.coupled) {
            for (size_t s = 0; s < m.terminal.g_dnu_x.terms.size(); ++s) {
                acc += m.terminal.g_dnu_x.terms[s].coef(0.0, x, mu, empty).transpose() * gx_moms[s];
                acc += m.terminal.g_dnu_x.terms[s].shape(x) * hat_x[s];
            }
            for (size_t s = 0; s < m.terminal.g_dnu2.terms.size(); ++s)
                acc += m.terminal.g_dnu2.terms[s].shape(x) * (hat_2[s] * psi2_moms[s]);
        }
        for (size_t s = 0; s < m.terminal.g_dnu_yy.terms.size(); ++s)
            acc += m.terminal.g_dnu_yy.terms[s].shape(x) * (hat_yy[s] * dx);
        out.row(i) = acc.transpose();
    });
    return out;
}

void directional_backward(const DirectionalProblem& pr, const std::vector<Mat>& dY,
                          const std::vector<Mat>& dU, std::vector<Mat>& dP, std::vector<Mat>& dQ,
                          std::vector<Mat>& dR) {
    const ModelSpec& m = pr.m;
    const TimeGrid& grid = pr.ens.grid;
    const int K = grid.steps;
    const int N = pr.ens.particles();
    const int n = m.n();
    const int A = pr.jm.count();
    const double dt = grid.dt();
    PolyBasis basis(n, pr.reg.basis_degree);

    dP[static_cast<size_t>(K)] = directional_terminal(pr, dY[static_cast<size_t>(K)],
                                                      dY[static_cast<size_t>(K)]);

    for (int k = K - 1; k >= 0; --k) {
        const Mat& Xk = pr.ens.states[static_cast<size_t>(k)];
        const Mat& Pn = pr.adj.P[static_cast<size_t>(k) + 1];
        const Mat& dPn = dP[static_cast<size_t>(k) + 1];

        Mat X = basis.features_all(Xk);
        Mat dX(N, basis.count());
        parallel_for(N, [&](int i) {
            dX.row(i) = (basis.feature_jacobian(Xk.row(i).transpose()) *
                         dY[static_cast<size_t>(k)].row(i).transpose())
                            .transpose();
        });

        RidgeFit pfit = RidgeFit::fit(X, Pn, pr.reg.ridge);
        Mat Phat = pfit.predict(X);
        Mat dbetaP = RidgeFit::fit_directional(X, Pn, pfit.beta, dX, dPn, pr.reg.ridge);
        Mat dPhat = dX * pfit.beta + X * dbetaP;

        Mat centered = Pn - Phat;
        Mat dcentered = dPn - dPhat;

        Mat dB(N, n), dJm(N, A);
        parallel_for(N, [&](int i) {
            dB.row(i) = stream_brownian(pr.noise, pr.base_noise, pr.mirror, i, k, n, dt).transpose();
            for (int a = 0; a < A; ++a) {
                double mean = pr.jm.atoms[static_cast<size_t>(a)].weight * dt;
                dJm(i, a) = (stream_jumps(pr.noise, pr.base_noise, pr.mirror, i, k, a, mean) - mean) / mean;
            }
        });

        Mat Qk(N, n * n), dQk(N, n * n);
        for (int j = 0; j < n; ++j) {
            Mat z = centered.array().colwise() * (dB.col(j).array() / dt);
            Mat dz = dcentered.array().colwise() * (dB.col(j).array() / dt);
            RidgeFit qfit = RidgeFit::fit(X, z, pr.reg.ridge);
            Mat dbeta = RidgeFit::fit_directional(X, z, qfit.beta, dX, dz, pr.reg.ridge);
            Qk.middleCols(j * n, n) = qfit.predict(X);
            dQk.middleCols(j * n, n) = dX * qfit.beta + X * dbeta;
        }
        Mat Rk(N, A * n), dRk(N, A * n);
        for (int a = 0; a < A; ++a) {
            Mat z = centered.array().colwise() * dJm.col(a).array();
            Mat dz = dcentered.array().colwise() * dJm.col(a).array();
            RidgeFit rfit = RidgeFit::fit(X, z, pr.reg.ridge);
            Mat dbeta = RidgeFit::fit_directional(X, z, rfit.beta, dX, dz, pr.reg.ridge);
            Rk.middleCols(a * n, n) = rfit.predict(X);
            dRk.middleCols(a * n, n) = dX * rfit.beta + X * dbeta;
        }

        Mat ddriver = directional_driver(pr, k, Phat, Qk, Rk, dY[static_cast<size_t>(k)],
                                         dU[static_cast<size_t>(k)], dPhat, dQk, dRk);
        dP[static_cast<size_t>(k)] = dPhat + dt * ddriver;
        dQ[static_cast<size_t>(k)] = std::move(dQk);
        dR[static_cast<size_t>(k)] = std::move(dRk);
    }
}

Mat directional_feedback(const DirectionalProblem& pr, int k, const Mat& dYk, const Mat& dPk,
                         const Mat& dQk) {
    const ModelSpec& m = pr.m;
    const double t = pr.ens.grid.time(k);
    const int N = pr.ens.particles();
    const int n = m.n();
    const Mat& sysX = pr.ens.states[static_cast<size_t>(k)];
    const Mat& sysU = pr.ens.controls[static_cast<size_t>(k)];
    const Mat& popX = pr.pop_ens.states[static_cast<size_t>(k)];
    EmpiricalMeasure mu = pr.pop_ens.measure_at(k);

    std::vector<Vec> bv_moms;
    for (const auto& term : m.B_dnu_v.terms)
        bv_moms.push_back(pr.coupled ? shape_moment(term.shape, popX, dYk) : Vec());
    std::vector<std::vector<Vec>> av_moms(static_cast<size_t>(n));
    for (int j = 0; j < n; ++j)
        if (const auto* cc = std::get_if<ControlledColumn>(&m.sigma[static_cast<size_t>(j)]))
            for (const auto& term : cc->A_dnu_v.terms)
                av_moms[static_cast<size_t>(j)].push_back(
                    pr.coupled ? shape_moment(term.shape, popX, dYk) : Vec());
    std::vector<std::vector<Vec>> fv_moms(m.cost_terms.size());
    for (size_t ti = 0; ti < m.cost_terms.size(); ++ti)
        for (const auto& term : m.cost_terms[ti].f_dnu_v.terms)
            fv_moms[ti].push_back(pr.coupled ? shape_moment(term.shape, popX, dYk) : Vec());

    Mat out = Mat::Zero(N, m.d());
    parallel_for(N, [&](int i) {
        Vec x = sysX.row(i).transpose();
        Vec u = sysU.row(i).transpose();
        Vec dx = dYk.row(i).transpose();

        auto solve_block = [&](int blk, const CoefArgs& coef_v, const CoefArgsT& hess_xv,
                               const CoefArgsT& hess_vv, const KernelT& dnu_v,
                               const std::vector<Vec>& moms, const Vec& w, const Vec& dw) {
            const int dj = m.d_of_block(blk);
            Vec ub = m.block_of(u, blk);
            Mat H = Mat::Zero(dj, dj);
            Vec rhs = coef_v(t, x, mu, ub).transpose() * dw;
            Tensor3 xv = hess_xv(t, x, mu, ub);  // [i'] (x-row, v-col)
            Tensor3 vv = hess_vv(t, x, mu, ub);  // [i'] (v, v)
            for (int ip = 0; ip < n; ++ip) {
                H += w(ip) * vv[static_cast<size_t>(ip)];
                rhs += w(ip) * (xv[static_cast<size_t>(ip)].transpose() * dx);
            }
            if (pr.coupled)
                for (size_t s = 0; s < dnu_v.terms.size(); ++s) {
                    if (moms[s].size() == 0) continue;
                    Tensor3 c = dnu_v.terms[s].coef(t, x, mu, ub);
                    for (int ip = 0; ip < n; ++ip)
                        rhs += w(ip) * (c[static_cast<size_t>(ip)].transpose() * moms[s]);
                }
            for (size_t ti = 0; ti < m.cost_terms.size(); ++ti) {
                const auto& term = m.cost_terms[ti];
                if (term.block != blk) continue;
                H += term.f_vv(t, x, mu, ub);
                rhs += term.f_xv(t, x, mu, ub).transpose() * dx;
                if (pr.coupled)
                    for (size_t s = 0; s < term.f_dnu_v.terms.size(); ++s)
                        if (fv_moms[ti][s].size() > 0)
                            rhs += term.f_dnu_v.terms[s].coef(t, x, mu, ub).transpose() *
                                   fv_moms[ti][s];
            }
            Vec du = H.fullPivLu().solve(-rhs);
            out.row(i).segment(m.block_offset(blk), dj) = du.transpose();
        };

        solve_block(0, m.B_v, m.B_xv, m.B_vv, m.B_dnu_v, bv_moms,
                    pr.adj.P[static_cast<size_t>(k)].row(i).transpose(), dPk.row(i).transpose());
        for (int j = 1; j <= n; ++j) {
            if (m.d_of_block(j) == 0) continue;
            const auto& cc = std::get<ControlledColumn>(m.sigma[static_cast<size_t>(j - 1)]);
            solve_block(j, cc.A_v, cc.A_xv, cc.A_vv, cc.A_dnu_v, av_moms[static_cast<size_t>(j - 1)],
                        pr.adj.Q[static_cast<size_t>(k)].row(i).segment((j - 1) * n, n).transpose(),
                        dQk.row(i).segment((j - 1) * n, n).transpose());
        }
    });
    return out;
}

FlowArrays run_directional(const DirectionalProblem& pr, const Mat& eta,
                           const SensitivityConfig& scfg) {
    const TimeGrid& grid = pr.ens.grid;
    const int N = pr.ens.particles();
    const int n = pr.m.n();
    const int d = pr.m.d();
    const int A = pr.jm.count();
    const double dt = grid.dt();

    // the sweep is exactly linear in the direction; run it at unit scale
    double scale = std::sqrt(eta.squaredNorm() / N);
    Mat eta_unit = scale > 0.0 ? Mat(eta / scale) : eta;

    FlowArrays f;
    f.dY.assign(static_cast<size_t>(grid.steps) + 1, Mat::Zero(N, n));
    f.dP.assign(static_cast<size_t>(grid.steps) + 1, Mat::Zero(N, n));
    f.dQ.assign(static_cast<size_t>(grid.steps), Mat::Zero(N, n * n));
    f.dR.assign(static_cast<size_t>(grid.steps), Mat::Zero(N, A * n));
    f.dU.assign(static_cast<size_t>(grid.steps), Mat::Zero(N, d));

    bool converged = scale == 0.0;
    for (int it = 0; !converged && it < scfg.max_iter; ++it) {
        directional_forward(pr, f.dU, eta_unit, f.dY);
        directional_backward(pr, f.dY, f.dU, f.dP, f.dQ, f.dR);
        std::vector<Mat> dU_new(f.dU.size());
        for (int k = 0; k < grid.steps; ++k)
            dU_new[static_cast<size_t>(k)] = directional_feedback(
                pr, k, f.dY[static_cast<size_t>(k)], f.dP[static_cast<size_t>(k)],
                f.dQ[static_cast<size_t>(k)]);
        double change = control_field_distance(dU_new, f.dU, dt);
        f.dU = std::move(dU_new);
        if (change <= scfg.tol) converged = true;
    }
    if (!converged)
        throw NoConvergence("directional sweep: linear fixed point did not settle");
    directional_forward(pr, f.dU, eta_unit, f.dY);
    directional_backward(pr, f.dY, f.dU, f.dP, f.dQ, f.dR);

    if (scale != 1.0 && scale != 0.0) {
        for (auto& a : f.dY) a *= scale;
        for (auto& a : f.dP) a *= scale;
        for (auto& a : f.dQ) a *= scale;
        for (auto& a : f.dR) a *= scale;
        for (auto& a : f.dU) a *= scale;
    }
    return f;
}

}  // namespace

JacobianFlow solve_jacobian_flow(const ModelSpec& m, const JumpMeasure& jm, const SolveResult& base,
                                 uint64_t base_seed, const Mat& eta, const RegressionConfig& reg,
                                 const MinimizerSettings& min_settings,
                                 const SensitivityConfig& scfg) {
    (void)min_settings;
    scfg.validate();
    require_second_order(m);
    NoiseBundle noise{base_seed, false};
    static const std::vector<int> no_mirror;
    DirectionalProblem pr{m,    jm,           base.ensemble, base.adjoint, noise, noise,
                          no_mirror, base.ensemble, base.adjoint, true,  reg};
    JacobianFlow out;
    out.eta = eta;
    out.flow = run_directional(pr, eta, scfg);
    return out;
}

PinnedJacobian solve_pinned_jacobian(const ModelSpec& m, const JumpMeasure& jm,
                                     const SolveResult& base, const PinnedFlow& pinned,
                                     const PinnedConfig& pcfg, const RegressionConfig& reg,
                                     const MinimizerSettings& min_settings,
                                     const SensitivityConfig& scfg) {
    (void)min_settings;
    scfg.validate();
    require_second_order(m);
    NoiseBundle pin{pcfg.seed, true};
    NoiseBundle base_noise{pcfg.seed, false};
    DirectionalProblem pr{m,   jm,          pinned.ens, pinned.adj, pin, base_noise,
                          pcfg.mirror, base.ensemble, base.adjoint, false, reg};
    PinnedJacobian out;
    const int N = pinned.ens.particles();
    for (int c = 0; c < m.n(); ++c) {
        Mat eta = Mat::Zero(N, m.n());
        eta.col(c).setOnes();
        out.columns.push_back(run_directional(pr, eta, scfg));
    }
    return out;
}

}  // namespace mfjump
