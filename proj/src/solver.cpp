#include "mfjump/solver.hpp"

#include <chrono>
#include <cmath>
#include <iostream>
#include <sstream>

#include "mfjump/errors.hpp"

namespace mfjump {

void SolveConfig::validate() const {
    grid.validate();
    regression.validate();
    minimizer.validate();
    if (particles < 2) throw DomainError("SolveConfig: need at least two particles");
    if (!(damping > 0.0) || damping > 1.0) throw DomainError("SolveConfig: damping in (0,1]");
    if (!(tol_control > 0.0)) throw DomainError("SolveConfig: tol_control > 0");
    if (max_picard < 1) throw DomainError("SolveConfig: max_picard >= 1");
}

double control_field_distance(const std::vector<Mat>& a, const std::vector<Mat>& b, double dt) {
    double acc = 0.0;
    for (size_t k = 0; k < a.size(); ++k)
        acc += dt * (a[k] - b[k]).squaredNorm() / a[k].rows();
    return std::sqrt(acc);
}

namespace {

double evaluate_cost_local(const ModelSpec& m, const ParticleEnsemble& ens) {
    const double dt = ens.grid.dt();
    double acc = 0.0;
    for (int k = 0; k < ens.grid.steps; ++k) {
        EmpiricalMeasure mu(ens.states[static_cast<size_t>(k)]);
        double t = ens.grid.time(k);
        double step_acc = 0.0;
        for (int i = 0; i < ens.particles(); ++i)
            step_acc += m.running_cost(t, ens.states[static_cast<size_t>(k)].row(i).transpose(), mu,
                                       ens.controls[static_cast<size_t>(k)].row(i).transpose());
        acc += dt * step_acc / ens.particles();
    }
    EmpiricalMeasure muT(ens.states[static_cast<size_t>(ens.grid.steps)]);
    double term = 0.0;
    for (int i = 0; i < ens.particles(); ++i)
        term += m.terminal.g(ens.states[static_cast<size_t>(ens.grid.steps)].row(i).transpose(), muT);
    return acc + term / ens.particles();
}

double state_moment_ratio(const ParticleEnsemble& ens) {
    const int N = ens.particles();
    double sup2 = 0.0;
    for (int i = 0; i < N; ++i) {
        double best = 0.0;
        for (const auto& s : ens.states) best = std::max(best, s.row(i).squaredNorm());
        sup2 += best;
    }
    sup2 /= N;
    double data = 1.0 + ens.states[0].squaredNorm() / N;
    for (const auto& c : ens.controls) data += ens.grid.dt() * c.squaredNorm() / N;
    return sup2 / data;
}

}  // namespace

SolveResult solve_mftc(const ModelSpec& m, const JumpMeasure& jm, const EmpiricalMeasure& init,
                       const SolveConfig& cfg) {
    cfg.validate();
    jm.validate();
    auto t_start = std::chrono::steady_clock::now();

    SolveResult res;
    res.report.sufficiency = check_sufficiency_condition(m.constants);
    if (!res.report.sufficiency.holds()) {
        if (cfg.require_sufficiency)
            throw DomainError("solve_mftc: sufficiency condition fails (margins " +
                              std::to_string(res.report.sufficiency.margin_i) + ", " +
                              std::to_string(res.report.sufficiency.margin_ii) +
                              "); set require_sufficiency=false to proceed");
        std::cerr << "solve_mftc: warning, sufficiency condition fails; continuing\n";
    }

    NoiseBundle noise{cfg.seed, false};
    SimulateOptions sopt{cfg.blowup_cap};
    const double dt = cfg.grid.dt();

    std::vector<Mat> control(static_cast<size_t>(cfg.grid.steps), Mat::Zero(init.size(), m.d()));

    ParticleEnsemble ens;
    AdjointEnsemble adj;
    bool converged = false;
    int it = 0;
    for (; it < cfg.max_picard; ++it) {
        try {
            ens = simulate_forward(m, jm, init, FeedbackPolicy::from_field(control), cfg.grid, noise,
                                   sopt);
            adj = solve_adjoint(m, jm, ens, noise, cfg.regression);
        } catch (BlowUp& e) {
            throw BlowUp(std::string(e.what()) + " (picard iteration " + std::to_string(it) + ")",
                         e.step, e.particle);
        }

        std::vector<Mat> updated(control.size());
        for (int k = 0; k < cfg.grid.steps; ++k) {
            const Mat& Xk = ens.states[static_cast<size_t>(k)];
            EmpiricalMeasure mu(Xk);
            Mat fresh = assemble_feedback(m, jm, cfg.grid.time(k), Xk, mu,
                                          adj.P[static_cast<size_t>(k)],
                                          adj.Q[static_cast<size_t>(k)], cfg.minimizer);
            updated[static_cast<size_t>(k)] =
                (1.0 - cfg.damping) * control[static_cast<size_t>(k)] + cfg.damping * fresh;
        }
        double change = control_field_distance(updated, control, dt);
        res.report.control_change_history.push_back(change);
        control = std::move(updated);
        if (change <= cfg.tol_control) {
            converged = true;
            ++it;
            break;
        }
    }

    // final pass so the returned ensemble/adjoint match the accepted control
    ens = simulate_forward(m, jm, init, FeedbackPolicy::from_field(control), cfg.grid, noise, sopt);
    ens.controls = control;
    adj = solve_adjoint(m, jm, ens, noise, cfg.regression);

    res.report.converged = converged;
    res.report.iterations = it;
    res.report.final_cost = evaluate_cost_local(m, ens);
    res.report.optimality_residual = optimality_residual(m, ens, adj);
    res.report.cone = cone_margins(m, ens, adj);
    res.report.state_moment_ratio = state_moment_ratio(ens);
    res.report.adjoint_energy_ratio = adjoint_energy_ratio(ens, adj, jm);
    res.report.wallclock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    res.ensemble = std::move(ens);
    res.adjoint = std::move(adj);

    if (!converged)
        throw NoConvergence("solve_mftc: no convergence after " + std::to_string(it) +
                            " iterations, last change " +
                            std::to_string(res.report.control_change_history.back()) + "\n" +
                            res.report.to_json());
    return res;
}

std::string SolverReport::to_json() const {
    std::ostringstream os;
    os.precision(12);
    os << "{\n";
    os << "  \"converged\": " << (converged ? "true" : "false") << ",\n";
    os << "  \"iterations\": " << iterations << ",\n";
    os << "  \"control_change_history\": [";
    for (size_t i = 0; i < control_change_history.size(); ++i)
        os << (i ? ", " : "") << control_change_history[i];
    os << "],\n";
    os << "  \"final_cost\": " << final_cost << ",\n";
    os << "  \"optimality_residual\": " << optimality_residual << ",\n";
    os << "  \"cone_margins\": {\"P\": " << cone.min_margin_P << ", \"Q\": " << cone.min_margin_Q
       << ", \"u\": " << cone.min_margin_u << ", \"scale\": " << cone.scale << "},\n";
    os << "  \"sufficiency\": {\"holds_i\": " << (sufficiency.holds_i ? "true" : "false")
       << ", \"holds_ii\": " << (sufficiency.holds_ii ? "true" : "false")
       << ", \"margin_i\": " << sufficiency.margin_i << ", \"margin_ii\": " << sufficiency.margin_ii
       << "},\n";
    os << "  \"state_moment_ratio\": " << state_moment_ratio << ",\n";
    os << "  \"adjoint_energy_ratio\": " << adjoint_energy_ratio << ",\n";
    os << "  \"wallclock_seconds\": " << wallclock_seconds << "\n";
    os << "}";
    return os.str();
}

double snorm_gap(const SolveResult& a, const SolveResult& b, const JumpMeasure& jm) {
    const int N = a.ensemble.particles();
    const int K = a.ensemble.grid.steps;
    const int n = a.adjoint.dim();
    const double dt = a.ensemble.grid.dt();

    double supY = 0.0, supP = 0.0;
    for (int i = 0; i < N; ++i) {
        double by = 0.0, bp = 0.0;
        for (int k = 0; k <= K; ++k) {
            by = std::max(by, (a.ensemble.states[static_cast<size_t>(k)].row(i) -
                               b.ensemble.states[static_cast<size_t>(k)].row(i))
                                  .squaredNorm());
            bp = std::max(bp, (a.adjoint.P[static_cast<size_t>(k)].row(i) -
                               b.adjoint.P[static_cast<size_t>(k)].row(i))
                                  .squaredNorm());
        }
        supY += by;
        supP += bp;
    }
    double acc = (supY + supP) / N;
    for (int k = 0; k < K; ++k) {
        acc += dt *
               (a.adjoint.Q[static_cast<size_t>(k)] - b.adjoint.Q[static_cast<size_t>(k)]).squaredNorm() /
               N;
        acc += dt *
               (a.ensemble.controls[static_cast<size_t>(k)] - b.ensemble.controls[static_cast<size_t>(k)])
                   .squaredNorm() /
               N;
        for (int at = 0; at < jm.count(); ++at)
            acc += dt * jm.atoms[static_cast<size_t>(at)].weight *
                   (a.adjoint.R[static_cast<size_t>(k)].middleCols(at * n, n) -
                    b.adjoint.R[static_cast<size_t>(k)].middleCols(at * n, n))
                       .squaredNorm() /
                   N;
    }
    return std::sqrt(acc);
}

LipschitzProbe lipschitz_probe(const ModelSpec& m, const JumpMeasure& jm,
                               const EmpiricalMeasure& init1, const EmpiricalMeasure& init2,
                               const SolveConfig& cfg) {
    if (init1.size() != init2.size())
        throw DomainError("lipschitz_probe: coupled initials need equal particle counts");
    SolveResult r1 = solve_mftc(m, jm, init1, cfg);
    SolveResult r2 = solve_mftc(m, jm, init2, cfg);
    LipschitzProbe out;
    out.initial_gap = std::sqrt((init1.points() - init2.points()).squaredNorm() / init1.size());
    out.solution_gap = snorm_gap(r1, r2, jm);
    out.ratio = out.initial_gap < 1e-12 ? 0.0 : out.solution_gap / out.initial_gap;
    return out;
}

}  // namespace mfjump
