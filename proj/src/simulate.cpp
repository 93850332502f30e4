#include "mfjump/simulate.hpp"

#include <cmath>

#include "mfjump/errors.hpp"
#include "mfjump/parallel.hpp"
#include "mfjump/rng.hpp"

namespace mfjump {

void TimeGrid::validate() const {
    if (!(t0 < T)) throw DomainError("TimeGrid: t0 < T required");
    if (steps < 1) throw DomainError("TimeGrid: steps >= 1 required");
}

Vec NoiseBundle::brownian(int particle, int step, int dim, double dt) const {
    CounterRng rng(seed,
                   static_cast<uint64_t>(pinned_stream ? StreamTag::pinned_brownian : StreamTag::brownian),
                   static_cast<uint64_t>(particle), static_cast<uint64_t>(step));
    double sd = std::sqrt(dt);
    Vec out(dim);
    for (int i = 0; i < dim; ++i) out(i) = sd * rng.next_normal();
    return out;
}

int NoiseBundle::jump_count(int particle, int step, int atom, double mean) const {
    CounterRng rng(seed,
                   static_cast<uint64_t>(pinned_stream ? StreamTag::pinned_jump : StreamTag::jump),
                   static_cast<uint64_t>(particle), static_cast<uint64_t>(step),
                   static_cast<uint64_t>(atom));
    return rng.next_poisson(mean);
}

FeedbackPolicy FeedbackPolicy::zero(int dim_control) {
    FeedbackPolicy p;
    p.eval = [dim_control](int, int, double, const Vec&, const EmpiricalMeasure&) {
        return Vec::Zero(dim_control);
    };
    return p;
}

FeedbackPolicy FeedbackPolicy::from_callback(std::function<Vec(double, const Vec&, const EmpiricalMeasure&)> cb) {
    FeedbackPolicy p;
    p.eval = [cb = std::move(cb)](int, int, double t, const Vec& x, const EmpiricalMeasure& mu) {
        return cb(t, x, mu);
    };
    return p;
}

FeedbackPolicy FeedbackPolicy::from_field(const std::vector<Mat>& field) {
    FeedbackPolicy p;
    p.eval = [&field](int step, int particle, double, const Vec&, const EmpiricalMeasure&) {
        return Vec(field[static_cast<size_t>(step)].row(particle).transpose());
    };
    return p;
}

ParticleEnsemble simulate_forward(const ModelSpec& m, const JumpMeasure& jm,
                                  const EmpiricalMeasure& init, const FeedbackPolicy& policy,
                                  const TimeGrid& grid, const NoiseBundle& noise,
                                  const SimulateOptions& opt) {
    grid.validate();
    const int N = init.size();
    const int n = m.n();
    const int d = m.d();
    const int A = jm.count();
    const double dt = grid.dt();

    ParticleEnsemble ens;
    ens.grid = grid;
    ens.states.assign(static_cast<size_t>(grid.steps) + 1, Mat(N, n));
    ens.controls.assign(static_cast<size_t>(grid.steps), Mat(N, d));
    ens.states[0] = init.points();

    for (int k = 0; k < grid.steps; ++k) {
        const double t = grid.time(k);
        const Mat& cur = ens.states[static_cast<size_t>(k)];
        Mat& ctrl = ens.controls[static_cast<size_t>(k)];
        Mat& nxt = ens.states[static_cast<size_t>(k) + 1];
        EmpiricalMeasure mu(cur);

        parallel_for(N, [&](int i) {
            Vec x = cur.row(i).transpose();
            Vec v = policy.eval(k, i, t, x, mu);
            ctrl.row(i) = v.transpose();

            Vec dB = noise.brownian(i, k, n, dt);
            Vec next = x + m.drift(t, x, mu, v) * dt;
            for (int j = 0; j < n; ++j) next += m.sigma_col(j, t, x, mu, v) * dB(j);
            for (int a = 0; a < A; ++a) {
                const auto& atom = jm.atoms[static_cast<size_t>(a)];
                int cnt = noise.jump_count(i, k, a, atom.weight * dt);
                double compensated = cnt - atom.weight * dt;
                if (compensated != 0.0) next += m.gamma(t, x, mu, atom.mark) * compensated;
            }
            nxt.row(i) = next.transpose();
        });

        for (int i = 0; i < N; ++i) {
            if (!nxt.row(i).allFinite() || nxt.row(i).cwiseAbs().maxCoeff() > opt.blowup_cap)
                throw BlowUp("simulate_forward: state escaped the cap at step " + std::to_string(k + 1) +
                                 ", particle " + std::to_string(i),
                             k + 1, i);
        }
    }
    return ens;
}

std::vector<Mat> simulate_linearized(const ModelSpec& m, const JumpMeasure& jm,
                                     const ParticleEnsemble& base, const std::vector<Mat>& du_field,
                                     const Mat& eta, const NoiseBundle& noise,
                                     const SimulateOptions& opt) {
    const TimeGrid& grid = base.grid;
    const int N = base.particles();
    const int n = m.n();
    const int A = jm.count();
    const double dt = grid.dt();
    const bool with_du = !du_field.empty();

    std::vector<Mat> dY(static_cast<size_t>(grid.steps) + 1, Mat(N, n));
    dY[0] = eta;

    for (int k = 0; k < grid.steps; ++k) {
        const double t = grid.time(k);
        const Mat& cur = base.states[static_cast<size_t>(k)];
        const Mat& ctrl = base.controls[static_cast<size_t>(k)];
        const Mat& dcur = dY[static_cast<size_t>(k)];
        Mat& dnxt = dY[static_cast<size_t>(k) + 1];
        EmpiricalMeasure mu(cur);
        Vec dmean = dcur.colwise().mean().transpose();

        // shape moments (1/N) sum shape_r(Y_m) dY_m for the drift and each
        // controlled column's measure kernel
        auto shape_moment = [&](const ShapeFn& shape) {
            Vec acc = Vec::Zero(n);
            for (int mi = 0; mi < N; ++mi)
                acc += shape(cur.row(mi).transpose()) * dcur.row(mi).transpose();
            return Vec(acc / N);
        };
        std::vector<Vec> drift_moments;
        for (const auto& term : m.B_dnu.terms) drift_moments.push_back(shape_moment(term.shape));
        std::vector<std::vector<Vec>> col_moments(static_cast<size_t>(n));
        for (int j = 0; j < n; ++j) {
            if (const auto* cc = std::get_if<ControlledColumn>(&m.sigma[static_cast<size_t>(j)]))
                for (const auto& term : cc->A_dnu.terms)
                    col_moments[static_cast<size_t>(j)].push_back(shape_moment(term.shape));
        }

        parallel_for(N, [&](int i) {
            Vec x = cur.row(i).transpose();
            Vec v = ctrl.row(i).transpose();
            Vec dx = dcur.row(i).transpose();
            Vec v0 = m.block_of(v, 0);
            Vec du = with_du ? Vec(du_field[static_cast<size_t>(k)].row(i).transpose()) : Vec(Vec::Zero(m.d()));

            Vec incr = m.B_x(t, x, mu, v0) * dx + m.B_v(t, x, mu, v0) * m.block_of(du, 0);
            for (size_t r = 0; r < m.B_dnu.terms.size(); ++r)
                incr += m.B_dnu.terms[r].coef(t, x, mu, v0) * drift_moments[r];
            Vec next = dx + incr * dt;

            Vec dB = noise.brownian(i, k, n, dt);
            for (int j = 0; j < n; ++j) {
                Vec dcol;
                if (const auto* lin = std::get_if<LinearColumn>(&m.sigma[static_cast<size_t>(j)])) {
                    dcol = lin->s1(t) * dx + lin->s2(t) * dmean;
                } else {
                    const auto& cc = std::get<ControlledColumn>(m.sigma[static_cast<size_t>(j)]);
                    Vec vj = m.block_of(v, j + 1);
                    dcol = cc.A_x(t, x, mu, vj) * dx + cc.A_v(t, x, mu, vj) * m.block_of(du, j + 1);
                    for (size_t r = 0; r < cc.A_dnu.terms.size(); ++r)
                        dcol += cc.A_dnu.terms[r].coef(t, x, mu, vj) * col_moments[static_cast<size_t>(j)][r];
                }
                next += dcol * dB(j);
            }
            for (int a = 0; a < A; ++a) {
                const auto& atom = jm.atoms[static_cast<size_t>(a)];
                int cnt = noise.jump_count(i, k, a, atom.weight * dt);
                double compensated = cnt - atom.weight * dt;
                if (compensated != 0.0)
                    next += (m.jump.g1(t, atom.mark) * dx + m.jump.g2(t, atom.mark) * dmean) * compensated;
            }
            dnxt.row(i) = next.transpose();
        });

        for (int i = 0; i < N; ++i)
            if (!dnxt.row(i).allFinite() || dnxt.row(i).cwiseAbs().maxCoeff() > opt.blowup_cap)
                throw BlowUp("simulate_linearized: variation escaped the cap", k + 1, i);
    }
    return dY;
}

Mat gaussian_cloud(int particles, int dim, const Vec& mean, double stddev, uint64_t seed) {
    Mat pts(particles, dim);
    for (int i = 0; i < particles; ++i) {
        CounterRng rng(seed, static_cast<uint64_t>(StreamTag::init), static_cast<uint64_t>(i));
        for (int c = 0; c < dim; ++c) pts(i, c) = mean(c) + stddev * rng.next_normal();
    }
    return pts;
}

}  // namespace mfjump
