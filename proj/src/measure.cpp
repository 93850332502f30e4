#include "mfjump/measure.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "mfjump/errors.hpp"

namespace mfjump {

EmpiricalMeasure::EmpiricalMeasure(Mat points) : points_(std::move(points)) {
    if (points_.rows() < 1 || points_.cols() < 1)
        throw DomainError("EmpiricalMeasure: need at least one particle and one coordinate");
    if (!points_.allFinite())
        throw DomainError("EmpiricalMeasure: non-finite coordinate");
    const int n = size();
    mean_ = points_.colwise().mean().transpose();
    double s1 = 0.0, s2 = 0.0;
    for (int i = 0; i < n; ++i) {
        double norm2 = points_.row(i).squaredNorm();
        s1 += std::sqrt(norm2);
        s2 += norm2;
    }
    m1_ = s1 / n;
    m2_ = std::sqrt(s2 / n);
}

double moment1(const EmpiricalMeasure& mu) { return mu.moment1(); }
double moment2(const EmpiricalMeasure& mu) { return mu.moment2(); }

Vec mf_expectation(const EmpiricalMeasure& mu, const std::function<Vec(const Vec&)>& kernel) {
    Vec acc = kernel(mu.point(0));
    for (int i = 1; i < mu.size(); ++i) acc += kernel(mu.point(i));
    return acc / mu.size();
}

double mf_expectation_scalar(const EmpiricalMeasure& mu, const std::function<double(const Vec&)>& kernel) {
    double acc = 0.0;
    for (int i = 0; i < mu.size(); ++i) acc += kernel(mu.point(i));
    return acc / mu.size();
}

namespace {

// Strided subsample keeping the stored order; deterministic by construction.
Mat subsample(const Mat& pts, int target) {
    const int n = static_cast<int>(pts.rows());
    Mat out(target, pts.cols());
    for (int i = 0; i < target; ++i) {
        int idx = static_cast<int>((static_cast<long long>(i) * n) / target);
        out.row(i) = pts.row(idx);
    }
    return out;
}

double w2_sorted_1d(const Mat& a, const Mat& b) {
    std::vector<double> x(a.rows()), y(b.rows());
    for (int i = 0; i < a.rows(); ++i) x[i] = a(i, 0);
    for (int i = 0; i < b.rows(); ++i) y[i] = b(i, 0);
    std::sort(x.begin(), x.end());
    std::sort(y.begin(), y.end());
    double acc = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        double d = x[i] - y[i];
        acc += d * d;
    }
    return std::sqrt(acc / x.size());
}

// Jonker-Volgenant style shortest augmenting path assignment on the squared
// distance matrix; exact, O(N^3).
double w2_assignment(const Mat& a, const Mat& b) {
    const int n = static_cast<int>(a.rows());
    Mat cost(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) cost(i, j) = (a.row(i) - b.row(j)).squaredNorm();

    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<int> p(n + 1, 0), way(n + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(n + 1, inf);
        std::vector<char> used(n + 1, false);
        do {
            used[j0] = true;
            int i0 = p[j0], j1 = 0;
            double delta = inf;
            for (int j = 1; j <= n; ++j) {
                if (used[j]) continue;
                double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    double acc = 0.0;
    for (int j = 1; j <= n; ++j) acc += cost(p[j] - 1, j - 1);
    return std::sqrt(acc / n);
}

}  // namespace

double wasserstein2(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu) {
    if (mu.dim() != nu.dim())
        throw DomainError("wasserstein2: dimension mismatch");
    Mat a = mu.points(), b = nu.points();
    if (a.rows() != b.rows()) {
        int target = static_cast<int>(std::min(a.rows(), b.rows()));
        if (a.rows() > target) a = subsample(a, target);
        if (b.rows() > target) b = subsample(b, target);
    }
    if (mu.dim() == 1) return w2_sorted_1d(a, b);
    if (a.rows() > 2000)
        throw SizeLimit("wasserstein2: exact assignment capped at N=2000 in dimension > 1");
    return w2_assignment(a, b);
}

}  // namespace mfjump
