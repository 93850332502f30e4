#include "mfjump/regression.hpp"

#include <Eigen/Cholesky>

#include "mfjump/errors.hpp"

namespace mfjump {

void RegressionConfig::validate() const {
    if (basis_degree < 1 || basis_degree > 4)
        throw DomainError("RegressionConfig: basis degree must lie in [1, 4]");
    if (!(ridge > 0.0)) throw DomainError("RegressionConfig: ridge must be positive");
}

namespace {

void enumerate(int dim, int degree, std::vector<int>& cur, int remaining,
               std::vector<std::vector<int>>& out) {
    if (static_cast<int>(cur.size()) == dim) {
        out.push_back(cur);
        return;
    }
    for (int e = 0; e <= remaining; ++e) {
        cur.push_back(e);
        enumerate(dim, degree, cur, remaining - e, out);
        cur.pop_back();
    }
}

}  // namespace

PolyBasis::PolyBasis(int dim_, int degree_) : dim(dim_), degree(degree_) {
    std::vector<int> cur;
    enumerate(dim, degree, cur, degree, expos);
    // constant feature first, then by total degree for readability
    std::stable_sort(expos.begin(), expos.end(), [](const auto& a, const auto& b) {
        int sa = 0, sb = 0;
        for (int e : a) sa += e;
        for (int e : b) sb += e;
        return sa < sb;
    });
}

Vec PolyBasis::features(const Vec& x) const {
    Vec out(count());
    for (int f = 0; f < count(); ++f) {
        double v = 1.0;
        for (int c = 0; c < dim; ++c)
            for (int e = 0; e < expos[static_cast<size_t>(f)][static_cast<size_t>(c)]; ++e) v *= x(c);
        out(f) = v;
    }
    return out;
}

Mat PolyBasis::features_all(const Mat& pts) const {
    Mat out(pts.rows(), count());
    for (int i = 0; i < pts.rows(); ++i) out.row(i) = features(pts.row(i).transpose()).transpose();
    return out;
}

Mat PolyBasis::feature_jacobian(const Vec& x) const {
    Mat out = Mat::Zero(count(), dim);
    for (int f = 0; f < count(); ++f) {
        const auto& ex = expos[static_cast<size_t>(f)];
        for (int c = 0; c < dim; ++c) {
            if (ex[static_cast<size_t>(c)] == 0) continue;
            double v = static_cast<double>(ex[static_cast<size_t>(c)]);
            for (int cc = 0; cc < dim; ++cc) {
                int e = ex[static_cast<size_t>(cc)] - (cc == c ? 1 : 0);
                for (int k = 0; k < e; ++k) v *= x(cc);
            }
            out(f, c) = v;
        }
    }
    return out;
}

RidgeFit RidgeFit::fit(const Mat& X, const Mat& Y, double ridge) {
    const double N = static_cast<double>(X.rows());
    Mat gram = X.transpose() * X / N;
    gram.diagonal().array() += ridge;
    Eigen::LDLT<Mat> ldlt(gram);
    if (ldlt.info() != Eigen::Success)
        throw SingularRegression("ridge regression: normal matrix not factorizable");
    RidgeFit out;
    out.beta = ldlt.solve(X.transpose() * Y / N);
    if (!out.beta.allFinite())
        throw SingularRegression("ridge regression: non-finite coefficients");
    return out;
}

Mat RidgeFit::fit_directional(const Mat& X, const Mat& Y, const Mat& beta, const Mat& dX,
                              const Mat& dY, double ridge) {
    const double N = static_cast<double>(X.rows());
    Mat gram = X.transpose() * X / N;
    gram.diagonal().array() += ridge;
    Eigen::LDLT<Mat> ldlt(gram);
    if (ldlt.info() != Eigen::Success)
        throw SingularRegression("ridge regression: normal matrix not factorizable");
    Mat rhs = (dX.transpose() * Y + X.transpose() * dY) / N -
              (dX.transpose() * X + X.transpose() * dX) / N * beta;
    return ldlt.solve(rhs);
}

}  // namespace mfjump
