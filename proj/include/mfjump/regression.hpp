#pragma once

#include <vector>

#include "mfjump/measure.hpp"

namespace mfjump {

struct RegressionConfig {
    int basis_degree = 2;  // total-degree polynomial basis, capped at 4
    double ridge = 1e-8;
    void validate() const;
};

// Monomial basis of total degree <= degree over R^dim.
struct PolyBasis {
    int dim = 1;
    int degree = 2;
    std::vector<std::vector<int>> expos;

    PolyBasis() = default;
    PolyBasis(int dim_, int degree_);
    int count() const { return static_cast<int>(expos.size()); }
    Vec features(const Vec& x) const;
    Mat features_all(const Mat& pts) const;     // N x F
    Mat feature_jacobian(const Vec& x) const;   // F x dim
};

// Ridge-regularized least squares, one coefficient column per output:
//   beta = (X^T X / N + ridge I)^{-1} X^T Y / N.
// No data-dependent standardization: the fit is then an explicit smooth
// function of (X, Y), which the sensitivity module differentiates directly.
struct RidgeFit {
    Mat beta;  // F x outputs

    static RidgeFit fit(const Mat& X, const Mat& Y, double ridge);
    // directional derivative of beta under perturbations (dX, dY)
    static Mat fit_directional(const Mat& X, const Mat& Y, const Mat& beta, const Mat& dX,
                               const Mat& dY, double ridge);
    Mat predict(const Mat& X) const { return X * beta; }
};

}  // namespace mfjump
