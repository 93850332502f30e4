#pragma once

#include <Eigen/Dense>
#include <functional>

namespace mfjump {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Uniformly weighted particle cloud standing in for a probability measure.
// Immutable; mean and the first two moment norms are cached at construction
// so coefficient callbacks can read them at O(1) inside hot loops.
class EmpiricalMeasure {
  public:
    explicit EmpiricalMeasure(Mat points);

    int size() const { return static_cast<int>(points_.rows()); }
    int dim() const { return static_cast<int>(points_.cols()); }
    const Mat& points() const { return points_; }
    Vec point(int i) const { return points_.row(i).transpose(); }
    const Vec& mean() const { return mean_; }

    // (1/N) sum |x_i|
    double moment1() const { return m1_; }
    // sqrt((1/N) sum |x_i|^2)
    double moment2() const { return m2_; }

  private:
    Mat points_;
    Vec mean_;
    double m1_ = 0.0;
    double m2_ = 0.0;
};

double moment1(const EmpiricalMeasure& mu);
double moment2(const EmpiricalMeasure& mu);

// Uniform average of a kernel over the cloud (the hat-expectation over an
// independent copy).
Vec mf_expectation(const EmpiricalMeasure& mu, const std::function<Vec(const Vec&)>& kernel);
double mf_expectation_scalar(const EmpiricalMeasure& mu, const std::function<double(const Vec&)>& kernel);

// Exact 2-Wasserstein distance between equally weighted clouds.
// 1-D: sorted coupling. Multi-D: optimal assignment, N capped at 2000.
// Unequal sizes are handled by deterministic strided subsampling of the
// larger cloud down to the smaller one.
double wasserstein2(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu);

}  // namespace mfjump
