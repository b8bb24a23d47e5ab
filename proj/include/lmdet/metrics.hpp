#ifndef LMDET_METRICS_HPP
#define LMDET_METRICS_HPP

#include <map>
#include <vector>

#include "lmdet/heatmap_codec.hpp"
#include "lmdet/tensor.hpp"

namespace lmdet {

struct MetricsReport {
    double mre = 0.0;      // mean over per_landmark_errors
    double mre_std = 0.0;  // sample std (n-1) of per_landmark_errors
    std::map<double, double> sdr;        // threshold -> percentage in [0,100]
    std::vector<double> per_landmark_errors;
    std::vector<double> per_image_mre;   // pairing unit for the t-test
    double l2_heatmap = 0.0;
};

struct TTestResult {
    double t_statistic = 0.0;
    double p_value = 1.0;
    int n = 0;
    bool degenerate = false;  // zero-variance nonzero differences: p undefined
};

// Euclidean distance per landmark, scaled by mm/px spacing.
std::vector<double> radial_errors(const std::vector<Landmark>& pred,
                                  const std::vector<Landmark>& truth, double spacing);

// Percentage of errors <= threshold (inclusive), per threshold.
std::map<double, double> sdr(const std::vector<double>& errors,
                             const std::vector<double>& thresholds);

// Root-mean-square difference between two fields of equal shape: the
// "average L2 distance" figure (a constant offset of c scores exactly c).
double heatmap_l2(const Heatmap& pred, const Heatmap& truth);

// Two-sided paired t-test with n-1 degrees of freedom. All-zero differences
// report t = 0, p = 1; constant nonzero differences set the degenerate flag.
TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b);

// Regularized incomplete beta I_x(a,b), continued-fraction evaluation to
// 1e-14 relative; backs the t CDF.
double incomplete_beta_reg(double a, double b, double x);

// Two-sided p for a t statistic with df degrees of freedom.
double t_test_p_value(double t, double df);

MetricsReport compute_metrics(const std::vector<std::vector<Landmark>>& pred,
                              const std::vector<std::vector<Landmark>>& truth,
                              double spacing, const std::vector<double>& thresholds);

}  // namespace lmdet

#endif
