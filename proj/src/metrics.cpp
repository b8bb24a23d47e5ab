#include "lmdet/metrics.hpp"

#include <cmath>

namespace lmdet {

std::vector<double> radial_errors(const std::vector<Landmark>& pred,
                                  const std::vector<Landmark>& truth, double spacing) {
    if (pred.size() != truth.size())
        throw InvalidInput("radial_errors: landmark count mismatch");
    if (!(spacing > 0.0)) throw InvalidInput("radial_errors: spacing must be > 0");
    std::vector<double> errs(pred.size());
    for (size_t i = 0; i < pred.size(); ++i) {
        const double dx = pred[i].x - truth[i].x;
        const double dy = pred[i].y - truth[i].y;
        errs[i] = std::sqrt(dx * dx + dy * dy) * spacing;
    }
    return errs;
}

std::map<double, double> sdr(const std::vector<double>& errors,
                             const std::vector<double>& thresholds) {
    std::map<double, double> out;
    for (double th : thresholds) {
        if (errors.empty()) {
            out[th] = 0.0;
            continue;
        }
        size_t hit = 0;
        for (double e : errors)
            if (e <= th) ++hit;
        out[th] = 100.0 * double(hit) / double(errors.size());
    }
    return out;
}

double heatmap_l2(const Heatmap& pred, const Heatmap& truth) {
    if (!pred.same_shape(truth)) throw InvalidInput("heatmap_l2: shape mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < pred.numel(); ++i) {
        const double d = pred.data[i] - truth.data[i];
        acc += d * d;
    }
    return std::sqrt(acc / double(pred.numel()));
}

namespace {

// Continued fraction for the incomplete beta (modified Lentz).
double ibeta_cf(double a, double b, double x) {
    const double tiny = 1e-300;
    const double eps = 1e-15;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::fabs(d) < tiny) d = tiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= 300; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < tiny) c = tiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < eps) break;
    }
    return h;
}

}  // namespace

double incomplete_beta_reg(double a, double b, double x) {
    if (!(a > 0.0 && b > 0.0)) throw InvalidInput("incomplete_beta_reg: a,b must be > 0");
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double lnfront = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                           a * std::log(x) + b * std::log1p(-x);
    const double front = std::exp(lnfront);
    if (x < (a + 1.0) / (a + b + 2.0)) {
        return front * ibeta_cf(a, b, x) / a;
    }
    return 1.0 - front * ibeta_cf(b, a, 1.0 - x) / b;
}

double t_test_p_value(double t, double df) {
    if (df <= 0.0) throw InvalidInput("t_test_p_value: df must be > 0");
    if (!std::isfinite(t)) return 0.0;
    const double x = df / (df + t * t);
    return incomplete_beta_reg(df / 2.0, 0.5, x);
}

TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw InvalidInput("paired_t_test: length mismatch");
    const int n = int(a.size());
    if (n < 2) throw InvalidInput("paired_t_test: need n >= 2 pairs");

    double mean = 0.0;
    for (int i = 0; i < n; ++i) mean += a[i] - b[i];
    mean /= n;
    double ss = 0.0;
    for (int i = 0; i < n; ++i) {
        const double d = (a[i] - b[i]) - mean;
        ss += d * d;
    }
    TTestResult res;
    res.n = n;
    if (ss == 0.0) {
        if (mean == 0.0) {
            res.t_statistic = 0.0;
            res.p_value = 1.0;
        } else {
            res.degenerate = true;
            res.t_statistic = mean > 0 ? HUGE_VAL : -HUGE_VAL;
            res.p_value = std::nan("");
        }
        return res;
    }
    const double sd = std::sqrt(ss / (n - 1));
    res.t_statistic = mean / (sd / std::sqrt(double(n)));
    res.p_value = t_test_p_value(res.t_statistic, double(n - 1));
    return res;
}

MetricsReport compute_metrics(const std::vector<std::vector<Landmark>>& pred,
                              const std::vector<std::vector<Landmark>>& truth,
                              double spacing, const std::vector<double>& thresholds) {
    if (pred.size() != truth.size()) throw InvalidInput("compute_metrics: image count mismatch");
    MetricsReport rep;
    for (size_t i = 0; i < pred.size(); ++i) {
        auto errs = radial_errors(pred[i], truth[i], spacing);
        double img_mean = 0.0;
        for (double e : errs) {
            rep.per_landmark_errors.push_back(e);
            img_mean += e;
        }
        rep.per_image_mre.push_back(errs.empty() ? 0.0 : img_mean / double(errs.size()));
    }
    const size_t n = rep.per_landmark_errors.size();
    if (n > 0) {
        double mean = 0.0;
        for (double e : rep.per_landmark_errors) mean += e;
        mean /= double(n);
        rep.mre = mean;
        if (n > 1) {
            double ss = 0.0;
            for (double e : rep.per_landmark_errors) ss += (e - mean) * (e - mean);
            rep.mre_std = std::sqrt(ss / double(n - 1));
        }
    }
    rep.sdr = sdr(rep.per_landmark_errors, thresholds);
    return rep;
}

}  // namespace lmdet
