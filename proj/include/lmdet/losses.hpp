#ifndef LMDET_LOSSES_HPP
#define LMDET_LOSSES_HPP

#include <string>

#include "lmdet/tensor.hpp"

namespace lmdet {

enum class LossFamily { central, cross_entropy, weighted_cross_entropy, focal };

LossFamily loss_family_from_string(const std::string& name);
std::string to_string(LossFamily f);

enum class Reduction { mean, sum, none };

struct LossConfig {
    LossFamily family = LossFamily::central;
    double r = 2.0;        // central: difference-modulating exponent
    double gamma = 2.0;    // focal: focusing exponent
    double alpha = 1.0;    // focal: balance weight; WCE: positive-term weight
    double epsilon = 1e-7; // prediction clamp before any log
    Reduction reduction = Reduction::mean;

    void validate() const;
};

// Scalar loss value and its exact derivative w.r.t. the prediction.
struct LossValue {
    double value;
    double grad;
};

// Central loss (per-pixel): -t * |t - p|^r * log(p), p clamped to
// [eps, 1-eps] inside the log only, so the difference term sees the raw
// prediction and the zero at p == t is exact. |d|^0 := 1, so r = 0 reduces
// to -t*log(p). sign(0) := 0 in the gradient for r in (0,1].
LossValue central_loss(double prediction, double target, double r, double epsilon = 1e-7);

// Soft-label binary cross-entropy: -t*log(p) - (1-t)*log(1-p).
LossValue cross_entropy(double prediction, double target, double epsilon = 1e-7);

// alpha on the positive term, 1-alpha on the negative term.
LossValue weighted_cross_entropy(double prediction, double target, double alpha,
                                 double epsilon = 1e-7);

// Two-term soft-target focal loss with a uniform balance weight:
//   alpha * [ -t*(1-p)^gamma*log(p) - (1-t)*p^gamma*log(1-p) ]
// Reduces to the standard focal form on hard targets; gamma = 0, alpha = 1
// recovers cross-entropy.
LossValue focal_loss(double prediction, double target, double gamma, double alpha,
                     double epsilon = 1e-7);

LossValue scalar_loss(double prediction, double target, const LossConfig& cfg);

// Elementwise application over matching fields plus the configured reduction.
struct LossReport {
    TensorT<double> per_pixel;            // same shape as inputs
    double reduced = 0.0;                 // mean or sum (0 when reduction == none)
    TensorT<double> grad_wrt_prediction;  // d(reduced or per-pixel)/d(prediction)
};

// grad_wrt_prediction follows the reduction: for mean it carries the 1/(H*W)
// factor, for sum and none it is the raw per-pixel derivative.
LossReport field_loss(const TensorT<double>& prediction, const TensorT<double>& target,
                      const LossConfig& cfg);

}  // namespace lmdet

#endif
