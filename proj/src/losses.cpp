#include "lmdet/losses.hpp"

#include <cmath>

namespace lmdet {

LossFamily loss_family_from_string(const std::string& name) {
    if (name == "central") return LossFamily::central;
    if (name == "cross_entropy") return LossFamily::cross_entropy;
    if (name == "weighted_cross_entropy") return LossFamily::weighted_cross_entropy;
    if (name == "focal") return LossFamily::focal;
    throw InvalidConfig("unknown loss family: " + name);
}

std::string to_string(LossFamily f) {
    switch (f) {
        case LossFamily::central: return "central";
        case LossFamily::cross_entropy: return "cross_entropy";
        case LossFamily::weighted_cross_entropy: return "weighted_cross_entropy";
        case LossFamily::focal: return "focal";
    }
    return "?";
}

void LossConfig::validate() const {
    if (r < 0.0) throw InvalidConfig("loss r must be >= 0");
    if (gamma < 0.0) throw InvalidConfig("loss gamma must be >= 0");
    if (alpha < 0.0 || alpha > 1.0) throw InvalidConfig("loss alpha must be in [0,1]");
    if (!(epsilon > 0.0 && epsilon < 0.5)) throw InvalidConfig("loss epsilon must be in (0, 0.5)");
}

namespace {

inline double clamp_prob(double p, double eps) {
    if (p < eps) return eps;
    if (p > 1.0 - eps) return 1.0 - eps;
    return p;
}

// derivative of clamp: 1 inside, 0 where the clamp is active
inline double clamp_pass(double p, double eps) {
    return (p >= eps && p <= 1.0 - eps) ? 1.0 : 0.0;
}

// pow with fast paths for the common small integer exponents
inline double pow_fast(double base, double e) {
    if (e == 2.0) return base * base;
    if (e == 1.0) return base;
    if (e == 3.0) return base * base * base;
    if (e == 0.0) return 1.0;
    return std::pow(base, e);
}

}  // namespace

LossValue central_loss(double prediction, double target, double r, double epsilon) {
    if (r < 0.0) throw InvalidConfig("central loss requires r >= 0");
    const double pc = clamp_prob(prediction, epsilon);
    const double pass = clamp_pass(prediction, epsilon);
    const double logp = std::log(pc);
    if (r == 0.0) {
        // |d|^0 := 1 for all d
        return {-(target * logp), -(target / pc) * pass};
    }
    const double d = target - prediction;
    const double ad = std::fabs(d);
    const double sgn = (d > 0.0) ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
    const double adr = pow_fast(ad, r);
    const double value = -(target * adr * logp);
    // d/dp [-t*|d|^r*log(pc)] = -t*[ |d|^r/pc * pass - r*sign(d)*|d|^(r-1)*log(pc) ]
    double adr1;
    if (sgn == 0.0) {
        adr1 = 0.0;  // sign(0) := 0 swallows the divergent |d|^(r-1) factor
    } else {
        adr1 = pow_fast(ad, r - 1.0);
    }
    const double grad = -target * (adr / pc * pass - r * sgn * adr1 * logp);
    return {value, grad};
}

LossValue cross_entropy(double prediction, double target, double epsilon) {
    const double pc = clamp_prob(prediction, epsilon);
    const double pass = clamp_pass(prediction, epsilon);
    const double value = -(target * std::log(pc) + (1.0 - target) * std::log1p(-pc));
    const double grad = (-target / pc + (1.0 - target) / (1.0 - pc)) * pass;
    return {value, grad};
}

LossValue weighted_cross_entropy(double prediction, double target, double alpha, double epsilon) {
    const double pc = clamp_prob(prediction, epsilon);
    const double pass = clamp_pass(prediction, epsilon);
    const double value = -(alpha * target * std::log(pc) +
                           (1.0 - alpha) * (1.0 - target) * std::log1p(-pc));
    const double grad = (-alpha * target / pc + (1.0 - alpha) * (1.0 - target) / (1.0 - pc)) * pass;
    return {value, grad};
}

LossValue focal_loss(double prediction, double target, double gamma, double alpha,
                     double epsilon) {
    if (gamma < 0.0) throw InvalidConfig("focal loss requires gamma >= 0");
    const double pc = clamp_prob(prediction, epsilon);
    const double pass = clamp_pass(prediction, epsilon);
    const double logp = std::log(pc);
    const double log1mp = std::log1p(-pc);
    const double q = 1.0 - pc;
    const double pos_mod = (gamma == 0.0) ? 1.0 : pow_fast(q, gamma);
    const double neg_mod = (gamma == 0.0) ? 1.0 : pow_fast(pc, gamma);
    const double value = alpha * (-(target * pos_mod * logp) - (1.0 - target) * neg_mod * log1mp);
    double dpos = pos_mod / pc;  // d/dp of -(1-p)^g*log p, negated below
    double dneg = -neg_mod / q;
    if (gamma > 0.0) {
        dpos += -gamma * pow_fast(q, gamma - 1.0) * logp;
        dneg += gamma * pow_fast(pc, gamma - 1.0) * log1mp;
    }
    const double grad = alpha * (-(target * dpos) - (1.0 - target) * dneg) * pass;
    return {value, grad};
}

LossValue scalar_loss(double prediction, double target, const LossConfig& cfg) {
    switch (cfg.family) {
        case LossFamily::central:
            return central_loss(prediction, target, cfg.r, cfg.epsilon);
        case LossFamily::cross_entropy:
            return cross_entropy(prediction, target, cfg.epsilon);
        case LossFamily::weighted_cross_entropy:
            return weighted_cross_entropy(prediction, target, cfg.alpha, cfg.epsilon);
        case LossFamily::focal:
            return focal_loss(prediction, target, cfg.gamma, cfg.alpha, cfg.epsilon);
    }
    throw InvalidConfig("bad loss family");
}

LossReport field_loss(const TensorT<double>& prediction, const TensorT<double>& target,
                      const LossConfig& cfg) {
    cfg.validate();
    if (!prediction.same_shape(target)) throw InvalidInput("field_loss: shape mismatch");
    LossReport rep;
    rep.per_pixel = TensorT<double>(prediction.shape);
    rep.grad_wrt_prediction = TensorT<double>(prediction.shape);
    const size_t n = prediction.numel();
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) {
        LossValue lv = scalar_loss(prediction.data[i], target.data[i], cfg);
        rep.per_pixel.data[i] = lv.value;
        rep.grad_wrt_prediction.data[i] = lv.grad;
        acc += lv.value;
    }
    switch (cfg.reduction) {
        case Reduction::mean: {
            const double inv = n > 0 ? 1.0 / double(n) : 0.0;
            rep.reduced = acc * inv;
            for (size_t i = 0; i < n; ++i) rep.grad_wrt_prediction.data[i] *= inv;
            break;
        }
        case Reduction::sum:
            rep.reduced = acc;
            break;
        case Reduction::none:
            rep.reduced = 0.0;
            break;
    }
    return rep;
}

}  // namespace lmdet
