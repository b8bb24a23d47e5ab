#ifndef LMDET_GRADCHECK_HPP
#define LMDET_GRADCHECK_HPP

#include <cmath>
#include <string>
#include <vector>

#include "lmdet/detector.hpp"
#include "lmdet/losses.hpp"

// Finite-difference verification of every analytic gradient, in double
// precision. Evaluation points are pinned to generic positions away from
// the non-differentiable kinks (|t-p| ~ 0 in the losses, ReLU zero
// crossings and bilinear cell boundaries in the networks), where central
// differences are meaningless.

namespace lmdet {

struct GradCheckReport {
    std::string scope;
    int checked = 0;
    int failed = 0;
    double worst_rel_err = 0.0;
    double tolerance = 0.0;
    bool passed() const { return failed == 0 && checked > 0; }
};

inline double gradcheck_rel_err(double fd, double an, double floor = 1e-4) {
    return std::fabs(fd - an) / std::max({std::fabs(fd), std::fabs(an), floor});
}

// All four loss families on `samples` random points with |t - p| > 1e-3,
// h = 1e-6, tolerance 1e-5.
inline GradCheckReport gradcheck_losses(int samples = 1000, uint64_t seed = 1) {
    GradCheckReport rep;
    rep.scope = "losses";
    rep.tolerance = 1e-5;
    const double h = 1e-6;
    Rng rng(seed);
    const double exps[4] = {0.0, 1.0, 2.0, 3.0};
    while (rep.checked < samples) {
        const double p = rng.uniform(0.02, 0.98);
        const double t = rng.uniform();
        if (std::fabs(t - p) <= 1e-3) continue;
        const double r = exps[rng.uniform_int(0, 3)];
        const double gamma = exps[rng.uniform_int(0, 3)];
        const double alpha = rng.uniform();
        struct Case {
            LossValue at;
            double up, dn;
        };
        const Case cases[4] = {
            {central_loss(p, t, r), central_loss(p + h, t, r).value,
             central_loss(p - h, t, r).value},
            {cross_entropy(p, t), cross_entropy(p + h, t).value, cross_entropy(p - h, t).value},
            {weighted_cross_entropy(p, t, alpha), weighted_cross_entropy(p + h, t, alpha).value,
             weighted_cross_entropy(p - h, t, alpha).value},
            {focal_loss(p, t, gamma, alpha), focal_loss(p + h, t, gamma, alpha).value,
             focal_loss(p - h, t, gamma, alpha).value},
        };
        for (const Case& c : cases) {
            const double fd = (c.up - c.dn) / (2.0 * h);
            const double err = gradcheck_rel_err(fd, c.at.grad, 1e-9);
            rep.worst_rel_err = std::max(rep.worst_rel_err, err);
            if (err >= rep.tolerance) ++rep.failed;
        }
        ++rep.checked;
    }
    rep.checked *= 4;
    return rep;
}

// Attention block gradients w.r.t. the input field and every learnable map
// on a 4x4 field with C=4, heads=2; h = 1e-4, tolerance 1e-3.
inline GradCheckReport gradcheck_attention(uint64_t seed = 28) {
    GradCheckReport rep;
    rep.scope = "attention";
    rep.tolerance = 1e-3;
    const double h = 1e-4;

    Rng rng(seed);
    AttentionConfig cfg;
    cfg.channels = 4;
    cfg.heads = 2;
    cfg.offset_scale = 0.25;
    auto st = CoorAttentionState<double>::init(4, rng, "a");
    for (auto& v : st.w_off->value.data) v = rng.normal() * 0.3;
    for (auto& v : st.b_off->value.data) v = rng.normal() * 0.1;
    auto x = make_leaf<double>(TensorT<double>({1, 4, 4, 4}), true, "x");
    for (auto& v : x->value.data) v = rng.normal() * 0.8;

    auto weights = std::make_shared<TensorT<double>>(std::vector<int>{1, 4, 4, 4});
    for (auto& v : weights->data) v = rng.uniform(-1.0, 1.0);
    auto build = [&]() { return weighted_sum(structure_aware_attention(x, st, cfg), weights); };

    std::vector<Value<double>> leaves = st.parameters();
    leaves.push_back(x);
    auto root = build();
    for (auto& l : leaves) l->zero_grad();
    backward(root);

    for (auto& leaf : leaves) {
        for (size_t i = 0; i < leaf->value.numel(); ++i) {
            const double orig = leaf->value.data[i];
            leaf->value.data[i] = orig + h;
            const double up = build()->value.data[0];
            leaf->value.data[i] = orig - h;
            const double dn = build()->value.data[0];
            leaf->value.data[i] = orig;
            const double err = gradcheck_rel_err((up - dn) / (2 * h), leaf->grad.data[i]);
            rep.worst_rel_err = std::max(rep.worst_rel_err, err);
            if (err >= rep.tolerance) ++rep.failed;
            ++rep.checked;
        }
    }
    return rep;
}

// End-to-end toy detector: field_loss(forward(x), target) gradients for a
// random parameter subset on the 8x8 stages=2 single-channel config;
// h = 1e-4, tolerance 1e-3.
inline GradCheckReport gradcheck_detector(int subset = 50, uint64_t seed = 100) {
    GradCheckReport rep;
    rep.scope = "detector";
    rep.tolerance = 1e-3;
    const double h = 1e-4;

    DetectorConfig cfg;
    cfg.stages = 2;
    cfg.base_channels = 4;
    cfg.blocks_per_stage = {1, 1};
    cfg.heads_per_stage = {2, 1};
    cfg.num_landmarks = 2;
    cfg.in_channels = 1;
    cfg.input_h = 8;
    cfg.input_w = 8;
    Detector<double> det(cfg, 7);

    Rng rng(seed);
    for (const auto& p : det.parameters()) {
        if (p->name.find("_off") != std::string::npos)
            for (auto& v : p->value.data) v = rng.normal() * 0.2;
    }
    TensorT<double> img({1, 1, 8, 8});
    for (auto& v : img.data) v = rng.uniform();
    auto target = std::make_shared<TensorT<double>>(std::vector<int>{1, 2, 8, 8});
    for (auto& v : target->data) v = rng.uniform();
    LossConfig lc;
    lc.family = LossFamily::central;
    lc.r = 2.0;

    auto loss_value = [&]() {
        auto x = make_leaf<double>(img);
        auto y = det.forward_graph(x, AttentionKind::coordinated, true, false);
        return field_loss_op<double>(y, target, lc)->value.data[0];
    };

    auto x = make_leaf<double>(img);
    auto y = det.forward_graph(x, AttentionKind::coordinated, true, false);
    auto loss = field_loss_op<double>(y, target, lc);
    det.zero_grads();
    backward(loss);

    auto params = det.parameters();
    for (int c = 0; c < subset; ++c) {
        const auto& p = params[rng.next_u64() % params.size()];
        const size_t i = rng.next_u64() % p->value.numel();
        const double orig = p->value.data[i];
        p->value.data[i] = orig + h;
        const double up = loss_value();
        p->value.data[i] = orig - h;
        const double dn = loss_value();
        p->value.data[i] = orig;
        const double err = gradcheck_rel_err((up - dn) / (2 * h), p->grad.data[i]);
        rep.worst_rel_err = std::max(rep.worst_rel_err, err);
        if (err >= rep.tolerance) ++rep.failed;
        ++rep.checked;
    }
    return rep;
}

}  // namespace lmdet

#endif
