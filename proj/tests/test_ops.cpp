#include "doctest.h"

#include <cmath>
#include <functional>

#include "lmdet/nn_ops.hpp"

using namespace lmdet;

namespace {

// Finite-difference oracle for graph ops: perturbs every input entry and
// compares d(weighted_sum(f(inputs)))/d(input) against the tape gradient.
struct FdCheck {
    std::vector<Value<double>> leaves;
    std::function<Value<double>()> build;
    double h = 1e-6;
    double tol = 1e-6;

    void run() {
        auto out = build();
        auto w = std::make_shared<TensorT<double>>(out->value.shape);
        Rng rng(99);
        for (auto& v : w->data) v = rng.uniform(-1.0, 1.0);
        auto root = weighted_sum(out, w);
        for (auto& l : leaves) l->zero_grad();
        backward(root);

        for (auto& leaf : leaves) {
            for (size_t i = 0; i < leaf->value.numel(); ++i) {
                const double orig = leaf->value.data[i];
                leaf->value.data[i] = orig + h;
                auto up = weighted_sum(build(), w);
                leaf->value.data[i] = orig - h;
                auto dn = weighted_sum(build(), w);
                leaf->value.data[i] = orig;
                const double fd = (up->value.data[0] - dn->value.data[0]) / (2 * h);
                const double an = leaf->grad.data[i];
                const double err =
                    std::fabs(fd - an) / std::max({std::fabs(fd), std::fabs(an), 1.0});
                if (err >= tol) {
                    CAPTURE(leaf->name);
                    CAPTURE(i);
                    CAPTURE(fd);
                    CAPTURE(an);
                }
                REQUIRE(err < tol);
            }
        }
    }
};

Value<double> randn_leaf(std::vector<int> shape, Rng& rng, double scale = 1.0,
                         const std::string& name = "x") {
    TensorT<double> t(std::move(shape));
    for (auto& v : t.data) v = rng.normal() * scale;
    return make_leaf<double>(std::move(t), true, name);
}

}  // namespace

TEST_CASE("conv2d: forward against a direct loop") {
    Rng rng(1);
    auto x = randn_leaf({1, 2, 5, 6}, rng);
    auto w = randn_leaf({3, 2, 3, 3}, rng);
    auto b = randn_leaf({3}, rng);
    auto y = conv2d(x, w, b, 1, 1);
    REQUIRE(y->value.shape == std::vector<int>{1, 3, 5, 6});
    for (int co = 0; co < 3; ++co)
        for (int i = 0; i < 5; ++i)
            for (int j = 0; j < 6; ++j) {
                double acc = b->value.data[co];
                for (int ci = 0; ci < 2; ++ci)
                    for (int ki = 0; ki < 3; ++ki)
                        for (int kj = 0; kj < 3; ++kj) {
                            const int ii = i - 1 + ki, jj = j - 1 + kj;
                            if (ii < 0 || ii >= 5 || jj < 0 || jj >= 6) continue;
                            acc += x->value.at(0, ci, ii, jj) * w->value.at(co, ci, ki, kj);
                        }
                CHECK(y->value.at(0, co, i, j) == doctest::Approx(acc).epsilon(1e-12));
            }
}

TEST_CASE("conv2d: gradients (stride 1 and 2)") {
    for (int stride : {1, 2}) {
        Rng rng(2 + stride);
        FdCheck fc;
        auto x = randn_leaf({2, 2, 4, 4}, rng, 1.0, "x");
        auto w = randn_leaf({3, 2, 3, 3}, rng, 0.5, "w");
        auto b = randn_leaf({3}, rng, 0.1, "b");
        fc.leaves = {x, w, b};
        fc.build = [=]() { return conv2d(x, w, b, stride, 1); };
        fc.run();
    }
}

TEST_CASE("linear_channels: gradients") {
    Rng rng(4);
    FdCheck fc;
    auto x = randn_leaf({2, 3, 2, 2}, rng, 1.0, "x");
    auto w = randn_leaf({4, 3}, rng, 0.5, "w");
    auto b = randn_leaf({4}, rng, 0.1, "b");
    fc.leaves = {x, w, b};
    fc.build = [=]() { return linear_channels(x, w, b); };
    fc.run();
}

TEST_CASE("elementwise activations: gradients") {
    Rng rng(5);
    FdCheck fc;
    auto x = randn_leaf({1, 2, 3, 3}, rng, 1.0, "x");
    fc.leaves = {x};
    fc.build = [=]() { return relu(sigmoid(tanh_op(x))); };
    // relu kink: nudge values away from zero
    for (auto& v : x->value.data)
        if (std::fabs(v) < 1e-3) v += 0.01;
    fc.run();
}

TEST_CASE("batchnorm: train-mode gradients") {
    Rng rng(6);
    FdCheck fc;
    auto x = randn_leaf({2, 3, 3, 3}, rng, 1.0, "x");
    auto g = randn_leaf({3}, rng, 0.3, "gamma");
    auto b = randn_leaf({3}, rng, 0.3, "beta");
    for (auto& v : g->value.data) v += 1.0;
    fc.leaves = {x, g, b};
    fc.build = [=]() { return batchnorm<double>(x, g, b, true, nullptr, nullptr); };
    fc.tol = 1e-5;
    fc.run();
}

TEST_CASE("batchnorm: eval mode uses external stats") {
    Rng rng(7);
    auto x = randn_leaf({1, 2, 2, 2}, rng);
    auto g = make_leaf<double>(TensorT<double>({2}, {1.0, 2.0}), true, "g");
    auto b = make_leaf<double>(TensorT<double>({2}, {0.5, -0.5}), true, "b");
    std::vector<double> rm{0.1, -0.2}, rv{4.0, 0.25};
    auto y = batchnorm<double>(x, g, b, false, &rm, &rv);
    for (int c = 0; c < 2; ++c)
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 2; ++j) {
                const double expd = g->value.data[c] *
                                        (x->value.at(0, c, i, j) - rm[c]) /
                                        std::sqrt(rv[c] + 1e-5) +
                                    b->value.data[c];
                CHECK(y->value.at(0, c, i, j) == doctest::Approx(expd).epsilon(1e-12));
            }

    FdCheck fc;
    fc.leaves = {x, g, b};
    fc.build = [=, &rm, &rv]() { return batchnorm<double>(x, g, b, false, &rm, &rv); };
    fc.run();
}

TEST_CASE("layernorm: gradients") {
    Rng rng(8);
    FdCheck fc;
    auto x = randn_leaf({2, 4, 2, 2}, rng, 1.0, "x");
    auto g = randn_leaf({4}, rng, 0.3, "gamma");
    auto b = randn_leaf({4}, rng, 0.3, "beta");
    for (auto& v : g->value.data) v += 1.0;
    fc.leaves = {x, g, b};
    fc.build = [=]() { return layernorm_channels(x, g, b); };
    fc.tol = 1e-5;
    fc.run();
}

TEST_CASE("upsample_nearest2: values and gradients") {
    Rng rng(9);
    auto x = randn_leaf({1, 1, 2, 2}, rng);
    auto y = upsample_nearest2(x);
    CHECK(y->value.at(0, 0, 0, 0) == x->value.at(0, 0, 0, 0));
    CHECK(y->value.at(0, 0, 0, 1) == x->value.at(0, 0, 0, 0));
    CHECK(y->value.at(0, 0, 3, 3) == x->value.at(0, 0, 1, 1));

    FdCheck fc;
    fc.leaves = {x};
    fc.build = [=]() { return upsample_nearest2(x); };
    fc.run();
}

TEST_CASE("concat_channels: values and gradients") {
    Rng rng(10);
    auto a = randn_leaf({2, 2, 2, 2}, rng, 1.0, "a");
    auto b = randn_leaf({2, 3, 2, 2}, rng, 1.0, "b");
    auto y = concat_channels(a, b);
    CHECK(y->value.shape == std::vector<int>{2, 5, 2, 2});
    CHECK(y->value.at(1, 0, 1, 1) == a->value.at(1, 0, 1, 1));
    CHECK(y->value.at(1, 2, 0, 1) == b->value.at(1, 0, 0, 1));

    FdCheck fc;
    fc.leaves = {a, b};
    fc.build = [=]() { return concat_channels(a, b); };
    fc.run();
}

TEST_CASE("pool and gates: gradients") {
    Rng rng(11);
    FdCheck fc;
    auto x = randn_leaf({2, 3, 2, 2}, rng, 1.0, "x");
    auto g = randn_leaf({2, 3, 1, 1}, rng, 0.5, "g");
    auto s = randn_leaf({2, 1, 2, 2}, rng, 0.5, "s");
    fc.leaves = {x, g, s};
    fc.build = [=]() {
        auto p = global_avg_pool(x);
        auto y = mul_channel_gate(x, add(p, g));
        return mul_spatial_gate(y, s);
    };
    fc.run();
}

TEST_CASE("channel_mean_max: values and gradients") {
    Rng rng(12);
    auto x = randn_leaf({1, 3, 2, 2}, rng, 1.0, "x");
    auto y = channel_mean_max(x);
    CHECK(y->value.shape == std::vector<int>{1, 2, 2, 2});
    const double m =
        (x->value.at(0, 0, 0, 0) + x->value.at(0, 1, 0, 0) + x->value.at(0, 2, 0, 0)) / 3.0;
    CHECK(y->value.at(0, 0, 0, 0) == doctest::Approx(m).epsilon(1e-14));
    const double mx = std::max({x->value.at(0, 0, 0, 0), x->value.at(0, 1, 0, 0),
                                x->value.at(0, 2, 0, 0)});
    CHECK(y->value.at(0, 1, 0, 0) == mx);

    FdCheck fc;
    fc.leaves = {x};
    fc.build = [=]() { return channel_mean_max(x); };
    fc.run();
}

TEST_CASE("field_loss_op: value matches field_loss and gradient checks") {
    Rng rng(13);
    auto pred = randn_leaf({1, 2, 3, 3}, rng, 0.1, "pred");
    for (auto& v : pred->value.data) v = 0.5 + 0.4 * std::tanh(v);  // keep in (0,1)
    auto target = std::make_shared<TensorT<double>>(pred->value.shape);
    for (auto& v : target->data) v = rng.uniform();

    for (LossFamily fam : {LossFamily::central, LossFamily::cross_entropy,
                           LossFamily::weighted_cross_entropy, LossFamily::focal}) {
        LossConfig cfg;
        cfg.family = fam;
        cfg.alpha = 0.7;
        cfg.reduction = Reduction::mean;

        auto node = field_loss_op<double>(pred, target, cfg);
        TensorT<double> tt({1, 2, 3, 3});
        tt.data = target->data;
        TensorT<double> pp({1, 2, 3, 3});
        pp.data = pred->value.data;
        LossReport rep = field_loss(pp, tt, cfg);
        CHECK(node->value.data[0] == doctest::Approx(rep.reduced).epsilon(1e-14));

        pred->zero_grad();
        backward(node);
        const double h = 1e-7;
        for (size_t i = 0; i < pred->value.numel(); i += 3) {
            const double orig = pred->value.data[i];
            pred->value.data[i] = orig + h;
            const double up = field_loss_op<double>(pred, target, cfg)->value.data[0];
            pred->value.data[i] = orig - h;
            const double dn = field_loss_op<double>(pred, target, cfg)->value.data[0];
            pred->value.data[i] = orig;
            const double fd = (up - dn) / (2 * h);
            CHECK(std::fabs(fd - pred->grad.data[i]) /
                      std::max({std::fabs(fd), std::fabs(pred->grad.data[i]), 1e-9}) <
                  1e-5);
        }
    }
}

TEST_CASE("grad accumulation across shared nodes") {
    Rng rng(14);
    auto x = randn_leaf({1, 1, 2, 2}, rng, 1.0, "x");
    FdCheck fc;
    fc.leaves = {x};
    fc.build = [=]() { return add(sigmoid(x), sigmoid(x)); };
    fc.run();
}

TEST_CASE("backward requires a scalar root") {
    Rng rng(15);
    auto x = randn_leaf({1, 1, 2, 2}, rng);
    auto y = relu(x);
    CHECK_THROWS_AS(backward(y), InvalidInput);
}
