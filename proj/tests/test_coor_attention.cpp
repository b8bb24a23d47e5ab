#include "doctest.h"

#include <cmath>

#include "lmdet/coor_attention.hpp"

using namespace lmdet;

namespace {

Value<double> randn_leaf(std::vector<int> shape, Rng& rng, double scale = 1.0) {
    TensorT<double> t(std::move(shape));
    for (auto& v : t.data) v = rng.normal() * scale;
    return make_leaf<double>(std::move(t), true);
}

double rel_err(double a, double b) {
    return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), 1.0});
}

}  // namespace

TEST_CASE("make_grid: corners, center, degenerate axis") {
    auto g2 = make_grid<double>(2, 2);
    CHECK(g2.at(0, 0, 0) == -1.0);  // x at top-left
    CHECK(g2.at(1, 0, 0) == -1.0);  // y at top-left
    CHECK(g2.at(0, 1, 1) == 1.0);
    CHECK(g2.at(1, 1, 1) == 1.0);
    CHECK(g2.at(0, 0, 1) == 1.0);
    CHECK(g2.at(1, 0, 1) == -1.0);

    auto g3 = make_grid<double>(3, 3);
    CHECK(g3.at(0, 1, 1) == 0.0);
    CHECK(g3.at(1, 1, 1) == 0.0);

    auto g13 = make_grid<double>(1, 3);
    for (int j = 0; j < 3; ++j) CHECK(g13.at(1, 0, j) == 0.0);
    CHECK(g13.at(0, 0, 0) == -1.0);
    CHECK(g13.at(0, 0, 1) == 0.0);
    CHECK(g13.at(0, 0, 2) == 1.0);

    CHECK_THROWS_AS(make_grid<double>(0, 3), InvalidInput);
}

TEST_CASE("bilinear_sample: identity grid reproduces the input exactly") {
    Rng rng(21);
    for (auto [H, W] : {std::pair{4, 4}, std::pair{3, 5}, std::pair{7, 2}, std::pair{1, 4}}) {
        auto x = randn_leaf({1, 3, H, W}, rng);
        auto grid = make_leaf<double>(TensorT<double>({1, 2, H, W}));
        auto g = make_grid<double>(H, W);
        std::copy(g.data.begin(), g.data.end(), grid->value.data.begin());
        auto y = bilinear_sample(x, grid);
        for (size_t i = 0; i < x->value.numel(); ++i)
            CHECK(y->value.data[i] == x->value.data[i]);  // bitwise
    }
}

TEST_CASE("bilinear_sample: constant field, center query, clamping") {
    auto x = make_leaf<double>(TensorT<double>({1, 1, 2, 2}, {0.0, 1.0, 2.0, 3.0}));
    auto c = make_leaf<double>(TensorT<double>({1, 2, 1, 1}, {0.0, 0.0}));
    auto y = bilinear_sample(x, c);
    CHECK(y->value.data[0] == doctest::Approx(1.5).epsilon(1e-15));

    // constant field: any coordinates give the constant
    auto cf = make_leaf<double>(TensorT<double>({1, 1, 3, 3}));
    cf->value.fill(0.7);
    Rng rng(22);
    auto cc = make_leaf<double>(TensorT<double>({1, 2, 2, 2}));
    for (auto& v : cc->value.data) v = rng.uniform(-1.5, 1.5);  // some out of range
    auto yc = bilinear_sample(cf, cc);
    for (double v : yc->value.data) CHECK(v == doctest::Approx(0.7).epsilon(1e-15));

    // out-of-range clamps to the border pixel
    auto far = make_leaf<double>(TensorT<double>({1, 2, 1, 1}, {5.0, 5.0}));
    auto yf = bilinear_sample(x, far);
    CHECK(yf->value.data[0] == 3.0);

    auto nanc = make_leaf<double>(TensorT<double>({1, 2, 1, 1}, {std::nan(""), 0.0}));
    CHECK_THROWS_AS(bilinear_sample(x, nanc), InvalidInput);
}

TEST_CASE("bilinear_sample: gradients w.r.t. features and coordinates") {
    Rng rng(23);
    auto x = randn_leaf({1, 2, 4, 4}, rng);
    auto coords = make_leaf<double>(TensorT<double>({1, 2, 3, 3}), true);
    // interior coords away from pixel-boundary kinks
    for (auto& v : coords->value.data) v = rng.uniform(-0.9, 0.9);
    for (auto& v : coords->value.data) {
        double px = (v + 1.0) * 0.5 * 3.0;
        if (std::fabs(px - std::round(px)) < 1e-2) v += 0.02;
    }

    auto w = std::make_shared<TensorT<double>>(std::vector<int>{1, 2, 3, 3});
    for (auto& v : w->data) v = rng.uniform(-1, 1);
    auto root = weighted_sum(bilinear_sample(x, coords), w);
    x->zero_grad();
    coords->zero_grad();
    backward(root);

    const double h = 1e-6;
    for (auto& leaf : {x, coords}) {
        for (size_t i = 0; i < leaf->value.numel(); ++i) {
            const double orig = leaf->value.data[i];
            leaf->value.data[i] = orig + h;
            const double up = weighted_sum(bilinear_sample(x, coords), w)->value.data[0];
            leaf->value.data[i] = orig - h;
            const double dn = weighted_sum(bilinear_sample(x, coords), w)->value.data[0];
            leaf->value.data[i] = orig;
            CHECK(rel_err((up - dn) / (2 * h), leaf->grad.data[i]) < 1e-6);
        }
    }
}

TEST_CASE("coordinate_module: identity at init, scale gate, constant field") {
    Rng rng(24);
    AttentionConfig cfg;
    cfg.channels = 4;
    cfg.heads = 2;
    auto st = CoorAttentionState<double>::init(4, rng, "t");
    auto x = randn_leaf({2, 4, 5, 5}, rng);
    auto grid = make_leaf<double>(make_grid<double>(5, 5));

    // zero-initialized offset head: sampled == x exactly
    auto out = coordinate_module(x, st, grid, 0.25);
    for (size_t i = 0; i < x->value.numel(); ++i)
        CHECK(out.sampled->value.data[i] == x->value.data[i]);

    // offset_scale = 0 gates out nonzero offset weights
    for (auto& v : st.w_off->value.data) v = rng.normal();
    auto gated = coordinate_module(x, st, grid, 0.0);
    for (size_t i = 0; i < x->value.numel(); ++i)
        CHECK(gated.sampled->value.data[i] == x->value.data[i]);

    // constant field: sampled == x for any offsets
    auto cx = make_leaf<double>(TensorT<double>({1, 4, 5, 5}));
    cx->value.fill(0.3);
    auto cout = coordinate_module(cx, st, grid, 0.5);
    for (double v : cout.sampled->value.data) CHECK(v == doctest::Approx(0.3).epsilon(1e-15));
}

TEST_CASE("attention rows are probability vectors; constant input is uniform") {
    Rng rng(25);
    const int C = 8, H = 3, W = 4, heads = 2, T = H * W;
    TensorT<double> q({1, C, H, W}), k({1, C, H, W});
    for (auto& v : q.data) v = rng.normal();
    for (auto& v : k.data) v = rng.normal();
    auto A = attention_rows(q, k, heads);
    for (int h = 0; h < heads; ++h)
        for (int i = 0; i < T; ++i) {
            double sum = 0.0;
            for (int j = 0; j < T; ++j) {
                const double a = A.data[(size_t(h) * T + i) * T + j];
                CHECK(a >= 0.0);
                sum += a;
            }
            CHECK(std::fabs(sum - 1.0) < 1e-6);
        }

    // constant input -> identical keys -> uniform weights 1/(HW)
    TensorT<double> qc({1, C, H, W}), kc({1, C, H, W});
    qc.fill(0.5);
    kc.fill(0.25);
    auto Ac = attention_rows(qc, kc, heads);
    for (double a : Ac.data) CHECK(std::fabs(a - 1.0 / T) < 1e-6);
}

TEST_CASE("structure_aware_attention: init-equivalence with vanilla (bitwise)") {
    Rng rng(26);
    AttentionConfig cfg;
    cfg.channels = 8;
    cfg.heads = 4;
    auto st = CoorAttentionState<double>::init(8, rng, "a");
    auto x = randn_leaf({2, 8, 4, 6}, rng);
    auto yc = structure_aware_attention(x, st, cfg, AttentionKind::coordinated);
    auto yv = structure_aware_attention(x, st, cfg, AttentionKind::vanilla);
    REQUIRE(yc->value.numel() == yv->value.numel());
    for (size_t i = 0; i < yc->value.numel(); ++i)
        CHECK(yc->value.data[i] == yv->value.data[i]);  // bitwise

    AttentionConfig bad = cfg;
    bad.channels = 6;
    CHECK_THROWS_AS(structure_aware_attention(x, st, bad), InvalidConfig);
}

TEST_CASE("mha: gradients") {
    Rng rng(27);
    auto q = randn_leaf({1, 4, 2, 3}, rng, 0.7);
    auto k = randn_leaf({1, 4, 2, 3}, rng, 0.7);
    auto v = randn_leaf({1, 4, 2, 3}, rng, 0.7);
    auto w = std::make_shared<TensorT<double>>(std::vector<int>{1, 4, 2, 3});
    for (auto& x : w->data) x = rng.uniform(-1, 1);

    auto root = weighted_sum(mha(q, k, v, 2), w);
    for (auto& l : {q, k, v}) l->zero_grad();
    backward(root);

    const double h = 1e-6;
    for (auto& leaf : {q, k, v}) {
        for (size_t i = 0; i < leaf->value.numel(); ++i) {
            const double orig = leaf->value.data[i];
            leaf->value.data[i] = orig + h;
            const double up = weighted_sum(mha(q, k, v, 2), w)->value.data[0];
            leaf->value.data[i] = orig - h;
            const double dn = weighted_sum(mha(q, k, v, 2), w)->value.data[0];
            leaf->value.data[i] = orig;
            CHECK(rel_err((up - dn) / (2 * h), leaf->grad.data[i]) < 1e-6);
        }
    }
}

TEST_CASE("structure_aware_attention: gradients w.r.t. x and all learnable maps") {
    Rng rng(28);
    AttentionConfig cfg;
    cfg.channels = 4;
    cfg.heads = 2;
    cfg.offset_scale = 0.25;
    auto st = CoorAttentionState<double>::init(4, rng, "a");
    // non-trivial offsets for the check
    for (auto& v : st.w_off->value.data) v = rng.normal() * 0.3;
    for (auto& v : st.b_off->value.data) v = rng.normal() * 0.1;
    auto x = randn_leaf({1, 4, 4, 4}, rng, 0.8);

    auto build = [&]() { return structure_aware_attention(x, st, cfg); };
    auto w = std::make_shared<TensorT<double>>(std::vector<int>{1, 4, 4, 4});
    for (auto& v : w->data) v = rng.uniform(-1, 1);

    std::vector<Value<double>> leaves = st.parameters();
    leaves.push_back(x);
    auto root = weighted_sum(build(), w);
    for (auto& l : leaves) l->zero_grad();
    backward(root);

    const double h = 1e-4;
    for (auto& leaf : leaves) {
        for (size_t i = 0; i < leaf->value.numel(); ++i) {
            const double orig = leaf->value.data[i];
            leaf->value.data[i] = orig + h;
            const double up = weighted_sum(build(), w)->value.data[0];
            leaf->value.data[i] = orig - h;
            const double dn = weighted_sum(build(), w)->value.data[0];
            leaf->value.data[i] = orig;
            CHECK(rel_err((up - dn) / (2 * h), leaf->grad.data[i]) < 1e-3);
        }
    }
}

TEST_CASE("transformer block: transpose consistency under symmetric offsets") {
    Rng rng(29);
    AttentionConfig cfg;
    cfg.channels = 4;
    cfg.heads = 2;
    auto blk = CoorTransformerBlock<double>::init(cfg, 4.0, rng, "b");
    // make the x- and y-offset rows identical so the block commutes with
    // the transpose
    const int C = cfg.channels;
    for (int c = 0; c < C; ++c)
        blk.attn.w_off->value.data[C + c] = blk.attn.w_off->value.data[c] =
            rng.normal() * 0.2;
    blk.attn.b_off->value.data[1] = blk.attn.b_off->value.data[0] = 0.05;

    const int H = 5, W = 5;
    auto x = randn_leaf({1, C, H, W}, rng);
    auto y = blk.forward(x, AttentionKind::coordinated);

    // transposed input (swap H/W axes)
    auto xt = make_leaf<double>(TensorT<double>({1, C, W, H}), true);
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j) xt->value.at(0, c, j, i) = x->value.at(0, c, i, j);
    auto yt = blk.forward(xt, AttentionKind::coordinated);

    for (int c = 0; c < C; ++c)
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j)
                CHECK(yt->value.at(0, c, j, i) ==
                      doctest::Approx(y->value.at(0, c, i, j)).epsilon(1e-9));
}

TEST_CASE("transformer block: init equals vanilla block output") {
    Rng rng(30);
    AttentionConfig cfg;
    cfg.channels = 8;
    cfg.heads = 2;
    auto blk = CoorTransformerBlock<double>::init(cfg, 4.0, rng, "b");
    auto x = randn_leaf({1, 8, 3, 3}, rng);
    auto yc = blk.forward(x, AttentionKind::coordinated);
    auto yv = blk.forward(x, AttentionKind::vanilla);
    for (size_t i = 0; i < yc->value.numel(); ++i)
        CHECK(yc->value.data[i] == yv->value.data[i]);
}
