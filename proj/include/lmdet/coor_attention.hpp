#ifndef LMDET_COOR_ATTENTION_HPP
#define LMDET_COOR_ATTENTION_HPP

#include "lmdet/nn_ops.hpp"

// Coordinated attention: a uniform [-1,1] coordinate grid, per-query learned
// sampling offsets, bilinear feature sampling, and softmax(Q^p K^p^T / sqrt(d)) V
// with Q^p, K^p projected from the coordinate-indexed features.

namespace lmdet {

struct AttentionConfig {
    int channels = 0;
    int heads = 1;
    double offset_scale = 0.25;  // max fraction of the normalized range

    int head_dim() const { return channels / heads; }
    void validate() const {
        if (channels < 1 || heads < 1 || channels % heads != 0)
            throw InvalidConfig("attention: channels must be a positive multiple of heads");
        if (offset_scale < 0.0 || offset_scale > 1.0)
            throw InvalidConfig("attention: offset_scale must be in [0,1]");
    }
};

// Uniform grid of normalized 2D coordinates, {2,H,W}: channel 0 holds x
// (width axis), channel 1 holds y (height axis). Corner (0,0) maps to
// (-1,-1), corner (H-1,W-1) to (+1,+1); a length-1 axis maps to 0.
template <class S>
TensorT<S> make_grid(int H, int W) {
    if (H < 1 || W < 1) throw InvalidInput("make_grid: dims must be >= 1");
    TensorT<S> g({2, H, W});
    for (int i = 0; i < H; ++i) {
        const S y = H == 1 ? S(0) : S(-1) + S(2) * S(i) / S(H - 1);
        for (int j = 0; j < W; ++j) {
            const S x = W == 1 ? S(0) : S(-1) + S(2) * S(j) / S(W - 1);
            g.at(0, i, j) = x;
            g.at(1, i, j) = y;
        }
    }
    return g;
}

namespace detail {
// Pixel positions arising from grid round-trips land within a few ulps of
// the integer nodes; snapping keeps sampling at grid nodes exact.
template <class S>
inline S snap_to_node(S px) {
    const S r = std::nearbyint(px);
    const S tol = sizeof(S) == 4 ? S(1e-4) : S(1e-9);
    return std::fabs(px - r) < tol ? r : px;
}
}  // namespace detail

// Bilinear sampling of x {N,C,H,W} at normalized coords {N,2,Hc,Wc}
// (align-corners convention, matching make_grid). Out-of-range coordinates
// are clamped to [-1,1]. Differentiable in both features and coordinates.
template <class S>
Value<S> bilinear_sample(const Value<S>& x, const Value<S>& coords) {
    const int N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
    if (coords->value.dim(0) != N || coords->value.dim(1) != 2)
        throw InvalidInput("bilinear_sample: coords must be {N,2,Hc,Wc}");
    const int Hc = coords->value.dim(2), Wc = coords->value.dim(3);
    const size_t pc = size_t(Hc) * Wc;
    const size_t plane = size_t(H) * W;

    // per position: x0, y0, fx, fy, and clamp pass-through masks
    auto ix = std::make_shared<std::vector<int>>(size_t(N) * pc);
    auto iy = std::make_shared<std::vector<int>>(size_t(N) * pc);
    auto fx = std::make_shared<std::vector<S>>(size_t(N) * pc);
    auto fy = std::make_shared<std::vector<S>>(size_t(N) * pc);
    auto mx = std::make_shared<std::vector<S>>(size_t(N) * pc);
    auto my = std::make_shared<std::vector<S>>(size_t(N) * pc);

    for (int n = 0; n < N; ++n) {
        const S* cx = coords->value.ptr() + size_t(n) * 2 * pc;
        const S* cy = cx + pc;
        for (size_t p = 0; p < pc; ++p) {
            S vx = cx[p], vy = cy[p];
            if (!std::isfinite(double(vx)) || !std::isfinite(double(vy)))
                throw InvalidInput("bilinear_sample: non-finite coordinates");
            S pmx = S(1), pmy = S(1);
            if (vx < S(-1)) { vx = S(-1); pmx = S(0); }
            if (vx > S(1)) { vx = S(1); pmx = S(0); }
            if (vy < S(-1)) { vy = S(-1); pmy = S(0); }
            if (vy > S(1)) { vy = S(1); pmy = S(0); }
            S px = (vx + S(1)) * S(0.5) * S(W - 1);
            S py = (vy + S(1)) * S(0.5) * S(H - 1);
            px = detail::snap_to_node(px);
            py = detail::snap_to_node(py);
            int x0 = int(std::floor(px)), y0 = int(std::floor(py));
            if (x0 > W - 1) x0 = W - 1;
            if (y0 > H - 1) y0 = H - 1;
            if (x0 < 0) x0 = 0;
            if (y0 < 0) y0 = 0;
            (*ix)[n * pc + p] = x0;
            (*iy)[n * pc + p] = y0;
            (*fx)[n * pc + p] = px - S(x0);
            (*fy)[n * pc + p] = py - S(y0);
            (*mx)[n * pc + p] = pmx;
            (*my)[n * pc + p] = pmy;
        }
    }

    TensorT<S> out({N, C, Hc, Wc}, NoInit{});
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const S* xc = x->value.ptr() + (size_t(n) * C + c) * plane;
            S* oc = out.ptr() + (size_t(n) * C + c) * pc;
            for (size_t p = 0; p < pc; ++p) {
                const int x0 = (*ix)[n * pc + p], y0 = (*iy)[n * pc + p];
                const S gx = (*fx)[n * pc + p], gy = (*fy)[n * pc + p];
                const S v00 = xc[size_t(y0) * W + x0];
                if (gx == S(0) && gy == S(0)) {  // node-exact fast path
                    oc[p] = v00;
                    continue;
                }
                const int x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
                const S v01 = xc[size_t(y0) * W + x1];
                const S v10 = xc[size_t(y1) * W + x0];
                const S v11 = xc[size_t(y1) * W + x1];
                oc[p] = (S(1) - gy) * ((S(1) - gx) * v00 + gx * v01) +
                        gy * ((S(1) - gx) * v10 + gx * v11);
            }
        }
    }

    auto node = make_op<S>({x, coords}, std::move(out));
    if (node->requires_grad) {
        NodeT<S>* np = node.get();
        NodeT<S>*xp = x.get(), *cp = coords.get();
        node->backprop = [np, xp, cp, ix, iy, fx, fy, mx, my, N, C, H, W, pc, plane]() {
            for (int n = 0; n < N; ++n) {
                S* dcx = cp->requires_grad ? cp->grad.ptr() + size_t(n) * 2 * pc : nullptr;
                S* dcy = dcx ? dcx + pc : nullptr;
                for (int c = 0; c < C; ++c) {
                    const S* xc = xp->value.ptr() + (size_t(n) * C + c) * plane;
                    S* dxc = xp->requires_grad ? xp->grad.ptr() + (size_t(n) * C + c) * plane
                                               : nullptr;
                    const S* g = np->grad.ptr() + (size_t(n) * C + c) * pc;
                    for (size_t p = 0; p < pc; ++p) {
                        const S dy = g[p];
                        if (dy == S(0)) continue;
                        const int x0 = (*ix)[n * pc + p], y0 = (*iy)[n * pc + p];
                        const int x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
                        const S gx = (*fx)[n * pc + p], gy = (*fy)[n * pc + p];
                        const S v00 = xc[size_t(y0) * W + x0], v01 = xc[size_t(y0) * W + x1];
                        const S v10 = xc[size_t(y1) * W + x0], v11 = xc[size_t(y1) * W + x1];
                        if (dxc) {
                            dxc[size_t(y0) * W + x0] += dy * (S(1) - gy) * (S(1) - gx);
                            dxc[size_t(y0) * W + x1] += dy * (S(1) - gy) * gx;
                            dxc[size_t(y1) * W + x0] += dy * gy * (S(1) - gx);
                            dxc[size_t(y1) * W + x1] += dy * gy * gx;
                        }
                        if (dcx) {
                            const S dpx = (S(1) - gy) * (v01 - v00) + gy * (v11 - v10);
                            const S dpy = (S(1) - gx) * (v10 - v00) + gx * (v11 - v01);
                            dcx[p] += dy * dpx * S(0.5) * S(W - 1) * (*mx)[n * pc + p];
                            dcy[p] += dy * dpy * S(0.5) * S(H - 1) * (*my)[n * pc + p];
                        }
                    }
                }
            }
        };
    }
    return node;
}

// Learnable pieces of one coordinated attention layer. proj_* are C->C
// linear maps applied per position; offset_head is C->2 and starts at zero
// so a fresh block is function-identical to vanilla attention. The K
// projection carries no bias (softmax is invariant to the row shift it
// would produce).
template <class S>
struct CoorAttentionState {
    Value<S> wq, bq, wk, wv, bv, wo, bo;  // {C,C} weights, {C} biases
    Value<S> w_off, b_off;                // {2,C}, {2}

    static CoorAttentionState init(int channels, Rng& rng, const std::string& prefix) {
        CoorAttentionState st;
        auto lin = [&](int co, int ci, const std::string& nm) {
            TensorT<S> w({co, ci});
            const double s = std::sqrt(1.0 / ci);
            for (auto& v : w.data) v = S(rng.uniform(-s, s));
            return make_leaf<S>(std::move(w), true, prefix + nm);
        };
        auto zeros = [&](std::vector<int> shp, const std::string& nm) {
            return make_leaf<S>(TensorT<S>(std::move(shp)), true, prefix + nm);
        };
        st.wq = lin(channels, channels, ".wq");
        st.bq = zeros({channels}, ".bq");
        st.wk = lin(channels, channels, ".wk");
        st.wv = lin(channels, channels, ".wv");
        st.bv = zeros({channels}, ".bv");
        st.wo = lin(channels, channels, ".wo");
        st.bo = zeros({channels}, ".bo");
        st.w_off = zeros({2, channels}, ".w_off");  // zero offsets at init
        st.b_off = zeros({2}, ".b_off");
        return st;
    }

    std::vector<Value<S>> parameters() const {
        return {wq, bq, wk, wv, bv, wo, bo, w_off, b_off};
    }
};

// Multi-head scaled dot-product attention over the HW token axis.
// q,k,v are {N,C,H,W}; softmax(Qh^T Kh / sqrt(d)) rows attend over tokens.
template <class S>
Value<S> mha(const Value<S>& q, const Value<S>& k, const Value<S>& v, int heads) {
    const int N = q->value.dim(0), C = q->value.dim(1), H = q->value.dim(2), W = q->value.dim(3);
    if (C % heads != 0) throw InvalidConfig("mha: channels not divisible by heads");
    const int d = C / heads;
    const int T = H * W;
    const S inv_sqrt_d = S(1.0 / std::sqrt(double(d)));

    auto attn = std::make_shared<TensorT<S>>(std::vector<int>{N, heads, T, T}, NoInit{});
    TensorT<S> out({N, C, H, W}, NoInit{});
    // Eigen's GEMM kernel writes column-major panels; filling the big [T,T]
    // row-major attention buffer directly is ~10x slower than producing the
    // transposed product through a column-major view of the same memory.
    using MatCM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;
    using MapCM = Eigen::Map<MatCM>;
    using CMapCM = Eigen::Map<const MatCM>;
    for (int n = 0; n < N; ++n) {
        for (int h = 0; h < heads; ++h) {
            const size_t off = (size_t(n) * C + size_t(h) * d) * T;
            // row-major {d,T} buffers double as column-major {T,d} transposes
            CMapCM Qt(q->value.ptr() + off, T, d);
            CMapCM Kt(k->value.ptr() + off, T, d);
            CMapM<S> Vh(v->value.ptr() + off, d, T);
            S* abuf = attn->ptr() + (size_t(n) * heads + h) * T * T;
            // A_rm(i,j) = q_i . k_j / sqrt(d), written as A^T into the cm view
            MapCM Acm(abuf, T, T);
            Acm.noalias() = (Kt * Qt.transpose()) * inv_sqrt_d;
            MapM<S> A(abuf, T, T);
            // row-wise softmax
            for (int i = 0; i < T; ++i) {
                Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>> row(abuf + size_t(i) * T, T);
                const S mx = row.maxCoeff();
                row = (row - mx).exp();
                row *= S(1) / row.sum();
            }
            MapM<S> Oh(out.ptr() + off, d, T);
            Oh.noalias() = Vh * A.transpose();
        }
    }

    auto node = make_op<S>({q, k, v}, std::move(out));
    if (node->requires_grad) {
        NodeT<S>* np = node.get();
        NodeT<S>*qp = q.get(), *kp = k.get(), *vp = v.get();
        node->backprop = [np, qp, kp, vp, attn, N, C, heads, d, T, inv_sqrt_d]() {
            using MatCM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;
            using CMapCM = Eigen::Map<const MatCM>;
            MatCM dA_t(T, T);  // holds dA^T: dA_rm(i,j) lives at (j,i)
            TensorT<S> dS({T, T}, NoInit{});
            for (int n = 0; n < N; ++n) {
                for (int h = 0; h < heads; ++h) {
                    const size_t off = (size_t(n) * C + size_t(h) * d) * T;
                    CMapM<S> Qh(qp->value.ptr() + off, d, T);
                    CMapM<S> Kh(kp->value.ptr() + off, d, T);
                    CMapM<S> Vh(vp->value.ptr() + off, d, T);
                    const S* abuf = attn->ptr() + (size_t(n) * heads + h) * T * T;
                    CMapM<S> A(abuf, T, T);
                    CMapM<S> dO(np->grad.ptr() + off, d, T);
                    if (vp->requires_grad)
                        MapM<S>(vp->grad.ptr() + off, d, T).noalias() += dO * A;
                    // dA(i,j) = dO(:,i) . Vh(:,j); computed transposed so the
                    // big GEMM writes a column-major destination
                    CMapCM Vt(vp->value.ptr() + off, T, d);
                    CMapCM dOt(np->grad.ptr() + off, T, d);
                    dA_t.noalias() = Vt * dOt.transpose();
                    // softmax backward per row, plus the 1/sqrt(d) score scale;
                    // dA rows are columns of dA_t (contiguous)
                    using ArrMap = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>;
                    using CArrMap = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>;
                    for (int i = 0; i < T; ++i) {
                        CArrMap arow(abuf + size_t(i) * T, T);
                        CArrMap darow(dA_t.data() + size_t(i) * T, T);
                        ArrMap dsrow(dS.ptr() + size_t(i) * T, T);
                        const S dot = (darow * arow).sum();
                        dsrow = arow * (darow - dot) * inv_sqrt_d;
                    }
                    CMapM<S> dSm(dS.ptr(), T, T);
                    if (qp->requires_grad)
                        MapM<S>(qp->grad.ptr() + off, d, T).noalias() += Kh * dSm.transpose();
                    if (kp->requires_grad)
                        MapM<S>(kp->grad.ptr() + off, d, T).noalias() += Qh * dSm;
                }
            }
        };
    }
    return node;
}

// Forward-only attention weights for one head layout, used by tests that
// assert row-stochasticity and uniformity.
template <class S>
TensorT<S> attention_rows(const TensorT<S>& q, const TensorT<S>& k, int heads) {
    const int N = q.dim(0), C = q.dim(1), T = q.dim(2) * q.dim(3);
    const int d = C / heads;
    const S inv_sqrt_d = S(1.0 / std::sqrt(double(d)));
    TensorT<S> attn({N, heads, T, T}, NoInit{});
    for (int n = 0; n < N; ++n)
        for (int h = 0; h < heads; ++h) {
            CMapM<S> Qh(q.ptr() + (size_t(n) * C + size_t(h) * d) * T, d, T);
            CMapM<S> Kh(k.ptr() + (size_t(n) * C + size_t(h) * d) * T, d, T);
            MapM<S> A(attn.ptr() + (size_t(n) * heads + h) * T * T, T, T);
            A.noalias() = (Qh.transpose() * Kh) * inv_sqrt_d;
            for (int i = 0; i < T; ++i) {
                auto row = A.row(i).array();
                const S mx = row.maxCoeff();
                row = (row - mx).exp();
                row /= row.sum();
            }
        }
    return attn;
}

// Offsets + clamped coordinates + bilinear sampling. Returns the sampled
// features and the coordinates actually used.
template <class S>
struct CoordinateModuleOut {
    Value<S> sampled;
    Value<S> coords_used;
};

template <class S>
CoordinateModuleOut<S> coordinate_module(const Value<S>& x, const CoorAttentionState<S>& state,
                                         const Value<S>& grid, double offset_scale) {
    const int N = x->value.dim(0);
    const int H = x->value.dim(2), W = x->value.dim(3);
    if (grid->value.dim(0) != 2 || grid->value.dim(1) != H || grid->value.dim(2) != W)
        throw InvalidInput("coordinate_module: grid shape mismatch");

    // offsets = offset_scale * tanh(offset_head(x)), {N,2,H,W}
    Value<S> off = linear_channels(x, state.w_off, state.b_off);
    off = tanh_op(off);
    // grid broadcast over the batch + scaled offsets
    TensorT<S> gb({N, 2, H, W}, NoInit{});
    for (int n = 0; n < N; ++n)
        std::copy_n(grid->value.ptr(), grid->value.numel(), gb.ptr() + size_t(n) * 2 * H * W);
    auto grid_n = make_leaf<S>(std::move(gb));
    const S sc = S(offset_scale);
    Value<S> scaled = elementwise(
        off, [sc](S vv) { return vv * sc; }, [sc](S, S) { return sc; });
    Value<S> coords = add(grid_n, scaled);  // clamped inside bilinear_sample
    CoordinateModuleOut<S> out;
    out.coords_used = coords;
    out.sampled = bilinear_sample(x, coords);
    return out;
}

enum class AttentionKind { coordinated, vanilla };

// Eq.-style attention layer: Q^p, K^p from coordinate-indexed features,
// V from the original features.
template <class S>
Value<S> structure_aware_attention(const Value<S>& x, const CoorAttentionState<S>& state,
                                   const AttentionConfig& cfg,
                                   AttentionKind kind = AttentionKind::coordinated,
                                   const Value<S>* grid_opt = nullptr) {
    cfg.validate();
    if (x->value.dim(1) != cfg.channels) throw InvalidConfig("attention: channel mismatch");
    Value<S> src = x;
    if (kind == AttentionKind::coordinated) {
        Value<S> grid;
        if (grid_opt) {
            grid = *grid_opt;
        } else {
            grid = make_leaf<S>(make_grid<S>(x->value.dim(2), x->value.dim(3)));
        }
        src = coordinate_module(x, state, grid, cfg.offset_scale).sampled;
    }
    Value<S> q = linear_channels(src, state.wq, state.bq);
    Value<S> k = linear_channels(src, state.wk);
    Value<S> v = linear_channels(x, state.wv, state.bv);
    Value<S> o = mha(q, k, v, cfg.heads);
    return linear_channels(o, state.wo, state.bo);
}

// Transformer block: pre-norm attention and position-wise feed-forward
// (expansion lambda), both with residual connections.
template <class S>
struct CoorTransformerBlock {
    AttentionConfig cfg;
    CoorAttentionState<S> attn;
    Value<S> ln1_g, ln1_b, ln2_g, ln2_b;
    Value<S> ffn_w1, ffn_b1, ffn_w2, ffn_b2;

    static CoorTransformerBlock init(const AttentionConfig& cfg, double expansion, Rng& rng,
                                     const std::string& prefix) {
        cfg.validate();
        CoorTransformerBlock blk;
        blk.cfg = cfg;
        blk.attn = CoorAttentionState<S>::init(cfg.channels, rng, prefix + ".attn");
        const int C = cfg.channels;
        const int E = std::max(1, int(expansion * C));
        auto ones = [&](int c, const std::string& nm) {
            TensorT<S> t({c});
            t.fill(S(1));
            return make_leaf<S>(std::move(t), true, prefix + nm);
        };
        auto zeros = [&](std::vector<int> shp, const std::string& nm) {
            return make_leaf<S>(TensorT<S>(std::move(shp)), true, prefix + nm);
        };
        auto lin = [&](int co, int ci, const std::string& nm) {
            TensorT<S> w({co, ci});
            const double s = std::sqrt(2.0 / ci);
            for (auto& vv : w.data) vv = S(rng.normal() * s);
            return make_leaf<S>(std::move(w), true, prefix + nm);
        };
        blk.ln1_g = ones(C, ".ln1_g");
        blk.ln1_b = zeros({C}, ".ln1_b");
        blk.ln2_g = ones(C, ".ln2_g");
        blk.ln2_b = zeros({C}, ".ln2_b");
        blk.ffn_w1 = lin(E, C, ".ffn_w1");
        blk.ffn_b1 = zeros({E}, ".ffn_b1");
        blk.ffn_w2 = lin(C, E, ".ffn_w2");
        blk.ffn_b2 = zeros({C}, ".ffn_b2");
        return blk;
    }

    Value<S> forward(const Value<S>& x, AttentionKind kind, const Value<S>* grid = nullptr) const {
        Value<S> h = layernorm_channels(x, ln1_g, ln1_b);
        Value<S> a = structure_aware_attention(h, attn, cfg, kind, grid);
        Value<S> y = add(x, a);
        Value<S> f = layernorm_channels(y, ln2_g, ln2_b);
        f = linear_channels(f, ffn_w1, ffn_b1);
        f = relu(f);
        f = linear_channels(f, ffn_w2, ffn_b2);
        return add(y, f);
    }

    std::vector<Value<S>> parameters() const {
        auto ps = attn.parameters();
        for (const auto& p : {ln1_g, ln1_b, ln2_g, ln2_b, ffn_w1, ffn_b1, ffn_w2, ffn_b2})
            ps.push_back(p);
        return ps;
    }
};

}  // namespace lmdet

#endif
