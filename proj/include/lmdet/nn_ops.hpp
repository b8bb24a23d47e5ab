#ifndef LMDET_NN_OPS_HPP
#define LMDET_NN_OPS_HPP

#include <Eigen/Core>

#include <cmath>

#include "lmdet/graph.hpp"
#include "lmdet/losses.hpp"

// Differentiable ops over {N,C,H,W} tensors. Forward values are computed
// eagerly; each op installs a closure that routes grads to its parents.

namespace lmdet {

template <class S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapM = Eigen::Map<MatX<S>>;
template <class S>
using CMapM = Eigen::Map<const MatX<S>>;

// ---------------------------------------------------------------- im2col

template <class S>
void im2col(const S* x, int C, int H, int W, int kh, int kw, int stride, int pad,
            int Ho, int Wo, S* col) {
    // col is [C*kh*kw, Ho*Wo]
    const int P = Ho * Wo;
    for (int c = 0; c < C; ++c) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                S* dst = col + ((size_t(c) * kh + ki) * kw + kj) * P;
                for (int oi = 0; oi < Ho; ++oi) {
                    const int ii = oi * stride - pad + ki;
                    if (ii < 0 || ii >= H) {
                        std::fill_n(dst + size_t(oi) * Wo, Wo, S(0));
                        continue;
                    }
                    const S* src = x + (size_t(c) * H + ii) * W;
                    S* drow = dst + size_t(oi) * Wo;
                    if (stride == 1) {
                        // contiguous row segment with zeroed out-of-range ends
                        const int shift = kj - pad;  // jj = oj + shift
                        const int lo = std::max(0, -shift);
                        const int hi = std::min(Wo, W - shift);
                        if (lo > 0) std::fill_n(drow, lo, S(0));
                        if (hi > lo) std::copy_n(src + lo + shift, hi - lo, drow + lo);
                        if (hi < Wo) std::fill_n(drow + std::max(hi, lo), Wo - std::max(hi, lo), S(0));
                    } else {
                        for (int oj = 0; oj < Wo; ++oj) {
                            const int jj = oj * stride - pad + kj;
                            drow[oj] = (jj >= 0 && jj < W) ? src[jj] : S(0);
                        }
                    }
                }
            }
        }
    }
}

template <class S>
void col2im_add(const S* col, int C, int H, int W, int kh, int kw, int stride, int pad,
                int Ho, int Wo, S* x) {
    const int P = Ho * Wo;
    for (int c = 0; c < C; ++c) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                const S* src = col + ((size_t(c) * kh + ki) * kw + kj) * P;
                for (int oi = 0; oi < Ho; ++oi) {
                    const int ii = oi * stride - pad + ki;
                    if (ii < 0 || ii >= H) continue;
                    S* dst = x + (size_t(c) * H + ii) * W;
                    const S* srow = src + size_t(oi) * Wo;
                    if (stride == 1) {
                        const int shift = kj - pad;
                        const int lo = std::max(0, -shift);
                        const int hi = std::min(Wo, W - shift);
                        S* d = dst + lo + shift;
                        for (int oj = lo; oj < hi; ++oj) d[oj - lo] += srow[oj];
                    } else {
                        for (int oj = 0; oj < Wo; ++oj) {
                            const int jj = oj * stride - pad + kj;
                            if (jj >= 0 && jj < W) dst[jj] += srow[oj];
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------- conv2d

// x {N,Ci,H,W}, w {Co,Ci,kh,kw}, optional b {Co} -> {N,Co,Ho,Wo}.
// Convolutions feeding a train-mode batch norm must omit the bias: the mean
// subtraction cancels it exactly, leaving a permanently dead parameter.
template <class S>
Value<S> conv2d(const Value<S>& x, const Value<S>& w, const Value<S>& b, int stride, int pad) {
    const int N = x->value.dim(0), Ci = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
    const int Co = w->value.dim(0), kh = w->value.dim(2), kw = w->value.dim(3);
    if (w->value.dim(1) != Ci) throw InvalidInput("conv2d: channel mismatch");
    const bool has_bias = b != nullptr;
    const int Ho = (H + 2 * pad - kh) / stride + 1;
    const int Wo = (W + 2 * pad - kw) / stride + 1;
    const int K = Ci * kh * kw, P = Ho * Wo;

    TensorT<S> out({N, Co, Ho, Wo}, NoInit{});
    auto cols = std::make_shared<TensorT<S>>(std::vector<int>{N, K, P}, NoInit{});
    CMapM<S> Wm(w->value.ptr(), Co, K);
    for (int n = 0; n < N; ++n) {
        S* col = cols->ptr() + size_t(n) * K * P;
        im2col(x->value.ptr() + size_t(n) * Ci * H * W, Ci, H, W, kh, kw, stride, pad, Ho, Wo, col);
        MapM<S> Y(out.ptr() + size_t(n) * Co * P, Co, P);
        Y.noalias() = Wm * CMapM<S>(col, K, P);
        if (has_bias)
            for (int co = 0; co < Co; ++co) Y.row(co).array() += b->value.data[co];
    }

    std::vector<Value<S>> parents = {x, w};
    if (has_bias) parents.push_back(b);
    auto node = make_op<S>(std::move(parents), std::move(out));
    if (node->requires_grad) {
        NodeT<S>* np = node.get();
        NodeT<S>*xp = x.get(), *wp = w.get();
        NodeT<S>* bp = has_bias ? b.get() : nullptr;
        node->backprop = [np, xp, wp, bp, cols, N, Ci, H, W, Co, kh, kw, stride, pad, Ho, Wo, K, P]() {
            CMapM<S> Wm(wp->value.ptr(), Co, K);
            TensorT<S> dcol({K, P}, NoInit{});
            for (int n = 0; n < N; ++n) {
                CMapM<S> dY(np->grad.ptr() + size_t(n) * Co * P, Co, P);
                const S* col = cols->ptr() + size_t(n) * K * P;
                if (wp->requires_grad) {
                    MapM<S> dW(wp->grad.ptr(), Co, K);
                    dW.noalias() += dY * CMapM<S>(col, K, P).transpose();
                }
                if (bp && bp->requires_grad) {
                    for (int co = 0; co < Co; ++co) bp->grad.data[co] += dY.row(co).sum();
                }
                if (xp->requires_grad) {
                    MapM<S> dC(dcol.ptr(), K, P);
                    dC.noalias() = Wm.transpose() * dY;
                    col2im_add(dcol.ptr(), Ci, H, W, kh, kw, stride, pad, Ho, Wo,
                               xp->grad.ptr() + size_t(n) * Ci * H * W);
                }
            }
        };
    }
    return node;
}

template <class S>
Value<S> conv2d_nobias(const Value<S>& x, const Value<S>& w, int stride, int pad) {
    return conv2d(x, w, Value<S>(), stride, pad);
}

// 1x1 convolution expressed directly as a channel GEMM. A null bias omits
// the bias term (used by the K projection, where softmax's row-shift
// invariance makes a key bias unidentifiable).
template <class S>
Value<S> linear_channels(const Value<S>& x, const Value<S>& w, const Value<S>& b = Value<S>()) {
    const int N = x->value.dim(0), Ci = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
    const int Co = w->value.dim(0);
    if (w->value.dim(1) != Ci) throw InvalidInput("linear_channels: channel mismatch");
    const bool has_bias = b != nullptr;
    const int P = H * W;
    TensorT<S> out({N, Co, H, W}, NoInit{});
    CMapM<S> Wm(w->value.ptr(), Co, Ci);
    for (int n = 0; n < N; ++n) {
        MapM<S> Y(out.ptr() + size_t(n) * Co * P, Co, P);
        Y.noalias() = Wm * CMapM<S>(x->value.ptr() + size_t(n) * Ci * P, Ci, P);
        if (has_bias)
            for (int co = 0; co < Co; ++co) Y.row(co).array() += b->value.data[co];
    }
    std::vector<Value<S>> parents = {x, w};
    if (has_bias) parents.push_back(b);
    auto node = make_op<S>(std::move(parents), std::move(out));
    if (node->requires_grad) {
        NodeT<S>* np = node.get();
        NodeT<S>*xp = x.get(), *wp = w.get();
        NodeT<S>* bp = has_bias ? b.get() : nullptr;
        node->backprop = [np, xp, wp, bp, N, Ci, Co, P]() {
            CMapM<S> Wm(wp->value.ptr(), Co, Ci);
            for (int n = 0; n < N; ++n) {
                CMapM<S> dY(np->grad.ptr() + size_t(n) * Co * P, Co, P);
                CMapM<S> X(xp->value.ptr() + size_t(n) * Ci * P, Ci, P);
                if (wp->requires_grad)
                    MapM<S>(wp->grad.ptr(), Co, Ci).noalias() += dY * X.transpose();
                if (bp && bp->requires_grad)
                    for (int co = 0; co < Co; ++co) bp->grad.data[co] += dY.row(co).sum();
                if (xp->requires_grad)
                    MapM<S>(xp->grad.ptr() + size_t(n) * Ci * P, Ci, P).noalias() +=
                        Wm.transpose() * dY;
            }
        };
    }
    return node;
}

// ----------------------------------------------------------- elementwise

template <class S, class F, class DF>
Value<S> elementwise(const Value<S>& x, F f, DF df) {
    TensorT<S> out(x->value.shape, NoInit{});
    for (size_t i = 0; i < out.numel(); ++i) out.data[i] = f(x->value.data[i]);
    auto node = make_op<S>({x}, std::move(out));
    if (node->requires_grad) {
        NodeT<S>* np = node.get();
        NodeT<S>* xp = x.get();
        node->backprop = [np, xp, df]() {
            for (size_t i = 0; i < np->grad.numel(); ++i)
                xp->grad.data[i] += np->grad.data[i] * df(xp->value.data[i], np->value.data[i]);
        };
    }
    return node;
}

template <class S>
Value<S> relu(const Value<S>& x) {
    return elementwise(
        x, [](S v) { return v > S(0) ? v : S(0); },
        [](S v, S) { return v > S(0) ? S(1) : S(0); });
}

template <class S>
Value<S> sigmoid(const Value<S>& x) {
    return elementwise(
        x, [](S v) { return S(1) / (S(1) + std::exp(-v)); },
        [](S, S y) { return y * (S(1) - y); });
}

template <class S>
Value<S> tanh_op(const Value<S>& x) {
    return elementwise(
        x, [](S v) { return std::tanh(v); }, [](S, S y) { return S(1) - y * y; });
}

template <class S>
Value<S> add(const Value<S>& a, const Value<S>& b) {
    if (!a->value.same_shape(b->value)) throw InvalidInput("add: shape mismatch");
    TensorT<S> out(a->value.shape, NoInit{});
    for (size_t i = 0; i < out.numel(); ++i) out.data[i] = a->value.data[i] + b->value.data[i];
    auto node = make_op<S>({a, b}, std::move(out));
    if (node->requires_grad) {
        NodeT<S>* np = node.get();
        NodeT<S>*ap = a.get(), *bp = b.get();
        node->backprop = [np, ap, bp]() {
            if (ap->requires_grad)
                for (size_t i = 0; i < np->grad.numel(); ++i) ap->grad.data[i] += np->grad.data[i];
            if (bp->requires_grad)
                for (size_t i = 0; i < np->grad.numel(); ++i) bp->grad.data[i] += np->grad.data[i];
        };
    }
    return node;
}

// ------------------------------------------------------- normalizations

// Batch normalization over (N,H,W) per channel. When use_batch_stats is
// false, `ext_mean`/`ext_var` (running statistics) are used instead. Batch
// statistics are exported through `saved_*` so the owning layer can update
// its running averages; the op itself has no side effects.
template <class S>
Value<S> batchnorm(const Value<S>& x, const Value<S>& gamma, const Value<S>& beta,
                   bool use_batch_stats, const std::vector<S>* ext_mean,
                   const std::vector<S>* ext_var, S eps = S(1e-5),
                   std::vector<S>* saved_mean = nullptr, std::vector<S>* saved_var = nullptr) {
    const int N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
    const size_t plane = size_t(H) * W;
    const size_t m = size_t(N) * plane;

    auto mean = std::make_shared<std::vector<S>>(C, S(0));
    auto invstd = std::make_shared<std::vector<S>>(C, S(0));
    if (use_batch_stats) {
        for (int c = 0; c < C; ++c) {
            double acc = 0.0;
            for (int n = 0; n < N; ++n) {
                const S* p = x->value.ptr() + (size_t(n) * C + c) * plane;
                for (size_t i = 0; i < plane; ++i) acc += double(p[i]);
            }
            const double mu = acc / double(m);
            double vacc = 0.0;
            for (int n = 0; n < N; ++n) {
                const S* p = x->value.ptr() + (size_t(n) * C + c) * plane;
                for (size_t i = 0; i < plane; ++i) {
                    const double d = double(p[i]) - mu;
                    vacc += d * d;
                }
            }
            const double var = vacc / double(m);
            (*mean)[c] = S(mu);
            (*invstd)[c] = S(1.0 / std::sqrt(var + double(eps)));
            if (saved_mean) (*saved_mean)[c] = S(mu);
            if (saved_var) (*saved_var)[c] = S(var);
        }
    } else {
        for (int c = 0; c < C; ++c) {
            (*mean)[c] = (*ext_mean)[c];
            (*invstd)[c] = S(1) / std::sqrt((*ext_var)[c] + eps);
        }
    }

    TensorT<S> out(x->value.shape, NoInit{});
    auto xhat = std::make_shared<TensorT<S>>(x->value.shape, NoInit{});
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const S* p = x->value.ptr() + (size_t(n) * C + c) * plane;
            S* xh = xhat->ptr() + (size_t(n) * C + c) * plane;
            S* po = out.ptr() + (size_t(n) * C + c) * plane;
            const S mu = (*mean)[c], is = (*invstd)[c];
            const S g = gamma->value.data[c], bb = beta->value.data[c];
            for (size_t i = 0; i < plane; ++i) {
                xh[i] = (p[i] - mu) * is;
                po[i] = g * xh[i] + bb;
            }
        }
    }

    auto node = make_op<S>({x, gamma, beta}, std::move(out));
    if (node->requires_grad) {
        NodeT<S>* np = node.get();
        NodeT<S>*xp = x.get(), *gp = gamma.get(), *bp = beta.get();
        node->backprop = [np, xp, gp, bp, xhat, invstd, N, C, plane, m, use_batch_stats]() {
            for (int c = 0; c < C; ++c) {
                double sum_dy = 0.0, sum_dy_xh = 0.0;
                for (int n = 0; n < N; ++n) {
                    const S* dy = np->grad.ptr() + (size_t(n) * C + c) * plane;
                    const S* xh = xhat->ptr() + (size_t(n) * C + c) * plane;
                    for (size_t i = 0; i < plane; ++i) {
                        sum_dy += double(dy[i]);
                        sum_dy_xh += double(dy[i]) * double(xh[i]);
                    }
                }
                if (gp->requires_grad) gp->grad.data[c] += S(sum_dy_xh);
                if (bp->requires_grad) bp->grad.data[c] += S(sum_dy);
                if (!xp->requires_grad) continue;
                const S g = gp->value.data[c], is = (*invstd)[c];
                if (use_batch_stats) {
                    const S k1 = S(sum_dy / double(m));
                    const S k2 = S(sum_dy_xh / double(m));
                    for (int n = 0; n < N; ++n) {
                        const S* dy = np->grad.ptr() + (size_t(n) * C + c) * plane;
                        const S* xh = xhat->ptr() + (size_t(n) * C + c) * plane;
                        S* dx = xp->grad.ptr() + (size_t(n) * C + c) * plane;
                        for (size_t i = 0; i < plane; ++i)
                            dx[i] += g * is * (dy[i] - k1 - xh[i] * k2);
                    }
                } else {
                    for (int n = 0; n < N; ++n) {
                        const S* dy = np->grad.ptr() + (size_t(n) * C + c) * plane;
                        S* dx = xp->grad.ptr() + (size_t(n) * C + c) * plane;
                        for (size_t i = 0; i < plane; ++i) dx[i] += g * is * dy[i];
                    }
                }
            }
        };
    }
    return node;
}

// Layer normalization over the channel axis at every (n,h,w) position.
template <class S>
Value<S> layernorm_channels(const Value<S>& x, const Value<S>& gamma, const Value<S>& beta,
                            S eps = S(1e-5)) {
    const int N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
    const size_t plane = size_t(H) * W;
    TensorT<S> out(x->value.shape, NoInit{});
    auto xhat = std::make_shared<TensorT<S>>(x->value.shape, NoInit{});
    auto invstd = std::make_shared<TensorT<S>>(std::vector<int>{N, H, W}, NoInit{});
    for (int n = 0; n < N; ++n) {
        const S* xb = x->value.ptr() + size_t(n) * C * plane;
        for (size_t pos = 0; pos < plane; ++pos) {
            double acc = 0.0;
            for (int c = 0; c < C; ++c) acc += double(xb[c * plane + pos]);
            const double mu = acc / C;
            double vacc = 0.0;
            for (int c = 0; c < C; ++c) {
                const double d = double(xb[c * plane + pos]) - mu;
                vacc += d * d;
            }
            const S is = S(1.0 / std::sqrt(vacc / C + double(eps)));
            invstd->data[size_t(n) * plane + pos] = is;
            for (int c = 0; c < C; ++c) {
                const size_t idx = size_t(n) * C * plane + size_t(c) * plane + pos;
                const S xh = (x->value.data[idx] - S(mu)) * is;
                xhat->data[idx] = xh;
                out.data[idx] = gamma->value.data[c] * xh + beta->value.data[c];
            }
        }
    }
    auto node = make_op<S>({x, gamma, beta}, std::move(out));
    if (node->requires_grad) {
        NodeT<S>* np = node.get();
        NodeT<S>*xp = x.get(), *gp = gamma.get(), *bp = beta.get();
        node->backprop = [np, xp, gp, bp, xhat, invstd, N, C, plane]() {
            for (int n = 0; n < N; ++n) {
                for (size_t pos = 0; pos < plane; ++pos) {
                    double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                    for (int c = 0; c < C; ++c) {
                        const size_t idx = size_t(n) * C * plane + size_t(c) * plane + pos;
                        const double dy = double(np->grad.data[idx]);
                        const double xh = double(xhat->data[idx]);
                        if (gp->requires_grad) gp->grad.data[c] += S(dy * xh);
                        if (bp->requires_grad) bp->grad.data[c] += S(dy);
                        const double dxh = dy * double(gp->value.data[c]);
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                    }
                    if (!xp->requires_grad) continue;
                    const S is = invstd->data[size_t(n) * plane + pos];
                    for (int c = 0; c < C; ++c) {
                        const size_t idx = size_t(n) * C * plane + size_t(c) * plane + pos;
                        const double dxh = double(np->grad.data[idx]) * double(gp->value.data[c]);
                        const double xh = double(xhat->data[idx]);
                        xp->grad.data[idx] +=
                            S(is * (dxh - sum_dxh / C - xh * sum_dxh_xh / C));
                    }
                }
            }
        };
    }
    return node;
}

// ------------------------------------------------------------- reshapes

template <class S>
Value<S> upsample_nearest2(const Value<S>& x) {
    const int N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
    TensorT<S> out({N, C, 2 * H, 2 * W}, NoInit{});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < H; ++i) {
                const S* src = &x->value.at(n, c, i, 0);
                S* d0 = &out.at(n, c, 2 * i, 0);
                S* d1 = &out.at(n, c, 2 * i + 1, 0);
                for (int j = 0; j < W; ++j) {
                    d0[2 * j] = d0[2 * j + 1] = src[j];
                    d1[2 * j] = d1[2 * j + 1] = src[j];
                }
            }
    auto node = make_op<S>({x}, std::move(out));
    if (node->requires_grad) {
        NodeT<S>* np = node.get();
        NodeT<S>* xp = x.get();
        node->backprop = [np, xp, N, C, H, W]() {
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c)
                    for (int i = 0; i < H; ++i) {
                        S* dst = &xp->grad.at(n, c, i, 0);
                        const S* g0 = &np->grad.at(n, c, 2 * i, 0);
                        const S* g1 = &np->grad.at(n, c, 2 * i + 1, 0);
                        for (int j = 0; j < W; ++j)
                            dst[j] += g0[2 * j] + g0[2 * j + 1] + g1[2 * j] + g1[2 * j + 1];
                    }
        };
    }
    return node;
}

template <class S>
Value<S> concat_channels(const Value<S>& a, const Value<S>& b) {
    const int N = a->value.dim(0), Ca = a->value.dim(1), H = a->value.dim(2), W = a->value.dim(3);
    const int Cb = b->value.dim(1);
    if (b->value.dim(0) != N || b->value.dim(2) != H || b->value.dim(3) != W)
        throw InvalidInput("concat_channels: spatial/batch mismatch");
    const size_t plane = size_t(H) * W;
    TensorT<S> out({N, Ca + Cb, H, W}, NoInit{});
    for (int n = 0; n < N; ++n) {
        std::copy_n(a->value.ptr() + size_t(n) * Ca * plane, Ca * plane,
                    out.ptr() + size_t(n) * (Ca + Cb) * plane);
        std::copy_n(b->value.ptr() + size_t(n) * Cb * plane, Cb * plane,
                    out.ptr() + size_t(n) * (Ca + Cb) * plane + Ca * plane);
    }
    auto node = make_op<S>({a, b}, std::move(out));
    if (node->requires_grad) {
        NodeT<S>* np = node.get();
        NodeT<S>*ap = a.get(), *bp = b.get();
        node->backprop = [np, ap, bp, N, Ca, Cb, plane]() {
            for (int n = 0; n < N; ++n) {
                const S* g = np->grad.ptr() + size_t(n) * (Ca + Cb) * plane;
                if (ap->requires_grad) {
                    S* da = ap->grad.ptr() + size_t(n) * Ca * plane;
                    for (size_t i = 0; i < size_t(Ca) * plane; ++i) da[i] += g[i];
                }
                if (bp->requires_grad) {
                    S* db = bp->grad.ptr() + size_t(n) * Cb * plane;
                    for (size_t i = 0; i < size_t(Cb) * plane; ++i) db[i] += g[Ca * plane + i];
                }
            }
        };
    }
    return node;
}

// --------------------------------------------------------- gate helpers

template <class S>
Value<S> global_avg_pool(const Value<S>& x) {
    const int N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
    const size_t plane = size_t(H) * W;
    TensorT<S> out({N, C, 1, 1}, NoInit{});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            double acc = 0.0;
            const S* p = x->value.ptr() + (size_t(n) * C + c) * plane;
            for (size_t i = 0; i < plane; ++i) acc += double(p[i]);
            out.at(n, c, 0, 0) = S(acc / double(plane));
        }
    auto node = make_op<S>({x}, std::move(out));
    if (node->requires_grad) {
        NodeT<S>* np = node.get();
        NodeT<S>* xp = x.get();
        node->backprop = [np, xp, N, C, plane]() {
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const S g = np->grad.at(n, c, 0, 0) / S(plane);
                    S* dx = xp->grad.ptr() + (size_t(n) * C + c) * plane;
                    for (size_t i = 0; i < plane; ++i) dx[i] += g;
                }
        };
    }
    return node;
}

// Per-position channel mean and max, stacked as two channels.
template <class S>
Value<S> channel_mean_max(const Value<S>& x) {
    const int N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
    const size_t plane = size_t(H) * W;
    TensorT<S> out({N, 2, H, W}, NoInit{});
    auto argmax = std::make_shared<std::vector<int>>(size_t(N) * plane);
    for (int n = 0; n < N; ++n) {
        const S* xb = x->value.ptr() + size_t(n) * C * plane;
        for (size_t pos = 0; pos < plane; ++pos) {
            double acc = 0.0;
            S best = xb[pos];
            int bestc = 0;
            for (int c = 0; c < C; ++c) {
                const S v = xb[c * plane + pos];
                acc += double(v);
                if (v > best) {
                    best = v;
                    bestc = c;
                }
            }
            out.data[size_t(n) * 2 * plane + pos] = S(acc / C);
            out.data[size_t(n) * 2 * plane + plane + pos] = best;
            (*argmax)[size_t(n) * plane + pos] = bestc;
        }
    }
    auto node = make_op<S>({x}, std::move(out));
    if (node->requires_grad) {
        NodeT<S>* np = node.get();
        NodeT<S>* xp = x.get();
        node->backprop = [np, xp, argmax, N, C, plane]() {
            for (int n = 0; n < N; ++n) {
                S* dxb = xp->grad.ptr() + size_t(n) * C * plane;
                for (size_t pos = 0; pos < plane; ++pos) {
                    const S gmean = np->grad.data[size_t(n) * 2 * plane + pos] / S(C);
                    for (int c = 0; c < C; ++c) dxb[c * plane + pos] += gmean;
                    dxb[size_t((*argmax)[size_t(n) * plane + pos]) * plane + pos] +=
                        np->grad.data[size_t(n) * 2 * plane + plane + pos];
                }
            }
        };
    }
    return node;
}

// x {N,C,H,W} * gate {N,C,1,1}
template <class S>
Value<S> mul_channel_gate(const Value<S>& x, const Value<S>& g) {
    const int N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
    const size_t plane = size_t(H) * W;
    TensorT<S> out(x->value.shape, NoInit{});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const S gv = g->value.at(n, c, 0, 0);
            const S* p = x->value.ptr() + (size_t(n) * C + c) * plane;
            S* po = out.ptr() + (size_t(n) * C + c) * plane;
            for (size_t i = 0; i < plane; ++i) po[i] = p[i] * gv;
        }
    auto node = make_op<S>({x, g}, std::move(out));
    if (node->requires_grad) {
        NodeT<S>* np = node.get();
        NodeT<S>*xp = x.get(), *gp = g.get();
        node->backprop = [np, xp, gp, N, C, plane]() {
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const size_t off = (size_t(n) * C + c) * plane;
                    const S gv = gp->value.at(n, c, 0, 0);
                    if (xp->requires_grad)
                        for (size_t i = 0; i < plane; ++i)
                            xp->grad.data[off + i] += np->grad.data[off + i] * gv;
                    if (gp->requires_grad) {
                        double acc = 0.0;
                        for (size_t i = 0; i < plane; ++i)
                            acc += double(np->grad.data[off + i]) * double(xp->value.data[off + i]);
                        gp->grad.at(n, c, 0, 0) += S(acc);
                    }
                }
        };
    }
    return node;
}

// x {N,C,H,W} * gate {N,1,H,W}
template <class S>
Value<S> mul_spatial_gate(const Value<S>& x, const Value<S>& g) {
    const int N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
    const size_t plane = size_t(H) * W;
    TensorT<S> out(x->value.shape, NoInit{});
    for (int n = 0; n < N; ++n) {
        const S* gb = g->value.ptr() + size_t(n) * plane;
        for (int c = 0; c < C; ++c) {
            const S* p = x->value.ptr() + (size_t(n) * C + c) * plane;
            S* po = out.ptr() + (size_t(n) * C + c) * plane;
            for (size_t i = 0; i < plane; ++i) po[i] = p[i] * gb[i];
        }
    }
    auto node = make_op<S>({x, g}, std::move(out));
    if (node->requires_grad) {
        NodeT<S>* np = node.get();
        NodeT<S>*xp = x.get(), *gp = g.get();
        node->backprop = [np, xp, gp, N, C, plane]() {
            for (int n = 0; n < N; ++n) {
                const S* gb = gp->value.ptr() + size_t(n) * plane;
                S* dgb = gp->requires_grad ? gp->grad.ptr() + size_t(n) * plane : nullptr;
                for (int c = 0; c < C; ++c) {
                    const size_t off = (size_t(n) * C + c) * plane;
                    for (size_t i = 0; i < plane; ++i) {
                        const S dy = np->grad.data[off + i];
                        if (xp->requires_grad) xp->grad.data[off + i] += dy * gb[i];
                        if (dgb) dgb[i] += dy * xp->value.data[off + i];
                    }
                }
            }
        };
    }
    return node;
}

// ------------------------------------------------------------ reductions

// Weighted sum -> scalar. Used as the scalar summary for gradient checks.
template <class S>
Value<S> weighted_sum(const Value<S>& x, std::shared_ptr<TensorT<S>> weights) {
    if (!x->value.same_shape(*weights)) throw InvalidInput("weighted_sum: shape mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < x->value.numel(); ++i)
        acc += double(x->value.data[i]) * double(weights->data[i]);
    TensorT<S> out({1});
    out.data[0] = S(acc);
    auto node = make_op<S>({x}, std::move(out));
    if (node->requires_grad) {
        NodeT<S>* np = node.get();
        NodeT<S>* xp = x.get();
        node->backprop = [np, xp, weights]() {
            const S g = np->grad.data[0];
            for (size_t i = 0; i < xp->grad.numel(); ++i)
                xp->grad.data[i] += g * weights->data[i];
        };
    }
    return node;
}

// Field loss as a graph node. Values and derivatives come from the scalar
// loss functions (double precision), so the training objective is exactly
// the tested loss module.
template <class S>
Value<S> field_loss_op(const Value<S>& pred, std::shared_ptr<TensorT<S>> target,
                       const LossConfig& cfg) {
    if (!(cfg.reduction == Reduction::mean || cfg.reduction == Reduction::sum))
        throw InvalidInput("field_loss_op: reduction must be mean or sum");
    if (pred->value.shape != target->shape) throw InvalidInput("field_loss_op: shape mismatch");
    const size_t n = pred->value.numel();
    auto grads = std::make_shared<TensorT<S>>(pred->value.shape, NoInit{});
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) {
        LossValue lv = scalar_loss(double(pred->value.data[i]), double(target->data[i]), cfg);
        acc += lv.value;
        grads->data[i] = S(lv.grad);
    }
    const double scale = cfg.reduction == Reduction::mean ? 1.0 / double(n) : 1.0;
    TensorT<S> out({1});
    out.data[0] = S(acc * scale);
    auto node = make_op<S>({pred}, std::move(out));
    if (node->requires_grad) {
        NodeT<S>* np = node.get();
        NodeT<S>* pp = pred.get();
        node->backprop = [np, pp, grads, scale]() {
            const S g = np->grad.data[0] * S(scale);
            for (size_t i = 0; i < pp->grad.numel(); ++i)
                pp->grad.data[i] += g * grads->data[i];
        };
    }
    return node;
}

}  // namespace lmdet

#endif
