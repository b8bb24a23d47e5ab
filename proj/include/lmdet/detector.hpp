#ifndef LMDET_DETECTOR_HPP
#define LMDET_DETECTOR_HPP

#include <map>
#include <memory>

#include "lmdet/coor_attention.hpp"
#include "lmdet/detector_config.hpp"
#include "lmdet/named_array.hpp"

namespace lmdet {

namespace det {

template <class S>
struct ConvBnRelu {
    Value<S> w, gamma, beta;  // bias-free conv: batch norm would cancel it
    std::vector<S> rmean, rvar;  // running statistics for eval mode
    int stride = 1, pad = 1;

    static ConvBnRelu init(int ci, int co, int k, int stride, Rng& rng,
                           const std::string& prefix) {
        ConvBnRelu l;
        l.stride = stride;
        l.pad = k / 2;
        TensorT<S> w({co, ci, k, k});
        const double s = std::sqrt(2.0 / (double(ci) * k * k));
        for (auto& v : w.data) v = S(rng.normal() * s);
        l.w = make_leaf<S>(std::move(w), true, prefix + ".w");
        TensorT<S> g({co});
        g.fill(S(1));
        l.gamma = make_leaf<S>(std::move(g), true, prefix + ".bn_g");
        l.beta = make_leaf<S>(TensorT<S>({co}), true, prefix + ".bn_b");
        l.rmean.assign(co, S(0));
        l.rvar.assign(co, S(1));
        return l;
    }

    Value<S> forward(const Value<S>& x, bool training, bool update_stats) {
        Value<S> y = conv2d_nobias(x, w, stride, pad);
        const int co = w->value.dim(0);
        if (training) {
            std::vector<S> sm(co), sv(co);
            y = batchnorm<S>(y, gamma, beta, true, nullptr, nullptr, S(1e-5), &sm, &sv);
            if (update_stats) {
                const S mom = S(0.1);
                for (int c = 0; c < co; ++c) {
                    rmean[c] = (S(1) - mom) * rmean[c] + mom * sm[c];
                    rvar[c] = (S(1) - mom) * rvar[c] + mom * sv[c];
                }
            }
        } else {
            y = batchnorm<S>(y, gamma, beta, false, &rmean, &rvar, S(1e-5));
        }
        return relu(y);
    }

    std::vector<Value<S>> parameters() const { return {w, gamma, beta}; }
};

// squeeze-excitation style channel gate: GAP -> bottleneck -> sigmoid
template <class S>
struct ChannelGate {
    Value<S> w1, b1, w2, b2;

    static ChannelGate init(int C, Rng& rng, const std::string& prefix) {
        ChannelGate g;
        const int hidden = std::max(2, C / 4);
        auto lin = [&](int co, int ci, const std::string& nm) {
            TensorT<S> w({co, ci});
            const double s = std::sqrt(2.0 / ci);
            for (auto& v : w.data) v = S(rng.normal() * s);
            return make_leaf<S>(std::move(w), true, prefix + nm);
        };
        g.w1 = lin(hidden, C, ".w1");
        g.b1 = make_leaf<S>(TensorT<S>({hidden}), true, prefix + ".b1");
        g.w2 = lin(C, hidden, ".w2");
        g.b2 = make_leaf<S>(TensorT<S>({C}), true, prefix + ".b2");
        return g;
    }

    Value<S> forward(const Value<S>& x) const {
        Value<S> z = global_avg_pool(x);
        z = linear_channels(z, w1, b1);
        z = relu(z);
        z = linear_channels(z, w2, b2);
        z = sigmoid(z);
        return mul_channel_gate(x, z);
    }

    std::vector<Value<S>> parameters() const { return {w1, b1, w2, b2}; }
};

// channel mean/max -> 7x7 conv -> sigmoid gate
template <class S>
struct SpatialGate {
    Value<S> w, b;

    static SpatialGate init(Rng& rng, const std::string& prefix) {
        SpatialGate g;
        TensorT<S> w({1, 2, 7, 7});
        const double s = std::sqrt(2.0 / (2.0 * 49.0));
        for (auto& v : w.data) v = S(rng.normal() * s);
        g.w = make_leaf<S>(std::move(w), true, prefix + ".w");
        g.b = make_leaf<S>(TensorT<S>({1}), true, prefix + ".b");
        return g;
    }

    Value<S> forward(const Value<S>& x) const {
        Value<S> s = channel_mean_max(x);
        s = conv2d(s, w, b, 1, 3);
        s = sigmoid(s);
        return mul_spatial_gate(x, s);
    }

    std::vector<Value<S>> parameters() const { return {w, b}; }
};

// decoder convolution block: conv-bn-relu, then channel and spatial gates
template <class S>
struct DecoderConvBlock {
    ConvBnRelu<S> conv;
    ChannelGate<S> ca;
    SpatialGate<S> sa;

    static DecoderConvBlock init(int ci, int co, Rng& rng, const std::string& prefix) {
        DecoderConvBlock b;
        b.conv = ConvBnRelu<S>::init(ci, co, 3, 1, rng, prefix + ".conv");
        b.ca = ChannelGate<S>::init(co, rng, prefix + ".ca");
        b.sa = SpatialGate<S>::init(rng, prefix + ".sa");
        return b;
    }

    Value<S> forward(const Value<S>& x, bool training, bool update_stats) {
        Value<S> y = conv.forward(x, training, update_stats);
        y = ca.forward(y);
        return sa.forward(y);
    }

    std::vector<Value<S>> parameters() const {
        auto ps = conv.parameters();
        for (auto& p : ca.parameters()) ps.push_back(p);
        for (auto& p : sa.parameters()) ps.push_back(p);
        return ps;
    }
};

}  // namespace det

// Heatmap detector: convolutional encoder, decoder of transformer blocks +
// nearest upsampling + attention-gated convolution blocks with skip
// connections, and a per-landmark sigmoid classification head.
template <class S>
class Detector {
  public:
    Detector(const DetectorConfig& cfg, uint64_t seed) : cfg_(cfg), seed_(seed) {
        cfg.validate();
        Rng rng(seed);
        for (int s = 0; s < cfg.stages; ++s) {
            const int ci = s == 0 ? cfg.in_channels : cfg.stage_channels(s - 1);
            enc_.push_back(det::ConvBnRelu<S>::init(ci, cfg.stage_channels(s), 3, 2, rng,
                                                    "enc" + std::to_string(s)));
        }
        for (int idx = 0; idx < cfg.stages; ++idx) {
            const int s = cfg.stages - 1 - idx;
            const int C = cfg.stage_channels(s);
            std::vector<CoorTransformerBlock<S>> blocks;
            for (int bidx = 0; bidx < cfg.blocks_per_stage[idx]; ++bidx) {
                AttentionConfig ac;
                ac.channels = C;
                ac.heads = cfg.heads_per_stage[idx];
                ac.offset_scale = cfg.offset_scale;
                blocks.push_back(CoorTransformerBlock<S>::init(
                    ac, cfg.expansion, rng,
                    "dec" + std::to_string(s) + ".t" + std::to_string(bidx)));
            }
            dec_blocks_.push_back(std::move(blocks));
            const int ci = s > 0 ? C + cfg.stage_channels(s - 1) : C;
            const int co = s > 0 ? cfg.stage_channels(s - 1) : C;
            dec_conv_.push_back(
                det::DecoderConvBlock<S>::init(ci, co, rng, "dec" + std::to_string(s) + ".fuse"));
        }
        {
            TensorT<S> w({cfg.num_landmarks, cfg.base_channels, 3, 3});
            const double sc = std::sqrt(2.0 / (double(cfg.base_channels) * 9.0));
            for (auto& v : w.data) v = S(rng.normal() * sc);
            head_w_ = make_leaf<S>(std::move(w), true, "head.w");
            TensorT<S> b({cfg.num_landmarks});
            // start the sigmoid output near 0.1: background-dominant targets
            b.fill(S(-2.1972245773362196));
            head_b_ = make_leaf<S>(std::move(b), true, "head.b");
        }
        for (int idx = 0; idx < cfg.stages; ++idx) {
            const int s = cfg.stages - 1 - idx;
            grids_.push_back(make_leaf<S>(make_grid<S>(cfg.input_h >> (s + 1),
                                                       cfg.input_w >> (s + 1))));
        }
    }

    const DetectorConfig& config() const { return cfg_; }
    uint64_t seed() const { return seed_; }

    // Builds the forward graph. `x` must be {N,Cin,H,W} with the configured
    // spatial size. Output is {N,L,H,W} with values in (0,1).
    Value<S> forward_graph(const Value<S>& x, AttentionKind kind, bool training,
                           bool update_stats) {
        const auto& shp = x->value.shape;
        if (shp.size() != 4 || shp[1] != cfg_.in_channels || shp[2] != cfg_.input_h ||
            shp[3] != cfg_.input_w)
            throw InvalidInput("detector: input size mismatch");
        std::vector<Value<S>> skips;
        Value<S> h = x;
        for (int s = 0; s < cfg_.stages; ++s) {
            h = enc_[s].forward(h, training, update_stats);
            skips.push_back(h);
        }
        for (int idx = 0; idx < cfg_.stages; ++idx) {
            const int s = cfg_.stages - 1 - idx;
            for (auto& blk : dec_blocks_[idx]) h = blk.forward(h, kind, &grids_[idx]);
            h = upsample_nearest2(h);
            if (s > 0) h = concat_channels(h, skips[s - 1]);
            h = dec_conv_[idx].forward(h, training, update_stats);
        }
        h = conv2d(h, head_w_, head_b_, 1, 1);
        return sigmoid(h);
    }

    // Inference forward: eval-mode statistics, plain tensors in and out.
    // Accepts {Cin,H,W} or {N,Cin,H,W}.
    TensorT<S> forward(const TensorT<S>& image, AttentionKind kind = AttentionKind::coordinated) {
        TensorT<S> in = image;
        const bool single = image.rank() == 3;
        if (single) in.shape = {1, image.dim(0), image.dim(1), image.dim(2)};
        auto x = make_leaf<S>(std::move(in));
        auto y = forward_graph(x, kind, false, false);
        TensorT<S> out = y->value;
        if (single) out.shape = {out.dim(1), out.dim(2), out.dim(3)};
        return out;
    }

    TensorT<S> forward_vanilla(const TensorT<S>& image) {
        return forward(image, AttentionKind::vanilla);
    }

    std::vector<Value<S>> parameters() const {
        std::vector<Value<S>> ps;
        for (const auto& e : enc_)
            for (auto& p : e.parameters()) ps.push_back(p);
        for (size_t i = 0; i < dec_blocks_.size(); ++i) {
            for (const auto& blk : dec_blocks_[i])
                for (auto& p : blk.parameters()) ps.push_back(p);
            for (auto& p : dec_conv_[i].parameters()) ps.push_back(p);
        }
        ps.push_back(head_w_);
        ps.push_back(head_b_);
        return ps;
    }

    size_t parameter_count() const {
        size_t n = 0;
        for (const auto& p : parameters()) n += p->value.numel();
        return n;
    }

    void zero_grads() {
        for (auto& p : parameters()) p->zero_grad();
    }

    // Named parameter and running-stat arrays, for checkpoints and snapshots.
    std::vector<NamedArray> named_state() const {
        std::vector<NamedArray> arrays;
        for (const auto& p : parameters()) {
            NamedArray a;
            a.name = p->name;
            a.shape = p->value.shape;
            a.data.reserve(p->value.numel());
            for (S v : p->value.data) a.data.push_back(float(v));
            arrays.push_back(std::move(a));
        }
        auto add_stats = [&arrays](const det::ConvBnRelu<S>& l, const std::string& prefix) {
            NamedArray m{prefix + ".bn_rmean", {int(l.rmean.size())}, {}};
            NamedArray v{prefix + ".bn_rvar", {int(l.rvar.size())}, {}};
            for (S x : l.rmean) m.data.push_back(float(x));
            for (S x : l.rvar) v.data.push_back(float(x));
            arrays.push_back(std::move(m));
            arrays.push_back(std::move(v));
        };
        for (size_t s = 0; s < enc_.size(); ++s)
            add_stats(enc_[s], "enc" + std::to_string(s));
        for (size_t idx = 0; idx < dec_conv_.size(); ++idx) {
            const int s = cfg_.stages - 1 - int(idx);
            add_stats(dec_conv_[idx].conv, "dec" + std::to_string(s) + ".fuse.conv");
        }
        return arrays;
    }

    void load_named_state(const std::vector<NamedArray>& arrays) {
        std::map<std::string, const NamedArray*> byname;
        for (const auto& a : arrays) byname[a.name] = &a;
        auto fetch = [&byname](const std::string& name) -> const NamedArray& {
            auto it = byname.find(name);
            if (it == byname.end()) throw InvalidInput("checkpoint missing array: " + name);
            return *it->second;
        };
        for (auto& p : parameters()) {
            const NamedArray& a = fetch(p->name);
            if (a.shape != p->value.shape) throw InvalidInput("checkpoint shape mismatch: " + p->name);
            for (size_t i = 0; i < p->value.numel(); ++i) p->value.data[i] = S(a.data[i]);
        }
        auto load_stats = [&fetch](det::ConvBnRelu<S>& l, const std::string& prefix) {
            const NamedArray& m = fetch(prefix + ".bn_rmean");
            const NamedArray& v = fetch(prefix + ".bn_rvar");
            for (size_t i = 0; i < l.rmean.size(); ++i) l.rmean[i] = S(m.data[i]);
            for (size_t i = 0; i < l.rvar.size(); ++i) l.rvar[i] = S(v.data[i]);
        };
        for (size_t s = 0; s < enc_.size(); ++s) load_stats(enc_[s], "enc" + std::to_string(s));
        for (size_t idx = 0; idx < dec_conv_.size(); ++idx) {
            const int s = cfg_.stages - 1 - int(idx);
            load_stats(dec_conv_[idx].conv, "dec" + std::to_string(s) + ".fuse.conv");
        }
    }

    // Full-precision snapshot (for in-memory best-checkpoint tracking).
    std::vector<TensorT<S>> snapshot() const {
        std::vector<TensorT<S>> vals;
        for (const auto& p : parameters()) vals.push_back(p->value);
        for (const auto& e : enc_) {
            vals.push_back(TensorT<S>({int(e.rmean.size())}, e.rmean));
            vals.push_back(TensorT<S>({int(e.rvar.size())}, e.rvar));
        }
        for (const auto& d : dec_conv_) {
            vals.push_back(TensorT<S>({int(d.conv.rmean.size())}, d.conv.rmean));
            vals.push_back(TensorT<S>({int(d.conv.rvar.size())}, d.conv.rvar));
        }
        return vals;
    }

    void restore(const std::vector<TensorT<S>>& snap) {
        auto ps = parameters();
        size_t i = 0;
        for (auto& p : ps) p->value = snap[i++];
        for (auto& e : enc_) {
            e.rmean.assign(snap[i].data.begin(), snap[i].data.end());
            ++i;
            e.rvar.assign(snap[i].data.begin(), snap[i].data.end());
            ++i;
        }
        for (auto& d : dec_conv_) {
            d.conv.rmean.assign(snap[i].data.begin(), snap[i].data.end());
            ++i;
            d.conv.rvar.assign(snap[i].data.begin(), snap[i].data.end());
            ++i;
        }
    }

  private:
    DetectorConfig cfg_;
    uint64_t seed_;
    std::vector<det::ConvBnRelu<S>> enc_;
    std::vector<std::vector<CoorTransformerBlock<S>>> dec_blocks_;  // deepest first
    std::vector<det::DecoderConvBlock<S>> dec_conv_;
    std::vector<Value<S>> grids_;
    Value<S> head_w_, head_b_;
};

}  // namespace lmdet

#endif
