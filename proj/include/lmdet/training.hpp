#ifndef LMDET_TRAINING_HPP
#define LMDET_TRAINING_HPP

#include <chrono>
#include <cmath>
#include <limits>

#include "lmdet/data.hpp"
#include "lmdet/detector.hpp"

namespace lmdet {

struct TrainConfig {
    LossConfig loss;
    double lr_max = 1e-3;
    double lr_min = 1e-4;
    int cycle_length = 0;  // steps per triangular cycle; 0 resolves to 2 epochs of steps
    bool constant_lr = false;  // when set, every step uses lr_max
    int batch_size = 2;
    int epochs = 100;
    uint64_t seed = 0;
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    AttentionKind attention = AttentionKind::coordinated;
    double divergence_guard = 1e6;

    void validate() const {
        loss.validate();
        if (!(lr_min <= lr_max)) throw InvalidConfig("train: lr_min must be <= lr_max");
        if (batch_size < 1) throw InvalidConfig("train: batch_size must be >= 1");
        if (epochs < 1) throw InvalidConfig("train: epochs must be >= 1");
        if (cycle_length < 0) throw InvalidConfig("train: cycle_length must be >= 0");
    }
};

// Triangular cycle: starts at lr_max, reaches lr_min at half cycle, returns
// to lr_max at the full cycle.
inline double cyclic_lr(long step, double lr_min, double lr_max, int cycle_length) {
    if (cycle_length < 1) throw InvalidConfig("cyclic_lr: cycle_length must be >= 1");
    const double phase = double(step % cycle_length) / double(cycle_length);
    const double tri = phase <= 0.5 ? 1.0 - 2.0 * phase : 2.0 * (phase - 0.5);
    return lr_min + (lr_max - lr_min) * tri;
}

// Adam with bias correction. Steps with any non-finite gradient are
// rejected whole (moments untouched) and counted.
template <class S>
class AdamOptimizer {
  public:
    AdamOptimizer(const std::vector<Value<S>>& params, double beta1, double beta2, double eps)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (const auto& p : params) {
            m_.emplace_back(p->value.shape);
            v_.emplace_back(p->value.shape);
        }
    }

    bool step(const std::vector<Value<S>>& params, double lr) {
        if (!(lr > 0.0)) throw InvalidConfig("adam: lr must be > 0");
        for (const auto& p : params)
            for (S g : p->grad.data)
                if (!std::isfinite(double(g))) {
                    ++rejected_;
                    return false;
                }
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, double(t_));
        const double bc2 = 1.0 - std::pow(beta2_, double(t_));
        for (size_t i = 0; i < params.size(); ++i) {
            S* p = params[i]->value.ptr();
            const S* g = params[i]->grad.ptr();
            S* m = m_[i].ptr();
            S* v = v_[i].ptr();
            const size_t n = params[i]->value.numel();
            for (size_t k = 0; k < n; ++k) {
                m[k] = S(beta1_) * m[k] + S(1.0 - beta1_) * g[k];
                v[k] = S(beta2_) * v[k] + S(1.0 - beta2_) * g[k] * g[k];
                const double mhat = double(m[k]) / bc1;
                const double vhat = double(v[k]) / bc2;
                p[k] -= S(lr * mhat / (std::sqrt(vhat) + eps_));
            }
        }
        return true;
    }

    long step_count() const { return t_; }
    int rejected_steps() const { return rejected_; }

  private:
    double beta1_, beta2_, eps_;
    std::vector<TensorT<S>> m_, v_;
    long t_ = 0;
    int rejected_ = 0;
};

struct TrainSample {
    FTensor image;   // {Cin,H,W}
    FTensor target;  // {L,H,W}
    std::vector<Landmark> landmarks;  // network space
};

inline std::vector<TrainSample> to_train_samples(const std::vector<AnnotatedImage>& images,
                                                 Size2i net_size, const HeatmapSpec& spec) {
    std::vector<TrainSample> out;
    out.reserve(images.size());
    for (const auto& ai : images) {
        PreparedSample ps = prepare(ai, net_size, spec);
        TrainSample ts;
        ts.image = ps.pixels.template cast<float>();
        ts.target = ps.targets.template cast<float>();
        ts.landmarks = ps.landmarks;
        out.push_back(std::move(ts));
    }
    return out;
}

struct StepRecord {
    long step;
    int epoch;
    double lr;
    double train_loss;
};

struct EpochRecord {
    int epoch;
    double mean_train_loss;
    double val_loss;
    double lr_end;
    double wall_seconds;
};

struct TrainLog {
    std::vector<StepRecord> steps;
    std::vector<EpochRecord> epochs;
    bool diverged = false;
    int adam_rejections = 0;

    // step,epoch,lr,train_loss,val_loss,wall_seconds; epoch columns are
    // filled on each epoch's final step. Deterministic mode zeroes the
    // wall-clock column so reruns are byte-identical.
    void write_csv(const std::string& path, bool deterministic) const;
};

struct TrainResult {
    std::shared_ptr<Detector<float>> detector;  // restored to the best epoch
    TrainLog log;
    int best_epoch = -1;
    double best_val_loss = std::numeric_limits<double>::infinity();
    std::vector<size_t> train_indices, val_indices;
};

// Deterministic 80/20 split by index hash; guaranteed non-empty on both
// sides for n >= 2.
inline void split_dataset(size_t n, std::vector<size_t>& train_idx, std::vector<size_t>& val_idx) {
    train_idx.clear();
    val_idx.clear();
    for (size_t i = 0; i < n; ++i) {
        if (splitmix64(i) % 5 == 0)
            val_idx.push_back(i);
        else
            train_idx.push_back(i);
    }
    if (val_idx.empty() && n >= 2) {
        val_idx.push_back(train_idx.back());
        train_idx.pop_back();
    }
    if (train_idx.empty() && !val_idx.empty()) {
        train_idx.push_back(val_idx.back());
        val_idx.pop_back();
    }
}

inline double evaluate_loss(Detector<float>& det, const std::vector<TrainSample>& data,
                            const std::vector<size_t>& indices, const LossConfig& loss_cfg,
                            AttentionKind kind) {
    if (indices.empty()) return 0.0;
    LossConfig cfg = loss_cfg;
    cfg.reduction = Reduction::mean;
    const auto& cfg_det = det.config();
    double acc = 0.0;
    const size_t chunk = 4;
    for (size_t start = 0; start < indices.size(); start += chunk) {
        const size_t bsz = std::min(chunk, indices.size() - start);
        FTensor xb({int(bsz), cfg_det.in_channels, cfg_det.input_h, cfg_det.input_w});
        auto tb = std::make_shared<FTensor>(
            std::vector<int>{int(bsz), cfg_det.num_landmarks, cfg_det.input_h, cfg_det.input_w});
        for (size_t b = 0; b < bsz; ++b) {
            const TrainSample& s = data[indices[start + b]];
            std::copy(s.image.data.begin(), s.image.data.end(),
                      xb.data.begin() + b * s.image.numel());
            std::copy(s.target.data.begin(), s.target.data.end(),
                      tb->data.begin() + b * s.target.numel());
        }
        auto x = make_leaf<float>(std::move(xb));
        auto y = det.forward_graph(x, kind, false, false);
        auto l = field_loss_op<float>(y, tb, cfg);
        acc += double(l->value.data[0]) * double(bsz);
    }
    return acc / double(indices.size());
}

// Full optimization loop: Adam, cyclic learning rate, per-epoch validation,
// min-validation-loss checkpoint selection.
TrainResult train(const DetectorConfig& det_cfg, const TrainConfig& tc,
                  const std::vector<TrainSample>& data);

// Eval-mode predictions decoded to landmarks, one list per requested index.
std::vector<std::vector<Landmark>> predict_landmarks(Detector<float>& det,
                                                     const std::vector<TrainSample>& data,
                                                     const std::vector<size_t>& indices,
                                                     AttentionKind kind);

}  // namespace lmdet

#endif
