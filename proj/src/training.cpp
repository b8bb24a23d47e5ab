#include "lmdet/training.hpp"

#include <fstream>

namespace lmdet {

void TrainLog::write_csv(const std::string& path, bool deterministic) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw InvalidInput("cannot write train log: " + path);
    f << "step,epoch,lr,train_loss,val_loss,wall_seconds\n";
    size_t ei = 0;
    for (size_t i = 0; i < steps.size(); ++i) {
        const StepRecord& s = steps[i];
        const bool epoch_end = (i + 1 == steps.size()) || (steps[i + 1].epoch != s.epoch);
        f << s.step << "," << s.epoch << "," << format_double(s.lr) << ","
          << format_double(s.train_loss) << ",";
        if (epoch_end && ei < epochs.size() && epochs[ei].epoch == s.epoch) {
            f << format_double(epochs[ei].val_loss) << ","
              << format_double(deterministic ? 0.0 : epochs[ei].wall_seconds);
            ++ei;
        } else {
            f << ",";
        }
        f << "\n";
    }
}

TrainResult train(const DetectorConfig& det_cfg, const TrainConfig& tc,
                  const std::vector<TrainSample>& data) {
    det_cfg.validate();
    tc.validate();
    if (data.empty()) throw InvalidInput("train: empty dataset");
    for (const auto& s : data) {
        if (s.image.rank() != 3 || s.image.dim(1) != det_cfg.input_h ||
            s.image.dim(2) != det_cfg.input_w || s.target.dim(0) != det_cfg.num_landmarks)
            throw InvalidInput("train: sample does not match detector config");
    }

    TrainResult res;
    split_dataset(data.size(), res.train_indices, res.val_indices);
    if (res.train_indices.empty()) throw InvalidInput("train: empty training split");

    res.detector = std::make_shared<Detector<float>>(det_cfg, tc.seed);
    Detector<float>& det = *res.detector;
    auto params = det.parameters();
    AdamOptimizer<float> opt(params, tc.beta1, tc.beta2, tc.adam_eps);

    const size_t ntrain = res.train_indices.size();
    const int steps_per_epoch = int((ntrain + tc.batch_size - 1) / tc.batch_size);
    const int cycle = tc.cycle_length > 0 ? tc.cycle_length : std::max(1, 2 * steps_per_epoch);

    LossConfig loss_cfg = tc.loss;
    loss_cfg.reduction = Reduction::mean;

    std::vector<TensorT<float>> best_snap;
    long step = 0;
    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::vector<size_t> order = res.train_indices;
        Rng(tc.seed, 0x45504F43ULL + uint64_t(epoch)).shuffle(order);

        double epoch_loss = 0.0;
        double last_lr = tc.lr_max;
        for (size_t start = 0; start < order.size(); start += tc.batch_size) {
            const size_t bsz = std::min(size_t(tc.batch_size), order.size() - start);
            FTensor xb({int(bsz), det_cfg.in_channels, det_cfg.input_h, det_cfg.input_w});
            auto tb = std::make_shared<FTensor>(std::vector<int>{
                int(bsz), det_cfg.num_landmarks, det_cfg.input_h, det_cfg.input_w});
            for (size_t b = 0; b < bsz; ++b) {
                const TrainSample& s = data[order[start + b]];
                std::copy(s.image.data.begin(), s.image.data.end(),
                          xb.data.begin() + b * s.image.numel());
                std::copy(s.target.data.begin(), s.target.data.end(),
                          tb->data.begin() + b * s.target.numel());
            }
            const double lr =
                tc.constant_lr ? tc.lr_max : cyclic_lr(step, tc.lr_min, tc.lr_max, cycle);
            last_lr = lr;

            auto x = make_leaf<float>(std::move(xb));
            auto y = det.forward_graph(x, tc.attention, true, true);
            auto loss = field_loss_op<float>(y, tb, loss_cfg);
            const double loss_val = double(loss->value.data[0]);

            det.zero_grads();
            backward(loss);
            opt.step(params, lr);

            res.log.steps.push_back({step, epoch, lr, loss_val});
            epoch_loss += loss_val;
            ++step;

            if (!std::isfinite(loss_val) || loss_val > tc.divergence_guard) {
                res.log.diverged = true;
                res.log.adam_rejections = opt.rejected_steps();
                if (best_snap.empty())
                    best_snap = det.snapshot();
                det.restore(best_snap);
                return res;
            }
        }

        const double val_loss =
            evaluate_loss(det, data, res.val_indices, loss_cfg, tc.attention);
        const double wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const int nsteps = int(order.size() + tc.batch_size - 1) / tc.batch_size;
        res.log.epochs.push_back(
            {epoch, epoch_loss / std::max(1, nsteps), val_loss, last_lr, wall});

        if (val_loss < res.best_val_loss) {
            res.best_val_loss = val_loss;
            res.best_epoch = epoch;
            best_snap = det.snapshot();
        }
    }
    res.log.adam_rejections = opt.rejected_steps();
    det.restore(best_snap);
    return res;
}

std::vector<std::vector<Landmark>> predict_landmarks(Detector<float>& det,
                                                     const std::vector<TrainSample>& data,
                                                     const std::vector<size_t>& indices,
                                                     AttentionKind kind) {
    std::vector<std::vector<Landmark>> out;
    out.reserve(indices.size());
    for (size_t idx : indices) {
        FTensor hm = det.forward(data[idx].image, kind);
        std::vector<Landmark> lms;
        const int L = hm.dim(0), H = hm.dim(1), W = hm.dim(2);
        for (int l = 0; l < L; ++l) {
            Heatmap h({H, W});
            std::copy_n(hm.data.begin() + size_t(l) * H * W, size_t(H) * W, h.data.begin());
            DecodeResult dr = decode_argmax(h);
            dr.landmark.index = l;
            lms.push_back(dr.landmark);
        }
        out.push_back(std::move(lms));
    }
    return out;
}

}  // namespace lmdet
