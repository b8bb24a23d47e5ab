#ifndef LMDET_DETECTOR_CONFIG_HPP
#define LMDET_DETECTOR_CONFIG_HPP

#include <vector>

#include "lmdet/util.hpp"

namespace lmdet {

// Encoder-decoder detector configuration. Encoder stage s (s = 0 is the
// shallowest) halves the spatial dims and outputs base_channels * 2^s
// channels; the decoder mirrors the encoder with skip connections.
// blocks_per_stage / heads_per_stage are listed deepest -> shallowest.
struct DetectorConfig {
    int stages = 4;
    int base_channels = 8;
    std::vector<int> blocks_per_stage{1, 1, 1, 1};
    std::vector<int> heads_per_stage{8, 4, 2, 1};
    double expansion = 4.0;  // transformer feed-forward expansion (lambda)
    int num_landmarks = 4;
    int in_channels = 1;
    int input_h = 64;
    int input_w = 64;
    double offset_scale = 0.25;

    int stage_channels(int s) const { return base_channels << s; }

    void validate() const {
        if (stages < 1) throw InvalidConfig("detector: stages must be >= 1");
        if (base_channels < 1) throw InvalidConfig("detector: base_channels must be >= 1");
        if (num_landmarks < 1) throw InvalidConfig("detector: num_landmarks must be >= 1");
        if (in_channels != 1 && in_channels != 3)
            throw InvalidConfig("detector: in_channels must be 1 or 3");
        if (int(blocks_per_stage.size()) != stages || int(heads_per_stage.size()) != stages)
            throw InvalidConfig("detector: per-stage lists must have length == stages");
        if (expansion <= 0.0) throw InvalidConfig("detector: expansion must be > 0");
        const int div = 1 << stages;
        if (input_h < div || input_w < div || input_h % div != 0 || input_w % div != 0)
            throw InvalidConfig("detector: input dims must be divisible by 2^stages");
        for (int idx = 0; idx < stages; ++idx) {
            const int s = stages - 1 - idx;
            if (blocks_per_stage[idx] < 0)
                throw InvalidConfig("detector: negative block count");
            if (heads_per_stage[idx] < 1 || stage_channels(s) % heads_per_stage[idx] != 0)
                throw InvalidConfig("detector: stage channels not divisible by head count");
        }
        if (offset_scale < 0.0 || offset_scale > 1.0)
            throw InvalidConfig("detector: offset_scale must be in [0,1]");
    }
};

}  // namespace lmdet

#endif
