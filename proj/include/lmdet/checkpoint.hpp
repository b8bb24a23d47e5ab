#ifndef LMDET_CHECKPOINT_HPP
#define LMDET_CHECKPOINT_HPP

#include <string>
#include <vector>

#include "lmdet/detector_config.hpp"
#include "lmdet/named_array.hpp"

namespace lmdet {

struct CheckpointMeta {
    int epoch = -1;
    double val_loss = 0.0;
    std::string attention = "coordinated";  // forward variant the weights were trained with
};

struct CheckpointData {
    DetectorConfig config;
    uint64_t seed = 0;
    CheckpointMeta meta;
    std::vector<NamedArray> arrays;
};

// Single self-describing container: magic + JSON header (config, seed,
// metadata, array index) + raw little-endian float32 payload.
void save_checkpoint(const std::string& path, const CheckpointData& ckpt);
CheckpointData load_checkpoint(const std::string& path);

}  // namespace lmdet

#endif
