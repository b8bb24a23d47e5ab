#include "lmdet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "json.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian; this build targets LE hosts");

namespace lmdet {

namespace {

constexpr char kMagic[8] = {'L', 'M', 'D', 'E', 'T', 'C', 'K', '1'};

nlohmann::json config_to_json(const DetectorConfig& c) {
    return {{"stages", c.stages},
            {"base_channels", c.base_channels},
            {"blocks_per_stage", c.blocks_per_stage},
            {"heads_per_stage", c.heads_per_stage},
            {"expansion", c.expansion},
            {"num_landmarks", c.num_landmarks},
            {"in_channels", c.in_channels},
            {"input_h", c.input_h},
            {"input_w", c.input_w},
            {"offset_scale", c.offset_scale}};
}

DetectorConfig config_from_json(const nlohmann::json& j) {
    DetectorConfig c;
    c.stages = j.at("stages").get<int>();
    c.base_channels = j.at("base_channels").get<int>();
    c.blocks_per_stage = j.at("blocks_per_stage").get<std::vector<int>>();
    c.heads_per_stage = j.at("heads_per_stage").get<std::vector<int>>();
    c.expansion = j.at("expansion").get<double>();
    c.num_landmarks = j.at("num_landmarks").get<int>();
    c.in_channels = j.at("in_channels").get<int>();
    c.input_h = j.at("input_h").get<int>();
    c.input_w = j.at("input_w").get<int>();
    c.offset_scale = j.at("offset_scale").get<double>();
    return c;
}

}  // namespace

void save_checkpoint(const std::string& path, const CheckpointData& ckpt) {
    nlohmann::json header;
    header["format"] = 1;
    header["config"] = config_to_json(ckpt.config);
    header["seed"] = ckpt.seed;
    header["metadata"] = {{"epoch", ckpt.meta.epoch},
                          {"val_loss", ckpt.meta.val_loss},
                          {"attention", ckpt.meta.attention}};
    uint64_t offset = 0;
    nlohmann::json idx = nlohmann::json::array();
    for (const auto& a : ckpt.arrays) {
        idx.push_back({{"name", a.name}, {"shape", a.shape}, {"offset", offset},
                       {"count", a.data.size()}});
        offset += a.data.size();
    }
    header["arrays"] = idx;
    const std::string hs = header.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw InvalidInput("cannot write checkpoint: " + path);
    f.write(kMagic, 8);
    const uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&hlen), 8);
    f.write(hs.data(), std::streamsize(hs.size()));
    for (const auto& a : ckpt.arrays)
        f.write(reinterpret_cast<const char*>(a.data.data()),
                std::streamsize(a.data.size() * sizeof(float)));
    if (!f) throw InvalidInput("short write on checkpoint: " + path);
}

CheckpointData load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InvalidInput("cannot open checkpoint: " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kMagic, 8) != 0)
        throw InvalidInput("not a checkpoint file: " + path);
    uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), 8);
    std::string hs(hlen, '\0');
    f.read(hs.data(), std::streamsize(hlen));
    if (!f) throw InvalidInput("truncated checkpoint header: " + path);
    auto header = nlohmann::json::parse(hs);

    CheckpointData ckpt;
    ckpt.config = config_from_json(header.at("config"));
    ckpt.seed = header.at("seed").get<uint64_t>();
    ckpt.meta.epoch = header.at("metadata").at("epoch").get<int>();
    ckpt.meta.val_loss = header.at("metadata").at("val_loss").get<double>();
    ckpt.meta.attention = header.at("metadata").value("attention", "coordinated");
    for (const auto& e : header.at("arrays")) {
        NamedArray a;
        a.name = e.at("name").get<std::string>();
        a.shape = e.at("shape").get<std::vector<int>>();
        a.data.resize(e.at("count").get<size_t>());
        ckpt.arrays.push_back(std::move(a));
    }
    for (auto& a : ckpt.arrays) {
        f.read(reinterpret_cast<char*>(a.data.data()),
               std::streamsize(a.data.size() * sizeof(float)));
    }
    if (!f) throw InvalidInput("truncated checkpoint payload: " + path);
    return ckpt;
}

}  // namespace lmdet
