#include "lmdet/manifest.hpp"

#include <filesystem>

#include "json.hpp"
#include "lmdet/util.hpp"

namespace lmdet {

void RunManifest::write(const std::string& path) const {
    nlohmann::json j;
    j["subcommand"] = subcommand;
    j["seed"] = seed;
    j["deterministic"] = deterministic;
    j["config"] = config;
    j["inputs"] = inputs;
    j["outputs"] = outputs;
    j["status"] = status;
    write_text_file(path, j.dump(2) + "\n");
}

void RunManifest::finalize(const std::string& path,
                           const std::vector<std::string>& artifact_paths, bool ok) {
    outputs.clear();
    for (const auto& p : artifact_paths) {
        const std::string rel = std::filesystem::path(p).filename().string();
        outputs[rel] = sha256_file_hex(p);
    }
    status = ok ? "ok" : "failed";
    write(path);
}

}  // namespace lmdet
