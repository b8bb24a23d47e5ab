#ifndef LMDET_MANIFEST_HPP
#define LMDET_MANIFEST_HPP

#include <map>
#include <string>
#include <vector>

namespace lmdet {

// Run manifest: written with the resolved configuration before the run,
// finalized with artifact checksums after. Deterministic reruns of the same
// manifest reproduce artifacts byte-for-byte.
struct RunManifest {
    std::string subcommand;
    uint64_t seed = 0;
    bool deterministic = false;
    std::map<std::string, std::string> config;  // resolved key -> value
    std::vector<std::string> inputs;
    std::map<std::string, std::string> outputs;  // path -> sha256 (filled at finalize)
    std::string status = "running";

    void write(const std::string& path) const;
    void finalize(const std::string& path, const std::vector<std::string>& artifact_paths,
                  bool ok);
};

}  // namespace lmdet

#endif
