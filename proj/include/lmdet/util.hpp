#ifndef LMDET_UTIL_HPP
#define LMDET_UTIL_HPP

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace lmdet {

// Invalid data fed to an operation (shape mismatch, non-finite coords, ...).
struct InvalidInput : std::runtime_error {
    explicit InvalidInput(const std::string& msg) : std::runtime_error(msg) {}
};

// A configuration that violates its invariants (r < 0, C % heads != 0, ...).
struct InvalidConfig : std::runtime_error {
    explicit InvalidConfig(const std::string& msg) : std::runtime_error(msg) {}
};

// splitmix64: used for index hashing (dataset splits, per-item seeds).
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Deterministic RNG with pinned algorithms (the std distributions are
// implementation-defined, so uniform/normal are done by hand here).
class Rng {
  public:
    explicit Rng(uint64_t seed) : state_(splitmix64(seed ^ 0x5bf0363546e92bc1ULL)) {}
    Rng(uint64_t seed, uint64_t stream) : Rng(splitmix64(seed) ^ splitmix64(stream * 0x9e3779b97f4a7c15ULL + 1)) {}

    uint64_t next_u64() {
        state_ = splitmix64(state_);
        return state_;
    }
    // uniform in [0,1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    int uniform_int(int lo, int hi) {  // inclusive bounds
        return lo + int(next_u64() % uint64_t(hi - lo + 1));
    }
    // standard normal via Box-Muller (no cached spare: keeps the stream positionally stable)
    double normal();

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = next_u64() % i;
            std::swap(v[i - 1], v[j]);
        }
    }

  private:
    uint64_t state_;
};

// SHA-256 of a byte buffer / file, hex-encoded. Used for manifest checksums.
std::string sha256_hex(const void* data, size_t len);
std::string sha256_hex(const std::string& s);
std::string sha256_file_hex(const std::string& path);

// Minimal CSV helpers: '.' decimal separator, header row, no quoting needed
// for the fields this project emits.
std::string format_double(double v);
std::vector<std::vector<std::string>> read_csv(const std::string& path);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

}  // namespace lmdet

#endif
