#include "lmdet/heatmap_codec.hpp"

#include <algorithm>
#include <cmath>

namespace lmdet {

void HeatmapSpec::validate() const {
    if (height < 1 || width < 1) throw InvalidConfig("heatmap dims must be >= 1");
    if (!(sigma > 0.0)) throw InvalidConfig("heatmap sigma must be > 0");
    if (!(peak > 0.0 && peak <= 1.0)) throw InvalidConfig("heatmap peak must be in (0,1]");
}

EncodeResult encode_gaussian(const Landmark& lm, const HeatmapSpec& spec) {
    spec.validate();
    if (!std::isfinite(lm.x) || !std::isfinite(lm.y))
        throw InvalidInput("encode_gaussian: non-finite landmark coordinates");

    EncodeResult res;
    double x = lm.x, y = lm.y;
    if (x < 0.0 || x > spec.width - 1 || y < 0.0 || y > spec.height - 1) {
        x = std::clamp(x, 0.0, double(spec.width - 1));
        y = std::clamp(y, 0.0, double(spec.height - 1));
        res.clamped = true;
    }
    res.heatmap = Heatmap({spec.height, spec.width});
    const double inv2s2 = 1.0 / (2.0 * spec.sigma * spec.sigma);
    for (int i = 0; i < spec.height; ++i) {
        for (int j = 0; j < spec.width; ++j) {
            const double dx = j - x, dy = i - y;
            double v = spec.peak * std::exp(-(dx * dx + dy * dy) * inv2s2);
            res.heatmap.at(i, j) = std::clamp(v, 0.0, 1.0);
        }
    }
    return res;
}

DecodeResult decode_argmax(const Heatmap& hm, bool quarter_pixel_refine) {
    if (hm.rank() != 2 || hm.numel() == 0) throw InvalidInput("decode_argmax: empty heatmap");
    const int h = hm.dim(0), w = hm.dim(1);
    int bi = 0, bj = 0;
    double best = hm.at(0, 0);
    bool all_equal = true;
    for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
            const double v = hm.at(i, j);
            if (v != best) all_equal = false;
            if (v > best) {
                best = v;
                bi = i;
                bj = j;
            }
        }
    }
    DecodeResult res;
    if (all_equal) {
        res.degenerate = true;
        res.landmark = {0.0, 0.0, 0};
        return res;
    }
    double x = bj, y = bi;
    if (quarter_pixel_refine) {
        // shift 0.25 px toward the larger horizontal / vertical neighbor
        const double left = bj > 0 ? hm.at(bi, bj - 1) : -1.0;
        const double right = bj < w - 1 ? hm.at(bi, bj + 1) : -1.0;
        if (right != left) x += (right > left) ? 0.25 : -0.25;
        const double up = bi > 0 ? hm.at(bi - 1, bj) : -1.0;
        const double down = bi < h - 1 ? hm.at(bi + 1, bj) : -1.0;
        if (down != up) y += (down > up) ? 0.25 : -0.25;
    }
    res.landmark = {x, y, 0};
    return res;
}

Landmark rescale_coords(const Landmark& lm, Size2i from, Size2i to) {
    if (from.height < 1 || from.width < 1 || to.height < 1 || to.width < 1)
        throw InvalidInput("rescale_coords: dims must be >= 1");
    Landmark out = lm;
    out.x = lm.x * double(to.width) / double(from.width);
    out.y = lm.y * double(to.height) / double(from.height);
    return out;
}

}  // namespace lmdet
