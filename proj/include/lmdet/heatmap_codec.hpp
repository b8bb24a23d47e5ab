#ifndef LMDET_HEATMAP_CODEC_HPP
#define LMDET_HEATMAP_CODEC_HPP

#include "lmdet/tensor.hpp"

namespace lmdet {

// 2D landmark in pixel coordinates: x along width (columns), y along
// height (rows).
struct Landmark {
    double x = 0.0;
    double y = 0.0;
    int index = 0;
};

struct HeatmapSpec {
    int height = 64;
    int width = 64;
    double sigma = 3.0;  // paper never states sigma; see module notes
    double peak = 1.0;

    void validate() const;
};

struct EncodeResult {
    Heatmap heatmap;       // {H,W}, values in [0,1]
    bool clamped = false;  // landmark fell outside the field and was clamped
};

struct DecodeResult {
    Landmark landmark;
    bool degenerate = false;  // all-equal field
};

// Gaussian target: value(i,j) = peak * exp(-((j-x)^2 + (i-y)^2) / (2 sigma^2)).
EncodeResult encode_gaussian(const Landmark& lm, const HeatmapSpec& spec);

// Argmax decoding; ties break to the lowest row, then lowest column.
// An optional quarter-pixel shift toward the strongest 4-neighbor is
// available behind the flag (off by default: keeps the round trip exact).
DecodeResult decode_argmax(const Heatmap& hm, bool quarter_pixel_refine = false);

struct Size2i {
    int height = 0;
    int width = 0;
};

// x' = x*W'/W, y' = y*H'/H.
Landmark rescale_coords(const Landmark& lm, Size2i from, Size2i to);

}  // namespace lmdet

#endif
