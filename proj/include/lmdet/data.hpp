#ifndef LMDET_DATA_HPP
#define LMDET_DATA_HPP

#include <optional>
#include <string>
#include <vector>

#include "lmdet/heatmap_codec.hpp"
#include "lmdet/tensor.hpp"

namespace lmdet {

struct AnnotatedImage {
    TensorT<double> pixels;  // {C,H,W}, values in [0,1]
    std::vector<Landmark> landmarks;  // original pixel space
    double spacing = 1.0;             // mm per pixel
    std::string name;
};

struct SyntheticSpec {
    int height = 64;
    int width = 64;
    int num_landmarks = 4;
    int num_images = 50;
    double noise_level = 0.05;
    uint64_t seed = 0;

    void validate() const;
};

// Procedural dataset: each image is a randomized smooth closed contour
// (radius r(theta) = r0 * (1 + sum_k a_k cos(k theta + phi_k)), k = 2..4)
// with landmarks at fixed fractional arc-length positions, over noisy
// background texture. Deterministic given the seed.
std::vector<AnnotatedImage> generate_synthetic(const SyntheticSpec& spec);

// Re-evaluates the contour equation for image i of a spec; used by tests
// as a rasterization oracle.
std::vector<std::pair<double, double>> synthetic_contour_points(const SyntheticSpec& spec,
                                                                int image_index, int samples);

enum class AnnotationFormat { xy_lines };  // "x,y" per line, landmark order by line

struct LoadReport {
    std::vector<AnnotatedImage> images;
    std::vector<std::string> errors;  // one entry per skipped file
};

// Loads PGM/PPM images plus per-image annotation text files (same basename,
// .txt). A second annotation directory, when given, supplies a second
// annotator whose coordinates are averaged with the first. Bad files are
// reported and skipped; the load continues.
LoadReport load_dataset(const std::string& image_dir, const std::string& annotation_dir,
                        AnnotationFormat format = AnnotationFormat::xy_lines,
                        const std::string& annotation_dir2 = "", double spacing = 1.0);

// Writes a dataset in the layout load_dataset reads (images/ + annotations/
// + dataset.json).
void write_dataset(const std::string& out_dir, const std::vector<AnnotatedImage>& images,
                   const SyntheticSpec* spec_meta = nullptr);

// dataset.json sidecar, when present
struct DatasetMeta {
    double spacing = 1.0;
    int num_landmarks = 0;
};
std::optional<DatasetMeta> read_dataset_meta(const std::string& dataset_dir);

// 8-bit binary PGM (P5); read also accepts P2/P3/P6.
void write_pgm(const std::string& path, const TensorT<double>& image);
TensorT<double> read_image(const std::string& path);

struct PreparedSample {
    TensorT<double> pixels;   // {C,H',W'}
    TensorT<double> targets;  // {L,H',W'} encoded heatmaps
    std::vector<Landmark> landmarks;  // network space
};

// Bilinear resize to the target size, landmark rescaling, and Gaussian
// heatmap encoding.
PreparedSample prepare(const AnnotatedImage& image, Size2i target_size, const HeatmapSpec& spec);

TensorT<double> resize_bilinear(const TensorT<double>& image, int out_h, int out_w);

}  // namespace lmdet

#endif
