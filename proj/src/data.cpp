#include "lmdet/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "lmdet/util.hpp"

namespace fs = std::filesystem;

namespace lmdet {

namespace {

constexpr double kMarginPx = 4.0;
constexpr int kHarmonics = 3;  // k = 2, 3, 4
constexpr double kAmpMax = 0.2;
constexpr double kCenterJitter = 2.0;

struct Contour {
    double cx, cy, r0;
    double amp[kHarmonics];
    double phase[kHarmonics];

    double radius(double theta) const {
        double r = 1.0;
        for (int k = 0; k < kHarmonics; ++k) r += amp[k] * std::cos((k + 2) * theta + phase[k]);
        return r0 * r;
    }
    std::pair<double, double> point(double theta) const {
        const double r = radius(theta);
        return {cx + r * std::cos(theta), cy + r * std::sin(theta)};
    }
};

Contour sample_contour(const SyntheticSpec& spec, Rng& rng) {
    const double m = std::min(spec.height, spec.width);
    Contour c;
    c.cx = spec.width / 2.0 + rng.uniform(-kCenterJitter, kCenterJitter);
    c.cy = spec.height / 2.0 + rng.uniform(-kCenterJitter, kCenterJitter);
    c.r0 = rng.uniform(0.22, 0.25) * m;
    for (int k = 0; k < kHarmonics; ++k) {
        c.amp[k] = rng.uniform(-kAmpMax, kAmpMax);
        c.phase[k] = rng.uniform(0.0, 2.0 * M_PI);
    }
    return c;
}

}  // namespace

void SyntheticSpec::validate() const {
    if (height < 1 || width < 1) throw InvalidConfig("synthetic: image dims must be >= 1");
    if (num_landmarks < 1) throw InvalidConfig("synthetic: num_landmarks must be >= 1");
    if (num_images < 1) throw InvalidConfig("synthetic: num_images must be >= 1");
    if (noise_level < 0.0) throw InvalidConfig("synthetic: noise_level must be >= 0");
    // worst case: r0 <= 0.25*m with relative bumps up to 3*kAmpMax, plus
    // center jitter; landmarks must stay >= kMarginPx inside the image
    const double m = std::min(height, width);
    const double reach = 0.25 * m * (1.0 + kHarmonics * kAmpMax) + kCenterJitter;
    if (reach + kMarginPx > m / 2.0)
        throw InvalidConfig("synthetic: margins infeasible for this image size");
}

std::vector<std::pair<double, double>> synthetic_contour_points(const SyntheticSpec& spec,
                                                                int image_index, int samples) {
    spec.validate();
    Rng rng(spec.seed, uint64_t(image_index));
    Contour c = sample_contour(spec, rng);
    std::vector<std::pair<double, double>> pts;
    pts.reserve(samples);
    for (int i = 0; i < samples; ++i) pts.push_back(c.point(2.0 * M_PI * i / samples));
    return pts;
}

std::vector<AnnotatedImage> generate_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    const int H = spec.height, W = spec.width, L = spec.num_landmarks;
    std::vector<AnnotatedImage> out;
    out.reserve(spec.num_images);

    const int M = 2048;  // contour sampling resolution
    for (int img = 0; img < spec.num_images; ++img) {
        Rng rng(spec.seed, uint64_t(img));
        Contour c = sample_contour(spec, rng);

        // cumulative arc length over theta
        std::vector<double> arclen(M + 1, 0.0);
        std::pair<double, double> prev = c.point(0.0);
        std::vector<std::pair<double, double>> pts(M + 1);
        pts[0] = prev;
        for (int i = 1; i <= M; ++i) {
            auto p = c.point(2.0 * M_PI * i / M);
            pts[i] = p;
            arclen[i] = arclen[i - 1] + std::hypot(p.first - prev.first, p.second - prev.second);
            prev = p;
        }
        const double total = arclen[M];

        AnnotatedImage ai;
        ai.spacing = 1.0;
        char nm[32];
        std::snprintf(nm, sizeof(nm), "img_%05d", img);
        ai.name = nm;
        ai.landmarks.reserve(L);
        for (int j = 0; j < L; ++j) {
            const double want = total * double(j) / double(L);
            const auto it = std::lower_bound(arclen.begin(), arclen.end(), want);
            int hi = int(it - arclen.begin());
            if (hi == 0) hi = 1;
            const double seg = arclen[hi] - arclen[hi - 1];
            const double f = seg > 0 ? (want - arclen[hi - 1]) / seg : 0.0;
            const double theta = 2.0 * M_PI * (hi - 1 + f) / M;
            auto p = c.point(theta);
            ai.landmarks.push_back({p.first, p.second, j});
        }

        TensorT<double> px({1, H, W});
        px.fill(0.05);

        // background texture: a few soft blobs scaled by noise_level
        const int nblobs = 3;
        const double blob_amp = std::min(0.35, 2.0 * spec.noise_level);
        for (int bidx = 0; bidx < nblobs; ++bidx) {
            const double bx = rng.uniform(0.0, W - 1.0);
            const double by = rng.uniform(0.0, H - 1.0);
            const double bs = rng.uniform(3.0, 6.0);
            const double amp = blob_amp * rng.uniform(0.4, 1.0);
            if (amp <= 0.0) continue;
            const int rad = int(3.0 * bs);
            for (int i = std::max(0, int(by) - rad); i <= std::min(H - 1, int(by) + rad); ++i)
                for (int j = std::max(0, int(bx) - rad); j <= std::min(W - 1, int(bx) + rad); ++j) {
                    const double d2 = (j - bx) * (j - bx) + (i - by) * (i - by);
                    px.at(0, i, j) += amp * std::exp(-d2 / (2.0 * bs * bs));
                }
        }

        // contour stroke: max-blended Gaussian splats along the curve
        const double stroke_sigma = 0.9;
        const double stroke_amp = 0.85;
        for (int i = 0; i <= M; ++i) {
            const double sx = pts[i].first, sy = pts[i].second;
            for (int ii = std::max(0, int(sy) - 3); ii <= std::min(H - 1, int(sy) + 3); ++ii)
                for (int jj = std::max(0, int(sx) - 3); jj <= std::min(W - 1, int(sx) + 3); ++jj) {
                    const double d2 = (jj - sx) * (jj - sx) + (ii - sy) * (ii - sy);
                    const double v = stroke_amp * std::exp(-d2 / (2.0 * stroke_sigma * stroke_sigma));
                    if (v > px.at(0, ii, jj)) px.at(0, ii, jj) = v;
                }
        }

        // per-pixel noise
        if (spec.noise_level > 0.0) {
            for (auto& v : px.data) v += spec.noise_level * (2.0 * rng.uniform() - 1.0);
        }
        for (auto& v : px.data) v = std::clamp(v, 0.0, 1.0);

        ai.pixels = std::move(px);
        out.push_back(std::move(ai));
    }
    return out;
}

// ------------------------------------------------------------- image I/O

void write_pgm(const std::string& path, const TensorT<double>& image) {
    if (image.rank() != 3 || image.dim(0) != 1)
        throw InvalidInput("write_pgm: expected a {1,H,W} grayscale image");
    const int H = image.dim(1), W = image.dim(2);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw InvalidInput("write_pgm: cannot open " + path);
    f << "P5\n" << W << " " << H << "\n255\n";
    std::vector<uint8_t> row(size_t(W), 0);
    for (int i = 0; i < H; ++i) {
        for (int j = 0; j < W; ++j) {
            const double v = std::clamp(image.at(0, i, j), 0.0, 1.0);
            row[size_t(j)] = uint8_t(std::lround(v * 255.0));
        }
        f.write(reinterpret_cast<const char*>(row.data()), W);
    }
}

namespace {

int next_pnm_int(std::istream& in) {
    // skips whitespace and '#' comments
    while (true) {
        int ch = in.peek();
        if (ch == '#') {
            std::string line;
            std::getline(in, line);
        } else if (std::isspace(ch)) {
            in.get();
        } else {
            break;
        }
    }
    int v;
    if (!(in >> v)) throw InvalidInput("malformed PNM header");
    return v;
}

}  // namespace

TensorT<double> read_image(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InvalidInput("read_image: cannot open " + path);
    std::string magic;
    f >> magic;
    const bool ascii = (magic == "P2" || magic == "P3");
    const bool color = (magic == "P3" || magic == "P6");
    if (magic != "P2" && magic != "P3" && magic != "P5" && magic != "P6")
        throw InvalidInput("read_image: unsupported format " + magic + " in " + path);
    const int W = next_pnm_int(f);
    const int H = next_pnm_int(f);
    const int maxval = next_pnm_int(f);
    if (W < 1 || H < 1 || maxval < 1 || maxval > 255)
        throw InvalidInput("read_image: bad PNM header in " + path);
    const int C = color ? 3 : 1;
    TensorT<double> img({C, H, W});
    if (ascii) {
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j)
                for (int c = 0; c < C; ++c) img.at(c, i, j) = double(next_pnm_int(f)) / maxval;
    } else {
        f.get();  // single whitespace after maxval
        std::vector<uint8_t> buf(size_t(W) * H * C);
        f.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size()));
        if (size_t(f.gcount()) != buf.size()) throw InvalidInput("read_image: truncated " + path);
        size_t k = 0;
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j)
                for (int c = 0; c < C; ++c) img.at(c, i, j) = double(buf[k++]) / maxval;
    }
    return img;
}

// ---------------------------------------------------------- dataset I/O

namespace {

std::vector<Landmark> parse_xy_lines(const std::string& text, const std::string& file) {
    std::vector<Landmark> lms;
    std::stringstream ss(text);
    std::string line;
    int idx = 0;
    while (std::getline(ss, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const size_t comma = line.find(',');
        if (comma == std::string::npos)
            throw InvalidInput(file + ": malformed line '" + line + "'");
        size_t endx = 0, endy = 0;
        double x, y;
        try {
            x = std::stod(line.substr(0, comma), &endx);
            y = std::stod(line.substr(comma + 1), &endy);
        } catch (const std::exception&) {
            throw InvalidInput(file + ": malformed line '" + line + "'");
        }
        lms.push_back({x, y, idx++});
    }
    if (lms.empty()) throw InvalidInput(file + ": no landmarks");
    return lms;
}

}  // namespace

LoadReport load_dataset(const std::string& image_dir, const std::string& annotation_dir,
                        AnnotationFormat format, const std::string& annotation_dir2,
                        double spacing) {
    (void)format;  // only xy_lines exists
    LoadReport rep;
    if (!fs::is_directory(image_dir)) throw InvalidInput("image dir not found: " + image_dir);
    if (!fs::is_directory(annotation_dir))
        throw InvalidInput("annotation dir not found: " + annotation_dir);

    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(image_dir)) {
        if (!e.is_regular_file()) continue;
        const auto ext = e.path().extension().string();
        if (ext == ".pgm" || ext == ".ppm" || ext == ".pnm") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) rep.errors.push_back("no images found in " + image_dir);

    int expected_count = -1;
    for (const auto& img_path : files) {
        const std::string base = img_path.stem().string();
        try {
            AnnotatedImage ai;
            ai.pixels = read_image(img_path.string());
            ai.name = base;
            ai.spacing = spacing;
            const fs::path ann = fs::path(annotation_dir) / (base + ".txt");
            if (!fs::exists(ann)) throw InvalidInput("missing annotation " + ann.string());
            ai.landmarks = parse_xy_lines(read_text_file(ann.string()), ann.string());
            if (!annotation_dir2.empty()) {
                const fs::path ann2 = fs::path(annotation_dir2) / (base + ".txt");
                if (!fs::exists(ann2)) throw InvalidInput("missing annotation " + ann2.string());
                auto lms2 = parse_xy_lines(read_text_file(ann2.string()), ann2.string());
                if (lms2.size() != ai.landmarks.size())
                    throw InvalidInput(base + ": annotator landmark counts differ");
                for (size_t i = 0; i < lms2.size(); ++i) {
                    ai.landmarks[i].x = 0.5 * (ai.landmarks[i].x + lms2[i].x);
                    ai.landmarks[i].y = 0.5 * (ai.landmarks[i].y + lms2[i].y);
                }
            }
            if (expected_count < 0) expected_count = int(ai.landmarks.size());
            if (int(ai.landmarks.size()) != expected_count)
                throw InvalidInput(base + ": landmark count differs from the rest of the dataset");
            rep.images.push_back(std::move(ai));
        } catch (const std::exception& ex) {
            rep.errors.push_back(ex.what());
        }
    }
    return rep;
}

void write_dataset(const std::string& out_dir, const std::vector<AnnotatedImage>& images,
                   const SyntheticSpec* spec_meta) {
    fs::create_directories(fs::path(out_dir) / "images");
    fs::create_directories(fs::path(out_dir) / "annotations");
    for (const auto& ai : images) {
        write_pgm((fs::path(out_dir) / "images" / (ai.name + ".pgm")).string(), ai.pixels);
        std::string ann;
        for (const auto& lm : ai.landmarks)
            ann += format_double(lm.x) + "," + format_double(lm.y) + "\n";
        write_text_file((fs::path(out_dir) / "annotations" / (ai.name + ".txt")).string(), ann);
    }
    nlohmann::json meta;
    meta["num_images"] = images.size();
    meta["spacing"] = images.empty() ? 1.0 : images[0].spacing;
    meta["num_landmarks"] = images.empty() ? 0 : images[0].landmarks.size();
    if (spec_meta) {
        meta["synthetic"] = {{"height", spec_meta->height},
                             {"width", spec_meta->width},
                             {"noise_level", spec_meta->noise_level},
                             {"seed", spec_meta->seed}};
    }
    write_text_file((fs::path(out_dir) / "dataset.json").string(), meta.dump(2) + "\n");
}

std::optional<DatasetMeta> read_dataset_meta(const std::string& dataset_dir) {
    const fs::path p = fs::path(dataset_dir) / "dataset.json";
    if (!fs::exists(p)) return std::nullopt;
    DatasetMeta meta;
    auto j = nlohmann::json::parse(read_text_file(p.string()));
    meta.spacing = j.value("spacing", 1.0);
    meta.num_landmarks = j.value("num_landmarks", 0);
    return meta;
}

// ------------------------------------------------------------- prepare

TensorT<double> resize_bilinear(const TensorT<double>& image, int out_h, int out_w) {
    if (image.rank() != 3) throw InvalidInput("resize_bilinear: expected {C,H,W}");
    const int C = image.dim(0), H = image.dim(1), W = image.dim(2);
    if (out_h == H && out_w == W) return image;
    TensorT<double> out({C, out_h, out_w});
    // pure-scale mapping, consistent with rescale_coords: src = dst * W/W'
    const double sy = double(H) / out_h, sx = double(W) / out_w;
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < out_h; ++i) {
            const double fy = std::min(double(H - 1), i * sy);
            const int y0 = int(fy), y1 = std::min(y0 + 1, H - 1);
            const double wy = fy - y0;
            for (int j = 0; j < out_w; ++j) {
                const double fx = std::min(double(W - 1), j * sx);
                const int x0 = int(fx), x1 = std::min(x0 + 1, W - 1);
                const double wx = fx - x0;
                out.at(c, i, j) = (1 - wy) * ((1 - wx) * image.at(c, y0, x0) +
                                              wx * image.at(c, y0, x1)) +
                                  wy * ((1 - wx) * image.at(c, y1, x0) +
                                        wx * image.at(c, y1, x1));
            }
        }
    return out;
}

PreparedSample prepare(const AnnotatedImage& image, Size2i target_size, const HeatmapSpec& spec) {
    if (spec.height != target_size.height || spec.width != target_size.width)
        throw InvalidInput("prepare: heatmap spec size must match target size");
    PreparedSample out;
    const int H = image.pixels.dim(1), W = image.pixels.dim(2);
    out.pixels = resize_bilinear(image.pixels, target_size.height, target_size.width);
    out.targets = TensorT<double>(
        {int(image.landmarks.size()), target_size.height, target_size.width});
    out.landmarks.reserve(image.landmarks.size());
    for (size_t l = 0; l < image.landmarks.size(); ++l) {
        Landmark net = rescale_coords(image.landmarks[l], {H, W}, target_size);
        out.landmarks.push_back(net);
        auto enc = encode_gaussian(net, spec);
        std::copy(enc.heatmap.data.begin(), enc.heatmap.data.end(),
                  out.targets.data.begin() + l * enc.heatmap.numel());
    }
    return out;
}

}  // namespace lmdet
