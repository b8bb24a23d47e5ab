// lmdet: synthetic-data generation, detector training and evaluation,
// loss-comparison sweeps, and gradient checking. Every figure-shaped output
// is CSV; every run writes a manifest with resolved configuration and
// artifact checksums.

#include <filesystem>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "lmdet/checkpoint.hpp"
#include "lmdet/gradcheck.hpp"
#include "lmdet/manifest.hpp"
#include "lmdet/metrics.hpp"
#include "lmdet/training.hpp"

namespace fs = std::filesystem;
using namespace lmdet;

namespace {

struct CommonOpts {
    std::string out = ".";
    uint64_t seed = 0;
    bool deterministic = false;
};

void add_common(CLI::App* cmd, CommonOpts& c) {
    cmd->add_option("--out", c.out, "output directory");
    cmd->add_option("--seed", c.seed, "run seed");
    cmd->add_flag("--deterministic", c.deterministic,
                  "single-executor mode with zeroed wall-clock fields");
    cmd->set_config("--config", "", "flat key=value config file");
}

std::string attention_name(AttentionKind k) {
    return k == AttentionKind::coordinated ? "coordinated" : "vanilla";
}

std::vector<double> parse_double_list(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (!tok.empty()) out.push_back(std::stod(tok));
    }
    return out;
}

struct LoadedData {
    std::vector<AnnotatedImage> images;
    double spacing = 1.0;
};

LoadedData load_data_dir(const std::string& dir, double spacing_flag) {
    LoadedData ld;
    double spacing = spacing_flag;
    if (auto meta = read_dataset_meta(dir); meta && spacing_flag <= 0.0)
        spacing = meta->spacing;
    if (spacing <= 0.0) spacing = 1.0;
    auto rep = load_dataset((fs::path(dir) / "images").string(),
                            (fs::path(dir) / "annotations").string(),
                            AnnotationFormat::xy_lines, "", spacing);
    for (const auto& e : rep.errors) std::cerr << "warning: " << e << "\n";
    if (rep.images.empty()) throw InvalidInput("no usable images in " + dir);
    ld.images = std::move(rep.images);
    ld.spacing = spacing;
    return ld;
}

int cmd_generate(const CommonOpts& common, const SyntheticSpec& spec_in) {
    SyntheticSpec spec = spec_in;
    spec.seed = common.seed;
    spec.validate();

    fs::create_directories(common.out);
    RunManifest mf;
    mf.subcommand = "generate";
    mf.seed = common.seed;
    mf.deterministic = common.deterministic;
    mf.config = {{"height", std::to_string(spec.height)},
                 {"width", std::to_string(spec.width)},
                 {"num_landmarks", std::to_string(spec.num_landmarks)},
                 {"num_images", std::to_string(spec.num_images)},
                 {"noise_level", format_double(spec.noise_level)}};
    const std::string mf_path = (fs::path(common.out) / "manifest.json").string();
    mf.write(mf_path);

    auto images = generate_synthetic(spec);
    write_dataset(common.out, images, &spec);

    std::vector<std::string> artifacts = {(fs::path(common.out) / "dataset.json").string()};
    for (const auto& ai : images) {
        artifacts.push_back((fs::path(common.out) / "images" / (ai.name + ".pgm")).string());
        artifacts.push_back(
            (fs::path(common.out) / "annotations" / (ai.name + ".txt")).string());
    }
    mf.finalize(mf_path, artifacts, true);
    std::cout << "generated " << images.size() << " images in " << common.out << "\n";
    return 0;
}

struct TrainOpts {
    std::string data;
    std::string loss = "central";
    double r = 2.0, gamma = 2.0, alpha = 1.0;
    std::string attention = "coor";
    int epochs = 100, batch = 2, cycle = 0;
    double lr_max = 1e-3, lr_min = 1e-4;
    bool constant_lr = false;
    double sigma = 3.0, peak = 1.0;
    int stages = 4, base_channels = 8;
    int input_h = 64, input_w = 64;
};

int cmd_train(const CommonOpts& common, const TrainOpts& t) {
    LoadedData ld = load_data_dir(t.data, 0.0);

    DetectorConfig dc;
    dc.stages = t.stages;
    dc.base_channels = t.base_channels;
    dc.blocks_per_stage.assign(size_t(t.stages), 1);
    dc.heads_per_stage.clear();
    for (int i = 0; i < t.stages; ++i) dc.heads_per_stage.push_back(std::max(1, 8 >> i));
    dc.input_h = t.input_h;
    dc.input_w = t.input_w;
    dc.num_landmarks = int(ld.images[0].landmarks.size());
    dc.in_channels = ld.images[0].pixels.dim(0);
    dc.validate();

    TrainConfig tc;
    tc.loss.family = loss_family_from_string(t.loss);
    tc.loss.r = t.r;
    tc.loss.gamma = t.gamma;
    tc.loss.alpha = t.alpha;
    tc.epochs = t.epochs;
    tc.batch_size = t.batch;
    tc.cycle_length = t.cycle;
    tc.lr_max = t.lr_max;
    tc.lr_min = t.lr_min;
    tc.constant_lr = t.constant_lr;
    tc.seed = common.seed;
    if (t.attention == "coor" || t.attention == "coordinated")
        tc.attention = AttentionKind::coordinated;
    else if (t.attention == "vanilla")
        tc.attention = AttentionKind::vanilla;
    else
        throw InvalidConfig("unknown attention kind: " + t.attention);
    tc.validate();

    fs::create_directories(common.out);
    RunManifest mf;
    mf.subcommand = "train";
    mf.seed = common.seed;
    mf.deterministic = common.deterministic;
    mf.inputs = {t.data};
    mf.config = {{"loss", t.loss},
                 {"r", format_double(t.r)},
                 {"gamma", format_double(t.gamma)},
                 {"alpha", format_double(t.alpha)},
                 {"attention", attention_name(tc.attention)},
                 {"epochs", std::to_string(t.epochs)},
                 {"batch_size", std::to_string(t.batch)},
                 {"cycle_length", std::to_string(t.cycle)},
                 {"lr_max", format_double(t.lr_max)},
                 {"lr_min", format_double(t.lr_min)},
                 {"constant_lr", t.constant_lr ? "1" : "0"},
                 {"sigma", format_double(t.sigma)},
                 {"peak", format_double(t.peak)},
                 {"stages", std::to_string(dc.stages)},
                 {"base_channels", std::to_string(dc.base_channels)},
                 {"input_h", std::to_string(dc.input_h)},
                 {"input_w", std::to_string(dc.input_w)},
                 {"num_landmarks", std::to_string(dc.num_landmarks)}};
    const std::string mf_path = (fs::path(common.out) / "manifest.json").string();
    mf.write(mf_path);

    HeatmapSpec hs{dc.input_h, dc.input_w, t.sigma, t.peak};
    auto samples = to_train_samples(ld.images, {dc.input_h, dc.input_w}, hs);
    TrainResult res = train(dc, tc, samples);

    const std::string ckpt_path = (fs::path(common.out) / "checkpoint.bin").string();
    CheckpointData ckpt;
    ckpt.config = dc;
    ckpt.seed = tc.seed;
    ckpt.meta.epoch = res.best_epoch;
    ckpt.meta.val_loss = res.best_val_loss;
    ckpt.meta.attention = attention_name(tc.attention);
    ckpt.arrays = res.detector->named_state();
    save_checkpoint(ckpt_path, ckpt);

    const std::string log_path = (fs::path(common.out) / "trainlog.csv").string();
    res.log.write_csv(log_path, common.deterministic);

    mf.finalize(mf_path, {ckpt_path, log_path}, !res.log.diverged);
    if (res.log.diverged) {
        std::cerr << "error: training diverged (loss exceeded guard); aborted early\n";
        return 3;
    }
    std::cout << "best epoch " << res.best_epoch << " val loss "
              << format_double(res.best_val_loss) << "; checkpoint written to " << ckpt_path
              << "\n";
    return 0;
}

struct EvalOpts {
    std::string checkpoint;
    std::string data;
    std::string sdr_list = "2,2.5,3,4";
    double spacing = 0.0;  // 0: take from dataset.json (fallback 1.0)
    std::string attention;  // empty: use the checkpoint's
    std::string paired_against;
    double sigma = 3.0, peak = 1.0;
};

int cmd_eval(const CommonOpts& common, const EvalOpts& e) {
    CheckpointData ckpt = load_checkpoint(e.checkpoint);
    Detector<float> det(ckpt.config, ckpt.seed);
    det.load_named_state(ckpt.arrays);
    const std::string att = e.attention.empty() ? ckpt.meta.attention : e.attention;
    const AttentionKind kind = (att == "vanilla") ? AttentionKind::vanilla
                                                  : AttentionKind::coordinated;

    LoadedData ld = load_data_dir(e.data, e.spacing);
    if (int(ld.images[0].landmarks.size()) != ckpt.config.num_landmarks)
        throw InvalidInput("dataset landmark count does not match the checkpoint");

    fs::create_directories(common.out);
    RunManifest mf;
    mf.subcommand = "eval";
    mf.seed = common.seed;
    mf.deterministic = common.deterministic;
    mf.inputs = {e.checkpoint, e.data};
    mf.config = {{"sdr", e.sdr_list},
                 {"spacing", format_double(ld.spacing)},
                 {"attention", att},
                 {"sigma", format_double(e.sigma)}};
    const std::string mf_path = (fs::path(common.out) / "manifest.json").string();
    mf.write(mf_path);

    const Size2i net{ckpt.config.input_h, ckpt.config.input_w};
    HeatmapSpec hs{net.height, net.width, e.sigma, e.peak};

    std::vector<std::vector<Landmark>> pred, truth;
    double l2_sum = 0.0;
    size_t l2_count = 0;
    for (const auto& ai : ld.images) {
        PreparedSample ps = prepare(ai, net, hs);
        FTensor img = ps.pixels.cast<float>();
        FTensor hm = det.forward(img, kind);
        std::vector<Landmark> lms;
        const int L = hm.dim(0), Hn = hm.dim(1), Wn = hm.dim(2);
        const Size2i orig{ai.pixels.dim(1), ai.pixels.dim(2)};
        for (int l = 0; l < L; ++l) {
            Heatmap h({Hn, Wn});
            std::copy_n(hm.data.begin() + size_t(l) * Hn * Wn, size_t(Hn) * Wn,
                        h.data.begin());
            DecodeResult dr = decode_argmax(h);
            dr.landmark.index = l;
            lms.push_back(rescale_coords(dr.landmark, net, orig));
            Heatmap gt({Hn, Wn});
            std::copy_n(ps.targets.data.begin() + size_t(l) * Hn * Wn, size_t(Hn) * Wn,
                        gt.data.begin());
            l2_sum += heatmap_l2(h, gt);
            ++l2_count;
        }
        pred.push_back(std::move(lms));
        truth.push_back(ai.landmarks);
    }

    MetricsReport rep = compute_metrics(pred, truth, ld.spacing, parse_double_list(e.sdr_list));
    rep.l2_heatmap = l2_count ? l2_sum / double(l2_count) : 0.0;

    std::ostringstream metrics_csv;
    metrics_csv << "metric,value\n";
    metrics_csv << "mre," << format_double(rep.mre) << "\n";
    metrics_csv << "mre_std," << format_double(rep.mre_std) << "\n";
    for (const auto& [th, pct] : rep.sdr)
        metrics_csv << "sdr@" << format_double(th) << "," << format_double(pct) << "\n";
    metrics_csv << "l2_heatmap," << format_double(rep.l2_heatmap) << "\n";

    std::ostringstream per_image_csv;
    per_image_csv << "image,mre\n";
    for (size_t i = 0; i < ld.images.size(); ++i)
        per_image_csv << ld.images[i].name << "," << format_double(rep.per_image_mre[i])
                      << "\n";

    // paired t-test against a previous run's per-image MREs
    if (!e.paired_against.empty()) {
        auto rows = read_csv(e.paired_against);
        std::vector<double> other;
        for (size_t i = 1; i < rows.size(); ++i)
            if (rows[i].size() >= 2) other.push_back(std::stod(rows[i][1]));
        if (other.size() != rep.per_image_mre.size())
            throw InvalidInput("paired-against image count does not match");
        TTestResult tt = paired_t_test(rep.per_image_mre, other);
        metrics_csv << "t_statistic," << format_double(tt.t_statistic) << "\n";
        metrics_csv << "p_value," << format_double(tt.p_value) << "\n";
        metrics_csv << "t_test_degenerate," << (tt.degenerate ? 1 : 0) << "\n";
    }

    const std::string metrics_path = (fs::path(common.out) / "metrics.csv").string();
    const std::string per_image_path = (fs::path(common.out) / "per_image.csv").string();
    write_text_file(metrics_path, metrics_csv.str());
    write_text_file(per_image_path, per_image_csv.str());
    mf.finalize(mf_path, {metrics_path, per_image_path}, true);

    std::cout << "images evaluated: " << ld.images.size() << "\n";
    std::cout << "MRE: " << format_double(rep.mre) << " (+/- " << format_double(rep.mre_std)
              << ")\n";
    for (const auto& [th, pct] : rep.sdr)
        std::cout << "SDR@" << th << ": " << format_double(pct) << "%\n";
    std::cout << "heatmap L2: " << format_double(rep.l2_heatmap) << "\n";
    return 0;
}

struct CompareOpts {
    std::string py_list = "0.1,0.9";
    double step = 0.01;
    double r = 2.0, gamma = 2.0, alpha = 1.0, wce_alpha = 0.75;
};

int cmd_compare_losses(const CommonOpts& common, const CompareOpts& c) {
    fs::create_directories(common.out);
    RunManifest mf;
    mf.subcommand = "compare-losses";
    mf.seed = common.seed;
    mf.deterministic = common.deterministic;
    mf.config = {{"py", c.py_list},
                 {"step", format_double(c.step)},
                 {"r", format_double(c.r)},
                 {"gamma", format_double(c.gamma)},
                 {"alpha", format_double(c.alpha)},
                 {"wce_alpha", format_double(c.wce_alpha)}};
    const std::string mf_path = (fs::path(common.out) / "manifest.json").string();
    mf.write(mf_path);

    std::ostringstream csv;
    csv << "family,p_y,p_x,r,gamma,alpha,value,grad\n";
    const auto pys = parse_double_list(c.py_list);
    const int steps = int(std::lround(1.0 / c.step));
    for (double py : pys) {
        for (int i = 0; i <= steps; ++i) {
            const double px = std::min(1.0, i * c.step);
            auto row = [&](const char* fam, const LossValue& lv, double r, double g, double a) {
                csv << fam << "," << format_double(py) << "," << format_double(px) << ","
                    << format_double(r) << "," << format_double(g) << "," << format_double(a)
                    << "," << format_double(lv.value) << "," << format_double(lv.grad) << "\n";
            };
            row("central", central_loss(px, py, c.r), c.r, 0, 0);
            row("cross_entropy", cross_entropy(px, py), 0, 0, 0);
            row("weighted_cross_entropy", weighted_cross_entropy(px, py, c.wce_alpha), 0, 0,
                c.wce_alpha);
            row("focal", focal_loss(px, py, c.gamma, c.alpha), 0, c.gamma, c.alpha);
        }
    }
    const std::string csv_path = (fs::path(common.out) / "loss_comparison.csv").string();
    write_text_file(csv_path, csv.str());
    mf.finalize(mf_path, {csv_path}, true);
    std::cout << "wrote " << csv_path << "\n";
    return 0;
}

int cmd_gradcheck(const CommonOpts& common, const std::string& scope) {
    std::vector<GradCheckReport> reports;
    if (scope == "losses" || scope == "all") reports.push_back(gradcheck_losses());
    if (scope == "attention" || scope == "all") reports.push_back(gradcheck_attention());
    if (scope == "detector" || scope == "all") reports.push_back(gradcheck_detector());
    if (reports.empty()) throw InvalidConfig("unknown gradcheck scope: " + scope);

    bool all_ok = true;
    std::ostringstream out;
    out << "scope,checked,failed,worst_rel_err,tolerance,status\n";
    for (const auto& r : reports) {
        const bool ok = r.passed();
        all_ok = all_ok && ok;
        std::cout << (ok ? "[PASS] " : "[FAIL] ") << r.scope << ": " << r.checked
                  << " gradients, worst rel err " << format_double(r.worst_rel_err)
                  << " (tolerance " << format_double(r.tolerance) << ")\n";
        out << r.scope << "," << r.checked << "," << r.failed << ","
            << format_double(r.worst_rel_err) << "," << format_double(r.tolerance) << ","
            << (ok ? "pass" : "fail") << "\n";
    }
    if (common.out != ".") {
        fs::create_directories(common.out);
        write_text_file((fs::path(common.out) / "gradcheck.csv").string(), out.str());
    }
    return all_ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"heatmap landmark detection workbench"};
    app.require_subcommand(1);

    CommonOpts common;

    auto* gen = app.add_subcommand("generate", "write a synthetic landmark dataset");
    SyntheticSpec spec;
    add_common(gen, common);
    gen->add_option("--height", spec.height, "image height");
    gen->add_option("--width", spec.width, "image width");
    gen->add_option("--landmarks", spec.num_landmarks, "landmarks per image");
    gen->add_option("--images", spec.num_images, "number of images");
    gen->add_option("--noise", spec.noise_level, "background noise level");

    auto* tr = app.add_subcommand("train", "train a detector");
    TrainOpts topt;
    add_common(tr, common);
    tr->add_option("--data", topt.data, "dataset directory (from generate)")->required();
    tr->add_option("--loss", topt.loss,
                   "central|cross_entropy|weighted_cross_entropy|focal");
    tr->add_option("--r", topt.r, "central loss weighting exponent");
    tr->add_option("--gamma", topt.gamma, "focal focusing exponent");
    tr->add_option("--alpha", topt.alpha, "focal/WCE balance weight");
    tr->add_option("--attention", topt.attention, "coor|vanilla");
    tr->add_option("--epochs", topt.epochs);
    tr->add_option("--batch", topt.batch);
    tr->add_option("--cycle", topt.cycle, "cyclic lr period in steps (0: 2 epochs)");
    tr->add_option("--lr-max", topt.lr_max);
    tr->add_option("--lr-min", topt.lr_min);
    tr->add_flag("--constant-lr", topt.constant_lr, "use lr-max for every step");
    tr->add_option("--sigma", topt.sigma, "target heatmap Gaussian std (px)");
    tr->add_option("--peak", topt.peak, "target heatmap peak amplitude");
    tr->add_option("--stages", topt.stages);
    tr->add_option("--base-channels", topt.base_channels);
    tr->add_option("--input-h", topt.input_h);
    tr->add_option("--input-w", topt.input_w);

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    EvalOpts eopt;
    add_common(ev, common);
    ev->add_option("--checkpoint", eopt.checkpoint)->required();
    ev->add_option("--data", eopt.data)->required();
    ev->add_option("--sdr", eopt.sdr_list, "SDR thresholds, comma separated");
    ev->add_option("--spacing", eopt.spacing, "mm per pixel (default: dataset.json)");
    ev->add_option("--attention", eopt.attention, "override the checkpoint's variant");
    ev->add_option("--paired-against", eopt.paired_against,
                   "per_image.csv from another eval; adds a paired t-test");
    ev->add_option("--sigma", eopt.sigma, "sigma for ground-truth heatmaps (L2 metric)");

    auto* cl = app.add_subcommand("compare-losses",
                                  "per-pixel loss values over a (p_y, p_x) grid");
    CompareOpts copt;
    add_common(cl, common);
    cl->add_option("--py", copt.py_list, "target values, comma separated");
    cl->add_option("--step", copt.step, "p_x grid step");
    cl->add_option("--r", copt.r);
    cl->add_option("--gamma", copt.gamma);
    cl->add_option("--alpha", copt.alpha);
    cl->add_option("--wce-alpha", copt.wce_alpha);

    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    std::string scope = "all";
    add_common(gc, common);
    gc->add_option("--scope", scope, "losses|attention|detector|all");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_generate(common, spec);
        if (tr->parsed()) return cmd_train(common, topt);
        if (ev->parsed()) return cmd_eval(common, eopt);
        if (cl->parsed()) return cmd_compare_losses(common, copt);
        if (gc->parsed()) return cmd_gradcheck(common, scope);
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return 2;
    }
    return 1;
}
