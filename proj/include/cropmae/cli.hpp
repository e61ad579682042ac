#pragma once

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "cropmae/config.hpp"
#include "cropmae/error.hpp"
#include "cropmae/image.hpp"
#include "cropmae/model.hpp"
#include "cropmae/propeval.hpp"
#include "cropmae/rng.hpp"
#include "cropmae/synth.hpp"
#include "cropmae/trainer.hpp"
#include "cropmae/views.hpp"

namespace cropmae::cli {

enum ExitCode : int { kOk = 0, kUsage = 2, kNumeric = 3, kData = 4, kIo = 5 };

inline int exit_code_for(const Error& e) {
    switch (e.kind()) {
        case ErrorKind::Config:
        case ErrorKind::Parameter:
            return kUsage;
        case ErrorKind::Numeric:
            return kNumeric;
        case ErrorKind::Dimension:
        case ErrorKind::Contract:
        case ErrorKind::Format:
        case ErrorKind::Parse:
            return kData;
        case ErrorKind::Io:
            return kIo;
    }
    return kUsage;
}

namespace detail {

inline std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

inline ConfigMap file_layer(const std::string& path) { return path.empty() ? ConfigMap{} : ConfigMap::load(path); }

inline train::TrainState<float> load_model(const std::string& path) { return train::load_checkpoint<float>(path); }

inline std::vector<std::filesystem::path> files_with(const std::filesystem::path& dir, const std::string& prefix,
                                                     const std::string& ext) {
    return train::sorted_entries(dir, [&](const auto& p) {
        return p.extension() == ext && p.filename().string().starts_with(prefix);
    });
}

// A directory holding frame_*.ppm is one sequence; otherwise its seq_*
// subdirectories are.
inline std::vector<std::filesystem::path> sequence_dirs(const std::filesystem::path& root) {
    if (!std::filesystem::is_directory(root)) throw IoError("no such directory: " + root.string());
    if (!files_with(root, "frame_", ".ppm").empty()) return {root};
    auto dirs = train::sorted_entries(root, [](const auto& p) {
        return std::filesystem::is_directory(p) && p.filename().string().starts_with("seq_");
    });
    if (dirs.empty()) throw IoError(root.string() + " holds no frame_*.ppm files or seq_* directories");
    return dirs;
}

inline Image heat_to_image(const Tensor<float>& map, std::size_t out_size) {
    const std::size_t g = map.rows();
    float hi = 0;
    for (float v : map.data()) hi = std::max(hi, v);
    const float inv = hi > 0 ? 1.0f / hi : 0.0f;
    std::vector<float> gray(out_size * out_size);
    for (std::size_t y = 0; y < out_size; ++y)
        for (std::size_t x = 0; x < out_size; ++x) gray[y * out_size + x] = map(y * g / out_size, x * g / out_size) * inv;
    return gray_to_rgb(gray, out_size, out_size);
}

inline void paste(Image& canvas, const Image& tile, std::size_t top, std::size_t left) {
    for (std::size_t y = 0; y < tile.height; ++y)
        for (std::size_t x = 0; x < tile.width; ++x)
            for (std::size_t c = 0; c < 3; ++c) canvas.at(top + y, left + x, c) = tile.at(y, x, c);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Subcommands

struct PretrainArgs {
    std::string config, data, strategy, out, loss_scope;
    double mask_ratio = 0.985;
    std::size_t epochs = 0, steps = 0, batch_size = 0, workers = 0, log_every = 10;
    std::uint64_t seed = 0;
    std::vector<std::string> overrides;
};

inline int run_pretrain(const PretrainArgs& a, const CLI::App& sub, std::ostream& out) {
    ConfigMap cfg = detail::file_layer(a.config);
    for (const auto& kv : a.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    auto given = [&](const char* flag) { return sub.count(flag) > 0; };
    if (given("--data")) cfg.set("data", a.data);
    if (given("--out")) cfg.set("out", a.out);
    if (given("--strategy")) cfg.set("strategy", a.strategy);
    if (given("--mask-ratio")) cfg.set("mask_ratio", detail::fmt(a.mask_ratio));
    if (given("--loss-scope")) cfg.set("loss_scope", a.loss_scope);
    if (given("--epochs")) cfg.set("epochs", std::to_string(a.epochs));
    if (given("--steps")) {
        cfg.set("steps", std::to_string(a.steps));
        if (!given("--epochs")) cfg.set("epochs", "0");
    }
    if (given("--seed")) cfg.set("seed", std::to_string(a.seed));
    if (given("--batch-size")) cfg.set("batch_size", std::to_string(a.batch_size));
    if (given("--workers")) cfg.set("workers", std::to_string(a.workers));
    if (!cfg.has("data") || cfg.get_string("data", "").empty()) throw ConfigError("missing required key 'data' (--data)");
    if (!cfg.has("out")) cfg.set("out", "run");
    const train::TrainConfig tc = train::TrainConfig::from_map(cfg);

    const double ratio = model::resolve_mask_ratio(tc.mask_ratio, tc.model.patch.n_patches());
    out << "strategy=" << views::to_string(tc.strategy) << " mask_ratio=" << tc.mask_ratio << " effective_ratio=" << ratio
        << " visible=" << model::visible_count(tc.model.patch.n_patches(), ratio) << "/" << tc.model.patch.n_patches()
        << " out=" << tc.out << "\n";
    train::TrainHooks hooks;
    hooks.on_step = [&](const train::StepRecord& r) {
        if (a.log_every && (r.step % a.log_every == 0 || r.step == 1)) out << train::format_record(r) << "\n" << std::flush;
    };
    const auto result = train::train<float>(tc, hooks);
    out << "done steps=" << result.state.step << " checkpoint=" << (std::filesystem::path(tc.out) / "final.cmae").string()
        << "\n";
    return kOk;
}

struct EvalArgs {
    std::string ckpt, frames, labels, out;
    std::size_t top_k = 7, queue = 20, radius = 20;
    double temperature = 0.07;
};

struct SequenceScores {
    std::string name;
    prop::JF jf;
    double miou = 0;
    bool has_pck = false;
    double pck01 = 0, pck02 = 0;
};

inline SequenceScores evaluate_sequence(const model::ModelParams<float>& params, const std::filesystem::path& frames_dir,
                                        const std::filesystem::path& labels_dir, const prop::PropagationConfig& pc) {
    const auto frame_files = detail::files_with(frames_dir, "frame_", ".ppm");
    const auto mask_files = detail::files_with(labels_dir, "mask_", ".pgm");
    if (frame_files.empty()) throw IoError(frames_dir.string() + " has no frames");
    if (mask_files.size() != frame_files.size()) {
        throw ContractError(labels_dir.string() + ": " + std::to_string(mask_files.size()) + " masks for " +
                            std::to_string(frame_files.size()) + " frames");
    }
    const std::size_t S = params.config.patch.image_size, g = params.config.patch.grid();
    std::vector<prop::FeatureGrid> grids;
    std::vector<LabelMap> gt;
    std::size_t k = 1;
    for (std::size_t t = 0; t < frame_files.size(); ++t) {
        const Image img = load_ppm(frame_files[t]);
        if (img.height != S || img.width != S) {
            throw ContractError(frame_files[t].string() + " is " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                                ", model grid expects " + std::to_string(S) + "x" + std::to_string(S));
        }
        gt.push_back(load_pgm(mask_files[t]));
        if (gt.back().height != S || gt.back().width != S) throw ContractError(mask_files[t].string() + " extents differ from frame");
        for (auto v : gt.back().values) k = std::max<std::size_t>(k, v + 1u);
        grids.push_back(prop::extract_feature_grid(params, img));
    }
    const auto fields = prop::propagate(grids, prop::labels_to_field(gt[0], g, g, k), pc);
    std::vector<LabelMap> pred;
    for (const auto& f : fields) pred.push_back(prop::upsample_labels(f, S, S));

    SequenceScores s;
    s.name = frames_dir.filename().string();
    s.jf = prop::jf_mean(pred, gt);
    const std::size_t first = gt.size() > 1 ? 1 : 0;
    for (std::size_t t = first; t < gt.size(); ++t) s.miou += prop::miou(pred[t], gt[t], k);
    s.miou /= static_cast<double>(gt.size() - first);

    const auto kp_files = detail::files_with(labels_dir, "kp_", ".txt");
    if (kp_files.size() == frame_files.size()) {
        std::vector<std::vector<synth::Keypoint>> kps;
        for (const auto& f : kp_files) kps.push_back(synth::load_keypoints(f));
        auto points = [](const std::vector<synth::Keypoint>& v) {
            std::vector<prop::Point> p;
            for (const auto& kp : v) p.push_back({kp.x, kp.y});
            return p;
        };
        if (!kps[0].empty()) {
            const auto p0 = points(kps[0]);
            const auto kfields = prop::propagate(grids, prop::keypoints_to_field(p0, g, g, S, S), pc);
            std::size_t n = 0;
            for (std::size_t t = first; t < kps.size(); ++t) {
                if (kps[t].size() != kps[0].size()) throw ContractError(kp_files[t].string() + ": keypoint count changed");
                const auto predicted = prop::field_to_keypoints(kfields[t], S, S);
                const auto truth = points(kps[t]);
                for (std::size_t i = 0; i < truth.size(); ++i) {
                    double scale = prop::instance_scale(gt[t], static_cast<std::uint8_t>(kps[t][i].id));
                    if (scale <= 0) scale = static_cast<double>(S);
                    s.pck01 += prop::pck(std::span(&predicted[i], 1), std::span(&truth[i], 1), 0.1, scale);
                    s.pck02 += prop::pck(std::span(&predicted[i], 1), std::span(&truth[i], 1), 0.2, scale);
                    ++n;
                }
            }
            if (n) {
                s.has_pck = true;
                s.pck01 /= static_cast<double>(n);
                s.pck02 /= static_cast<double>(n);
            }
        }
    }
    return s;
}

inline std::string format_report(const std::vector<SequenceScores>& seqs) {
    std::ostringstream os;
    auto line = [&](const std::string& seq, const char* metric, double v) {
        os << "sequence=" << seq << " metric=" << metric << " value=" << detail::fmt(v) << "\n";
    };
    double j = 0, f = 0, jf = 0, mi = 0, p1 = 0, p2 = 0;
    std::size_t np = 0;
    for (const auto& s : seqs) {
        line(s.name, "J", s.jf.j);
        line(s.name, "F", s.jf.f);
        line(s.name, "J&F", s.jf.jf);
        line(s.name, "mIoU", s.miou);
        j += s.jf.j, f += s.jf.f, jf += s.jf.jf, mi += s.miou;
        if (s.has_pck) {
            line(s.name, "PCK@0.1", s.pck01);
            line(s.name, "PCK@0.2", s.pck02);
            p1 += s.pck01, p2 += s.pck02, ++np;
        }
    }
    const auto n = static_cast<double>(seqs.size());
    line("mean", "J", j / n);
    line("mean", "F", f / n);
    line("mean", "J&F", jf / n);
    line("mean", "mIoU", mi / n);
    if (np) {
        line("mean", "PCK@0.1", p1 / static_cast<double>(np));
        line("mean", "PCK@0.2", p2 / static_cast<double>(np));
    }
    return os.str();
}

inline int run_eval(const EvalArgs& a, std::ostream& out) {
    const auto state = detail::load_model(a.ckpt);
    prop::PropagationConfig pc{a.top_k, a.queue, a.radius, a.temperature};
    pc.validate();
    const auto frame_dirs = detail::sequence_dirs(a.frames);
    std::vector<SequenceScores> scores;
    for (const auto& dir : frame_dirs) {
        const auto labels_dir = a.labels.empty() ? dir
                                : frame_dirs.size() == 1 && dir == std::filesystem::path(a.frames)
                                    ? std::filesystem::path(a.labels)
                                    : std::filesystem::path(a.labels) / dir.filename();
        scores.push_back(evaluate_sequence(state.params, dir, labels_dir, pc));
    }
    const std::string report = format_report(scores);
    if (a.out.empty()) {
        out << report;
    } else {
        std::ofstream f(a.out);
        if (!f || !(f << report)) throw IoError("cannot write report " + a.out);
        out << "wrote " << a.out << "\n";
    }
    return kOk;
}

struct AttnArgs {
    std::string ckpt, image, out;
    int layer = -1;
};

inline int run_attn_map(const AttnArgs& a, std::ostream& out) {
    const auto state = detail::load_model(a.ckpt);
    const auto& cfg = state.params.config;
    Image img = load_ppm(a.image);
    if (img.height != cfg.patch.image_size || img.width != cfg.patch.image_size) {
        img = views::resize_bilinear(img, {0, 0, static_cast<long>(img.width), static_cast<long>(img.height)},
                                     cfg.patch.image_size, cfg.patch.image_size);
    }
    const auto maps = model::extract_cls_attention(state.params, img, a.layer);
    std::filesystem::create_directories(a.out);
    for (std::size_t h = 0; h < maps.size(); ++h) {
        char name[32];
        std::snprintf(name, sizeof name, "attn_head%02zu.ppm", h);
        save_ppm(detail::heat_to_image(maps[h], cfg.patch.image_size), std::filesystem::path(a.out) / name);
    }
    out << "wrote " << maps.size() << " maps to " << a.out << "\n";
    return kOk;
}

struct ReconArgs {
    std::string ckpt, out, strategy = "global-to-local";
    std::vector<std::string> images;
    double mask_ratio = 0.985;
    std::uint64_t seed = 0;
};

// Columns are images; rows are input view, cropped target view, its masked
// version and the reconstruction (visible patches pasted back).
inline int run_recon_grid(const ReconArgs& a, std::ostream& out) {
    const auto state = detail::load_model(a.ckpt);
    const auto& cfg = state.params.config;
    const auto& pc = cfg.patch;
    const std::size_t S = pc.image_size, N = pc.n_patches();
    std::vector<std::filesystem::path> files;
    for (const auto& p : a.images) {
        if (std::filesystem::is_directory(p)) {
            for (const auto& f : train::sorted_entries(p, [](const auto& q) { return q.extension() == ".ppm"; })) files.push_back(f);
        } else {
            files.emplace_back(p);
        }
    }
    if (files.empty()) throw IoError("no input images");
    views::AugmentConfig aug;
    aug.output_size = S;
    const auto strategy = views::parse_strategy(a.strategy);
    const double ratio = model::resolve_mask_ratio(a.mask_ratio, N);
    Image canvas(4 * S, files.size() * S);
    for (std::size_t i = 0; i < files.size(); ++i) {
        const Image src = load_ppm(files[i]);
        Rng rng = Rng(a.seed, 7).derive(i);
        const auto pair = views::generate_view_pair(src, strategy, aug, rng);
        const auto plan = model::make_mask_plan(N, ratio, rng);
        const Tensor<float> pred = model::reconstruct(state.params, pair, plan);
        const Tensor<float> raw = model::patchify<float>(pair.v2, pc);
        Tensor<float> masked = raw, recon = raw;
        std::vector<bool> visible(N, false);
        for (auto v : plan.visible) visible[v] = true;
        const std::size_t d = raw.cols();
        for (std::size_t r = 0; r < N; ++r) {
            if (visible[r]) continue;
            double mu = 0, var = 0;
            for (std::size_t j = 0; j < d; ++j) mu += raw(r, j);
            mu /= static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) var += (raw(r, j) - mu) * (raw(r, j) - mu);
            const double sd = std::sqrt(var / static_cast<double>(d) + 1e-6);
            for (std::size_t j = 0; j < d; ++j) {
                masked(r, j) = 0.5f;
                recon(r, j) = static_cast<float>(std::clamp(pred(r, j) * sd + mu, 0.0, 1.0));
            }
        }
        detail::paste(canvas, pair.v1, 0, i * S);
        detail::paste(canvas, pair.v2, S, i * S);
        detail::paste(canvas, model::unpatchify(masked, pc), 2 * S, i * S);
        detail::paste(canvas, model::unpatchify(recon, pc), 3 * S, i * S);
    }
    const std::filesystem::path dst(a.out);
    if (dst.has_parent_path()) std::filesystem::create_directories(dst.parent_path());
    save_ppm(canvas, dst);
    out << "wrote " << files.size() << " columns to " << a.out << "\n";
    return kOk;
}

struct SynthArgs {
    std::string kind = "moving-shapes", out;
    std::size_t n = 200, size = 64, frames = 8;
    std::uint64_t seed = 0;
};

inline int run_make_synth(const SynthArgs& a, std::ostream& out) {
    if (a.kind != "moving-shapes") throw ConfigError("unknown --kind '" + a.kind + "'");
    if (a.n < 1) throw ParameterError("--n must be at least 1");
    synth::SynthConfig sc{a.n, a.size, a.frames};
    const auto n = synth::synth_moving_shapes(Rng(a.seed, 0), sc, a.out);
    out << "wrote " << n << " sequences to " << a.out << "\n";
    return kOk;
}

struct FlopsArgs {
    std::string config;
    std::vector<std::size_t> visible{9, 2};
    std::vector<std::string> overrides;
};

inline std::string format_flops(const model::ModelConfig& mc, const std::vector<std::size_t>& visible) {
    std::ostringstream os;
    const std::size_t N = mc.patch.n_patches();
    os << "patches=" << N << " encoder_depth=" << mc.encoder.depth << " encoder_dim=" << mc.encoder.dim
       << " decoder_depth=" << mc.decoder.depth << " decoder_dim=" << mc.decoder.dim << "\n";
    std::vector<model::AttentionOps> ops;
    for (std::size_t v : visible) {
        ops.push_back(model::count_attention_ops(mc.encoder, mc.decoder, mc.patch, v));
        const auto& o = ops.back();
        os << "visible=" << v << " encoder_v1=" << o.encoder_v1 << " encoder_v2=" << o.encoder_v2
           << " decoder_self=" << o.decoder_self << " decoder_cross=" << o.decoder_cross << " total=" << o.total() << "\n";
    }
    if (ops.size() >= 2) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "encoder_v2_ratio visible=%zu/visible=%zu = %.6f\n", visible[0], visible[1],
                      static_cast<double>(ops[0].encoder_v2) / static_cast<double>(ops[1].encoder_v2));
        os << buf;
    }
    return os.str();
}

inline int run_flops(const FlopsArgs& a, std::ostream& out) {
    // Full-size architecture unless the config file or --set says otherwise.
    train::TrainConfig base;
    base.model = model::ModelConfig::full_scale();
    ConfigMap cfg;
    const ConfigMap defaults = base.to_map();
    for (const auto& [k, v] : defaults.entries()) {
        if (k.starts_with("enc_") || k.starts_with("dec_") || k == "image_size" || k == "patch_size") cfg.set(k, v);
    }
    cfg.merge(detail::file_layer(a.config));
    for (const auto& kv : a.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    out << format_flops(train::model_config_from_map(cfg), a.visible);
    return kOk;
}

// ---------------------------------------------------------------------------

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Siamese masked-autoencoder pre-training and label-propagation evaluation"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");
    app.footer("Exit codes: 0 ok, 2 usage/config, 3 numeric failure, 4 data contract, 5 io");

    PretrainArgs pa;
    auto* pre = app.add_subcommand("pretrain", "Pre-train encoder and decoder on a frame dataset");
    pre->add_option("--config", pa.config, "Config file (key = value)")->capture_default_str();
    pre->add_option("--data", pa.data, "Dataset directory (seq_*/frame_*.ppm or *.ppm)");
    pre->add_option("--strategy", pa.strategy, "same|random|local-to-global|global-to-local|frame-pair")
        ->default_str("global-to-local");
    pre->add_option("--mask-ratio", pa.mask_ratio, "Masking ratio of the target view")->default_str("0.985");
    pre->add_option("--loss-scope", pa.loss_scope, "masked|all")->default_str("masked");
    pre->add_option("--epochs", pa.epochs, "Passes over the dataset (0: use --steps)")->default_str("0");
    pre->add_option("--steps", pa.steps, "Optimization steps when epochs is 0")->default_str("2000");
    pre->add_option("--batch-size", pa.batch_size, "Samples per step")->default_str("64");
    pre->add_option("--workers", pa.workers, "Threads computing per-sample gradients")->default_str("1");
    pre->add_option("--seed", pa.seed, "Run seed")->default_str("0");
    pre->add_option("--out", pa.out, "Output directory for checkpoints and metrics.log")->default_str("run");
    pre->add_option("--log-every", pa.log_every, "Print every n-th step record")->capture_default_str();
    pre->add_option("--set", pa.overrides, "Extra config override key=value (repeatable)");

    EvalArgs ea;
    auto* ev = app.add_subcommand("eval-prop", "Propagate first-frame labels and report J, F, J&F, mIoU, PCK");
    ev->add_option("--ckpt", ea.ckpt, "Checkpoint file")->required();
    ev->add_option("--frames", ea.frames, "Sequence directory or root of seq_* directories")->required();
    ev->add_option("--labels", ea.labels, "Label directory with the same layout (default: --frames)");
    ev->add_option("--top-k", ea.top_k, "Context locations voting per query")->capture_default_str();
    ev->add_option("--queue", ea.queue, "Recent predicted frames kept as context")->capture_default_str();
    ev->add_option("--radius", ea.radius, "Neighbourhood radius in grid cells")->capture_default_str();
    ev->add_option("--temperature", ea.temperature, "Softmax temperature")->capture_default_str();
    ev->add_option("--out", ea.out, "Report file (default: stdout)");

    AttnArgs aa;
    auto* at = app.add_subcommand("attn-map", "Write the CLS attention map of every head as PPM");
    at->add_option("--ckpt", aa.ckpt, "Checkpoint file")->required();
    at->add_option("--image", aa.image, "Input PPM")->required();
    at->add_option("--out", aa.out, "Output directory")->required();
    at->add_option("--layer", aa.layer, "Encoder layer (negative counts from the end)")->capture_default_str();

    ReconArgs ra;
    auto* rc = app.add_subcommand("recon-grid", "Write an input/crop/masked/reconstruction grid as PPM");
    rc->add_option("--ckpt", ra.ckpt, "Checkpoint file")->required();
    rc->add_option("--images", ra.images, "Input PPM files or directories")->required();
    rc->add_option("--out", ra.out, "Output PPM")->required();
    rc->add_option("--strategy", ra.strategy, "View strategy")->capture_default_str();
    rc->add_option("--mask-ratio", ra.mask_ratio, "Masking ratio")->capture_default_str();
    rc->add_option("--seed", ra.seed, "Seed for views and masks")->capture_default_str();

    SynthArgs sa;
    auto* ms = app.add_subcommand("make-synth", "Generate a synthetic moving-shapes dataset");
    ms->add_option("--kind", sa.kind, "Dataset kind")->capture_default_str();
    ms->add_option("--n", sa.n, "Number of sequences")->capture_default_str();
    ms->add_option("--size", sa.size, "Frame side in pixels")->capture_default_str();
    ms->add_option("--frames", sa.frames, "Frames per sequence")->capture_default_str();
    ms->add_option("--seed", sa.seed, "Seed")->capture_default_str();
    ms->add_option("--out", sa.out, "Output directory")->required();

    FlopsArgs fa;
    auto* fl = app.add_subcommand("flops", "Attention multiply-accumulate counts per component");
    fl->add_option("--config", fa.config, "Config file with model keys");
    fl->add_option("--visible", fa.visible, "Visible patch counts of the target view (repeatable)")->default_str("9 2");
    fl->add_option("--set", fa.overrides, "Model key override key=value (repeatable)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (*pre) return run_pretrain(pa, *pre, out);
        if (*ev) return run_eval(ea, out);
        if (*at) return run_attn_map(aa, out);
        if (*rc) return run_recon_grid(ra, out);
        if (*ms) return run_make_synth(sa, out);
        if (*fl) return run_flops(fa, out);
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return exit_code_for(e);
    } catch (const std::filesystem::filesystem_error& e) {
        err << "error: " << e.what() << "\n";
        return kIo;
    } catch (const std::bad_alloc&) {
        err << "error: out of memory\n";
        return kNumeric;
    }
    return kUsage;
}

}  // namespace cropmae::cli
