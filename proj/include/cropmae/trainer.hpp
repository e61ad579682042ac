#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "cropmae/checkpoint.hpp"
#include "cropmae/config.hpp"
#include "cropmae/error.hpp"
#include "cropmae/image.hpp"
#include "cropmae/model.hpp"
#include "cropmae/optim.hpp"
#include "cropmae/rng.hpp"
#include "cropmae/views.hpp"

namespace cropmae::train {

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
    std::string data;
    std::string out;
    views::Strategy strategy = views::Strategy::GlobalToLocal;
    views::AugmentConfig augment{};
    double mask_ratio = 0.985;
    model::ModelConfig model{};
    model::LossScope loss_scope = model::LossScope::MaskedOnly;
    optim::ScheduleConfig schedule{};
    optim::AdamWConfig adamw{};
    std::size_t batch_size = 64;
    std::size_t epochs = 0;    // > 0: run this many passes over the data
    std::size_t steps = 2000;  // used when epochs == 0
    std::size_t repeated_sampling = 1;
    std::uint64_t seed = 0;
    std::size_t checkpoint_every = 0;  // 0: final checkpoint only
    std::size_t workers = 1;
    std::size_t frame_gap_min = 4;
    std::size_t frame_gap_max = 48;

    static const std::set<std::string>& keys() {
        static const std::set<std::string> k = {
            "data", "out", "strategy", "mask_ratio", "loss_scope", "seed", "batch_size", "epochs", "steps",
            "repeated_sampling", "checkpoint_every", "workers", "image_size", "patch_size", "enc_depth", "enc_dim",
            "enc_heads", "enc_mlp_ratio", "enc_cls", "dec_depth", "dec_dim", "dec_ff", "dec_heads", "dec_dropout",
            "base_lr", "lr_batch", "lr_scale", "warmup_epochs", "min_lr", "weight_decay", "beta1", "beta2",
            "area_v1_min", "area_v1_max", "area_v2_min", "area_v2_max", "aspect_min", "aspect_max", "hflip_p",
            "jitter_brightness", "jitter_contrast", "jitter_saturation", "blur_sigma_min", "blur_sigma_max",
            "frame_gap_min", "frame_gap_max"};
        return k;
    }

    static TrainConfig from_map(const ConfigMap& m) {
        m.require_known(keys());
        TrainConfig c;
        c.data = m.get_string("data", c.data);
        c.out = m.get_string("out", c.out);
        try {
            c.strategy = views::parse_strategy(m.get_string("strategy", std::string(views::to_string(c.strategy))));
        } catch (const ConfigError& e) {
            throw ConfigError(std::string("key 'strategy': ") + e.what());
        }
        c.mask_ratio = m.get_double("mask_ratio", c.mask_ratio);
        c.loss_scope = model::parse_loss_scope(m.get_string("loss_scope", model::to_string(c.loss_scope)));
        c.seed = m.get_uint("seed", c.seed);
        c.batch_size = m.get_uint("batch_size", c.batch_size);
        c.epochs = m.get_uint("epochs", c.epochs);
        c.steps = m.get_uint("steps", c.steps);
        c.repeated_sampling = m.get_uint("repeated_sampling", c.repeated_sampling);
        c.checkpoint_every = m.get_uint("checkpoint_every", c.checkpoint_every);
        c.workers = m.get_uint("workers", c.workers);
        auto& pm = c.model;
        pm.patch.image_size = m.get_uint("image_size", pm.patch.image_size);
        pm.patch.patch_size = m.get_uint("patch_size", pm.patch.patch_size);
        pm.encoder.depth = m.get_uint("enc_depth", pm.encoder.depth);
        pm.encoder.dim = m.get_uint("enc_dim", pm.encoder.dim);
        pm.encoder.heads = m.get_uint("enc_heads", pm.encoder.heads);
        pm.encoder.mlp_ratio = m.get_double("enc_mlp_ratio", pm.encoder.mlp_ratio);
        pm.encoder.with_cls = m.get_bool("enc_cls", pm.encoder.with_cls);
        pm.decoder.depth = m.get_uint("dec_depth", pm.decoder.depth);
        pm.decoder.dim = m.get_uint("dec_dim", pm.decoder.dim);
        pm.decoder.ff_dim = m.get_uint("dec_ff", pm.decoder.ff_dim);
        pm.decoder.heads = m.get_uint("dec_heads", pm.decoder.heads);
        pm.decoder.dropout = m.get_double("dec_dropout", pm.decoder.dropout);
        auto& s = c.schedule;
        s.base_lr = m.get_double("base_lr", s.base_lr);
        s.effective_batch = m.get_double("lr_batch", s.effective_batch);
        s.scale_with_batch = m.get_bool("lr_scale", s.scale_with_batch);
        s.warmup_epochs = m.get_double("warmup_epochs", s.warmup_epochs);
        s.min_lr = m.get_double("min_lr", s.min_lr);
        c.adamw.weight_decay = m.get_double("weight_decay", c.adamw.weight_decay);
        c.adamw.beta1 = m.get_double("beta1", c.adamw.beta1);
        c.adamw.beta2 = m.get_double("beta2", c.adamw.beta2);
        auto& a = c.augment;
        a.area_v1 = {m.get_double("area_v1_min", a.area_v1.lo), m.get_double("area_v1_max", a.area_v1.hi)};
        a.area_v2 = {m.get_double("area_v2_min", a.area_v2.lo), m.get_double("area_v2_max", a.area_v2.hi)};
        a.aspect = {m.get_double("aspect_min", a.aspect.lo), m.get_double("aspect_max", a.aspect.hi)};
        a.hflip_p = m.get_double("hflip_p", a.hflip_p);
        a.jitter.brightness = m.get_double("jitter_brightness", a.jitter.brightness);
        a.jitter.contrast = m.get_double("jitter_contrast", a.jitter.contrast);
        a.jitter.saturation = m.get_double("jitter_saturation", a.jitter.saturation);
        a.blur_sigma = {m.get_double("blur_sigma_min", a.blur_sigma.lo), m.get_double("blur_sigma_max", a.blur_sigma.hi)};
        a.output_size = pm.patch.image_size;
        c.frame_gap_min = m.get_uint("frame_gap_min", c.frame_gap_min);
        c.frame_gap_max = m.get_uint("frame_gap_max", c.frame_gap_max);
        c.validate();
        return c;
    }

    ConfigMap to_map() const {
        ConfigMap m;
        auto num = [](double v) {
            char buf[64];
            std::snprintf(buf, sizeof buf, "%.17g", v);
            return std::string(buf);
        };
        m.set("data", data);
        m.set("out", out);
        m.set("strategy", std::string(views::to_string(strategy)));
        m.set("mask_ratio", num(mask_ratio));
        m.set("loss_scope", model::to_string(loss_scope));
        m.set("seed", std::to_string(seed));
        m.set("batch_size", std::to_string(batch_size));
        m.set("epochs", std::to_string(epochs));
        m.set("steps", std::to_string(steps));
        m.set("repeated_sampling", std::to_string(repeated_sampling));
        m.set("checkpoint_every", std::to_string(checkpoint_every));
        m.set("workers", std::to_string(workers));
        m.set("image_size", std::to_string(model.patch.image_size));
        m.set("patch_size", std::to_string(model.patch.patch_size));
        m.set("enc_depth", std::to_string(model.encoder.depth));
        m.set("enc_dim", std::to_string(model.encoder.dim));
        m.set("enc_heads", std::to_string(model.encoder.heads));
        m.set("enc_mlp_ratio", num(model.encoder.mlp_ratio));
        m.set("enc_cls", model.encoder.with_cls ? "true" : "false");
        m.set("dec_depth", std::to_string(model.decoder.depth));
        m.set("dec_dim", std::to_string(model.decoder.dim));
        m.set("dec_ff", std::to_string(model.decoder.ff_dim));
        m.set("dec_heads", std::to_string(model.decoder.heads));
        m.set("dec_dropout", num(model.decoder.dropout));
        m.set("base_lr", num(schedule.base_lr));
        m.set("lr_batch", num(schedule.effective_batch));
        m.set("lr_scale", schedule.scale_with_batch ? "true" : "false");
        m.set("warmup_epochs", num(schedule.warmup_epochs));
        m.set("min_lr", num(schedule.min_lr));
        m.set("weight_decay", num(adamw.weight_decay));
        m.set("beta1", num(adamw.beta1));
        m.set("beta2", num(adamw.beta2));
        m.set("area_v1_min", num(augment.area_v1.lo));
        m.set("area_v1_max", num(augment.area_v1.hi));
        m.set("area_v2_min", num(augment.area_v2.lo));
        m.set("area_v2_max", num(augment.area_v2.hi));
        m.set("aspect_min", num(augment.aspect.lo));
        m.set("aspect_max", num(augment.aspect.hi));
        m.set("hflip_p", num(augment.hflip_p));
        m.set("jitter_brightness", num(augment.jitter.brightness));
        m.set("jitter_contrast", num(augment.jitter.contrast));
        m.set("jitter_saturation", num(augment.jitter.saturation));
        m.set("blur_sigma_min", num(augment.blur_sigma.lo));
        m.set("blur_sigma_max", num(augment.blur_sigma.hi));
        m.set("frame_gap_min", std::to_string(frame_gap_min));
        m.set("frame_gap_max", std::to_string(frame_gap_max));
        return m;
    }

    void validate() const {
        model.validate();
        augment.validate();
        if (augment.output_size != model.patch.image_size) throw ConfigError("augment output size must equal image_size");
        if (repeated_sampling < 1) throw ConfigError("key 'repeated_sampling' must be at least 1");
        if (batch_size < 1 || batch_size % repeated_sampling != 0) {
            throw ConfigError("key 'batch_size' must be a positive multiple of repeated_sampling");
        }
        if (!(mask_ratio >= 0 && mask_ratio < 1)) throw ConfigError("key 'mask_ratio' must lie in [0, 1)");
        if (frame_gap_min < 1 || frame_gap_max < frame_gap_min) throw ConfigError("key 'frame_gap_min'/'frame_gap_max' invalid");
        if (epochs == 0 && steps == 0) throw ConfigError("key 'steps' must be positive when epochs is 0");
        if (workers < 1) throw ConfigError("key 'workers' must be at least 1");
    }
};

inline model::ModelConfig model_config_from_map(const ConfigMap& m) { return TrainConfig::from_map(m).model; }

// ---------------------------------------------------------------------------
// Dataset

/// Frames grouped by sequence. A directory of seq_* subdirectories is read
/// as video sequences (frame_*.ppm); otherwise every *.ppm in the directory
/// is a one-frame sequence.
struct Dataset {
    std::vector<Image> images;
    std::vector<std::size_t> sequence_of;             // image -> sequence
    std::vector<std::size_t> frame_of;                // image -> frame index within its sequence
    std::vector<std::vector<std::size_t>> sequences;  // sequence -> image ids

    std::size_t size() const { return images.size(); }

    void add_sequence(std::vector<Image> frames) {
        std::vector<std::size_t> ids;
        for (auto& f : frames) {
            ids.push_back(images.size());
            sequence_of.push_back(sequences.size());
            frame_of.push_back(ids.size() - 1);
            images.push_back(std::move(f));
        }
        sequences.push_back(std::move(ids));
    }
};

inline std::vector<std::filesystem::path> sorted_entries(const std::filesystem::path& dir,
                                                         const std::function<bool(const std::filesystem::path&)>& keep) {
    std::vector<std::filesystem::path> out;
    for (const auto& e : std::filesystem::directory_iterator(dir))
        if (keep(e.path())) out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

inline Dataset load_dataset(const std::filesystem::path& root) {
    if (!std::filesystem::is_directory(root)) throw IoError("dataset directory " + root.string() + " does not exist");
    Dataset ds;
    const auto seqs = sorted_entries(root, [](const auto& p) {
        return std::filesystem::is_directory(p) && p.filename().string().starts_with("seq_");
    });
    auto is_frame = [](const auto& p) {
        return p.extension() == ".ppm" && p.filename().string().starts_with("frame_");
    };
    if (!seqs.empty()) {
        for (const auto& s : seqs) {
            std::vector<Image> frames;
            for (const auto& f : sorted_entries(s, is_frame)) frames.push_back(load_ppm(f));
            if (!frames.empty()) ds.add_sequence(std::move(frames));
        }
    } else {
        for (const auto& f : sorted_entries(root, [](const auto& p) { return p.extension() == ".ppm"; })) {
            ds.add_sequence({load_ppm(f)});
        }
    }
    if (ds.size() == 0) throw IoError("dataset " + root.string() + " contains no images");
    return ds;
}

// ---------------------------------------------------------------------------
// Training state

template <class T>
struct TrainState {
    TrainConfig config;
    model::ModelParams<T> params;
    optim::AdamWState<T> opt;
    std::uint64_t step = 0;
};

struct StepRecord {
    std::uint64_t step = 0;  // 1-based count of completed updates
    std::uint64_t epoch = 0;
    double lr = 0;
    double loss = 0;
};

inline std::string format_record(const StepRecord& r) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "step=%llu epoch=%llu lr=%.9g loss=%.9g", static_cast<unsigned long long>(r.step),
                  static_cast<unsigned long long>(r.epoch), r.lr, r.loss);
    return buf;
}

template <class T>
ckpt::Checkpoint<T> to_checkpoint(const TrainState<T>& s) {
    ckpt::Checkpoint<T> ck;
    ck.step = s.step;
    ck.rng_algorithm = std::string(Rng::kAlgorithm);
    ck.rng_seed = s.config.seed;
    ck.rng_counter = s.step;
    ck.config = s.config.to_map();
    std::string no_decay;
    for (std::size_t i = 0; i < s.params.tensors.size(); ++i) {
        ck.tensors.push_back({s.params.name(i), s.params.tensors[i]});
        if (!s.params.decays(i)) no_decay += (no_decay.empty() ? "" : ",") + s.params.name(i);
    }
    ck.config.set("no_decay", no_decay);
    ck.config.set("opt_step", std::to_string(s.opt.step));
    for (std::size_t i = 0; i < s.opt.m.size(); ++i) {
        ck.tensors.push_back({"opt.m." + s.params.name(i), s.opt.m[i]});
        ck.tensors.push_back({"opt.v." + s.params.name(i), s.opt.v[i]});
    }
    return ck;
}

template <class T>
TrainState<T> from_checkpoint(const ckpt::Checkpoint<T>& ck) {
    ConfigMap cfg;
    for (const auto& [k, v] : ck.config.entries())
        if (k != "no_decay" && k != "opt_step") cfg.set(k, v);
    TrainState<T> s;
    s.config = TrainConfig::from_map(cfg);
    s.step = ck.step;
    const auto layout = model::ParamLayout::build(s.config.model);
    std::vector<Tensor<T>> tensors;
    for (const auto& spec : layout.specs) {
        const auto* t = ck.find(spec.name);
        if (!t) throw FormatError("checkpoint lacks parameter " + spec.name);
        tensors.push_back(*t);
    }
    s.params = model::ModelParams<T>::from_tensors(s.config.model, std::move(tensors));
    s.opt.step = ck.config.get_uint("opt_step", 0);
    if (ck.find("opt.m." + layout.specs.front().name)) {
        for (const auto& spec : layout.specs) {
            const auto* m = ck.find("opt.m." + spec.name);
            const auto* v = ck.find("opt.v." + spec.name);
            if (!m || !v) throw FormatError("checkpoint has partial optimizer state for " + spec.name);
            s.opt.m.push_back(*m);
            s.opt.v.push_back(*v);
        }
    }
    return s;
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const TrainState<T>& s) {
    ckpt::save(to_checkpoint(s), path);
}

template <class T>
TrainState<T> load_checkpoint(const std::filesystem::path& path) {
    return from_checkpoint(ckpt::load<T>(path));
}

// ---------------------------------------------------------------------------
// Sampling

/// Fixed-size worker fan-out; task i always writes slot i.
inline void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
    workers = std::max<std::size_t>(1, std::min(workers, n));
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < n; i += workers) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

// Stream ids used under the run seed.
enum StreamId : std::uint64_t { kInitStream = 1, kOrderStream = 2, kSampleStream = 3 };

inline std::vector<std::size_t> epoch_order(std::uint64_t seed, std::uint64_t epoch, std::size_t n) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng = Rng(seed, kOrderStream).derive(epoch);
    rng.shuffle(std::span<std::size_t>(order));
    return order;
}

/// The RNG stream of sample `slot` in optimization step `step`.
inline Rng sample_stream(std::uint64_t seed, std::uint64_t step, std::uint64_t slot) {
    return Rng(seed, kSampleStream).derive(step).derive(slot);
}

inline views::ViewPair make_training_pair(const Dataset& ds, std::size_t image, const TrainConfig& cfg, Rng& rng) {
    if (cfg.strategy != views::Strategy::FramePair) {
        return views::generate_view_pair(ds.images[image], cfg.strategy, cfg.augment, rng);
    }
    const auto& seq = ds.sequences[ds.sequence_of[image]];
    const std::size_t f = ds.frame_of[image];
    const auto gap = static_cast<std::size_t>(rng.range(static_cast<std::int64_t>(cfg.frame_gap_min),
                                                        static_cast<std::int64_t>(cfg.frame_gap_max)));
    std::size_t partner = std::min(f + gap, seq.size() - 1);
    if (partner == f && f >= 1) partner = f >= gap ? f - gap : 0;
    return views::generate_view_pair_from_frames(ds.images[image], ds.images[seq[partner]], cfg.augment, rng);
}

struct Schedule {
    std::uint64_t steps_per_epoch = 1;
    std::uint64_t total_steps = 1;
    optim::ScheduleConfig lr;
};

inline Schedule plan_schedule(const TrainConfig& cfg, std::size_t dataset_size) {
    Schedule s;
    const std::size_t images_per_step = cfg.batch_size / cfg.repeated_sampling;
    s.steps_per_epoch = std::max<std::uint64_t>(1, dataset_size / images_per_step);
    s.total_steps = cfg.epochs > 0 ? cfg.epochs * s.steps_per_epoch : cfg.steps;
    s.lr = cfg.schedule;
    s.lr.total_epochs = static_cast<double>(s.total_steps) / static_cast<double>(s.steps_per_epoch);
    s.lr.warmup_epochs = std::min(s.lr.warmup_epochs, s.lr.total_epochs);
    return s;
}

// ---------------------------------------------------------------------------
// Loop

template <class T>
TrainState<T> initial_state(const TrainConfig& cfg) {
    cfg.validate();
    TrainState<T> s;
    s.config = cfg;
    Rng init(cfg.seed, kInitStream);
    s.params = model::ModelParams<T>::init(cfg.model, init);
    s.opt = optim::AdamWState<T>::zeros_like(s.params.tensors);
    return s;
}

struct TrainHooks {
    std::function<void(const StepRecord&)> on_step;
    std::uint64_t stop_after = 0;  // stop after this many steps in this call (0: run to the end)
};

template <class T>
struct TrainResult {
    TrainState<T> state;
    std::vector<StepRecord> log;
};

/// Image index for every batch slot of the step at position `pos` within its
/// epoch. Consecutive groups of `repeated` slots share one image.
inline std::vector<std::size_t> step_images(const std::vector<std::size_t>& order, std::uint64_t pos, std::size_t batch,
                                            std::size_t repeated) {
    const std::size_t per_step = batch / repeated;
    std::vector<std::size_t> out(batch);
    for (std::size_t slot = 0; slot < batch; ++slot) out[slot] = order[(pos * per_step + slot / repeated) % order.size()];
    return out;
}

// Records what is needed to replay a failing batch, then throws.
[[noreturn]] inline void abort_non_finite(const TrainConfig& cfg, std::uint64_t step, const std::vector<std::size_t>& images,
                                          const std::string& what) {
    std::string msg = "non-finite value at step " + std::to_string(step + 1) + " (" + what + "); batch seed=" +
                      std::to_string(cfg.seed) + " stream=" + std::to_string(kSampleStream) + " step_index=" + std::to_string(step);
    if (!cfg.out.empty()) {
        const auto path = std::filesystem::path(cfg.out) / ("nonfinite_step_" + std::to_string(step + 1) + ".txt");
        std::ofstream dump(path);
        dump << "seed " << cfg.seed << "\nstream " << kSampleStream << "\nstep_index " << step << "\nimages";
        for (auto i : images) dump << ' ' << i;
        dump << '\n';
        msg += " dump=" + path.string();
    }
    throw NumericError(msg);
}

/// Runs (or continues) optimization from `state` over `ds`.
template <class T>
TrainResult<T> train_from(TrainState<T> state, const Dataset& ds, const TrainHooks& hooks = {}) {
    const TrainConfig& cfg = state.config;
    if (ds.size() == 0) throw ParameterError("dataset is empty");
    const Schedule sched = plan_schedule(cfg, ds.size());
    const std::size_t n_params = state.params.tensors.size();
    const double ratio = model::resolve_mask_ratio(cfg.mask_ratio, cfg.model.patch.n_patches());
    const std::unique_ptr<bool[]> decay(new bool[n_params]);
    for (std::size_t i = 0; i < n_params; ++i) decay[i] = state.params.decays(i);

    std::ofstream metrics;
    if (!cfg.out.empty()) {
        std::filesystem::create_directories(cfg.out);
        metrics.open(std::filesystem::path(cfg.out) / "metrics.log", state.step == 0 ? std::ios::trunc : std::ios::app);
        if (!metrics) throw IoError("cannot open metrics log under " + cfg.out);
    }

    TrainResult<T> result;
    std::uint64_t cached_epoch = UINT64_MAX;
    std::vector<std::size_t> order;
    std::vector<std::vector<Tensor<T>>> sample_grads(cfg.batch_size);
    std::vector<double> sample_loss(cfg.batch_size);
    std::uint64_t ran = 0;

    while (state.step < sched.total_steps) {
        if (hooks.stop_after && ran >= hooks.stop_after) break;
        const std::uint64_t step = state.step;
        const std::uint64_t epoch = step / sched.steps_per_epoch;
        const std::uint64_t pos = step % sched.steps_per_epoch;
        if (epoch != cached_epoch) {
            order = epoch_order(cfg.seed, epoch, ds.size());
            cached_epoch = epoch;
        }
        const double lr = optim::lr_at(step, sched.steps_per_epoch, sched.lr);

        const auto images = step_images(order, pos, cfg.batch_size, cfg.repeated_sampling);
        try {
            parallel_for(cfg.batch_size, cfg.workers, [&](std::size_t slot) {
                Rng rng = sample_stream(cfg.seed, step, slot);
                const views::ViewPair pair = make_training_pair(ds, images[slot], cfg, rng);
                Tape<T> tape;
                const auto bound = model::bind(tape, state.params, true);
                const auto fw = model::forward_train(tape, state.params, bound, pair, ratio, rng, cfg.loss_scope, true);
                sample_loss[slot] = static_cast<double>(fw.loss.value().item());
                tape.backward(fw.loss);
                auto& g = sample_grads[slot];
                g.clear();
                for (const auto& v : bound) g.push_back(tape.grad(v));
            });
        } catch (const NumericError& e) {
            abort_non_finite(cfg, step, images, e.what());
        }

        // Reduce in slot order so the result does not depend on the worker count.
        double loss = 0;
        std::vector<Tensor<T>> grads = std::move(sample_grads[0]);
        loss += sample_loss[0];
        for (std::size_t s = 1; s < cfg.batch_size; ++s) {
            loss += sample_loss[s];
            for (std::size_t i = 0; i < n_params; ++i) {
                auto dst = grads[i].data();
                auto src = sample_grads[s][i].data();
                for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
            }
        }
        const T inv = T(1) / static_cast<T>(cfg.batch_size);
        for (auto& g : grads)
            for (auto& v : g.data()) v *= inv;
        loss /= static_cast<double>(cfg.batch_size);
        if (!std::isfinite(loss)) abort_non_finite(cfg, step, images, "loss");

        try {
            optim::adamw_step<T>(state.params.tensors, grads, std::span<const bool>(decay.get(), n_params), state.opt, lr, cfg.adamw);
        } catch (const NumericError& e) {
            abort_non_finite(cfg, step, images, e.what());
        }
        if (!state.params.all_finite()) abort_non_finite(cfg, step, images, "parameter after update");
        for (std::size_t i = 0; i < n_params; ++i) {
            if (!state.opt.m[i].all_finite() || !state.opt.v[i].all_finite()) {
                abort_non_finite(cfg, step, images, "optimizer moment after update");
            }
        }
        ++state.step;
        ++ran;

        const StepRecord rec{state.step, epoch, lr, loss};
        result.log.push_back(rec);
        if (metrics) metrics << format_record(rec) << '\n' << std::flush;
        if (hooks.on_step) hooks.on_step(rec);
        if (!cfg.out.empty() && cfg.checkpoint_every && state.step % cfg.checkpoint_every == 0) {
            char name[48];
            std::snprintf(name, sizeof name, "ckpt_%06llu.cmae", static_cast<unsigned long long>(state.step));
            save_checkpoint(std::filesystem::path(cfg.out) / name, state);
        }
    }
    if (!cfg.out.empty()) save_checkpoint(std::filesystem::path(cfg.out) / "final.cmae", state);
    result.state = std::move(state);
    return result;
}

/// Fresh run: loads cfg.data, initializes parameters from the seed and trains.
template <class T = float>
TrainResult<T> train(const TrainConfig& cfg, const TrainHooks& hooks = {}) {
    if (cfg.data.empty()) throw ConfigError("key 'data' is required");
    const Dataset ds = load_dataset(cfg.data);
    return train_from(initial_state<T>(cfg), ds, hooks);
}

}  // namespace cropmae::train
