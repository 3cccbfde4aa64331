#pragma once

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "mnad/checkpoint.hpp"
#include "mnad/data.hpp"
#include "mnad/gradcheck.hpp"
#include "mnad/losses.hpp"
#include "mnad/memory.hpp"
#include "mnad/model.hpp"
#include "mnad/optim.hpp"
#include "mnad/scoring.hpp"
#include "mnad/tape.hpp"

namespace mnad::trainer {

inline constexpr const char* kTrainLogNote =
    "# compactness and separateness sum over queries and average over the batch";
inline constexpr const char* kTrainLogHeader = "step,lr,L_rec,L_compact,L_separate,L_total";

struct TaskDefaults {
    double lr0;
    double lambda_c, lambda_s, lambda, gamma;
    int64_t input_window, target_index;
    bool use_skips;
};

inline TaskDefaults task_defaults(model::Task task) {
    if (task == model::Task::prediction)
        return {2e-4, 0.1, 0.1, 0.6, 0.01, 4, 4, true};
    return {2e-5, 0.01, 0.01, 0.7, 0.015, 1, 0, false};
}

struct TrainConfig {
    model::ModelConfig model;
    int64_t epochs = 20;
    int64_t batch = 4;
    double lr0 = 2e-5;
    double lambda_c = 0.01, lambda_s = 0.01, alpha = 1.0;
    double lambda = 0.7;
    double gamma = 0.015;
    uint64_t seed = 1;
    std::string scope = "per-video";

    void validate() const {
        model.validate();
        if (epochs < 1 || batch < 1)
            throw ConfigError("epochs and batch size must be positive");
        if (!(lr0 > 0))
            throw ConfigError("learning rate must be positive");
        if (lambda < 0 || lambda > 1)
            throw ConfigError("lambda must lie in [0,1]");
        if (!(gamma > 0))
            throw ConfigError("gamma must be positive");
        if (lambda_c < 0 || lambda_s < 0)
            throw ConfigError("loss weights must be non-negative");
        if (!(alpha > 0))
            throw ConfigError("alpha must be positive");
        if (scope != "per-video" && scope != "global")
            throw ConfigError("scope must be per-video or global, got '" + scope + "'");
    }

    std::vector<std::pair<std::string, std::string>> kv() const {
        using model::detail_cfg::fmt_double;
        return {
            {"alpha", fmt_double(alpha)},
            {"batch", std::to_string(batch)},
            {"epochs", std::to_string(epochs)},
            {"gamma", fmt_double(gamma)},
            {"lambda", fmt_double(lambda)},
            {"lambda_c", fmt_double(lambda_c)},
            {"lambda_s", fmt_double(lambda_s)},
            {"lr0", fmt_double(lr0)},
            {"scope", scope},
            {"seed", std::to_string(seed)},
        };
    }

    std::string echo() const {
        auto kvs = model::to_kv(model);
        for (auto& p : kv())
            kvs.push_back(p);
        return compose_echo(std::move(kvs));
    }
};

// ---------------------------------------------------------------------------
// Shared plumbing: preprocessed clips and window assembly

template <typename T>
struct PreClip {
    const data::Clip* src = nullptr;
    std::vector<std::vector<T>> frames;   // each frame_h*frame_w, in [-1,1]
};

template <typename T>
std::vector<PreClip<T>> preprocess_clips(const std::vector<data::Clip>& clips,
                                         const model::ModelConfig& cfg) {
    if (cfg.channels_in != 1)
        throw ConfigError("the PGM pipeline is grayscale; channels_in must be 1");
    std::vector<PreClip<T>> out;
    for (const auto& clip : clips) {
        PreClip<T> pc;
        pc.src = &clip;
        for (const auto& img : clip.frames) {
            Tensor<T> t = data::preprocess<T>(img, cfg.frame_h, cfg.frame_w);
            pc.frames.push_back(t.data());
        }
        out.push_back(std::move(pc));
    }
    return out;
}

/// Copies one example (window at t0) into row `row` of the batch tensors.
template <typename T>
void fill_example(Tensor<T>& x, Tensor<T>& y, int64_t row, const PreClip<T>& clip, int64_t t0,
                  const model::ModelConfig& cfg) {
    const int64_t px = cfg.frame_h * cfg.frame_w;
    T* xp = x.mutable_ptr() + row * cfg.input_window * px;
    for (int64_t f = 0; f < cfg.input_window; ++f)
        std::memcpy(xp + f * px, clip.frames[static_cast<size_t>(t0 + f)].data(),
                    static_cast<size_t>(px) * sizeof(T));
    T* yp = y.mutable_ptr() + row * px;
    std::memcpy(yp, clip.frames[static_cast<size_t>(t0 + cfg.target_index)].data(),
                static_cast<size_t>(px) * sizeof(T));
}

// ---------------------------------------------------------------------------
// Training

struct TrainOutcome {
    std::string checkpoint_path;
    int64_t steps = 0;
    double first_epoch_rec = 0;
    double last_epoch_rec = 0;
};

template <typename T>
TrainOutcome train(const std::vector<data::Clip>& clips, const TrainConfig& cfg,
                   const std::string& out_dir, std::ostream* echo_log = nullptr) {
    cfg.validate();
    if (clips.empty())
        throw DataError("no training clips");
    for (const auto& clip : clips)
        for (int l : clip.labels)
            if (l != 0)
                throw DataError("training clip '" + clip.id + "' contains abnormal frames");

    const model::ModelConfig& mc = cfg.model;
    auto pre = preprocess_clips<T>(clips, mc);
    std::vector<std::pair<int64_t, int64_t>> examples;   // (clip, t0), stride 1
    const int64_t fpe = mc.frames_per_example();
    for (size_t ci = 0; ci < pre.size(); ++ci) {
        const int64_t len = static_cast<int64_t>(pre[ci].frames.size());
        for (int64_t t0 = 0; t0 + fpe <= len; ++t0)
            examples.emplace_back(static_cast<int64_t>(ci), t0);
    }
    if (examples.empty())
        throw DataError("no training windows: clips are shorter than " + std::to_string(fpe) +
                        " frames");

    SplitMix64 init_rng(SplitMix64::mix(cfg.seed, 17));
    SplitMix64 shuffle_rng(SplitMix64::mix(cfg.seed, 23));
    model::Model<T> mdl(mc, init_rng);
    std::vector<Tensor<T>> params = mdl.params();
    AdamState<T> opt;
    const std::string echo = cfg.echo();

    std::filesystem::create_directories(out_dir);
    const std::string ckpt_path = (std::filesystem::path(out_dir) / "checkpoint.bin").string();
    std::ofstream log(std::filesystem::path(out_dir) / "train_log.csv");
    if (!log)
        throw IoError("cannot write training log under " + out_dir);
    log << kTrainLogNote << '\n' << kTrainLogHeader << '\n';

    const int64_t n = static_cast<int64_t>(examples.size());
    const int64_t batches_per_epoch = (n + cfg.batch - 1) / cfg.batch;
    const int64_t total_steps = cfg.epochs * batches_per_epoch;
    const losses::LossWeights<T> weights{static_cast<T>(cfg.lambda_c),
                                         static_cast<T>(cfg.lambda_s),
                                         static_cast<T>(cfg.alpha)};

    TrainOutcome outcome;
    std::vector<int64_t> order(examples.size());
    for (size_t i = 0; i < order.size(); ++i)
        order[i] = static_cast<int64_t>(i);

    int64_t step = 0;
    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (int64_t i = n - 1; i > 0; --i) {
            const int64_t j =
                static_cast<int64_t>(shuffle_rng.next_below(static_cast<uint64_t>(i) + 1));
            std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
        }
        double epoch_rec = 0;
        for (int64_t b = 0; b < batches_per_epoch; ++b) {
            const int64_t lo = b * cfg.batch;
            const int64_t bsz = std::min(cfg.batch, n - lo);
            Tensor<T> x(Shape{bsz, mc.encoder_in_channels(), mc.frame_h, mc.frame_w});
            Tensor<T> y(Shape{bsz, mc.channels_in, mc.frame_h, mc.frame_w});
            for (int64_t r = 0; r < bsz; ++r) {
                const auto& [ci, t0] = examples[static_cast<size_t>(order[static_cast<size_t>(lo + r)])];
                fill_example(x, y, r, pre[static_cast<size_t>(ci)], t0, mc);
            }

            Tape<T> tape;
            model::ForwardResult<T> fwd;
            T l_rec, l_comp, l_sep, l_total;
            {
                TapeScope<T> scope(tape);
                fwd = mdl.forward(x, true, true);
                Tensor<T> rec = losses::reconstruction_loss(fwd.output, y);
                Tensor<T> comp(Shape{}, T(0)), sep(Shape{}, T(0));
                if (mc.memory_enabled) {
                    const memory::Assignment asg = memory::assign(fwd.queries_kc, mdl.bank());
                    comp = losses::compactness_loss(fwd.queries_kc, mdl.bank(), asg.nearest,
                                                    bsz);
                    sep = losses::separateness_loss(fwd.queries_kc, mdl.bank(), asg.nearest,
                                                    asg.second, static_cast<T>(cfg.alpha), bsz);
                }
                Tensor<T> total = losses::total_loss(rec, comp, sep, weights);
                l_rec = rec.item();
                l_comp = comp.item();
                l_sep = sep.item();
                l_total = total.item();
                if (!std::isfinite(static_cast<double>(l_total)))
                    throw NumericError("non-finite loss at step " + std::to_string(step + 1));
                tape.backward(Tensor<T>(Shape{}, T(1)));
            }
            const double lr = cosine_lr<double>(cfg.lr0, step, total_steps);
            adam_step(params, opt, static_cast<T>(lr));
            for (auto& p : params)
                p.clear_grad();
            if (mc.items_trainable)
                memory::renormalize_items(mdl.bank());
            if (mc.memory_enabled)
                memory::update(mdl.bank(), fwd.queries_kc);

            ++step;
            log << step << ',' << scoring::detail_fmt::num(lr) << ','
                << scoring::detail_fmt::num(l_rec) << ',' << scoring::detail_fmt::num(l_comp)
                << ',' << scoring::detail_fmt::num(l_sep) << ','
                << scoring::detail_fmt::num(l_total) << '\n';
            epoch_rec += static_cast<double>(l_rec);
        }
        log.flush();
        epoch_rec /= static_cast<double>(batches_per_epoch);
        if (epoch == 0)
            outcome.first_epoch_rec = epoch_rec;
        outcome.last_epoch_rec = epoch_rec;
        save_checkpoint(ckpt_path, snapshot(mdl, echo, &opt, shuffle_rng.state()));
        if (echo_log)
            *echo_log << "epoch " << (epoch + 1) << "/" << cfg.epochs
                      << " mean L_rec=" << epoch_rec << "\n";
    }
    outcome.checkpoint_path = ckpt_path;
    outcome.steps = step;
    return outcome;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalConfig {
    double lambda = 0.7;
    double gamma = 0.015;
    bool gate_on = true;          // false reproduces the no-gate ablation
    std::string scope = "per-video";
    bool per_video_bank = false;  // clone the trained bank per video

    void validate() const {
        if (lambda < 0 || lambda > 1)
            throw ConfigError("lambda must lie in [0,1]");
        if (!(gamma > 0))
            throw ConfigError("gamma must be positive");
        if (scope != "per-video" && scope != "global")
            throw ConfigError("scope must be per-video or global, got '" + scope + "'");
    }
};

template <typename T>
struct EvalOutcome {
    std::vector<scoring::TraceRow<T>> rows;
    double auc = 0;
    int64_t frames = 0;
    int64_t gate_skips = 0;
    Tensor<T> final_items;                      // bank state after the run
    std::vector<std::vector<T>> sample_queries; // first scored window per video
};

namespace detail_eval {

/// Swaps a working bank into the model for the duration of a scope.
template <typename T>
struct BankGuard {
    model::Model<T>& mdl;
    memory::MemoryBank<T> saved;
    BankGuard(model::Model<T>& m, Tensor<T> working_items) : mdl(m), saved(m.bank()) {
        mdl.bank().items = std::move(working_items);
    }
    ~BankGuard() { mdl.bank() = saved; }
};

} // namespace detail_eval

/// Scores every window of every clip in id order; the bank starts from the
/// trained state and evolves under the gated update as frames stream by. The
/// model's own bank is restored afterwards.
template <typename T>
EvalOutcome<T> evaluate(model::Model<T>& mdl, const std::vector<data::Clip>& clips,
                        const EvalConfig& ecfg) {
    ecfg.validate();
    if (clips.empty())
        throw DataError("no clips to evaluate");
    const model::ModelConfig& mc = mdl.config();
    auto pre = preprocess_clips<T>(clips, mc);
    std::sort(pre.begin(), pre.end(),
              [](const PreClip<T>& a, const PreClip<T>& b) { return a.src->id < b.src->id; });

    EvalOutcome<T> out;
    detail_eval::BankGuard<T> guard(mdl, mdl.bank().items.clone());
    const Tensor<T> trained_items = guard.saved.items;
    const int64_t fpe = mc.frames_per_example();

    std::vector<T> all_psnr, all_dist;
    std::vector<size_t> video_begin;   // row index where each video starts

    for (const auto& clip : pre) {
        if (ecfg.per_video_bank)
            mdl.bank().items.raw() = trained_items.data();
        video_begin.push_back(out.rows.size());
        const int64_t len = static_cast<int64_t>(clip.frames.size());
        bool first_window = true;
        for (int64_t t0 = 0; t0 + fpe <= len; ++t0) {
            Tensor<T> x(Shape{1, mc.encoder_in_channels(), mc.frame_h, mc.frame_w});
            Tensor<T> y(Shape{1, mc.channels_in, mc.frame_h, mc.frame_w});
            fill_example(x, y, 0, clip, t0, mc);

            NoTapeScope<T> silent;
            model::ForwardResult<T> fwd = mdl.forward(x, false, false);
            const Tensor<T> out01 = scoring::remap01(fwd.output);
            const Tensor<T> tgt01 = scoring::remap01(y);
            const T p = scoring::psnr(out01, tgt01);
            const T d = mc.memory_enabled
                            ? scoring::distance_score(fwd.queries_kc, mdl.bank())
                            : T(0);
            const T e = memory::regular_score(
                reshape(out01, Shape{mc.channels_in, mc.frame_h, mc.frame_w}),
                reshape(tgt01, Shape{mc.channels_in, mc.frame_h, mc.frame_w}));
            const bool pass = ecfg.gate_on ? e <= static_cast<T>(ecfg.gamma) : true;
            if (mc.memory_enabled && pass)
                memory::update(mdl.bank(), fwd.queries_kc);
            if (!pass)
                ++out.gate_skips;

            if (first_window) {
                const T* q = fwd.queries_kc.ptr();
                const int64_t c = fwd.queries_kc.dim(1);
                for (int64_t k = 0; k < fwd.queries_kc.dim(0); ++k)
                    out.sample_queries.emplace_back(q + k * c, q + (k + 1) * c);
                first_window = false;
            }

            scoring::TraceRow<T> row;
            row.video_id = clip.src->id;
            row.frame_index = t0 + mc.target_index;
            row.psnr_db = p;
            row.dist = d;
            row.label = clip.src->labels[static_cast<size_t>(t0 + mc.target_index)];
            row.gate_flag = pass ? 1 : 0;
            out.rows.push_back(std::move(row));
            all_psnr.push_back(p);
            all_dist.push_back(d);
        }
    }
    if (out.rows.empty())
        throw DataError("no scorable windows: clips are shorter than " + std::to_string(fpe) +
                        " frames");
    video_begin.push_back(out.rows.size());

    auto apply_scope = [&](size_t lo, size_t hi) {
        const std::vector<T> p_seq(all_psnr.begin() + static_cast<std::ptrdiff_t>(lo),
                                   all_psnr.begin() + static_cast<std::ptrdiff_t>(hi));
        const std::vector<T> d_seq(all_dist.begin() + static_cast<std::ptrdiff_t>(lo),
                                   all_dist.begin() + static_cast<std::ptrdiff_t>(hi));
        const std::vector<T> g_p = scoring::minmax_normalize(p_seq);
        const std::vector<T> g_d = scoring::minmax_normalize(d_seq);
        const std::vector<T> s =
            scoring::abnormality_score(p_seq, d_seq, static_cast<T>(ecfg.lambda));
        for (size_t i = lo; i < hi; ++i) {
            out.rows[i].g_psnr = g_p[i - lo];
            out.rows[i].g_dist = g_d[i - lo];
            out.rows[i].score = s[i - lo];
        }
    };
    if (ecfg.scope == "per-video") {
        for (size_t v = 0; v + 1 < video_begin.size(); ++v)
            if (video_begin[v] < video_begin[v + 1])
                apply_scope(video_begin[v], video_begin[v + 1]);
    } else {
        apply_scope(0, out.rows.size());
    }

    std::vector<T> scores;
    std::vector<int> labels;
    for (const auto& row : out.rows) {
        scores.push_back(row.score);
        labels.push_back(row.label);
    }
    out.auc = scoring::roc_auc(scores, labels);
    out.frames = static_cast<int64_t>(out.rows.size());
    out.final_items = mdl.bank().items.clone();
    return out;
}

// ---------------------------------------------------------------------------
// Streaming per-frame scoring

template <typename T>
struct ScoreOutcome {
    int64_t frames = 0;
    double fps = 0;
};

/// Emits one trace row per window as it is processed, normalizing with the
/// running min/max seen so far. The per-frame timer feeds the fps figure.
template <typename T>
ScoreOutcome<T> score_stream(model::Model<T>& mdl, const data::Clip& clip,
                             const EvalConfig& ecfg, std::ostream& rows_out) {
    ecfg.validate();
    const model::ModelConfig& mc = mdl.config();
    std::vector<data::Clip> one = {clip};
    auto pre = preprocess_clips<T>(one, mc);
    const PreClip<T>& pc = pre[0];
    const int64_t fpe = mc.frames_per_example();
    const int64_t len = static_cast<int64_t>(pc.frames.size());
    if (len < fpe)
        throw DataError("clip '" + clip.id + "' has " + std::to_string(len) +
                        " frames; need at least " + std::to_string(fpe));

    detail_eval::BankGuard<T> guard(mdl, mdl.bank().items.clone());
    rows_out << "# normalization=streaming-running-minmax\n"
             << scoring::kTraceHeader << '\n';

    scoring::RunningMinMax<T> rm_p, rm_d;
    ScoreOutcome<T> out;
    const auto start = std::chrono::steady_clock::now();
    for (int64_t t0 = 0; t0 + fpe <= len; ++t0) {
        Tensor<T> x(Shape{1, mc.encoder_in_channels(), mc.frame_h, mc.frame_w});
        Tensor<T> y(Shape{1, mc.channels_in, mc.frame_h, mc.frame_w});
        fill_example(x, y, 0, pc, t0, mc);
        NoTapeScope<T> silent;
        model::ForwardResult<T> fwd = mdl.forward(x, false, false);
        const Tensor<T> out01 = scoring::remap01(fwd.output);
        const Tensor<T> tgt01 = scoring::remap01(y);
        const T p = scoring::psnr(out01, tgt01);
        const T d =
            mc.memory_enabled ? scoring::distance_score(fwd.queries_kc, mdl.bank()) : T(0);
        const T e = memory::regular_score(
            reshape(out01, Shape{mc.channels_in, mc.frame_h, mc.frame_w}),
            reshape(tgt01, Shape{mc.channels_in, mc.frame_h, mc.frame_w}));
        const bool pass = ecfg.gate_on ? e <= static_cast<T>(ecfg.gamma) : true;
        if (mc.memory_enabled && pass)
            memory::update(mdl.bank(), fwd.queries_kc);

        scoring::TraceRow<T> row;
        row.video_id = clip.id;
        row.frame_index = t0 + mc.target_index;
        row.psnr_db = p;
        row.dist = d;
        row.g_psnr = rm_p.normalize(p);
        row.g_dist = rm_d.normalize(d);
        const T inv_p = rm_p.hi == rm_p.lo ? T(0) : T(1) - row.g_psnr;
        row.score = static_cast<T>(ecfg.lambda) * inv_p +
                    (T(1) - static_cast<T>(ecfg.lambda)) * row.g_dist;
        row.label = clip.labels[static_cast<size_t>(t0 + mc.target_index)];
        row.gate_flag = pass ? 1 : 0;
        scoring::write_trace_row(rows_out, row);
        rows_out.flush();
        ++out.frames;
    }
    const auto elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start);
    out.fps = elapsed.count() > 0 ? static_cast<double>(out.frames) / elapsed.count() : 0.0;
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoint-driven construction

/// Builds a model from a checkpoint's config echo and restores its tensors.
template <typename T>
struct LoadedModel {
    model::ModelConfig config;
    std::map<std::string, std::string> echo_kv;
    model::Model<T> mdl;
    CheckpointRaw<T> raw;
};

template <typename T>
LoadedModel<T> load_model(const std::string& path) {
    CheckpointRaw<T> raw = load_checkpoint<T>(path);
    auto kv = parse_echo(raw.config_echo);
    model::ModelConfig cfg = model::from_kv(kv);
    SplitMix64 scratch_rng(0);
    LoadedModel<T> lm{cfg, std::move(kv), model::Model<T>(cfg, scratch_rng), std::move(raw)};
    restore_model(lm.raw, lm.mdl);
    return lm;
}

} // namespace mnad::trainer
