#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mnad/trainer.hpp"

namespace fs = std::filesystem;
using namespace mnad;

namespace {

constexpr const char* kVersion = "mnad 0.1.0";

uint64_t parse_seed_env(const char* text) {
    try {
        size_t pos = 0;
        const unsigned long long v = std::stoull(text, &pos);
        if (pos != std::string(text).size())
            throw std::invalid_argument("trailing characters");
        return static_cast<uint64_t>(v);
    } catch (const std::exception&) {
        throw ConfigError(std::string("MNAD_SEED must be an unsigned integer, got '") + text +
                          "'");
    }
}

/// MNAD_SEED overrides config-file seeds but not an explicit --seed flag.
void apply_seed_env(uint64_t& seed, bool seed_on_cmdline) {
    const char* env = std::getenv("MNAD_SEED");
    if (env && !seed_on_cmdline)
        seed = parse_seed_env(env);
}

bool flag_on_cmdline(int argc, char** argv, const std::string& name) {
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == name || a.rfind(name + "=", 0) == 0)
            return true;
    }
    return false;
}

void require_empty_or_force(const fs::path& dir, bool force) {
    if (fs::exists(dir) && !fs::is_directory(dir))
        throw IoError(dir.string() + " exists and is not a directory");
    if (fs::is_directory(dir) && !fs::is_empty(dir) && !force)
        throw IoError("output directory " + dir.string() +
                      " is not empty; pass --force to write into it");
}

std::ofstream open_out(const fs::path& p) {
    std::ofstream os(p);
    if (!os)
        throw IoError("cannot write " + p.string());
    return os;
}

void write_matrix_csv(const fs::path& p, const Tensor<float>& t, int64_t max_rows) {
    std::ofstream os = open_out(p);
    const int64_t rows = std::min(t.dim(0), max_rows);
    const int64_t cols = t.dim(1);
    const float* d = t.ptr();
    for (int64_t r = 0; r < rows; ++r) {
        for (int64_t c = 0; c < cols; ++c)
            os << (c ? "," : "") << scoring::detail_fmt::num(d[r * cols + c]);
        os << '\n';
    }
}

// -------------------------------------------------------------------------
// gendata

struct GendataArgs {
    std::string out;
    std::string split = "both";
    uint64_t seed = 1;
    int64_t clips = 8;
    int64_t len = 64;
    int64_t canvas = 64;
    int64_t objects = 1;
    double noise_sigma = 3.0;
    double anomaly_min_frac = 0.15;
    double anomaly_max_frac = 0.7;
    std::vector<std::string> anomalies;
    bool force = false;
};

int run_gendata(const GendataArgs& a) {
    if (a.split != "both" && a.split != "train" && a.split != "test")
        throw ConfigError("--split must be both, train or test, got '" + a.split + "'");
    data::SynthSpec spec;
    spec.canvas = a.canvas;
    spec.objects = a.objects;
    spec.noise_sigma = a.noise_sigma;
    spec.anomaly_min_frac = a.anomaly_min_frac;
    spec.anomaly_max_frac = a.anomaly_max_frac;
    spec.seed = a.seed;
    for (const auto& s : a.anomalies)
        spec.anomalies.push_back(data::parse_anomaly(s));
    if (spec.anomalies.empty() && (a.split == "both" || a.split == "test"))
        spec.anomalies = {data::AnomalyKind::vertical, data::AnomalyKind::speed};

    const fs::path root = a.out;
    require_empty_or_force(root, a.force);
    int64_t frames = 0;
    if (a.split == "both" || a.split == "train") {
        data::SynthSpec train_spec = spec;
        train_spec.anomalies.clear();
        if (a.split == "train" && !a.anomalies.empty())
            throw ConfigError("--anomalies is not valid for a train split");
        auto clips = data::gen_synthetic(train_spec, a.clips, a.len, true);
        data::write_split(root, "train", clips);
        for (const auto& c : clips)
            frames += static_cast<int64_t>(c.frames.size());
    }
    if (a.split == "both" || a.split == "test") {
        auto clips = data::gen_synthetic(spec, a.clips, a.len, false);
        data::write_split(root, "test", clips);
        for (const auto& c : clips)
            frames += static_cast<int64_t>(c.frames.size());
    }
    std::cout << "wrote " << frames << " frames under " << root.string() << "\n";
    return 0;
}

// -------------------------------------------------------------------------
// train

struct TrainArgs {
    std::string data;
    std::string out;
    std::string task = "reconstruction";
    trainer::TrainConfig cfg;
    bool no_memory = false;
};

int run_train(CLI::App* cmd, TrainArgs& a) {
    trainer::TrainConfig& cfg = a.cfg;
    model::ModelConfig preset;
    model::Task task;
    if (a.task == "motion-cue") {
        preset = model::desk_motion_cue();
        task = model::Task::reconstruction;
    } else {
        task = model::parse_task(a.task);
        preset = task == model::Task::prediction ? model::desk_prediction()
                                                 : model::desk_reconstruction();
    }
    const trainer::TaskDefaults td = trainer::task_defaults(task);

    auto unset = [&](const std::string& name) { return cmd->get_option(name)->count() == 0; };
    if (unset("--window"))
        cfg.model.input_window = preset.input_window;
    if (unset("--target-index"))
        cfg.model.target_index = task == model::Task::prediction ? cfg.model.input_window
                                                                 : preset.target_index;
    if (!cmd->get_option("--skips")->count() && !cmd->get_option("--no-skips")->count())
        cfg.model.use_skips = preset.use_skips;
    if (unset("--lr"))
        cfg.lr0 = td.lr0;
    if (unset("--lambda-c"))
        cfg.lambda_c = td.lambda_c;
    if (unset("--lambda-s"))
        cfg.lambda_s = td.lambda_s;
    if (unset("--lambda"))
        cfg.lambda = td.lambda;
    if (unset("--gamma"))
        cfg.gamma = td.gamma;
    cfg.model.task = task;
    cfg.model.memory_enabled = !a.no_memory;

    auto clips = data::load_split(a.data, "train");
    const auto out = trainer::train<float>(clips, cfg, a.out, &std::cout);
    std::cout << "steps=" << out.steps << "\n"
              << "checkpoint=" << out.checkpoint_path << "\n";
    return 0;
}

// -------------------------------------------------------------------------
// eval / score shared

trainer::EvalConfig eval_defaults_from(const std::map<std::string, std::string>& kv,
                                       model::Task task) {
    const trainer::TaskDefaults td = trainer::task_defaults(task);
    trainer::EvalConfig e;
    e.lambda = kv.count("lambda") ? std::stod(kv.at("lambda")) : td.lambda;
    e.gamma = kv.count("gamma") ? std::stod(kv.at("gamma")) : td.gamma;
    e.scope = kv.count("scope") ? kv.at("scope") : "per-video";
    return e;
}

struct EvalArgs {
    std::string checkpoint;
    std::string data;
    std::string split = "test";
    std::string out;
    double lambda = -1;            // <0 means "use checkpoint value"
    double gamma = -1;
    std::string scope;
    bool gate_off = false;
    bool per_video_bank = false;
    bool persist_memory = false;
    int64_t max_query_rows = 1024;
};

int run_eval(const EvalArgs& a) {
    auto lm = trainer::load_model<float>(a.checkpoint);
    trainer::EvalConfig ecfg = eval_defaults_from(lm.echo_kv, lm.config.task);
    if (a.lambda >= 0)
        ecfg.lambda = a.lambda;
    if (a.gamma >= 0)
        ecfg.gamma = a.gamma;
    if (!a.scope.empty())
        ecfg.scope = a.scope;
    ecfg.gate_on = !a.gate_off;
    ecfg.per_video_bank = a.per_video_bank;

    auto clips = data::load_split(a.data, a.split);
    const auto ev = trainer::evaluate(lm.mdl, clips, ecfg);

    const fs::path out = a.out;
    fs::create_directories(out);
    {
        std::ofstream os = open_out(out / "trace.csv");
        scoring::write_trace_csv(os, ev.rows);
    }
    write_matrix_csv(out / "memory_bank.csv", ev.final_items, ev.final_items.dim(0));
    {
        std::ofstream os = open_out(out / "queries.csv");
        int64_t written = 0;
        for (const auto& q : ev.sample_queries) {
            if (written >= a.max_query_rows)
                break;
            for (size_t c = 0; c < q.size(); ++c)
                os << (c ? "," : "") << scoring::detail_fmt::num(q[c]);
            os << '\n';
            ++written;
        }
    }
    {
        std::ofstream os = open_out(out / "metrics.txt");
        os << "auc=" << scoring::detail_fmt::num(ev.auc) << "\n"
           << "frames=" << ev.frames << "\n"
           << "gate_skips=" << ev.gate_skips << "\n";
    }
    if (a.persist_memory) {
        for (auto& blob : lm.raw.tensors)
            if (blob.name == "memory.items")
                blob.data = ev.final_items.data();
        save_checkpoint((out / "checkpoint_updated.bin").string(), lm.raw);
    }
    std::cout << "frames=" << ev.frames << "\n"
              << "gate_skips=" << ev.gate_skips << "\n";
    std::printf("AUC=%.6f\n", ev.auc);
    return 0;
}

struct ScoreArgs {
    std::string checkpoint;
    std::string frames;
    std::string out;
    double lambda = -1;
    double gamma = -1;
    bool gate_off = false;
};

int run_score(const ScoreArgs& a) {
    auto lm = trainer::load_model<float>(a.checkpoint);
    trainer::EvalConfig ecfg = eval_defaults_from(lm.echo_kv, lm.config.task);
    if (a.lambda >= 0)
        ecfg.lambda = a.lambda;
    if (a.gamma >= 0)
        ecfg.gamma = a.gamma;
    ecfg.gate_on = !a.gate_off;

    const fs::path dir = a.frames;
    const data::Clip clip = data::load_frame_dir(dir, dir.filename().string());
    fs::create_directories(a.out);
    std::ofstream os = open_out(fs::path(a.out) / "scores.csv");
    const auto sc = trainer::score_stream(lm.mdl, clip, ecfg, os);
    std::cout << "frames=" << sc.frames << "\n";
    std::printf("fps=%.1f\n", sc.fps);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"memory-guided normality anomaly detection for video frame streams", "mnad"};
    app.set_version_flag("--version", kVersion);
    app.set_config("--config", "", "Read options from an INI file (sections per subcommand)");
    app.allow_config_extras(false);
    app.require_subcommand(1);

    GendataArgs g;
    CLI::App* cg = app.add_subcommand("gendata", "Generate a synthetic desk-scale dataset");
    cg->fallthrough();
    cg->add_option("--out", g.out, "Output dataset root")->required();
    cg->add_option("--split", g.split, "Which split to write: both, train or test")
        ->capture_default_str();
    cg->add_option("--seed", g.seed, "Generator seed (MNAD_SEED overrides)")
        ->capture_default_str();
    cg->add_option("--clips", g.clips, "Clips per split")->capture_default_str();
    cg->add_option("--len", g.len, "Frames per clip")->capture_default_str();
    cg->add_option("--canvas", g.canvas, "Square frame size in pixels")->capture_default_str();
    cg->add_option("--objects", g.objects, "Moving sprites per clip")->capture_default_str();
    cg->add_option("--noise-sigma", g.noise_sigma, "Gaussian pixel noise sigma")
        ->capture_default_str();
    cg->add_option("--anomaly-min-frac", g.anomaly_min_frac,
                   "Anomaly window fraction in the first test clip")
        ->capture_default_str();
    cg->add_option("--anomaly-max-frac", g.anomaly_max_frac,
                   "Anomaly window fraction in the last test clip")
        ->capture_default_str();
    cg->add_option("--anomalies", g.anomalies,
                   "Test-split anomaly kinds (vertical, speed, shape)")
        ->delimiter(',');
    cg->add_flag("--force", g.force, "Write into a non-empty output directory");

    TrainArgs t;
    CLI::App* ct = app.add_subcommand("train", "Train a model and write checkpoint + log");
    ct->fallthrough();
    ct->add_option("--data", t.data, "Dataset root containing train/")->required();
    ct->add_option("--out", t.out, "Output directory for checkpoint.bin and train_log.csv")
        ->required();
    ct->add_option("--task", t.task, "reconstruction, prediction or motion-cue")
        ->capture_default_str();
    ct->add_option("--epochs", t.cfg.epochs, "Training epochs")->capture_default_str();
    ct->add_option("--batch", t.cfg.batch, "Batch size")->capture_default_str();
    ct->add_option("--lr", t.cfg.lr0, "Initial learning rate (cosine-annealed to 0)");
    ct->add_option("--lambda-c", t.cfg.lambda_c, "Compactness loss weight");
    ct->add_option("--lambda-s", t.cfg.lambda_s, "Separateness loss weight");
    ct->add_option("--alpha", t.cfg.alpha, "Separateness margin")->capture_default_str();
    ct->add_option("--lambda", t.cfg.lambda, "Score fusion weight stored for evaluation");
    ct->add_option("--gamma", t.cfg.gamma, "Update gate threshold stored for evaluation");
    ct->add_option("--seed", t.cfg.seed, "Training seed (MNAD_SEED overrides)")
        ->capture_default_str();
    ct->add_option("--scope", t.cfg.scope,
                   "Score normalization scope stored for evaluation: per-video or global")
        ->capture_default_str();
    ct->add_option("--mem-items", t.cfg.model.mem_items, "Memory items")
        ->capture_default_str();
    ct->add_option("--frame-size", t.cfg.model.frame_h, "Square input size (multiple of 8)")
        ->capture_default_str();
    ct->add_option("--width-scale", t.cfg.model.width_scale, "Channel width multiplier")
        ->capture_default_str();
    ct->add_option("--window", t.cfg.model.input_window, "Input frames per example");
    ct->add_option("--target-index", t.cfg.model.target_index,
                   "Frame the output is compared against");
    ct->add_flag("--skips", "Enable encoder-decoder skip connections");
    ct->add_flag("--no-skips", "Disable encoder-decoder skip connections");
    ct->add_flag("--no-memory", t.no_memory, "Train the memory-bypass baseline");
    ct->add_flag("--items-trainable", t.cfg.model.items_trainable,
                 "Update items by gradient as well");

    EvalArgs e;
    CLI::App* ce = app.add_subcommand("eval", "Score a labeled split and report AUC");
    ce->fallthrough();
    ce->add_option("--checkpoint", e.checkpoint, "Trained checkpoint path")->required();
    ce->add_option("--data", e.data, "Dataset root")->required();
    ce->add_option("--split", e.split, "Split to score")->capture_default_str();
    ce->add_option("--out", e.out, "Output directory for trace.csv, memory_bank.csv, "
                                   "queries.csv, metrics.txt")
        ->required();
    ce->add_option("--lambda", e.lambda, "Score fusion weight (default: checkpoint value)");
    ce->add_option("--gamma", e.gamma, "Update gate threshold (default: checkpoint value)");
    ce->add_option("--scope", e.scope,
                   "Normalization scope: per-video or global (default: checkpoint value)");
    ce->add_flag("--gate-off", e.gate_off, "Disable the update gate (update on every frame)");
    ce->add_flag("--per-video-bank", e.per_video_bank,
                 "Reset the bank to the trained state at each video start");
    ce->add_flag("--persist-memory", e.persist_memory,
                 "Write the evolved bank to checkpoint_updated.bin");
    ce->add_option("--max-query-rows", e.max_query_rows, "Row cap for queries.csv")
        ->capture_default_str();

    ScoreArgs s;
    CLI::App* cs = app.add_subcommand("score", "Stream per-frame scores for one video");
    cs->fallthrough();
    cs->add_option("--checkpoint", s.checkpoint, "Trained checkpoint path")->required();
    cs->add_option("--frames", s.frames, "Directory of frame_NNNNNN.pgm files")->required();
    cs->add_option("--out", s.out, "Output directory for scores.csv")->required();
    cs->add_option("--lambda", s.lambda, "Score fusion weight (default: checkpoint value)");
    cs->add_option("--gamma", s.gamma, "Update gate threshold (default: checkpoint value)");
    cs->add_flag("--gate-off", s.gate_off, "Disable the update gate");

    try {
        app.parse(argc, argv);
        const bool seed_cli = flag_on_cmdline(argc, argv, "--seed");
        if (cg->parsed()) {
            apply_seed_env(g.seed, seed_cli);
            return run_gendata(g);
        }
        if (ct->parsed()) {
            apply_seed_env(t.cfg.seed, seed_cli);
            if (ct->get_option("--skips")->count())
                t.cfg.model.use_skips = true;
            if (ct->get_option("--no-skips")->count())
                t.cfg.model.use_skips = false;
            if (ct->get_option("--frame-size")->count())
                t.cfg.model.frame_w = t.cfg.model.frame_h;
            return run_train(ct, t);
        }
        if (ce->parsed())
            return run_eval(e);
        if (cs->parsed())
            return run_score(s);
        return 2;
    } catch (const CLI::ParseError& ex) {
        return app.exit(ex) == 0 ? 0 : 2;
    } catch (const ConfigError& ex) {
        std::cerr << "config error: " << ex.what() << "\n";
        return 2;
    } catch (const ShapeError& ex) {
        std::cerr << "config error: " << ex.what() << "\n";
        return 2;
    } catch (const DataError& ex) {
        std::cerr << "data error: " << ex.what() << "\n";
        return 3;
    } catch (const IoError& ex) {
        std::cerr << "data error: " << ex.what() << "\n";
        return 3;
    } catch (const NumericError& ex) {
        std::cerr << "numerical abort: " << ex.what() << "\n";
        return 4;
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return 1;
    }
}
