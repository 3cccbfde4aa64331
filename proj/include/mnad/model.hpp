#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mnad/conv.hpp"
#include "mnad/memory.hpp"
#include "mnad/ops.hpp"
#include "mnad/rng.hpp"

namespace mnad::model {

enum class Task { reconstruction, prediction };

inline std::string task_name(Task t) {
    return t == Task::reconstruction ? "reconstruction" : "prediction";
}

inline Task parse_task(const std::string& s) {
    if (s == "reconstruction")
        return Task::reconstruction;
    if (s == "prediction")
        return Task::prediction;
    throw ConfigError("unknown task '" + s + "' (reconstruction, prediction)");
}

/// Architecture description. The encoder has three stride-2 stages; widths
/// are the per-stage channel counts before width_scale is applied, and the
/// query dimension C is the scaled width of the last stage.
struct ModelConfig {
    Task task = Task::reconstruction;
    int64_t input_window = 1;    // frames fed to the encoder, channel-stacked
    int64_t target_index = 0;    // reconstruction-style: position inside the
                                 // window; prediction: == input_window (next)
    int64_t frame_h = 64;
    int64_t frame_w = 64;
    int64_t channels_in = 1;
    std::vector<int64_t> stage_widths = {64, 128, 256};
    double width_scale = 1.0;
    bool use_skips = false;
    int64_t mem_items = 10;
    bool memory_enabled = true;
    bool items_trainable = false;

    std::vector<int64_t> scaled_widths() const {
        std::vector<int64_t> w;
        for (int64_t v : stage_widths)
            w.push_back(std::max<int64_t>(
                1, static_cast<int64_t>(std::llround(static_cast<double>(v) * width_scale))));
        return w;
    }
    int64_t query_channels() const { return scaled_widths().back(); }
    int64_t encoder_in_channels() const { return input_window * channels_in; }
    int64_t query_h() const { return frame_h / 8; }
    int64_t query_w() const { return frame_w / 8; }
    /// Clip frames consumed per example (window plus the predicted frame).
    int64_t frames_per_example() const {
        return input_window + (task == Task::prediction ? 1 : 0);
    }

    void validate() const {
        if (frame_h < 8 || frame_w < 8 || frame_h % 8 != 0 || frame_w % 8 != 0)
            throw ConfigError("frame size must be a positive multiple of 8, got " +
                              std::to_string(frame_h) + "x" + std::to_string(frame_w));
        if (channels_in < 1)
            throw ConfigError("channels_in must be positive");
        if (stage_widths.size() != 3)
            throw ConfigError("exactly 3 stage widths required, got " +
                              std::to_string(stage_widths.size()));
        if (!(width_scale > 0))
            throw ConfigError("width_scale must be positive");
        if (input_window < 1)
            throw ConfigError("input_window must be at least 1");
        if (task == Task::prediction) {
            if (target_index != input_window)
                throw ConfigError("prediction target_index must equal input_window (" +
                                  std::to_string(input_window) + "), got " +
                                  std::to_string(target_index));
        } else if (target_index < 0 || target_index >= input_window) {
            throw ConfigError("reconstruction target_index must lie in [0, input_window), got " +
                              std::to_string(target_index));
        }
        if (mem_items < 2)
            throw ConfigError("mem_items must be at least 2");
    }
};

inline ModelConfig desk_reconstruction() {
    ModelConfig cfg;
    cfg.task = Task::reconstruction;
    cfg.input_window = 1;
    cfg.target_index = 0;
    cfg.use_skips = false;
    return cfg;
}

inline ModelConfig desk_prediction() {
    ModelConfig cfg;
    cfg.task = Task::prediction;
    cfg.input_window = 4;
    cfg.target_index = 4;
    cfg.use_skips = true;
    return cfg;
}

/// Sixteen-frame window reconstructing the ninth frame: reconstruction that
/// must also respect motion.
inline ModelConfig desk_motion_cue() {
    ModelConfig cfg = desk_reconstruction();
    cfg.input_window = 16;
    cfg.target_index = 8;
    return cfg;
}

/// 256x256 configuration with a 32x32x512 query map.
inline ModelConfig full_scale(Task task) {
    ModelConfig cfg = task == Task::prediction ? desk_prediction() : desk_reconstruction();
    cfg.frame_h = cfg.frame_w = 256;
    cfg.stage_widths = {128, 256, 512};
    return cfg;
}

// ---------------------------------------------------------------------------
// Config echo serialization (canonical key=value lines)

namespace detail_cfg {

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string fmt_widths(const std::vector<int64_t>& w) {
    std::string s;
    for (size_t i = 0; i < w.size(); ++i) {
        if (i)
            s += ',';
        s += std::to_string(w[i]);
    }
    return s;
}

} // namespace detail_cfg

inline std::vector<std::pair<std::string, std::string>> to_kv(const ModelConfig& cfg) {
    return {
        {"channels_in", std::to_string(cfg.channels_in)},
        {"frame_h", std::to_string(cfg.frame_h)},
        {"frame_w", std::to_string(cfg.frame_w)},
        {"input_window", std::to_string(cfg.input_window)},
        {"items_trainable", cfg.items_trainable ? "1" : "0"},
        {"mem_items", std::to_string(cfg.mem_items)},
        {"memory_enabled", cfg.memory_enabled ? "1" : "0"},
        {"stage_widths", detail_cfg::fmt_widths(cfg.stage_widths)},
        {"target_index", std::to_string(cfg.target_index)},
        {"task", task_name(cfg.task)},
        {"use_skips", cfg.use_skips ? "1" : "0"},
        {"width_scale", detail_cfg::fmt_double(cfg.width_scale)},
    };
}

inline ModelConfig from_kv(const std::map<std::string, std::string>& kv) {
    ModelConfig cfg;
    auto want = [&](const std::string& key) -> const std::string& {
        auto it = kv.find(key);
        if (it == kv.end())
            throw ConfigError("checkpoint config echo is missing key '" + key + "'");
        return it->second;
    };
    try {
        cfg.task = parse_task(want("task"));
        cfg.input_window = std::stoll(want("input_window"));
        cfg.target_index = std::stoll(want("target_index"));
        cfg.frame_h = std::stoll(want("frame_h"));
        cfg.frame_w = std::stoll(want("frame_w"));
        cfg.channels_in = std::stoll(want("channels_in"));
        cfg.stage_widths.clear();
        std::string widths = want("stage_widths");
        size_t pos = 0;
        while (pos <= widths.size()) {
            const size_t comma = widths.find(',', pos);
            const std::string part = widths.substr(pos, comma - pos);
            cfg.stage_widths.push_back(std::stoll(part));
            if (comma == std::string::npos)
                break;
            pos = comma + 1;
        }
        cfg.width_scale = std::stod(want("width_scale"));
        cfg.use_skips = want("use_skips") == "1";
        cfg.mem_items = std::stoll(want("mem_items"));
        cfg.memory_enabled = want("memory_enabled") == "1";
        cfg.items_trainable = want("items_trainable") == "1";
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(std::string("bad checkpoint config echo value: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------------------

template <typename T>
struct ConvLayer {
    Tensor<T> w;
    Tensor<T> b;
};

template <typename T>
struct BnLayer {
    Tensor<T> gamma;
    Tensor<T> beta;
    Tensor<T> run_mean;
    Tensor<T> run_var;
};

template <typename T>
struct EncodeResult {
    Tensor<T> queries;   // [N, C, h, w], unit norm per location
    Tensor<T> skip_h2;   // [N, w0, H/2, W/2]
    Tensor<T> skip_h4;   // [N, w1, H/4, W/4]
};

template <typename T>
struct ForwardResult {
    Tensor<T> output;       // [N, channels_in, H, W] in [-1,1]
    Tensor<T> query_map;    // [N, C, h, w]
    Tensor<T> queries_kc;   // [K, C], K = N*h*w
    Tensor<T> read_kc;      // [K, C]; equals queries_kc when memory is bypassed
    Tensor<T> weights;      // [K, M] read weights; empty when memory is bypassed
};

/// Encoder/decoder with a prototype memory bank in the bottleneck. The
/// decoder consumes the channel concatenation of each query with its memory
/// read (or with itself when the bank is bypassed).
template <typename T>
class Model {
public:
    Model(ModelConfig cfg, SplitMix64& rng) : cfg_(std::move(cfg)) {
        cfg_.validate();
        const auto w = cfg_.scaled_widths();
        const int64_t cin = cfg_.encoder_in_channels();
        const int64_t c = w[2];

        enc_down_[0] = make_conv(cin, w[0], rng);
        enc_down_bn_[0] = make_bn(w[0]);
        enc_mix_[0] = make_conv(w[0], w[0], rng);
        enc_mix_bn_[0] = make_bn(w[0]);
        enc_down_[1] = make_conv(w[0], w[1], rng);
        enc_down_bn_[1] = make_bn(w[1]);
        enc_mix_[1] = make_conv(w[1], w[1], rng);
        enc_mix_bn_[1] = make_bn(w[1]);
        enc_down_[2] = make_conv(w[1], w[2], rng);
        enc_down_bn_[2] = make_bn(w[2]);
        enc_mix_[2] = make_conv(w[2], w[2], rng);   // tail: no bn, no relu

        dec_up_[0] = make_tconv(2 * c, w[1], rng);
        dec_up_bn_[0] = make_bn(w[1]);
        dec_mix_[0] = make_conv(cfg_.use_skips ? 2 * w[1] : w[1], w[1], rng);
        dec_mix_bn_[0] = make_bn(w[1]);
        dec_up_[1] = make_tconv(w[1], w[0], rng);
        dec_up_bn_[1] = make_bn(w[0]);
        dec_mix_[1] = make_conv(cfg_.use_skips ? 2 * w[0] : w[0], w[0], rng);
        dec_mix_bn_[1] = make_bn(w[0]);
        dec_up_[2] = make_tconv(w[0], w[0], rng);
        dec_up_bn_[2] = make_bn(w[0]);
        dec_mix_[2] = make_conv(w[0], w[0], rng);
        dec_mix_bn_[2] = make_bn(w[0]);
        dec_out_ = make_conv(w[0], cfg_.channels_in, rng);

        bank_ = memory::make_bank<T>(cfg_.mem_items, c, rng);
        bank_.trainable = cfg_.items_trainable;
        for (auto& [name, t] : named_params())
            t.set_requires_grad(true);
    }

    const ModelConfig& config() const { return cfg_; }
    memory::MemoryBank<T>& bank() { return bank_; }
    const memory::MemoryBank<T>& bank() const { return bank_; }

    /// Trainable tensors in a fixed registration order.
    std::vector<std::pair<std::string, Tensor<T>>> named_params() {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        auto conv = [&](const std::string& n, ConvLayer<T>& l) {
            out.emplace_back(n + ".w", l.w);
            out.emplace_back(n + ".b", l.b);
        };
        auto bn = [&](const std::string& n, BnLayer<T>& l) {
            out.emplace_back(n + ".gamma", l.gamma);
            out.emplace_back(n + ".beta", l.beta);
        };
        for (int i = 0; i < 3; ++i) {
            const std::string s = "enc" + std::to_string(i);
            conv(s + ".down", enc_down_[i]);
            bn(s + ".down_bn", enc_down_bn_[i]);
            conv(s + ".mix", enc_mix_[i]);
            if (i < 2)
                bn(s + ".mix_bn", enc_mix_bn_[i]);
        }
        for (int i = 0; i < 3; ++i) {
            const std::string s = "dec" + std::to_string(i);
            conv(s + ".up", dec_up_[i]);
            bn(s + ".up_bn", dec_up_bn_[i]);
            conv(s + ".mix", dec_mix_[i]);
            bn(s + ".mix_bn", dec_mix_bn_[i]);
        }
        conv("out", dec_out_);
        if (cfg_.items_trainable)
            out.emplace_back("memory.items", bank_.items);
        return out;
    }

    /// Non-trainable state: batchnorm running statistics and, unless items
    /// are trainable, the memory bank.
    std::vector<std::pair<std::string, Tensor<T>>> named_buffers() {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        auto bn = [&](const std::string& n, BnLayer<T>& l) {
            out.emplace_back(n + ".run_mean", l.run_mean);
            out.emplace_back(n + ".run_var", l.run_var);
        };
        for (int i = 0; i < 3; ++i) {
            const std::string s = "enc" + std::to_string(i);
            bn(s + ".down_bn", enc_down_bn_[i]);
            if (i < 2)
                bn(s + ".mix_bn", enc_mix_bn_[i]);
        }
        for (int i = 0; i < 3; ++i) {
            const std::string s = "dec" + std::to_string(i);
            bn(s + ".up_bn", dec_up_bn_[i]);
            bn(s + ".mix_bn", dec_mix_bn_[i]);
        }
        if (!cfg_.items_trainable)
            out.emplace_back("memory.items", bank_.items);
        return out;
    }

    std::vector<Tensor<T>> params() {
        std::vector<Tensor<T>> out;
        for (auto& [name, t] : named_params())
            out.push_back(t);
        return out;
    }

    EncodeResult<T> encode(const Tensor<T>& x, bool train, bool update_running = true) {
        check_input(x);
        EncodeResult<T> r;
        Tensor<T> h = stage_down(x, 0, train, update_running);
        h = relu(bn_apply(conv2d(h, enc_mix_[0].w, enc_mix_[0].b, 1, 1), enc_mix_bn_[0], train,
                          update_running));
        r.skip_h2 = h;
        h = stage_down(h, 1, train, update_running);
        h = relu(bn_apply(conv2d(h, enc_mix_[1].w, enc_mix_[1].b, 1, 1), enc_mix_bn_[1], train,
                          update_running));
        r.skip_h4 = h;
        h = stage_down(h, 2, train, update_running);
        h = conv2d(h, enc_mix_[2].w, enc_mix_[2].b, 1, 1);   // raw features
        Tensor<T> cm = as_channel_matrix(h);
        Tensor<T> nm = l2_normalize_axis(cm, 0);
        r.queries = from_channel_matrix(nm, h.dim(0), h.dim(2), h.dim(3));
        return r;
    }

    Tensor<T> decode(const Tensor<T>& bottleneck, const EncodeResult<T>& enc, bool train,
                     bool update_running = true) {
        Tensor<T> h = up_stage(bottleneck, 0, train, update_running);
        if (cfg_.use_skips)
            h = concat_axis(h, enc.skip_h4, 1);
        h = mix_stage(h, 0, train, update_running);
        h = up_stage(h, 1, train, update_running);
        if (cfg_.use_skips)
            h = concat_axis(h, enc.skip_h2, 1);
        h = mix_stage(h, 1, train, update_running);
        h = up_stage(h, 2, train, update_running);
        h = mix_stage(h, 2, train, update_running);
        return tanh(conv2d(h, dec_out_.w, dec_out_.b, 1, 1));
    }

    ForwardResult<T> forward(const Tensor<T>& x, bool train, bool update_running = true) {
        EncodeResult<T> enc = encode(x, train, update_running);
        ForwardResult<T> r;
        r.query_map = enc.queries;
        r.queries_kc = transpose(as_channel_matrix(enc.queries));
        if (cfg_.memory_enabled) {
            memory::ReadResult<T> rd = memory::read(r.queries_kc, bank_);
            r.read_kc = rd.read;
            r.weights = rd.weights;
        } else {
            r.read_kc = r.queries_kc;   // bypass: decoder sees query twice
        }
        const int64_t n = x.dim(0);
        Tensor<T> read_map =
            from_channel_matrix(transpose(r.read_kc), n, cfg_.query_h(), cfg_.query_w());
        Tensor<T> bottleneck = concat_axis(enc.queries, read_map, 1);
        r.output = decode(bottleneck, enc, train, update_running);
        return r;
    }

private:
    ConvLayer<T> make_conv(int64_t cin, int64_t cout, SplitMix64& rng) {
        const T limit = T(1) / std::sqrt(static_cast<T>(cin * 9));
        return {Tensor<T>::uniform(Shape{cout, cin, 3, 3}, rng, -limit, limit),
                Tensor<T>::zeros(Shape{cout})};
    }
    ConvLayer<T> make_tconv(int64_t cin, int64_t cout, SplitMix64& rng) {
        const T limit = T(1) / std::sqrt(static_cast<T>(cin * 16));
        return {Tensor<T>::uniform(Shape{cin, cout, 4, 4}, rng, -limit, limit),
                Tensor<T>::zeros(Shape{cout})};
    }
    BnLayer<T> make_bn(int64_t c) {
        return {Tensor<T>::full(Shape{c}, T(1)), Tensor<T>::zeros(Shape{c}),
                Tensor<T>::zeros(Shape{c}), Tensor<T>::full(Shape{c}, T(1))};
    }

    void check_input(const Tensor<T>& x) const {
        if (x.rank() != 4 || x.dim(1) != cfg_.encoder_in_channels() ||
            x.dim(2) != cfg_.frame_h || x.dim(3) != cfg_.frame_w)
            throw ShapeError("model input " + shape_str(x.shape()) + " does not match [N," +
                             std::to_string(cfg_.encoder_in_channels()) + "," +
                             std::to_string(cfg_.frame_h) + "," +
                             std::to_string(cfg_.frame_w) + "]");
    }

    Tensor<T> bn_apply(const Tensor<T>& x, BnLayer<T>& l, bool train, bool update_running) {
        return batchnorm2d(x, l.gamma, l.beta, l.run_mean, l.run_var, train, T(0.1), T(1e-5),
                           update_running);
    }
    Tensor<T> stage_down(const Tensor<T>& x, int i, bool train, bool update_running) {
        return relu(bn_apply(conv2d(x, enc_down_[i].w, enc_down_[i].b, 2, 1), enc_down_bn_[i],
                             train, update_running));
    }
    Tensor<T> up_stage(const Tensor<T>& x, int i, bool train, bool update_running) {
        return relu(bn_apply(transposed_conv2d(x, dec_up_[i].w, dec_up_[i].b, 2, 1),
                             dec_up_bn_[i], train, update_running));
    }
    Tensor<T> mix_stage(const Tensor<T>& x, int i, bool train, bool update_running) {
        return relu(bn_apply(conv2d(x, dec_mix_[i].w, dec_mix_[i].b, 1, 1), dec_mix_bn_[i],
                             train, update_running));
    }

    ModelConfig cfg_;
    ConvLayer<T> enc_down_[3], enc_mix_[3];
    BnLayer<T> enc_down_bn_[3], enc_mix_bn_[2];
    ConvLayer<T> dec_up_[3], dec_mix_[3], dec_out_;
    BnLayer<T> dec_up_bn_[3], dec_mix_bn_[3];
    memory::MemoryBank<T> bank_;
};

} // namespace mnad::model
