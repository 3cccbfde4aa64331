#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "mnad/errors.hpp"
#include "mnad/model.hpp"
#include "mnad/optim.hpp"

namespace mnad::trainer {

static_assert(std::endian::native == std::endian::little,
              "checkpoint io assumes a little-endian host");

inline constexpr char kCheckpointMagic[4] = {'M', 'N', 'A', 'D'};
inline constexpr uint32_t kCheckpointVersion = 1;

template <typename T>
struct TensorBlob {
    std::string name;
    Shape shape;
    std::vector<T> data;
};

/// Everything a training run needs to resume, and an evaluation needs to
/// score: config echo, named tensors (parameters, batchnorm buffers, memory
/// items), optimizer moments, and the RNG state.
template <typename T>
struct CheckpointRaw {
    std::string config_echo;
    std::vector<TensorBlob<T>> tensors;
    bool has_opt = false;
    int64_t opt_step = 0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::vector<std::pair<std::vector<T>, std::vector<T>>> slots;   // (m, v) per parameter
    uint64_t rng_state = 0;
};

namespace detail_ckpt {

template <typename T>
constexpr uint8_t dtype_code() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, float> ? 0 : 1;
}

struct Writer {
    std::ofstream out;
    explicit Writer(const std::string& path) : out(path, std::ios::binary) {
        if (!out)
            throw IoError("cannot write checkpoint: " + path);
    }
    void bytes(const void* p, size_t n) {
        out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    }
    void u8(uint8_t v) { bytes(&v, 1); }
    void u32(uint32_t v) { bytes(&v, 4); }
    void u64(uint64_t v) { bytes(&v, 8); }
    void f64(double v) { bytes(&v, 8); }
    void str(const std::string& s) {
        u64(s.size());
        bytes(s.data(), s.size());
    }
};

struct Reader {
    std::ifstream in;
    std::string path;
    uint64_t offset = 0;
    Reader(const std::string& p) : in(p, std::ios::binary), path(p) {
        if (!in)
            throw IoError("cannot open checkpoint: " + p);
    }
    void bytes(void* p, size_t n) {
        in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (in.gcount() != static_cast<std::streamsize>(n))
            throw IoError("checkpoint truncated at offset " + std::to_string(offset) + ": " +
                          path);
        offset += n;
    }
    uint8_t u8() {
        uint8_t v;
        bytes(&v, 1);
        return v;
    }
    uint32_t u32() {
        uint32_t v;
        bytes(&v, 4);
        return v;
    }
    uint64_t u64() {
        uint64_t v;
        bytes(&v, 8);
        return v;
    }
    double f64() {
        double v;
        bytes(&v, 8);
        return v;
    }
    std::string str(uint64_t max_len = 1u << 20) {
        const uint64_t n = u64();
        if (n > max_len)
            throw IoError("checkpoint field length " + std::to_string(n) +
                          " implausible at offset " + std::to_string(offset - 8) + ": " + path);
        std::string s(n, '\0');
        bytes(s.data(), n);
        return s;
    }
};

} // namespace detail_ckpt

template <typename T>
void save_checkpoint(const std::string& path, const CheckpointRaw<T>& ck) {
    detail_ckpt::Writer w(path);
    w.bytes(kCheckpointMagic, 4);
    w.u32(kCheckpointVersion);
    w.str(ck.config_echo);
    w.u64(ck.tensors.size());
    for (const auto& t : ck.tensors) {
        w.str(t.name);
        w.u8(detail_ckpt::dtype_code<T>());
        w.u8(static_cast<uint8_t>(t.shape.size()));
        for (int64_t d : t.shape)
            w.u64(static_cast<uint64_t>(d));
        w.bytes(t.data.data(), t.data.size() * sizeof(T));
    }
    w.u8(ck.has_opt ? 1 : 0);
    if (ck.has_opt) {
        w.u64(static_cast<uint64_t>(ck.opt_step));
        w.f64(ck.beta1);
        w.f64(ck.beta2);
        w.f64(ck.eps);
        w.u64(ck.slots.size());
        for (const auto& [m, v] : ck.slots) {
            w.u64(m.size());
            w.bytes(m.data(), m.size() * sizeof(T));
            w.bytes(v.data(), v.size() * sizeof(T));
        }
    }
    w.u64(ck.rng_state);
    w.out.flush();
    if (!w.out)
        throw IoError("write failed: " + path);
}

template <typename T>
CheckpointRaw<T> load_checkpoint(const std::string& path) {
    detail_ckpt::Reader r(path);
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw IoError("bad checkpoint magic: " + path);
    const uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw IoError("unsupported checkpoint version " + std::to_string(version) +
                      " (want " + std::to_string(kCheckpointVersion) + "): " + path);
    CheckpointRaw<T> ck;
    ck.config_echo = r.str();
    const uint64_t count = r.u64();
    for (uint64_t i = 0; i < count; ++i) {
        TensorBlob<T> blob;
        blob.name = r.str(4096);
        const uint8_t dtype = r.u8();
        if (dtype != detail_ckpt::dtype_code<T>())
            throw ConfigError("checkpoint precision (dtype code " + std::to_string(dtype) +
                              ") does not match this build: " + path);
        const uint8_t rank = r.u8();
        int64_t numel = 1;
        for (uint8_t d = 0; d < rank; ++d) {
            const uint64_t extent = r.u64();
            if (extent == 0 || extent > (1ull << 32))
                throw IoError("implausible tensor extent " + std::to_string(extent) +
                              " at offset " + std::to_string(r.offset - 8) + ": " + path);
            blob.shape.push_back(static_cast<int64_t>(extent));
            numel *= static_cast<int64_t>(extent);
        }
        blob.data.resize(static_cast<size_t>(numel));
        r.bytes(blob.data.data(), blob.data.size() * sizeof(T));
        ck.tensors.push_back(std::move(blob));
    }
    ck.has_opt = r.u8() != 0;
    if (ck.has_opt) {
        ck.opt_step = static_cast<int64_t>(r.u64());
        ck.beta1 = r.f64();
        ck.beta2 = r.f64();
        ck.eps = r.f64();
        const uint64_t nslots = r.u64();
        for (uint64_t i = 0; i < nslots; ++i) {
            const uint64_t len = r.u64();
            if (len > (1ull << 32))
                throw IoError("implausible optimizer slot length at offset " +
                              std::to_string(r.offset - 8) + ": " + path);
            std::pair<std::vector<T>, std::vector<T>> slot;
            slot.first.resize(len);
            r.bytes(slot.first.data(), len * sizeof(T));
            slot.second.resize(len);
            r.bytes(slot.second.data(), len * sizeof(T));
            ck.slots.push_back(std::move(slot));
        }
    }
    ck.rng_state = r.u64();
    // Trailing garbage would break the byte-identical round-trip contract.
    if (r.in.peek() != EOF)
        throw IoError("trailing bytes after checkpoint payload at offset " +
                      std::to_string(r.offset) + ": " + path);
    return ck;
}

inline std::string compose_echo(std::vector<std::pair<std::string, std::string>> kv) {
    std::sort(kv.begin(), kv.end());
    std::string echo;
    for (const auto& [k, v] : kv) {
        echo += k;
        echo += '=';
        echo += v;
        echo += '\n';
    }
    return echo;
}

inline std::map<std::string, std::string> parse_echo(const std::string& echo) {
    std::map<std::string, std::string> kv;
    size_t pos = 0;
    while (pos < echo.size()) {
        size_t nl = echo.find('\n', pos);
        if (nl == std::string::npos)
            nl = echo.size();
        const std::string line = echo.substr(pos, nl - pos);
        const size_t eq = line.find('=');
        if (eq == std::string::npos || eq == 0)
            throw ConfigError("malformed checkpoint config echo line '" + line + "'");
        kv[line.substr(0, eq)] = line.substr(eq + 1);
        pos = nl + 1;
    }
    return kv;
}

/// Snapshot of a model (and optionally optimizer/RNG) ready to serialize.
template <typename T>
CheckpointRaw<T> snapshot(model::Model<T>& m, const std::string& config_echo,
                          const AdamState<T>* opt, uint64_t rng_state) {
    CheckpointRaw<T> ck;
    ck.config_echo = config_echo;
    auto push = [&](std::vector<std::pair<std::string, Tensor<T>>> list) {
        for (auto& [name, t] : list)
            ck.tensors.push_back({name, t.shape(), t.data()});
    };
    push(m.named_params());
    push(m.named_buffers());
    if (opt) {
        ck.has_opt = true;
        ck.opt_step = opt->step;
        ck.beta1 = static_cast<double>(opt->beta1);
        ck.beta2 = static_cast<double>(opt->beta2);
        ck.eps = static_cast<double>(opt->eps);
        for (const auto& slot : opt->slots)
            ck.slots.emplace_back(slot.m, slot.v);
    }
    ck.rng_state = rng_state;
    return ck;
}

/// Copies checkpoint tensors into a model built from the same config. The
/// name sets must match exactly.
template <typename T>
void restore_model(const CheckpointRaw<T>& ck, model::Model<T>& m) {
    std::map<std::string, Tensor<T>> by_name;
    for (auto& [name, t] : m.named_params())
        by_name.emplace(name, t);
    for (auto& [name, t] : m.named_buffers())
        by_name.emplace(name, t);
    if (by_name.size() != ck.tensors.size())
        throw ConfigError("checkpoint holds " + std::to_string(ck.tensors.size()) +
                          " tensors but the model expects " + std::to_string(by_name.size()));
    for (const auto& blob : ck.tensors) {
        auto it = by_name.find(blob.name);
        if (it == by_name.end())
            throw ConfigError("checkpoint tensor '" + blob.name + "' unknown to the model");
        Tensor<T>& t = it->second;
        if (t.shape() != blob.shape)
            throw ConfigError("checkpoint tensor '" + blob.name + "' has shape " +
                              shape_str(blob.shape) + ", model expects " +
                              shape_str(t.shape()));
        t.raw() = blob.data;
    }
}

template <typename T>
void restore_optimizer(const CheckpointRaw<T>& ck, AdamState<T>& opt, size_t param_count) {
    if (!ck.has_opt)
        throw ConfigError("checkpoint carries no optimizer state");
    if (ck.slots.size() != param_count)
        throw ConfigError("checkpoint optimizer state covers " +
                          std::to_string(ck.slots.size()) + " parameters, model has " +
                          std::to_string(param_count));
    opt.step = ck.opt_step;
    opt.beta1 = static_cast<T>(ck.beta1);
    opt.beta2 = static_cast<T>(ck.beta2);
    opt.eps = static_cast<T>(ck.eps);
    opt.slots.clear();
    for (const auto& [m, v] : ck.slots)
        opt.slots.push_back({m, v});
}

} // namespace mnad::trainer
