#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "mnad/errors.hpp"
#include "mnad/rng.hpp"
#include "mnad/tensor.hpp"

namespace mnad::data {

namespace fs = std::filesystem;

struct Image {
    int64_t width = 0;
    int64_t height = 0;
    std::vector<uint8_t> pixels;   // row-major
};

enum class Source { synthetic, disk };

struct Clip {
    std::string id;
    std::vector<Image> frames;
    std::vector<int> labels;   // 0 normal, 1 abnormal; one per frame
    Source source = Source::synthetic;
};

// ---------------------------------------------------------------------------
// PGM (binary P5, 8-bit) io

namespace detail_pgm {

inline std::string next_token(std::istream& in, const std::string& path) {
    std::string tok;
    int ch;
    while ((ch = in.get()) != EOF) {
        if (ch == '#') {
            while ((ch = in.get()) != EOF && ch != '\n') {
            }
            continue;
        }
        if (std::isspace(ch)) {
            if (!tok.empty())
                return tok;
            continue;
        }
        tok.push_back(static_cast<char>(ch));
    }
    if (tok.empty())
        throw DataError("malformed PGM header (unexpected end of file): " + path);
    return tok;
}

inline int64_t header_int(std::istream& in, const std::string& path, const char* what) {
    const std::string tok = next_token(in, path);
    try {
        size_t pos = 0;
        const long long v = std::stoll(tok, &pos);
        if (pos != tok.size() || v <= 0)
            throw std::invalid_argument(tok);
        return v;
    } catch (const std::exception&) {
        throw DataError(std::string("malformed PGM header (bad ") + what + " '" + tok +
                        "'): " + path);
    }
}

} // namespace detail_pgm

inline Image read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot open " + path);
    const std::string magic = detail_pgm::next_token(in, path);
    if (magic != "P5")
        throw DataError("malformed PGM header (magic '" + magic + "', want P5): " + path);
    Image img;
    img.width = detail_pgm::header_int(in, path, "width");
    img.height = detail_pgm::header_int(in, path, "height");
    const int64_t maxval = detail_pgm::header_int(in, path, "maxval");
    if (maxval != 255)
        throw DataError("unsupported PGM maxval " + std::to_string(maxval) +
                        " (only 8-bit, 255): " + path);
    // The header terminates with exactly one whitespace byte, already consumed
    // by the tokenizer.
    img.pixels.resize(static_cast<size_t>(img.width * img.height));
    in.read(reinterpret_cast<char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
    if (in.gcount() != static_cast<std::streamsize>(img.pixels.size()))
        throw DataError("truncated PGM payload (" + std::to_string(in.gcount()) + " of " +
                        std::to_string(img.pixels.size()) + " bytes): " + path);
    return img;
}

inline void write_pgm(const std::string& path, const Image& img) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw IoError("cannot write " + path);
    out << "P5\n" << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()),
              static_cast<std::streamsize>(img.pixels.size()));
    if (!out)
        throw IoError("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Preprocessing

/// Bilinear resize plus the linear map [0,255] -> [-1,1]. Resizing with the
/// source size is an exact copy.
template <typename T>
Tensor<T> preprocess(const Image& img, int64_t target_h, int64_t target_w) {
    if (target_h <= 0 || target_w <= 0)
        throw ConfigError("preprocess: target size must be positive, got " +
                          std::to_string(target_h) + "x" + std::to_string(target_w));
    Tensor<T> out(Shape{1, target_h, target_w});
    T* po = out.mutable_ptr();
    const double sy = static_cast<double>(img.height) / static_cast<double>(target_h);
    const double sx = static_cast<double>(img.width) / static_cast<double>(target_w);
    for (int64_t y = 0; y < target_h; ++y) {
        double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
        fy = std::clamp(fy, 0.0, static_cast<double>(img.height - 1));
        const int64_t y0 = static_cast<int64_t>(fy);
        const int64_t y1 = std::min(y0 + 1, img.height - 1);
        const double wy = fy - static_cast<double>(y0);
        for (int64_t x = 0; x < target_w; ++x) {
            double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
            fx = std::clamp(fx, 0.0, static_cast<double>(img.width - 1));
            const int64_t x0 = static_cast<int64_t>(fx);
            const int64_t x1 = std::min(x0 + 1, img.width - 1);
            const double wx = fx - static_cast<double>(x0);
            const double v00 = img.pixels[static_cast<size_t>(y0 * img.width + x0)];
            const double v01 = img.pixels[static_cast<size_t>(y0 * img.width + x1)];
            const double v10 = img.pixels[static_cast<size_t>(y1 * img.width + x0)];
            const double v11 = img.pixels[static_cast<size_t>(y1 * img.width + x1)];
            const double v = (v00 * (1 - wx) + v01 * wx) * (1 - wy) +
                             (v10 * (1 - wx) + v11 * wx) * wy;
            po[y * target_w + x] = static_cast<T>(v / 255.0 * 2.0 - 1.0);
        }
    }
    return out;
}

/// Inverse of the value map: [-1,1] back to 8-bit, rounding to nearest.
template <typename T>
Image requantize(const Tensor<T>& frame) {
    if (frame.rank() != 2 && !(frame.rank() == 3 && frame.dim(0) == 1))
        throw ShapeError("requantize: expected [H,W] or [1,H,W], got " +
                         shape_str(frame.shape()));
    const int64_t h = frame.dim(frame.rank() - 2), w = frame.dim(frame.rank() - 1);
    Image img;
    img.width = w;
    img.height = h;
    img.pixels.resize(static_cast<size_t>(h * w));
    const T* p = frame.ptr();
    for (int64_t i = 0; i < h * w; ++i) {
        const double v01 = (static_cast<double>(p[i]) + 1.0) / 2.0;
        const long b = std::lround(std::clamp(v01, 0.0, 1.0) * 255.0);
        img.pixels[static_cast<size_t>(i)] = static_cast<uint8_t>(b);
    }
    return img;
}

// ---------------------------------------------------------------------------
// Synthetic clips: bright squares drifting horizontally are normal; anomalies
// are a vertically moving square, a triple-speed square, or a disc.

enum class AnomalyKind { vertical, speed, shape };

inline AnomalyKind parse_anomaly(const std::string& name) {
    if (name == "vertical")
        return AnomalyKind::vertical;
    if (name == "speed")
        return AnomalyKind::speed;
    if (name == "shape")
        return AnomalyKind::shape;
    throw ConfigError("unknown anomaly kind '" + name + "' (vertical, speed, shape)");
}

struct SynthSpec {
    int64_t canvas = 64;
    int64_t objects = 1;
    std::vector<AnomalyKind> anomalies;   // empty for training specs
    double noise_sigma = 3.0;
    // Test clips get one anomaly window each; the window fraction ramps from
    // min to max across clips, so later clips are anomaly-dense.
    double anomaly_min_frac = 0.15;
    double anomaly_max_frac = 0.7;
    uint64_t seed = 1;
};

namespace detail_synth {

struct Mover {
    double pos;
    double vel;
    double lo;
    double hi;

    void step() {
        pos += vel;
        if (pos > hi) {
            pos = 2 * hi - pos;
            vel = -vel;
        }
        if (pos < lo) {
            pos = 2 * lo - pos;
            vel = -vel;
        }
    }
};

inline void fill_rect(Image& img, int64_t x, int64_t y, int64_t side, uint8_t value) {
    const int64_t x0 = std::max<int64_t>(0, x), y0 = std::max<int64_t>(0, y);
    const int64_t x1 = std::min(img.width, x + side), y1 = std::min(img.height, y + side);
    for (int64_t yy = y0; yy < y1; ++yy)
        for (int64_t xx = x0; xx < x1; ++xx)
            img.pixels[static_cast<size_t>(yy * img.width + xx)] = value;
}

inline void fill_disc(Image& img, int64_t cx, int64_t cy, int64_t r, uint8_t value) {
    for (int64_t dy = -r; dy <= r; ++dy)
        for (int64_t dx = -r; dx <= r; ++dx) {
            if (dx * dx + dy * dy > r * r)
                continue;
            const int64_t x = cx + dx, y = cy + dy;
            if (x >= 0 && x < img.width && y >= 0 && y < img.height)
                img.pixels[static_cast<size_t>(y * img.width + x)] = value;
        }
}

struct Sprite {
    Mover x, y;
    int64_t side = 0;
    uint8_t intensity = 0;
    bool disc = false;

    void draw(Image& img) const {
        if (disc)
            fill_disc(img, std::llround(x.pos) + side / 2, std::llround(y.pos) + side / 2,
                      side / 2, intensity);
        else
            fill_rect(img, std::llround(x.pos), std::llround(y.pos), side, intensity);
    }
    void step() {
        x.step();
        y.step();
    }
};

inline Sprite normal_sprite(const SynthSpec& spec, SplitMix64& rng) {
    Sprite s;
    s.side = spec.canvas / 8 + static_cast<int64_t>(rng.next_below(
                 static_cast<uint64_t>(std::max<int64_t>(1, spec.canvas / 8))));
    s.intensity = static_cast<uint8_t>(180 + rng.next_below(60));
    const double span = static_cast<double>(spec.canvas - s.side);
    s.x = {static_cast<double>(rng.next_below(static_cast<uint64_t>(span) + 1)),
           (rng.next_below(2) ? 1.0 : -1.0) * (1.0 + static_cast<double>(rng.next_below(2))),
           0.0, span};
    s.y = {static_cast<double>(rng.next_below(static_cast<uint64_t>(span) + 1)), 0.0, 0.0,
           span};
    return s;
}

inline Sprite anomalous_sprite(const SynthSpec& spec, AnomalyKind kind, SplitMix64& rng) {
    Sprite s = normal_sprite(spec, rng);
    switch (kind) {
    case AnomalyKind::vertical:
        s.y.vel = s.x.vel;
        s.x.vel = 0.0;
        break;
    case AnomalyKind::speed:
        s.x.vel *= 3.0;
        break;
    case AnomalyKind::shape:
        s.disc = true;
        s.intensity = static_cast<uint8_t>(100 + rng.next_below(40));
        break;
    }
    return s;
}

} // namespace detail_synth

/// Deterministic clip generation. Training specs must be anomaly-free; test
/// clips each carry one anomaly window whose length grows with the clip
/// index.
inline std::vector<Clip> gen_synthetic(const SynthSpec& spec, int64_t n_clips,
                                       int64_t clip_len, bool train_split) {
    if (train_split && !spec.anomalies.empty())
        throw ConfigError("training spec must not request anomalies");
    if (n_clips < 1 || clip_len < 2)
        throw ConfigError("gen_synthetic: need at least 1 clip of at least 2 frames");
    if (spec.canvas < 16)
        throw ConfigError("gen_synthetic: canvas too small, need >= 16");

    std::vector<Clip> clips;
    clips.reserve(static_cast<size_t>(n_clips));
    for (int64_t ci = 0; ci < n_clips; ++ci) {
        SplitMix64 rng(SplitMix64::mix(spec.seed, static_cast<uint64_t>(ci) +
                                                      (train_split ? 1000000u : 2000000u)));
        Clip clip;
        char idbuf[16];
        std::snprintf(idbuf, sizeof(idbuf), "v%03d", static_cast<int>(ci));
        clip.id = idbuf;
        clip.source = Source::synthetic;

        std::vector<detail_synth::Sprite> sprites;
        for (int64_t i = 0; i < spec.objects; ++i)
            sprites.push_back(detail_synth::normal_sprite(spec, rng));

        int64_t a_start = clip_len, a_end = clip_len;
        detail_synth::Sprite anomaly;
        if (!train_split && !spec.anomalies.empty()) {
            const AnomalyKind kind =
                spec.anomalies[static_cast<size_t>(ci) % spec.anomalies.size()];
            anomaly = detail_synth::anomalous_sprite(spec, kind, rng);
            const double ramp =
                n_clips > 1 ? static_cast<double>(ci) / static_cast<double>(n_clips - 1) : 1.0;
            const double frac = spec.anomaly_min_frac +
                                (spec.anomaly_max_frac - spec.anomaly_min_frac) * ramp;
            int64_t dur = std::llround(frac * static_cast<double>(clip_len));
            dur = std::clamp<int64_t>(dur, 1, clip_len - 2);
            a_start = 1 + static_cast<int64_t>(
                              rng.next_below(static_cast<uint64_t>(clip_len - 1 - dur)));
            a_end = a_start + dur;
        }

        for (int64_t t = 0; t < clip_len; ++t) {
            Image frame;
            frame.width = spec.canvas;
            frame.height = spec.canvas;
            frame.pixels.assign(static_cast<size_t>(spec.canvas * spec.canvas), 20);
            for (auto& s : sprites)
                s.draw(frame);
            const bool abnormal = t >= a_start && t < a_end;
            if (abnormal)
                anomaly.draw(frame);
            for (auto& px : frame.pixels) {
                const double noisy =
                    static_cast<double>(px) + rng.normal() * spec.noise_sigma;
                px = static_cast<uint8_t>(std::clamp(noisy, 0.0, 255.0));
            }
            clip.frames.push_back(std::move(frame));
            clip.labels.push_back(abnormal ? 1 : 0);
            for (auto& s : sprites)
                s.step();
            if (abnormal)
                anomaly.step();
        }
        clips.push_back(std::move(clip));
    }
    return clips;
}

// ---------------------------------------------------------------------------
// Dataset layout: <root>/<split>/<video_id>/frame_%06d.pgm [+ labels.csv]

inline std::string frame_name(int64_t index) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "frame_%06lld.pgm", static_cast<long long>(index));
    return buf;
}

inline void write_clip(const fs::path& dir, const Clip& clip) {
    fs::create_directories(dir);
    for (size_t i = 0; i < clip.frames.size(); ++i)
        write_pgm((dir / frame_name(static_cast<int64_t>(i))).string(), clip.frames[i]);
    std::ofstream labels(dir / "labels.csv");
    if (!labels)
        throw IoError("cannot write " + (dir / "labels.csv").string());
    labels << "frame_index,label\n";
    for (size_t i = 0; i < clip.labels.size(); ++i)
        labels << i << ',' << clip.labels[i] << '\n';
}

inline void write_split(const fs::path& root, const std::string& split,
                        const std::vector<Clip>& clips) {
    for (const auto& clip : clips)
        write_clip(root / split / clip.id, clip);
}

/// Loads one video directory; frame indices must be contiguous from 0.
/// Without labels.csv every frame is labeled normal and a warning is printed.
inline Clip load_frame_dir(const fs::path& dir, const std::string& id) {
    if (!fs::is_directory(dir))
        throw DataError("not a directory: " + dir.string());
    std::vector<int64_t> indices;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        long long idx = -1;
        if (std::sscanf(name.c_str(), "frame_%6lld.pgm", &idx) == 1 &&
            name == frame_name(idx))
            indices.push_back(idx);
    }
    if (indices.empty())
        throw DataError("no frame_NNNNNN.pgm files in " + dir.string());
    std::sort(indices.begin(), indices.end());
    for (size_t i = 0; i < indices.size(); ++i)
        if (indices[i] != static_cast<int64_t>(i))
            throw DataError("non-contiguous frame numbering in " + dir.string() +
                            ": missing index " + std::to_string(i));

    Clip clip;
    clip.id = id;
    clip.source = Source::disk;
    for (int64_t i = 0; i < static_cast<int64_t>(indices.size()); ++i) {
        Image img = read_pgm((dir / frame_name(i)).string());
        if (!clip.frames.empty() && (img.width != clip.frames[0].width ||
                                     img.height != clip.frames[0].height))
            throw DataError("frame size changes within " + dir.string() + " at index " +
                            std::to_string(i));
        clip.frames.push_back(std::move(img));
    }
    clip.labels.assign(clip.frames.size(), 0);

    const fs::path labels_path = dir / "labels.csv";
    if (!fs::exists(labels_path)) {
        std::cerr << "warning: no labels.csv in " << dir.string()
                  << "; defaulting all labels to 0\n";
        return clip;
    }
    std::ifstream in(labels_path);
    if (!in)
        throw IoError("cannot open " + labels_path.string());
    std::string line;
    if (!std::getline(in, line) || line != "frame_index,label")
        throw DataError("labels.csv must start with 'frame_index,label': " +
                        labels_path.string());
    while (std::getline(in, line)) {
        if (line.empty())
            continue;
        long long idx = -1;
        int label = -1;
        if (std::sscanf(line.c_str(), "%lld,%d", &idx, &label) != 2 ||
            (label != 0 && label != 1))
            throw DataError("bad labels.csv row '" + line + "': " + labels_path.string());
        if (idx < 0 || idx >= static_cast<long long>(clip.frames.size()))
            throw DataError("labels.csv index " + std::to_string(idx) +
                            " out of range 0.." + std::to_string(clip.frames.size() - 1) +
                            ": " + labels_path.string());
        clip.labels[static_cast<size_t>(idx)] = label;
    }
    return clip;
}

/// Loads every video directory of a split, ordered by id.
inline std::vector<Clip> load_split(const fs::path& root, const std::string& split) {
    const fs::path dir = root / split;
    if (!fs::is_directory(dir))
        throw DataError("split directory not found: " + dir.string());
    std::vector<std::string> ids;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_directory())
            ids.push_back(entry.path().filename().string());
    if (ids.empty())
        throw DataError("no video directories under " + dir.string());
    std::sort(ids.begin(), ids.end());
    std::vector<Clip> clips;
    for (const auto& id : ids)
        clips.push_back(load_frame_dir(dir / id, id));
    return clips;
}

} // namespace mnad::data
