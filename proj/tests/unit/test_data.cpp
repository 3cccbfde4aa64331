#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "mnad/data.hpp"

using namespace mnad;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("mnad_data_test_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter()++));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    static int& counter() {
        static int c = 0;
        return c;
    }
};

data::Image random_image(int64_t w, int64_t h, SplitMix64& rng) {
    data::Image img;
    img.width = w;
    img.height = h;
    img.pixels.resize(static_cast<size_t>(w * h));
    for (auto& p : img.pixels)
        p = static_cast<uint8_t>(rng.next_below(256));
    return img;
}

} // namespace

TEST_CASE("pgm files round trip bit for bit") {
    TempDir tmp;
    SplitMix64 rng(51);
    data::Image img = random_image(17, 9, rng);
    const std::string path = (tmp.path / "img.pgm").string();
    data::write_pgm(path, img);
    data::Image back = data::read_pgm(path);
    CHECK(back.width == img.width);
    CHECK(back.height == img.height);
    CHECK(back.pixels == img.pixels);
}

TEST_CASE("pgm reader rejects malformed input") {
    TempDir tmp;
    auto write_raw = [&](const std::string& name, const std::string& bytes) {
        std::ofstream out(tmp.path / name, std::ios::binary);
        out << bytes;
        return (tmp.path / name).string();
    };
    CHECK_THROWS_AS(data::read_pgm((tmp.path / "missing.pgm").string()), IoError);
    CHECK_THROWS_AS(data::read_pgm(write_raw("p2.pgm", "P2\n2 2\n255\n0 0 0 0\n")), DataError);
    CHECK_THROWS_AS(data::read_pgm(write_raw("short.pgm", "P5\n4 4\n255\nab")), DataError);
    CHECK_THROWS_AS(data::read_pgm(write_raw("depth.pgm", "P5\n1 1\n65535\n\0\0")), DataError);
    CHECK_THROWS_AS(data::read_pgm(write_raw("zero.pgm", "P5\n0 2\n255\n")), DataError);
    // comments are part of the format and must parse
    data::Image ok = data::read_pgm(write_raw("comment.pgm", "P5\n# c\n1 1\n255\nx"));
    CHECK(ok.pixels == std::vector<uint8_t>{'x'});
}

TEST_CASE("preprocess maps 8-bit values onto [-1,1]") {
    data::Image img;
    img.width = 2;
    img.height = 1;
    img.pixels = {0, 255};
    Tensor<double> t = data::preprocess<double>(img, 1, 2);
    CHECK(t.shape() == Shape{1, 1, 2});
    CHECK(t.data()[0] == doctest::Approx(-1.0).epsilon(1e-14));
    CHECK(t.data()[1] == doctest::Approx(1.0).epsilon(1e-14));

    img.pixels = {128, 128};
    CHECK(data::preprocess<double>(img, 1, 2).data()[0] ==
          doctest::Approx(0.0039215686274509665).epsilon(1e-12));
    CHECK_THROWS_AS(data::preprocess<double>(img, 0, 2), ConfigError);
}

TEST_CASE("same-size preprocess and requantize invert each other") {
    SplitMix64 rng(52);
    data::Image img = random_image(16, 16, rng);
    Tensor<double> t = data::preprocess<double>(img, 16, 16);
    data::Image back = data::requantize(t);
    REQUIRE(back.pixels.size() == img.pixels.size());
    for (size_t i = 0; i < img.pixels.size(); ++i) {
        const int diff = std::abs(static_cast<int>(img.pixels[i]) -
                                  static_cast<int>(back.pixels[i]));
        CHECK(diff <= 1);
    }
}

TEST_CASE("bilinear downsampling averages neighborhoods") {
    data::Image img;
    img.width = 2;
    img.height = 2;
    img.pixels = {0, 255, 0, 255};
    // target 1x1 samples the exact center: mean of the four corners
    Tensor<double> t = data::preprocess<double>(img, 1, 1);
    CHECK(t.data()[0] == doctest::Approx(127.5 / 255.0 * 2.0 - 1.0).epsilon(1e-12));
}

TEST_CASE("synthetic clips are deterministic and labeled") {
    data::SynthSpec spec;
    spec.canvas = 32;
    spec.seed = 7;
    auto a = data::gen_synthetic(spec, 3, 20, true);
    auto b = data::gen_synthetic(spec, 3, 20, true);
    REQUIRE(a.size() == 3);
    for (size_t c = 0; c < a.size(); ++c) {
        CHECK(a[c].id == b[c].id);
        CHECK(a[c].frames.size() == 20);
        CHECK(a[c].labels.size() == 20);
        for (size_t f = 0; f < a[c].frames.size(); ++f)
            CHECK(a[c].frames[f].pixels == b[c].frames[f].pixels);
        for (int l : a[c].labels)
            CHECK(l == 0);
    }
    // different seeds disagree on pixels
    spec.seed = 8;
    auto c = data::gen_synthetic(spec, 3, 20, true);
    CHECK(c[0].frames[0].pixels != a[0].frames[0].pixels);
}

TEST_CASE("test-split clips carry one anomaly window each") {
    data::SynthSpec spec;
    spec.canvas = 32;
    spec.seed = 7;
    spec.anomalies = {data::AnomalyKind::vertical, data::AnomalyKind::speed,
                      data::AnomalyKind::shape};
    auto clips = data::gen_synthetic(spec, 4, 30, false);
    for (const auto& clip : clips) {
        int64_t first = -1, last = -1, count = 0;
        for (size_t i = 0; i < clip.labels.size(); ++i)
            if (clip.labels[i] == 1) {
                if (first < 0)
                    first = static_cast<int64_t>(i);
                last = static_cast<int64_t>(i);
                ++count;
            }
        REQUIRE(count > 0);
        // contiguous window
        CHECK(count == last - first + 1);
    }
    // anomaly windows ramp up across clips
    auto frames_on = [](const data::Clip& c) {
        int64_t n = 0;
        for (int l : c.labels)
            n += l;
        return n;
    };
    CHECK(frames_on(clips.back()) > frames_on(clips.front()));

    CHECK_THROWS_AS(data::gen_synthetic(spec, 4, 30, true), ConfigError);
}

TEST_CASE("dataset directories round trip clips") {
    TempDir tmp;
    data::SynthSpec spec;
    spec.canvas = 32;
    spec.seed = 11;
    spec.anomalies = {data::AnomalyKind::speed};
    auto clips = data::gen_synthetic(spec, 2, 12, false);
    data::write_split(tmp.path, "test", clips);

    auto loaded = data::load_split(tmp.path, "test");
    REQUIRE(loaded.size() == clips.size());
    for (size_t c = 0; c < clips.size(); ++c) {
        CHECK(loaded[c].id == clips[c].id);
        CHECK(loaded[c].labels == clips[c].labels);
        CHECK(loaded[c].source == data::Source::disk);
        for (size_t f = 0; f < clips[c].frames.size(); ++f)
            CHECK(loaded[c].frames[f].pixels == clips[c].frames[f].pixels);
    }
    CHECK_THROWS_AS(data::load_split(tmp.path, "train"), DataError);
}

TEST_CASE("frame directories must be contiguous and consistent") {
    TempDir tmp;
    SplitMix64 rng(53);
    const fs::path vid = tmp.path / "v000";
    fs::create_directories(vid);
    CHECK_THROWS_AS(data::load_frame_dir(vid, "v000"), DataError);   // empty

    data::write_pgm((vid / "frame_000000.pgm").string(), random_image(8, 8, rng));
    data::write_pgm((vid / "frame_000002.pgm").string(), random_image(8, 8, rng));
    CHECK_THROWS_AS(data::load_frame_dir(vid, "v000"), DataError);   // gap at 1

    data::write_pgm((vid / "frame_000001.pgm").string(), random_image(4, 4, rng));
    CHECK_THROWS_AS(data::load_frame_dir(vid, "v000"), DataError);   // size change

    data::write_pgm((vid / "frame_000001.pgm").string(), random_image(8, 8, rng));
    data::Clip clip = data::load_frame_dir(vid, "v000");   // no labels.csv: all normal
    CHECK(clip.frames.size() == 3);
    CHECK(clip.labels == std::vector<int>{0, 0, 0});
}

TEST_CASE("label files are validated") {
    TempDir tmp;
    SplitMix64 rng(54);
    const fs::path vid = tmp.path / "v001";
    fs::create_directories(vid);
    for (int i = 0; i < 3; ++i)
        data::write_pgm((vid / data::frame_name(i)).string(), random_image(8, 8, rng));

    auto write_labels = [&](const std::string& body) {
        std::ofstream out(vid / "labels.csv");
        out << body;
    };
    write_labels("wrong_header\n0,0\n");
    CHECK_THROWS_AS(data::load_frame_dir(vid, "v001"), DataError);
    write_labels("frame_index,label\n0,2\n");
    CHECK_THROWS_AS(data::load_frame_dir(vid, "v001"), DataError);
    write_labels("frame_index,label\n7,1\n");
    CHECK_THROWS_AS(data::load_frame_dir(vid, "v001"), DataError);
    write_labels("frame_index,label\n0,0\n1,1\n2,0\n");
    CHECK(data::load_frame_dir(vid, "v001").labels == std::vector<int>{0, 1, 0});
}
