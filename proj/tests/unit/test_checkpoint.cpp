#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "mnad/checkpoint.hpp"
#include "mnad/optim.hpp"

using namespace mnad;
using trainer::CheckpointRaw;

namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("mnad_ckpt_test_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter()++));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    static int& counter() {
        static int c = 0;
        return c;
    }
};

model::ModelConfig tiny_cfg() {
    model::ModelConfig cfg = model::desk_reconstruction();
    cfg.frame_h = cfg.frame_w = 16;
    cfg.width_scale = 0.125;
    cfg.mem_items = 4;
    return cfg;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

} // namespace

TEST_CASE("config echo lines compose sorted and parse back") {
    const std::string echo = trainer::compose_echo({{"b", "2"}, {"a", "1"}, {"c", "x=y"}});
    CHECK(echo == "a=1\nb=2\nc=x=y\n");
    auto kv = trainer::parse_echo(echo);
    CHECK(kv.at("a") == "1");
    CHECK(kv.at("c") == "x=y");   // only the first '=' splits
    CHECK_THROWS_AS(trainer::parse_echo("noequals\n"), ConfigError);
    CHECK_THROWS_AS(trainer::parse_echo("=value\n"), ConfigError);
}

TEST_CASE("checkpoints round trip byte for byte") {
    TempDir tmp;
    SplitMix64 rng(71);
    model::Model<double> mdl(tiny_cfg(), rng);
    AdamState<double> opt;
    auto params = mdl.params();
    opt.ensure_slots(params);
    opt.step = 42;
    for (auto& slot : opt.slots)
        for (size_t j = 0; j < slot.m.size(); ++j) {
            slot.m[j] = 0.25 * static_cast<double>(j % 7);
            slot.v[j] = 0.0625;
        }

    const std::string p1 = (tmp.path / "a.bin").string();
    const std::string p2 = (tmp.path / "b.bin").string();
    CheckpointRaw<double> ck = trainer::snapshot(mdl, "task=reconstruction\n", &opt, 123456u);
    trainer::save_checkpoint(p1, ck);
    CheckpointRaw<double> back = trainer::load_checkpoint<double>(p1);
    trainer::save_checkpoint(p2, back);
    CHECK(slurp(p1) == slurp(p2));

    CHECK(back.config_echo == ck.config_echo);
    CHECK(back.rng_state == 123456u);
    CHECK(back.opt_step == 42);
    REQUIRE(back.tensors.size() == ck.tensors.size());
    for (size_t i = 0; i < ck.tensors.size(); ++i) {
        CHECK(back.tensors[i].name == ck.tensors[i].name);
        CHECK(back.tensors[i].shape == ck.tensors[i].shape);
        CHECK(back.tensors[i].data == ck.tensors[i].data);
    }
}

TEST_CASE("restored models reproduce the original forward pass") {
    TempDir tmp;
    SplitMix64 rng(72);
    model::Model<double> mdl(tiny_cfg(), rng);
    const std::string path = (tmp.path / "ck.bin").string();
    trainer::save_checkpoint(path, trainer::snapshot<double>(mdl, "", nullptr, 0));

    SplitMix64 scratch(0);
    model::Model<double> fresh(tiny_cfg(), scratch);
    trainer::restore_model(trainer::load_checkpoint<double>(path), fresh);

    SplitMix64 rx(5);
    Tensor<double> x = Tensor<double>::uniform(Shape{1, 1, 16, 16}, rx, -1.0, 1.0);
    auto f1 = mdl.forward(x, false, false);
    auto f2 = fresh.forward(x, false, false);
    CHECK(f1.output.data() == f2.output.data());
    CHECK(fresh.bank().items.data() == mdl.bank().items.data());
}

TEST_CASE("restore rejects mismatched models") {
    TempDir tmp;
    SplitMix64 rng(73);
    model::Model<double> mdl(tiny_cfg(), rng);
    const std::string path = (tmp.path / "ck.bin").string();
    trainer::save_checkpoint(path, trainer::snapshot<double>(mdl, "", nullptr, 0));
    CheckpointRaw<double> ck = trainer::load_checkpoint<double>(path);

    model::ModelConfig other = tiny_cfg();
    other.mem_items = 6;   // memory.items shape now differs
    SplitMix64 rng2(73);
    model::Model<double> wrong(other, rng2);
    CHECK_THROWS_AS(trainer::restore_model(ck, wrong), ConfigError);

    CheckpointRaw<double> renamed = ck;
    renamed.tensors[0].name = "no.such.tensor";
    SplitMix64 rng3(73);
    model::Model<double> ok(tiny_cfg(), rng3);
    CHECK_THROWS_AS(trainer::restore_model(renamed, ok), ConfigError);

    CheckpointRaw<double> fewer = ck;
    fewer.tensors.pop_back();
    CHECK_THROWS_AS(trainer::restore_model(fewer, ok), ConfigError);
}

TEST_CASE("corrupt checkpoint files fail loudly") {
    TempDir tmp;
    SplitMix64 rng(74);
    model::Model<double> mdl(tiny_cfg(), rng);
    const std::string path = (tmp.path / "ck.bin").string();
    trainer::save_checkpoint(path, trainer::snapshot<double>(mdl, "k=v\n", nullptr, 9));

    // truncation
    const std::string whole = slurp(path);
    {
        std::ofstream out(tmp.path / "trunc.bin", std::ios::binary);
        out << whole.substr(0, whole.size() / 2);
    }
    CHECK_THROWS_AS(trainer::load_checkpoint<double>((tmp.path / "trunc.bin").string()),
                    IoError);

    // trailing bytes
    {
        std::ofstream out(tmp.path / "trail.bin", std::ios::binary);
        out << whole << 'x';
    }
    CHECK_THROWS_AS(trainer::load_checkpoint<double>((tmp.path / "trail.bin").string()),
                    IoError);

    // bad magic
    {
        std::string bad = whole;
        bad[0] = 'X';
        std::ofstream out(tmp.path / "magic.bin", std::ios::binary);
        out << bad;
    }
    CHECK_THROWS_AS(trainer::load_checkpoint<double>((tmp.path / "magic.bin").string()),
                    IoError);

    CHECK_THROWS_AS(trainer::load_checkpoint<double>((tmp.path / "absent.bin").string()),
                    IoError);
}

TEST_CASE("precision is part of the format") {
    TempDir tmp;
    SplitMix64 rng(75);
    model::ModelConfig cfg = tiny_cfg();
    model::Model<float> mdl(cfg, rng);
    const std::string path = (tmp.path / "f32.bin").string();
    trainer::save_checkpoint(path, trainer::snapshot<float>(mdl, "", nullptr, 0));
    CHECK_THROWS_AS(trainer::load_checkpoint<double>(path), ConfigError);
    CHECK_NOTHROW(trainer::load_checkpoint<float>(path));
}

TEST_CASE("optimizer state restores against a matching parameter list") {
    TempDir tmp;
    SplitMix64 rng(76);
    model::Model<double> mdl(tiny_cfg(), rng);
    AdamState<double> opt;
    auto params = mdl.params();
    opt.ensure_slots(params);
    opt.step = 7;
    opt.slots[0].m[0] = 3.5;
    const std::string path = (tmp.path / "opt.bin").string();
    trainer::save_checkpoint(path, trainer::snapshot(mdl, "", &opt, 0));

    CheckpointRaw<double> ck = trainer::load_checkpoint<double>(path);
    AdamState<double> back;
    trainer::restore_optimizer(ck, back, params.size());
    CHECK(back.step == 7);
    CHECK(back.slots[0].m[0] == 3.5);
    CHECK_THROWS_AS(trainer::restore_optimizer(ck, back, params.size() + 1), ConfigError);

    CheckpointRaw<double> noopt = trainer::snapshot<double>(mdl, "", nullptr, 0);
    CHECK_THROWS_AS(trainer::restore_optimizer(noopt, back, params.size()), ConfigError);
}
