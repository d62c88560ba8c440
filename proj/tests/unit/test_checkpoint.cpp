#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <random>
#include <sstream>

#include "quietread/checkpoint.hpp"
#include "test_support.hpp"

using namespace quietread;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void spit(const fs::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << s;
}

std::string error_of(const fs::path& dir) {
    try {
        load_checkpoint(dir);
    } catch (const IoError& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST_CASE("save, load, save is byte-identical and forward is unchanged") {
    const auto dir = qtest::scratch_dir("ckpt_roundtrip");
    auto cfg = qtest::tiny_config();
    auto p = init_params<float>(cfg, 1);
    std::mt19937_64 rng{1};
    qtest::jitter(p, rng, 0.1);

    save_checkpoint(dir / "a", p, cfg);
    auto loaded = load_checkpoint(dir / "a");
    CHECK(loaded.config == cfg);
    CHECK(qtest::stores_bitwise_equal(loaded.params, p));
    CHECK_FALSE(loaded.moments.has_value());
    save_checkpoint(dir / "b", loaded.params, loaded.config);
    CHECK(slurp(dir / "a" / "weights.bin") == slurp(dir / "b" / "weights.bin"));
    CHECK(slurp(dir / "a" / "manifest.json") == slurp(dir / "b" / "manifest.json"));

    auto ids = qtest::random_ids(2, 7, 11, rng);
    Tape<float> t1(false), t2(false);
    CHECK(qtest::bitwise_equal(forward(t1, p, cfg, ids).logits, forward(t2, loaded.params, cfg, ids).logits));
}

TEST_CASE("manifest layout") {
    const auto dir = qtest::scratch_dir("ckpt_manifest");
    auto cfg = qtest::tiny_config();
    auto p = init_params<float>(cfg, 2);
    save_checkpoint(dir, p, cfg);
    auto m = nlohmann::json::parse(slurp(dir / "manifest.json"));
    CHECK(m.at("format_version") == kCheckpointFormatVersion);
    CHECK(m.at("config").at("d_model") == 8);
    std::size_t offset = 0;
    for (const auto& [name, t] : p.entries()) {
        const auto& e = m.at("tensors").at(name);
        CHECK(e.at("dtype") == "float32");
        CHECK(e.at("byte_offset").get<std::size_t>() == offset);
        CHECK(e.at("byte_len").get<std::size_t>() == 4 * t.numel());
        CHECK(e.at("shape").get<Shape>() == t.shape());
        offset += 4 * t.numel();
    }
    CHECK(fs::file_size(dir / "weights.bin") == offset);
    // Little-endian float32, row-major: the first token_embedding value.
    const auto bytes = slurp(dir / "weights.bin");
    float first;
    std::memcpy(&first, bytes.data(), 4);
    CHECK(first == p.get("token_embedding").data()[0]);
}

TEST_CASE("optimizer moments round-trip") {
    const auto dir = qtest::scratch_dir("ckpt_moments");
    auto cfg = qtest::tiny_config();
    auto p = init_params<float>(cfg, 3);
    StoreMoments moments;
    for (const auto& [name, t] : p.entries()) {
        MomentState s;
        s.m.assign(t.numel(), 0.25f);
        s.v.assign(t.numel(), 0.5f);
        s.steps = 7;
        moments[name] = s;
    }
    save_checkpoint(dir, p, cfg, &moments);
    auto loaded = load_checkpoint(dir);
    REQUIRE(loaded.moments.has_value());
    CHECK(*loaded.moments == moments);
}

TEST_CASE("corrupt checkpoints name the offending field") {
    const auto dir = qtest::scratch_dir("ckpt_corrupt");
    auto cfg = qtest::tiny_config();
    auto p = init_params<float>(cfg, 4);
    save_checkpoint(dir / "good", p, cfg);
    const auto manifest = slurp(dir / "good" / "manifest.json");
    const auto weights = slurp(dir / "good" / "weights.bin");

    auto fresh = [&](const std::string& name) {
        const auto d = dir / name;
        fs::create_directories(d);
        spit(d / "manifest.json", manifest);
        spit(d / "weights.bin", weights);
        return d;
    };

    SUBCASE("shape") {
        auto d = fresh("shape");
        auto m = nlohmann::ordered_json::parse(manifest);
        m["tensors"]["lm_head.weight"]["shape"] = {8, 12};
        spit(d / "manifest.json", m.dump());
        CHECK(error_of(d).find("lm_head.weight") != std::string::npos);
    }
    SUBCASE("format version") {
        auto d = fresh("version");
        auto m = nlohmann::ordered_json::parse(manifest);
        m["format_version"] = 99;
        spit(d / "manifest.json", m.dump());
        CHECK(error_of(d).find("format_version") != std::string::npos);
    }
    SUBCASE("truncated weights") {
        auto d = fresh("truncated");
        spit(d / "weights.bin", weights.substr(0, weights.size() - 10));
        CHECK(error_of(d).find("truncated") != std::string::npos);
    }
    SUBCASE("missing tensor") {
        auto d = fresh("missing");
        auto m = nlohmann::ordered_json::parse(manifest);
        m["tensors"].erase("final_ln.beta");
        spit(d / "manifest.json", m.dump());
        CHECK_FALSE(error_of(d).empty());
    }
    SUBCASE("missing directory") {
        CHECK_FALSE(error_of(dir / "nope").empty());
    }
}
