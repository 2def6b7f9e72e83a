#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "test_helpers.hpp"
#include "unilong/qkio.hpp"

using namespace unilong;
using testutil::random_dump;

namespace {

std::string tmp_path(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), {});
}

void spit(const std::string& path, const std::string& bytes) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    os << bytes;
}

} // namespace

TEST_CASE("dump round trip is bit-identical") {
    QkDump d = random_dump(2, 4, 16, 64, 42);
    const std::string p1 = tmp_path("rt1.qkd"), p2 = tmp_path("rt2.qkd");
    write_dump(d, p1);
    QkDump back = read_dump(p1);
    CHECK(back.layers == d.layers);
    CHECK(back.num_tokens == d.num_tokens);
    for (uint32_t l = 0; l < d.layers; ++l) {
        CHECK(back.queries[l] == d.queries[l]);
        CHECK(back.keys[l] == d.keys[l]);
    }
    write_dump(back, p2);
    CHECK(slurp(p1) == slurp(p2)); // serialization is deterministic
}

TEST_CASE("zero token count is rejected") {
    QkDump d = random_dump(1, 1, 4, 4, 7);
    d.num_tokens = 0;
    d.queries[0].clear();
    d.keys[0].clear();
    CHECK_THROWS_AS(write_dump(d, tmp_path("zero.qkd")), ValidationError);

    // and a crafted header: N lives at bytes 22..29
    QkDump ok = random_dump(1, 1, 4, 4, 7);
    const std::string p = tmp_path("zero2.qkd");
    write_dump(ok, p);
    std::string bytes = slurp(p);
    for (int i = 0; i < 8; ++i) bytes[22 + i] = 0;
    spit(p, bytes);
    CHECK_THROWS_WITH_AS(read_dump(p), doctest::Contains("num_tokens"),
                         ValidationError);
}

TEST_CASE("truncation reports the byte offset") {
    QkDump d = random_dump(2, 2, 8, 16, 3);
    const std::string p = tmp_path("trunc.qkd");
    write_dump(d, p);
    std::string bytes = slurp(p);
    spit(p, bytes.substr(0, bytes.size() / 2)); // cut inside a tensor
    CHECK_THROWS_WITH_AS(read_dump(p), doctest::Contains("offset"), ValidationError);
}

TEST_CASE("non-finite values are rejected") {
    QkDump d = random_dump(1, 2, 4, 8, 5);
    d.keys[0][3] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(write_dump(d, tmp_path("nan.qkd")), ValidationError);

    QkDump ok = random_dump(1, 2, 4, 8, 5);
    const std::string p = tmp_path("nan2.qkd");
    write_dump(ok, p);
    std::string bytes = slurp(p);
    const uint32_t nan_bits = 0x7FC00000u;
    std::memcpy(&bytes[30], &nan_bits, 4); // first float after the header
    spit(p, bytes);
    CHECK_THROWS_AS(read_dump(p), ValidationError);
}

TEST_CASE("magic and sentinel are asserted") {
    QkDump d = random_dump(1, 1, 4, 4, 9);
    const std::string p = tmp_path("hdr.qkd");
    write_dump(d, p);
    std::string bytes = slurp(p);

    std::string bad_magic = bytes;
    bad_magic[0] = 'X';
    spit(p, bad_magic);
    CHECK_THROWS_WITH_AS(read_dump(p), doctest::Contains("magic"), ValidationError);

    std::string bad_sentinel = bytes;
    bad_sentinel[6] ^= 0xFF;
    spit(p, bad_sentinel);
    CHECK_THROWS_WITH_AS(read_dump(p), doctest::Contains("sentinel"),
                         ValidationError);
}

TEST_CASE("trailing bytes mean the header lied") {
    QkDump d = random_dump(1, 1, 4, 4, 9);
    const std::string p = tmp_path("trail.qkd");
    write_dump(d, p);
    spit(p, slurp(p) + "xx");
    CHECK_THROWS_WITH_AS(read_dump(p), doctest::Contains("shape"), ValidationError);
}

TEST_CASE("config defaults and strictness") {
    RunConfig cfg = RunConfig::from_json(nlohmann::json::object());
    CHECK(cfg.ell_grd == 1);
    CHECK(cfg.ell_syn == 15);
    CHECK(cfg.k_img == 4);
    CHECK(cfg.score_mode == ScoreMode::PreSoftmax);
    CHECK(cfg.query_anchor.kind == QueryAnchor::Kind::MeanVae);

    CHECK_THROWS_WITH_AS(RunConfig::from_json({{"elll_grd", 1}}),
                         doctest::Contains("unknown config field"), ValidationError);
    CHECK_THROWS_AS(RunConfig::from_json({{"ell_grd", 15}, {"ell_syn", 15}}),
                    ValidationError);
    CHECK_THROWS_AS(RunConfig::from_json({{"k_img", 0}}), ValidationError);
    CHECK_THROWS_AS(
        RunConfig::from_json(
            {{"discard",
              {{"kind", "compress"}, {"rate", 5}, {"interp", "avgpool"}}}}),
        ValidationError);
    CHECK_THROWS_AS(
        RunConfig::from_json({{"discard", {{"kind", "drop"}, {"rate", 4}}}}),
        ValidationError); // unknown field for drop
}

TEST_CASE("config round trip") {
    nlohmann::json j{{"ell_grd", 0},
                     {"ell_syn", 1},
                     {"k_grd", 2},
                     {"k_img", 3},
                     {"policy", {{"variant", "sliding_window"}, {"n", 4}}},
                     {"discard",
                      {{"kind", "compress"}, {"rate", 8}, {"interp", "lerp"}}},
                     {"query_anchor", {{"kind", "special_token"}, {"index", 17}}},
                     {"score_mode", "post_softmax"},
                     {"seed", 99}};
    RunConfig cfg = RunConfig::from_json(j);
    CHECK(RunConfig::from_json(cfg.to_json()).to_json() == cfg.to_json());
    CHECK(cfg.query_anchor.index == 17);
    CHECK(cfg.discard.rate == 8);
}
