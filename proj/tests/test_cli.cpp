#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "test_helpers.hpp"
#include "unilong/qkio.hpp"
#include "unilong/synthlab.hpp"

using namespace unilong;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const char* cli_path() { return UNILONG_CLI_PATH; }
const char* config_dir() { return UNILONG_CONFIG_DIR; }

struct Fixture {
    fs::path work;
    std::string dump, seq, config;

    Fixture() {
        work = fs::temp_directory_path() / "unilong_cli_test";
        fs::remove_all(work);
        fs::create_directories(work);

        SynthConfig cfg;
        cfg.m = 6;
        cfg.tokens_per_image = 16;
        cfg.tokens_per_text = 8;
        cfg.planted_turns = {2, 4};
        cfg.subject_gain = 2.0;
        cfg.layers = 16;
        cfg.heads = 2;
        cfg.head_dim = 8;
        cfg.seed = 99;
        SynthOutput out = generate(cfg);
        dump = (work / "probe.qkd").string();
        seq = (work / "seq.json").string();
        config = (work / "config.json").string();
        write_dump(out.dump, dump);
        std::ofstream(seq) << out.seq.to_json().dump() << "\n";
        std::ofstream(config) << "{}\n"; // defaults: ell_grd=1, ell_syn=15
    }
};

int run(const std::string& args) {
    return std::system((std::string(cli_path()) + " " + args + " >/dev/null 2>/tmp/cli_err.json").c_str());
}

json load(const fs::path& p) {
    std::ifstream is(p);
    REQUIRE(is.is_open());
    json j;
    is >> j;
    return j;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    REQUIRE(is.is_open());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

uint64_t fnv1a(const std::string& data) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : data) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

} // namespace

TEST_CASE("probe emits rankings at both default depths") {
    Fixture fx;
    const fs::path out = fx.work / "probe_out";
    REQUIRE(run("probe --dump " + fx.dump + " --seq " + fx.seq + " --config " +
                fx.config + " --out " + out.string()) == 0);
    json rel = load(out / "relevance.json");
    CHECK(rel.at("grd").at("layer") == 1);
    CHECK(rel.at("grd").at("kind") == "text");
    CHECK(rel.at("syn").at("layer") == 15);
    CHECK(rel.at("syn").at("kind") == "vae");
    CHECK(rel.at("grd").at("ranking").size() == 6);
    CHECK(rel.at("syn").at("ranking").size() == 6);
}

TEST_CASE("manifests let reports be re-hashed to their inputs") {
    Fixture fx;
    const fs::path out = fx.work / "manifest_out";
    REQUIRE(run("plan --dump " + fx.dump + " --seq " + fx.seq + " --config " +
                fx.config + " --out " + out.string()) == 0);
    json manifest = load(out / "run_manifest.json");
    CHECK(manifest.at("command") == "plan");
    CHECK(manifest.at("inputs").size() == 3);
    for (const auto& [name, hash] : manifest.at("outputs").items()) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "fnv1a:%016llx",
                      static_cast<unsigned long long>(fnv1a(slurp(out / name))));
        CHECK(hash.get<std::string>() == buf);
    }
    // the config echo pins the defaults that were applied
    CHECK(manifest.at("config").at("ell_syn") == 15);
}

TEST_CASE("ablate enumerates the shipped variant grid") {
    Fixture fx;
    const fs::path out = fx.work / "ablate_out";
    // the shipped manifest at its shipped settings, just fewer seeds via a copy
    json manifest = load(fs::path(config_dir()) / "table1.json");
    manifest["seeds"] = 1;
    manifest["synth"]["m"] = 8;
    manifest["synth"]["planted_turns"] = {1, 3, 5, 7};
    manifest["synth"]["tokens_per_image"] = 32;
    const std::string small = (fx.work / "table1_small.json").string();
    std::ofstream(small) << manifest.dump();
    REQUIRE(run("ablate --manifest " + small + " --out " + out.string()) == 0);

    const std::string csv = slurp(out / "ablation.csv");
    CHECK(csv.rfind("name,policy,seed,slot", 0) == 0);
    for (const char* row : {"A1,", "A2,", "B1,", "B4,", "C4,", "C7,", "D2,",
                            "D7,", "E,"})
        CHECK(csv.find(std::string("\n") + row) != std::string::npos);
    // one line per (row, seed, image slot)
    const std::size_t lines = std::count(csv.begin(), csv.end(), '\n');
    CHECK(lines == 1 + manifest.at("rows").size() * 8);
}

TEST_CASE("simulate sweeps the three token-rate settings") {
    Fixture fx;
    json sweep{{"experiment", "event_bottleneck"},
               {"synth",
                {{"m", 4},
                 {"tokens_per_text", 4},
                 {"planted_turns", {1}},
                 {"subject_gain", 1.5},
                 {"outlier_prob", 0.03},
                 {"outlier_gain", 6.0},
                 {"seed", 3}}},
               {"tokens_per_image", {16, 32, 64}},
               {"seeds", 2}};
    const std::string cfg = (fx.work / "event_small.json").string();
    std::ofstream(cfg) << sweep.dump();
    const fs::path out = fx.work / "sim_out";
    REQUIRE(run("simulate --config " + cfg + " --out " + out.string()) == 0);
    const std::string csv = slurp(out / "event_bottleneck.csv");
    for (const char* tpi : {",4,16,", ",4,32,", ",4,64,"})
        CHECK(csv.find(tpi) != std::string::npos);
    const std::size_t lines = std::count(csv.begin(), csv.end(), '\n');
    CHECK(lines == 1 + 3 * 2 * 4); // header + settings * seeds * slots
}

TEST_CASE("validation failures exit with code 2 and structured errors") {
    Fixture fx;
    const int rc = run("probe --dump /nonexistent.qkd --seq " + fx.seq +
                       " --config " + fx.config + " --out " +
                       (fx.work / "x").string());
    CHECK(WEXITSTATUS(rc) == 2);
    json err = load("/tmp/cli_err.json");
    CHECK(err.at("error").at("type") == "validation");
}

TEST_CASE("strict config rejection surfaces through the CLI") {
    Fixture fx;
    const std::string bad = (fx.work / "bad.json").string();
    std::ofstream(bad) << R"({"unknown_knob": 1})";
    const int rc = run("probe --dump " + fx.dump + " --seq " + fx.seq +
                       " --config " + bad + " --out " + (fx.work / "y").string());
    CHECK(WEXITSTATUS(rc) == 2);
}

TEST_CASE("output directory falls back to the environment override") {
    Fixture fx;
    const fs::path out = fx.work / "env_out";
    const std::string cmd = "UNILONG_OUT_DIR=" + out.string() + " " + cli_path() +
                            " plan --dump " + fx.dump + " --seq " + fx.seq +
                            " --config " + fx.config + " >/dev/null";
    REQUIRE(std::system(cmd.c_str()) == 0);
    CHECK(fs::exists(out / "plan.json"));
}

TEST_CASE("flag overrides mirror the config fields") {
    Fixture fx;
    const fs::path out = fx.work / "flags_out";
    REQUIRE(run("probe --dump " + fx.dump + " --seq " + fx.seq + " --config " +
                fx.config + " --ell_grd 0 --ell_syn 3 --k_img 2 --out " +
                out.string()) == 0);
    json rel = load(out / "relevance.json");
    CHECK(rel.at("grd").at("layer") == 0);
    CHECK(rel.at("syn").at("layer") == 3);
    json manifest = load(out / "run_manifest.json");
    CHECK(manifest.at("config").at("k_img") == 2);
}
