#include "unilong/qkio.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

namespace unilong {

namespace {

constexpr char kMagic[4] = {'Q', 'K', 'D', 'P'};
constexpr uint16_t kVersion = 1;
constexpr uint32_t kSentinel = 0x0A0B0C0Du;

void put_bytes(std::ostream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void get_bytes(std::istream& is, void* p, std::size_t n, uint64_t offset,
               const char* what) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is.gcount()) != n) {
        throw ValidationError(std::string("corruption: truncated while reading ") +
                              what + " at byte offset " + std::to_string(offset));
    }
}

void check_finite(const std::vector<float>& v, const char* what) {
    for (float x : v) {
        if (!std::isfinite(x))
            throw ValidationError(std::string("validation: non-finite value in ") + what);
    }
}

} // namespace

void QkDump::validate() const {
    require(layers > 0 && heads > 0 && head_dim > 0, "dump dimensions must be positive");
    require(num_tokens > 0, "dump must contain at least one token");
    const std::size_t expect = static_cast<std::size_t>(num_tokens) * row_stride();
    require(queries.size() == layers && keys.size() == layers,
            "dump layer count mismatch");
    for (uint32_t l = 0; l < layers; ++l) {
        require(queries[l].size() == expect && keys[l].size() == expect,
                "dump tensor shape mismatch at layer " + std::to_string(l));
        check_finite(queries[l], "queries");
        check_finite(keys[l], "keys");
    }
}

void write_dump(const QkDump& dump, const std::string& path) {
    dump.validate();
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    require(os.is_open(), "cannot open for writing: " + path);
    put_bytes(os, kMagic, 4);
    put_bytes(os, &kVersion, sizeof(kVersion));
    put_bytes(os, &kSentinel, sizeof(kSentinel));
    put_bytes(os, &dump.layers, sizeof(dump.layers));
    put_bytes(os, &dump.heads, sizeof(dump.heads));
    put_bytes(os, &dump.head_dim, sizeof(dump.head_dim));
    put_bytes(os, &dump.num_tokens, sizeof(dump.num_tokens));
    for (uint32_t l = 0; l < dump.layers; ++l) {
        put_bytes(os, dump.queries[l].data(), dump.queries[l].size() * sizeof(float));
        put_bytes(os, dump.keys[l].data(), dump.keys[l].size() * sizeof(float));
    }
    require(os.good(), "write failed: " + path);
}

QkDump read_dump(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(is.is_open(), "cannot open: " + path);

    char magic[4];
    get_bytes(is, magic, 4, 0, "magic");
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw ValidationError("format error: bad magic in " + path);

    uint16_t version = 0;
    get_bytes(is, &version, sizeof(version), 4, "version");
    if (version != kVersion)
        throw ValidationError("format error: unsupported version " +
                              std::to_string(version));

    uint32_t sentinel = 0;
    get_bytes(is, &sentinel, sizeof(sentinel), 6, "sentinel");
    if (sentinel != kSentinel)
        throw ValidationError("format error: endianness sentinel mismatch");

    QkDump dump;
    uint64_t off = 10;
    get_bytes(is, &dump.layers, 4, off, "layer count"); off += 4;
    get_bytes(is, &dump.heads, 4, off, "head count"); off += 4;
    get_bytes(is, &dump.head_dim, 4, off, "head dim"); off += 4;
    get_bytes(is, &dump.num_tokens, 8, off, "token count"); off += 8;

    require(dump.layers > 0 && dump.heads > 0 && dump.head_dim > 0,
            "format error: zero dimension in header");
    require(dump.num_tokens > 0, "format error: num_tokens=0 in header");

    const std::size_t n = static_cast<std::size_t>(dump.num_tokens) * dump.row_stride();
    dump.queries.resize(dump.layers);
    dump.keys.resize(dump.layers);
    for (uint32_t l = 0; l < dump.layers; ++l) {
        dump.queries[l].resize(n);
        get_bytes(is, dump.queries[l].data(), n * sizeof(float), off, "Q tensor");
        off += n * sizeof(float);
        dump.keys[l].resize(n);
        get_bytes(is, dump.keys[l].data(), n * sizeof(float), off, "K tensor");
        off += n * sizeof(float);
    }
    // trailing bytes mean the header lied about the shape
    char extra;
    is.read(&extra, 1);
    if (is.gcount() != 0)
        throw ValidationError("corruption: trailing bytes after tensors (shape mismatch)");
    dump.validate();
    return dump;
}

// --- config ---------------------------------------------------------------

const char* to_string(ScoreMode m) {
    return m == ScoreMode::PreSoftmax ? "pre_softmax" : "post_softmax";
}

DiscardSpec DiscardSpec::from_json(const nlohmann::json& j) {
    require(j.is_object() && j.contains("kind"), "discard needs a kind");
    DiscardSpec d;
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "drop") {
        for (auto it = j.begin(); it != j.end(); ++it)
            require(it.key() == "kind", "unknown discard field: " + it.key());
        d.kind = Kind::Drop;
        return d;
    }
    require(kind == "compress", "unknown discard kind: " + kind);
    d.kind = Kind::Compress;
    for (auto it = j.begin(); it != j.end(); ++it)
        require(it.key() == "kind" || it.key() == "rate" || it.key() == "interp",
                "unknown discard field: " + it.key());
    d.rate = j.at("rate").get<int>();
    const std::string interp = j.at("interp").get<std::string>();
    if (interp == "avgpool") d.interp = Interp::AvgPool;
    else if (interp == "maxpool") d.interp = Interp::MaxPool;
    else if (interp == "lerp") d.interp = Interp::Lerp;
    else throw ValidationError("unknown interp: " + interp);
    return d;
}

nlohmann::json DiscardSpec::to_json() const {
    if (kind == Kind::Drop) return {{"kind", "drop"}};
    const char* i = interp == Interp::AvgPool ? "avgpool"
                  : interp == Interp::MaxPool ? "maxpool" : "lerp";
    return {{"kind", "compress"}, {"rate", rate}, {"interp", i}};
}

QueryAnchor QueryAnchor::from_json(const nlohmann::json& j) {
    require(j.is_object() && j.contains("kind"), "query_anchor needs a kind");
    QueryAnchor a;
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "mean_vae") {
        for (auto it = j.begin(); it != j.end(); ++it)
            require(it.key() == "kind", "unknown query_anchor field: " + it.key());
        a.kind = Kind::MeanVae;
        return a;
    }
    require(kind == "special_token", "unknown query_anchor kind: " + kind);
    for (auto it = j.begin(); it != j.end(); ++it)
        require(it.key() == "kind" || it.key() == "index",
                "unknown query_anchor field: " + it.key());
    a.kind = Kind::SpecialToken;
    a.index = j.at("index").get<uint64_t>();
    return a;
}

nlohmann::json QueryAnchor::to_json() const {
    if (kind == Kind::MeanVae) return {{"kind", "mean_vae"}};
    return {{"kind", "special_token"}, {"index", index}};
}

void RunConfig::validate() const {
    require(ell_grd < ell_syn, "ell_grd must be below ell_syn");
    require(k_grd >= 1 && k_img >= 1, "k budgets must be >= 1");
    if (discard.kind == DiscardSpec::Kind::Compress)
        require(discard.rate == 4 || discard.rate == 8 || discard.rate == 16,
                "compress rate must be one of 4, 8, 16");
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
    require(j.is_object(), "config must be a JSON object");
    static const std::set<std::string> known = {
        "ell_grd", "ell_syn", "k_grd", "k_img", "policy",
        "discard", "query_anchor", "score_mode", "seed"};
    for (auto it = j.begin(); it != j.end(); ++it)
        require(known.count(it.key()) > 0, "unknown config field: " + it.key());

    RunConfig c;
    if (j.contains("ell_grd")) c.ell_grd = j.at("ell_grd").get<uint32_t>();
    if (j.contains("ell_syn")) c.ell_syn = j.at("ell_syn").get<uint32_t>();
    if (j.contains("k_grd")) c.k_grd = j.at("k_grd").get<int>();
    if (j.contains("k_img")) c.k_img = j.at("k_img").get<int>();
    if (j.contains("policy")) c.policy = j.at("policy");
    if (j.contains("discard")) c.discard = DiscardSpec::from_json(j.at("discard"));
    if (j.contains("query_anchor"))
        c.query_anchor = QueryAnchor::from_json(j.at("query_anchor"));
    if (j.contains("score_mode")) {
        const std::string m = j.at("score_mode").get<std::string>();
        if (m == "pre_softmax") c.score_mode = ScoreMode::PreSoftmax;
        else if (m == "post_softmax") c.score_mode = ScoreMode::PostSoftmax;
        else throw ValidationError("unknown score_mode: " + m);
    }
    if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
    c.validate();
    return c;
}

RunConfig RunConfig::load(const std::string& path) {
    std::ifstream is(path);
    require(is.is_open(), "cannot open config: " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("config parse error in " + path + ": " + e.what());
    }
    return from_json(j);
}

nlohmann::json RunConfig::to_json() const {
    return {{"ell_grd", ell_grd},
            {"ell_syn", ell_syn},
            {"k_grd", k_grd},
            {"k_img", k_img},
            {"policy", policy},
            {"discard", discard.to_json()},
            {"query_anchor", query_anchor.to_json()},
            {"score_mode", to_string(score_mode)},
            {"seed", seed}};
}

} // namespace unilong
