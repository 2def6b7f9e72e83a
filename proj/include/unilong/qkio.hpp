#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "unilong/common.hpp"

namespace unilong {

// Per-layer query/key tensors captured from a probing forward pass.
//
// .qkd on-disk layout (little-endian, asserted via sentinel):
//   magic    "QKDP"        4 bytes
//   version  u16           currently 1
//   sentinel u32           0x0A0B0C0D
//   L, H, d  u32 each
//   N        u64
//   then per layer: Q block, K block; each N*H*d float32,
//   token-major row-major (token, head, dim).
//
// Values are stored at 32-bit precision; every scoring accumulation
// downstream runs at 64-bit.
struct QkDump {
    uint32_t layers = 0;
    uint32_t heads = 0;
    uint32_t head_dim = 0;
    uint64_t num_tokens = 0;
    std::vector<std::vector<float>> queries; // [layer][token*H*d]
    std::vector<std::vector<float>> keys;

    std::size_t row_stride() const {
        return static_cast<std::size_t>(heads) * head_dim;
    }
    const float* q_row(uint32_t layer, uint64_t token) const {
        return queries[layer].data() + token * row_stride();
    }
    const float* k_row(uint32_t layer, uint64_t token) const {
        return keys[layer].data() + token * row_stride();
    }
    float* q_row(uint32_t layer, uint64_t token) {
        return queries[layer].data() + token * row_stride();
    }
    float* k_row(uint32_t layer, uint64_t token) {
        return keys[layer].data() + token * row_stride();
    }

    void validate() const; // shape consistency + finiteness
};

void write_dump(const QkDump& dump, const std::string& path);
QkDump read_dump(const std::string& path);

// --- run configuration ---------------------------------------------------

struct DiscardSpec {
    enum class Kind { Drop, Compress };
    enum class Interp { AvgPool, MaxPool, Lerp };
    Kind kind = Kind::Drop;
    int rate = 4;
    Interp interp = Interp::AvgPool;

    static DiscardSpec from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
};

struct QueryAnchor {
    enum class Kind { MeanVae, SpecialToken };
    Kind kind = Kind::MeanVae;
    uint64_t index = 0; // SpecialToken only

    static QueryAnchor from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
};

enum class ScoreMode { PreSoftmax, PostSoftmax };

// Strict JSON config: exactly these field names, unknown fields rejected.
struct RunConfig {
    uint32_t ell_grd = 1;
    uint32_t ell_syn = 15;
    int k_grd = 4;
    int k_img = 4;
    nlohmann::json policy = nlohmann::json{{"variant", "unilonggen"}};
    DiscardSpec discard;
    QueryAnchor query_anchor;
    ScoreMode score_mode = ScoreMode::PreSoftmax;
    uint64_t seed = 0;

    void validate() const;
    static RunConfig from_json(const nlohmann::json& j);
    static RunConfig load(const std::string& path);
    nlohmann::json to_json() const;
};

const char* to_string(ScoreMode m);

} // namespace unilong
