#pragma once

#include <cstdint>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "unilong/policy.hpp"
#include "unilong/probe.hpp"
#include "unilong/qkio.hpp"
#include "unilong/sequence.hpp"

namespace unilong {

// Probing dumps carry no V tensor, so cache values are synthesized:
// either copies of the keys or seeded noise. Only the timing kernel
// reads them.
enum class ValueSource { CopyKeys, Seeded };

// Per-layer KV store. Entries are kept sorted by token index; applying a
// plan produces a new cache from which evicted entries are gone for good.
class KvCache {
public:
    struct LayerData {
        std::vector<uint64_t> tokens;   // sorted
        std::vector<float> keys;        // tokens.size() x H*d
        std::vector<float> values;
    };

    KvCache() = default;
    KvCache(uint32_t layers, uint32_t heads, uint32_t head_dim);

    static KvCache from_dump(const QkDump& dump, ValueSource vs,
                             uint64_t value_seed = 0);

    uint32_t layer_count() const { return static_cast<uint32_t>(layers_.size()); }
    uint32_t heads() const { return heads_; }
    uint32_t head_dim() const { return head_dim_; }
    std::size_t row_stride() const {
        return static_cast<std::size_t>(heads_) * head_dim_;
    }
    const LayerData& layer(uint32_t l) const { return layers_.at(l); }
    uint64_t entries(uint32_t l) const { return layers_.at(l).tokens.size(); }
    uint64_t total_entries() const;
    bool holds(uint32_t l, uint64_t token) const;

    // appends one row per layer; token indices must be strictly increasing
    void append_rows(uint64_t first_token, uint64_t len,
                     const std::vector<std::vector<float>>& keys,
                     const std::vector<std::vector<float>>& values);
    // append with explicit token ids (compressed rows use synthetic ids)
    void append_row(uint32_t l, uint64_t token, const float* key, const float* value);

    // new cache holding exactly the visible history rows plus the current
    // turn; used by apply_plan
    KvCache filtered(const LayerVisibility& vis) const;

private:
    uint32_t heads_ = 0;
    uint32_t head_dim_ = 0;
    std::vector<LayerData> layers_;
};

// Layer l of the result holds exactly the plan's visible set over the
// history region; entries at or beyond history_end (the current turn)
// are retained as-is. Referencing an absent token is an error.
KvCache apply_plan(const KvCache& cache, const LayerVisibility& vis);

// Same, but each fully-evicted historical vae block is downsampled and
// appended after the kept entries (synthetic token ids beyond the
// sequence mark compressed rows; source order is preserved).
KvCache apply_plan_compressed(const KvCache& cache, const LayerVisibility& vis,
                              const InterleavedSequence& seq, int rate,
                              DiscardSpec::Interp interp);

// --- guidance bookkeeping ----------------------------------------------------

// Per-block KV rows used to feed a TriContext.
struct KvSlice {
    uint64_t len = 0;
    std::vector<std::vector<float>> keys;   // [layer][len*H*d]
    std::vector<std::vector<float>> values;

    static KvSlice zeros(uint32_t layers, uint32_t heads, uint32_t head_dim,
                         uint64_t len);
    static KvSlice from_dump(const QkDump& dump, const Block& block,
                             ValueSource vs, uint64_t value_seed = 0);
};

// Three cache contexts for classifier-free guidance bookkeeping:
//  - full: everything ingested so far
//  - text_cfg: snapshot of full taken before the most recent text segment
//  - img_cfg: text inputs only; image tokens never enter it
class TriContext {
public:
    TriContext(uint32_t layers, uint32_t heads, uint32_t head_dim);

    void ingest_text(const Block& block, const KvSlice& data);
    void ingest_image(const Block& block, const KvSlice& data);

    const KvCache& full() const { return full_; }
    const KvCache& text_cfg() const { return text_cfg_; }
    const KvCache& img_cfg() const { return img_cfg_; }

private:
    KvCache full_, text_cfg_, img_cfg_;
    uint64_t next_token_ = 0;
};

// Guidance parameters are carried through configs and echoed in reports;
// the guidance combination itself is not computed here.
struct GuidanceParams {
    double cfg_text_scale = 4.0;
    double cfg_img_scale = 1.5;
    double cfg_interval_lo = 0.4;
    double cfg_interval_hi = 1.0;
    int num_timesteps = 50;
    double timestep_shift = 3.0;

    nlohmann::json to_json() const;
};

// --- cost model ---------------------------------------------------------------

struct CostModel {
    double visible_kv_fraction = 0.0; // visible entries / (layers * history_tokens)
    uint64_t attention_flops = 0;     // 4 * H * d * visible * current, summed
                                      // over layers (softmax exp not counted)
    double wall_clock_ms = 0.0;       // median over `repeats`, warm-up discarded
};

// Runs the scaled-dot-product attention kernel of `current_len` synthetic
// queries over every layer of the cache, single-threaded.
CostModel attention_cost(const KvCache& cache, uint64_t current_len, int repeats,
                         uint64_t history_tokens, uint64_t query_seed = 1);

} // namespace unilong
