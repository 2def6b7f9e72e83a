#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "unilong/probe.hpp"
#include "unilong/qkio.hpp"
#include "unilong/sequence.hpp"

namespace unilong {

// One entry in the policy zoo. Every variant yields per-layer visibility
// over the history region; turn-level variants also yield a CurationPlan.
struct PolicySpec {
    enum class Variant {
        DenseKv,
        SlidingWindow,
        UniLongGen,
        SingleProbe,
        TokenLevel,
        GroupedToken,
        SemanticOracle,
        TextBlockMatch,
    };

    Variant variant = Variant::UniLongGen;
    int window_n = 4;                          // SlidingWindow
    BlockKind probe_kind = BlockKind::Text;    // SingleProbe
    std::optional<uint32_t> probe_layer;       // SingleProbe (default ell_grd)
    int budget = 4;                            // TokenLevel / GroupedToken,
                                               // in image-equivalents
    int group_size = 8;                        // GroupedToken
    std::map<int, int> oracle_labels;          // SemanticOracle: turn -> rank
    std::optional<int> match_k;                // TextBlockMatch (default k_img)
    std::optional<uint32_t> match_layer;       // TextBlockMatch (default ell_grd)
    std::optional<DiscardSpec> discard;        // overrides RunConfig discard

    void validate() const;
    std::string id() const;
    static PolicySpec from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
};

struct PolicyResult {
    std::optional<CurationPlan> plan; // turn-level variants only
    LayerVisibility visibility;
    DiscardSpec discard;
    std::vector<std::string> warnings;
};

// Dispatch a policy against one probing dump.
PolicyResult build_policy(const PolicySpec& spec, const QkDump& dump,
                          const InterleavedSequence& seq, const RunConfig& cfg);

// Everything in history stays visible at every layer.
LayerVisibility dense_visibility(const InterleavedSequence& seq,
                                 uint32_t layer_count);

// Image turn 1 plus the last n image turns; text of kept turns retained,
// same set at every layer.
CurationPlan sliding_window_plan(const InterleavedSequence& seq, int n,
                                 uint32_t layer_count);

// Ranks turns by one block kind at one layer; keeps {1} + top-k whole
// turns (text + vae) at every layer.
CurationPlan single_probe_plan(const QkDump& dump, const InterleavedSequence& seq,
                               const RunConfig& cfg, BlockKind kind,
                               uint32_t layer, int k);

// Scores each historical vae token against the mean query at ell_syn and
// keeps the best budget*tokens_per_image of them (ties to the lower
// index); text handling matches build_plan.
LayerVisibility token_level_plan(const QkDump& dump, const InterleavedSequence& seq,
                                 const RunConfig& cfg, int budget);

// Same budget, but contiguous groups inside each vae block are scored by
// their mean per-token score and kept whole.
LayerVisibility grouped_token_plan(const QkDump& dump, const InterleavedSequence& seq,
                                   const RunConfig& cfg, int group_size, int budget);

// Keeps {1} + the k turns with the best (lowest) human relevance ranks.
CurationPlan semantic_oracle_plan(const InterleavedSequence& seq,
                                  const std::map<int, int>& labels, int k,
                                  uint32_t ell_syn, uint32_t layer_count);

// Ranks history turns by cosine similarity between mean-pooled text-block
// keys (heads concatenated) and the current turn's text block.
CurationPlan text_block_match_plan(const QkDump& dump, const InterleavedSequence& seq,
                                   int k, uint32_t layer, uint32_t ell_syn,
                                   uint32_t layer_count,
                                   std::vector<std::string>* warnings = nullptr);

// --- discard handling -------------------------------------------------------

struct CompressedBlock {
    Block source_block;
    int rate = 4;
    DiscardSpec::Interp interp = DiscardSpec::Interp::AvgPool;
    uint64_t out_len = 0;             // ceil(len / rate)
    std::vector<float> keys, values;  // out_len x channels
};

// 1-D downsampling along the token axis, independently per channel.
// x is len rows by `channels`, row-major. AvgPool/MaxPool use
// non-overlapping windows of `rate` (tail window may be short); Lerp
// resamples linearly at the centers of ceil(len/rate) equal subintervals
// of [0, len-1].
std::vector<float> downsample_tokens(const float* x, uint64_t len,
                                     std::size_t channels, int rate,
                                     DiscardSpec::Interp interp);

CompressedBlock compress_block(const Block& block, const std::vector<float>& keys,
                               const std::vector<float>& values,
                               std::size_t channels, int rate,
                               DiscardSpec::Interp interp);

} // namespace unilong
