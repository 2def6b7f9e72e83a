#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "unilong/qkio.hpp"
#include "unilong/sequence.hpp"

namespace unilong {

// Mean of the current image's query vectors at one layer, per head.
struct MeanQuery {
    uint32_t source_layer = 0;
    uint32_t heads = 0;
    uint32_t head_dim = 0;
    uint64_t token_count = 0;
    std::vector<double> values; // [head][dim], H*d doubles

    const double* head(uint32_t h) const { return values.data() + h * head_dim; }
};

// Relevance of historical turns at one layer for one block kind.
// `ranking` is descending by score, ties broken by lower turn index.
struct RelevanceReport {
    uint32_t layer = 0;
    BlockKind target_kind = BlockKind::Text;
    std::map<int, double> scores;
    std::vector<int> ranking;

    nlohmann::json to_json() const;
};

// Per-layer visible token sets over the history region [0, history_end).
// Tokens of the current turn are outside a plan's domain and always stay.
struct LayerVisibility {
    uint64_t history_end = 0;
    std::vector<std::vector<uint64_t>> visible; // [layer], sorted unique

    uint32_t layer_count() const { return static_cast<uint32_t>(visible.size()); }
    nlohmann::json to_json() const; // run-length encoded
    static LayerVisibility from_json(const nlohmann::json& j);
};

// Fixed curation outcome: which turns each probe kept and the resulting
// per-layer visibility. Immutable once built; generation consumes the
// same masks at every step.
class CurationPlan {
public:
    CurationPlan(std::set<int> grd_turns, std::set<int> syn_turns,
                 uint32_t ell_syn, LayerVisibility visibility,
                 std::vector<std::string> warnings = {});

    const std::set<int>& grd_turns() const { return grd_turns_; }
    const std::set<int>& syn_turns() const { return syn_turns_; }
    uint32_t ell_syn() const { return ell_syn_; }
    const LayerVisibility& visibility() const { return visibility_; }
    const std::vector<std::string>& warnings() const { return warnings_; }

    nlohmann::json to_json() const;

private:
    std::set<int> grd_turns_;
    std::set<int> syn_turns_;
    uint32_t ell_syn_ = 0;
    LayerVisibility visibility_;
    std::vector<std::string> warnings_;
};

// Mean over the current image's query rows (MeanVae), or the single row
// at the anchor token (SpecialToken; must lie in a Special block).
MeanQuery mean_query(const QkDump& dump, const InterleavedSequence& seq,
                     uint32_t layer, const QueryAnchor& anchor = {});

// Length-normalized head-averaged dot product of a block's keys against
// the mean query:  (1/|B|) sum_u (1/(H*sqrt(d))) sum_h  q.h dot k.u,h
// Accumulation is 64-bit in fixed token-major order.
double relevance_score(const QkDump& dump, const InterleavedSequence& seq,
                       const MeanQuery& mq, const Block& block, uint32_t layer);

// Softmax-first alternative: per head and per current query, softmax over
// every historical key at scale 1/sqrt(d); weights averaged over heads and
// queries; score is the mean per-token weight within the block.
double relevance_score_post_softmax(const QkDump& dump,
                                    const InterleavedSequence& seq,
                                    const Block& block, uint32_t layer);

// Scores all history turns carrying `kind` blocks at `layer`; turns
// lacking the block are skipped and recorded in `warnings` if given.
RelevanceReport score_turns(const QkDump& dump, const InterleavedSequence& seq,
                            BlockKind kind, uint32_t layer, const RunConfig& cfg,
                            std::vector<std::string>* warnings = nullptr);

// Top-k turns by score; ties go to the lower turn index. k >= m keeps all.
std::set<int> select_turns(const RelevanceReport& report, int k);

// Full pipeline: text probe at ell_grd, image probe at ell_syn, turn 1
// force-included in both, layer-split visibility split at ell_syn.
CurationPlan build_plan(const QkDump& dump, const InterleavedSequence& seq,
                        const RunConfig& cfg);

// Layer-split visibility for two turn sets: layers below ell_syn see the
// text tokens of grd_turns, layers at or above it see the vae tokens of
// syn_turns.
LayerVisibility split_visibility(const InterleavedSequence& seq,
                                 const std::set<int>& grd_turns,
                                 const std::set<int>& syn_turns,
                                 uint32_t ell_syn, uint32_t layer_count);

} // namespace unilong
