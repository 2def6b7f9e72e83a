#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "unilong/qkio.hpp"
#include "unilong/sequence.hpp"

namespace unilong {

// One attention matrix: current-token rows over context-token columns.
// Rows are probability distributions. `cols` maps each column back to a
// global token index so columns can be classified by kind/turn.
struct AttentionSlice {
    uint32_t layer = 0;
    int head = -1; // -1 means head-averaged
    uint32_t step = 0;
    uint64_t rows = 0;
    std::vector<uint64_t> cols;
    std::vector<double> weights; // rows * cols.size(), row-major

    double at(uint64_t r, std::size_t c) const {
        return weights[r * cols.size() + c];
    }
    void validate(double tol = 1e-6) const;

    // Head-averaged post-softmax attention of the current image's queries
    // over the given context tokens, at scale 1/sqrt(d).
    static AttentionSlice from_dump(const QkDump& dump,
                                    const InterleavedSequence& seq,
                                    uint32_t layer,
                                    const std::vector<uint64_t>& context_cols);
};

// Mean over rows of -sum a*ln(a), with 0*ln(0) = 0. `normalized` divides
// by ln(#cols).
double attention_entropy(const AttentionSlice& slice, bool normalized = false);

struct CoverageGini {
    std::vector<double> percents;
    std::vector<double> coverage; // cumulative mass captured by top-p% tokens
    double gini = 0.0;
};

// Row-wise coverage of the top-p% heaviest tokens (fractional token counts
// so the uniform distribution maps p% -> p/100 exactly) and the Gini
// coefficient of the weights; both averaged over rows.
CoverageGini coverage_and_gini(const AttentionSlice& slice,
                               const std::vector<double>& percents);

// Mass on the reference turn's vae tokens relative to all historical-image
// mass. Empty when there is no historical-image mass at all.
std::optional<double> key_reference_mass(const AttentionSlice& slice,
                                         const InterleavedSequence& seq,
                                         int reference_turn);

struct ModalityRatios {
    double text = 0.0, vit = 0.0, vae = 0.0, special = 0.0;
    double operator[](BlockKind k) const;
};

// Column mass grouped by block kind, normalized to sum 1.
ModalityRatios modality_ratios(const AttentionSlice& slice,
                               const InterleavedSequence& seq);

struct StepSplit {
    uint32_t step = 0;
    double history = 0.0;
    double current = 0.0;
};

// Fraction of attention mass on history vs current-turn columns, per step.
std::vector<StepSplit> hist_vs_current(const std::vector<AttentionSlice>& slices,
                                       const InterleavedSequence& seq);

struct ClusterResult {
    std::vector<int> assignment;              // per layer, 1..k, ordered by
                                              // the lowest layer in each cluster
    std::vector<std::pair<int, int>> merges;  // lowest members of merged pair
    double contiguity = 0.0;                  // adjacent same-cluster fraction
};

// Agglomerative clustering with the Ward increment on z-scored features;
// exact ties resolved toward the pair with the lowest layer indices.
ClusterResult layer_cluster(const std::vector<std::array<double, 6>>& features,
                            int k = 5);

// The six per-layer attention features used for clustering: modality ratios
// (text, vit, vae, special), normalized entropy, top-10% coverage.
std::array<double, 6> layer_feature_vector(const AttentionSlice& slice,
                                           const InterleavedSequence& seq);

// Pearson correlation between per-layer text and vae ratios. Empty when
// either series has zero variance.
std::optional<double> text_vae_correlation(const std::vector<ModalityRatios>& ratios);

// Aggregated diagnostics over one dump: entropy growth over turn-count
// prefixes, per-layer concentration and modality structure, functional
// layer clusters, and optionally the reference-mass share.
struct DiagnosticsReport {
    struct EntropyPoint {
        uint32_t layer = 0;
        int turns_in_context = 0;
        uint64_t context_tokens = 0;
        double entropy = 0.0;
        double normalized = 0.0;
    };
    std::vector<EntropyPoint> entropy_by_context_len;
    std::vector<double> coverage_percents;
    std::vector<std::vector<double>> coverage_by_layer; // [layer][percent]
    std::vector<double> gini_by_layer;
    std::vector<ModalityRatios> modality_by_layer;
    std::vector<std::optional<double>> key_reference_by_layer; // when requested
    std::vector<StepSplit> hist_current;
    std::vector<int> cluster_assignments; // empty when layers < 5
    double cluster_contiguity = 0.0;
    std::optional<double> text_vae_r;

    nlohmann::json to_json() const;
};

DiagnosticsReport build_report(const QkDump& dump, const InterleavedSequence& seq,
                               const std::vector<double>& percents,
                               std::optional<int> reference_turn = std::nullopt);

} // namespace unilong
