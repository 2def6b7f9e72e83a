#include "unilong/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <nlohmann/json.hpp>

namespace unilong {

void AttentionSlice::validate(double tol) const {
    require(!cols.empty() && rows > 0, "empty attention slice");
    require(weights.size() == rows * cols.size(), "slice shape mismatch");
    for (uint64_t r = 0; r < rows; ++r) {
        double sum = 0.0;
        for (std::size_t c = 0; c < cols.size(); ++c) {
            double w = at(r, c);
            require(w >= 0.0, "negative attention weight");
            sum += w;
        }
        require(std::abs(sum - 1.0) <= tol,
                "attention row " + std::to_string(r) + " sums to " +
                    std::to_string(sum));
    }
}

AttentionSlice AttentionSlice::from_dump(const QkDump& dump,
                                         const InterleavedSequence& seq,
                                         uint32_t layer,
                                         const std::vector<uint64_t>& context_cols) {
    require(layer < dump.layers, "layer not in dump");
    require(!context_cols.empty(), "attention slice needs context columns");
    const Block& cur = seq.current_vae();
    const uint32_t H = dump.heads, d = dump.head_dim;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));

    AttentionSlice s;
    s.layer = layer;
    s.head = -1;
    s.rows = cur.len;
    s.cols = context_cols;
    s.weights.assign(static_cast<std::size_t>(cur.len) * context_cols.size(), 0.0);

    std::vector<double> logits(context_cols.size());
    for (uint64_t v = 0; v < cur.len; ++v) {
        double* out = s.weights.data() + v * context_cols.size();
        for (uint32_t h = 0; h < H; ++h) {
            const float* q =
                dump.q_row(layer, cur.start + v) + static_cast<std::size_t>(h) * d;
            double maxlog = -std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < context_cols.size(); ++c) {
                const float* k =
                    dump.k_row(layer, context_cols[c]) + static_cast<std::size_t>(h) * d;
                double dot = 0.0;
                for (uint32_t i = 0; i < d; ++i)
                    dot += static_cast<double>(q[i]) * static_cast<double>(k[i]);
                logits[c] = dot * scale;
                maxlog = std::max(maxlog, logits[c]);
            }
            double z = 0.0;
            for (double& l : logits) { l = std::exp(l - maxlog); z += l; }
            for (std::size_t c = 0; c < context_cols.size(); ++c)
                out[c] += logits[c] / (z * H);
        }
    }
    return s;
}

double attention_entropy(const AttentionSlice& slice, bool normalized) {
    slice.validate(1e-4);
    double total = 0.0;
    for (uint64_t r = 0; r < slice.rows; ++r) {
        double h = 0.0;
        for (std::size_t c = 0; c < slice.cols.size(); ++c) {
            double a = slice.at(r, c);
            if (a > 0.0) h -= a * std::log(a);
        }
        total += h;
    }
    double mean = total / static_cast<double>(slice.rows);
    if (normalized) {
        double hmax = std::log(static_cast<double>(slice.cols.size()));
        mean = hmax > 0.0 ? mean / hmax : 0.0;
    }
    return mean;
}

namespace {

// coverage of the top-(p%) tokens with fractional interpolation at the
// boundary, so uniform weights give exactly p/100
double row_coverage(const std::vector<double>& sorted_desc, double percent) {
    const double n = static_cast<double>(sorted_desc.size());
    double want = n * percent / 100.0;
    if (want >= n) want = n;
    const std::size_t whole = static_cast<std::size_t>(want);
    double cov = 0.0;
    for (std::size_t i = 0; i < whole; ++i) cov += sorted_desc[i];
    const double frac = want - static_cast<double>(whole);
    if (frac > 0.0 && whole < sorted_desc.size()) cov += frac * sorted_desc[whole];
    return cov;
}

double row_gini(std::vector<double> w) {
    const std::size_t n = w.size();
    if (n < 2) return 0.0;
    std::sort(w.begin(), w.end());
    double sum = std::accumulate(w.begin(), w.end(), 0.0);
    if (sum <= 0.0) return 0.0;
    double weighted = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        weighted += static_cast<double>(i + 1) * w[i];
    return 2.0 * weighted / (static_cast<double>(n) * sum) -
           (static_cast<double>(n) + 1.0) / static_cast<double>(n);
}

} // namespace

CoverageGini coverage_and_gini(const AttentionSlice& slice,
                               const std::vector<double>& percents) {
    slice.validate(1e-4);
    for (double p : percents)
        require(p > 0.0 && p <= 100.0, "percents must lie in (0, 100]");

    CoverageGini out;
    out.percents = percents;
    out.coverage.assign(percents.size(), 0.0);
    double gini_sum = 0.0;
    std::vector<double> row(slice.cols.size());
    for (uint64_t r = 0; r < slice.rows; ++r) {
        for (std::size_t c = 0; c < slice.cols.size(); ++c) row[c] = slice.at(r, c);
        gini_sum += row_gini(row);
        std::sort(row.begin(), row.end(), std::greater<>());
        for (std::size_t i = 0; i < percents.size(); ++i)
            out.coverage[i] += row_coverage(row, percents[i]);
    }
    for (double& c : out.coverage) c /= static_cast<double>(slice.rows);
    out.gini = gini_sum / static_cast<double>(slice.rows);
    return out;
}

std::optional<double> key_reference_mass(const AttentionSlice& slice,
                                         const InterleavedSequence& seq,
                                         int reference_turn) {
    const Turn& ref = seq.turn(reference_turn);
    require(ref.vae.has_value(),
            "reference turn " + std::to_string(reference_turn) + " has no vae block");
    const uint64_t hist_end = seq.history_end();

    double ref_mass = 0.0, img_mass = 0.0;
    for (std::size_t c = 0; c < slice.cols.size(); ++c) {
        const uint64_t tok = slice.cols[c];
        if (tok >= hist_end || seq.kind_of(tok) != BlockKind::Vae) continue;
        double col = 0.0;
        for (uint64_t r = 0; r < slice.rows; ++r) col += slice.at(r, c);
        img_mass += col;
        if (ref.vae->contains(tok)) ref_mass += col;
    }
    if (img_mass <= 0.0) return std::nullopt;
    return ref_mass / img_mass;
}

double ModalityRatios::operator[](BlockKind k) const {
    switch (k) {
        case BlockKind::Text: return text;
        case BlockKind::Vit: return vit;
        case BlockKind::Vae: return vae;
        case BlockKind::Special: return special;
    }
    return 0.0;
}

ModalityRatios modality_ratios(const AttentionSlice& slice,
                               const InterleavedSequence& seq) {
    ModalityRatios out;
    double total = 0.0;
    for (std::size_t c = 0; c < slice.cols.size(); ++c) {
        double col = 0.0;
        for (uint64_t r = 0; r < slice.rows; ++r) col += slice.at(r, c);
        switch (seq.kind_of(slice.cols[c])) {
            case BlockKind::Text: out.text += col; break;
            case BlockKind::Vit: out.vit += col; break;
            case BlockKind::Vae: out.vae += col; break;
            case BlockKind::Special: out.special += col; break;
        }
        total += col;
    }
    require(total > 0.0, "slice carries no mass");
    out.text /= total;
    out.vit /= total;
    out.vae /= total;
    out.special /= total;
    return out;
}

std::vector<StepSplit> hist_vs_current(const std::vector<AttentionSlice>& slices,
                                       const InterleavedSequence& seq) {
    const uint64_t hist_end = seq.history_end();
    std::vector<StepSplit> out;
    for (const AttentionSlice& s : slices) {
        StepSplit sp;
        sp.step = s.step;
        double total = 0.0;
        for (std::size_t c = 0; c < s.cols.size(); ++c) {
            double col = 0.0;
            for (uint64_t r = 0; r < s.rows; ++r) col += s.at(r, c);
            (s.cols[c] < hist_end ? sp.history : sp.current) += col;
            total += col;
        }
        require(total > 0.0, "slice carries no mass");
        sp.history /= total;
        sp.current /= total;
        out.push_back(sp);
    }
    return out;
}

std::array<double, 6> layer_feature_vector(const AttentionSlice& slice,
                                           const InterleavedSequence& seq) {
    ModalityRatios r = modality_ratios(slice, seq);
    CoverageGini cg = coverage_and_gini(slice, {10.0});
    return {r.text, r.vit, r.vae, r.special,
            attention_entropy(slice, /*normalized=*/true), cg.coverage[0]};
}

ClusterResult layer_cluster(const std::vector<std::array<double, 6>>& features,
                            int k) {
    const int n = static_cast<int>(features.size());
    require(k >= 1, "cluster count must be >= 1");
    require(n >= k, "need at least " + std::to_string(k) + " layers, got " +
                        std::to_string(n));

    // z-score each feature; constant features contribute nothing
    std::vector<std::array<double, 6>> z(features.size());
    for (std::size_t f = 0; f < 6; ++f) {
        double mean = 0.0;
        for (const auto& row : features) mean += row[f];
        mean /= n;
        double var = 0.0;
        for (const auto& row : features) var += (row[f] - mean) * (row[f] - mean);
        double sd = std::sqrt(var / n);
        for (int i = 0; i < n; ++i)
            z[static_cast<std::size_t>(i)][f] =
                sd > 1e-12 ? (features[static_cast<std::size_t>(i)][f] - mean) / sd : 0.0;
    }

    struct Cluster {
        std::vector<int> members; // sorted, members.front() is the id anchor
        std::array<double, 6> centroid{};
        bool active = true;
    };
    std::vector<Cluster> clusters(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        clusters[static_cast<std::size_t>(i)].members = {i};
        clusters[static_cast<std::size_t>(i)].centroid = z[static_cast<std::size_t>(i)];
    }

    auto ward_delta = [](const Cluster& a, const Cluster& b) {
        double d2 = 0.0;
        for (std::size_t f = 0; f < 6; ++f) {
            double diff = a.centroid[f] - b.centroid[f];
            d2 += diff * diff;
        }
        const double na = static_cast<double>(a.members.size());
        const double nb = static_cast<double>(b.members.size());
        return na * nb / (na + nb) * d2;
    };

    ClusterResult res;
    int active = n;
    while (active > k) {
        // scan in ascending anchor order; strict < keeps the first minimal
        // pair, which resolves exact ties toward the lowest layer indices
        int best_a = -1, best_b = -1;
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < clusters.size(); ++i) {
            if (!clusters[i].active) continue;
            for (std::size_t j = i + 1; j < clusters.size(); ++j) {
                if (!clusters[j].active) continue;
                double delta = ward_delta(clusters[i], clusters[j]);
                if (delta < best) {
                    best = delta;
                    best_a = static_cast<int>(i);
                    best_b = static_cast<int>(j);
                }
            }
        }
        Cluster& a = clusters[static_cast<std::size_t>(best_a)];
        Cluster& b = clusters[static_cast<std::size_t>(best_b)];
        res.merges.emplace_back(a.members.front(), b.members.front());
        const double na = static_cast<double>(a.members.size());
        const double nb = static_cast<double>(b.members.size());
        for (std::size_t f = 0; f < 6; ++f)
            a.centroid[f] = (na * a.centroid[f] + nb * b.centroid[f]) / (na + nb);
        a.members.insert(a.members.end(), b.members.begin(), b.members.end());
        std::sort(a.members.begin(), a.members.end());
        b.active = false;
        --active;
    }

    // cluster ids 1..k in order of lowest member layer
    std::vector<const Cluster*> final_clusters;
    for (const Cluster& c : clusters)
        if (c.active) final_clusters.push_back(&c);
    std::sort(final_clusters.begin(), final_clusters.end(),
              [](const Cluster* a, const Cluster* b) {
                  return a->members.front() < b->members.front();
              });
    res.assignment.assign(static_cast<std::size_t>(n), 0);
    for (std::size_t id = 0; id < final_clusters.size(); ++id)
        for (int m : final_clusters[id]->members)
            res.assignment[static_cast<std::size_t>(m)] = static_cast<int>(id) + 1;

    int same = 0;
    for (int i = 0; i + 1 < n; ++i)
        if (res.assignment[static_cast<std::size_t>(i)] ==
            res.assignment[static_cast<std::size_t>(i + 1)])
            ++same;
    res.contiguity = n > 1 ? static_cast<double>(same) / (n - 1) : 1.0;
    return res;
}

DiagnosticsReport build_report(const QkDump& dump, const InterleavedSequence& seq,
                               const std::vector<double>& percents,
                               std::optional<int> reference_turn) {
    require(seq.history_end() > 0, "diagnostics need a non-empty history");
    DiagnosticsReport rep;
    rep.coverage_percents = percents;

    // entropy vs context length: one prefix per history turn count
    for (int turns = 1; turns <= seq.history_turn_count(); ++turns) {
        uint64_t end = 0;
        for (const Block& b : seq.layout())
            if (b.turn <= turns) end = std::max(end, b.end());
        std::vector<uint64_t> cols(end);
        for (uint64_t t = 0; t < end; ++t) cols[t] = t;
        for (uint32_t l = 0; l < dump.layers; ++l) {
            AttentionSlice s = AttentionSlice::from_dump(dump, seq, l, cols);
            DiagnosticsReport::EntropyPoint pt;
            pt.layer = l;
            pt.turns_in_context = turns;
            pt.context_tokens = end;
            pt.entropy = attention_entropy(s);
            pt.normalized = attention_entropy(s, true);
            rep.entropy_by_context_len.push_back(pt);
        }
    }

    std::vector<uint64_t> hist(seq.history_end());
    for (uint64_t t = 0; t < hist.size(); ++t) hist[t] = t;
    std::vector<std::array<double, 6>> features;
    std::vector<AttentionSlice> slices;
    for (uint32_t l = 0; l < dump.layers; ++l) {
        AttentionSlice s = AttentionSlice::from_dump(dump, seq, l, hist);
        CoverageGini cg = coverage_and_gini(s, percents);
        rep.coverage_by_layer.push_back(cg.coverage);
        rep.gini_by_layer.push_back(cg.gini);
        rep.modality_by_layer.push_back(modality_ratios(s, seq));
        if (reference_turn)
            rep.key_reference_by_layer.push_back(
                key_reference_mass(s, seq, *reference_turn));
        features.push_back(layer_feature_vector(s, seq));
        slices.push_back(std::move(s));
    }
    rep.hist_current = hist_vs_current(slices, seq);
    if (dump.layers >= 5) {
        ClusterResult cr = layer_cluster(features);
        rep.cluster_assignments = cr.assignment;
        rep.cluster_contiguity = cr.contiguity;
    }
    if (dump.layers >= 3) rep.text_vae_r = text_vae_correlation(rep.modality_by_layer);
    return rep;
}

nlohmann::json DiagnosticsReport::to_json() const {
    nlohmann::json entropy = nlohmann::json::array();
    for (const auto& pt : entropy_by_context_len)
        entropy.push_back({{"layer", pt.layer},
                           {"turns_in_context", pt.turns_in_context},
                           {"context_tokens", pt.context_tokens},
                           {"entropy", pt.entropy},
                           {"normalized", pt.normalized}});
    nlohmann::json modality = nlohmann::json::array();
    for (const auto& m : modality_by_layer)
        modality.push_back({{"text", m.text},
                            {"vit", m.vit},
                            {"vae", m.vae},
                            {"special", m.special}});
    nlohmann::json reference = nlohmann::json::array();
    for (const auto& v : key_reference_by_layer)
        reference.push_back(v ? nlohmann::json(*v) : nlohmann::json());
    nlohmann::json steps = nlohmann::json::array();
    for (const auto& sp : hist_current)
        steps.push_back(
            {{"step", sp.step}, {"history", sp.history}, {"current", sp.current}});
    nlohmann::json j{
        {"entropy_by_context_len", entropy},
        {"coverage_percents", coverage_percents},
        {"coverage_by_layer", coverage_by_layer},
        {"gini_by_layer", gini_by_layer},
        {"modality_ratios", modality},
        {"key_reference_mass", reference},
        {"hist_vs_current", steps},
        {"cluster_assignments", cluster_assignments},
        {"cluster_contiguity", cluster_contiguity},
        {"cluster_features",
         {"text_ratio", "vit_ratio", "vae_ratio", "special_ratio",
          "normalized_entropy", "top10_coverage"}},
    };
    j["text_vae_correlation"] = text_vae_r ? nlohmann::json(*text_vae_r)
                                           : nlohmann::json();
    return j;
}

std::optional<double> text_vae_correlation(const std::vector<ModalityRatios>& ratios) {
    const std::size_t n = ratios.size();
    require(n >= 3, "correlation needs at least 3 layers");
    double mx = 0.0, my = 0.0;
    for (const auto& r : ratios) { mx += r.text; my += r.vae; }
    mx /= n;
    my /= n;
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (const auto& r : ratios) {
        sxx += (r.text - mx) * (r.text - mx);
        syy += (r.vae - my) * (r.vae - my);
        sxy += (r.text - mx) * (r.vae - my);
    }
    if (sxx <= 1e-18 || syy <= 1e-18) return std::nullopt;
    return sxy / std::sqrt(sxx * syy);
}

} // namespace unilong
