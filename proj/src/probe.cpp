#include "unilong/probe.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

namespace unilong {

MeanQuery mean_query(const QkDump& dump, const InterleavedSequence& seq,
                     uint32_t layer, const QueryAnchor& anchor) {
    require(layer < dump.layers, "layer " + std::to_string(layer) + " not in dump");
    const uint32_t H = dump.heads, d = dump.head_dim;

    MeanQuery mq;
    mq.source_layer = layer;
    mq.heads = H;
    mq.head_dim = d;
    mq.values.assign(static_cast<std::size_t>(H) * d, 0.0);

    if (anchor.kind == QueryAnchor::Kind::SpecialToken) {
        const uint64_t tok = anchor.index;
        require(tok < seq.total_tokens(), "anchor token out of range");
        require(seq.kind_of(tok) == BlockKind::Special,
                "anchor token " + std::to_string(tok) + " is not in a special block");
        const float* row = dump.q_row(layer, tok);
        for (std::size_t i = 0; i < mq.values.size(); ++i) mq.values[i] = row[i];
        mq.token_count = 1;
        return mq;
    }

    const Block& cur = seq.current_vae();
    require(cur.len > 0, "current image has no vae tokens");
    for (uint64_t tok = cur.start; tok < cur.end(); ++tok) {
        const float* row = dump.q_row(layer, tok);
        for (std::size_t i = 0; i < mq.values.size(); ++i) mq.values[i] += row[i];
    }
    const double inv = 1.0 / static_cast<double>(cur.len);
    for (double& v : mq.values) v *= inv;
    mq.token_count = cur.len;
    return mq;
}

double relevance_score(const QkDump& dump, const InterleavedSequence& seq,
                       const MeanQuery& mq, const Block& block, uint32_t layer) {
    require(layer < dump.layers, "layer not in dump");
    require(layer == mq.source_layer, "mean query was taken at a different layer");
    require(block.len > 0, "empty block");
    require(block.end() <= seq.current_vae().start,
            "block must precede the current image");
    const uint32_t H = dump.heads, d = dump.head_dim;

    double total = 0.0;
    for (uint64_t tok = block.start; tok < block.end(); ++tok) {
        const float* krow = dump.k_row(layer, tok);
        double per_token = 0.0;
        for (uint32_t h = 0; h < H; ++h) {
            const double* q = mq.head(h);
            const float* k = krow + static_cast<std::size_t>(h) * d;
            double dot = 0.0;
            for (uint32_t i = 0; i < d; ++i) dot += q[i] * static_cast<double>(k[i]);
            per_token += dot;
        }
        total += per_token;
    }
    const double norm = static_cast<double>(H) * std::sqrt(static_cast<double>(d));
    return total / (norm * static_cast<double>(block.len));
}

double relevance_score_post_softmax(const QkDump& dump,
                                    const InterleavedSequence& seq,
                                    const Block& block, uint32_t layer) {
    require(layer < dump.layers, "layer not in dump");
    require(block.len > 0, "empty block");
    const uint64_t hist_end = seq.history_end();
    require(hist_end > 0, "no history to attend over");
    require(block.end() <= seq.current_vae().start,
            "block must precede the current image");
    const uint32_t H = dump.heads, d = dump.head_dim;
    const Block& cur = seq.current_vae();
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));

    // head- and query-averaged weight per historical token
    std::vector<double> wsum(hist_end, 0.0);
    std::vector<double> logits(hist_end);
    for (uint32_t h = 0; h < H; ++h) {
        for (uint64_t v = cur.start; v < cur.end(); ++v) {
            const float* q = dump.q_row(layer, v) + static_cast<std::size_t>(h) * d;
            double maxlog = -1e300;
            for (uint64_t u = 0; u < hist_end; ++u) {
                const float* k = dump.k_row(layer, u) + static_cast<std::size_t>(h) * d;
                double dot = 0.0;
                for (uint32_t i = 0; i < d; ++i)
                    dot += static_cast<double>(q[i]) * static_cast<double>(k[i]);
                logits[u] = dot * scale;
                if (logits[u] > maxlog) maxlog = logits[u];
            }
            double z = 0.0;
            for (uint64_t u = 0; u < hist_end; ++u) {
                logits[u] = std::exp(logits[u] - maxlog);
                z += logits[u];
            }
            for (uint64_t u = 0; u < hist_end; ++u) wsum[u] += logits[u] / z;
        }
    }
    const double denom = static_cast<double>(H) * static_cast<double>(cur.len);
    double mass = 0.0;
    for (uint64_t u = block.start; u < block.end(); ++u) mass += wsum[u] / denom;
    return mass / static_cast<double>(block.len);
}

RelevanceReport score_turns(const QkDump& dump, const InterleavedSequence& seq,
                            BlockKind kind, uint32_t layer, const RunConfig& cfg,
                            std::vector<std::string>* warnings) {
    RelevanceReport rep;
    rep.layer = layer;
    rep.target_kind = kind;

    MeanQuery mq;
    if (cfg.score_mode == ScoreMode::PreSoftmax)
        mq = mean_query(dump, seq, layer, cfg.query_anchor);

    for (int ti = 1; ti <= seq.history_turn_count(); ++ti) {
        const Turn& t = seq.turn(ti);
        const std::optional<Block>* b = nullptr;
        switch (kind) {
            case BlockKind::Text: b = &t.text; break;
            case BlockKind::Vit: b = &t.vit; break;
            case BlockKind::Vae: b = &t.vae; break;
            case BlockKind::Special: b = nullptr; break;
        }
        if (b == nullptr || !b->has_value()) {
            if (warnings)
                warnings->push_back("turn " + std::to_string(ti) + " has no " +
                                    to_string(kind) + " block; skipped from ranking");
            continue;
        }
        double s = cfg.score_mode == ScoreMode::PreSoftmax
                       ? relevance_score(dump, seq, mq, **b, layer)
                       : relevance_score_post_softmax(dump, seq, **b, layer);
        rep.scores[ti] = s;
    }

    rep.ranking.reserve(rep.scores.size());
    for (const auto& [ti, s] : rep.scores) rep.ranking.push_back(ti);
    std::stable_sort(rep.ranking.begin(), rep.ranking.end(), [&](int a, int b2) {
        double sa = rep.scores.at(a), sb = rep.scores.at(b2);
        if (sa != sb) return sa > sb;
        return a < b2;
    });
    return rep;
}

std::set<int> select_turns(const RelevanceReport& report, int k) {
    require(k >= 1, "selection budget must be >= 1");
    std::set<int> out;
    for (int i = 0; i < static_cast<int>(report.ranking.size()) && i < k; ++i)
        out.insert(report.ranking[static_cast<std::size_t>(i)]);
    return out;
}

LayerVisibility split_visibility(const InterleavedSequence& seq,
                                 const std::set<int>& grd_turns,
                                 const std::set<int>& syn_turns,
                                 uint32_t ell_syn, uint32_t layer_count) {
    const std::vector<uint64_t> text_vis = tokens_of(seq, grd_turns, BlockKind::Text);
    const std::vector<uint64_t> vae_vis = tokens_of(seq, syn_turns, BlockKind::Vae);
    LayerVisibility vis;
    vis.history_end = seq.history_end();
    vis.visible.resize(layer_count);
    for (uint32_t l = 0; l < layer_count; ++l)
        vis.visible[l] = l < ell_syn ? text_vis : vae_vis;
    return vis;
}

CurationPlan build_plan(const QkDump& dump, const InterleavedSequence& seq,
                        const RunConfig& cfg) {
    cfg.validate();
    require(cfg.ell_syn < dump.layers,
            "dump has " + std::to_string(dump.layers) + " layers, ell_syn=" +
                std::to_string(cfg.ell_syn) + " not covered");

    std::vector<std::string> warnings;
    RelevanceReport text_rep =
        score_turns(dump, seq, BlockKind::Text, cfg.ell_grd, cfg, &warnings);
    RelevanceReport vae_rep =
        score_turns(dump, seq, BlockKind::Vae, cfg.ell_syn, cfg, &warnings);

    std::set<int> grd = select_turns(text_rep, cfg.k_grd);
    std::set<int> syn = select_turns(vae_rep, cfg.k_img);
    if (seq.history_turn_count() >= 1) {
        grd.insert(1); // the first turn anchors identity and style
        syn.insert(1);
    }

    LayerVisibility vis = split_visibility(seq, grd, syn, cfg.ell_syn, dump.layers);
    return CurationPlan(std::move(grd), std::move(syn), cfg.ell_syn, std::move(vis),
                        std::move(warnings));
}

CurationPlan::CurationPlan(std::set<int> grd_turns, std::set<int> syn_turns,
                           uint32_t ell_syn, LayerVisibility visibility,
                           std::vector<std::string> warnings)
    : grd_turns_(std::move(grd_turns)),
      syn_turns_(std::move(syn_turns)),
      ell_syn_(ell_syn),
      visibility_(std::move(visibility)),
      warnings_(std::move(warnings)) {
    if (!grd_turns_.empty() || !syn_turns_.empty()) {
        require(grd_turns_.count(1) == 1, "grd_turns must include turn 1");
        require(syn_turns_.count(1) == 1, "syn_turns must include turn 1");
    }
    for (const auto& layer : visibility_.visible) {
        for (std::size_t i = 0; i < layer.size(); ++i) {
            require(layer[i] < visibility_.history_end,
                    "plan visibility reaches into the current turn");
            if (i > 0) require(layer[i - 1] < layer[i], "plan visibility not sorted");
        }
    }
}

// --- serialization ---------------------------------------------------------

nlohmann::json RelevanceReport::to_json() const {
    nlohmann::json scores_arr = nlohmann::json::array();
    for (int ti : ranking)
        scores_arr.push_back({{"turn", ti}, {"score", scores.at(ti)}});
    return {{"layer", layer},
            {"kind", to_string(target_kind)},
            {"scores", scores_arr},
            {"ranking", ranking}};
}

nlohmann::json LayerVisibility::to_json() const {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& vis : visible) {
        nlohmann::json runs = nlohmann::json::array();
        std::size_t i = 0;
        while (i < vis.size()) {
            std::size_t j = i;
            while (j + 1 < vis.size() && vis[j + 1] == vis[j] + 1) ++j;
            runs.push_back({vis[i], vis[j] - vis[i] + 1});
            i = j + 1;
        }
        layers.push_back(std::move(runs));
    }
    return {{"history_end", history_end}, {"layers", layers}};
}

LayerVisibility LayerVisibility::from_json(const nlohmann::json& j) {
    LayerVisibility vis;
    vis.history_end = j.at("history_end").get<uint64_t>();
    for (const auto& runs : j.at("layers")) {
        std::vector<uint64_t> layer;
        for (const auto& run : runs) {
            uint64_t start = run.at(0).get<uint64_t>();
            uint64_t len = run.at(1).get<uint64_t>();
            for (uint64_t t = start; t < start + len; ++t) layer.push_back(t);
        }
        vis.visible.push_back(std::move(layer));
    }
    return vis;
}

nlohmann::json CurationPlan::to_json() const {
    return {{"grd_turns", grd_turns_},
            {"syn_turns", syn_turns_},
            {"ell_syn", ell_syn_},
            {"per_layer_visible", visibility_.to_json()},
            {"warnings", warnings_}};
}

} // namespace unilong
