#include "unilong/policy.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

namespace unilong {

namespace {

std::vector<uint64_t> merge_sorted(std::vector<uint64_t> a,
                                   const std::vector<uint64_t>& b) {
    a.insert(a.end(), b.begin(), b.end());
    std::sort(a.begin(), a.end());
    a.erase(std::unique(a.begin(), a.end()), a.end());
    return a;
}

// turn-level visibility where every layer sees the same kinds of the kept set
LayerVisibility uniform_turn_visibility(const InterleavedSequence& seq,
                                        const std::set<int>& kept,
                                        uint32_t layer_count) {
    std::vector<uint64_t> vis = merge_sorted(tokens_of(seq, kept, BlockKind::Text),
                                             tokens_of(seq, kept, BlockKind::Vae));
    LayerVisibility lv;
    lv.history_end = seq.history_end();
    lv.visible.assign(layer_count, vis);
    return lv;
}

// per-token pre-softmax score against the mean query, shared by the
// token-level and grouped variants
std::vector<std::pair<uint64_t, double>> score_vae_tokens(
    const QkDump& dump, const InterleavedSequence& seq, const RunConfig& cfg) {
    MeanQuery mq = mean_query(dump, seq, cfg.ell_syn, cfg.query_anchor);
    const uint32_t H = dump.heads, d = dump.head_dim;
    const double norm = static_cast<double>(H) * std::sqrt(static_cast<double>(d));

    std::vector<std::pair<uint64_t, double>> scores;
    for (int ti = 1; ti <= seq.history_turn_count(); ++ti) {
        const Turn& t = seq.turn(ti);
        if (!t.vae) continue;
        for (uint64_t tok = t.vae->start; tok < t.vae->end(); ++tok) {
            const float* krow = dump.k_row(cfg.ell_syn, tok);
            double s = 0.0;
            for (uint32_t h = 0; h < H; ++h) {
                const double* q = mq.head(h);
                const float* k = krow + static_cast<std::size_t>(h) * d;
                double dot = 0.0;
                for (uint32_t i = 0; i < d; ++i) dot += q[i] * static_cast<double>(k[i]);
                s += dot;
            }
            scores.emplace_back(tok, s / norm);
        }
    }
    return scores;
}

uint64_t max_image_block(const InterleavedSequence& seq) {
    uint64_t m = 0;
    for (int ti = 1; ti <= seq.history_turn_count(); ++ti) {
        const Turn& t = seq.turn(ti);
        if (t.vae) m = std::max(m, t.vae->len);
    }
    return m;
}

// early layers see the text of the standard grounding selection
std::set<int> grounding_turns(const QkDump& dump, const InterleavedSequence& seq,
                              const RunConfig& cfg,
                              std::vector<std::string>* warnings) {
    RelevanceReport rep =
        score_turns(dump, seq, BlockKind::Text, cfg.ell_grd, cfg, warnings);
    std::set<int> grd = select_turns(rep, cfg.k_grd);
    if (seq.history_turn_count() >= 1) grd.insert(1);
    return grd;
}

LayerVisibility token_budget_visibility(const QkDump& dump,
                                        const InterleavedSequence& seq,
                                        const RunConfig& cfg,
                                        std::vector<uint64_t> kept_vae,
                                        std::vector<std::string>* warnings) {
    std::sort(kept_vae.begin(), kept_vae.end());
    std::set<int> grd = grounding_turns(dump, seq, cfg, warnings);
    std::vector<uint64_t> text_vis = tokens_of(seq, grd, BlockKind::Text);
    LayerVisibility lv;
    lv.history_end = seq.history_end();
    lv.visible.resize(dump.layers);
    for (uint32_t l = 0; l < dump.layers; ++l)
        lv.visible[l] = l < cfg.ell_syn ? text_vis : kept_vae;
    return lv;
}

} // namespace

LayerVisibility dense_visibility(const InterleavedSequence& seq,
                                 uint32_t layer_count) {
    std::vector<uint64_t> all(seq.history_end());
    for (uint64_t t = 0; t < seq.history_end(); ++t) all[t] = t;
    LayerVisibility lv;
    lv.history_end = seq.history_end();
    lv.visible.assign(layer_count, all);
    return lv;
}

CurationPlan sliding_window_plan(const InterleavedSequence& seq, int n,
                                 uint32_t layer_count) {
    require(n >= 1, "window size must be >= 1");
    std::vector<int> image_turns = seq.history_turns_with(BlockKind::Vae);
    std::set<int> kept;
    if (seq.history_turn_count() >= 1) {
        kept.insert(1);
        const int take = std::min<int>(n, static_cast<int>(image_turns.size()));
        for (int i = static_cast<int>(image_turns.size()) - take;
             i < static_cast<int>(image_turns.size()); ++i)
            kept.insert(image_turns[static_cast<std::size_t>(i)]);
    }
    LayerVisibility vis = uniform_turn_visibility(seq, kept, layer_count);
    return CurationPlan(kept, kept, layer_count, std::move(vis));
}

CurationPlan single_probe_plan(const QkDump& dump, const InterleavedSequence& seq,
                               const RunConfig& cfg, BlockKind kind,
                               uint32_t layer, int k) {
    std::vector<std::string> warnings;
    RelevanceReport rep = score_turns(dump, seq, kind, layer, cfg, &warnings);
    std::set<int> kept = select_turns(rep, k);
    if (seq.history_turn_count() >= 1) kept.insert(1);
    LayerVisibility vis = uniform_turn_visibility(seq, kept, dump.layers);
    return CurationPlan(kept, kept, dump.layers, std::move(vis), std::move(warnings));
}

LayerVisibility token_level_plan(const QkDump& dump, const InterleavedSequence& seq,
                                 const RunConfig& cfg, int budget) {
    require(budget >= 1, "token budget must be >= 1");
    std::vector<std::string> warnings;
    auto scores = score_vae_tokens(dump, seq, cfg);
    const uint64_t budget_tokens =
        static_cast<uint64_t>(budget) * max_image_block(seq);

    std::vector<uint64_t> kept;
    if (budget_tokens >= scores.size()) {
        for (const auto& [tok, s] : scores) kept.push_back(tok);
    } else {
        std::stable_sort(scores.begin(), scores.end(), [](const auto& a, const auto& b) {
            if (a.second != b.second) return a.second > b.second;
            return a.first < b.first;
        });
        kept.reserve(budget_tokens);
        for (uint64_t i = 0; i < budget_tokens; ++i) kept.push_back(scores[i].first);
    }
    return token_budget_visibility(dump, seq, cfg, std::move(kept), &warnings);
}

LayerVisibility grouped_token_plan(const QkDump& dump, const InterleavedSequence& seq,
                                   const RunConfig& cfg, int group_size, int budget) {
    require(group_size >= 1, "group size must be >= 1");
    require(budget >= 1, "token budget must be >= 1");
    std::vector<std::string> warnings;
    auto scores = score_vae_tokens(dump, seq, cfg);
    std::map<uint64_t, double> by_token(scores.begin(), scores.end());

    struct Group {
        uint64_t start = 0, len = 0;
        double score = 0.0;
    };
    std::vector<Group> groups;
    for (int ti = 1; ti <= seq.history_turn_count(); ++ti) {
        const Turn& t = seq.turn(ti);
        if (!t.vae) continue;
        for (uint64_t g = t.vae->start; g < t.vae->end();
             g += static_cast<uint64_t>(group_size)) {
            Group grp;
            grp.start = g;
            grp.len = std::min<uint64_t>(static_cast<uint64_t>(group_size),
                                         t.vae->end() - g);
            for (uint64_t tok = g; tok < g + grp.len; ++tok)
                grp.score += by_token.at(tok);
            grp.score /= static_cast<double>(grp.len);
            groups.push_back(grp);
        }
    }
    std::stable_sort(groups.begin(), groups.end(), [](const Group& a, const Group& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.start < b.start;
    });

    const uint64_t budget_tokens =
        static_cast<uint64_t>(budget) * max_image_block(seq);
    std::vector<uint64_t> kept;
    uint64_t used = 0;
    for (const Group& g : groups) {
        if (used + g.len > budget_tokens) continue;
        for (uint64_t tok = g.start; tok < g.start + g.len; ++tok) kept.push_back(tok);
        used += g.len;
    }
    return token_budget_visibility(dump, seq, cfg, std::move(kept), &warnings);
}

CurationPlan semantic_oracle_plan(const InterleavedSequence& seq,
                                  const std::map<int, int>& labels, int k,
                                  uint32_t ell_syn, uint32_t layer_count) {
    require(k >= 1, "oracle budget must be >= 1");
    std::set<int> seen_ranks;
    for (const auto& [turn, rank] : labels) {
        seq.turn(turn);
        require(seen_ranks.insert(rank).second,
                "duplicate oracle rank " + std::to_string(rank));
    }
    for (int ti : seq.history_turns_with(BlockKind::Vae))
        require(labels.count(ti) == 1,
                "oracle labels missing image turn " + std::to_string(ti));

    std::vector<std::pair<int, int>> by_rank; // (rank, turn)
    for (const auto& [turn, rank] : labels) by_rank.emplace_back(rank, turn);
    std::sort(by_rank.begin(), by_rank.end());
    std::set<int> kept;
    for (int i = 0; i < static_cast<int>(by_rank.size()) && i < k; ++i)
        kept.insert(by_rank[static_cast<std::size_t>(i)].second);
    if (seq.history_turn_count() >= 1) kept.insert(1);

    LayerVisibility vis = split_visibility(seq, kept, kept, ell_syn, layer_count);
    return CurationPlan(kept, kept, ell_syn, std::move(vis));
}

CurationPlan text_block_match_plan(const QkDump& dump, const InterleavedSequence& seq,
                                   int k, uint32_t layer, uint32_t ell_syn,
                                   uint32_t layer_count,
                                   std::vector<std::string>* warnings) {
    require(k >= 1, "match budget must be >= 1");
    require(layer < dump.layers, "layer not in dump");
    const Turn& cur = seq.turn(seq.current_turn());
    require(cur.text.has_value(), "current turn has no text block");

    const std::size_t C = dump.row_stride();
    auto pooled_keys = [&](const Block& b) {
        std::vector<double> pool(C, 0.0);
        for (uint64_t tok = b.start; tok < b.end(); ++tok) {
            const float* row = dump.k_row(layer, tok);
            for (std::size_t i = 0; i < C; ++i) pool[i] += row[i];
        }
        for (double& v : pool) v /= static_cast<double>(b.len);
        return pool;
    };
    auto cosine = [](const std::vector<double>& a, const std::vector<double>& b) {
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            dot += a[i] * b[i];
            na += a[i] * a[i];
            nb += b[i] * b[i];
        }
        if (na <= 0.0 || nb <= 0.0) return 0.0;
        return dot / std::sqrt(na * nb);
    };

    const std::vector<double> cur_pool = pooled_keys(*cur.text);
    RelevanceReport rep;
    rep.layer = layer;
    rep.target_kind = BlockKind::Text;
    for (int ti = 1; ti <= seq.history_turn_count(); ++ti) {
        const Turn& t = seq.turn(ti);
        if (!t.text) {
            if (warnings)
                warnings->push_back("turn " + std::to_string(ti) +
                                    " has no text block; excluded from matching");
            continue;
        }
        rep.scores[ti] = cosine(cur_pool, pooled_keys(*t.text));
    }
    for (const auto& [ti, s] : rep.scores) rep.ranking.push_back(ti);
    std::stable_sort(rep.ranking.begin(), rep.ranking.end(), [&](int a, int b) {
        double sa = rep.scores.at(a), sb = rep.scores.at(b);
        if (sa != sb) return sa > sb;
        return a < b;
    });

    std::set<int> kept = select_turns(rep, k);
    if (seq.history_turn_count() >= 1) kept.insert(1);
    LayerVisibility vis = split_visibility(seq, kept, kept, ell_syn, layer_count);
    return CurationPlan(kept, kept, ell_syn, std::move(vis),
                        warnings ? *warnings : std::vector<std::string>{});
}

// --- discard handling --------------------------------------------------------

std::vector<float> downsample_tokens(const float* x, uint64_t len,
                                     std::size_t channels, int rate,
                                     DiscardSpec::Interp interp) {
    require(len >= 1, "cannot downsample an empty block");
    require(rate >= 1, "rate must be >= 1");
    const uint64_t out_len = (len + static_cast<uint64_t>(rate) - 1) /
                             static_cast<uint64_t>(rate);
    std::vector<float> out(out_len * channels, 0.0f);

    if (interp == DiscardSpec::Interp::Lerp) {
        const double width = static_cast<double>(len - 1) / static_cast<double>(out_len);
        for (uint64_t j = 0; j < out_len; ++j) {
            const double pos = (static_cast<double>(j) + 0.5) * width;
            const uint64_t lo = static_cast<uint64_t>(pos);
            const uint64_t hi = std::min<uint64_t>(lo + 1, len - 1);
            const double frac = pos - static_cast<double>(lo);
            for (std::size_t c = 0; c < channels; ++c) {
                const double a = x[lo * channels + c];
                const double b = x[hi * channels + c];
                out[j * channels + c] = static_cast<float>(a + frac * (b - a));
            }
        }
        return out;
    }

    for (uint64_t j = 0; j < out_len; ++j) {
        const uint64_t w0 = j * static_cast<uint64_t>(rate);
        const uint64_t w1 = std::min<uint64_t>(w0 + static_cast<uint64_t>(rate), len);
        for (std::size_t c = 0; c < channels; ++c) {
            if (interp == DiscardSpec::Interp::AvgPool) {
                double acc = 0.0;
                for (uint64_t t = w0; t < w1; ++t) acc += x[t * channels + c];
                out[j * channels + c] =
                    static_cast<float>(acc / static_cast<double>(w1 - w0));
            } else {
                float best = x[w0 * channels + c];
                for (uint64_t t = w0 + 1; t < w1; ++t)
                    best = std::max(best, x[t * channels + c]);
                out[j * channels + c] = best;
            }
        }
    }
    return out;
}

CompressedBlock compress_block(const Block& block, const std::vector<float>& keys,
                               const std::vector<float>& values,
                               std::size_t channels, int rate,
                               DiscardSpec::Interp interp) {
    require(block.len >= 1, "cannot compress an empty block");
    require(rate == 4 || rate == 8 || rate == 16, "rate must be one of 4, 8, 16");
    require(keys.size() == block.len * channels, "key array shape mismatch");
    require(values.size() == block.len * channels, "value array shape mismatch");

    CompressedBlock out;
    out.source_block = block;
    out.rate = rate;
    out.interp = interp;
    out.out_len = (block.len + static_cast<uint64_t>(rate) - 1) /
                  static_cast<uint64_t>(rate);
    out.keys = downsample_tokens(keys.data(), block.len, channels, rate, interp);
    out.values = downsample_tokens(values.data(), block.len, channels, rate, interp);
    return out;
}

// --- spec parsing and dispatch ----------------------------------------------

void PolicySpec::validate() const {
    if (variant == Variant::SlidingWindow)
        require(window_n >= 1, "sliding window needs n >= 1");
    if (variant == Variant::GroupedToken)
        require(group_size == 8 || group_size == 32 || group_size == 128,
                "group_size must be one of 8, 32, 128");
    if (variant == Variant::TokenLevel || variant == Variant::GroupedToken)
        require(budget >= 1, "budget must be >= 1");
    if (discard && discard->kind == DiscardSpec::Kind::Compress)
        require(discard->rate == 4 || discard->rate == 8 || discard->rate == 16,
                "compress rate must be one of 4, 8, 16");
}

namespace {

const std::map<std::string, PolicySpec::Variant>& variant_names() {
    static const std::map<std::string, PolicySpec::Variant> names = {
        {"dense_kv", PolicySpec::Variant::DenseKv},
        {"sliding_window", PolicySpec::Variant::SlidingWindow},
        {"unilonggen", PolicySpec::Variant::UniLongGen},
        {"single_probe", PolicySpec::Variant::SingleProbe},
        {"token_level", PolicySpec::Variant::TokenLevel},
        {"grouped_token", PolicySpec::Variant::GroupedToken},
        {"semantic_oracle", PolicySpec::Variant::SemanticOracle},
        {"text_block_match", PolicySpec::Variant::TextBlockMatch},
    };
    return names;
}

} // namespace

std::string PolicySpec::id() const {
    for (const auto& [name, v] : variant_names())
        if (v == variant) {
            switch (variant) {
                case Variant::SlidingWindow: return name + "_n" + std::to_string(window_n);
                case Variant::SingleProbe:
                    return name + "_" + to_string(probe_kind);
                case Variant::TokenLevel: return name + "_k" + std::to_string(budget);
                case Variant::GroupedToken:
                    return name + "_g" + std::to_string(group_size) + "_k" +
                           std::to_string(budget);
                default: return name;
            }
        }
    return "?";
}

PolicySpec PolicySpec::from_json(const nlohmann::json& j) {
    require(j.is_object() && j.contains("variant"), "policy needs a variant");
    PolicySpec s;
    const std::string v = j.at("variant").get<std::string>();
    auto it = variant_names().find(v);
    require(it != variant_names().end(), "unknown policy variant: " + v);
    s.variant = it->second;
    for (auto f = j.begin(); f != j.end(); ++f) {
        const std::string& key = f.key();
        if (key == "variant") continue;
        if (key == "n") s.window_n = f->get<int>();
        else if (key == "kind") s.probe_kind = block_kind_from_string(f->get<std::string>());
        else if (key == "layer") s.probe_layer = f->get<uint32_t>();
        else if (key == "budget") s.budget = f->get<int>();
        else if (key == "group_size") s.group_size = f->get<int>();
        else if (key == "labels") {
            for (auto l = f->begin(); l != f->end(); ++l)
                s.oracle_labels[std::stoi(l.key())] = l->get<int>();
        } else if (key == "k") s.match_k = f->get<int>();
        else if (key == "match_layer") s.match_layer = f->get<uint32_t>();
        else if (key == "discard") s.discard = DiscardSpec::from_json(*f);
        else throw ValidationError("unknown policy field: " + key);
    }
    s.validate();
    return s;
}

nlohmann::json PolicySpec::to_json() const {
    nlohmann::json j;
    for (const auto& [name, v] : variant_names())
        if (v == variant) j["variant"] = name;
    switch (variant) {
        case Variant::SlidingWindow: j["n"] = window_n; break;
        case Variant::SingleProbe:
            j["kind"] = to_string(probe_kind);
            if (probe_layer) j["layer"] = *probe_layer;
            break;
        case Variant::TokenLevel: j["budget"] = budget; break;
        case Variant::GroupedToken:
            j["group_size"] = group_size;
            j["budget"] = budget;
            break;
        case Variant::SemanticOracle: {
            nlohmann::json labels;
            for (const auto& [turn, rank] : oracle_labels)
                labels[std::to_string(turn)] = rank;
            j["labels"] = labels;
            break;
        }
        case Variant::TextBlockMatch:
            if (match_k) j["k"] = *match_k;
            if (match_layer) j["match_layer"] = *match_layer;
            break;
        default: break;
    }
    if (discard) j["discard"] = discard->to_json();
    return j;
}

PolicyResult build_policy(const PolicySpec& spec, const QkDump& dump,
                          const InterleavedSequence& seq, const RunConfig& cfg) {
    spec.validate();
    PolicyResult res;
    res.discard = spec.discard.value_or(cfg.discard);
    switch (spec.variant) {
        case PolicySpec::Variant::DenseKv:
            res.visibility = dense_visibility(seq, dump.layers);
            break;
        case PolicySpec::Variant::SlidingWindow:
            res.plan = sliding_window_plan(seq, spec.window_n, dump.layers);
            break;
        case PolicySpec::Variant::UniLongGen:
            res.plan = build_plan(dump, seq, cfg);
            break;
        case PolicySpec::Variant::SingleProbe:
            res.plan = single_probe_plan(dump, seq, cfg, spec.probe_kind,
                                         spec.probe_layer.value_or(cfg.ell_grd),
                                         cfg.k_img);
            break;
        case PolicySpec::Variant::TokenLevel:
            res.visibility = token_level_plan(dump, seq, cfg, spec.budget);
            break;
        case PolicySpec::Variant::GroupedToken:
            res.visibility =
                grouped_token_plan(dump, seq, cfg, spec.group_size, spec.budget);
            break;
        case PolicySpec::Variant::SemanticOracle:
            res.plan = semantic_oracle_plan(seq, spec.oracle_labels, cfg.k_img,
                                            cfg.ell_syn, dump.layers);
            break;
        case PolicySpec::Variant::TextBlockMatch:
            res.plan = text_block_match_plan(
                dump, seq, spec.match_k.value_or(cfg.k_img),
                spec.match_layer.value_or(cfg.ell_grd), cfg.ell_syn, dump.layers);
            break;
    }
    if (res.plan) {
        res.visibility = res.plan->visibility();
        res.warnings = res.plan->warnings();
    }
    return res;
}

} // namespace unilong
