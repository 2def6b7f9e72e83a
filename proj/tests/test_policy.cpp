#include <doctest.h>

#include <algorithm>
#include <nlohmann/json.hpp>

#include "test_helpers.hpp"
#include "unilong/policy.hpp"

using namespace unilong;
using testutil::random_dump;
using testutil::uniform_turns;

namespace {

RunConfig two_layer_cfg(int k_grd = 4, int k_img = 4) {
    RunConfig cfg;
    cfg.ell_grd = 0;
    cfg.ell_syn = 1;
    cfg.k_grd = k_grd;
    cfg.k_img = k_img;
    return cfg;
}

// independent per-token scorer for the token/grouped oracles
std::vector<std::pair<uint64_t, double>> oracle_token_scores(
    const QkDump& dump, const InterleavedSequence& seq, uint32_t layer) {
    const uint32_t H = dump.heads, d = dump.head_dim;
    const Block& cur = seq.current_vae();
    std::vector<double> mean(dump.row_stride(), 0.0);
    for (uint64_t v = cur.start; v < cur.end(); ++v)
        for (std::size_t i = 0; i < mean.size(); ++i)
            mean[i] += dump.q_row(layer, v)[i];
    for (auto& x : mean) x /= static_cast<double>(cur.len);

    std::vector<std::pair<uint64_t, double>> out;
    for (int ti = 1; ti <= seq.history_turn_count(); ++ti) {
        const Turn& t = seq.turn(ti);
        if (!t.vae) continue;
        for (uint64_t u = t.vae->start; u < t.vae->end(); ++u) {
            double s = 0.0;
            for (uint32_t h = 0; h < H; ++h)
                for (uint32_t i = 0; i < d; ++i)
                    s += mean[h * d + i] *
                         static_cast<double>(dump.k_row(layer, u)[h * d + i]);
            out.emplace_back(u, s / (H * std::sqrt(static_cast<double>(d))));
        }
    }
    return out;
}

} // namespace

TEST_CASE("sliding window keeps the anchor plus the recency window") {
    InterleavedSequence small = uniform_turns(3, 4, 8);
    CurationPlan p1 = sliding_window_plan(small, 4, 2);
    CHECK(p1.grd_turns() == std::set<int>{1, 2, 3});

    InterleavedSequence big = uniform_turns(30, 4, 8);
    CurationPlan p2 = sliding_window_plan(big, 4, 2);
    CHECK(p2.syn_turns() == std::set<int>{1, 27, 28, 29, 30});

    for (int n : {4, 8, 12}) {
        CurationPlan p = sliding_window_plan(big, n, 2);
        CHECK(static_cast<int>(p.syn_turns().size()) == n + 1);
        CHECK(p.syn_turns().count(1) == 1);
        // kept turns contribute text and vae alike at every layer
        auto expect = tokens_of(big, p.syn_turns(), BlockKind::Text);
        auto vae = tokens_of(big, p.syn_turns(), BlockKind::Vae);
        expect.insert(expect.end(), vae.begin(), vae.end());
        std::sort(expect.begin(), expect.end());
        CHECK(p.visibility().visible[0] == expect);
        CHECK(p.visibility().visible[1] == expect);
    }
}

TEST_CASE("token budget saturating the history keeps every vae token") {
    InterleavedSequence seq = uniform_turns(5, 4, 16);
    QkDump dump = random_dump(2, 2, 8, seq.total_tokens(), 50);
    LayerVisibility vis = token_level_plan(dump, seq, two_layer_cfg(), 5);
    CHECK(vis.visible[1] == tokens_of(seq, {1, 2, 3, 4, 5}, BlockKind::Vae));
}

TEST_CASE("identical keys tie-break toward the earliest tokens") {
    InterleavedSequence seq = uniform_turns(4, 2, 8);
    QkDump dump = random_dump(2, 2, 4, seq.total_tokens(), 51);
    for (uint64_t t = 0; t < dump.num_tokens; ++t)
        for (std::size_t i = 0; i < dump.row_stride(); ++i)
            dump.k_row(1, t)[i] = 0.25f;
    LayerVisibility vis = token_level_plan(dump, seq, two_layer_cfg(), 2);
    std::vector<uint64_t> all_vae = tokens_of(seq, {1, 2, 3, 4}, BlockKind::Vae);
    all_vae.resize(2 * 8); // first budget * tokens-per-image of them
    CHECK(vis.visible[1] == all_vae);
}

TEST_CASE("token-level selection matches the per-token oracle") {
    InterleavedSequence seq = uniform_turns(6, 4, 12);
    QkDump dump = random_dump(2, 4, 8, seq.total_tokens(), 52);
    RunConfig cfg = two_layer_cfg();
    LayerVisibility vis = token_level_plan(dump, seq, cfg, 2);

    auto scores = oracle_token_scores(dump, seq, 1);
    std::stable_sort(scores.begin(), scores.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    std::vector<uint64_t> expect;
    for (std::size_t i = 0; i < 2 * 12; ++i) expect.push_back(scores[i].first);
    std::sort(expect.begin(), expect.end());
    CHECK(vis.visible[1] == expect);
}

TEST_CASE("grouping by the whole block reduces to image-level ranking") {
    InterleavedSequence seq = uniform_turns(6, 4, 12);
    QkDump dump = random_dump(2, 4, 8, seq.total_tokens(), 53);
    RunConfig cfg = two_layer_cfg();
    LayerVisibility got = grouped_token_plan(dump, seq, cfg, 12, 3);

    // oracle: rank blocks by mean per-token score, keep best 3 whole blocks
    auto scores = oracle_token_scores(dump, seq, 1);
    std::map<uint64_t, double> by_token(scores.begin(), scores.end());
    std::vector<std::pair<double, int>> block_rank;
    for (int ti = 1; ti <= 6; ++ti) {
        const Block& b = *seq.turn(ti).vae;
        double s = 0.0;
        for (uint64_t u = b.start; u < b.end(); ++u) s += by_token[u];
        block_rank.emplace_back(-s / static_cast<double>(b.len), ti);
    }
    std::sort(block_rank.begin(), block_rank.end());
    std::set<int> kept{block_rank[0].second, block_rank[1].second,
                       block_rank[2].second};
    CHECK(got.visible[1] == tokens_of(seq, kept, BlockKind::Vae));
}

TEST_CASE("group size one reduces to token-level selection") {
    InterleavedSequence seq = uniform_turns(5, 4, 8);
    QkDump dump = random_dump(2, 2, 8, seq.total_tokens(), 54);
    RunConfig cfg = two_layer_cfg();
    CHECK(grouped_token_plan(dump, seq, cfg, 1, 2).visible[1] ==
          token_level_plan(dump, seq, cfg, 2).visible[1]);
}

TEST_CASE("groups of 8 match the averaged per-token oracle") {
    InterleavedSequence seq = uniform_turns(4, 4, 24);
    QkDump dump = random_dump(2, 2, 8, seq.total_tokens(), 55);
    RunConfig cfg = two_layer_cfg();
    LayerVisibility got = grouped_token_plan(dump, seq, cfg, 8, 2);

    auto scores = oracle_token_scores(dump, seq, 1);
    std::map<uint64_t, double> by_token(scores.begin(), scores.end());
    struct G {
        double neg_score;
        uint64_t start, len;
    };
    std::vector<G> groups;
    for (int ti = 1; ti <= 4; ++ti) {
        const Block& b = *seq.turn(ti).vae;
        for (uint64_t g = b.start; g < b.end(); g += 8) {
            const uint64_t len = std::min<uint64_t>(8, b.end() - g);
            double s = 0.0;
            for (uint64_t u = g; u < g + len; ++u) s += by_token[u];
            groups.push_back({-s / static_cast<double>(len), g, len});
        }
    }
    std::stable_sort(groups.begin(), groups.end(), [](const G& a, const G& b) {
        if (a.neg_score != b.neg_score) return a.neg_score < b.neg_score;
        return a.start < b.start;
    });
    std::vector<uint64_t> expect;
    uint64_t used = 0;
    for (const G& g : groups) {
        if (used + g.len > 2 * 24) continue;
        for (uint64_t u = g.start; u < g.start + g.len; ++u) expect.push_back(u);
        used += g.len;
    }
    std::sort(expect.begin(), expect.end());
    CHECK(got.visible[1] == expect);
}

TEST_CASE("semantic oracle mirrors the probe when labels agree") {
    InterleavedSequence seq = uniform_turns(8, 4, 8);
    QkDump dump = random_dump(2, 2, 8, seq.total_tokens(), 56);
    RunConfig cfg = two_layer_cfg();
    CurationPlan probe_plan = build_plan(dump, seq, cfg);

    RelevanceReport rep = score_turns(dump, seq, BlockKind::Vae, 1, cfg);
    std::map<int, int> labels;
    for (std::size_t i = 0; i < rep.ranking.size(); ++i)
        labels[rep.ranking[i]] = static_cast<int>(i) + 1;
    CurationPlan oracle = semantic_oracle_plan(seq, labels, 4, 1, 2);
    CHECK(oracle.syn_turns() == probe_plan.syn_turns());
    CHECK(oracle.visibility().visible[1] == probe_plan.visibility().visible[1]);
}

TEST_CASE("semantic oracle with disjoint labels differs exactly there") {
    InterleavedSequence seq = uniform_turns(8, 4, 8);
    QkDump dump = random_dump(2, 2, 8, seq.total_tokens(), 57);
    RunConfig cfg = two_layer_cfg();
    CurationPlan probe_plan = build_plan(dump, seq, cfg);

    // rank the probe's bottom turns first
    RelevanceReport rep = score_turns(dump, seq, BlockKind::Vae, 1, cfg);
    std::map<int, int> labels;
    for (std::size_t i = 0; i < rep.ranking.size(); ++i)
        labels[rep.ranking[rep.ranking.size() - 1 - i]] = static_cast<int>(i) + 1;
    CurationPlan oracle = semantic_oracle_plan(seq, labels, 4, 1, 2);

    std::set<int> diff;
    std::set_symmetric_difference(oracle.syn_turns().begin(), oracle.syn_turns().end(),
                                  probe_plan.syn_turns().begin(),
                                  probe_plan.syn_turns().end(),
                                  std::inserter(diff, diff.begin()));
    for (int t : diff) {
        const bool in_oracle = oracle.syn_turns().count(t) > 0;
        const bool probe_top = probe_plan.syn_turns().count(t) > 0;
        CHECK(in_oracle != probe_top);
    }
    CHECK(!diff.empty());
}

TEST_CASE("semantic oracle label validation") {
    InterleavedSequence seq = uniform_turns(3, 4, 8);
    CHECK_THROWS_AS(semantic_oracle_plan(seq, {{1, 1}, {2, 1}, {3, 2}}, 2, 1, 2),
                    ValidationError); // duplicate rank
    CHECK_THROWS_AS(semantic_oracle_plan(seq, {{1, 1}, {2, 2}}, 2, 1, 2),
                    ValidationError); // turn 3 unlabeled
}

TEST_CASE("text-block matching ranks an identical block first") {
    InterleavedSequence seq = uniform_turns(4, 6, 8);
    QkDump dump = random_dump(2, 2, 8, seq.total_tokens(), 58);
    const Block& cur_text = *seq.turn(5).text;
    const Block& hist_text = *seq.turn(3).text;
    for (uint64_t i = 0; i < cur_text.len; ++i)
        for (std::size_t c = 0; c < dump.row_stride(); ++c)
            dump.k_row(0, hist_text.start + i)[c] =
                dump.k_row(0, cur_text.start + i)[c];
    CurationPlan plan = text_block_match_plan(dump, seq, 1, 0, 1, 2);
    CHECK(plan.syn_turns().count(3) == 1);
}

TEST_CASE("orthogonal pooled keys give cosine zero") {
    InterleavedSequence seq = uniform_turns(1, 2, 4);
    QkDump dump = random_dump(1, 1, 4, seq.total_tokens(), 59);
    // history text pooled along axis 0, current text pooled along axis 1
    const Block& hist = *seq.turn(1).text;
    const Block& cur = *seq.turn(2).text;
    for (uint64_t i = 0; i < hist.len; ++i) {
        float* k = dump.k_row(0, hist.start + i);
        k[0] = 1.0f; k[1] = 0.0f; k[2] = 0.0f; k[3] = 0.0f;
    }
    for (uint64_t i = 0; i < cur.len; ++i) {
        float* k = dump.k_row(0, cur.start + i);
        k[0] = 0.0f; k[1] = 1.0f; k[2] = 0.0f; k[3] = 0.0f;
    }
    std::vector<std::string> warnings;
    CurationPlan plan = text_block_match_plan(dump, seq, 1, 0, 1, 1, &warnings);
    CHECK(plan.syn_turns() == std::set<int>{1});
}

TEST_CASE("text-block matching agrees with a cosine oracle") {
    InterleavedSequence seq = uniform_turns(6, 5, 8);
    QkDump dump = random_dump(2, 2, 8, seq.total_tokens(), 60);
    CurationPlan plan = text_block_match_plan(dump, seq, 2, 0, 1, 2);

    auto pooled = [&](const Block& b) {
        std::vector<double> p(dump.row_stride(), 0.0);
        for (uint64_t u = b.start; u < b.end(); ++u)
            for (std::size_t c = 0; c < p.size(); ++c)
                p[c] += dump.k_row(0, u)[c];
        for (auto& v : p) v /= static_cast<double>(b.len);
        return p;
    };
    auto cur_pool = pooled(*seq.turn(7).text);
    std::vector<std::pair<double, int>> rank;
    for (int ti = 1; ti <= 6; ++ti) {
        auto p = pooled(*seq.turn(ti).text);
        double dot = 0, na = 0, nb = 0;
        for (std::size_t c = 0; c < p.size(); ++c) {
            dot += p[c] * cur_pool[c];
            na += p[c] * p[c];
            nb += cur_pool[c] * cur_pool[c];
        }
        rank.emplace_back(-dot / std::sqrt(na * nb), ti);
    }
    std::sort(rank.begin(), rank.end());
    std::set<int> expect{1, rank[0].second, rank[1].second};
    CHECK(plan.syn_turns() == expect);
}

TEST_CASE("pooling arithmetic on the worked examples") {
    const std::vector<float> ramp{1, 2, 3, 4, 5, 6, 7, 8};
    const std::vector<float> avg =
        downsample_tokens(ramp.data(), 8, 1, 4, DiscardSpec::Interp::AvgPool);
    CHECK(avg == std::vector<float>{2.5f, 6.5f});
    const std::vector<float> mx =
        downsample_tokens(ramp.data(), 8, 1, 4, DiscardSpec::Interp::MaxPool);
    CHECK(mx == std::vector<float>{4.0f, 8.0f});
}

TEST_CASE("lerp resamples a ramp at closed-form positions") {
    // values x_i = 3 + 2 i; centers of 2 subintervals of [0, 7]: 1.75, 5.25
    std::vector<float> ramp(8);
    for (int i = 0; i < 8; ++i) ramp[i] = 3.0f + 2.0f * i;
    const std::vector<float> out =
        downsample_tokens(ramp.data(), 8, 1, 4, DiscardSpec::Interp::Lerp);
    REQUIRE(out.size() == 2);
    CHECK(out[0] == doctest::Approx(3.0 + 2.0 * 1.75).epsilon(1e-6));
    CHECK(out[1] == doctest::Approx(3.0 + 2.0 * 5.25).epsilon(1e-6));
}

TEST_CASE("compressed length is ceil(len / rate) for every rate") {
    Rng rng(61);
    for (int rate : {4, 8, 16}) {
        for (uint64_t len : {1ull, 3ull, 16ull, 17ull, 40ull}) {
            std::vector<float> keys(len * 6), values(len * 6);
            for (auto& x : keys) x = static_cast<float>(rng.gaussian());
            for (auto& x : values) x = static_cast<float>(rng.gaussian());
            Block b{BlockKind::Vae, 0, len, 1};
            for (auto interp : {DiscardSpec::Interp::AvgPool,
                                DiscardSpec::Interp::MaxPool,
                                DiscardSpec::Interp::Lerp}) {
                CompressedBlock cb = compress_block(b, keys, values, 6, rate, interp);
                CHECK(cb.out_len == (len + rate - 1) / rate);
                CHECK(cb.keys.size() == cb.out_len * 6);
            }
        }
    }
}

TEST_CASE("pooling respects window ranges and extrema") {
    Rng rng(62);
    const uint64_t len = 37;
    const std::size_t C = 4;
    std::vector<float> x(len * C);
    for (auto& v : x) v = static_cast<float>(rng.gaussian());
    const auto avg = downsample_tokens(x.data(), len, C, 8, DiscardSpec::Interp::AvgPool);
    const auto mx = downsample_tokens(x.data(), len, C, 8, DiscardSpec::Interp::MaxPool);
    const uint64_t out_len = (len + 7) / 8;
    for (uint64_t j = 0; j < out_len; ++j) {
        const uint64_t w0 = j * 8, w1 = std::min<uint64_t>(w0 + 8, len);
        for (std::size_t c = 0; c < C; ++c) {
            float lo = x[w0 * C + c], hi = x[w0 * C + c];
            for (uint64_t t = w0; t < w1; ++t) {
                lo = std::min(lo, x[t * C + c]);
                hi = std::max(hi, x[t * C + c]);
            }
            CHECK(avg[j * C + c] >= lo);
            CHECK(avg[j * C + c] <= hi);
            CHECK(mx[j * C + c] == hi);
        }
    }
}

TEST_CASE("budget parity holds for every drop policy") {
    InterleavedSequence seq = uniform_turns(10, 4, 16);
    QkDump dump = random_dump(2, 2, 8, seq.total_tokens(), 63);
    RunConfig cfg = two_layer_cfg(3, 3);
    const uint64_t max_block = 16;

    std::vector<PolicySpec> zoo;
    PolicySpec p;
    p.variant = PolicySpec::Variant::SlidingWindow; p.window_n = 3; zoo.push_back(p);
    p = {}; p.variant = PolicySpec::Variant::UniLongGen; zoo.push_back(p);
    p = {}; p.variant = PolicySpec::Variant::SingleProbe; p.probe_kind = BlockKind::Vae;
    p.probe_layer = 1; zoo.push_back(p);
    p = {}; p.variant = PolicySpec::Variant::TokenLevel; p.budget = 3; zoo.push_back(p);
    p = {}; p.variant = PolicySpec::Variant::GroupedToken; p.group_size = 8;
    p.budget = 3; zoo.push_back(p);

    for (const PolicySpec& spec : zoo) {
        PolicyResult res = build_policy(spec, dump, seq, cfg);
        for (const auto& layer : res.visibility.visible) {
            uint64_t vae_tokens = 0;
            for (uint64_t tok : layer)
                if (seq.kind_of(tok) == BlockKind::Vae) vae_tokens++;
            CHECK(vae_tokens <= (3 + 1) * max_block);
        }
    }
}

TEST_CASE("plans are pure functions of their inputs") {
    InterleavedSequence seq = uniform_turns(6, 4, 8);
    QkDump dump = random_dump(2, 2, 8, seq.total_tokens(), 64);
    RunConfig cfg = two_layer_cfg();
    for (auto variant : {PolicySpec::Variant::SlidingWindow,
                         PolicySpec::Variant::UniLongGen,
                         PolicySpec::Variant::TokenLevel}) {
        PolicySpec spec;
        spec.variant = variant;
        PolicyResult a = build_policy(spec, dump, seq, cfg);
        PolicyResult b = build_policy(spec, dump, seq, cfg);
        CHECK(a.visibility.to_json() == b.visibility.to_json());
    }
}

TEST_CASE("token budget collapses to the image-level plan when blocks dominate") {
    InterleavedSequence seq = uniform_turns(6, 4, 8);
    QkDump dump = random_dump(2, 2, 8, seq.total_tokens(), 65);
    RunConfig cfg = two_layer_cfg(2, 2);
    // plant strong alignment on all tokens of turns 2 and 5
    const Block& cur = seq.current_vae();
    std::vector<double> mean(dump.row_stride(), 0.0);
    for (uint64_t v = cur.start; v < cur.end(); ++v)
        for (std::size_t i = 0; i < mean.size(); ++i)
            mean[i] += dump.q_row(1, v)[i] / static_cast<double>(cur.len);
    for (int ti : {2, 5}) {
        const Block& b = *seq.turn(ti).vae;
        for (uint64_t u = b.start; u < b.end(); ++u)
            for (std::size_t i = 0; i < mean.size(); ++i)
                dump.k_row(1, u)[i] = static_cast<float>(10.0 * mean[i]);
    }
    LayerVisibility tok = token_level_plan(dump, seq, cfg, 2);
    CHECK(tok.visible[1] == tokens_of(seq, {2, 5}, BlockKind::Vae));
}

TEST_CASE("policy spec json round trip and validation") {
    PolicySpec spec = PolicySpec::from_json(
        {{"variant", "grouped_token"}, {"group_size", 32}, {"budget", 8}});
    CHECK(spec.group_size == 32);
    CHECK(PolicySpec::from_json(spec.to_json()).to_json() == spec.to_json());

    CHECK_THROWS_AS(PolicySpec::from_json({{"variant", "grouped_token"},
                                           {"group_size", 7}}),
                    ValidationError);
    CHECK_THROWS_AS(PolicySpec::from_json({{"variant", "nope"}}), ValidationError);
    CHECK_THROWS_AS(PolicySpec::from_json({{"variant", "dense_kv"}, {"zzz", 1}}),
                    ValidationError);

    PolicySpec oracle = PolicySpec::from_json(
        {{"variant", "semantic_oracle"}, {"labels", {{"1", 2}, {"2", 1}}}});
    CHECK(oracle.oracle_labels.at(2) == 1);
}

TEST_CASE("single-probe ranking over vit blocks") {
    InterleavedSequence seq = InterleavedSequence::build({
        {1, BlockKind::Text, 4}, {1, BlockKind::Vit, 6}, {1, BlockKind::Vae, 8},
        {2, BlockKind::Text, 4}, {2, BlockKind::Vit, 6}, {2, BlockKind::Vae, 8},
        {3, BlockKind::Text, 4}, {3, BlockKind::Vit, 6}, {3, BlockKind::Vae, 8},
        {4, BlockKind::Text, 4}, {4, BlockKind::Vae, 8},
    });
    QkDump dump = random_dump(2, 2, 8, seq.total_tokens(), 66);
    RunConfig cfg = two_layer_cfg(1, 1);
    // align turn 2's vit keys with the mean current query
    const Block& cur = seq.current_vae();
    std::vector<double> mean(dump.row_stride(), 0.0);
    for (uint64_t v = cur.start; v < cur.end(); ++v)
        for (std::size_t i = 0; i < mean.size(); ++i)
            mean[i] += dump.q_row(0, v)[i] / static_cast<double>(cur.len);
    const Block& vit2 = *seq.turn(2).vit;
    for (uint64_t u = vit2.start; u < vit2.end(); ++u)
        for (std::size_t i = 0; i < mean.size(); ++i)
            dump.k_row(0, u)[i] = static_cast<float>(8.0 * mean[i]);

    CurationPlan plan = single_probe_plan(dump, seq, cfg, BlockKind::Vit, 0, 1);
    CHECK(plan.syn_turns() == std::set<int>{1, 2});
}

TEST_CASE("dense visibility covers the whole history at every layer") {
    InterleavedSequence seq = uniform_turns(3, 4, 8);
    LayerVisibility vis = dense_visibility(seq, 2);
    CHECK(vis.visible[0].size() == seq.history_end());
    CHECK(vis.visible[1].size() == seq.history_end());
}
