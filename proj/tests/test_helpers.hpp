#pragma once

#include <cmath>
#include <set>
#include <vector>

#include "unilong/probe.hpp"
#include "unilong/qkio.hpp"
#include "unilong/rng.hpp"
#include "unilong/sequence.hpp"

namespace testutil {

using namespace unilong;

inline QkDump random_dump(uint32_t layers, uint32_t heads, uint32_t head_dim,
                          uint64_t num_tokens, uint64_t seed) {
    QkDump d;
    d.layers = layers;
    d.heads = heads;
    d.head_dim = head_dim;
    d.num_tokens = num_tokens;
    Rng rng(seed);
    const std::size_t n = num_tokens * d.row_stride();
    for (uint32_t l = 0; l < layers; ++l) {
        d.queries.emplace_back(n);
        for (auto& x : d.queries.back()) x = static_cast<float>(rng.gaussian());
        d.keys.emplace_back(n);
        for (auto& x : d.keys.back()) x = static_cast<float>(rng.gaussian());
    }
    return d;
}

// m history turns of {text, vae} plus the current turn
inline InterleavedSequence uniform_turns(int m, uint64_t text_len, uint64_t vae_len) {
    std::vector<BlockSpec> layout;
    for (int t = 1; t <= m + 1; ++t) {
        layout.push_back({t, BlockKind::Text, text_len});
        layout.push_back({t, BlockKind::Vae, vae_len});
    }
    return InterleavedSequence::build(layout);
}

// random layout: 2..max_turns turns, random block sizes, some turns
// missing text or vae blocks (never the current one)
inline InterleavedSequence random_layout(Rng& rng, int max_turns = 10,
                                         uint64_t max_len = 24) {
    const int m = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(max_turns)));
    std::vector<BlockSpec> layout;
    for (int t = 1; t <= m; ++t) {
        const bool drop_text = rng.uniform01() < 0.15;
        const bool drop_vae = rng.uniform01() < 0.15;
        if (!drop_text)
            layout.push_back({t, BlockKind::Text, 1 + rng.below(max_len)});
        if (rng.uniform01() < 0.2)
            layout.push_back({t, BlockKind::Special, 1 + rng.below(3)});
        if (!drop_vae || drop_text) // keep every turn non-empty
            layout.push_back({t, BlockKind::Vae, 1 + rng.below(max_len)});
    }
    layout.push_back({m + 1, BlockKind::Text, 1 + rng.below(max_len)});
    layout.push_back({m + 1, BlockKind::Vae, 1 + rng.below(max_len)});
    return InterleavedSequence::build(layout);
}

// naive Eq-style oracle: mean of current queries, then triple loop
inline double oracle_relevance(const QkDump& dump, const InterleavedSequence& seq,
                               const Block& block, uint32_t layer) {
    const uint32_t H = dump.heads, d = dump.head_dim;
    const Block& cur = seq.current_vae();
    std::vector<double> mean(static_cast<std::size_t>(H) * d, 0.0);
    for (uint64_t v = cur.start; v < cur.end(); ++v)
        for (uint32_t h = 0; h < H; ++h)
            for (uint32_t i = 0; i < d; ++i)
                mean[h * d + i] += dump.q_row(layer, v)[h * d + i];
    for (auto& x : mean) x /= static_cast<double>(cur.len);

    double total = 0.0;
    for (uint64_t u = block.start; u < block.end(); ++u) {
        double head_avg = 0.0;
        for (uint32_t h = 0; h < H; ++h) {
            double dot = 0.0;
            for (uint32_t i = 0; i < d; ++i)
                dot += mean[h * d + i] *
                       static_cast<double>(dump.k_row(layer, u)[h * d + i]);
            head_avg += dot;
        }
        total += head_avg / (static_cast<double>(H) * std::sqrt(static_cast<double>(d)));
    }
    return total / static_cast<double>(block.len);
}

inline double rel_err(double got, double want) {
    const double denom = std::max(std::abs(want), 1e-30);
    return std::abs(got - want) / denom;
}

// exact binomial tail P(X >= k) for X ~ Binomial(n, 1/2)
inline double sign_test_p(int k, int n) {
    double p = 0.0;
    for (int i = k; i <= n; ++i) {
        double logc = 0.0;
        for (int j = 0; j < i; ++j)
            logc += std::log(static_cast<double>(n - j)) -
                    std::log(static_cast<double>(j + 1));
        p += std::exp(logc - n * std::log(2.0));
    }
    return p;
}

} // namespace testutil
