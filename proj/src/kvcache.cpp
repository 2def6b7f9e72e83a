#include "unilong/kvcache.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include <nlohmann/json.hpp>

#include "unilong/rng.hpp"

namespace unilong {

KvCache::KvCache(uint32_t layers, uint32_t heads, uint32_t head_dim)
    : heads_(heads), head_dim_(head_dim), layers_(layers) {}

KvCache KvCache::from_dump(const QkDump& dump, ValueSource vs, uint64_t value_seed) {
    KvCache cache(dump.layers, dump.heads, dump.head_dim);
    const std::size_t stride = dump.row_stride();
    Rng rng(value_seed);
    for (uint32_t l = 0; l < dump.layers; ++l) {
        LayerData& ld = cache.layers_[l];
        ld.tokens.resize(dump.num_tokens);
        for (uint64_t t = 0; t < dump.num_tokens; ++t) ld.tokens[t] = t;
        ld.keys = dump.keys[l];
        if (vs == ValueSource::CopyKeys) {
            ld.values = dump.keys[l];
        } else {
            ld.values.resize(dump.num_tokens * stride);
            for (auto& v : ld.values) v = static_cast<float>(rng.gaussian());
        }
    }
    return cache;
}

uint64_t KvCache::total_entries() const {
    uint64_t n = 0;
    for (const LayerData& ld : layers_) n += ld.tokens.size();
    return n;
}

bool KvCache::holds(uint32_t l, uint64_t token) const {
    const auto& toks = layers_.at(l).tokens;
    return std::binary_search(toks.begin(), toks.end(), token);
}

void KvCache::append_rows(uint64_t first_token, uint64_t len,
                          const std::vector<std::vector<float>>& keys,
                          const std::vector<std::vector<float>>& values) {
    require(keys.size() == layers_.size() && values.size() == layers_.size(),
            "slice layer count mismatch");
    const std::size_t stride = row_stride();
    for (uint32_t l = 0; l < layer_count(); ++l) {
        require(keys[l].size() == len * stride && values[l].size() == len * stride,
                "slice shape mismatch at layer " + std::to_string(l));
        LayerData& ld = layers_[l];
        require(ld.tokens.empty() || ld.tokens.back() < first_token,
                "appended tokens must extend the cache");
        for (uint64_t t = 0; t < len; ++t) ld.tokens.push_back(first_token + t);
        ld.keys.insert(ld.keys.end(), keys[l].begin(), keys[l].end());
        ld.values.insert(ld.values.end(), values[l].begin(), values[l].end());
    }
}

void KvCache::append_row(uint32_t l, uint64_t token, const float* key,
                         const float* value) {
    LayerData& ld = layers_.at(l);
    require(ld.tokens.empty() || ld.tokens.back() < token,
            "appended tokens must extend the cache");
    ld.tokens.push_back(token);
    ld.keys.insert(ld.keys.end(), key, key + row_stride());
    ld.values.insert(ld.values.end(), value, value + row_stride());
}

namespace {

// copy the selected rows of one layer into a fresh LayerData
void copy_rows(const KvCache::LayerData& src, std::size_t stride,
               const std::vector<std::size_t>& rows, KvCache::LayerData& dst) {
    dst.tokens.reserve(rows.size());
    dst.keys.reserve(rows.size() * stride);
    dst.values.reserve(rows.size() * stride);
    for (std::size_t r : rows) {
        dst.tokens.push_back(src.tokens[r]);
        dst.keys.insert(dst.keys.end(), src.keys.begin() + r * stride,
                        src.keys.begin() + (r + 1) * stride);
        dst.values.insert(dst.values.end(), src.values.begin() + r * stride,
                          src.values.begin() + (r + 1) * stride);
    }
}

std::vector<std::size_t> select_rows(const KvCache::LayerData& src,
                                     const std::vector<uint64_t>& visible,
                                     uint64_t history_end, uint32_t layer) {
    std::vector<std::size_t> rows;
    for (uint64_t tok : visible) {
        auto it = std::lower_bound(src.tokens.begin(), src.tokens.end(), tok);
        require(it != src.tokens.end() && *it == tok,
                "plan references token " + std::to_string(tok) +
                    " absent from cache layer " + std::to_string(layer));
        rows.push_back(static_cast<std::size_t>(it - src.tokens.begin()));
    }
    // the current turn lies outside the plan's domain and always stays
    auto cur = std::lower_bound(src.tokens.begin(), src.tokens.end(), history_end);
    for (auto it = cur; it != src.tokens.end(); ++it)
        rows.push_back(static_cast<std::size_t>(it - src.tokens.begin()));
    return rows;
}

} // namespace

KvCache KvCache::filtered(const LayerVisibility& vis) const {
    require(vis.layer_count() == layer_count(),
            "plan covers " + std::to_string(vis.layer_count()) +
                " layers, cache has " + std::to_string(layer_count()));
    KvCache out(layer_count(), heads(), head_dim());
    for (uint32_t l = 0; l < layer_count(); ++l) {
        const auto rows = select_rows(layers_[l], vis.visible[l],
                                      vis.history_end, l);
        copy_rows(layers_[l], row_stride(), rows, out.layers_[l]);
    }
    return out;
}

KvCache apply_plan(const KvCache& cache, const LayerVisibility& vis) {
    return cache.filtered(vis);
}

KvCache apply_plan_compressed(const KvCache& cache, const LayerVisibility& vis,
                              const InterleavedSequence& seq, int rate,
                              DiscardSpec::Interp interp) {
    KvCache out = apply_plan(cache, vis);
    const std::size_t stride = cache.row_stride();

    for (uint32_t l = 0; l < cache.layer_count(); ++l) {
        const std::vector<uint64_t>& visible = vis.visible[l];
        uint64_t synth_id = seq.total_tokens();
        for (int ti = 1; ti <= seq.history_turn_count(); ++ti) {
            const Turn& t = seq.turn(ti);
            if (!t.vae) continue;
            const Block& b = *t.vae;
            const bool any_visible =
                std::any_of(visible.begin(), visible.end(),
                            [&](uint64_t tok) { return b.contains(tok); });
            if (any_visible) continue; // intact or partially kept: not compressed

            std::vector<float> keys(b.len * stride), values(b.len * stride);
            const KvCache::LayerData& src = cache.layer(l);
            for (uint64_t i = 0; i < b.len; ++i) {
                auto it = std::lower_bound(src.tokens.begin(), src.tokens.end(),
                                           b.start + i);
                require(it != src.tokens.end() && *it == b.start + i,
                        "cache is missing token " + std::to_string(b.start + i));
                const std::size_t r = static_cast<std::size_t>(it - src.tokens.begin());
                std::copy(src.keys.begin() + r * stride,
                          src.keys.begin() + (r + 1) * stride,
                          keys.begin() + i * stride);
                std::copy(src.values.begin() + r * stride,
                          src.values.begin() + (r + 1) * stride,
                          values.begin() + i * stride);
            }
            CompressedBlock cb = compress_block(b, keys, values, stride, rate, interp);
            for (uint64_t i = 0; i < cb.out_len; ++i)
                out.append_row(l, synth_id + i, cb.keys.data() + i * stride,
                               cb.values.data() + i * stride);
            synth_id += cb.out_len;
        }
    }
    return out;
}

// --- TriContext ---------------------------------------------------------------

KvSlice KvSlice::zeros(uint32_t layers, uint32_t heads, uint32_t head_dim,
                       uint64_t len) {
    KvSlice s;
    s.len = len;
    const std::size_t n = len * static_cast<std::size_t>(heads) * head_dim;
    s.keys.assign(layers, std::vector<float>(n, 0.0f));
    s.values.assign(layers, std::vector<float>(n, 0.0f));
    return s;
}

KvSlice KvSlice::from_dump(const QkDump& dump, const Block& block, ValueSource vs,
                           uint64_t value_seed) {
    require(block.end() <= dump.num_tokens, "block exceeds dump");
    KvSlice s;
    s.len = block.len;
    const std::size_t stride = dump.row_stride();
    Rng rng(value_seed);
    for (uint32_t l = 0; l < dump.layers; ++l) {
        const float* first = dump.k_row(l, block.start);
        s.keys.emplace_back(first, first + block.len * stride);
        if (vs == ValueSource::CopyKeys) {
            s.values.push_back(s.keys.back());
        } else {
            std::vector<float> v(block.len * stride);
            for (auto& x : v) x = static_cast<float>(rng.gaussian());
            s.values.push_back(std::move(v));
        }
    }
    return s;
}

TriContext::TriContext(uint32_t layers, uint32_t heads, uint32_t head_dim)
    : full_(layers, heads, head_dim),
      text_cfg_(layers, heads, head_dim),
      img_cfg_(layers, heads, head_dim) {}

void TriContext::ingest_text(const Block& block, const KvSlice& data) {
    require(block.start == next_token_,
            "sequencing error: expected token " + std::to_string(next_token_) +
                ", got block at " + std::to_string(block.start));
    require(block.kind == BlockKind::Text || block.kind == BlockKind::Special,
            "ingest_text expects a text block");
    require(data.len == block.len, "slice length mismatch");
    text_cfg_ = full_; // snapshot before the text lands
    full_.append_rows(block.start, block.len, data.keys, data.values);
    img_cfg_.append_rows(block.start, block.len, data.keys, data.values);
    next_token_ = block.end();
}

void TriContext::ingest_image(const Block& block, const KvSlice& data) {
    require(block.start == next_token_,
            "sequencing error: expected token " + std::to_string(next_token_) +
                ", got block at " + std::to_string(block.start));
    require(block.kind == BlockKind::Vae || block.kind == BlockKind::Vit,
            "ingest_image expects an image block");
    require(data.len == block.len, "slice length mismatch");
    full_.append_rows(block.start, block.len, data.keys, data.values);
    // image tokens never enter img_cfg; text_cfg catches up after the image
    text_cfg_ = full_;
    next_token_ = block.end();
}

nlohmann::json GuidanceParams::to_json() const {
    return {{"cfg_text_scale", cfg_text_scale},
            {"cfg_img_scale", cfg_img_scale},
            {"cfg_interval", {cfg_interval_lo, cfg_interval_hi}},
            {"num_timesteps", num_timesteps},
            {"timestep_shift", timestep_shift}};
}

// --- cost model -----------------------------------------------------------------

CostModel attention_cost(const KvCache& cache, uint64_t current_len, int repeats,
                         uint64_t history_tokens, uint64_t query_seed) {
    require(repeats >= 1, "repeats must be >= 1");
    const uint32_t H = cache.heads(), d = cache.head_dim();
    const std::size_t stride = cache.row_stride();

    CostModel cm;
    uint64_t visible = 0;
    for (uint32_t l = 0; l < cache.layer_count(); ++l) visible += cache.entries(l);
    cm.attention_flops = 4ull * H * d * visible * current_len;
    cm.visible_kv_fraction =
        history_tokens > 0
            ? static_cast<double>(visible) /
                  (static_cast<double>(cache.layer_count()) *
                   static_cast<double>(history_tokens))
            : 0.0;

    // synthetic queries; the kernel itself is the measurement target
    Rng rng(query_seed);
    std::vector<float> queries(current_len * stride);
    for (auto& q : queries) q = static_cast<float>(rng.gaussian());
    std::vector<float> out(current_len * stride);
    std::vector<double> logits;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));

    volatile double sink = 0.0; // keep the kernel alive under optimization
    std::vector<double> times;
    for (int rep = 0; rep <= repeats; ++rep) {
        const auto t0 = std::chrono::steady_clock::now();
        std::fill(out.begin(), out.end(), 0.0f);
        for (uint32_t l = 0; l < cache.layer_count(); ++l) {
            const KvCache::LayerData& ld = cache.layer(l);
            const std::size_t n = ld.tokens.size();
            if (n == 0) continue;
            logits.resize(n);
            for (uint64_t v = 0; v < current_len; ++v) {
                for (uint32_t h = 0; h < H; ++h) {
                    const float* q = queries.data() + v * stride +
                                     static_cast<std::size_t>(h) * d;
                    double maxlog = -1e300;
                    for (std::size_t j = 0; j < n; ++j) {
                        const float* k = ld.keys.data() + j * stride +
                                         static_cast<std::size_t>(h) * d;
                        double dot = 0.0;
                        for (uint32_t i = 0; i < d; ++i)
                            dot += static_cast<double>(q[i]) * static_cast<double>(k[i]);
                        logits[j] = dot * scale;
                        if (logits[j] > maxlog) maxlog = logits[j];
                    }
                    double z = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        logits[j] = std::exp(logits[j] - maxlog);
                        z += logits[j];
                    }
                    float* o = out.data() + v * stride + static_cast<std::size_t>(h) * d;
                    for (std::size_t j = 0; j < n; ++j) {
                        const float w = static_cast<float>(logits[j] / z);
                        const float* val = ld.values.data() + j * stride +
                                           static_cast<std::size_t>(h) * d;
                        for (uint32_t i = 0; i < d; ++i) o[i] += w * val[i];
                    }
                }
            }
        }
        sink = sink + (out.empty() ? 0.0 : out[0]);
        const auto t1 = std::chrono::steady_clock::now();
        if (rep == 0) continue; // warm-up
        times.push_back(
            std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    (void)sink;
    std::sort(times.begin(), times.end());
    cm.wall_clock_ms = times[times.size() / 2];
    return cm;
}

} // namespace unilong
