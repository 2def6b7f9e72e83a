#include "unilong/synthlab.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "unilong/diagnostics.hpp"
#include "unilong/rng.hpp"

namespace unilong {

namespace {

constexpr double kQueryGain = 4.0;     // current-query alignment with the subject
constexpr double kNoiseStd = 1.0;      // isotropic key/query noise
constexpr double kTiltGain = 2.0;      // depth tilt strength
constexpr double kHijackShare = 0.1;   // single-column share counted as a hijack
constexpr uint64_t kProxyRows = 32;    // query subsample for proxy estimation
constexpr double kStepNoiseStd = 0.5;  // per-step query perturbation

double tilt_at(const SynthConfig& cfg, uint32_t layer) {
    if (!cfg.depth_tilt.empty()) return cfg.depth_tilt.at(layer);
    if (cfg.layers <= 1) return 1.0;
    return static_cast<double>(layer) / static_cast<double>(cfg.layers - 1);
}

} // namespace

void SynthConfig::validate() const {
    require(m >= 1, "need at least one image turn");
    require(tokens_per_image >= 1 && tokens_per_text >= 1, "token counts must be positive");
    require(layers >= 1 && heads >= 1 && head_dim >= 1, "dims must be positive");
    require(steps >= 1, "steps must be >= 1");
    require(outlier_prob >= 0.0 && outlier_prob < 0.1,
            "outlier_prob must stay in the rare-event regime [0, 0.1)");
    require(outlier_prob == 0.0 || outlier_gain > 0.0,
            "outliers enabled but outlier_gain is zero");
    for (int t : planted_turns)
        require(t >= 1 && t <= m, "planted turn " + std::to_string(t) + " outside 1..m");
    if (!depth_tilt.empty())
        require(depth_tilt.size() == layers, "depth_tilt needs one entry per layer");
}

SynthOutput generate(const SynthConfig& cfg) {
    cfg.validate();

    std::vector<BlockSpec> layout;
    for (int t = 1; t <= cfg.m; ++t) {
        const bool planted = cfg.planted_turns.count(t) > 0;
        if (cfg.text_only_distractors && !planted) {
            // token-matched text-only turn
            layout.push_back({t, BlockKind::Text,
                              static_cast<uint64_t>(cfg.tokens_per_text) +
                                  cfg.tokens_per_image});
        } else {
            layout.push_back({t, BlockKind::Text, cfg.tokens_per_text});
            layout.push_back({t, BlockKind::Vae, cfg.tokens_per_image});
        }
    }
    const int cur = cfg.m + 1;
    layout.push_back({cur, BlockKind::Text, cfg.tokens_per_text});
    layout.push_back({cur, BlockKind::Vae, cfg.tokens_per_image});
    InterleavedSequence seq = InterleavedSequence::build(layout);

    QkDump dump;
    dump.layers = cfg.layers;
    dump.heads = cfg.heads;
    dump.head_dim = cfg.head_dim;
    dump.num_tokens = seq.total_tokens();
    const std::size_t stride = dump.row_stride();
    dump.queries.assign(cfg.layers,
                        std::vector<float>(dump.num_tokens * stride, 0.0f));
    dump.keys = dump.queries;

    const uint32_t H = cfg.heads, d = cfg.head_dim;
    Rng rng(cfg.seed);

    for (uint32_t l = 0; l < cfg.layers; ++l) {
        std::vector<std::vector<double>> subject(H);
        for (uint32_t h = 0; h < H; ++h) subject[h] = rng.unit_vec(d);
        const double tilt = tilt_at(cfg, l);

        for (const Block& b : seq.layout()) {
            const bool planted_turn = b.turn <= cfg.m &&
                                      cfg.planted_turns.count(b.turn) > 0;
            for (uint64_t tok = b.start; tok < b.end(); ++tok) {
                float* q = dump.q_row(l, tok);
                float* k = dump.k_row(l, tok);
                // every image slot's queries carry the generation intent,
                // so replaying any turn as the current one probes the same
                // subject direction the final image does
                const bool subject_query = b.kind == BlockKind::Vae;
                for (uint32_t h = 0; h < H; ++h) {
                    const std::vector<double>& s = subject[h];
                    for (uint32_t i = 0; i < d; ++i) {
                        double qv = rng.gaussian(0.0, kNoiseStd);
                        if (subject_query) qv += kQueryGain * s[i];
                        q[h * d + i] = static_cast<float>(qv);
                    }
                }
                const bool history = b.turn <= cfg.m;
                const bool outlier = history && b.kind == BlockKind::Vae &&
                                     !planted_turn && cfg.outlier_prob > 0.0 &&
                                     rng.uniform01() < cfg.outlier_prob;
                for (uint32_t h = 0; h < H; ++h) {
                    const std::vector<double>& s = subject[h];
                    if (outlier) {
                        std::vector<double> g = rng.unit_vec(d);
                        double norm = 0.0;
                        for (uint32_t i = 0; i < d; ++i) {
                            g[i] += s[i];
                            norm += g[i] * g[i];
                        }
                        norm = std::sqrt(norm);
                        for (uint32_t i = 0; i < d; ++i)
                            k[h * d + i] =
                                static_cast<float>(cfg.outlier_gain * g[i] / norm);
                        continue;
                    }
                    double shift = 0.0;
                    if (history && planted_turn &&
                        (b.kind == BlockKind::Vae || b.kind == BlockKind::Text))
                        shift += cfg.subject_gain;
                    if (b.kind == BlockKind::Text) shift += (1.0 - tilt) * kTiltGain;
                    if (b.kind == BlockKind::Vae) shift += tilt * kTiltGain;
                    for (uint32_t i = 0; i < d; ++i)
                        k[h * d + i] = static_cast<float>(
                            rng.gaussian(0.0, kNoiseStd) + shift * s[i]);
                }
            }
        }
    }
    return {std::move(dump), std::move(seq)};
}

RunConfig synth_run_config(const SynthConfig& cfg, int k_grd, int k_img) {
    RunConfig rc;
    rc.ell_grd = 0;
    rc.ell_syn = cfg.layers - 1;
    if (rc.ell_syn == rc.ell_grd) rc.ell_syn = rc.ell_grd + 1; // single-layer dumps
    rc.k_grd = k_grd;
    rc.k_img = k_img;
    rc.seed = cfg.seed;
    return rc;
}

double hijack_share(uint64_t n_keys, double delta) {
    require(n_keys >= 2, "need at least two keys");
    return 1.0 / (1.0 + static_cast<double>(n_keys - 1) * std::exp(-delta));
}

// --- horizon harness ---------------------------------------------------------

namespace {

// prefix view: turns 1..slot with turn `slot` as the current one; global
// token indices are unchanged because the layout is a prefix
InterleavedSequence prefix_sequence(const InterleavedSequence& full, int slot) {
    std::vector<BlockSpec> layout;
    for (const Block& b : full.layout()) {
        if (b.turn > slot) break;
        layout.push_back({b.turn, b.kind, b.len});
    }
    return InterleavedSequence::build(layout);
}

struct ContextColumn {
    int turn = 0;
    BlockKind kind = BlockKind::Text;
    const float* key = nullptr; // layer-specific row slice, H*d floats
};

// visible context at the synthesis layer, with compressed rows attributed
// to their source blocks when the policy compresses instead of dropping
std::vector<ContextColumn> build_context(const QkDump& dump,
                                         const InterleavedSequence& seq,
                                         const PolicyResult& pol, uint32_t layer,
                                         std::vector<std::vector<float>>& storage) {
    std::vector<ContextColumn> cols;
    for (uint64_t tok : pol.visibility.visible[layer]) {
        ContextColumn c;
        c.turn = seq.turn_of(tok);
        c.kind = seq.kind_of(tok);
        c.key = dump.k_row(layer, tok);
        cols.push_back(c);
    }
    if (pol.discard.kind == DiscardSpec::Kind::Compress) {
        const std::size_t stride = dump.row_stride();
        const auto& visible = pol.visibility.visible[layer];
        for (int ti = 1; ti <= seq.history_turn_count(); ++ti) {
            const Turn& t = seq.turn(ti);
            if (!t.vae) continue;
            const Block& b = *t.vae;
            const bool any_visible =
                std::any_of(visible.begin(), visible.end(),
                            [&](uint64_t tok) { return b.contains(tok); });
            if (any_visible) continue;
            std::vector<float> keys(dump.k_row(layer, b.start),
                                    dump.k_row(layer, b.start) + b.len * stride);
            storage.push_back(downsample_tokens(keys.data(), b.len, stride,
                                                pol.discard.rate,
                                                pol.discard.interp));
            const std::vector<float>& rows = storage.back();
            for (std::size_t i = 0; i * stride < rows.size(); ++i)
                cols.push_back({ti, BlockKind::Vae, rows.data() + i * stride});
        }
    }
    return cols;
}

} // namespace

namespace {

DegradationProxy measure_slot_on(const SynthOutput& out, const SynthConfig& cfg,
                                 const PolicySpec& policy, const RunConfig& rcfg,
                                 int slot) {
    require(slot >= 1 && slot <= cfg.m + 1, "slot outside 1..m+1");
    const InterleavedSequence seq =
        slot == cfg.m + 1 ? out.seq : prefix_sequence(out.seq, slot);
    const QkDump& dump = out.dump;

    DegradationProxy proxy;
    proxy.image_index = slot;
    if (seq.history_turn_count() == 0) return proxy;

    PolicyResult pol = build_policy(policy, dump, seq, rcfg);
    const uint32_t layer = rcfg.ell_syn;
    std::vector<std::vector<float>> compressed_storage;
    const std::vector<ContextColumn> cols =
        build_context(dump, seq, pol, layer, compressed_storage);
    proxy.visible_fraction =
        seq.history_end() > 0
            ? static_cast<double>(pol.visibility.visible[layer].size()) /
                  static_cast<double>(seq.history_end())
            : 0.0;
    if (cols.empty()) return proxy;

    const Block& cur = seq.current_vae();
    const uint32_t H = dump.heads, d = dump.head_dim;
    const std::size_t stride = dump.row_stride();
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));

    // strided query subsample
    std::vector<uint64_t> rows;
    const uint64_t n_rows = std::min<uint64_t>(kProxyRows, cur.len);
    for (uint64_t i = 0; i < n_rows; ++i)
        rows.push_back(cur.start + i * cur.len / n_rows);

    Rng step_rng(cfg.seed ^ (0x9E3779B97F4A7C15ull * static_cast<uint64_t>(slot)));
    std::vector<double> wbar(cols.size());
    std::vector<double> logits(cols.size());
    std::vector<float> qbuf(stride);

    double pollution_acc = 0.0, grounding_acc = 0.0, entropy_acc = 0.0;
    for (int step = 0; step < cfg.steps; ++step) {
        std::fill(wbar.begin(), wbar.end(), 0.0);
        double entropy_sum = 0.0;
        for (uint64_t row : rows) {
            const float* q0 = dump.q_row(layer, row);
            for (std::size_t i = 0; i < stride; ++i) {
                double qv = q0[i];
                if (step > 0) qv += step_rng.gaussian(0.0, kStepNoiseStd);
                qbuf[i] = static_cast<float>(qv);
            }
            for (uint32_t h = 0; h < H; ++h) {
                const float* q = qbuf.data() + static_cast<std::size_t>(h) * d;
                double maxlog = -1e300;
                for (std::size_t c = 0; c < cols.size(); ++c) {
                    const float* k = cols[c].key + static_cast<std::size_t>(h) * d;
                    double dot = 0.0;
                    for (uint32_t i = 0; i < d; ++i)
                        dot += static_cast<double>(q[i]) * static_cast<double>(k[i]);
                    logits[c] = dot * scale;
                    maxlog = std::max(maxlog, logits[c]);
                }
                double z = 0.0;
                for (double& lg : logits) { lg = std::exp(lg - maxlog); z += lg; }
                double hrow = 0.0;
                for (std::size_t c = 0; c < cols.size(); ++c) {
                    const double w = logits[c] / z;
                    wbar[c] += w;
                    if (w > 0.0) hrow -= w * std::log(w);
                }
                entropy_sum += hrow;
            }
        }
        const double denom = static_cast<double>(rows.size()) * H;
        double planted_vae = 0.0, other_vae = 0.0, max_other = 0.0;
        for (std::size_t c = 0; c < cols.size(); ++c) {
            const double w = wbar[c] / denom;
            if (cols[c].kind != BlockKind::Vae) continue;
            if (cfg.planted_turns.count(cols[c].turn) > 0) {
                planted_vae += w;
            } else {
                other_vae += w;
                max_other = std::max(max_other, w);
            }
        }
        pollution_acc += other_vae;
        grounding_acc += planted_vae;
        entropy_acc += entropy_sum / denom;
        if (max_other > kHijackShare) proxy.hijack_events++;
    }
    proxy.pollution = pollution_acc / cfg.steps;
    proxy.grounding = grounding_acc / cfg.steps;
    proxy.entropy = entropy_acc / cfg.steps;
    return proxy;
}

} // namespace

DegradationProxy measure_slot(const SynthConfig& cfg, const PolicySpec& policy,
                              const RunConfig& rcfg, int slot) {
    return measure_slot_on(generate(cfg), cfg, policy, rcfg, slot);
}

std::vector<DegradationProxy> run_horizon(const SynthConfig& cfg,
                                          const PolicySpec& policy,
                                          const RunConfig& rcfg) {
    const SynthOutput out = generate(cfg);
    std::vector<DegradationProxy> series;
    for (int slot = 1; slot <= cfg.m; ++slot) {
        const Turn& t = out.seq.turn(slot);
        if (!t.vae) continue; // text-only turns are not image slots
        series.push_back(measure_slot_on(out, cfg, policy, rcfg, slot));
    }
    return series;
}

// --- key-reference erosion -----------------------------------------------------

std::vector<double> reference_erosion_sweep(const SynthConfig& base,
                                            int max_distractors, int seeds) {
    require(max_distractors >= 0, "negative distractor count");
    require(seeds >= 1, "need at least one seed");

    SynthConfig cfg = base;
    cfg.m = max_distractors + 1; // turn 1 is the reference
    cfg.planted_turns.clear();   // exchangeable images by construction
    cfg.subject_gain = 0.0;
    cfg.outlier_prob = 0.0;
    cfg.outlier_gain = 0.0;

    std::vector<double> mass(static_cast<std::size_t>(max_distractors) + 1, 0.0);
    for (int sd = 0; sd < seeds; ++sd) {
        SynthConfig c = cfg;
        c.seed = base.seed + static_cast<uint64_t>(sd);
        SynthOutput out = generate(c);
        const QkDump& dump = out.dump;
        const InterleavedSequence& seq = out.seq;
        const uint32_t layer = dump.layers - 1;
        const uint32_t H = dump.heads, d = dump.head_dim;
        const Block& cur = seq.current_vae();
        const double scale = 1.0 / std::sqrt(static_cast<double>(d));

        const uint64_t n_rows = std::min<uint64_t>(kProxyRows, cur.len);
        std::vector<uint64_t> rows;
        for (uint64_t i = 0; i < n_rows; ++i)
            rows.push_back(cur.start + i * cur.len / n_rows);

        // per (row, head, turn): exp-sums over the turn's vae and text
        // columns, shifted by the (row, head) max logit over all history
        const int turns = seq.history_turn_count();
        std::vector<double> vae_sum(rows.size() * H * turns, 0.0);
        std::vector<double> txt_sum(rows.size() * H * turns, 0.0);
        std::vector<double> logits(seq.history_end());
        for (std::size_t ri = 0; ri < rows.size(); ++ri) {
            for (uint32_t h = 0; h < H; ++h) {
                const float* q = dump.q_row(layer, rows[ri]) +
                                 static_cast<std::size_t>(h) * d;
                double maxlog = -1e300;
                for (uint64_t u = 0; u < seq.history_end(); ++u) {
                    const float* k =
                        dump.k_row(layer, u) + static_cast<std::size_t>(h) * d;
                    double dot = 0.0;
                    for (uint32_t i = 0; i < d; ++i)
                        dot += static_cast<double>(q[i]) * static_cast<double>(k[i]);
                    logits[u] = dot * scale;
                    maxlog = std::max(maxlog, logits[u]);
                }
                for (int ti = 1; ti <= turns; ++ti) {
                    const Turn& t = seq.turn(ti);
                    double vs = 0.0, ts = 0.0;
                    if (t.vae)
                        for (uint64_t u = t.vae->start; u < t.vae->end(); ++u)
                            vs += std::exp(logits[u] - maxlog);
                    if (t.text)
                        for (uint64_t u = t.text->start; u < t.text->end(); ++u)
                            ts += std::exp(logits[u] - maxlog);
                    const std::size_t idx = (ri * H + h) * turns + (ti - 1);
                    vae_sum[idx] = vs;
                    txt_sum[idx] = ts;
                }
            }
        }

        // sweep prefixes: n distractors means turns 1..n+1 in context
        for (int n = 0; n <= max_distractors; ++n) {
            double ref = 0.0, all_vae = 0.0;
            for (std::size_t ri = 0; ri < rows.size(); ++ri) {
                for (uint32_t h = 0; h < H; ++h) {
                    const std::size_t b = (ri * H + h) * turns;
                    double z = 0.0, vae_total = 0.0;
                    for (int ti = 0; ti <= n; ++ti) {
                        z += vae_sum[b + ti] + txt_sum[b + ti];
                        vae_total += vae_sum[b + ti];
                    }
                    if (z <= 0.0) continue;
                    ref += vae_sum[b] / z;
                    all_vae += vae_total / z;
                }
            }
            mass[static_cast<std::size_t>(n)] += all_vae > 0.0 ? ref / all_vae : 0.0;
        }
    }
    for (double& v : mass) v /= seeds;
    return mass;
}

// --- recency-bias fixture --------------------------------------------------------

SynthOutput generate_recency_biased(uint64_t seed) {
    constexpr int kTurns = 6;
    constexpr int kPlanted = 2;
    constexpr uint32_t kTpi = 64, kTpt = 8;
    constexpr uint32_t kLayers = 2, kHeads = 4, kDim = 16;
    constexpr double kSubjectGain = 1.0;
    constexpr double kMildAlign = 0.3;   // recent turn's background keys
    constexpr int kOutliers = 12;        // recent keys matched to query noise
    constexpr double kOutlierGain = 14.0;

    SynthConfig cfg;
    cfg.m = kTurns;
    cfg.tokens_per_image = kTpi;
    cfg.tokens_per_text = kTpt;
    cfg.planted_turns = {kPlanted};
    cfg.subject_gain = kSubjectGain;
    cfg.depth_tilt.assign(kLayers, 0.0); // no tilt; effects are planted by hand
    cfg.seed = seed;
    cfg.layers = kLayers;
    cfg.heads = kHeads;
    cfg.head_dim = kDim;
    SynthOutput out = generate(cfg);

    // rewrite the most recent history turn at the probing layer
    const uint32_t layer = kLayers - 1;
    const InterleavedSequence& seq = out.seq;
    const Block& recent = *seq.turn(kTurns).vae;
    const Block& cur = seq.current_vae();
    Rng rng(seed ^ 0xABCDEF1234567890ull);

    // recover the per-head subject direction from the mean current query
    const uint32_t H = kHeads, d = kDim;
    std::vector<std::vector<double>> subject(H, std::vector<double>(d, 0.0));
    for (uint64_t tok = cur.start; tok < cur.end(); ++tok) {
        const float* q = out.dump.q_row(layer, tok);
        for (uint32_t h = 0; h < H; ++h)
            for (uint32_t i = 0; i < d; ++i) subject[h][i] += q[h * d + i];
    }
    for (uint32_t h = 0; h < H; ++h) {
        double norm = 0.0;
        for (double v : subject[h]) norm += v * v;
        norm = std::sqrt(norm);
        for (double& v : subject[h]) v /= norm;
    }

    // mildly aligned background keys
    for (uint64_t tok = recent.start; tok < recent.end(); ++tok) {
        float* k = out.dump.k_row(layer, tok);
        for (uint32_t h = 0; h < H; ++h)
            for (uint32_t i = 0; i < d; ++i)
                k[h * d + i] = static_cast<float>(rng.gaussian() +
                                                  kMildAlign * subject[h][i]);
    }
    // a few keys aligned with the query-noise direction of individual
    // current queries: near-orthogonal to the mean query, so they barely
    // move the pre-softmax score, but they spike single post-softmax rows
    for (int j = 0; j < kOutliers; ++j) {
        const uint64_t target_q = cur.start + rng.below(cur.len);
        const uint64_t tok = recent.start + (recent.len - 1) - static_cast<uint64_t>(j);
        float* k = out.dump.k_row(layer, tok);
        const float* q = out.dump.q_row(layer, target_q);
        for (uint32_t h = 0; h < H; ++h) {
            std::vector<double> dir(d);
            double dot = 0.0;
            for (uint32_t i = 0; i < d; ++i) dir[i] = q[h * d + i];
            for (uint32_t i = 0; i < d; ++i) dot += dir[i] * subject[h][i];
            double norm = 0.0;
            for (uint32_t i = 0; i < d; ++i) {
                dir[i] -= dot * subject[h][i]; // strip the subject component
                norm += dir[i] * dir[i];
            }
            norm = std::sqrt(std::max(norm, 1e-12));
            for (uint32_t i = 0; i < d; ++i)
                k[h * d + i] = static_cast<float>(kOutlierGain * dir[i] / norm);
        }
    }
    return out;
}

// --- config parsing ---------------------------------------------------------------

SynthConfig SynthConfig::from_json(const nlohmann::json& j) {
    require(j.is_object(), "synth config must be a JSON object");
    SynthConfig c;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& key = it.key();
        if (key == "m") c.m = it->get<int>();
        else if (key == "tokens_per_image") c.tokens_per_image = it->get<uint32_t>();
        else if (key == "tokens_per_text") c.tokens_per_text = it->get<uint32_t>();
        else if (key == "planted_turns") {
            for (int t : it->get<std::vector<int>>()) c.planted_turns.insert(t);
        } else if (key == "subject_gain") c.subject_gain = it->get<double>();
        else if (key == "outlier_prob") c.outlier_prob = it->get<double>();
        else if (key == "outlier_gain") c.outlier_gain = it->get<double>();
        else if (key == "depth_tilt") c.depth_tilt = it->get<std::vector<double>>();
        else if (key == "steps") c.steps = it->get<int>();
        else if (key == "seed") c.seed = it->get<uint64_t>();
        else if (key == "layers") c.layers = it->get<uint32_t>();
        else if (key == "heads") c.heads = it->get<uint32_t>();
        else if (key == "head_dim") c.head_dim = it->get<uint32_t>();
        else if (key == "text_only_distractors")
            c.text_only_distractors = it->get<bool>();
        else throw ValidationError("unknown synth config field: " + key);
    }
    c.validate();
    return c;
}

nlohmann::json SynthConfig::to_json() const {
    return {{"m", m},
            {"tokens_per_image", tokens_per_image},
            {"tokens_per_text", tokens_per_text},
            {"planted_turns", planted_turns},
            {"subject_gain", subject_gain},
            {"outlier_prob", outlier_prob},
            {"outlier_gain", outlier_gain},
            {"depth_tilt", depth_tilt},
            {"steps", steps},
            {"seed", seed},
            {"layers", layers},
            {"heads", heads},
            {"head_dim", head_dim},
            {"text_only_distractors", text_only_distractors}};
}

} // namespace unilong
