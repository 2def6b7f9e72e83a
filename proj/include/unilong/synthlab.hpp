#pragma once

#include <cstdint>
#include <set>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "unilong/policy.hpp"
#include "unilong/probe.hpp"
#include "unilong/qkio.hpp"
#include "unilong/sequence.hpp"

namespace unilong {

// Seeded generator of interleaved Q/K dumps with planted structure.
//
// Per layer and head a random unit "subject" direction s is drawn. The
// current image's queries point along s; keys of planted turns get a
// mean shift of subject_gain * s; every other vae key is isotropic noise
// except that, with probability outlier_prob per token, it is replaced
// by outlier_gain * normalize(s + g) for a random unit g — a heavy-tail
// key partially aligned with the current queries. depth_tilt biases text
// keys toward the query direction at low values and vae keys at high
// values, one entry per layer (empty means a linear 0 -> 1 ramp).
struct SynthConfig {
    int m = 20;
    uint32_t tokens_per_image = 256;
    uint32_t tokens_per_text = 32;
    std::set<int> planted_turns;
    double subject_gain = 0.0;
    double outlier_prob = 0.0;
    double outlier_gain = 0.0;
    std::vector<double> depth_tilt;
    int steps = 1;
    uint64_t seed = 0;
    uint32_t layers = 2;
    uint32_t heads = 4;
    uint32_t head_dim = 16;
    // swap every non-planted turn's blocks for one token-matched text block
    bool text_only_distractors = false;

    void validate() const;
    static SynthConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
};

struct SynthOutput {
    QkDump dump;
    InterleavedSequence seq;
};

SynthOutput generate(const SynthConfig& cfg);

// Attention-mass statistics standing in for generation quality. Shares
// are over the visible history columns of the synthesis-layer attention:
// grounding + pollution + text/other = 1. A hijack event is a refinement
// step in which one non-planted vae column exceeds a 0.1 share.
struct DegradationProxy {
    int image_index = 0;
    double pollution = 0.0;  // non-planted vae share
    double grounding = 0.0;  // planted vae share
    int hijack_events = 0;
    double visible_fraction = 0.0; // synthesis-layer visible / history tokens
    double entropy = 0.0;          // mean attention entropy over visible history
};

// RunConfig with probe layers fitted to a synthetic dump: text probe at
// layer 0, image probe at the last layer.
RunConfig synth_run_config(const SynthConfig& cfg, int k_grd = 4, int k_img = 4);

// Replays image slots 1..m. At slot i the visible context is built under
// the policy from the first i-1 turns, then head-averaged post-softmax
// attention of turn i's vae queries (a strided subsample of up to 32
// rows) is measured over it across `steps` refinement sub-steps.
std::vector<DegradationProxy> run_horizon(const SynthConfig& cfg,
                                          const PolicySpec& policy,
                                          const RunConfig& rcfg);

// Just the proxy for one slot (1-based); slot m+1 measures generation of
// the built-in current image over the full m-turn history.
DegradationProxy measure_slot(const SynthConfig& cfg, const PolicySpec& policy,
                              const RunConfig& rcfg, int slot);

// Closed-form softmax share of a single outlier with logit gap `delta`
// over n_keys-1 equal background logits: 1 / (1 + (n-1) exp(-delta)).
double hijack_share(uint64_t n_keys, double delta);

// Mean key-reference attention mass as distractor images accumulate:
// result[n] is the reference share with n distractors appended, averaged
// over `seeds` seeded sequences of statistically exchangeable images.
std::vector<double> reference_erosion_sweep(const SynthConfig& base, int max_distractors,
                                            int seeds);

// Fixture for the pre- vs post-softmax comparison: a planted reference
// early in the sequence scores highest under the mean-query dot product,
// while the most recent turn carries keys aligned with individual current
// queries' noise components, which softmax amplifies into the largest
// post-softmax share.
SynthOutput generate_recency_biased(uint64_t seed);

} // namespace unilong
