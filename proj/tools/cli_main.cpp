// unilong: context curation and attention-experiment toolkit.
//
// Subcommands: probe, plan, evict, diagnose, simulate, ablate, cost.
// Every command writes its reports plus a run manifest (config echo and
// content hashes of inputs/outputs) into the output directory. All
// randomness flows from the config seed; reruns with identical inputs
// reproduce identical report bytes (wall-clock timings excepted).

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "unilong/diagnostics.hpp"
#include "unilong/kvcache.hpp"
#include "unilong/policy.hpp"
#include "unilong/probe.hpp"
#include "unilong/qkio.hpp"
#include "unilong/sequence.hpp"
#include "unilong/synthlab.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace unilong;

namespace {

uint64_t fnv1a(const std::string& data) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : data) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

std::string read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(is.is_open(), "cannot open: " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::string hash_of_file(const std::string& path) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "fnv1a:%016llx",
                  static_cast<unsigned long long>(fnv1a(read_file(path))));
    return buf;
}

void atomic_write(const fs::path& path, const std::string& content) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        require(os.is_open(), "cannot write: " + tmp.string());
        os << content;
        require(os.good(), "write failed: " + tmp.string());
    }
    fs::rename(tmp, path);
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

json load_json(const std::string& path) {
    std::ifstream is(path);
    require(is.is_open(), "cannot open: " + path);
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw ValidationError("JSON parse error in " + path + ": " + e.what());
    }
    return j;
}

struct RunContext {
    std::string out_dir;
    json config_echo;
    std::map<std::string, std::string> inputs;  // path -> hash
    std::map<std::string, std::string> outputs; // basename -> hash

    void note_input(const std::string& path) { inputs[path] = hash_of_file(path); }

    void emit(const std::string& name, const std::string& content) {
        fs::create_directories(out_dir);
        const fs::path path = fs::path(out_dir) / name;
        atomic_write(path, content);
        outputs[name] = hash_of_file(path.string());
    }

    void finish(const std::string& command) {
        json manifest{{"command", command},
                      {"config", config_echo},
                      {"inputs", inputs},
                      {"outputs", outputs}};
        fs::create_directories(out_dir);
        atomic_write(fs::path(out_dir) / "run_manifest.json", manifest.dump(2) + "\n");
    }
};

std::string resolve_out_dir(const std::string& flag) {
    if (!flag.empty()) return flag;
    if (const char* env = std::getenv("UNILONG_OUT_DIR")) return env;
    return "./out";
}

struct CommonInputs {
    std::string dump_path, seq_path, config_path, out_flag;
    // flag overrides mirroring the config field names
    std::optional<uint32_t> ell_grd, ell_syn;
    std::optional<int> k_grd, k_img;
    std::optional<uint64_t> seed;
    std::optional<std::string> score_mode;

    void add_flags(CLI::App* cmd) {
        cmd->add_option("--dump", dump_path, ".qkd probing dump")->required();
        cmd->add_option("--seq", seq_path, "sequence sidecar JSON")->required();
        cmd->add_option("--config", config_path, "run config JSON")->required();
        cmd->add_option("--out", out_flag, "output directory");
        cmd->add_option("--ell_grd", ell_grd);
        cmd->add_option("--ell_syn", ell_syn);
        cmd->add_option("--k_grd", k_grd);
        cmd->add_option("--k_img", k_img);
        cmd->add_option("--seed", seed);
        cmd->add_option("--score_mode", score_mode);
    }

    RunConfig load_config(RunContext& ctx) const {
        ctx.note_input(config_path);
        RunConfig cfg = RunConfig::load(config_path);
        if (ell_grd) cfg.ell_grd = *ell_grd;
        if (ell_syn) cfg.ell_syn = *ell_syn;
        if (k_grd) cfg.k_grd = *k_grd;
        if (k_img) cfg.k_img = *k_img;
        if (seed) cfg.seed = *seed;
        if (score_mode) {
            if (*score_mode == "pre_softmax") cfg.score_mode = ScoreMode::PreSoftmax;
            else if (*score_mode == "post_softmax")
                cfg.score_mode = ScoreMode::PostSoftmax;
            else throw ValidationError("unknown score_mode: " + *score_mode);
        }
        cfg.validate();
        ctx.config_echo = cfg.to_json();
        return cfg;
    }

    QkDump load_dump(RunContext& ctx) const {
        ctx.note_input(dump_path);
        return read_dump(dump_path);
    }

    InterleavedSequence load_seq(RunContext& ctx) const {
        ctx.note_input(seq_path);
        return InterleavedSequence::from_json(load_json(seq_path));
    }
};

// --- commands -----------------------------------------------------------------

void cmd_probe(const CommonInputs& in) {
    RunContext ctx{resolve_out_dir(in.out_flag)};
    RunConfig cfg = in.load_config(ctx);
    QkDump dump = in.load_dump(ctx);
    InterleavedSequence seq = in.load_seq(ctx);

    std::vector<std::string> warnings;
    RelevanceReport grd =
        score_turns(dump, seq, BlockKind::Text, cfg.ell_grd, cfg, &warnings);
    RelevanceReport syn =
        score_turns(dump, seq, BlockKind::Vae, cfg.ell_syn, cfg, &warnings);
    json rep{{"grd", grd.to_json()}, {"syn", syn.to_json()}, {"warnings", warnings}};
    ctx.emit("relevance.json", rep.dump(2) + "\n");
    ctx.finish("probe");
}

void cmd_plan(const CommonInputs& in) {
    RunContext ctx{resolve_out_dir(in.out_flag)};
    RunConfig cfg = in.load_config(ctx);
    QkDump dump = in.load_dump(ctx);
    InterleavedSequence seq = in.load_seq(ctx);

    PolicySpec spec = PolicySpec::from_json(cfg.policy);
    PolicyResult res = build_policy(spec, dump, seq, cfg);
    json j{{"policy", spec.id()},
           {"plan", res.plan ? res.plan->to_json() : json()},
           {"visibility", res.visibility.to_json()},
           {"warnings", res.warnings}};
    ctx.emit("plan.json", j.dump(2) + "\n");
    ctx.finish("plan");
}

void cmd_evict(const CommonInputs& in) {
    RunContext ctx{resolve_out_dir(in.out_flag)};
    RunConfig cfg = in.load_config(ctx);
    QkDump dump = in.load_dump(ctx);
    InterleavedSequence seq = in.load_seq(ctx);

    PolicySpec spec = PolicySpec::from_json(cfg.policy);
    PolicyResult res = build_policy(spec, dump, seq, cfg);
    KvCache cache = KvCache::from_dump(dump, ValueSource::Seeded, cfg.seed);
    KvCache kept = res.discard.kind == DiscardSpec::Kind::Compress
                       ? apply_plan_compressed(cache, res.visibility, seq,
                                               res.discard.rate, res.discard.interp)
                       : apply_plan(cache, res.visibility);

    json layers = json::array();
    double fraction = 0.0;
    for (uint32_t l = 0; l < kept.layer_count(); ++l) {
        layers.push_back(kept.entries(l));
        fraction += seq.history_end() > 0
                        ? static_cast<double>(res.visibility.visible[l].size()) /
                              static_cast<double>(seq.history_end())
                        : 0.0;
    }
    fraction /= kept.layer_count();
    json j{{"policy", spec.id()},
           {"discard", res.discard.to_json()},
           {"per_layer_entries", layers},
           {"history_tokens", seq.history_end()},
           {"visible_kv_fraction", fraction},
           {"guidance", GuidanceParams().to_json()}};
    ctx.emit("evict_report.json", j.dump(2) + "\n");
    ctx.finish("evict");
}

void cmd_diagnose(const CommonInputs& in, std::optional<int> reference) {
    RunContext ctx{resolve_out_dir(in.out_flag)};
    in.load_config(ctx); // validated and echoed; diagnostics need no policy
    QkDump dump = in.load_dump(ctx);
    InterleavedSequence seq = in.load_seq(ctx);

    const std::vector<double> percents{1, 5, 10, 20, 50};
    DiagnosticsReport rep = build_report(dump, seq, percents, reference);
    ctx.emit("diagnostics.json", rep.to_json().dump(2) + "\n");

    std::ostringstream entropy;
    entropy << "layer,turns_in_context,context_tokens,entropy,normalized_entropy\n";
    for (const auto& pt : rep.entropy_by_context_len)
        entropy << pt.layer << ',' << pt.turns_in_context << ',' << pt.context_tokens
                << ',' << fmt(pt.entropy) << ',' << fmt(pt.normalized) << '\n';
    ctx.emit("entropy.csv", entropy.str());

    std::ostringstream cov;
    cov << "layer,percent,coverage,gini\n";
    for (std::size_t l = 0; l < rep.coverage_by_layer.size(); ++l)
        for (std::size_t p = 0; p < percents.size(); ++p)
            cov << l << ',' << fmt(percents[p]) << ','
                << fmt(rep.coverage_by_layer[l][p]) << ','
                << fmt(rep.gini_by_layer[l]) << '\n';
    ctx.emit("coverage_gini.csv", cov.str());

    std::ostringstream mod;
    mod << "layer,text,vit,vae,special\n";
    for (std::size_t l = 0; l < rep.modality_by_layer.size(); ++l) {
        const ModalityRatios& m = rep.modality_by_layer[l];
        mod << l << ',' << fmt(m.text) << ',' << fmt(m.vit) << ',' << fmt(m.vae)
            << ',' << fmt(m.special) << '\n';
    }
    ctx.emit("modality_ratios.csv", mod.str());

    if (!rep.cluster_assignments.empty()) {
        std::ostringstream cl;
        cl << "layer,cluster\n";
        for (std::size_t l = 0; l < rep.cluster_assignments.size(); ++l)
            cl << l << ',' << rep.cluster_assignments[l] << '\n';
        ctx.emit("layer_clusters.csv", cl.str());
    }
    if (reference) {
        std::ostringstream ref;
        ref << "layer,key_reference_mass\n";
        for (std::size_t l = 0; l < rep.key_reference_by_layer.size(); ++l) {
            ref << l << ',';
            if (rep.key_reference_by_layer[l])
                ref << fmt(*rep.key_reference_by_layer[l]);
            ref << '\n';
        }
        ctx.emit("key_reference.csv", ref.str());
    }
    ctx.finish("diagnose");
}

void cmd_simulate(const std::string& config_path, const std::string& out_flag) {
    RunContext ctx{resolve_out_dir(out_flag)};
    ctx.note_input(config_path);
    const json sweep = load_json(config_path);
    ctx.config_echo = sweep;
    require(sweep.contains("experiment"), "sweep config needs an experiment");
    const std::string experiment = sweep.at("experiment").get<std::string>();
    SynthConfig base = SynthConfig::from_json(sweep.value("synth", json::object()));
    const int seeds = sweep.value("seeds", 1);
    const int k_grd = sweep.value("k_grd", 4);
    const int k_img = sweep.value("k_img", 4);

    if (experiment == "erosion") {
        const int max_d = sweep.value("max_distractors", 20);
        std::vector<double> mass = reference_erosion_sweep(base, max_d, seeds);
        std::ostringstream csv;
        csv << "distractors,mean_reference_mass\n";
        for (std::size_t n = 0; n < mass.size(); ++n)
            csv << n << ',' << fmt(mass[n]) << '\n';
        ctx.emit("erosion.csv", csv.str());
        ctx.finish("simulate");
        return;
    }

    if (experiment == "asymmetry") {
        std::ostringstream csv;
        csv << "variant,seed,pollution,grounding,hijack_events,entropy\n";
        PolicySpec dense;
        dense.variant = PolicySpec::Variant::DenseKv;
        for (int sd = 0; sd < seeds; ++sd) {
            for (bool text_only : {false, true}) {
                SynthConfig cfg = base;
                cfg.seed = base.seed + static_cast<uint64_t>(sd);
                cfg.text_only_distractors = text_only;
                RunConfig rc = synth_run_config(cfg, k_grd, k_img);
                DegradationProxy p = measure_slot(cfg, dense, rc, cfg.m + 1);
                csv << (text_only ? "text_distractors" : "image_distractors") << ','
                    << cfg.seed << ',' << fmt(p.pollution) << ',' << fmt(p.grounding)
                    << ',' << p.hijack_events << ',' << fmt(p.entropy) << '\n';
            }
        }
        ctx.emit("asymmetry.csv", csv.str());
        ctx.finish("simulate");
        return;
    }

    // horizon-style grids; event_bottleneck sweeps tokens_per_image and/or m
    require(experiment == "horizon" || experiment == "event_bottleneck",
            "unknown experiment: " + experiment);
    std::vector<uint32_t> tpi_values =
        sweep.contains("tokens_per_image")
            ? sweep.at("tokens_per_image").get<std::vector<uint32_t>>()
            : std::vector<uint32_t>{base.tokens_per_image};
    std::vector<int> m_values = sweep.contains("m")
                                    ? sweep.at("m").get<std::vector<int>>()
                                    : std::vector<int>{base.m};
    std::vector<PolicySpec> policies;
    if (sweep.contains("policies"))
        for (const auto& pj : sweep.at("policies"))
            policies.push_back(PolicySpec::from_json(pj));
    else if (sweep.contains("policy"))
        policies.push_back(PolicySpec::from_json(sweep.at("policy")));
    else {
        PolicySpec dense;
        dense.variant = PolicySpec::Variant::DenseKv;
        policies.push_back(dense);
    }

    std::ostringstream csv;
    csv << "policy,m,tokens_per_image,seed,slot,pollution,grounding,hijack_events,"
           "visible_fraction,entropy\n";
    for (const PolicySpec& pol : policies) {
        for (int m : m_values) {
            for (uint32_t tpi : tpi_values) {
                for (int sd = 0; sd < seeds; ++sd) {
                    SynthConfig cfg = base;
                    cfg.m = m;
                    cfg.tokens_per_image = tpi;
                    cfg.seed = base.seed + static_cast<uint64_t>(sd);
                    RunConfig rc = synth_run_config(cfg, k_grd, k_img);
                    for (const DegradationProxy& p : run_horizon(cfg, pol, rc))
                        csv << pol.id() << ',' << m << ',' << tpi << ',' << cfg.seed
                            << ',' << p.image_index << ',' << fmt(p.pollution) << ','
                            << fmt(p.grounding) << ',' << p.hijack_events << ','
                            << fmt(p.visible_fraction) << ',' << fmt(p.entropy)
                            << '\n';
                }
            }
        }
    }
    ctx.emit(experiment + ".csv", csv.str());
    ctx.finish("simulate");
}

void cmd_ablate(const std::string& manifest_path, const std::string& out_flag) {
    RunContext ctx{resolve_out_dir(out_flag)};
    ctx.note_input(manifest_path);
    const json manifest = load_json(manifest_path);
    ctx.config_echo = manifest;
    SynthConfig base = SynthConfig::from_json(manifest.value("synth", json::object()));
    const int seeds = manifest.value("seeds", 1);
    require(manifest.contains("rows") && manifest.at("rows").is_array(),
            "ablation manifest needs a rows array");

    std::ostringstream csv;
    csv << "name,policy,seed,slot,pollution,grounding,hijack_events,"
           "visible_fraction,entropy\n";
    for (const auto& row : manifest.at("rows")) {
        const std::string name = row.value("name", "");
        PolicySpec pol = PolicySpec::from_json(row.at("policy"));
        const int k_grd = row.value("k_grd", 4);
        const int k_img = row.value("k_img", 4);
        for (int sd = 0; sd < seeds; ++sd) {
            SynthConfig cfg = base;
            cfg.seed = base.seed + static_cast<uint64_t>(sd);
            RunConfig rc = synth_run_config(cfg, k_grd, k_img);
            for (const DegradationProxy& p : run_horizon(cfg, pol, rc))
                csv << name << ',' << pol.id() << ',' << cfg.seed << ','
                    << p.image_index << ',' << fmt(p.pollution) << ','
                    << fmt(p.grounding) << ',' << p.hijack_events << ','
                    << fmt(p.visible_fraction) << ',' << fmt(p.entropy) << '\n';
        }
    }
    ctx.emit("ablation.csv", csv.str());
    ctx.finish("ablate");
}

void cmd_cost(const std::string& config_path, const std::string& out_flag) {
    RunContext ctx{resolve_out_dir(out_flag)};
    ctx.note_input(config_path);
    const json cj = load_json(config_path);
    ctx.config_echo = cj;
    ctx.config_echo["guidance"] = GuidanceParams().to_json();

    SynthConfig base = SynthConfig::from_json(cj.value("synth", json::object()));
    const std::vector<uint64_t> lengths =
        cj.at("history_tokens").get<std::vector<uint64_t>>();
    const uint64_t current_tokens = cj.value("current_tokens", 256);
    const int repeats = cj.value("repeats", 3);
    const int k_grd = cj.value("k_grd", 4);
    const int k_img = cj.value("k_img", 4);
    std::vector<PolicySpec> policies;
    for (const auto& pj : cj.at("policies"))
        policies.push_back(PolicySpec::from_json(pj));

    std::ostringstream csv;
    csv << "history_tokens,visible_tokens,kv_fraction,flops,wall_clock_ms,policy\n";
    for (uint64_t target : lengths) {
        SynthConfig cfg = base;
        const uint64_t per_turn = cfg.tokens_per_image + cfg.tokens_per_text;
        cfg.m = std::max<int>(1, static_cast<int>(target / per_turn));
        SynthOutput out = generate(cfg);
        RunConfig rc = synth_run_config(cfg, k_grd, k_img);
        KvCache cache = KvCache::from_dump(out.dump, ValueSource::CopyKeys);
        for (const PolicySpec& pol : policies) {
            PolicyResult res = build_policy(pol, out.dump, out.seq, rc);
            KvCache kept =
                res.discard.kind == DiscardSpec::Kind::Compress
                    ? apply_plan_compressed(cache, res.visibility, out.seq,
                                            res.discard.rate, res.discard.interp)
                    : apply_plan(cache, res.visibility);
            CostModel cm = attention_cost(kept, current_tokens, repeats,
                                          out.seq.history_end(), base.seed + 1);
            uint64_t visible = 0;
            for (uint32_t l = 0; l < kept.layer_count(); ++l)
                visible += kept.entries(l);
            csv << out.seq.history_end() << ',' << visible << ','
                << fmt(cm.visible_kv_fraction) << ',' << cm.attention_flops << ','
                << fmt(cm.wall_clock_ms) << ',' << pol.id() << '\n';
        }
    }
    ctx.emit("cost.csv", csv.str());
    ctx.finish("cost");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"unilong: KV-cache curation and attention diagnostics toolkit"};
    app.require_subcommand(1);

    CommonInputs probe_in, plan_in, evict_in, diag_in;
    std::string sim_config, sim_out, abl_manifest, abl_out, cost_config, cost_out;
    std::optional<int> diag_reference;

    auto* probe = app.add_subcommand("probe", "score historical turns at both depths");
    probe_in.add_flags(probe);
    auto* plan = app.add_subcommand("plan", "build a curation plan under the policy");
    plan_in.add_flags(plan);
    auto* evict = app.add_subcommand("evict", "apply the plan to a KV cache");
    evict_in.add_flags(evict);
    auto* diag = app.add_subcommand("diagnose", "attention diagnostics over a dump");
    diag_in.add_flags(diag);
    diag->add_option("--reference", diag_reference,
                     "turn index for key-reference mass");
    auto* sim = app.add_subcommand("simulate", "synthetic-lab experiments");
    sim->add_option("--config", sim_config, "sweep config JSON")->required();
    sim->add_option("--out", sim_out, "output directory");
    auto* abl = app.add_subcommand("ablate", "run a policy grid over seeds");
    abl->add_option("--manifest", abl_manifest, "ablation manifest JSON")->required();
    abl->add_option("--out", abl_out, "output directory");
    auto* cost = app.add_subcommand("cost", "attention runtime scaling harness");
    cost->add_option("--config", cost_config, "cost config JSON")->required();
    cost->add_option("--out", cost_out, "output directory");

    try {
        app.parse(argc, argv);
        if (probe->parsed()) cmd_probe(probe_in);
        if (plan->parsed()) cmd_plan(plan_in);
        if (evict->parsed()) cmd_evict(evict_in);
        if (diag->parsed()) cmd_diagnose(diag_in, diag_reference);
        if (sim->parsed()) cmd_simulate(sim_config, sim_out);
        if (abl->parsed()) cmd_ablate(abl_manifest, abl_out);
        if (cost->parsed()) cmd_cost(cost_config, cost_out);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const ValidationError& e) {
        json err{{"error", {{"type", "validation"}, {"message", e.what()}}}};
        std::cerr << err.dump() << std::endl;
        return 2;
    } catch (const std::exception& e) {
        json err{{"error", {{"type", "runtime"}, {"message", e.what()}}}};
        std::cerr << err.dump() << std::endl;
        return 3;
    }
    return 0;
}
