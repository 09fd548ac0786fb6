#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "headscope/archive.hpp"
#include "headscope/errors.hpp"
#include "headscope/eval.hpp"
#include "headscope/factworld.hpp"
#include "headscope/intervention.hpp"
#include "headscope/numfmt.hpp"
#include "headscope/planted.hpp"
#include "headscope/probe.hpp"
#include "headscope/scoring.hpp"

namespace fs = std::filesystem;
using namespace headscope;

namespace {

// Exit codes: 0 success, 1 usage, 2 bad data/dimensions, 3 violated invariant.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CommonIO {
    std::string out_dir;
    int threads = 1;
    bool dry_run = false;
};

void add_common(CLI::App* sub, CommonIO& io) {
    sub->add_option("--out-dir", io.out_dir,
                    "directory for outputs (default: $HEADSCOPE_OUT, else .)");
    sub->add_option("--threads", io.threads, "worker threads")->check(CLI::PositiveNumber);
    sub->add_flag("--dry-run", io.dry_run, "validate inputs and list planned outputs");
}

fs::path resolve_out(const CommonIO& io, const std::string& name) {
    fs::path p(name);
    if (p.is_absolute()) return p;
    std::string dir = io.out_dir;
    if (dir.empty()) {
        if (const char* env = std::getenv("HEADSCOPE_OUT"); env != nullptr && *env != '\0')
            dir = env;
        else
            dir = ".";
    }
    return fs::path(dir) / p;
}

void require_input(const std::string& path, const char* what) {
    if (path.empty()) throw UsageError(std::string("missing required ") + what);
    if (!fs::exists(path)) throw DataError(std::string(what) + " '" + path + "' does not exist");
}

void write_text(const fs::path& p, const std::string& text) {
    if (!p.parent_path().empty()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open '" + p.string() + "' for writing");
    out << text;
    out.flush();
    if (!out) throw DataError("failed while writing '" + p.string() + "'");
}

std::string model_stem(const std::string& path) {
    std::string stem = fs::path(path).stem().string();
    return stem.empty() ? std::string("model") : stem;
}

bool announce_dry(const CommonIO& io, const std::vector<std::string>& outputs) {
    if (!io.dry_run) return false;
    for (const std::string& o : outputs) std::cout << "would write " << o << "\n";
    return true;
}

// --config k=v or --config file.json (flat object). Config-derived tokens are
// injected before the user's own flags, so explicit flags win.
std::vector<std::string> apply_config(const std::vector<std::string>& in) {
    std::vector<std::string> rest;
    std::vector<std::string> inject;
    auto add_kv = [&](const std::string& key, const std::string& value) {
        if (key.empty()) throw UsageError("config entry with an empty key");
        inject.push_back("--" + key + "=" + value);
    };
    auto consume = [&](const std::string& val) {
        if (val.size() > 5 && val.substr(val.size() - 5) == ".json") {
            std::ifstream f(val);
            if (!f) throw DataError("cannot open config '" + val + "'");
            nlohmann::json j;
            try {
                f >> j;
            } catch (const nlohmann::json::exception& e) {
                throw DataError("config '" + val + "': " + e.what());
            }
            if (!j.is_object()) throw DataError("config '" + val + "' is not a JSON object");
            for (const auto& [key, v] : j.items()) {
                if (v.is_string())
                    add_kv(key, v.get<std::string>());
                else
                    add_kv(key, v.dump());
            }
        } else {
            const size_t eq = val.find('=');
            if (eq == std::string::npos)
                throw UsageError("--config expects key=value or a .json file, got '" + val + "'");
            add_kv(val.substr(0, eq), val.substr(eq + 1));
        }
    };
    for (size_t i = 0; i < in.size(); ++i) {
        if (in[i] == "--config") {
            if (i + 1 >= in.size()) throw UsageError("--config needs a value");
            consume(in[++i]);
        } else if (in[i].rfind("--config=", 0) == 0) {
            consume(in[i].substr(9));
        } else {
            rest.push_back(in[i]);
        }
    }
    if (inject.empty()) return rest;
    // Keep the subcommand name (first bare token) in front of injected flags.
    std::vector<std::string> out;
    size_t head = 0;
    if (!rest.empty() && !rest[0].empty() && rest[0][0] != '-') {
        out.push_back(rest[0]);
        head = 1;
    }
    out.insert(out.end(), inject.begin(), inject.end());
    out.insert(out.end(), rest.begin() + long(head), rest.end());
    return out;
}

std::string usage_csv(const UsageReport& r) {
    std::string csv = "n,f_m,f_c,f_o,rm,rc,ro\n";
    csv += std::to_string(r.n) + "," + std::to_string(r.f_m) + "," + std::to_string(r.f_c) + "," +
           std::to_string(r.f_o) + "," + fmt(r.rm) + "," + fmt(r.rc) + "," + fmt(r.ro) + "\n";
    return csv;
}

std::string sweep_csv(const SweepGrid& grid) {
    std::string csv = "element,layer,mean_delta,mean_rel,used,skipped\n";
    for (const SweepCell& c : grid.cells) {
        csv += element_name(c.element) + "," + std::to_string(c.layer) + "," + fmt(c.mean_delta) +
               "," + fmt(c.mean_rel) + "," + std::to_string(c.used) + "," +
               std::to_string(c.skipped) + "\n";
    }
    return csv;
}

std::string scores_csv(const std::string& method, const std::string& target,
                       const HeadScores& s) {
    std::string csv = "method,target,layer,head,score\n";
    for (int l = 0; l < s.layers; ++l)
        for (int h = 0; h < s.heads; ++h)
            csv += method + "," + target + "," + std::to_string(l) + "," + std::to_string(h) +
                   "," + fmt(s.at(l, h)) + "\n";
    return csv;
}

HeadScores compute_scores(const Model& model, const std::vector<ConflictExample>& ds,
                          const std::string& method, Target target, double step, bool probs,
                          int threads) {
    if (method == "patch") {
        PathPatchOptions opt;
        opt.target = target;
        opt.use_probs = probs;
        return path_patch_scores(model, ds, opt, threads);
    }
    if (method == "proxy") return proxy_scores(model, ds, target, step, threads);
    if (method == "grad") {
        std::vector<LabeledPrompt> labeled;
        labeled.reserve(ds.size());
        for (const ConflictExample& ex : ds)
            labeled.push_back({ex.tokens, target == Target::memory ? ex.a_m : ex.a_c});
        return grad_importance(model, labeled, step, threads);
    }
    throw UsageError("unknown scoring method '" + method + "'");
}

// ---- subcommands ----

int run_gen_world(const CommonIO& io, int subjects, int attributes, uint64_t seed,
                  std::vector<std::string> relations, const std::string& out,
                  const std::string& dataset, const std::string& relation,
                  const std::string& form) {
    if (out.empty()) throw UsageError("missing required --out");
    if (relations.empty()) relations = known_relations();
    const bool want_ds = !dataset.empty();
    if (want_ds && relation.empty())
        throw UsageError("--dataset needs --relation");
    std::vector<std::string> planned{resolve_out(io, out).string()};
    if (want_ds) planned.push_back(resolve_out(io, dataset).string());
    if (announce_dry(io, planned)) return 0;

    const FactWorld world = gen_world(subjects, relations, attributes, seed);
    write_world(world, resolve_out(io, out).string());
    std::cout << "world: " << subjects << " subjects, " << relations.size() << " relations, "
              << attributes << " attribute values each -> " << planned[0] << "\n";
    if (want_ds) {
        const auto ds = make_dataset(world, relation, form_from_name(form));
        write_dataset(ds, resolve_out(io, dataset).string());
        std::cout << "dataset: " << ds.size() << " " << form << " examples of " << relation
                  << " -> " << planned[1] << "\n";
    }
    return 0;
}

int run_build_planted(const CommonIO& io, const std::string& world_path,
                      const std::string& relation, const std::string& out, double lambda,
                      int layers, int heads, bool no_dual, bool rotate, uint64_t rotate_seed,
                      int n_max) {
    require_input(world_path, "--world");
    if (out.empty()) throw UsageError("missing required --out");
    if (relation.empty()) throw UsageError("missing required --relation");
    if (announce_dry(io, {resolve_out(io, out).string()})) return 0;

    const FactWorld world = read_world(world_path);
    PlantedOptions opt;
    opt.layers = layers;
    opt.heads = heads;
    opt.lambda_mix = lambda;
    opt.prefer_memory_in_dual = !no_dual;
    opt.rotate = rotate;
    opt.rotate_seed = rotate_seed;
    opt.n_max = n_max;
    const PlantedModel pm = build_planted(world, relation, opt);
    save_model(resolve_out(io, out).string(), pm.model, &pm.info);
    std::cout << "planted model for '" << relation << "' lambda=" << fmt(pm.info.lambda_mix)
              << " verified over " << world.subjects.size() << " subjects -> "
              << resolve_out(io, out).string() << "\n";
    return 0;
}

int run_evaluate(const CommonIO& io, const std::string& model_path, const std::string& ds_path,
                 const std::string& plan_path, std::string csv) {
    require_input(model_path, "--model");
    require_input(ds_path, "--dataset");
    if (!plan_path.empty()) require_input(plan_path, "--plan");
    if (csv.empty()) csv = "evaluate_" + model_stem(model_path) + ".csv";
    if (announce_dry(io, {resolve_out(io, csv).string()})) return 0;

    const LoadedModel lm = load_model(model_path);
    const auto ds = read_dataset(ds_path);
    const InterventionPlan plan = plan_path.empty() ? InterventionPlan{} : load_plan(plan_path);
    const UsageReport rep = evaluate(lm.model, ds, plan, io.threads);
    const std::string text = usage_csv(rep);
    write_text(resolve_out(io, csv), text);
    std::cout << text;
    return 0;
}

int run_sweep(const CommonIO& io, const std::string& model_path, const std::string& ds_path,
              const std::string& kind, int window, std::string csv, bool flow) {
    require_input(model_path, "--model");
    require_input(ds_path, "--dataset");
    const std::string exp = flow ? "flow-sweep" : "knockout-sweep";
    if (csv.empty())
        csv = exp + "_" + model_stem(model_path) + "_W" + std::to_string(window) + ".csv";
    if (announce_dry(io, {resolve_out(io, csv).string()})) return 0;

    const LoadedModel lm = load_model(model_path);
    const auto ds = read_dataset(ds_path);
    const SweepGrid grid =
        flow ? sweep_flow_block(lm.model, ds, window, io.threads)
             : sweep_knockout(lm.model, ds, component_from_name(kind), window, io.threads);
    write_text(resolve_out(io, csv), sweep_csv(grid));
    std::cout << exp << ": " << grid.cells.size() << " cells -> " << resolve_out(io, csv).string()
              << "\n";
    return 0;
}

int run_extraction(const CommonIO& io, const std::string& model_path, const std::string& ds_path,
                   std::string csv) {
    require_input(model_path, "--model");
    require_input(ds_path, "--dataset");
    if (csv.empty()) csv = "extraction_" + model_stem(model_path) + ".csv";
    if (announce_dry(io, {resolve_out(io, csv).string()})) return 0;

    const LoadedModel lm = load_model(model_path);
    const auto ds = read_dataset(ds_path);
    const ExtractionProfile prof = extraction_profile(lm.model, ds, io.threads);
    std::string text = "site,layer,head,rate\n";
    for (int l = 0; l < prof.layers; ++l)
        text += "mha," + std::to_string(l) + ",," + fmt(prof.mha[size_t(l)]) + "\n";
    for (int l = 0; l < prof.layers; ++l)
        text += "ffn," + std::to_string(l) + ",," + fmt(prof.ffn[size_t(l)]) + "\n";
    for (int l = 0; l < prof.layers; ++l)
        for (int h = 0; h < prof.heads; ++h)
            text += "head," + std::to_string(l) + "," + std::to_string(h) + "," +
                    fmt(prof.head_at(l, h)) + "\n";
    write_text(resolve_out(io, csv), text);
    std::cout << "extraction profile -> " << resolve_out(io, csv).string() << "\n";
    return 0;
}

int run_score_heads(const CommonIO& io, const std::string& model_path, const std::string& ds_path,
                    const std::string& method, const std::string& target_s, double step,
                    bool probs, std::string csv) {
    require_input(model_path, "--model");
    require_input(ds_path, "--dataset");
    if (csv.empty()) csv = "score-heads_" + model_stem(model_path) + ".csv";
    if (announce_dry(io, {resolve_out(io, csv).string()})) return 0;

    const LoadedModel lm = load_model(model_path);
    const auto ds = read_dataset(ds_path);
    const Target target = target_from_name(target_s);
    const HeadScores s = compute_scores(lm.model, ds, method, target, step, probs, io.threads);
    write_text(resolve_out(io, csv), scores_csv(method, target_s, s));
    std::cout << "head scores (" << method << ", " << target_s << ") -> "
              << resolve_out(io, csv).string() << "\n";
    return 0;
}

int run_ph3(const CommonIO& io, const std::string& model_path, const std::string& ds_path,
            const std::string& dev_path, const std::string& method, const std::string& target_s,
            std::vector<double> grid, double step, bool probs) {
    require_input(model_path, "--model");
    require_input(ds_path, "--dataset");
    if (!dev_path.empty()) require_input(dev_path, "--dev");
    if (grid.empty()) grid = {1, 3, 5, 7, 9, 15};
    const std::string stem = "ph3_" + model_stem(model_path);
    if (io.dry_run) {
        std::cout << "would write " << resolve_out(io, stem + "_k<rate>.csv").string() << "\n"
                  << "would write " << resolve_out(io, stem + "_k<rate>_report.csv").string()
                  << "\n"
                  << "would write " << resolve_out(io, stem + "_k<rate>.plan").string() << "\n";
        return 0;
    }

    const LoadedModel lm = load_model(model_path);
    const auto ds = read_dataset(ds_path);
    const auto dev = dev_path.empty() ? ds : read_dataset(dev_path);
    const Target target = target_from_name(target_s);
    const HeadScores s = compute_scores(lm.model, ds, method, target, step, probs, io.threads);
    const PruneChoice choice = select_prune_rate(lm.model, s, dev, target, grid, io.threads);

    const std::string base = stem + "_k" + fmt(choice.k_percent);
    std::string heads_text = "layer,head,score\n";
    InterventionPlan plan;
    PruneHeads prune;
    for (const HeadCoord& hc : choice.heads) {
        heads_text += std::to_string(hc.layer) + "," + std::to_string(hc.head) + "," +
                      fmt(s.at(hc.layer, hc.head)) + "\n";
        prune.heads.emplace_back(hc.layer, hc.head);
    }
    plan.add(std::move(prune));
    std::string report_text = "k_percent," + usage_csv(choice.report);
    report_text.insert(report_text.find('\n') + 1, fmt(choice.k_percent) + ",");

    write_text(resolve_out(io, base + ".csv"), heads_text);
    write_text(resolve_out(io, base + "_report.csv"), report_text);
    write_text(resolve_out(io, base + ".plan"), plan_to_text(plan));
    std::cout << "pruned " << choice.heads.size() << " heads at k=" << fmt(choice.k_percent)
              << "% for target " << target_s << " -> " << resolve_out(io, base + ".csv").string()
              << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"analysis toolkit for memory/context conflicts in small transformers"};
    app.require_subcommand(1);
    // Config-derived tokens precede explicit flags; the last occurrence must win.
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

    // gen-world
    CommonIO gw_io;
    int gw_subjects = 64, gw_attributes = 16;
    uint64_t gw_seed = 7;
    std::vector<std::string> gw_relations;
    std::string gw_out, gw_dataset, gw_relation, gw_form = "triple";
    CLI::App* gw = app.add_subcommand("gen-world", "generate a synthetic fact world");
    add_common(gw, gw_io);
    gw->add_option("--subjects", gw_subjects)->check(CLI::PositiveNumber);
    gw->add_option("--attributes", gw_attributes)->check(CLI::PositiveNumber);
    gw->add_option("--seed", gw_seed);
    gw->add_option("--relations", gw_relations)->delimiter(',');
    gw->add_option("--out", gw_out, "world JSON path");
    gw->add_option("--dataset", gw_dataset, "also write a conflict dataset (JSONL)");
    gw->add_option("--relation", gw_relation, "relation for --dataset");
    gw->add_option("--form", gw_form)->check(CLI::IsMember({"triple", "document", "dual-context"}));

    // build-planted
    CommonIO bp_io;
    std::string bp_world, bp_relation, bp_out;
    double bp_lambda = 0.5;
    int bp_layers = 3, bp_heads = 4, bp_nmax = 40;
    bool bp_no_dual = false, bp_rotate = false;
    uint64_t bp_rotate_seed = 1;
    CLI::App* bp = app.add_subcommand("build-planted", "construct a verified planted-circuit model");
    add_common(bp, bp_io);
    bp->add_option("--world", bp_world, "world JSON");
    bp->add_option("--relation", bp_relation);
    bp->add_option("--lambda", bp_lambda, "memory weight in [0,1]");
    bp->add_option("--layers", bp_layers)->check(CLI::PositiveNumber);
    bp->add_option("--heads", bp_heads)->check(CLI::PositiveNumber);
    bp->add_option("--n-max", bp_nmax)->check(CLI::PositiveNumber);
    bp->add_flag("--no-dual-preference", bp_no_dual,
                 "drop the dual-context preference for the stored attribute");
    bp->add_flag("--rotate", bp_rotate, "hide the construction basis behind a random rotation");
    bp->add_option("--rotate-seed", bp_rotate_seed);
    bp->add_option("--out", bp_out, "model archive path");

    // evaluate
    CommonIO ev_io;
    std::string ev_model, ev_ds, ev_plan, ev_csv;
    CLI::App* ev = app.add_subcommand("evaluate", "answer-usage rates, optionally intervened");
    add_common(ev, ev_io);
    ev->add_option("--model", ev_model);
    ev->add_option("--dataset", ev_ds);
    ev->add_option("--plan", ev_plan, "intervention plan file");
    ev->add_option("--csv", ev_csv, "output CSV (default evaluate_<model>.csv)");

    // knockout-sweep
    CommonIO ks_io;
    std::string ks_model, ks_ds, ks_kind = "mha", ks_csv;
    int ks_window = 0;
    CLI::App* ks = app.add_subcommand("knockout-sweep", "element x layer component knockouts");
    add_common(ks, ks_io);
    ks->add_option("--model", ks_model);
    ks->add_option("--dataset", ks_ds);
    ks->add_option("--kind", ks_kind)->check(CLI::IsMember({"mha", "ffn"}));
    ks->add_option("--window", ks_window, "layer window width")->check(CLI::NonNegativeNumber);
    ks->add_option("--csv", ks_csv);

    // flow-sweep
    CommonIO fsw_io;
    std::string fs_model, fs_ds, fs_csv;
    int fs_window = 0;
    CLI::App* fsw = app.add_subcommand("flow-sweep", "element x layer attention blocking");
    add_common(fsw, fsw_io);
    fsw->add_option("--model", fs_model);
    fsw->add_option("--dataset", fs_ds);
    fsw->add_option("--window", fs_window, "layer window width")->check(CLI::NonNegativeNumber);
    fsw->add_option("--csv", fs_csv);

    // extraction
    CommonIO ex_io;
    std::string ex_model, ex_ds, ex_csv;
    CLI::App* ex = app.add_subcommand("extraction", "early-exit extraction profile");
    add_common(ex, ex_io);
    ex->add_option("--model", ex_model);
    ex->add_option("--dataset", ex_ds);
    ex->add_option("--csv", ex_csv);

    // score-heads
    CommonIO sh_io;
    std::string sh_model, sh_ds, sh_method = "patch", sh_target = "memory", sh_csv;
    double sh_step = 1e-3;
    bool sh_probs = false;
    CLI::App* sh = app.add_subcommand("score-heads", "rank heads by pathway score");
    add_common(sh, sh_io);
    sh->add_option("--model", sh_model);
    sh->add_option("--dataset", sh_ds);
    sh->add_option("--method", sh_method)->check(CLI::IsMember({"grad", "proxy", "patch"}));
    sh->add_option("--target", sh_target)->check(CLI::IsMember({"memory", "context"}));
    sh->add_option("--step", sh_step, "finite-difference half-width");
    sh->add_flag("--probs", sh_probs, "margins from probabilities instead of logits");
    sh->add_option("--csv", sh_csv);

    // ph3
    CommonIO p3_io;
    std::string p3_model, p3_ds, p3_dev, p3_method = "patch", p3_target = "memory";
    std::vector<double> p3_grid;
    double p3_step = 1e-3;
    bool p3_probs = false;
    CLI::App* p3 = app.add_subcommand("ph3", "score, pick a prune rate, emit the prune plan");
    add_common(p3, p3_io);
    p3->add_option("--model", p3_model);
    p3->add_option("--dataset", p3_ds, "scoring dataset");
    p3->add_option("--dev", p3_dev, "dev dataset for rate selection (default: --dataset)");
    p3->add_option("--method", p3_method)->check(CLI::IsMember({"grad", "proxy", "patch"}));
    p3->add_option("--target", p3_target)->check(CLI::IsMember({"memory", "context"}));
    p3->add_option("--grid", p3_grid, "candidate prune rates in percent")->delimiter(',');
    p3->add_option("--step", p3_step);
    p3->add_flag("--probs", p3_probs);

    try {
        std::vector<std::string> args0(argv + 1, argv + argc);
        const std::vector<std::string> args = apply_config(args0);
        std::vector<const char*> cargv;
        cargv.push_back(argv[0]);
        for (const std::string& a : args) cargv.push_back(a.c_str());
        app.parse(int(cargv.size()), cargv.data());

        if (gw->parsed())
            return run_gen_world(gw_io, gw_subjects, gw_attributes, gw_seed, gw_relations, gw_out,
                                 gw_dataset, gw_relation, gw_form);
        if (bp->parsed())
            return run_build_planted(bp_io, bp_world, bp_relation, bp_out, bp_lambda, bp_layers,
                                     bp_heads, bp_no_dual, bp_rotate, bp_rotate_seed, bp_nmax);
        if (ev->parsed()) return run_evaluate(ev_io, ev_model, ev_ds, ev_plan, ev_csv);
        if (ks->parsed())
            return run_sweep(ks_io, ks_model, ks_ds, ks_kind, ks_window, ks_csv, false);
        if (fsw->parsed()) return run_sweep(fsw_io, fs_model, fs_ds, "", fs_window, fs_csv, true);
        if (ex->parsed()) return run_extraction(ex_io, ex_model, ex_ds, ex_csv);
        if (sh->parsed())
            return run_score_heads(sh_io, sh_model, sh_ds, sh_method, sh_target, sh_step, sh_probs,
                                   sh_csv);
        if (p3->parsed())
            return run_ph3(p3_io, p3_model, p3_ds, p3_dev, p3_method, p3_target, p3_grid, p3_step,
                           p3_probs);
        throw UsageError("no subcommand given");
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const InvariantViolation& e) {
        std::cerr << "invariant violated: " << e.what() << "\n";
        return 3;
    } catch (const DimensionError& e) {
        std::cerr << "dimension error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
