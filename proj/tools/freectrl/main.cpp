#include "commands.hpp"
#include "run_config.hpp"

#include "freectrl/error.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <omp.h>

using namespace freectrl;
using namespace freectrl::cli;

namespace {

/// Raw option values; unset optionals fall back to the preset or defaults.
struct Options {
    std::string model, vocab, merges, out, atlas;
    std::vector<std::string> lexicons, centers;
    std::uint64_t seed = 0;
    int threads = 0;
    bool quiet = false;

    std::string layers;
    std::optional<std::size_t> sample;
    std::size_t top_m = 50;
    std::vector<double> grid;
    std::vector<std::size_t> k_list;
    std::size_t invariance_top = 10;

    std::string preset = "topic";
    std::vector<std::string> attributes;
    bool each = false, unsteered = false, no_refine = false, trace = false, greedy = false;
    std::string anchor = "name";
    std::vector<std::string> subtract;
    std::optional<std::size_t> k, max_new_tokens, max_attempts, top_k;
    std::optional<double> mu_omega, lambda, umax, temperature, top_p, constant_weight, sentinel;
    std::optional<std::string> weight_mode;

    std::vector<std::string> prompts;
    std::string prompts_file;
    std::size_t n = 5;

    std::vector<std::string> inputs;
    std::string dist_mode = "per-text";
    bool toxicity = false;
    std::string timing;
};

RunConfig resolve(const std::string& command, const Options& o) {
    RunConfig cfg;
    cfg.command = command;
    const auto data = data_dir();
    cfg.model = o.model;
    cfg.vocab = o.vocab.empty() ? data / "gpt2" / "vocab.json" : std::filesystem::path(o.vocab);
    cfg.merges = o.merges.empty() ? data / "gpt2" / "merges.txt" : std::filesystem::path(o.merges);
    cfg.out = o.out;
    cfg.seed = o.seed;
    cfg.threads = o.threads;
    cfg.quiet = o.quiet;
    if (!o.atlas.empty()) cfg.atlas = o.atlas;
    for (const auto& c : o.centers) cfg.centers.emplace_back(c);

    if (!o.layers.empty()) {
        const auto [a, b] = parse_layer_range(o.layers);
        cfg.space.first_layer = a;
        cfg.space.last_layer = b;
    }
    cfg.space.sample = o.sample;
    if (command == "profile-report" && !cfg.space.sample) cfg.space.sample = 200;
    cfg.space.seed = o.seed;
    cfg.top_m = o.top_m;
    if (!o.grid.empty()) cfg.grid = o.grid;
    if (!o.k_list.empty()) cfg.k_list = o.k_list;
    cfg.invariance_top = o.invariance_top;

    cfg.preset = o.preset;
    cfg.steer = SteerConfig::preset(o.preset);
    if (o.k) cfg.steer.k = *o.k;
    if (o.mu_omega) cfg.steer.mu_omega = *o.mu_omega;
    if (o.lambda) cfg.steer.lambda = *o.lambda;
    if (o.umax) cfg.steer.u_max = *o.umax;
    if (o.max_new_tokens) cfg.steer.max_new_tokens = *o.max_new_tokens;
    if (o.max_attempts) cfg.steer.max_attempts = *o.max_attempts;
    if (o.weight_mode) cfg.steer.weight_mode = parse_weight_mode(*o.weight_mode);
    if (o.constant_weight) cfg.steer.constant_weight = *o.constant_weight;
    if (o.sentinel) cfg.steer.sentinel = *o.sentinel;
    if (o.temperature) cfg.steer.sampling.temperature = *o.temperature;
    if (o.top_k) cfg.steer.sampling.top_k = *o.top_k;
    if (o.top_p) cfg.steer.sampling.top_p = *o.top_p;
    cfg.steer.sampling.greedy = o.greedy;

    if (o.lexicons.empty()) {
        cfg.lexicons = preset_lexicons(o.preset);
    } else {
        for (const auto& l : o.lexicons) cfg.lexicons.emplace_back(l);
    }
    cfg.attributes = o.attributes;
    cfg.each = o.each;
    cfg.unsteered = o.unsteered;
    cfg.anchor = parse_anchor_mode(o.anchor);
    cfg.refine = !o.no_refine;
    for (const auto& s : o.subtract) cfg.subtract.push_back(parse_subtraction(s));

    cfg.prompts = o.prompts;
    if (!o.prompts_file.empty()) cfg.prompts_file = o.prompts_file;
    cfg.completions = o.n;
    cfg.trace = o.trace;

    for (const auto& i : o.inputs) cfg.inputs.emplace_back(i);
    cfg.dist_mode = parse_dist_mode(o.dist_mode);
    cfg.toxicity = o.toxicity;
    if (!o.timing.empty()) cfg.timing = o.timing;
    return cfg;
}

void add_steering_options(CLI::App* app, Options& o) {
    app->add_option("--preset", o.preset, "Steering preset: topic, sentiment, detox or multi")
        ->check(CLI::IsMember({"topic", "sentiment", "detox", "multi"}));
    app->add_option("--k", o.k, "Value vectors located per keyword")->check(CLI::PositiveNumber);
    app->add_option("--umax", o.umax, "Weight at which a vector's effect is profiled")->check(CLI::PositiveNumber);
}

void add_lexicon_options(CLI::App* app, Options& o) {
    app->add_option("--anchor", o.anchor, "Refinement anchor: name or centroid")
        ->check(CLI::IsMember({"name", "centroid"}));
    app->add_flag("--no-refine", o.no_refine, "Use the raw keyword lists without refinement");
    app->add_option("--subtract", o.subtract, "TARGET:OTHER removes OTHER's keywords from TARGET");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"freectrl: attribute-controlled generation by steering feed-forward value vectors"};
    app.require_subcommand(1);
    app.fallthrough();
    app.config_formatter(std::make_shared<CLI::ConfigINI>());
    app.set_config("--config", "", "INI config file; command-line options win");

    Options o;
    app.add_option("--model", o.model, "GPT-2 checkpoint (.safetensors file or directory)");
    app.add_option("--vocab", o.vocab, "vocab.json (default: bundled GPT-2 vocabulary)");
    app.add_option("--merges", o.merges, "merges.txt (default: bundled GPT-2 merges)");
    app.add_option("--lexicons", o.lexicons, "Lexicon files (JSON object or one text file per attribute)");
    app.add_option("--center", o.centers, "Precomputed control center files");
    app.add_option("--out", o.out, "Run directory for all artifacts")->required();
    app.add_option("--seed", o.seed, "Base random seed");
    app.add_option("--threads", o.threads, "Worker threads (default: OpenMP default)")->check(CLI::NonNegativeNumber);
    app.add_flag("--quiet", o.quiet, "No progress output");

    auto* atlas_cmd = app.add_subcommand("atlas", "Profile value vectors and write a persistent atlas");
    atlas_cmd->add_option("--layers", o.layers, "Inclusive layer range A..B");
    atlas_cmd->add_option("--sample", o.sample, "Profile a uniform sample of this many vectors");
    atlas_cmd->add_option("--top-m", o.top_m, "Tokens kept per vector")->check(CLI::PositiveNumber);
    atlas_cmd->add_option("--umax", o.umax, "Profiling weight")->check(CLI::PositiveNumber);
    atlas_cmd->add_option("--prompt", o.prompts, "Profiling prompt (default: end-of-text token)")->expected(1);

    auto* center_cmd = app.add_subcommand("center", "Refine lexicons and build control centers");
    center_cmd->add_option("--attribute", o.attributes, "Attributes to build (default: all)");
    center_cmd->add_option("--atlas", o.atlas, "Build from a persisted atlas instead of a full sweep");
    add_steering_options(center_cmd, o);
    add_lexicon_options(center_cmd, o);

    auto* gen_cmd = app.add_subcommand("generate", "Steered generation with adaptive weights and filtering");
    gen_cmd->add_option("--attribute", o.attributes, "Target attribute; repeat for multi-attribute control");
    gen_cmd->add_flag("--each", o.each, "Single-attribute control for each listed attribute in turn");
    gen_cmd->add_flag("--unsteered", o.unsteered, "Plain sampling baseline");
    gen_cmd->add_option("--atlas", o.atlas, "Build missing centers from a persisted atlas");
    gen_cmd->add_option("--prompt", o.prompts, "Prompt text; repeatable");
    gen_cmd->add_option("--prompts-file", o.prompts_file, "One prompt per line (default: bundled 35 prompts)");
    gen_cmd->add_option("--n", o.n, "Completions per prompt")->check(CLI::PositiveNumber);
    gen_cmd->add_flag("--trace", o.trace, "Store the per-step trace in each record");
    add_steering_options(gen_cmd, o);
    add_lexicon_options(gen_cmd, o);
    gen_cmd->add_option("--mu-omega", o.mu_omega, "Sentence-score threshold")->check(CLI::NonNegativeNumber);
    gen_cmd->add_option("--lambda", o.lambda, "Maximum steering weight")->check(CLI::PositiveNumber);
    gen_cmd->add_option("--weight-mode", o.weight_mode, "as-printed, decaying or constant")
        ->check(CLI::IsMember({"as-printed", "decaying", "constant"}));
    gen_cmd->add_option("--constant-weight", o.constant_weight, "Weight used by --weight-mode constant")
        ->check(CLI::NonNegativeNumber);
    gen_cmd->add_option("--sentinel", o.sentinel, "Score used when the competitor relevance is zero");
    gen_cmd->add_option("--max-new-tokens", o.max_new_tokens, "Tokens generated per attempt")
        ->check(CLI::PositiveNumber);
    gen_cmd->add_option("--max-attempts", o.max_attempts, "Attempts before giving up on the filter")
        ->check(CLI::PositiveNumber);
    gen_cmd->add_option("--temperature", o.temperature, "Sampling temperature")->check(CLI::PositiveNumber);
    gen_cmd->add_option("--top-k", o.top_k, "Top-k cutoff (0 disables)");
    gen_cmd->add_option("--top-p", o.top_p, "Nucleus mass")->check(CLI::Range(0.0, 1.0));
    gen_cmd->add_flag("--greedy", o.greedy, "Greedy decoding");

    auto* eval_cmd = app.add_subcommand("eval", "Score saved generations");
    eval_cmd->add_option("--input", o.inputs, "generations.jsonl files")->required();
    eval_cmd->add_option("--preset", o.preset, "Preset whose lexicons are used when --lexicons is absent")
        ->check(CLI::IsMember({"topic", "sentiment", "detox", "multi"}));
    eval_cmd->add_option("--dist-mode", o.dist_mode, "Dist-n aggregation: per-text or corpus")
        ->check(CLI::IsMember({"per-text", "corpus"}));
    eval_cmd->add_option("--sentinel", o.sentinel, "Score used when the competitor relevance is zero");
    eval_cmd->add_flag("--toxicity", o.toxicity, "Query the toxicity service (needs PERSPECTIVE_API_KEY)");
    eval_cmd->add_option("--timing", o.timing, "timing.json of the generation run");
    add_lexicon_options(eval_cmd, o);

    auto* prof_cmd = app.add_subcommand("profile-report", "Convergence, coverage and prompt-invariance CSVs");
    prof_cmd->add_option("--layers", o.layers, "Inclusive layer range A..B");
    prof_cmd->add_option("--sample", o.sample, "Vectors sampled (default 200)");
    prof_cmd->add_option("--umax", o.umax, "Reference weight")->check(CLI::PositiveNumber);
    prof_cmd->add_option("--grid", o.grid, "Ascending weights ending at --umax")->delimiter(',');
    prof_cmd->add_option("--k-list", o.k_list, "Coverage cutoffs")->delimiter(',');
    prof_cmd->add_option("--invariance-top", o.invariance_top, "Top-n tokens compared across prompts")
        ->check(CLI::PositiveNumber);
    prof_cmd->add_option("--prompt", o.prompts, "Prompts for the invariance analysis; repeatable");
    prof_cmd->add_option("--prompts-file", o.prompts_file, "Prompts for the invariance analysis");

    CLI11_PARSE(app, argc, argv);

    const auto* sub = app.get_subcommands().front();
    try {
        const auto cfg = resolve(sub->get_name(), o);
        cfg.validate();
        if (cfg.threads > 0) omp_set_num_threads(cfg.threads);
        if (cfg.command == "atlas") run_atlas(cfg);
        if (cfg.command == "center") run_center(cfg);
        if (cfg.command == "generate") run_generate(cfg);
        if (cfg.command == "eval") run_eval(cfg);
        if (cfg.command == "profile-report") run_profile_report(cfg);
    } catch (const InvalidArgument& e) {
        std::cerr << "invalid configuration: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
