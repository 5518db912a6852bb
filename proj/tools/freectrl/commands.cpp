#include "commands.hpp"

#include "freectrl/atlas.hpp"
#include "freectrl/control.hpp"
#include "freectrl/error.hpp"
#include "freectrl/eval.hpp"
#include "freectrl/fingerprint.hpp"
#include "freectrl/model.hpp"
#include "freectrl/sampling.hpp"
#include "freectrl/steer.hpp"
#include "freectrl/tokenizer.hpp"

#include <atomic>
#include <chrono>
#include <exception>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>

namespace freectrl::cli {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

constexpr const char* kVersion = "1.0.0";

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot read " + path.string());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_file(const fs::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out << content;
}

void write_json(const fs::path& path, const json& j) { write_file(path, j.dump(2) + "\n"); }

std::string number(double x) { return json(x).dump(); }

/// Lists the artifacts of a run with their digests, next to the effective config.
class Manifest {
public:
    explicit Manifest(const RunConfig& cfg) : cfg_(cfg) {}

    void add(const std::string& relative) { files_.push_back(relative); }
    void add_volatile(const std::string& relative) { volatile_.push_back(relative); }
    void set_fingerprint(std::string fp) { fingerprint_ = std::move(fp); }

    void write() const {
        json artifacts = json::array();
        for (const auto& f : files_) {
            artifacts.push_back({{"file", f}, {"sha256", sha256_hex(read_file(cfg_.out / f))}});
        }
        json j = {{"tool", "freectrl"},
                  {"version", kVersion},
                  {"config", cfg_.to_json()},
                  {"model_fingerprint", fingerprint_},
                  {"artifacts", artifacts},
                  {"non_deterministic", volatile_}};
        write_json(cfg_.out / "manifest.json", j);
    }

private:
    const RunConfig& cfg_;
    std::vector<std::string> files_;
    std::vector<std::string> volatile_;
    std::string fingerprint_;
};

/// Throttled progress lines on stderr.
class ProgressPrinter {
public:
    ProgressPrinter(std::string label, bool quiet) : label_(std::move(label)), quiet_(quiet) {}

    void operator()(std::size_t done, std::size_t total) {
        if (quiet_ || total == 0) return;
        const std::size_t pct = done * 100 / total;
        std::lock_guard lock(mutex_);
        if (pct >= next_ || done == total) {
            std::cerr << "[" << label_ << "] " << done << "/" << total << " (" << pct << "%)\n";
            next_ = pct + 10;
        }
    }

    atlas::Progress callback() {
        return [this](std::size_t done, std::size_t total) { (*this)(done, total); };
    }

private:
    std::string label_;
    bool quiet_;
    std::size_t next_ = 0;
    std::mutex mutex_;
};

void note(const RunConfig& cfg, const std::string& message) {
    if (!cfg.quiet) std::cerr << "[" << cfg.command << "] " << message << "\n";
}

Model load_model(const RunConfig& cfg) {
    const fs::path path = fs::is_directory(cfg.model) ? cfg.model / "model.safetensors" : cfg.model;
    note(cfg, "loading " + path.string());
    return Model::load(path);
}

BpeTokenizer load_tokenizer(const RunConfig& cfg) { return BpeTokenizer::load(cfg.vocab, cfg.merges); }

std::vector<std::string> load_prompts(const RunConfig& cfg, std::size_t default_count) {
    if (!cfg.prompts.empty()) return cfg.prompts;
    const fs::path file = cfg.prompts_file ? *cfg.prompts_file : data_dir() / "prompts" / "pplm_prompts.txt";
    std::istringstream lines(read_file(file));
    std::vector<std::string> out;
    for (std::string line; std::getline(lines, line);) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) out.push_back(line);
    }
    if (out.empty()) throw InvalidArgument("--prompts-file: no prompts in " + file.string());
    if (!cfg.prompts_file && default_count > 0 && out.size() > default_count) out.resize(default_count);
    return out;
}

std::vector<TokenId> encode_prompt(const BpeTokenizer& tok, const std::string& prompt) {
    auto ids = tok.encode(prompt);
    if (ids.empty()) {
        if (!tok.end_of_text()) throw InvalidArgument("empty prompt and no end-of-text token");
        ids.push_back(*tok.end_of_text());
    }
    return ids;
}

struct PreparedLexicons {
    std::vector<AttributeLexicon> lexicons;
    std::optional<RefinementReport> report;
};

PreparedLexicons prepare_lexicons(const RunConfig& cfg, const Model& model, const BpeTokenizer& tok) {
    PreparedLexicons out;
    out.lexicons = load_lexicons(cfg.lexicons);
    for (const auto& [target, other] : cfg.subtract) {
        const auto t = index_of(out.lexicons, target), o = index_of(out.lexicons, other);
        subtract_keywords(out.lexicons[t], out.lexicons[o]);
    }
    embed_lexicons(out.lexicons, model, tok, cfg.anchor);
    if (cfg.refine) out.report = refine(out.lexicons, cfg.anchor);
    for (const auto& lex : out.lexicons) {
        if (lex.keywords().empty()) throw InvalidArgument("attribute '" + lex.attribute + "' has no keywords left");
    }
    return out;
}

CenterParams center_params(const RunConfig& cfg, const BpeTokenizer& tok) {
    CenterParams p;
    p.k = cfg.steer.k;
    p.u_max = cfg.steer.u_max;
    p.prompt = default_prompt(tok);
    return p;
}

/// Centers for `names`, built in one sweep (or from an atlas) unless supplied.
std::map<std::string, ControlCenter> resolve_centers(const RunConfig& cfg, const std::vector<std::string>& names,
                                                     const std::vector<AttributeLexicon>& lexicons,
                                                     const Model& model, const BpeTokenizer& tok,
                                                     std::map<std::string, ControlCenter> supplied) {
    std::map<std::string, ControlCenter> out;
    std::vector<AttributeLexicon> missing;
    for (const auto& name : names) {
        if (out.contains(name)) continue;
        if (auto it = supplied.find(name); it != supplied.end()) {
            out.emplace(name, it->second);
        } else {
            missing.push_back(lexicons[index_of(lexicons, name)]);
            out.emplace(name, ControlCenter{});
        }
    }
    if (missing.empty()) return out;

    std::vector<ControlCenter> built;
    if (cfg.atlas) {
        note(cfg, "building centers from atlas " + cfg.atlas->string());
        const auto index = atlas::AtlasIndex::load(*cfg.atlas, model.fingerprint());
        for (const auto& lex : missing) built.push_back(center_from_atlas(lex, index, model, tok, cfg.steer.k));
    } else {
        note(cfg, "locating value vectors for " + std::to_string(missing.size()) + " attribute(s)");
        ProgressPrinter progress("locate", cfg.quiet);
        built = build_centers(missing, model, tok, center_params(cfg, tok), progress.callback());
    }
    for (auto& c : built) out[c.attribute] = std::move(c);
    return out;
}

std::vector<std::string> save_centers(const RunConfig& cfg, const std::map<std::string, ControlCenter>& centers,
                                      const std::vector<std::string>& names, Manifest& manifest) {
    fs::create_directories(cfg.out / "centers");
    std::vector<std::string> files;
    for (const auto& name : names) {
        const std::string rel = "centers/" + name + ".json";
        save_center(cfg.out / rel, centers.at(name));
        manifest.add(rel);
        files.push_back(rel);
    }
    return files;
}

std::map<std::string, ControlCenter> load_supplied_centers(const RunConfig& cfg, const Model& model) {
    std::map<std::string, ControlCenter> out;
    for (const auto& path : cfg.centers) {
        auto c = load_center(path, model.fingerprint());
        if (out.contains(c.attribute)) throw InvalidArgument("--center: two centers for '" + c.attribute + "'");
        out.emplace(c.attribute, std::move(c));
    }
    return out;
}

std::vector<std::string> unique_names(const std::vector<std::string>& names) {
    std::vector<std::string> out;
    for (const auto& n : names) {
        if (std::find(out.begin(), out.end(), n) == out.end()) out.push_back(n);
    }
    return out;
}

}  // namespace

void run_atlas(const RunConfig& cfg) {
    const auto model = load_model(cfg);
    const auto tok = load_tokenizer(cfg);
    fs::create_directories(cfg.out);
    Manifest manifest(cfg);
    manifest.set_fingerprint(model.fingerprint());

    const auto vectors = cfg.space.enumerate(model.config());
    atlas::ProfileParams params;
    params.u_max = cfg.steer.u_max;
    params.top_m = cfg.top_m;
    params.prompt = cfg.prompts.empty() ? default_prompt(tok) : encode_prompt(tok, cfg.prompts.front());
    note(cfg, "profiling " + std::to_string(vectors.size()) + " value vectors");
    ProgressPrinter progress("atlas", cfg.quiet);
    const auto index = atlas::build_atlas(model, vectors, params, progress.callback());
    index.save(cfg.out / "atlas.bin");
    manifest.add("atlas.bin");
    manifest.add("atlas.bin.json");
    manifest.write();
}

void run_center(const RunConfig& cfg) {
    const auto model = load_model(cfg);
    const auto tok = load_tokenizer(cfg);
    auto prepared = prepare_lexicons(cfg, model, tok);
    fs::create_directories(cfg.out);
    Manifest manifest(cfg);
    manifest.set_fingerprint(model.fingerprint());

    std::vector<std::string> names = cfg.attributes;
    if (names.empty()) {
        for (const auto& lex : prepared.lexicons) names.push_back(lex.attribute);
    }
    names = unique_names(names);
    const auto centers = resolve_centers(cfg, names, prepared.lexicons, model, tok, {});
    save_centers(cfg, centers, names, manifest);

    save_lexicons(cfg.out / "lexicons.json", prepared.lexicons);
    manifest.add("lexicons.json");
    if (prepared.report) {
        save_refinement_report(cfg.out / "refinement.json", *prepared.report, prepared.lexicons);
        manifest.add("refinement.json");
    }
    json sizes = json::object();
    for (const auto& name : names) sizes[name] = centers.at(name).members.size();
    note(cfg, "center sizes " + sizes.dump());
    manifest.write();
}

void run_generate(const RunConfig& cfg) {
    const auto model = load_model(cfg);
    const auto tok = load_tokenizer(cfg);
    const auto eot = tok.end_of_text();
    fs::create_directories(cfg.out);
    Manifest manifest(cfg);
    manifest.set_fingerprint(model.fingerprint());

    std::vector<std::vector<std::string>> groups;
    if (cfg.unsteered) {
        groups.push_back({});
    } else if (cfg.each) {
        for (const auto& a : unique_names(cfg.attributes)) groups.push_back({a});
    } else {
        groups.push_back(unique_names(cfg.attributes));
    }

    std::optional<PreparedLexicons> prepared;
    std::map<std::string, ControlCenter> centers;
    std::vector<Steerer> steerers;
    std::vector<std::vector<std::size_t>> group_indices(groups.size());
    if (!cfg.unsteered) {
        prepared = prepare_lexicons(cfg, model, tok);
        const auto names = unique_names(cfg.attributes);
        for (const auto& n : names) index_of(prepared->lexicons, n);
        auto supplied = load_supplied_centers(cfg, model);
        std::vector<std::string> built;
        for (const auto& n : names) {
            if (!supplied.contains(n)) built.push_back(n);
        }
        centers = resolve_centers(cfg, names, prepared->lexicons, model, tok, std::move(supplied));
        if (!built.empty()) save_centers(cfg, centers, built, manifest);
        for (std::size_t g = 0; g < groups.size(); ++g) {
            SteerTargets targets;
            for (const auto& name : groups[g]) {
                targets.lexicon_index.push_back(index_of(prepared->lexicons, name));
                targets.centers.push_back(&centers.at(name));
            }
            group_indices[g] = targets.lexicon_index;
            steerers.emplace_back(model, prepared->lexicons, targets, cfg.steer);
        }
    }

    const auto prompts = load_prompts(cfg, 0);
    std::vector<std::vector<TokenId>> prompt_ids;
    for (const auto& p : prompts) prompt_ids.push_back(encode_prompt(tok, p));

    struct Job {
        std::size_t group, prompt, completion;
    };
    std::vector<Job> jobs;
    for (std::size_t g = 0; g < groups.size(); ++g) {
        for (std::size_t p = 0; p < prompts.size(); ++p) {
            for (std::size_t c = 0; c < cfg.completions; ++c) jobs.push_back({g, p, c});
        }
    }
    note(cfg, std::to_string(jobs.size()) + " generations (" + std::to_string(groups.size()) + " group(s) x " +
                  std::to_string(prompts.size()) + " prompt(s) x " + std::to_string(cfg.completions) + ")");

    std::vector<GenerationRecord> records(jobs.size());
    std::vector<std::exception_ptr> errors(jobs.size());
    ProgressPrinter progress("generate", cfg.quiet);
    std::atomic<std::size_t> done{0};
    const auto start = std::chrono::steady_clock::now();

#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(jobs.size()); ++i) {
        const auto idx = static_cast<std::size_t>(i);
        const auto& job = jobs[idx];
        try {
            GenerationRecord r;
            r.prompt = prompts[job.prompt];
            r.attributes = groups[job.group];
            r.completion = job.completion;
            r.seed = derive_seed(cfg.seed, idx);
            r.prompt_ids = prompt_ids[job.prompt];
            Rng rng(r.seed);
            if (cfg.unsteered) {
                r.token_ids = generate_unsteered(model, r.prompt_ids, cfg.steer.sampling, cfg.steer.max_new_tokens, rng,
                                                 cfg.steer.stop_at_end_of_text ? eot : std::nullopt);
                r.attempts = 1;
            } else {
                auto result = steerers[job.group].generate(r.prompt_ids, rng, eot);
                r.token_ids = std::move(result.chosen.generated);
                r.accepted = result.accepted;
                r.attempts = result.attempts;
                r.final_mu = std::move(result.chosen.final_mu);
                if (cfg.trace) r.trace = std::move(result.chosen.trace);
            }
            r.text = tok.decode(r.token_ids);
            records[idx] = std::move(r);
        } catch (...) {
            errors[idx] = std::current_exception();
        }
        progress(++done, jobs.size());
    }
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    write_records(cfg.out / "generations.jsonl", records);
    manifest.add("generations.jsonl");

    std::size_t accepted = 0;
    json per_group = json::array();
    for (std::size_t g = 0; g < groups.size(); ++g) {
        std::size_t n = 0, a = 0;
        double attempts = 0;
        for (std::size_t i = 0; i < jobs.size(); ++i) {
            if (jobs[i].group != g) continue;
            ++n;
            attempts += static_cast<double>(records[i].attempts);
            if (records[i].accepted) ++a;
        }
        accepted += a;
        per_group.push_back({{"attributes", groups[g]},
                             {"records", n},
                             {"accepted", a},
                             {"acceptance_rate", static_cast<double>(a) / static_cast<double>(n)},
                             {"mean_attempts", attempts / static_cast<double>(n)}});
    }
    json summary = {{"config", cfg.to_json()},
                    {"records", records.size()},
                    {"accepted", accepted},
                    {"rejected", records.size() - accepted},
                    {"acceptance_rate", static_cast<double>(accepted) / static_cast<double>(records.size())},
                    {"groups", per_group}};
    if (!centers.empty()) {
        json sizes = json::object();
        for (const auto& [name, c] : centers) sizes[name] = c.members.size();
        summary["center_sizes"] = sizes;
    }
    write_json(cfg.out / "summary.json", summary);
    manifest.add("summary.json");

    write_json(cfg.out / "timing.json",
               {{"seconds", seconds},
                {"records", records.size()},
                {"accepted", accepted},
                {"seconds_per_valid_output",
                 accepted == 0 ? json(nullptr) : json(seconds / static_cast<double>(accepted))}});
    manifest.add_volatile("timing.json");
    manifest.write();
    note(cfg, std::to_string(accepted) + "/" + std::to_string(records.size()) + " accepted");
}

void run_eval(const RunConfig& cfg) {
    const auto model = load_model(cfg);
    const auto tok = load_tokenizer(cfg);
    const auto prepared = prepare_lexicons(cfg, model, tok);
    fs::create_directories(cfg.out);
    Manifest manifest(cfg);
    manifest.set_fingerprint(model.fingerprint());

    std::vector<GenerationRecord> records;
    json input_digests = json::array();
    for (const auto& path : cfg.inputs) {
        auto part = read_records(path);
        records.insert(records.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
        input_digests.push_back({{"file", path.generic_string()}, {"sha256", sha256_hex(read_file(path))}});
    }
    EvalOptions options;
    options.dist_mode = cfg.dist_mode;
    options.sentinel = cfg.steer.sentinel;
    if (cfg.timing) {
        const auto t = nlohmann::json::parse(read_file(*cfg.timing));
        options.total_seconds = t.at("seconds").get<double>();
    }
    auto report = evaluate(records, prepared.lexicons, model, options);

    std::string toxicity_status = "not requested";
    if (cfg.toxicity) {
        try {
            ToxicityOptions topts;
            topts.cache_dir = cfg.out / "toxicity_cache";
            ToxicityClient client(topts);
            double sum = 0.0;
            std::size_t n = 0;
            for (const auto& r : records) {
                if (r.text.empty()) continue;
                sum += client.score(r.text);
                ++n;
            }
            if (n > 0) report.mean_toxicity = sum / static_cast<double>(n);
            toxicity_status = "scored " + std::to_string(n) + " texts";
        } catch (const ToxicityDisabled& e) {
            toxicity_status = std::string("disabled: ") + e.what();
            note(cfg, toxicity_status);
        }
    }

    json out = {{"config", cfg.to_json()},
                {"inputs", input_digests},
                {"report", report.to_json()},
                {"toxicity_status", toxicity_status}};
    write_json(cfg.out / "report.json", out);
    manifest.add("report.json");
    manifest.write();
}

void run_profile_report(const RunConfig& cfg) {
    const auto model = load_model(cfg);
    const auto tok = load_tokenizer(cfg);
    fs::create_directories(cfg.out);
    Manifest manifest(cfg);
    manifest.set_fingerprint(model.fingerprint());

    const auto vectors = cfg.space.enumerate(model.config());
    const auto prompt = default_prompt(tok);
    note(cfg, "convergence over " + std::to_string(vectors.size()) + " vectors");
    const auto curve = atlas::convergence_curve(model, vectors, cfg.grid, prompt, cfg.steer.u_max);
    std::string csv = "weight,mean_spearman\n";
    for (const auto& p : curve) csv += number(p.weight) + "," + number(p.mean_spearman) + "\n";
    write_file(cfg.out / "convergence.csv", csv);
    manifest.add("convergence.csv");

    note(cfg, "coverage");
    atlas::ProfileParams params;
    params.u_max = cfg.steer.u_max;
    params.prompt = prompt;
    params.top_m = *std::max_element(cfg.k_list.begin(), cfg.k_list.end());
    ProgressPrinter progress("coverage", cfg.quiet);
    const auto index = atlas::build_atlas(model, vectors, params, progress.callback());
    std::vector<std::vector<TokenId>> lists;
    for (const auto& [ref, profile] : index.profiles()) lists.push_back(profile.top_tokens);
    csv = "k,coverage,vectors,vocab_size\n";
    for (auto k : cfg.k_list) {
        csv += std::to_string(k) + "," + number(atlas::coverage_from_lists(lists, k, model.config().vocab_size)) + "," +
               std::to_string(vectors.size()) + "," + std::to_string(model.config().vocab_size) + "\n";
    }
    write_file(cfg.out / "coverage.csv", csv);
    manifest.add("coverage.csv");

    note(cfg, "prompt invariance");
    std::vector<std::vector<TokenId>> prompts;
    for (const auto& p : load_prompts(cfg, 5)) prompts.push_back(encode_prompt(tok, p));
    const auto rows = atlas::prompt_invariance_report(model, vectors, prompts, cfg.steer.u_max, cfg.invariance_top);
    csv = "layer,row,mean_jaccard\n";
    double mean = 0.0;
    for (const auto& r : rows) {
        csv += std::to_string(r.vector.layer) + "," + std::to_string(r.vector.row) + "," + number(r.mean_jaccard) + "\n";
        mean += r.mean_jaccard / static_cast<double>(rows.size());
    }
    write_file(cfg.out / "invariance.csv", csv);
    manifest.add("invariance.csv");

    json summary = {{"config", cfg.to_json()},
                    {"vectors", vectors.size()},
                    {"final_spearman", curve.back().mean_spearman},
                    {"mean_prompt_jaccard", mean},
                    {"invariance_prompts", prompts.size()}};
    write_json(cfg.out / "summary.json", summary);
    manifest.add("summary.json");
    manifest.write();
}

}  // namespace freectrl::cli
