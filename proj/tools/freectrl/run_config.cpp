#include "run_config.hpp"

#include "freectrl/error.hpp"

#include <cstdlib>

namespace freectrl::cli {

namespace {

std::vector<std::string> path_strings(const std::vector<std::filesystem::path>& paths) {
    std::vector<std::string> out;
    for (const auto& p : paths) out.push_back(p.generic_string());
    return out;
}

nlohmann::ordered_json optional_path(const std::optional<std::filesystem::path>& p) {
    return p ? nlohmann::ordered_json(p->generic_string()) : nlohmann::ordered_json(nullptr);
}

bool uses_lexicons(const std::string& command) {
    return command == "center" || command == "generate" || command == "eval";
}

}  // namespace

std::filesystem::path data_dir() {
    if (const char* env = std::getenv("FREECTRL_DATA_DIR"); env != nullptr && *env != '\0') return env;
    for (const char* candidate : {FREECTRL_SOURCE_DATA_DIR, FREECTRL_INSTALL_DATA_DIR}) {
        if (std::filesystem::exists(std::filesystem::path(candidate) / "gpt2" / "vocab.json")) return candidate;
    }
    return FREECTRL_INSTALL_DATA_DIR;
}

std::vector<std::filesystem::path> preset_lexicons(const std::string& preset) {
    const auto dir = data_dir() / "lexicons";
    if (preset == "topic") return {dir / "topic.json"};
    if (preset == "sentiment") return {dir / "sentiment.json"};
    if (preset == "detox") return {dir / "detox.json"};
    if (preset == "multi") return {dir / "topic.json", dir / "sentiment.json"};
    throw InvalidArgument("--preset: unknown preset '" + preset + "' (expected topic, sentiment, detox or multi)");
}

std::pair<std::size_t, std::size_t> parse_layer_range(const std::string& text) {
    auto number = [&](const std::string& s) {
        if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
            throw InvalidArgument("--layers: expected A..B or A, got '" + text + "'");
        }
        return static_cast<std::size_t>(std::stoull(s));
    };
    const auto dots = text.find("..");
    if (dots == std::string::npos) {
        const auto a = number(text);
        return {a, a};
    }
    const auto a = number(text.substr(0, dots)), b = number(text.substr(dots + 2));
    if (a > b) throw InvalidArgument("--layers: first layer exceeds last layer in '" + text + "'");
    return {a, b};
}

std::pair<std::string, std::string> parse_subtraction(const std::string& text) {
    const auto colon = text.find(':');
    if (colon == std::string::npos || colon == 0 || colon + 1 == text.size()) {
        throw InvalidArgument("--subtract: expected TARGET:OTHER, got '" + text + "'");
    }
    return {text.substr(0, colon), text.substr(colon + 1)};
}

DistAggregation parse_dist_mode(const std::string& text) {
    if (text == "per-text") return DistAggregation::PerText;
    if (text == "corpus") return DistAggregation::Corpus;
    throw InvalidArgument("--dist-mode: expected per-text or corpus, got '" + text + "'");
}

std::string to_string(DistAggregation mode) { return mode == DistAggregation::PerText ? "per-text" : "corpus"; }

void RunConfig::validate() const {
    auto require_file = [](const std::filesystem::path& p, const char* option) {
        if (p.empty()) throw InvalidArgument(std::string(option) + ": required");
        if (!std::filesystem::exists(p)) throw InvalidArgument(std::string(option) + ": file not found: " + p.string());
    };
    require_file(model, "--model");
    require_file(vocab, "--vocab");
    require_file(merges, "--merges");
    if (out.empty()) throw InvalidArgument("--out: required");
    if (uses_lexicons(command)) {
        if (lexicons.empty()) throw InvalidArgument("--lexicons: at least one file is required");
        for (const auto& p : lexicons) require_file(p, "--lexicons");
    }
    for (const auto& p : centers) require_file(p, "--center");
    if (atlas) require_file(*atlas, "--atlas");
    if (prompts_file) require_file(*prompts_file, "--prompts-file");
    if (timing) require_file(*timing, "--timing");

    if (space.sample && *space.sample == 0) throw InvalidArgument("--sample: must be >= 1");
    if (top_m == 0) throw InvalidArgument("--top-m: must be >= 1");
    if (command == "profile-report") {
        if (grid.empty()) throw InvalidArgument("--grid: at least one weight is required");
        for (std::size_t i = 0; i < grid.size(); ++i) {
            if (!(grid[i] > 0.0)) throw InvalidArgument("--grid: weights must be > 0");
            if (i > 0 && !(grid[i] > grid[i - 1])) throw InvalidArgument("--grid: weights must be ascending");
        }
        if (grid.back() != steer.u_max) throw InvalidArgument("--grid: must end at --umax");
        if (k_list.empty()) throw InvalidArgument("--k-list: at least one k is required");
        for (auto k : k_list) {
            if (k == 0) throw InvalidArgument("--k-list: values must be >= 1");
        }
    }
    if (command == "generate") {
        if (completions == 0) throw InvalidArgument("--n: must be >= 1");
        if (unsteered && !attributes.empty()) throw InvalidArgument("--unsteered: cannot be combined with --attribute");
        if (!unsteered && attributes.empty()) throw InvalidArgument("--attribute: at least one target is required");
        if (each && attributes.empty()) throw InvalidArgument("--each: needs --attribute");
        if (!prompts.empty() && prompts_file) throw InvalidArgument("--prompt and --prompts-file are exclusive");
    }
    if (command == "eval" && inputs.empty()) throw InvalidArgument("--input: at least one JSONL file is required");
    try {
        steer.validate();
    } catch (const InvalidArgument& e) {
        throw InvalidArgument(std::string("steering settings: ") + e.what());
    }
}

nlohmann::ordered_json RunConfig::to_json() const {
    nlohmann::ordered_json j;
    j["command"] = command;
    j["model"] = model.generic_string();
    j["vocab"] = vocab.generic_string();
    j["merges"] = merges.generic_string();
    j["seed"] = seed;

    if (command == "atlas" || command == "profile-report") {
        j["first_layer"] = space.first_layer;
        j["last_layer"] = space.last_layer ? nlohmann::ordered_json(*space.last_layer) : nlohmann::ordered_json(nullptr);
        j["sample"] = space.sample ? nlohmann::ordered_json(*space.sample) : nlohmann::ordered_json(nullptr);
        j["umax"] = steer.u_max;
        j["prompts"] = prompts;
        j["prompts_file"] = optional_path(prompts_file);
    }
    if (command == "atlas") j["top_m"] = top_m;
    if (command == "profile-report") {
        j["grid"] = grid;
        j["k_list"] = k_list;
        j["invariance_top"] = invariance_top;
    }
    if (uses_lexicons(command)) {
        j["preset"] = preset;
        j["lexicons"] = path_strings(lexicons);
        j["anchor"] = freectrl::to_string(anchor);
        j["refine"] = refine;
        nlohmann::ordered_json subs = nlohmann::ordered_json::array();
        for (const auto& [t, o] : subtract) subs.push_back(t + ":" + o);
        j["subtract"] = subs;
    }
    if (command == "center" || command == "generate") {
        j["attributes"] = attributes;
        j["k"] = steer.k;
        j["umax"] = steer.u_max;
        j["centers"] = path_strings(centers);
        j["atlas"] = optional_path(atlas);
    }
    if (command == "generate") {
        j["each"] = each;
        j["unsteered"] = unsteered;
        j["mu_omega"] = steer.mu_omega;
        j["lambda"] = steer.lambda;
        j["weight_mode"] = freectrl::to_string(steer.weight_mode);
        j["constant_weight"] = steer.constant_weight;
        j["sentinel"] = steer.sentinel;
        j["max_new_tokens"] = steer.max_new_tokens;
        j["max_attempts"] = steer.max_attempts;
        j["temperature"] = steer.sampling.temperature;
        j["top_k"] = steer.sampling.top_k;
        j["top_p"] = steer.sampling.top_p;
        j["greedy"] = steer.sampling.greedy;
        j["prompts"] = prompts;
        j["prompts_file"] = optional_path(prompts_file);
        j["n"] = completions;
        j["trace"] = trace;
    }
    if (command == "eval") {
        j["inputs"] = path_strings(inputs);
        j["dist_mode"] = to_string(dist_mode);
        j["sentinel"] = steer.sentinel;
        j["toxicity"] = toxicity;
        j["timing"] = optional_path(timing);
    }
    return j;
}

}  // namespace freectrl::cli
