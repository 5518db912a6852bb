#pragma once

#include "freectrl/atlas.hpp"
#include "freectrl/eval.hpp"
#include "freectrl/lexicon.hpp"
#include "freectrl/steer.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace freectrl::cli {

/// Effective settings of one CLI run, after config file, preset and
/// command-line overrides have been merged.
struct RunConfig {
    std::string command;

    std::filesystem::path model;
    std::filesystem::path vocab;
    std::filesystem::path merges;
    std::vector<std::filesystem::path> lexicons;
    std::vector<std::filesystem::path> centers;
    std::optional<std::filesystem::path> atlas;
    std::filesystem::path out;
    std::uint64_t seed = 0;
    int threads = 0;
    bool quiet = false;

    // atlas, profile-report
    atlas::SearchSpace space;
    std::size_t top_m = 50;
    std::vector<double> grid = {1, 5, 10, 20, 30, 50};
    std::vector<std::size_t> k_list = {1, 5, 10, 20, 50};
    std::size_t invariance_top = 10;

    // center, generate, eval
    std::string preset = "topic";
    std::vector<std::string> attributes;
    bool each = false;
    bool unsteered = false;
    AnchorMode anchor = AnchorMode::Name;
    bool refine = true;
    std::vector<std::pair<std::string, std::string>> subtract;  // (target, other)
    SteerConfig steer;

    // generate, profile-report
    std::vector<std::string> prompts;
    std::optional<std::filesystem::path> prompts_file;
    std::size_t completions = 5;
    bool trace = false;

    // eval
    std::vector<std::filesystem::path> inputs;
    DistAggregation dist_mode = DistAggregation::PerText;
    bool toxicity = false;
    std::optional<std::filesystem::path> timing;

    /// Throws InvalidArgument naming the offending option.
    void validate() const;
    /// The settings that influence this command's artifacts.
    nlohmann::ordered_json to_json() const;
};

/// Directory holding the bundled vocabulary, lexicons and prompts.
std::filesystem::path data_dir();

/// Bundled lexicon files for a preset.
std::vector<std::filesystem::path> preset_lexicons(const std::string& preset);

/// "A..B" or "A" -> inclusive layer range.
std::pair<std::size_t, std::size_t> parse_layer_range(const std::string& text);
/// "negative:toxic" -> (negative, toxic).
std::pair<std::string, std::string> parse_subtraction(const std::string& text);
DistAggregation parse_dist_mode(const std::string& text);
std::string to_string(DistAggregation mode);

}  // namespace freectrl::cli
