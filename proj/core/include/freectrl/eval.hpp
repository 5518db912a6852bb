#pragma once

#include "freectrl/error.hpp"
#include "freectrl/lexicon.hpp"
#include "freectrl/model.hpp"
#include "freectrl/steer.hpp"
#include "freectrl/tokenizer.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace freectrl {

/// One line of a generation JSONL file.
struct GenerationRecord {
    std::string prompt;
    std::vector<std::string> attributes;  // targets; empty for unsteered output
    std::size_t completion = 0;
    std::uint64_t seed = 0;
    std::string text;  // generated continuation only
    bool accepted = false;
    std::size_t attempts = 0;
    std::vector<double> final_mu;
    std::vector<TokenId> prompt_ids;
    std::vector<TokenId> token_ids;  // generated continuation
    std::optional<std::vector<TraceStep>> trace;
};

nlohmann::ordered_json to_json(const TraceStep& step);
nlohmann::ordered_json to_json(const GenerationRecord& record);
GenerationRecord record_from_json(const nlohmann::json& j);

std::vector<GenerationRecord> read_records(const std::filesystem::path& jsonl);
void write_records(const std::filesystem::path& jsonl, std::span<const GenerationRecord> records);

enum class DistAggregation { PerText, Corpus };

std::vector<std::string> whitespace_words(std::string_view text);

/// Unique n-grams over total n-grams of whitespace-separated words. PerText
/// averages over texts with at least n words; Corpus pools all n-grams.
/// Throws when no text has n words.
double dist_n(std::span<const std::string> texts, std::size_t n, DistAggregation mode = DistAggregation::PerText);

/// exp of the mean negative log-likelihood of tokens[1..] under the unsteered
/// model. Needs at least two tokens.
double self_perplexity(const Model& model, std::span<const TokenId> tokens);
double self_perplexity(const Model& model, const BpeTokenizer& tokenizer, std::string_view text);

struct AttributeSummary {
    std::string attribute;
    std::size_t records = 0;
    double mean_mu = 0.0;        // over records without a zero-denominator score
    std::size_t sentinel = 0;    // records whose score hit the zero denominator
    double dominant_fraction = 0.0;  // target mu above every non-target mu
};

/// Rescoring of saved records (prompt + continuation) with the sentence score.
/// Records with an attribute unknown to the lexicons are an error.
std::vector<AttributeSummary> attribute_report(std::span<const GenerationRecord> records,
                                               std::span<const AttributeLexicon> lexicons, const Model& model,
                                               double sentinel = 1e9);

struct EvalReport {
    std::size_t records = 0;
    std::vector<AttributeSummary> attributes;
    double mean_perplexity = 0.0;
    std::size_t perplexity_skipped = 0;
    double dist1 = 0.0, dist2 = 0.0, dist3 = 0.0;
    double acceptance_rate = 0.0;
    std::optional<double> seconds_per_valid_output;
    std::optional<double> mean_toxicity;

    nlohmann::ordered_json to_json() const;
};

struct EvalOptions {
    DistAggregation dist_mode = DistAggregation::PerText;
    double sentinel = 1e9;
    std::optional<double> total_seconds;  // wall-clock of the generation run
};

EvalReport evaluate(std::span<const GenerationRecord> records, std::span<const AttributeLexicon> lexicons,
                    const Model& model, const EvalOptions& options = {});

class ToxicityDisabled : public Error {
public:
    using Error::Error;
};

struct ToxicityOptions {
    std::string endpoint = "https://commentanalyzer.googleapis.com";
    std::string path = "/v1alpha1/comments:analyze";
    std::optional<std::string> api_key;  // falls back to PERSPECTIVE_API_KEY
    std::optional<std::filesystem::path> cache_dir;
    double requests_per_second = 1.0;
    int max_retries = 3;
    int backoff_ms = 1000;
    int timeout_seconds = 30;
};

/// Client for the comment-analysis TOXICITY attribute. Requests are serialized
/// and rate limited; scores are cached on disk by SHA-256 of the text.
class ToxicityClient {
public:
    /// Throws ToxicityDisabled when no key is configured.
    explicit ToxicityClient(ToxicityOptions options);

    double score(const std::string& text);
    std::vector<double> score(std::span<const std::string> texts);
    std::size_t network_requests() const { return requests_; }

private:
    std::optional<double> cached(const std::string& digest) const;
    void store(const std::string& digest, double value) const;
    double fetch(const std::string& text);

    ToxicityOptions options_;
    std::string key_;
    std::size_t requests_ = 0;
    double last_request_ = -1e300;
};

}  // namespace freectrl
