#include "freectrl/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>

namespace freectrl {

namespace {

template <class T>
std::vector<T> get_vector(const nlohmann::json& j, const char* key) {
    return j.at(key).get<std::vector<T>>();
}

std::vector<bool> get_bools(const nlohmann::json& j, const char* key) {
    std::vector<bool> out;
    for (const auto& b : j.at(key)) out.push_back(b.get<bool>());
    return out;
}

}  // namespace

nlohmann::ordered_json to_json(const TraceStep& s) {
    nlohmann::ordered_json sentinel = nlohmann::ordered_json::array();
    for (bool b : s.sentinel) sentinel.push_back(b);
    return {{"length", s.length},
            {"rho", s.rho},
            {"mu", s.mu},
            {"mu_last", s.mu_last},
            {"mu_hat", s.mu_hat},
            {"sentinel", sentinel},
            {"omega", s.omega},
            {"active", s.active ? nlohmann::ordered_json(*s.active) : nlohmann::ordered_json(nullptr)},
            {"applied_omega", s.applied_omega},
            {"token", s.token}};
}

nlohmann::ordered_json to_json(const GenerationRecord& r) {
    nlohmann::ordered_json j = {{"prompt", r.prompt},
                                {"attributes", r.attributes},
                                {"completion", r.completion},
                                {"seed", r.seed},
                                {"text", r.text},
                                {"accepted", r.accepted},
                                {"attempts", r.attempts},
                                {"final_mu", r.final_mu},
                                {"prompt_ids", r.prompt_ids},
                                {"token_ids", r.token_ids}};
    if (r.trace) {
        nlohmann::ordered_json steps = nlohmann::ordered_json::array();
        for (const auto& s : *r.trace) steps.push_back(to_json(s));
        j["trace"] = std::move(steps);
    }
    return j;
}

GenerationRecord record_from_json(const nlohmann::json& j) {
    GenerationRecord r;
    r.prompt = j.at("prompt").get<std::string>();
    r.attributes = get_vector<std::string>(j, "attributes");
    r.completion = j.value("completion", std::size_t{0});
    r.seed = j.value("seed", std::uint64_t{0});
    r.text = j.at("text").get<std::string>();
    r.accepted = j.at("accepted").get<bool>();
    r.attempts = j.at("attempts").get<std::size_t>();
    r.final_mu = get_vector<double>(j, "final_mu");
    r.prompt_ids = get_vector<TokenId>(j, "prompt_ids");
    r.token_ids = get_vector<TokenId>(j, "token_ids");
    if (j.contains("trace")) {
        std::vector<TraceStep> steps;
        for (const auto& s : j.at("trace")) {
            TraceStep st;
            st.length = s.at("length").get<std::size_t>();
            st.rho = get_vector<double>(s, "rho");
            st.mu = get_vector<double>(s, "mu");
            st.mu_last = get_vector<double>(s, "mu_last");
            st.mu_hat = get_vector<double>(s, "mu_hat");
            st.sentinel = get_bools(s, "sentinel");
            st.omega = get_vector<double>(s, "omega");
            if (!s.at("active").is_null()) st.active = s.at("active").get<std::size_t>();
            st.applied_omega = s.at("applied_omega").get<double>();
            st.token = s.at("token").get<TokenId>();
            steps.push_back(std::move(st));
        }
        r.trace = std::move(steps);
    }
    return r;
}

std::vector<GenerationRecord> read_records(const std::filesystem::path& jsonl) {
    std::ifstream in(jsonl);
    if (!in) throw Error("cannot open records: " + jsonl.string());
    std::vector<GenerationRecord> out;
    std::size_t line_no = 0;
    for (std::string line; std::getline(in, line);) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(record_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw Error(jsonl.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

void write_records(const std::filesystem::path& jsonl, std::span<const GenerationRecord> records) {
    std::ofstream out(jsonl, std::ios::trunc);
    if (!out) throw Error("cannot write records: " + jsonl.string());
    for (const auto& r : records) {
        out << to_json(r).dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) << '\n';
    }
}

std::vector<std::string> whitespace_words(std::string_view text) {
    std::vector<std::string> words;
    std::size_t i = 0;
    const auto is_ws = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; };
    while (i < text.size()) {
        while (i < text.size() && is_ws(text[i])) ++i;
        const std::size_t b = i;
        while (i < text.size() && !is_ws(text[i])) ++i;
        if (i > b) words.emplace_back(text.substr(b, i - b));
    }
    return words;
}

double dist_n(std::span<const std::string> texts, std::size_t n, DistAggregation mode) {
    if (n == 0) throw InvalidArgument("dist_n: n must be >= 1");
    if (texts.empty()) throw InvalidArgument("dist_n: no texts");
    std::set<std::vector<std::string>> pooled;
    std::size_t pooled_total = 0;
    double sum = 0.0;
    std::size_t counted = 0;
    for (const auto& text : texts) {
        const auto words = whitespace_words(text);
        if (words.size() < n) continue;
        std::set<std::vector<std::string>> unique;
        const std::size_t total = words.size() - n + 1;
        for (std::size_t i = 0; i < total; ++i) {
            std::vector<std::string> gram(words.begin() + static_cast<std::ptrdiff_t>(i),
                                          words.begin() + static_cast<std::ptrdiff_t>(i + n));
            if (mode == DistAggregation::Corpus) pooled.insert(gram);
            unique.insert(std::move(gram));
        }
        sum += static_cast<double>(unique.size()) / static_cast<double>(total);
        pooled_total += total;
        ++counted;
    }
    if (counted == 0) throw InvalidArgument("dist_n: every text is shorter than n = " + std::to_string(n));
    if (mode == DistAggregation::Corpus) return static_cast<double>(pooled.size()) / static_cast<double>(pooled_total);
    return sum / static_cast<double>(counted);
}

double self_perplexity(const Model& model, std::span<const TokenId> tokens) {
    if (tokens.size() < 2) throw InvalidArgument("perplexity needs at least two tokens");
    DecodeSession session(model);
    double nll = 0.0;
    for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
        const auto logits = session.feed(tokens.subspan(i, 1));
        double mx = -std::numeric_limits<double>::infinity();
        for (float l : logits) mx = std::max(mx, static_cast<double>(l));
        double s = 0.0;
        for (float l : logits) s += std::exp(static_cast<double>(l) - mx);
        const double logp = static_cast<double>(logits[static_cast<std::size_t>(tokens[i + 1])]) - mx - std::log(s);
        nll -= logp;
    }
    return std::exp(nll / static_cast<double>(tokens.size() - 1));
}

double self_perplexity(const Model& model, const BpeTokenizer& tokenizer, std::string_view text) {
    return self_perplexity(model, tokenizer.encode(text));
}

std::vector<AttributeSummary> attribute_report(std::span<const GenerationRecord> records,
                                               std::span<const AttributeLexicon> lexicons, const Model& model,
                                               double sentinel) {
    if (records.empty()) throw InvalidArgument("attribute report: no records");
    std::map<std::string, std::size_t> order;
    std::vector<AttributeSummary> out;
    std::vector<double> mu_sums;
    std::vector<std::size_t> dominant;

    for (const auto& r : records) {
        if (r.attributes.empty()) continue;
        std::vector<std::size_t> targets;
        for (const auto& a : r.attributes) targets.push_back(index_of(lexicons, a));

        SentenceScorer scorer(model, lexicons);
        scorer.push(r.prompt_ids);
        scorer.push(r.token_ids);
        const auto rho = scorer.rho();
        std::vector<MuScore> all;
        for (std::size_t j = 0; j < lexicons.size(); ++j) all.push_back(mu(rho, j, sentinel));

        for (std::size_t t : targets) {
            const auto& name = lexicons[t].attribute;
            auto [it, inserted] = order.emplace(name, out.size());
            if (inserted) {
                out.push_back({name, 0, 0.0, 0, 0.0});
                mu_sums.push_back(0.0);
                dominant.push_back(0);
            }
            const std::size_t slot = it->second;
            auto& summary = out[slot];
            ++summary.records;
            if (all[t].sentinel) {
                ++summary.sentinel;
            } else {
                mu_sums[slot] += all[t].value;
            }
            bool wins = true;
            for (std::size_t j = 0; j < lexicons.size(); ++j) {
                if (std::find(targets.begin(), targets.end(), j) != targets.end()) continue;
                if (!(all[t].value > all[j].value)) wins = false;
            }
            if (wins) ++dominant[slot];
        }
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
        const auto scored = out[i].records - out[i].sentinel;
        out[i].mean_mu = scored == 0 ? 0.0 : mu_sums[i] / static_cast<double>(scored);
        out[i].dominant_fraction = static_cast<double>(dominant[i]) / static_cast<double>(out[i].records);
    }
    return out;
}

nlohmann::ordered_json EvalReport::to_json() const {
    nlohmann::ordered_json attrs = nlohmann::ordered_json::array();
    for (const auto& a : attributes) {
        attrs.push_back({{"attribute", a.attribute},
                         {"records", a.records},
                         {"mean_mu", a.mean_mu},
                         {"sentinel", a.sentinel},
                         {"dominant_fraction", a.dominant_fraction}});
    }
    nlohmann::ordered_json j = {{"records", records},
                                {"attribute_scores", attrs},
                                {"attribute_scores_note", "embedding-based sentence score, not a trained classifier"},
                                {"mean_perplexity", mean_perplexity},
                                {"perplexity_skipped", perplexity_skipped},
                                {"dist1", dist1},
                                {"dist2", dist2},
                                {"dist3", dist3},
                                {"acceptance_rate", acceptance_rate}};
    j["seconds_per_valid_output"] =
        seconds_per_valid_output ? nlohmann::ordered_json(*seconds_per_valid_output) : nlohmann::ordered_json(nullptr);
    j["mean_toxicity"] = mean_toxicity ? nlohmann::ordered_json(*mean_toxicity) : nlohmann::ordered_json(nullptr);
    return j;
}

EvalReport evaluate(std::span<const GenerationRecord> records, std::span<const AttributeLexicon> lexicons,
                    const Model& model, const EvalOptions& options) {
    if (records.empty()) throw InvalidArgument("evaluate: no records");
    EvalReport report;
    report.records = records.size();
    report.attributes = attribute_report(records, lexicons, model, options.sentinel);

    std::vector<double> ppl(records.size(), -1.0);
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(records.size()); ++i) {
        const auto& r = records[static_cast<std::size_t>(i)];
        std::vector<TokenId> all = r.prompt_ids;
        all.insert(all.end(), r.token_ids.begin(), r.token_ids.end());
        if (all.size() >= 2 && !r.token_ids.empty()) ppl[static_cast<std::size_t>(i)] = self_perplexity(model, all);
    }
    double ppl_sum = 0.0;
    std::size_t ppl_count = 0;
    for (double p : ppl) {
        if (p < 0.0) {
            ++report.perplexity_skipped;
        } else {
            ppl_sum += p;
            ++ppl_count;
        }
    }
    report.mean_perplexity = ppl_count == 0 ? 0.0 : ppl_sum / static_cast<double>(ppl_count);

    std::vector<std::string> texts;
    for (const auto& r : records) texts.push_back(r.text);
    const auto safe_dist = [&](std::size_t n) {
        try {
            return dist_n(texts, n, options.dist_mode);
        } catch (const InvalidArgument&) {
            return 0.0;
        }
    };
    report.dist1 = safe_dist(1);
    report.dist2 = safe_dist(2);
    report.dist3 = safe_dist(3);

    const auto accepted = static_cast<std::size_t>(
        std::count_if(records.begin(), records.end(), [](const GenerationRecord& r) { return r.accepted; }));
    report.acceptance_rate = static_cast<double>(accepted) / static_cast<double>(records.size());
    if (options.total_seconds && accepted > 0) {
        report.seconds_per_valid_output = *options.total_seconds / static_cast<double>(accepted);
    }
    return report;
}

}  // namespace freectrl
