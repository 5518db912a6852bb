#include "freectrl/lexicon.hpp"

#include "freectrl/error.hpp"

#include <nlohmann/json.hpp>
#include <unicode/unistr.h>

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace freectrl {

namespace {

std::string lowercase(std::string_view text) {
    std::string out;
    icu::UnicodeString::fromUTF8(icu::StringPiece(text.data(), static_cast<int32_t>(text.size())))
        .toLower()
        .toUTF8String(out);
    return out;
}

std::string trim(std::string_view s) {
    const auto ws = " \t\r\n\f\v";
    const auto b = s.find_first_not_of(ws);
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(ws);
    return std::string(s.substr(b, e - b + 1));
}

AttributeLexicon make_lexicon(const std::string& attribute, const std::vector<std::string>& keywords,
                              const std::string& source) {
    if (attribute.empty()) throw InvalidArgument("attribute name is empty in " + source);
    AttributeLexicon lex;
    lex.attribute = attribute;
    std::set<std::string> seen;
    for (const auto& kw : keywords) {
        auto k = lowercase(trim(kw));
        if (k.empty()) continue;
        if (seen.insert(k).second) lex.raw.push_back(std::move(k));
    }
    if (lex.raw.empty()) throw InvalidArgument("no keywords for attribute '" + attribute + "' in " + source);
    return lex;
}

void append_unique(std::vector<AttributeLexicon>& out, AttributeLexicon lex) {
    for (const auto& existing : out) {
        if (existing.attribute == lex.attribute) {
            throw InvalidArgument("attribute '" + lex.attribute + "' defined more than once");
        }
    }
    out.push_back(std::move(lex));
}

std::vector<float> centroid_anchor(const AttributeLexicon& lex) {
    const auto& kws = lex.keywords();
    if (kws.empty()) throw InvalidArgument("attribute '" + lex.attribute + "' has no keywords for a centroid anchor");
    std::vector<double> sum;
    for (const auto& kw : kws) {
        const auto& e = lex.embedding(kw);
        if (sum.empty()) sum.assign(e.size(), 0.0);
        for (std::size_t i = 0; i < e.size(); ++i) sum[i] += e[i];
    }
    std::vector<float> mean(sum.size());
    for (std::size_t i = 0; i < sum.size(); ++i) mean[i] = static_cast<float>(sum[i] / static_cast<double>(kws.size()));
    return normalized(mean);
}

}  // namespace

AnchorMode parse_anchor_mode(std::string_view text) {
    if (text == "name") return AnchorMode::Name;
    if (text == "centroid") return AnchorMode::Centroid;
    throw InvalidArgument("unknown anchor mode '" + std::string(text) + "' (expected name or centroid)");
}

std::string to_string(AnchorMode mode) { return mode == AnchorMode::Name ? "name" : "centroid"; }

const std::vector<float>& AttributeLexicon::embedding(const std::string& keyword) const {
    auto it = embeddings.find(keyword);
    if (it == embeddings.end()) {
        throw InvalidArgument("keyword '" + keyword + "' of attribute '" + attribute + "' has no embedding");
    }
    return it->second;
}

std::vector<AttributeLexicon> make_lexicons(const std::vector<std::pair<std::string, std::vector<std::string>>>& lists) {
    std::vector<AttributeLexicon> out;
    for (const auto& [name, words] : lists) append_unique(out, make_lexicon(name, words, "input"));
    if (out.size() < 2) throw InvalidArgument("at least two attributes are required, got " + std::to_string(out.size()));
    return out;
}

std::vector<AttributeLexicon> load_lexicons(std::span<const std::filesystem::path> paths) {
    std::vector<AttributeLexicon> out;
    for (const auto& path : paths) {
        std::ifstream in(path);
        if (!in) throw Error("cannot open lexicon file: " + path.string());
        const std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        if (trim(content).empty()) throw InvalidArgument("lexicon file is empty: " + path.string());

        if (path.extension() == ".json") {
            nlohmann::ordered_json doc;
            try {
                doc = nlohmann::ordered_json::parse(content);
            } catch (const nlohmann::json::exception& e) {
                throw InvalidArgument("invalid lexicon JSON " + path.string() + ": " + e.what());
            }
            if (!doc.is_object() || doc.empty()) {
                throw InvalidArgument("lexicon JSON must be a non-empty object: " + path.string());
            }
            for (const auto& [name, words] : doc.items()) {
                if (!words.is_array()) throw InvalidArgument("keywords of '" + name + "' must be an array");
                append_unique(out, make_lexicon(lowercase(name), words.get<std::vector<std::string>>(), path.string()));
            }
        } else {
            std::vector<std::string> words;
            std::istringstream lines(content);
            for (std::string line; std::getline(lines, line);) words.push_back(line);
            append_unique(out, make_lexicon(lowercase(path.stem().string()), words, path.string()));
        }
    }
    if (out.size() < 2) throw InvalidArgument("at least two attributes are required, got " + std::to_string(out.size()));
    return out;
}

std::vector<float> normalized(std::span<const float> v) {
    double sq = 0.0;
    for (float x : v) sq += static_cast<double>(x) * x;
    const double norm = std::sqrt(sq);
    if (norm == 0.0 || !std::isfinite(norm)) throw InvalidArgument("cannot normalize a zero or non-finite vector");
    std::vector<float> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i] / norm);
    return out;
}

double cosine(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) throw InvalidArgument("cosine: dimension mismatch");
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += static_cast<double>(a[i]) * b[i];
        aa += static_cast<double>(a[i]) * a[i];
        bb += static_cast<double>(b[i]) * b[i];
    }
    if (aa == 0.0 || bb == 0.0) return 0.0;
    return ab / std::sqrt(aa * bb);
}

std::vector<float> keyword_embedding(const Model& model, const BpeTokenizer& tokenizer, std::string_view keyword) {
    const auto ids = tokenizer.keyword_tokens(keyword, PositionHint::WordInitial);
    const std::size_t d = model.config().d_model;
    std::vector<double> sum(d, 0.0);
    for (TokenId id : ids) {
        const auto row = model.embedding_of(id);
        for (std::size_t i = 0; i < d; ++i) sum[i] += row[i];
    }
    std::vector<float> mean(d);
    for (std::size_t i = 0; i < d; ++i) mean[i] = static_cast<float>(sum[i] / static_cast<double>(ids.size()));
    return normalized(mean);
}

void embed_lexicons(std::vector<AttributeLexicon>& lexicons, const Model& model, const BpeTokenizer& tokenizer,
                    AnchorMode anchor) {
    for (auto& lex : lexicons) {
        for (const auto& kw : lex.raw) {
            if (!lex.embeddings.contains(kw)) lex.embeddings.emplace(kw, keyword_embedding(model, tokenizer, kw));
        }
        lex.anchor = anchor == AnchorMode::Name ? keyword_embedding(model, tokenizer, lex.attribute)
                                                : centroid_anchor(lex);
    }
}

RefinementScore refinement_score(double r_target, std::span<const double> r_others) {
    if (r_others.empty()) throw InvalidArgument("refinement needs at least two attributes");
    double denom = 0.0;
    for (double r : r_others) denom += r;
    if (denom == 0.0) return {0.0, true};
    return {r_target * static_cast<double>(r_others.size()) / denom, false};
}

double relevance(std::span<const float> keyword, std::span<const float> anchor) {
    return std::max(0.0, cosine(keyword, anchor));
}

RefinementReport refine(std::vector<AttributeLexicon>& lexicons, AnchorMode anchor) {
    if (lexicons.size() < 2) throw InvalidArgument("refinement needs at least two attributes");
    for (const auto& lex : lexicons) {
        if (lex.anchor.empty()) throw InvalidArgument("lexicon '" + lex.attribute + "' is not embedded");
    }
    RefinementReport report;
    std::vector<std::vector<std::string>> kept(lexicons.size());
    for (std::size_t i = 0; i < lexicons.size(); ++i) {
        for (const auto& kw : lexicons[i].keywords()) {
            const auto& e = lexicons[i].embedding(kw);
            RefinementEntry entry{lexicons[i].attribute, kw, {}, {}};
            std::vector<double> others;
            for (std::size_t j = 0; j < lexicons.size(); ++j) {
                const double r = relevance(e, lexicons[j].anchor);
                entry.similarities.push_back(r);
                if (j != i) others.push_back(r);
            }
            entry.score = refinement_score(entry.similarities[i], others);
            if (entry.score.kept()) kept[i].push_back(kw);
            report.entries.push_back(std::move(entry));
        }
    }
    for (std::size_t i = 0; i < lexicons.size(); ++i) {
        lexicons[i].refined = std::move(kept[i]);
        lexicons[i].is_refined = true;
        if (anchor == AnchorMode::Centroid && !lexicons[i].refined.empty()) {
            lexicons[i].anchor = centroid_anchor(lexicons[i]);
        }
    }
    return report;
}

void subtract_keywords(AttributeLexicon& target, const AttributeLexicon& other) {
    const std::set<std::string> remove(other.raw.begin(), other.raw.end());
    std::erase_if(target.raw, [&](const std::string& k) { return remove.contains(k); });
    std::erase_if(target.refined, [&](const std::string& k) { return remove.contains(k); });
}

std::size_t index_of(std::span<const AttributeLexicon> lexicons, std::string_view attribute) {
    for (std::size_t i = 0; i < lexicons.size(); ++i) {
        if (lexicons[i].attribute == attribute) return i;
    }
    std::string known;
    for (const auto& l : lexicons) known += (known.empty() ? "" : ", ") + l.attribute;
    throw InvalidArgument("unknown attribute '" + std::string(attribute) + "' (known: " + known + ")");
}

void save_lexicons(const std::filesystem::path& path, std::span<const AttributeLexicon> lexicons) {
    nlohmann::ordered_json doc = nlohmann::ordered_json::object();
    for (const auto& lex : lexicons) doc[lex.attribute] = lex.keywords();
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out << doc.dump(1) << '\n';
}

void save_refinement_report(const std::filesystem::path& path, const RefinementReport& report,
                            std::span<const AttributeLexicon> lexicons) {
    nlohmann::ordered_json attrs = nlohmann::ordered_json::array();
    for (const auto& lex : lexicons) attrs.push_back(lex.attribute);
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (const auto& e : report.entries) {
        rows.push_back({{"attribute", e.attribute},
                        {"keyword", e.keyword},
                        {"similarities", e.similarities},
                        {"g", e.score.g},
                        {"zero_denominator", e.score.zero_denominator},
                        {"kept", e.score.kept()}});
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out << nlohmann::ordered_json{{"attributes", attrs}, {"entries", rows}}.dump(1) << '\n';
}

}  // namespace freectrl
