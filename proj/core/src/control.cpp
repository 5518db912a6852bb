#include "freectrl/control.hpp"

#include "freectrl/error.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>
#include <map>

namespace freectrl {

namespace {

using MemberMap = std::map<ValueVectorRef, std::vector<std::string>>;

ControlCenter finish(const AttributeLexicon& lexicon, std::size_t k, double u_max, const std::string& fingerprint,
                     MemberMap members) {
    ControlCenter center;
    center.attribute = lexicon.attribute;
    center.k = k;
    center.u_max = u_max;
    center.fingerprint = fingerprint;
    for (auto& [ref, kws] : members) center.members.push_back({ref, std::move(kws)});
    return center;
}

void check_lexicon(const AttributeLexicon& lexicon) {
    if (lexicon.keywords().empty()) {
        throw InvalidArgument("lexicon '" + lexicon.attribute + "' has no keywords to build a center from");
    }
}

}  // namespace

bool ControlCenter::contains(ValueVectorRef ref) const {
    return std::binary_search(members.begin(), members.end(), CenterMember{ref, {}},
                              [](const CenterMember& a, const CenterMember& b) { return a.vector < b.vector; });
}

LayerDeltas ControlCenter::directions(const Model& model) const {
    LayerDeltas deltas(model.config().n_layers, model.config().d_model);
    for (const auto& m : members) deltas.accumulate(m.vector.layer, model.value_vector(m.vector), 1.0f);
    return deltas;
}

std::vector<TokenId> default_prompt(const BpeTokenizer& tokenizer) {
    const auto eot = tokenizer.end_of_text();
    if (!eot) throw InvalidArgument("tokenizer has no <|endoftext|> token; pass an explicit prompt");
    return {*eot};
}

std::vector<ControlCenter> build_centers(std::span<const AttributeLexicon> lexicons, const Model& model,
                                         const BpeTokenizer& tokenizer, const CenterParams& params,
                                         const atlas::Progress& progress) {
    if (params.k == 0) throw InvalidArgument("k must be >= 1");
    std::vector<TokenId> tokens;
    std::map<TokenId, std::size_t> slot;
    for (const auto& lex : lexicons) {
        check_lexicon(lex);
        for (const auto& kw : lex.keywords()) {
            const TokenId t = tokenizer.keyword_token_id(kw);
            if (slot.emplace(t, tokens.size()).second) tokens.push_back(t);
        }
    }
    const auto prompt = params.prompt.empty() ? default_prompt(tokenizer) : params.prompt;
    const auto located =
        atlas::locate_vectors_for_tokens(model, tokens, params.k, params.space, prompt, params.u_max, progress);

    std::vector<ControlCenter> centers;
    for (const auto& lex : lexicons) {
        MemberMap members;
        for (const auto& kw : lex.keywords()) {
            for (const auto& l : located[slot.at(tokenizer.keyword_token_id(kw))]) members[l.vector].push_back(kw);
        }
        centers.push_back(finish(lex, params.k, params.u_max, model.fingerprint(), std::move(members)));
    }
    return centers;
}

ControlCenter build_center(const AttributeLexicon& lexicon, const Model& model, const BpeTokenizer& tokenizer,
                           const CenterParams& params, const atlas::Progress& progress) {
    return build_centers(std::span(&lexicon, 1), model, tokenizer, params, progress).front();
}

ControlCenter center_from_atlas(const AttributeLexicon& lexicon, const atlas::AtlasIndex& index, const Model& model,
                                const BpeTokenizer& tokenizer, std::size_t k) {
    if (k == 0) throw InvalidArgument("k must be >= 1");
    check_lexicon(lexicon);
    if (index.fingerprint() != model.fingerprint()) {
        throw FingerprintMismatch("atlas was built for model " + index.fingerprint() + ", loaded model is " +
                                  model.fingerprint());
    }
    MemberMap members;
    for (const auto& kw : lexicon.keywords()) {
        const auto located = index.vectors_for_token(tokenizer.keyword_token_id(kw));
        const std::size_t n = std::min(k, located.size());
        for (std::size_t i = 0; i < n; ++i) members[located[i].vector].push_back(kw);
    }
    return finish(lexicon, k, index.params().u_max, model.fingerprint(), std::move(members));
}

void save_center(const std::filesystem::path& path, const ControlCenter& center) {
    nlohmann::ordered_json members = nlohmann::ordered_json::array();
    for (const auto& m : center.members) {
        nlohmann::ordered_json row = {m.vector.layer, m.vector.row};
        for (const auto& kw : m.keywords) row.push_back(kw);
        members.push_back(std::move(row));
    }
    const nlohmann::ordered_json doc = {{"attribute", center.attribute},
                                        {"k", center.k},
                                        {"u_max", center.u_max},
                                        {"fingerprint", center.fingerprint},
                                        {"members", std::move(members)}};
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot write center: " + path.string());
    out << doc.dump(1) << '\n';
}

ControlCenter load_center(const std::filesystem::path& path, const std::optional<std::string>& expected_fingerprint) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open center: " + path.string());
    nlohmann::json doc;
    try {
        in >> doc;
        ControlCenter center;
        center.attribute = doc.at("attribute").get<std::string>();
        center.k = doc.at("k").get<std::size_t>();
        center.u_max = doc.at("u_max").get<double>();
        center.fingerprint = doc.at("fingerprint").get<std::string>();
        if (expected_fingerprint && *expected_fingerprint != center.fingerprint) {
            throw FingerprintMismatch("center " + path.string() + " was built for model " + center.fingerprint +
                                      ", loaded model is " + *expected_fingerprint);
        }
        for (const auto& row : doc.at("members")) {
            if (!row.is_array() || row.size() < 3) throw Error("center member needs layer, row and a keyword");
            CenterMember m{{row[0].get<std::uint32_t>(), row[1].get<std::uint32_t>()}, {}};
            for (std::size_t i = 2; i < row.size(); ++i) m.keywords.push_back(row[i].get<std::string>());
            center.members.push_back(std::move(m));
        }
        std::sort(center.members.begin(), center.members.end(),
                  [](const CenterMember& a, const CenterMember& b) { return a.vector < b.vector; });
        for (std::size_t i = 1; i < center.members.size(); ++i) {
            if (center.members[i].vector == center.members[i - 1].vector) {
                throw Error("duplicate member " + to_string(center.members[i].vector) + " in " + path.string());
            }
        }
        return center;
    } catch (const nlohmann::json::exception& e) {
        throw Error("invalid center file " + path.string() + ": " + e.what());
    }
}

}  // namespace freectrl
