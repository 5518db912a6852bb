#pragma once

#include "freectrl/lexicon.hpp"
#include "freectrl/model.hpp"
#include "freectrl/tokenizer.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

namespace fixtures {

using freectrl::TokenId;

struct TokenizerTables {
    std::unordered_map<std::string, TokenId> vocab;
    std::vector<std::pair<std::string, std::string>> merges;
};
const TokenizerTables& tokenizer_tables();

/// Byte-level tokenizer: the 256 byte tokens, whole-word merges for the
/// fixture words (leading-space form, plus a few bare forms), and
/// <|endoftext|> as the last id.
const freectrl::BpeTokenizer& tokenizer();
const std::vector<std::string>& animal_words();
const std::vector<std::string>& vehicle_words();
const std::vector<std::string>& neutral_words();

freectrl::ModelConfig tiny_config(std::size_t vocab_size, std::size_t d_model = 16, std::size_t n_layers = 2);

/// Gaussian weights scaled by `scale`, layer norms near identity.
freectrl::ModelWeights random_weights(const freectrl::ModelConfig& config, std::uint64_t seed, float scale = 0.2f);

/// 2 layers, d = 16, d_ffn = 64, 2 heads, 64 positions, vocabulary of the
/// fixture tokenizer. Scripted input embeddings: animal words point along
/// axis 0, vehicle words along axis 1, neutral words along axis 2; the
/// attribute-name words "animal"/"vehicle" point exactly along their axis.
const freectrl::Model& tiny_model();
freectrl::ModelWeights tiny_weights();

/// Lexicons {animal, vehicle} embedded with the tiny model.
std::vector<freectrl::AttributeLexicon> tiny_lexicons();

TokenId id(const std::string& word);  // id of " word"

/// Writes model.safetensors, vocab.json, merges.txt, lexicons.json and
/// prompts.txt for the tiny model into `dir`.
void write_assets(const std::filesystem::path& dir);

/// Fresh, empty directory under the system temp dir.
std::filesystem::path temp_dir(const std::string& name);

std::vector<float> gaussian(std::size_t n, std::uint64_t seed, float scale = 1.0f);

}  // namespace fixtures
