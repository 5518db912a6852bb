#include "freectrl/eval.hpp"
#include "freectrl/fingerprint.hpp"

#include <httplib.h>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <thread>

namespace freectrl {

namespace {

double now_seconds() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

bool retryable(int status) { return status == 429 || status >= 500; }

}  // namespace

ToxicityClient::ToxicityClient(ToxicityOptions options) : options_(std::move(options)) {
    if (options_.api_key && !options_.api_key->empty()) {
        key_ = *options_.api_key;
    } else if (const char* env = std::getenv("PERSPECTIVE_API_KEY"); env != nullptr && *env != '\0') {
        key_ = env;
    } else {
        throw ToxicityDisabled("toxicity scoring disabled: set PERSPECTIVE_API_KEY to enable it");
    }
    if (!(options_.requests_per_second > 0.0)) throw InvalidArgument("requests_per_second must be > 0");
    if (options_.max_retries < 0) throw InvalidArgument("max_retries must be >= 0");
    if (options_.cache_dir) std::filesystem::create_directories(*options_.cache_dir);
}

std::optional<double> ToxicityClient::cached(const std::string& digest) const {
    if (!options_.cache_dir) return std::nullopt;
    std::ifstream in(*options_.cache_dir / (digest + ".json"));
    if (!in) return std::nullopt;
    try {
        nlohmann::json j;
        in >> j;
        return j.at("toxicity").get<double>();
    } catch (const nlohmann::json::exception&) {
        return std::nullopt;
    }
}

void ToxicityClient::store(const std::string& digest, double value) const {
    if (!options_.cache_dir) return;
    std::ofstream out(*options_.cache_dir / (digest + ".json"), std::ios::trunc);
    out << nlohmann::json{{"toxicity", value}}.dump() << '\n';
}

double ToxicityClient::fetch(const std::string& text) {
    const nlohmann::json body = {{"comment", {{"text", text}}},
                                 {"languages", {"en"}},
                                 {"requestedAttributes", {{"TOXICITY", nlohmann::json::object()}}}};
    const std::string target = options_.path + "?key=" + key_;
    httplib::Client client(options_.endpoint);
    client.set_connection_timeout(options_.timeout_seconds, 0);
    client.set_read_timeout(options_.timeout_seconds, 0);

    std::string last_error;
    for (int attempt = 0; attempt <= options_.max_retries; ++attempt) {
        if (attempt > 0 && options_.backoff_ms > 0) {
            std::this_thread::sleep_for(std::chrono::milliseconds(options_.backoff_ms << (attempt - 1)));
        }
        const double wait = last_request_ + 1.0 / options_.requests_per_second - now_seconds();
        if (wait > 0.0) std::this_thread::sleep_for(std::chrono::duration<double>(wait));
        last_request_ = now_seconds();
        ++requests_;

        auto res = client.Post(target, body.dump(), "application/json");
        if (!res) {
            last_error = "transport error: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status == 200) {
            try {
                return nlohmann::json::parse(res->body)
                    .at("attributeScores")
                    .at("TOXICITY")
                    .at("summaryScore")
                    .at("value")
                    .get<double>();
            } catch (const nlohmann::json::exception& e) {
                throw Error(std::string("unexpected toxicity response: ") + e.what());
            }
        }
        last_error = "HTTP " + std::to_string(res->status);
        if (!retryable(res->status)) break;
    }
    throw Error("toxicity request failed after retries: " + last_error);
}

double ToxicityClient::score(const std::string& text) {
    const auto digest = sha256_hex(text);
    if (auto hit = cached(digest)) return *hit;
    const double value = fetch(text);
    store(digest, value);
    return value;
}

std::vector<double> ToxicityClient::score(std::span<const std::string> texts) {
    std::vector<double> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.push_back(score(t));
    return out;
}

}  // namespace freectrl
