#include "freectrl/fingerprint.hpp"

#include <openssl/evp.h>

#include <array>
#include <cstdio>

namespace freectrl {

void Fnv1a::update(std::span<const unsigned char> bytes) {
    for (unsigned char b : bytes) {
        state_ ^= b;
        state_ *= 0x100000001b3ull;
    }
}

void Fnv1a::update(std::string_view text) {
    update(std::span(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
}

void Fnv1a::update_u64(std::uint64_t value) {
    std::array<unsigned char, 8> b{};
    for (int i = 0; i < 8; ++i) b[static_cast<std::size_t>(i)] = static_cast<unsigned char>(value >> (8 * i));
    update(b);
}

std::string Fnv1a::hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(state_));
    return buf;
}

std::string sha256_hex(std::string_view text) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    EVP_Digest(text.data(), text.size(), md.data(), &len, EVP_sha256(), nullptr);
    std::string out;
    out.reserve(len * 2);
    static constexpr char digits[] = "0123456789abcdef";
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(digits[md[i] >> 4]);
        out.push_back(digits[md[i] & 0xF]);
    }
    return out;
}

}  // namespace freectrl
