#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace freectrl {

// 64-bit FNV-1a, incremental.
class Fnv1a {
public:
    void update(std::span<const unsigned char> bytes);
    void update(std::string_view text);
    void update_u64(std::uint64_t value);
    std::uint64_t digest() const { return state_; }
    std::string hex() const;

private:
    std::uint64_t state_ = 0xcbf29ce484222325ull;
};

std::string sha256_hex(std::string_view text);

}  // namespace freectrl
