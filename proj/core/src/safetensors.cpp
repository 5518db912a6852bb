#include "freectrl/safetensors.hpp"

#include "freectrl/error.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <functional>
#include <numeric>

namespace freectrl::safetensors {

namespace {

std::uint64_t read_u64_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

std::size_t dtype_size(const std::string& dtype) {
    if (dtype == "F64" || dtype == "I64" || dtype == "U64") return 8;
    if (dtype == "F32" || dtype == "I32" || dtype == "U32") return 4;
    if (dtype == "F16" || dtype == "BF16" || dtype == "I16" || dtype == "U16") return 2;
    if (dtype == "I8" || dtype == "U8" || dtype == "BOOL" || dtype == "F8_E4M3" || dtype == "F8_E5M2") return 1;
    return 0;
}

}  // namespace

std::size_t TensorInfo::numel() const {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

float half_to_float(std::uint16_t h) {
    const std::uint32_t sign = (h & 0x8000u) << 16;
    std::uint32_t exp = (h >> 10) & 0x1Fu;
    std::uint32_t mant = h & 0x3FFu;
    std::uint32_t bits;
    if (exp == 0) {
        if (mant == 0) {
            bits = sign;
        } else {
            // subnormal: renormalise
            exp = 127 - 15 + 1;
            while ((mant & 0x400u) == 0) {
                mant <<= 1;
                --exp;
            }
            mant &= 0x3FFu;
            bits = sign | (exp << 23) | (mant << 13);
        }
    } else if (exp == 0x1F) {
        bits = sign | 0x7F800000u | (mant << 13);
    } else {
        bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
    }
    return std::bit_cast<float>(bits);
}

float bfloat16_to_float(std::uint16_t bits) {
    return std::bit_cast<float>(static_cast<std::uint32_t>(bits) << 16);
}

Reader::Reader(std::filesystem::path path) : path_(std::move(path)) {
    std::ifstream in(path_, std::ios::binary);
    if (!in) throw Error("cannot open checkpoint: " + path_.string());

    unsigned char len_bytes[8];
    if (!in.read(reinterpret_cast<char*>(len_bytes), 8)) {
        throw Error("truncated safetensors header: " + path_.string());
    }
    const std::uint64_t header_len = read_u64_le(len_bytes);
    const auto file_size = std::filesystem::file_size(path_);
    if (header_len > file_size - 8) throw Error("corrupt safetensors header length: " + path_.string());

    std::string header(header_len, '\0');
    in.read(header.data(), static_cast<std::streamsize>(header_len));
    data_offset_ = 8 + header_len;

    nlohmann::json j;
    try {
        j = nlohmann::json::parse(header);
    } catch (const nlohmann::json::exception& e) {
        throw Error("invalid safetensors JSON header in " + path_.string() + ": " + e.what());
    }
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (it.key() == "__metadata__") {
            for (auto m = it->begin(); m != it->end(); ++m) {
                metadata_[m.key()] = m->is_string() ? m->get<std::string>() : m->dump();
            }
            continue;
        }
        TensorInfo t;
        t.name = it.key();
        t.dtype = it->at("dtype").get<std::string>();
        t.shape = it->at("shape").get<std::vector<std::size_t>>();
        const auto offsets = it->at("data_offsets").get<std::vector<std::uint64_t>>();
        if (offsets.size() != 2 || offsets[1] < offsets[0] || data_offset_ + offsets[1] > file_size) {
            throw CheckpointError(t.name, "tensor data offsets out of bounds");
        }
        t.begin = offsets[0];
        t.end = offsets[1];
        const std::size_t width = dtype_size(t.dtype);
        if (width != 0 && t.numel() * width != t.end - t.begin) {
            throw CheckpointError(t.name, "tensor byte size does not match shape");
        }
        tensors_.emplace(t.name, std::move(t));
    }
}

bool Reader::contains(const std::string& name) const { return tensors_.contains(name); }

const TensorInfo& Reader::info(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw CheckpointError(name, "missing tensor");
    return it->second;
}

std::vector<std::string> Reader::names() const {
    std::vector<std::string> out;
    out.reserve(tensors_.size());
    for (const auto& [name, _] : tensors_) out.push_back(name);
    return out;
}

std::vector<float> Reader::read_f32(const std::string& name) const {
    const TensorInfo& t = info(name);
    if (t.dtype != "F32" && t.dtype != "F16" && t.dtype != "BF16") {
        throw CheckpointError(name, "unsupported dtype " + t.dtype);
    }
    std::ifstream in(path_, std::ios::binary);
    in.seekg(static_cast<std::streamoff>(data_offset_ + t.begin));
    std::vector<unsigned char> raw(t.end - t.begin);
    if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
        throw CheckpointError(name, "truncated tensor data");
    }

    const std::size_t n = t.numel();
    std::vector<float> out(n);
    if (t.dtype == "F32") {
        for (std::size_t i = 0; i < n; ++i) {
            std::uint32_t bits = 0;
            for (int b = 3; b >= 0; --b) bits = (bits << 8) | raw[i * 4 + static_cast<std::size_t>(b)];
            out[i] = std::bit_cast<float>(bits);
        }
    } else {
        const bool is_half = t.dtype == "F16";
        for (std::size_t i = 0; i < n; ++i) {
            const auto bits = static_cast<std::uint16_t>(raw[i * 2] | (raw[i * 2 + 1] << 8));
            out[i] = is_half ? half_to_float(bits) : bfloat16_to_float(bits);
        }
    }
    return out;
}

void Writer::add(const std::string& name, std::vector<std::size_t> shape, std::span<const float> data) {
    const std::size_t n = std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
    if (n != data.size()) throw InvalidArgument("tensor " + name + ": data size does not match shape");
    tensors_[name] = Entry{std::move(shape), std::vector<float>(data.begin(), data.end())};
}

void Writer::set_metadata(const std::string& key, const std::string& value) { metadata_[key] = value; }

void Writer::write(const std::filesystem::path& path) const {
    nlohmann::json header = nlohmann::json::object();
    if (!metadata_.empty()) header["__metadata__"] = metadata_;
    std::uint64_t offset = 0;
    for (const auto& [name, entry] : tensors_) {
        const std::uint64_t bytes = entry.data.size() * 4;
        header[name] = {{"dtype", "F32"}, {"shape", entry.shape}, {"data_offsets", {offset, offset + bytes}}};
        offset += bytes;
    }
    std::string text = header.dump();
    while ((text.size() + 8) % 8 != 0) text.push_back(' ');

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint: " + path.string());
    unsigned char len[8];
    std::uint64_t hl = text.size();
    for (int i = 0; i < 8; ++i) len[i] = static_cast<unsigned char>((hl >> (8 * i)) & 0xFF);
    out.write(reinterpret_cast<const char*>(len), 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, entry] : tensors_) {
        for (float f : entry.data) {
            const auto bits = std::bit_cast<std::uint32_t>(f);
            unsigned char b[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                                  static_cast<unsigned char>(bits >> 16), static_cast<unsigned char>(bits >> 24)};
            out.write(reinterpret_cast<const char*>(b), 4);
        }
    }
}

}  // namespace freectrl::safetensors
