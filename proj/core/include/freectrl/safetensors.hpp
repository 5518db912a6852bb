#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace freectrl::safetensors {

struct TensorInfo {
    std::string name;
    std::string dtype;
    std::vector<std::size_t> shape;
    std::uint64_t begin = 0;  // byte offsets relative to the data section
    std::uint64_t end = 0;

    std::size_t numel() const;
};

// Reads a safetensors container: an 8-byte little-endian header length, a JSON
// header, then raw little-endian tensor bytes. Tensor data is read lazily.
class Reader {
public:
    explicit Reader(std::filesystem::path path);

    bool contains(const std::string& name) const;
    const TensorInfo& info(const std::string& name) const;
    std::vector<std::string> names() const;
    const std::map<std::string, std::string>& metadata() const { return metadata_; }

    // F32, F16 and BF16 are widened to float; other dtypes throw CheckpointError.
    std::vector<float> read_f32(const std::string& name) const;

private:
    std::filesystem::path path_;
    std::uint64_t data_offset_ = 0;
    std::map<std::string, TensorInfo> tensors_;
    std::map<std::string, std::string> metadata_;
};

// Writes F32 tensors. Used for fixtures and model export.
class Writer {
public:
    void add(const std::string& name, std::vector<std::size_t> shape, std::span<const float> data);
    void set_metadata(const std::string& key, const std::string& value);
    void write(const std::filesystem::path& path) const;

private:
    struct Entry {
        std::vector<std::size_t> shape;
        std::vector<float> data;
    };
    std::map<std::string, Entry> tensors_;
    std::map<std::string, std::string> metadata_;
};

float half_to_float(std::uint16_t bits);
float bfloat16_to_float(std::uint16_t bits);

}  // namespace freectrl::safetensors
