#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace brainwash {

// Versioned container of named flat tensors plus a JSON metadata block.
//
// Layout (all integers little-endian):
//   bytes 0..3   magic "BWTA"
//   u32          format version (kArchiveVersion)
//   u64          metadata length L
//   L bytes      UTF-8 JSON: {"meta": {...}, "tensors": [{"name", "dtype",
//                "shape", "offset", "nbytes"}, ...]}
//   payload      tensor bytes, offsets relative to payload start; f64 and
//                i64 elements stored little-endian
//
// Used for model checkpoints, inverted proxy datasets and noise packs.
inline constexpr std::uint32_t kArchiveVersion = 1;

class TensorArchive {
public:
    nlohmann::json& meta() { return meta_; }
    const nlohmann::json& meta() const { return meta_; }

    void put(const std::string& name, std::span<const double> values, std::vector<std::int64_t> shape = {});
    void put_ints(const std::string& name, std::span<const std::int64_t> values, std::vector<std::int64_t> shape = {});

    bool contains(const std::string& name) const;
    const std::vector<double>& doubles(const std::string& name) const;
    const std::vector<std::int64_t>& ints(const std::string& name) const;
    const std::vector<std::int64_t>& shape(const std::string& name) const;

    void save(const std::filesystem::path& path) const;
    static TensorArchive load(const std::filesystem::path& path);

private:
    struct Entry {
        std::string dtype;
        std::vector<std::int64_t> shape;
        std::vector<double> f64;
        std::vector<std::int64_t> i64;
    };
    const Entry& entry(const std::string& name) const;

    nlohmann::json meta_ = nlohmann::json::object();
    std::map<std::string, Entry> entries_;
    std::vector<std::string> order_;
};

// Lower-case hex SHA-256 digest.
std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(const std::string& text);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace brainwash
