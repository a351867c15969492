#include "brainwash/archive.hpp"

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "brainwash/error.hpp"

namespace brainwash {

namespace {

constexpr std::array<char, 4> kMagic = {'B', 'W', 'T', 'A'};

template <class U>
void write_le(std::ostream& out, U value) {
    static_assert(std::is_unsigned_v<U>);
    for (std::size_t i = 0; i < sizeof(U); ++i) out.put(static_cast<char>((value >> (8 * i)) & 0xFF));
}

template <class U>
U read_le(std::istream& in) {
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        const int c = in.get();
        if (c == EOF) throw RuntimeFailure("archive truncated");
        value |= static_cast<U>(static_cast<unsigned char>(c)) << (8 * i);
    }
    return value;
}

std::int64_t element_count(const std::vector<std::int64_t>& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

}  // namespace

void TensorArchive::put(const std::string& name, std::span<const double> values, std::vector<std::int64_t> shape) {
    if (shape.empty()) shape = {static_cast<std::int64_t>(values.size())};
    BRAINWASH_REQUIRE(element_count(shape) == static_cast<std::int64_t>(values.size()),
                      "archive: shape does not match element count for '" + name + "'");
    if (!entries_.count(name)) order_.push_back(name);
    entries_[name] = Entry{"f64", std::move(shape), {values.begin(), values.end()}, {}};
}

void TensorArchive::put_ints(const std::string& name, std::span<const std::int64_t> values,
                             std::vector<std::int64_t> shape) {
    if (shape.empty()) shape = {static_cast<std::int64_t>(values.size())};
    BRAINWASH_REQUIRE(element_count(shape) == static_cast<std::int64_t>(values.size()),
                      "archive: shape does not match element count for '" + name + "'");
    if (!entries_.count(name)) order_.push_back(name);
    entries_[name] = Entry{"i64", std::move(shape), {}, {values.begin(), values.end()}};
}

bool TensorArchive::contains(const std::string& name) const { return entries_.count(name) > 0; }

const TensorArchive::Entry& TensorArchive::entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw RuntimeFailure("archive: missing tensor '" + name + "'");
    return it->second;
}

const std::vector<double>& TensorArchive::doubles(const std::string& name) const {
    const auto& e = entry(name);
    if (e.dtype != "f64") throw RuntimeFailure("archive: tensor '" + name + "' is not f64");
    return e.f64;
}

const std::vector<std::int64_t>& TensorArchive::ints(const std::string& name) const {
    const auto& e = entry(name);
    if (e.dtype != "i64") throw RuntimeFailure("archive: tensor '" + name + "' is not i64");
    return e.i64;
}

const std::vector<std::int64_t>& TensorArchive::shape(const std::string& name) const { return entry(name).shape; }

void TensorArchive::save(const std::filesystem::path& path) const {
    nlohmann::json header;
    header["meta"] = meta_;
    header["tensors"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& name : order_) {
        const auto& e = entries_.at(name);
        const std::uint64_t nbytes = 8ULL * static_cast<std::uint64_t>(element_count(e.shape));
        header["tensors"].push_back(
            {{"name", name}, {"dtype", e.dtype}, {"shape", e.shape}, {"offset", offset}, {"nbytes", nbytes}});
        offset += nbytes;
    }
    const std::string text = header.dump();

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw RuntimeFailure("archive: cannot open '" + path.string() + "' for writing");
    out.write(kMagic.data(), kMagic.size());
    write_le<std::uint32_t>(out, kArchiveVersion);
    write_le<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& name : order_) {
        const auto& e = entries_.at(name);
        if (e.dtype == "f64") {
            for (double v : e.f64) write_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
        } else {
            for (std::int64_t v : e.i64) write_le<std::uint64_t>(out, static_cast<std::uint64_t>(v));
        }
    }
    if (!out) throw RuntimeFailure("archive: write failed for '" + path.string() + "'");
}

TensorArchive TensorArchive::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw RuntimeFailure("archive: cannot open '" + path.string() + "'");
    std::array<char, 4> magic{};
    in.read(magic.data(), magic.size());
    if (!in || magic != kMagic) throw RuntimeFailure("archive: bad magic in '" + path.string() + "'");
    const auto version = read_le<std::uint32_t>(in);
    if (version != kArchiveVersion) {
        throw RuntimeFailure("archive: version mismatch (file " + std::to_string(version) + ", expected " +
                             std::to_string(kArchiveVersion) + ")");
    }
    const auto len = read_le<std::uint64_t>(in);
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    if (!in) throw RuntimeFailure("archive: truncated metadata");
    const auto header = nlohmann::json::parse(text);

    TensorArchive ar;
    ar.meta_ = header.at("meta");
    for (const auto& t : header.at("tensors")) {
        Entry e;
        e.dtype = t.at("dtype").get<std::string>();
        e.shape = t.at("shape").get<std::vector<std::int64_t>>();
        const auto count = element_count(e.shape);
        if (e.dtype == "f64") {
            e.f64.resize(static_cast<std::size_t>(count));
            for (auto& v : e.f64) v = std::bit_cast<double>(read_le<std::uint64_t>(in));
        } else if (e.dtype == "i64") {
            e.i64.resize(static_cast<std::size_t>(count));
            for (auto& v : e.i64) v = static_cast<std::int64_t>(read_le<std::uint64_t>(in));
        } else {
            throw RuntimeFailure("archive: unknown dtype '" + e.dtype + "'");
        }
        const auto name = t.at("name").get<std::string>();
        ar.order_.push_back(name);
        ar.entries_[name] = std::move(e);
    }
    return ar;
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1) {
        throw RuntimeFailure("sha256 failed");
    }
    std::ostringstream hex;
    for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
    return hex.str();
}

std::string sha256_hex(const std::string& text) {
    return sha256_hex(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string sha256_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw RuntimeFailure("cannot open '" + path.string() + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return sha256_hex(bytes);
}

}  // namespace brainwash
