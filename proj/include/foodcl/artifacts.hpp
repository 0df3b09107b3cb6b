#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "foodcl/matrix.hpp"

namespace foodcl {

// Versioned binary tensor container: little-endian, fixed layout, bit-exact
// round trips. Used for backbone checkpoints and adapter files.
//
//   magic "FCT1" | u32 version | u64 meta_len | meta (UTF-8 JSON)
//   u32 tensor_count | per tensor: u32 name_len, name, u32 rows, u32 cols,
//   rows*cols doubles (IEEE-754 bit patterns, little-endian)
struct TensorContainer {
    nlohmann::json meta;
    std::vector<std::pair<std::string, Matrix>> tensors;  // insertion order preserved

    const Matrix& get(const std::string& name) const {
        for (const auto& [n, m] : tensors)
            if (n == name) return m;
        throw std::out_of_range("container: missing tensor '" + name + "'");
    }
    bool has(const std::string& name) const {
        for (const auto& [n, m] : tensors)
            if (n == name) return true;
        return false;
    }
};

namespace detail {

inline void put_u32(std::string& buf, uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& buf, uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
public:
    Reader(const std::string& buf, const std::string& origin) : buf_(buf), origin_(origin) {}
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
        pos_ += 8;
        return v;
    }
    std::string bytes(size_t n) {
        need(n);
        std::string s = buf_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    void raw(void* dst, size_t n) {
        need(n);
        std::memcpy(dst, buf_.data() + pos_, n);
        pos_ += n;
    }

private:
    void need(size_t n) {
        if (pos_ + n > buf_.size()) throw std::runtime_error("truncated container: " + origin_);
    }
    const std::string& buf_;
    std::string origin_;
    size_t pos_{0};
};

}  // namespace detail

inline void save_container(const TensorContainer& c, const std::filesystem::path& path) {
    std::string buf;
    buf += "FCT1";
    detail::put_u32(buf, 1);
    const std::string meta = c.meta.dump();
    detail::put_u64(buf, meta.size());
    buf += meta;
    detail::put_u32(buf, static_cast<uint32_t>(c.tensors.size()));
    for (const auto& [name, m] : c.tensors) {
        detail::put_u32(buf, static_cast<uint32_t>(name.size()));
        buf += name;
        detail::put_u32(buf, static_cast<uint32_t>(m.rows));
        detail::put_u32(buf, static_cast<uint32_t>(m.cols));
        for (double d : m.data) {
            uint64_t bits;
            std::memcpy(&bits, &d, sizeof(bits));
            detail::put_u64(buf, bits);
        }
    }
    std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw std::runtime_error("short write to " + path.string());
}

inline TensorContainer load_container(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    detail::Reader r(buf, path.string());
    if (r.bytes(4) != "FCT1") throw std::runtime_error("bad magic in " + path.string());
    const uint32_t version = r.u32();
    if (version != 1) throw std::runtime_error("unsupported container version " + std::to_string(version));
    TensorContainer c;
    const uint64_t meta_len = r.u64();
    try {
        c.meta = nlohmann::json::parse(r.bytes(meta_len));
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("bad metadata in " + path.string() + ": " + e.what());
    }
    const uint32_t count = r.u32();
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t name_len = r.u32();
        std::string name = r.bytes(name_len);
        const uint32_t rows = r.u32();
        const uint32_t cols = r.u32();
        Matrix m(static_cast<int>(rows), static_cast<int>(cols));
        for (auto& d : m.data) {
            uint64_t bits = r.u64();
            std::memcpy(&d, &bits, sizeof(d));
        }
        c.tensors.emplace_back(std::move(name), std::move(m));
    }
    return c;
}

// Line-delimited JSON helpers shared by the replay buffer, predictions and
// report files.
inline void save_jsonl(const std::vector<nlohmann::json>& records, const std::filesystem::path& path) {
    std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    for (const auto& r : records) out << r.dump() << '\n';
}

inline std::vector<nlohmann::json> load_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::vector<nlohmann::json> records;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            records.push_back(nlohmann::json::parse(line));
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error("parse error at " + path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return records;
}

}  // namespace foodcl
