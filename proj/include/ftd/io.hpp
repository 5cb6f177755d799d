#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ftd/errors.hpp"

namespace ftd {

// CRC-32 (IEEE, reflected, poly 0xEDB88320). crc32("123456789") == 0xCBF43926.
inline std::uint32_t crc32(const std::uint8_t* data, std::size_t len, std::uint32_t seed = 0) {
    static const std::array<std::uint32_t, 256> table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    std::uint32_t c = seed ^ 0xFFFFFFFFu;
    for (std::size_t i = 0; i < len; ++i) c = table[(c ^ data[i]) & 0xFFu] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

inline std::uint32_t crc32(const std::vector<std::uint8_t>& buf) {
    return crc32(buf.data(), buf.size());
}

// Accumulates a byte image with explicit little-endian encoding, so files are
// identical regardless of host endianness.
class ByteWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(v); }

    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }

    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }

    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

    void f64_span(std::span<const double> vs) {
        for (double v : vs) f64(v);
    }

    void magic(const char tag[4]) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(tag[i]));
    }

    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        for (char c : s) buf_.push_back(static_cast<std::uint8_t>(c));
    }

    const std::vector<std::uint8_t>& bytes() const { return buf_; }

    // Appends CRC-32 of everything written so far and flushes to disk.
    void finish_to_file(const std::filesystem::path& path) {
        const std::uint32_t crc = crc32(buf_);
        u32(crc);
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open for write: " + path.string());
        out.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
        if (!out) throw IoError("write failed: " + path.string());
    }

private:
    std::vector<std::uint8_t> buf_;
};

class ByteReader {
public:
    explicit ByteReader(std::vector<std::uint8_t> bytes) : buf_(std::move(bytes)) {}

    static ByteReader from_file(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot open for read: " + path.string());
        std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        return ByteReader(std::move(bytes));
    }

    // Validates the trailing CRC-32 over the payload and strips it.
    void check_crc(const std::string& what) {
        if (buf_.size() < 4) throw IoError(what + ": file too short for checksum");
        const std::size_t n = buf_.size() - 4;
        std::uint32_t stored = 0;
        for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(buf_[n + i]) << (8 * i);
        if (crc32(buf_.data(), n) != stored)
            throw IoError(what + ": checksum mismatch (file truncated or corrupted)");
        buf_.resize(n);
    }

    std::uint8_t u8() {
        need(1);
        return buf_[pos_++];
    }

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }

    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return v;
    }

    double f64() { return std::bit_cast<double>(u64()); }

    void f64_into(std::span<double> out) {
        for (double& v : out) v = f64();
    }

    void expect_magic(const char tag[4], const std::string& what) {
        need(4);
        for (int i = 0; i < 4; ++i)
            if (buf_[pos_ + i] != static_cast<std::uint8_t>(tag[i]))
                throw IoError(what + ": bad magic");
        pos_ += 4;
    }

    std::string str() {
        const std::uint32_t n = u32();
        need(n);
        std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
        pos_ += n;
        return s;
    }

    bool at_end() const { return pos_ == buf_.size(); }

private:
    void need(std::size_t n) {
        if (pos_ + n > buf_.size()) throw IoError("unexpected end of file");
    }

    std::vector<std::uint8_t> buf_;
    std::size_t pos_ = 0;
};

// Round-trippable decimal formatting for CSV/JSON output.
inline std::string fmt_f64(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

class CsvWriter {
public:
    explicit CsvWriter(const std::filesystem::path& path, const std::string& header) : out_(path, std::ios::trunc) {
        if (!out_) throw IoError("cannot open for write: " + path.string());
        out_ << header << "\n";
    }

    void row(const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) out_ << ",";
            out_ << cells[i];
        }
        out_ << "\n";
    }

private:
    std::ofstream out_;
};

} // namespace ftd
