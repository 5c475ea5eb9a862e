#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "autoq/errors.hpp"

namespace autoq::binio {

/// Minimal little-endian-on-host binary framing for checkpoints.
class Writer {
public:
    void u8(std::uint8_t v) { bytes_.push_back(v); }
    void u16(std::uint16_t v) { raw(&v, sizeof v); }
    void u32(std::uint32_t v) { raw(&v, sizeof v); }
    void u64(std::uint64_t v) { raw(&v, sizeof v); }
    void i64(std::int64_t v) { raw(&v, sizeof v); }
    void f64(double v) { raw(&v, sizeof v); }

    void str(const std::string& s) {
        u64(s.size());
        bytes_.insert(bytes_.end(), s.begin(), s.end());
    }

    template <typename It>
    void f64_range(It begin, It end) {
        for (It it = begin; it != end; ++it) f64(*it);
    }

    const std::vector<std::uint8_t>& bytes() const { return bytes_; }
    std::vector<std::uint8_t> take() { return std::move(bytes_); }

private:
    void raw(const void* p, size_t n) {
        const auto* c = static_cast<const std::uint8_t*>(p);
        bytes_.insert(bytes_.end(), c, c + n);
    }

    std::vector<std::uint8_t> bytes_;
};

class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

    std::uint8_t u8() { return bytes_.at(advance(1)); }
    std::uint16_t u16() { return get<std::uint16_t>(); }
    std::uint32_t u32() { return get<std::uint32_t>(); }
    std::uint64_t u64() { return get<std::uint64_t>(); }
    std::int64_t i64() { return get<std::int64_t>(); }
    double f64() { return get<double>(); }

    std::string str() {
        const auto n = u64();
        const size_t at = advance(n);
        return std::string(bytes_.begin() + static_cast<long>(at),
                           bytes_.begin() + static_cast<long>(at + n));
    }

    bool exhausted() const { return pos_ == bytes_.size(); }

private:
    template <typename T>
    T get() {
        const size_t at = advance(sizeof(T));
        T v;
        std::memcpy(&v, bytes_.data() + at, sizeof(T));
        return v;
    }

    size_t advance(size_t n) {
        if (pos_ + n > bytes_.size()) throw ParseError("checkpoint: truncated stream");
        const size_t at = pos_;
        pos_ += n;
        return at;
    }

    const std::vector<std::uint8_t>& bytes_;
    size_t pos_ = 0;
};

} // namespace autoq::binio
