#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "mose/error.hpp"

namespace mose {

// Fixed-length bitset, packed little-endian: bit i lives in byte i/8, bit i%8.
// This layout is also the checkpoint wire format for masks.
class BitMask {
public:
    BitMask() = default;
    explicit BitMask(std::size_t nbits, bool value = false)
        : nbits_(nbits), bytes_((nbits + 7) / 8, value ? 0xff : 0x00) {
        trim();
    }

    std::size_t size() const { return nbits_; }
    bool empty() const { return nbits_ == 0; }

    bool get(std::size_t i) const {
        return (bytes_[i >> 3] >> (i & 7)) & 1u;
    }
    void set(std::size_t i, bool v) {
        if (v) bytes_[i >> 3] |= static_cast<std::uint8_t>(1u << (i & 7));
        else   bytes_[i >> 3] &= static_cast<std::uint8_t>(~(1u << (i & 7)));
    }

    std::size_t popcount() const {
        std::size_t n = 0;
        for (std::uint8_t b : bytes_) n += static_cast<std::size_t>(__builtin_popcount(b));
        return n;
    }

    void union_with(const BitMask& other) {
        if (other.nbits_ != nbits_)
            throw ContractError("BitMask::union_with: length mismatch");
        for (std::size_t i = 0; i < bytes_.size(); ++i) bytes_[i] |= other.bytes_[i];
    }

    bool operator==(const BitMask& o) const {
        return nbits_ == o.nbits_ && bytes_ == o.bytes_;
    }
    bool operator!=(const BitMask& o) const { return !(*this == o); }

    const std::vector<std::uint8_t>& bytes() const { return bytes_; }
    std::vector<std::uint8_t>& bytes() { return bytes_; }

private:
    void trim() {
        // keep unused high bits of the last byte zero so equality/serialization
        // are canonical
        if (nbits_ % 8 != 0 && !bytes_.empty())
            bytes_.back() &= static_cast<std::uint8_t>((1u << (nbits_ % 8)) - 1);
    }

    std::size_t nbits_ = 0;
    std::vector<std::uint8_t> bytes_;
};

} // namespace mose
