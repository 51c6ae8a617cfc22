// Thin wrapper over OpenSSL's SHA-512 plus the counter-mode bit expansion
// used to stretch a group element into an arbitrary-length sign sequence.
#pragma once

#include <openssl/evp.h>

#include <array>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "chip/bytes.hpp"

namespace chip {

using Sha512Digest = std::array<std::uint8_t, 64>;

inline Sha512Digest sha512(const void* data, std::size_t len) {
    Sha512Digest out{};
    unsigned int n = 0;
    if (EVP_Digest(data, len, out.data(), &n, EVP_sha512(), nullptr) != 1 || n != 64)
        throw std::runtime_error("SHA-512 computation failed");
    return out;
}

inline Sha512Digest sha512(const Bytes& data) { return sha512(data.data(), data.size()); }

// Expands `seed_bytes` into `nbits` bits via SHA-512(seed || counter),
// counter a big-endian u32 starting at 0. Bits are read MSB-first.
inline std::vector<std::uint8_t> sha512_expand_bits(const Bytes& seed_bytes, std::size_t nbits) {
    std::vector<std::uint8_t> bits;
    bits.reserve(nbits);
    Bytes block = seed_bytes;
    block.resize(seed_bytes.size() + 4);
    std::uint32_t counter = 0;
    while (bits.size() < nbits) {
        for (int k = 0; k < 4; ++k)
            block[seed_bytes.size() + k] = static_cast<std::uint8_t>(counter >> (8 * (3 - k)));
        Sha512Digest d = sha512(block.data(), block.size());
        for (std::uint8_t byte : d) {
            for (int bit = 7; bit >= 0 && bits.size() < nbits; --bit)
                bits.push_back((byte >> bit) & 1);
            if (bits.size() == nbits) break;
        }
        ++counter;
    }
    return bits;
}

}  // namespace chip
