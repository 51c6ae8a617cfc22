// Big-integer utilities on top of boost::multiprecision::cpp_int:
// hex conversion, byte packing, modular inverse, a deterministic SHA-512
// byte stream (for reproducible key generation) and Schnorr-group prime search.
#pragma once

#include <boost/multiprecision/cpp_int.hpp>
#include <boost/multiprecision/miller_rabin.hpp>

#include <array>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

#include "chip/bytes.hpp"
#include "chip/sha512.hpp"

namespace chip {

using bigint = boost::multiprecision::cpp_int;

using boost::multiprecision::powm;

inline std::string bigint_to_hex(const bigint& v) {
    if (v < 0) throw std::invalid_argument("negative value has no hex form");
    if (v == 0) return "0";
    std::string s = v.str(0, std::ios_base::hex);
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

inline bigint bigint_from_hex(const std::string& hex) {
    if (hex.empty()) throw std::invalid_argument("empty hex string");
    return bigint("0x" + hex);
}

// Minimal big-endian byte representation; 0 maps to an empty vector.
inline Bytes bigint_to_bytes(const bigint& v) {
    if (v < 0) throw std::invalid_argument("negative value has no byte form");
    Bytes out;
    bigint t = v;
    while (t > 0) {
        out.push_back(static_cast<std::uint8_t>(t & 0xff));
        t >>= 8;
    }
    std::reverse(out.begin(), out.end());
    return out;
}

inline bigint bigint_from_bytes(const Bytes& bytes) {
    bigint v = 0;
    for (std::uint8_t b : bytes) v = (v << 8) | b;
    return v;
}

inline std::size_t bit_length(const bigint& v) {
    return v == 0 ? 0 : boost::multiprecision::msb(v) + 1;
}

// Extended Euclid; m must be positive and gcd(a, m) == 1.
inline bigint mod_inverse(const bigint& a, const bigint& m) {
    bigint r0 = m, r1 = ((a % m) + m) % m;
    bigint t0 = 0, t1 = 1;
    while (r1 != 0) {
        bigint q = r0 / r1;
        bigint r2 = r0 - q * r1;
        bigint t2 = t0 - q * t1;
        r0 = r1; r1 = r2;
        t0 = t1; t1 = t2;
    }
    if (r0 != 1) throw std::domain_error("value not invertible in Z_m");
    return ((t0 % m) + m) % m;
}

// Deterministic byte stream: block_i = SHA-512(seed || be64(i)).
// Used wherever key material must be reproducible from a 32-byte seed.
class DeterministicStream {
public:
    explicit DeterministicStream(const std::array<std::uint8_t, 32>& seed) {
        block_.assign(seed.begin(), seed.end());
        block_.resize(40);
    }

    std::uint8_t next_byte() {
        if (offset_ == 64) refill();
        return buffer_[offset_++];
    }

    void fill(Bytes& out, std::size_t n) {
        out.resize(n);
        for (std::size_t i = 0; i < n; ++i) out[i] = next_byte();
    }

    std::uint64_t next_u64() {
        std::uint64_t v = 0;
        for (int k = 0; k < 8; ++k) v = v << 8 | next_byte();
        return v;
    }

    // Uniform in [0, n) by rejection sampling over bit_length(n) bits.
    bigint uniform_below(const bigint& n) {
        if (n <= 0) throw std::invalid_argument("uniform_below requires n > 0");
        std::size_t bits = bit_length(n);
        std::size_t nbytes = (bits + 7) / 8;
        int top_shift = static_cast<int>(nbytes * 8 - bits);
        for (;;) {
            Bytes raw;
            fill(raw, nbytes);
            raw[0] = static_cast<std::uint8_t>(raw[0] >> top_shift << top_shift) >> top_shift;
            bigint v = bigint_from_bytes(raw);
            if (v < n) return v;
        }
    }

private:
    void refill() {
        for (int k = 0; k < 8; ++k)
            block_[32 + k] = static_cast<std::uint8_t>(counter_ >> (8 * (7 - k)));
        buffer_ = sha512(block_.data(), block_.size());
        ++counter_;
        offset_ = 0;
    }

    Bytes block_;
    Sha512Digest buffer_{};
    std::uint64_t counter_ = 0;
    std::size_t offset_ = 64;
};

inline bool is_probable_prime(const bigint& n, DeterministicStream& stream) {
    if (n < 2) return false;
    std::mt19937_64 witness_rng(stream.next_u64());
    return boost::multiprecision::miller_rabin_test(n, 40, witness_rng);
}

// Random prime with exactly `bits` bits (top and bottom bits forced).
inline bigint generate_prime(std::size_t bits, DeterministicStream& stream, int max_tries = 200000) {
    if (bits < 2) throw std::invalid_argument("prime size too small");
    for (int t = 0; t < max_tries; ++t) {
        bigint candidate = stream.uniform_below(bigint(1) << (bits - 1)) + (bigint(1) << (bits - 1));
        candidate |= 1;
        if (bit_length(candidate) != bits) continue;
        if (is_probable_prime(candidate, stream)) return candidate;
    }
    throw std::runtime_error("prime generation failed: insufficient entropy or size");
}

}  // namespace chip
