// Discrete-log chameleon hash over a Schnorr group:
//
//   CH(m, r) = g^m * y^r mod p          (public-key hashing)
//   Col(x, m, r, m') = r + (m - m') / x mod q   (trapdoor collision)
//
// plus the certificate text codec and the counter-mode sign expansion that
// turns a group element into a {-1,+1}^C signature.
#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "chip/bigint.hpp"
#include "chip/serialize.hpp"
#include "chip/sha512.hpp"
#include "chip/tensor.hpp"

namespace chip {

enum class KeyProfile { toy, standard };

inline const char* to_string(KeyProfile p) { return p == KeyProfile::toy ? "toy" : "standard"; }

struct GroupParams {
    bigint p;  // prime modulus
    bigint q;  // prime order of the subgroup, q | p-1
    bigint g;  // generator of the order-q subgroup

    bool operator==(const GroupParams&) const = default;
};

struct ChameleonKeySet {
    KeyProfile profile = KeyProfile::toy;
    GroupParams params;
    bigint y;      // public key, g^x mod p
    bigint x = 0;  // secret trapdoor; 0 in public-only key sets

    bool has_secret() const { return x != 0; }

    bool operator==(const ChameleonKeySet&) const = default;
};

enum class CertKind { licensor, licensee };

struct Certificate {
    bigint value;
    CertKind kind = CertKind::licensor;
};

struct MessageDigest {
    bigint value;             // raw reduced mod q
    Sha512Digest raw{};       // 64-byte digest the value came from
};

struct Signature {
    std::vector<std::int8_t> bits;  // entries in {-1, +1}

    int size() const { return static_cast<int>(bits.size()); }
    bool operator==(const Signature&) const = default;
};

// --- key generation -------------------------------------------------------

inline void validate_keyset(const ChameleonKeySet& k) {
    const auto& [p, q, g] = k.params;
    if (p < 3 || q < 2) throw std::invalid_argument("degenerate group parameters");
    if ((p - 1) % q != 0) throw std::invalid_argument("q does not divide p-1");
    if (g <= 1 || g >= p) throw std::invalid_argument("generator out of range");
    if (powm(g, q, p) != 1) throw std::invalid_argument("generator order is not q");
    if (k.y <= 0 || k.y >= p) throw std::invalid_argument("public key out of range");
    if (k.has_secret()) {
        if (k.x < 1 || k.x > q - 1) throw std::invalid_argument("trapdoor out of range");
        if (powm(g, k.x, p) != k.y) throw std::invalid_argument("public key does not match trapdoor");
    }
}

// Deterministic key generation. security_bits <= 16 selects the fixed toy
// group (p=23, q=11, g=2) whose algebra is exhaustively testable; otherwise
// a Schnorr group with a security_bits-bit prime order q is derived from the
// seed stream.
inline ChameleonKeySet keygen(int security_bits, const std::array<std::uint8_t, 32>& seed) {
    DeterministicStream stream(seed);
    ChameleonKeySet keys;
    if (security_bits <= 16) {
        keys.profile = KeyProfile::toy;
        keys.params = GroupParams{23, 11, 2};
    } else {
        if (security_bits < 256)
            throw std::invalid_argument("standard profile requires q of at least 256 bits");
        keys.profile = KeyProfile::standard;
        keys.params.q = generate_prime(static_cast<std::size_t>(security_bits), stream);
        // p = k*q + 1 with k even, scanned upward from a random 64-bit start.
        bigint k = (bigint(stream.next_u64()) | 1) + 1;
        int tries = 0;
        for (;; k += 2) {
            if (++tries > 200000)
                throw std::runtime_error("prime generation failed: insufficient entropy or size");
            bigint p = k * keys.params.q + 1;
            if (is_probable_prime(p, stream)) {
                keys.params.p = p;
                break;
            }
        }
        bigint exponent = (keys.params.p - 1) / keys.params.q;
        for (;;) {
            bigint h = stream.uniform_below(keys.params.p - 3) + 2;
            keys.params.g = powm(h, exponent, keys.params.p);
            if (keys.params.g > 1) break;
        }
    }
    keys.x = stream.uniform_below(keys.params.q - 1) + 1;
    keys.y = powm(keys.params.g, keys.x, keys.params.p);
    validate_keyset(keys);
    return keys;
}

inline ChameleonKeySet public_part(const ChameleonKeySet& keys) {
    ChameleonKeySet pk = keys;
    pk.x = 0;
    return pk;
}

// --- hashing and collisions ------------------------------------------------

inline bigint ch_hash(const ChameleonKeySet& pk, const bigint& m, const bigint& r) {
    if (m < 0 || m >= pk.params.q) throw std::domain_error("message digest outside Z_q");
    if (r < 0 || r >= pk.params.q) throw std::domain_error("certificate outside Z_q");
    bigint gm = powm(pk.params.g, m, pk.params.p);
    bigint yr = powm(pk.y, r, pk.params.p);
    return gm * yr % pk.params.p;
}

inline bigint ch_hash(const ChameleonKeySet& pk, const MessageDigest& m, const Certificate& r) {
    return ch_hash(pk, m.value, r.value);
}

// r' = r + (m - m') * x^{-1} mod q, so that CH(m', r') == CH(m, r).
inline Certificate trapdoor_collide(const ChameleonKeySet& keys, const MessageDigest& m,
                                    const Certificate& r, const MessageDigest& m_new) {
    if (!keys.has_secret()) throw std::logic_error("trapdoor collision requires the secret key");
    const bigint& q = keys.params.q;
    if (m.value < 0 || m.value >= q || r.value < 0 || r.value >= q || m_new.value < 0 || m_new.value >= q)
        throw std::domain_error("collision inputs outside Z_q");
    bigint x_inv = mod_inverse(keys.x, q);
    bigint diff = ((m.value - m_new.value) % q + q) % q;
    bigint r_new = (r.value + diff * x_inv) % q;
    return Certificate{r_new, CertKind::licensee};
}

// --- digests ---------------------------------------------------------------

inline MessageDigest digest_bytes(const Bytes& bytes, const bigint& q) {
    MessageDigest d;
    d.raw = sha512(bytes);
    d.value = bigint_from_bytes(Bytes(d.raw.begin(), d.raw.end())) % q;
    return d;
}

// m = Hash(p_gamma): SHA-512 over the canonical gamma section, reduced mod q.
inline MessageDigest digest_passport(const std::vector<Tensor>& gammas, const bigint& q) {
    return digest_bytes(passport_gamma_bytes(gammas), q);
}

// --- signature derivation ----------------------------------------------------

// Expand the group element's big-endian bytes into C sign bits; bit 1 -> +1.
inline Signature derive_signature(const bigint& h, int total_bits) {
    if (total_bits < 1) throw std::invalid_argument("signature length must be >= 1");
    auto bits = sha512_expand_bits(bigint_to_bytes(h), static_cast<std::size_t>(total_bits));
    Signature sig;
    sig.bits.reserve(bits.size());
    for (std::uint8_t b : bits) sig.bits.push_back(b ? std::int8_t{1} : std::int8_t{-1});
    return sig;
}

// --- certificate text codec ---------------------------------------------------

inline std::size_t certificate_capacity_bytes(const bigint& q) {
    return (bit_length(q) - 1) / 8;
}

inline bool printable_ascii(std::uint8_t b) { return b >= 0x20 && b <= 0x7e; }

inline Certificate encode_text(const std::string& text, const bigint& q) {
    if (text.empty()) throw std::invalid_argument("certificate text must be non-empty");
    for (char c : text)
        if (!printable_ascii(static_cast<std::uint8_t>(c)))
            throw std::invalid_argument("certificate text must be printable ASCII");
    std::size_t capacity = certificate_capacity_bytes(q);
    if (text.size() > capacity)
        throw std::length_error("certificate text exceeds capacity: max " +
                                std::to_string(capacity) + " bytes for this group order");
    Bytes raw(text.begin(), text.end());
    Certificate cert{bigint_from_bytes(raw), CertKind::licensor};
    if (cert.value >= q) throw std::length_error("certificate text encodes past the group order");
    return cert;
}

// The V^L predicate: succeeds iff the value's big-endian bytes form a
// non-empty printable ASCII string. Failure marks a licensee/forged
// certificate, not a program error.
inline std::optional<std::string> decode_certificate(const Certificate& r) {
    if (r.value <= 0) return std::nullopt;
    Bytes raw = bigint_to_bytes(r.value);
    for (std::uint8_t b : raw)
        if (!printable_ascii(b)) return std::nullopt;
    return std::string(raw.begin(), raw.end());
}

// --- key files ----------------------------------------------------------------

// {profile, p, q, g, y, x?} with lowercase hex integers. x only in owner files.
inline nlohmann::json keyset_to_json(const ChameleonKeySet& keys, bool include_secret) {
    nlohmann::json j;
    j["profile"] = to_string(keys.profile);
    j["p"] = bigint_to_hex(keys.params.p);
    j["q"] = bigint_to_hex(keys.params.q);
    j["g"] = bigint_to_hex(keys.params.g);
    j["y"] = bigint_to_hex(keys.y);
    if (include_secret) {
        if (!keys.has_secret()) throw std::logic_error("key set has no secret to export");
        j["x"] = bigint_to_hex(keys.x);
    }
    return j;
}

inline ChameleonKeySet keyset_from_json(const nlohmann::json& j) {
    ChameleonKeySet keys;
    std::string profile = j.at("profile").get<std::string>();
    if (profile == "toy")
        keys.profile = KeyProfile::toy;
    else if (profile == "standard")
        keys.profile = KeyProfile::standard;
    else
        throw std::runtime_error("unknown key profile: " + profile);
    keys.params.p = bigint_from_hex(j.at("p").get<std::string>());
    keys.params.q = bigint_from_hex(j.at("q").get<std::string>());
    keys.params.g = bigint_from_hex(j.at("g").get<std::string>());
    keys.y = bigint_from_hex(j.at("y").get<std::string>());
    if (j.contains("x")) keys.x = bigint_from_hex(j.at("x").get<std::string>());
    validate_keyset(keys);
    return keys;
}

}  // namespace chip
