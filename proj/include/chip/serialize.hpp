// Binary container formats.
//
// Passport container ("CHIP"): header, then one block per passport layer for
// the gamma maps, then one block per layer for the beta maps. The digest that
// feeds the chameleon hash covers the header and the gamma blocks only.
//
// Checkpoint container ("CHPM"): a flat list of named f32 parameters.
// All integers little-endian, all tensor data f32 row-major.
#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "chip/bytes.hpp"
#include "chip/tensor.hpp"

namespace chip {

constexpr std::uint16_t kPassportVersion = 1;
constexpr std::uint16_t kCheckpointVersion = 1;

namespace detail {

inline void write_tensor_block(ByteWriter& w, const Tensor& t) {
    if (t.rank() > 255) throw std::invalid_argument("tensor rank too large for container");
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (int d : t.shape) w.u32(static_cast<std::uint32_t>(d));
    for (float v : t.data) w.f32(v);
}

inline Tensor read_tensor_block(ByteReader& r) {
    int rank = r.u8();
    std::vector<int> shape(static_cast<std::size_t>(rank));
    std::int64_t n = 1;
    for (int i = 0; i < rank; ++i) {
        shape[static_cast<std::size_t>(i)] = static_cast<int>(r.u32());
        if (shape[static_cast<std::size_t>(i)] <= 0) throw std::runtime_error("invalid tensor dim in container");
        n *= shape[static_cast<std::size_t>(i)];
    }
    Tensor t(shape);
    for (std::int64_t i = 0; i < n; ++i) t.data[static_cast<std::size_t>(i)] = r.f32();
    return t;
}

}  // namespace detail

// Canonical digest input: magic, version, layer count, gamma blocks in layer order.
inline Bytes passport_gamma_bytes(const std::vector<Tensor>& gammas) {
    if (gammas.empty()) throw std::invalid_argument("passport must contain at least one layer");
    ByteWriter w;
    w.str("CHIP");
    w.u16(kPassportVersion);
    w.u32(static_cast<std::uint32_t>(gammas.size()));
    for (const Tensor& g : gammas) detail::write_tensor_block(w, g);
    return std::move(w.buf);
}

// Full passport container: gamma section followed by one beta block per layer.
inline Bytes passport_container_bytes(const std::vector<Tensor>& gammas, const std::vector<Tensor>& betas) {
    if (gammas.size() != betas.size())
        throw std::invalid_argument("passport gamma/beta layer counts differ");
    ByteWriter w;
    w.buf = passport_gamma_bytes(gammas);
    for (const Tensor& b : betas) detail::write_tensor_block(w, b);
    return std::move(w.buf);
}

struct PassportBlobs {
    std::vector<Tensor> gammas;
    std::vector<Tensor> betas;
};

inline PassportBlobs parse_passport_container(const Bytes& bytes) {
    ByteReader r(bytes);
    if (r.str(4) != "CHIP") throw std::runtime_error("not a passport container (bad magic)");
    std::uint16_t version = r.u16();
    if (version != kPassportVersion)
        throw std::runtime_error("unsupported passport container version " + std::to_string(version));
    std::uint32_t layers = r.u32();
    if (layers == 0) throw std::runtime_error("passport container has no layers");
    PassportBlobs out;
    for (std::uint32_t i = 0; i < layers; ++i) out.gammas.push_back(detail::read_tensor_block(r));
    for (std::uint32_t i = 0; i < layers; ++i) out.betas.push_back(detail::read_tensor_block(r));
    if (!r.eof()) throw std::runtime_error("trailing bytes after passport container");
    for (std::uint32_t i = 0; i < layers; ++i)
        check_same_shape(out.gammas[i], out.betas[i], "passport layer");
    return out;
}

// Checkpoint: named parameters, order-preserving.
inline Bytes checkpoint_bytes(const std::vector<std::pair<std::string, Tensor>>& params) {
    ByteWriter w;
    w.str("CHPM");
    w.u16(kCheckpointVersion);
    w.u32(static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, tensor] : params) {
        if (name.size() > 0xffff) throw std::invalid_argument("parameter name too long");
        w.u16(static_cast<std::uint16_t>(name.size()));
        w.str(name);
        detail::write_tensor_block(w, tensor);
    }
    return std::move(w.buf);
}

inline std::vector<std::pair<std::string, Tensor>> parse_checkpoint(const Bytes& bytes) {
    ByteReader r(bytes);
    if (r.str(4) != "CHPM") throw std::runtime_error("not a checkpoint (bad magic)");
    std::uint16_t version = r.u16();
    if (version != kCheckpointVersion)
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
    std::uint32_t count = r.u32();
    std::vector<std::pair<std::string, Tensor>> out;
    out.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        std::uint16_t len = r.u16();
        std::string name = r.str(len);
        out.emplace_back(std::move(name), detail::read_tensor_block(r));
    }
    if (!r.eof()) throw std::runtime_error("trailing bytes after checkpoint");
    return out;
}

inline void write_file(const std::string& path, const Bytes& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + path + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("write failed: " + path);
}

inline Bytes read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    return Bytes(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

}  // namespace chip
