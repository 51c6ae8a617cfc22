// The CHIP dual-branch normalization layer: a passport-free affine pair
// (gamma0, beta0) and a passport-aware pair derived from the passport through
// a skip connection plus a two-layer perceptron,
//
//   gamma1 = Ada(p_gamma) + TLP(Avg(W (x) p_gamma)),
//   beta1  = Ada(p_beta)  + TLP(Avg(W (x) p_beta)),
//
// with both branches reading one shared set of normalization statistics.
// Ada(.) pools each channel of the passport to its spatial mean and, when the
// host conv changes the channel count, resamples the means with adaptive
// average pooling so the skip path always matches the affine width.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "chip/autodiff.hpp"
#include "chip/serialize.hpp"
#include "chip/tensor.hpp"

namespace chip {

constexpr float kPassportClamp = 3.0f;  // feasible passport space delta(p)
constexpr float kSignLossTau = 0.1f;
constexpr float kNormEps = 1e-5f;
constexpr float kLeakySlope = 0.01f;

struct PassportLayerMaps {
    Tensor gamma;  // p_gamma, shape (C_in, H, W) of the host conv input
    Tensor beta;   // p_beta, same shape
};

struct Passport {
    std::vector<PassportLayerMaps> layers;

    std::vector<Tensor> gamma_maps() const {
        std::vector<Tensor> out;
        out.reserve(layers.size());
        for (const auto& l : layers) out.push_back(l.gamma);
        return out;
    }
    std::vector<Tensor> beta_maps() const {
        std::vector<Tensor> out;
        out.reserve(layers.size());
        for (const auto& l : layers) out.push_back(l.beta);
        return out;
    }

    Bytes container_bytes() const { return passport_container_bytes(gamma_maps(), beta_maps()); }

    static Passport from_container(const Bytes& bytes) {
        PassportBlobs blobs = parse_passport_container(bytes);
        Passport p;
        for (std::size_t i = 0; i < blobs.gammas.size(); ++i)
            p.layers.push_back({std::move(blobs.gammas[i]), std::move(blobs.betas[i])});
        return p;
    }

    // Flattened (p_gamma || p_beta) over all layers; the space Dis(.) measures.
    Tensor flattened() const {
        std::vector<float> buf;
        for (const auto& l : layers) buf.insert(buf.end(), l.gamma.data.begin(), l.gamma.data.end());
        for (const auto& l : layers) buf.insert(buf.end(), l.beta.data.begin(), l.beta.data.end());
        Tensor t({static_cast<int>(buf.size())});
        t.data = std::move(buf);
        return t;
    }
};

struct PassportSidecar {
    std::string model_id;
    std::vector<std::string> layer_names;
    std::string created_at;
    std::string kind;  // "owner" | "user"
    std::optional<std::string> user_id;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["model_id"] = model_id;
        j["layer_names"] = layer_names;
        j["created_at"] = created_at;
        j["kind"] = kind;
        if (user_id) j["user_id"] = *user_id;
        return j;
    }

    static PassportSidecar from_json(const nlohmann::json& j) {
        PassportSidecar s;
        s.model_id = j.at("model_id").get<std::string>();
        s.layer_names = j.at("layer_names").get<std::vector<std::string>>();
        s.created_at = j.at("created_at").get<std::string>();
        s.kind = j.at("kind").get<std::string>();
        if (j.contains("user_id")) s.user_id = j.at("user_id").get<std::string>();
        return s;
    }
};

// Two-layer perceptron C -> C -> C, Kaiming-uniform weights, zero biases.
struct Tlp {
    Parameter w1, b1, w2, b2;

    void init(const std::string& prefix, int channels, Rng& rng) {
        double bound = std::sqrt(6.0 / channels);
        Tensor w({channels, channels});
        rng.fill_uniform(w, -bound, bound);
        w1 = Parameter(prefix + ".w1", w);
        b1 = Parameter(prefix + ".b1", Tensor({channels}, 0.0f));
        rng.fill_uniform(w, -bound, bound);
        w2 = Parameter(prefix + ".w2", w);
        b2 = Parameter(prefix + ".b2", Tensor({channels}, 0.0f));
    }

    // x is rank-1 (C).
    Val apply(Tape& t, Val x) {
        int c = t.val(x).dim(0);
        Val h = t.linear(t.reshape(x, {1, c}), t.param(w1), t.param(b1));
        h = t.leaky_relu(h, kLeakySlope);
        h = t.linear(h, t.param(w2), t.param(b2));
        return t.reshape(h, {c});
    }

    std::vector<Parameter*> parameters() { return {&w1, &b1, &w2, &b2}; }
};

// Dual-branch norm layer state. gamma1/beta1 are never stored; they are
// recomputed from whatever passport is supplied.
struct ChipNormLayer {
    std::string name;
    int in_channels = 0;
    int out_channels = 0;
    bool has_free_branch = true;
    Parameter gamma0, beta0;
    Tlp tlp_gamma, tlp_beta;
    RunningStats rs;

    void init(const std::string& layer_name, int c_in, int c_out, Rng& rng, bool with_free = true) {
        name = layer_name;
        in_channels = c_in;
        out_channels = c_out;
        has_free_branch = with_free;
        gamma0 = Parameter(name + ".gamma0", Tensor({c_out}, 1.0f));
        beta0 = Parameter(name + ".beta0", Tensor({c_out}, 0.0f));
        tlp_gamma.init(name + ".tlp_gamma", c_out, rng);
        tlp_beta.init(name + ".tlp_beta", c_out, rng);
        rs.init(c_out);
    }

    std::vector<Parameter*> free_parameters() {
        return has_free_branch ? std::vector<Parameter*>{&gamma0, &beta0} : std::vector<Parameter*>{};
    }
    std::vector<Parameter*> tlp_parameters() {
        std::vector<Parameter*> out = tlp_gamma.parameters();
        for (Parameter* p : tlp_beta.parameters()) out.push_back(p);
        return out;
    }
};

struct AwareAffine {
    Val gamma1, beta1;
    Val wp_gamma, wp_beta;  // pre-TLP pooled responses, rank-1 (C_out)
};

namespace detail {

// Avg(W (x) p): conv with the host kernel, then pool to per-channel scalars.
inline Val pooled_conv_response(Tape& t, Val passport_map, Val conv_w, int stride, int pad) {
    const Tensor& p = t.val(passport_map);
    if (p.rank() != 3)
        throw std::invalid_argument("passport map must be rank-3 (C,H,W), got " + p.shape_str());
    Val p4 = t.reshape(passport_map, {1, p.dim(0), p.dim(1), p.dim(2)});
    Val conv = t.conv2d(p4, conv_w, stride, pad);
    Val pooled = t.adaptive_avg_pool(conv);  // (1, C_out)
    return t.reshape(pooled, {t.val(pooled).dim(1)});
}

// Ada(p): per-channel spatial means, resampled to the affine width.
inline Val skip_connection(Tape& t, Val passport_map, int out_channels) {
    const Tensor& p = t.val(passport_map);
    Val p4 = t.reshape(passport_map, {1, p.dim(0), p.dim(1), p.dim(2)});
    Val means = t.reshape(t.adaptive_avg_pool(p4), {p.dim(0)});
    if (p.dim(0) == out_channels) return means;
    return t.adaptive_avg_pool1d(means, out_channels);
}

}  // namespace detail

// Eq-style aware affine factors for one layer. passport_gamma/passport_beta
// are rank-3 leaves already on the tape (inputs or trainable params).
inline AwareAffine compute_aware_affine(Tape& t, ChipNormLayer& layer, Val conv_w, int stride,
                                        int pad, Val passport_gamma, Val passport_beta) {
    const Tensor& pg = t.val(passport_gamma);
    const Tensor& w = t.val(conv_w);
    if (pg.dim(0) != w.dim(1))
        throw std::invalid_argument("passport channels " + pg.shape_str() +
                                    " do not match host conv kernel " + w.shape_str());
    AwareAffine out;
    out.wp_gamma = detail::pooled_conv_response(t, passport_gamma, conv_w, stride, pad);
    out.wp_beta = detail::pooled_conv_response(t, passport_beta, conv_w, stride, pad);
    Val skip_g = detail::skip_connection(t, passport_gamma, layer.out_channels);
    Val skip_b = detail::skip_connection(t, passport_beta, layer.out_channels);
    out.gamma1 = t.add(skip_g, layer.tlp_gamma.apply(t, out.wp_gamma));
    out.beta1 = t.add(skip_b, layer.tlp_beta.apply(t, out.wp_beta));
    return out;
}

enum class Branch { free, aware };

// Normalizes x_w once and applies the requested branch's affine pair; the
// dual form returns both branch outputs from the same normalization node.
struct ChipLayerOutput {
    Val y;
    std::optional<AwareAffine> aware;
};

inline Val normalize_shared(Tape& t, ChipNormLayer& layer, Val xw, StatsMode mode, int groups,
                            bool training, bool update_running) {
    return t.normalize(xw, mode, groups, kNormEps, &layer.rs, training, update_running);
}

inline ChipLayerOutput chip_layer_forward(Tape& t, ChipNormLayer& layer, Val xw, Branch branch,
                                          StatsMode mode, int groups, bool training,
                                          bool update_running, Val conv_w, int stride, int pad,
                                          const PassportLayerMaps* passport,
                                          bool passport_trainable = false,
                                          Parameter* passport_gamma_param = nullptr,
                                          Parameter* passport_beta_param = nullptr) {
    Val xhat = normalize_shared(t, layer, xw, mode, groups, training, update_running);
    if (branch == Branch::free) {
        if (!layer.has_free_branch)
            throw std::invalid_argument("layer " + layer.name + " has no passport-free branch");
        return {t.channel_affine(xhat, t.param(layer.gamma0), t.param(layer.beta0)), std::nullopt};
    }
    if (!passport && !passport_gamma_param)
        throw std::invalid_argument("passport-aware forward requires a passport");
    Val pg, pb;
    if (passport_trainable) {
        pg = t.param(*passport_gamma_param);
        pb = t.param(*passport_beta_param);
    } else {
        pg = t.input(passport->gamma);
        pb = t.input(passport->beta);
    }
    AwareAffine aff = compute_aware_affine(t, layer, conv_w, stride, pad, pg, pb);
    return {t.channel_affine(xhat, aff.gamma1, aff.beta1), aff};
}

// Extracted signature bits: sign(Avg(W (x) p_gamma)), with sign(0) = +1.
inline std::vector<std::int8_t> extract_signature_bits(const Tensor& conv_w, int stride, int pad,
                                                       const Tensor& passport_gamma) {
    Tape t;
    Val w = t.input(conv_w);
    Val p = t.input(passport_gamma);
    Val wp = detail::pooled_conv_response(t, p, w, stride, pad);
    const Tensor& v = t.val(wp);
    std::vector<std::int8_t> bits;
    bits.reserve(v.data.size());
    for (float x : v.data) bits.push_back(x < 0.0f ? std::int8_t{-1} : std::int8_t{1});
    return bits;
}

// L_s over a set of layers: sum of hinge terms against the matching slice of
// the signature. wp values are the pre-TLP responses.
inline Val sign_loss(Tape& t, const std::vector<Val>& wp_gammas,
                     const std::vector<std::int8_t>& signature_bits, float tau = kSignLossTau) {
    std::size_t total = 0;
    for (Val wp : wp_gammas) total += static_cast<std::size_t>(t.val(wp).numel());
    if (total != signature_bits.size())
        throw std::invalid_argument("sign_loss: signature has " +
                                    std::to_string(signature_bits.size()) + " bits but layers carry " +
                                    std::to_string(total) + " channels");
    Val acc;
    std::size_t off = 0;
    for (Val wp : wp_gammas) {
        std::size_t n = static_cast<std::size_t>(t.val(wp).numel());
        std::vector<std::int8_t> slice(signature_bits.begin() + static_cast<std::ptrdiff_t>(off),
                                       signature_bits.begin() + static_cast<std::ptrdiff_t>(off + n));
        Val term = t.hinge_sum(wp, slice, tau);
        acc = acc.valid() ? t.add(acc, term) : term;
        off += n;
    }
    return acc;
}

// L_bal: sum over layers of l1(gamma0, gamma1) + l1(beta0, beta1).
inline Val balance_loss(Tape& t, std::vector<std::pair<ChipNormLayer*, const AwareAffine*>> layers) {
    Val acc;
    for (auto& [layer, aff] : layers) {
        Val g0 = t.param(layer->gamma0);
        Val b0 = t.param(layer->beta0);
        Val term = t.add(t.l1_loss(g0, aff->gamma1), t.l1_loss(b0, aff->beta1));
        acc = acc.valid() ? t.add(acc, term) : term;
    }
    if (!acc.valid()) throw std::invalid_argument("balance_loss over zero layers");
    return acc;
}

}  // namespace chip
