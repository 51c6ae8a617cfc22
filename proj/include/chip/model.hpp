// Desk-scale protected classifier:
//
//   conv(in->c1) -> norm -> leaky_relu -> avgpool(2)
//   -> conv(c1->c2) -> CHIP norm -> leaky_relu -> adaptive pool -> fc(c2->classes)
//
// Passport layers are either the last norm layer or both; every CHIP layer
// normalizes its conv response once and feeds both affine branches from that
// single node. Checkpoints are CHPM parameter containers with running stats
// and model metadata stored as pseudo-parameters.
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "chip/autodiff.hpp"
#include "chip/bytes.hpp"
#include "chip/dataset.hpp"
#include "chip/passport.hpp"
#include "chip/serialize.hpp"
#include "chip/sha512.hpp"
#include "chip/tensor.hpp"

namespace chip {

enum class PassportSelection { last, both };

struct ModelConfig {
    int in_channels = 1;
    int image_size = 16;
    int num_classes = 10;
    int c1 = 8;
    int c2 = 16;
    int kernel = 3;
    StatsMode stats_mode = StatsMode::batch;
    int groups = 4;
    PassportSelection passport_layers = PassportSelection::last;
};

struct Conv2dLayer {
    Parameter w;
    int stride = 1;
    int pad = 1;

    void init(const std::string& name, int c_in, int c_out, int k, Rng& rng) {
        double bound = std::sqrt(6.0 / (static_cast<double>(c_in) * k * k));
        Tensor t({c_out, c_in, k, k});
        rng.fill_uniform(t, -bound, bound);
        w = Parameter(name + ".w", t);
        pad = k / 2;
    }
};

struct PlainNormLayer {
    std::string name;
    Parameter gamma, beta;
    RunningStats rs;

    void init(const std::string& layer_name, int channels) {
        name = layer_name;
        gamma = Parameter(name + ".gamma", Tensor({channels}, 1.0f));
        beta = Parameter(name + ".beta", Tensor({channels}, 0.0f));
        rs.init(channels);
    }
};

// Passport tensors promoted to trainable parameters (forge / attacks).
struct TrainablePassport {
    std::vector<std::pair<Parameter, Parameter>> layers;

    static TrainablePassport from(const Passport& p) {
        TrainablePassport tp;
        for (std::size_t i = 0; i < p.layers.size(); ++i) {
            tp.layers.emplace_back(
                Parameter("passport." + std::to_string(i) + ".gamma", p.layers[i].gamma),
                Parameter("passport." + std::to_string(i) + ".beta", p.layers[i].beta));
        }
        return tp;
    }

    Passport snapshot() const {
        Passport p;
        for (const auto& [g, b] : layers) p.layers.push_back({g.value, b.value});
        return p;
    }

    std::vector<Parameter*> parameters() {
        std::vector<Parameter*> out;
        for (auto& [g, b] : layers) {
            out.push_back(&g);
            out.push_back(&b);
        }
        return out;
    }

    void clamp(float bound = kPassportClamp) {
        for (auto& [g, b] : layers) {
            clamp_inplace(g.value, -bound, bound);
            clamp_inplace(b.value, -bound, bound);
        }
    }
};

struct JointForward {
    Val logits_free, logits_aware;
    std::vector<AwareAffine> aware;                 // per passport layer
    std::vector<Val> wp_gammas;                     // per passport layer
    std::vector<ChipNormLayer*> chip_layers;        // parallel to `aware`
};

class ChipModel {
public:
    ModelConfig cfg;
    Conv2dLayer conv1, conv2;
    PlainNormLayer norm1_plain;  // used when norm1 is not a passport layer
    ChipNormLayer norm1_chip;
    ChipNormLayer norm2;
    Parameter fc_w, fc_b;
    bool has_free_branch = true;

    static ChipModel build(const ModelConfig& cfg, std::uint64_t init_seed) {
        ChipModel m;
        m.cfg = cfg;
        Rng rng(init_seed);
        m.conv1.init("conv1", cfg.in_channels, cfg.c1, cfg.kernel, rng);
        m.conv2.init("conv2", cfg.c1, cfg.c2, cfg.kernel, rng);
        if (cfg.passport_layers == PassportSelection::both)
            m.norm1_chip.init("norm1", cfg.in_channels, cfg.c1, rng);
        else
            m.norm1_plain.init("norm1", cfg.c1);
        m.norm2.init("norm2", cfg.c1, cfg.c2, rng);
        double bound = std::sqrt(6.0 / cfg.c2);
        Tensor w({cfg.num_classes, cfg.c2});
        rng.fill_uniform(w, -bound, bound);
        m.fc_w = Parameter("fc.w", w);
        m.fc_b = Parameter("fc.b", Tensor({cfg.num_classes}, 0.0f));
        return m;
    }

    bool norm1_is_chip() const { return cfg.passport_layers == PassportSelection::both; }

    std::vector<ChipNormLayer*> passport_layer_ptrs() {
        std::vector<ChipNormLayer*> out;
        if (norm1_is_chip()) out.push_back(&norm1_chip);
        out.push_back(&norm2);
        return out;
    }

    std::vector<std::string> passport_layer_names() const {
        std::vector<std::string> out;
        if (norm1_is_chip()) out.push_back("norm1");
        out.push_back("norm2");
        return out;
    }

    int signature_length() const {
        return (norm1_is_chip() ? cfg.c1 : 0) + cfg.c2;
    }

    // (C_in, H, W) of each passport layer's host conv input.
    std::vector<std::vector<int>> passport_shapes() const {
        std::vector<std::vector<int>> out;
        if (norm1_is_chip()) out.push_back({cfg.in_channels, cfg.image_size, cfg.image_size});
        out.push_back({cfg.c1, cfg.image_size / 2, cfg.image_size / 2});
        return out;
    }

    void check_passport(const Passport& p) const {
        auto shapes = passport_shapes();
        if (p.layers.size() != shapes.size())
            throw std::invalid_argument("passport has " + std::to_string(p.layers.size()) +
                                        " layers, model expects " + std::to_string(shapes.size()));
        for (std::size_t i = 0; i < shapes.size(); ++i)
            if (p.layers[i].gamma.shape != shapes[i])
                throw std::invalid_argument("passport layer " + std::to_string(i) + " shape " +
                                            p.layers[i].gamma.shape_str() + " does not match model");
    }

    // ---- forwards ----------------------------------------------------------

    Val forward_free(Tape& t, const Tensor& batch, bool training, bool update_running = false) {
        if (!has_free_branch) throw std::logic_error("model has no passport-free branch");
        Val x = t.input(batch);
        Val w1 = t.param(conv1.w), w2 = t.param(conv2.w);
        Val xw = t.conv2d(x, w1, conv1.stride, conv1.pad);
        Val y;
        if (norm1_is_chip()) {
            Val xhat = normalize_shared(t, norm1_chip, xw, cfg.stats_mode, cfg.groups, training,
                                        update_running);
            y = t.channel_affine(xhat, t.param(norm1_chip.gamma0), t.param(norm1_chip.beta0));
        } else {
            Val xhat = t.normalize(xw, cfg.stats_mode, cfg.groups, kNormEps, &norm1_plain.rs,
                                   training, update_running);
            y = t.channel_affine(xhat, t.param(norm1_plain.gamma), t.param(norm1_plain.beta));
        }
        y = t.avg_pool(t.leaky_relu(y, kLeakySlope), 2, 2);
        Val xw2 = t.conv2d(y, w2, conv2.stride, conv2.pad);
        Val xhat2 = normalize_shared(t, norm2, xw2, cfg.stats_mode, cfg.groups, training, update_running);
        Val y2 = t.channel_affine(xhat2, t.param(norm2.gamma0), t.param(norm2.beta0));
        y2 = t.leaky_relu(y2, kLeakySlope);
        return t.linear(t.adaptive_avg_pool(y2), t.param(fc_w), t.param(fc_b));
    }

    struct AwareForward {
        Val logits;
        std::vector<AwareAffine> aware;
        std::vector<Val> wp_gammas;
        std::vector<ChipNormLayer*> chip_layers;
    };

    AwareForward forward_aware(Tape& t, const Tensor& batch, const Passport* passport,
                               TrainablePassport* trainable, bool training,
                               bool update_running = false) {
        if (!passport && !trainable) throw std::invalid_argument("passport-aware forward requires a passport");
        if (passport) check_passport(*passport);
        AwareForward out;
        std::size_t pl = 0;
        auto passport_leaf = [&](std::size_t idx) -> std::pair<Val, Val> {
            if (trainable)
                return {t.param(trainable->layers[idx].first), t.param(trainable->layers[idx].second)};
            return {t.input(passport->layers[idx].gamma), t.input(passport->layers[idx].beta)};
        };

        Val x = t.input(batch);
        Val w1 = t.param(conv1.w), w2 = t.param(conv2.w);
        Val xw = t.conv2d(x, w1, conv1.stride, conv1.pad);
        Val y;
        if (norm1_is_chip()) {
            auto [pg, pb] = passport_leaf(pl++);
            Val xhat = normalize_shared(t, norm1_chip, xw, cfg.stats_mode, cfg.groups, training,
                                        update_running);
            AwareAffine aff =
                compute_aware_affine(t, norm1_chip, w1, conv1.stride, conv1.pad, pg, pb);
            y = t.channel_affine(xhat, aff.gamma1, aff.beta1);
            out.aware.push_back(aff);
            out.wp_gammas.push_back(aff.wp_gamma);
            out.chip_layers.push_back(&norm1_chip);
        } else {
            Val xhat = t.normalize(xw, cfg.stats_mode, cfg.groups, kNormEps, &norm1_plain.rs,
                                   training, update_running);
            y = t.channel_affine(xhat, t.param(norm1_plain.gamma), t.param(norm1_plain.beta));
        }
        y = t.avg_pool(t.leaky_relu(y, kLeakySlope), 2, 2);
        Val xw2 = t.conv2d(y, w2, conv2.stride, conv2.pad);
        auto [pg2, pb2] = passport_leaf(pl++);
        Val xhat2 = normalize_shared(t, norm2, xw2, cfg.stats_mode, cfg.groups, training, update_running);
        AwareAffine aff2 = compute_aware_affine(t, norm2, w2, conv2.stride, conv2.pad, pg2, pb2);
        Val y2 = t.channel_affine(xhat2, aff2.gamma1, aff2.beta1);
        out.aware.push_back(aff2);
        out.wp_gammas.push_back(aff2.wp_gamma);
        out.chip_layers.push_back(&norm2);
        y2 = t.leaky_relu(y2, kLeakySlope);
        out.logits = t.linear(t.adaptive_avg_pool(y2), t.param(fc_w), t.param(fc_b));
        return out;
    }

    // Joint training forward. The two branch streams share every node up to
    // the first passport layer; each CHIP layer on the shared trunk computes
    // one normalization consumed by both affines. Running statistics are
    // updated once per batch, on the free stream.
    JointForward forward_joint(Tape& t, const Tensor& batch, const Passport& passport, bool training) {
        if (!has_free_branch) throw std::logic_error("joint forward requires the free branch");
        check_passport(passport);
        JointForward out;
        std::size_t pl = 0;

        Val x = t.input(batch);
        Val w1 = t.param(conv1.w), w2 = t.param(conv2.w);
        Val fw = t.param(fc_w), fb = t.param(fc_b);

        bool diverged = false;
        Val yf, ya;
        Val xw = t.conv2d(x, w1, conv1.stride, conv1.pad);
        if (norm1_is_chip()) {
            Val pg = t.input(passport.layers[pl].gamma);
            Val pb = t.input(passport.layers[pl].beta);
            ++pl;
            Val xhat = normalize_shared(t, norm1_chip, xw, cfg.stats_mode, cfg.groups, training, training);
            AwareAffine aff = compute_aware_affine(t, norm1_chip, w1, conv1.stride, conv1.pad, pg, pb);
            yf = t.channel_affine(xhat, t.param(norm1_chip.gamma0), t.param(norm1_chip.beta0));
            ya = t.channel_affine(xhat, aff.gamma1, aff.beta1);
            out.aware.push_back(aff);
            out.wp_gammas.push_back(aff.wp_gamma);
            out.chip_layers.push_back(&norm1_chip);
            diverged = true;
        } else {
            Val xhat = t.normalize(xw, cfg.stats_mode, cfg.groups, kNormEps, &norm1_plain.rs,
                                   training, training);
            yf = t.channel_affine(xhat, t.param(norm1_plain.gamma), t.param(norm1_plain.beta));
            ya = yf;
        }
        yf = t.avg_pool(t.leaky_relu(yf, kLeakySlope), 2, 2);
        ya = diverged ? t.avg_pool(t.leaky_relu(ya, kLeakySlope), 2, 2) : yf;

        Val pg2 = t.input(passport.layers[pl].gamma);
        Val pb2 = t.input(passport.layers[pl].beta);
        AwareAffine aff2 = compute_aware_affine(t, norm2, w2, conv2.stride, conv2.pad, pg2, pb2);
        out.aware.push_back(aff2);
        out.wp_gammas.push_back(aff2.wp_gamma);
        out.chip_layers.push_back(&norm2);

        Val g0 = t.param(norm2.gamma0), b0 = t.param(norm2.beta0);
        if (!diverged) {
            Val xw2 = t.conv2d(yf, w2, conv2.stride, conv2.pad);
            Val xhat2 = normalize_shared(t, norm2, xw2, cfg.stats_mode, cfg.groups, training, training);
            yf = t.channel_affine(xhat2, g0, b0);
            ya = t.channel_affine(xhat2, aff2.gamma1, aff2.beta1);
        } else {
            Val xw2f = t.conv2d(yf, w2, conv2.stride, conv2.pad);
            Val xw2a = t.conv2d(ya, w2, conv2.stride, conv2.pad);
            Val xhat2f = normalize_shared(t, norm2, xw2f, cfg.stats_mode, cfg.groups, training, training);
            Val xhat2a = normalize_shared(t, norm2, xw2a, cfg.stats_mode, cfg.groups, training, false);
            yf = t.channel_affine(xhat2f, g0, b0);
            ya = t.channel_affine(xhat2a, aff2.gamma1, aff2.beta1);
        }
        yf = t.leaky_relu(yf, kLeakySlope);
        ya = t.leaky_relu(ya, kLeakySlope);
        out.logits_free = t.linear(t.adaptive_avg_pool(yf), fw, fb);
        out.logits_aware = t.linear(t.adaptive_avg_pool(ya), fw, fb);
        return out;
    }

    // ---- signature extraction ----------------------------------------------

    std::vector<std::int8_t> extract_signature(const Passport& passport) const {
        check_passport(passport);
        std::vector<std::int8_t> bits;
        std::size_t pl = 0;
        if (norm1_is_chip()) {
            auto b = extract_signature_bits(conv1.w.value, conv1.stride, conv1.pad,
                                            passport.layers[pl++].gamma);
            bits.insert(bits.end(), b.begin(), b.end());
        }
        auto b2 = extract_signature_bits(conv2.w.value, conv2.stride, conv2.pad,
                                         passport.layers[pl].gamma);
        bits.insert(bits.end(), b2.begin(), b2.end());
        return bits;
    }

    // ---- parameter access ----------------------------------------------------

    std::vector<Parameter*> trainable_parameters() {
        std::vector<Parameter*> out{&conv1.w, &conv2.w};
        if (norm1_is_chip()) {
            for (Parameter* p : norm1_chip.free_parameters()) out.push_back(p);
            for (Parameter* p : norm1_chip.tlp_parameters()) out.push_back(p);
        } else {
            out.push_back(&norm1_plain.gamma);
            out.push_back(&norm1_plain.beta);
        }
        for (Parameter* p : norm2.free_parameters()) out.push_back(p);
        for (Parameter* p : norm2.tlp_parameters()) out.push_back(p);
        out.push_back(&fc_w);
        out.push_back(&fc_b);
        return out;
    }

    std::vector<Parameter*> tlp_parameters() {
        std::vector<Parameter*> out;
        if (norm1_is_chip())
            for (Parameter* p : norm1_chip.tlp_parameters()) out.push_back(p);
        for (Parameter* p : norm2.tlp_parameters()) out.push_back(p);
        return out;
    }

    std::vector<Parameter*> conv_and_fc_parameters() {
        return {&conv1.w, &conv2.w, &fc_w, &fc_b};
    }

    void strip_free_branch() {
        has_free_branch = false;
        if (norm1_is_chip()) norm1_chip.has_free_branch = false;
        norm2.has_free_branch = false;
    }

    void reinit_head(std::uint64_t seed, int new_classes = 0) {
        if (new_classes > 0) cfg.num_classes = new_classes;
        Rng rng(seed);
        double bound = std::sqrt(6.0 / cfg.c2);
        Tensor w({cfg.num_classes, cfg.c2});
        rng.fill_uniform(w, -bound, bound);
        fc_w = Parameter("fc.w", w);
        fc_b = Parameter("fc.b", Tensor({cfg.num_classes}, 0.0f));
    }

    // ---- checkpoints -----------------------------------------------------------

    std::vector<std::pair<std::string, Tensor>> named_state() const {
        std::vector<std::pair<std::string, Tensor>> out;
        Tensor meta({8});
        meta.data = {static_cast<float>(cfg.in_channels), static_cast<float>(cfg.image_size),
                     static_cast<float>(cfg.num_classes), static_cast<float>(cfg.c1),
                     static_cast<float>(cfg.c2),          static_cast<float>(cfg.kernel),
                     cfg.stats_mode == StatsMode::batch ? 0.0f : 1.0f, static_cast<float>(cfg.groups)};
        out.emplace_back("meta.arch", meta);
        Tensor meta2({2});
        meta2.data = {cfg.passport_layers == PassportSelection::last ? 0.0f : 1.0f,
                      has_free_branch ? 1.0f : 0.0f};
        out.emplace_back("meta.flags", meta2);
        out.emplace_back("conv1.w", conv1.w.value);
        auto norm_state = [&out, this](const ChipNormLayer& l) {
            if (l.has_free_branch) {
                out.emplace_back(l.gamma0.name, l.gamma0.value);
                out.emplace_back(l.beta0.name, l.beta0.value);
            }
            for (const Parameter* p : {&l.tlp_gamma.w1, &l.tlp_gamma.b1, &l.tlp_gamma.w2, &l.tlp_gamma.b2,
                                       &l.tlp_beta.w1, &l.tlp_beta.b1, &l.tlp_beta.w2, &l.tlp_beta.b2})
                out.emplace_back(p->name, p->value);
            out.emplace_back(l.name + ".running_mean", l.rs.mean);
            out.emplace_back(l.name + ".running_var", l.rs.var);
        };
        if (norm1_is_chip()) {
            norm_state(norm1_chip);
        } else {
            out.emplace_back(norm1_plain.gamma.name, norm1_plain.gamma.value);
            out.emplace_back(norm1_plain.beta.name, norm1_plain.beta.value);
            out.emplace_back(norm1_plain.name + ".running_mean", norm1_plain.rs.mean);
            out.emplace_back(norm1_plain.name + ".running_var", norm1_plain.rs.var);
        }
        out.emplace_back("conv2.w", conv2.w.value);
        norm_state(norm2);
        out.emplace_back("fc.w", fc_w.value);
        out.emplace_back("fc.b", fc_b.value);
        return out;
    }

    Bytes checkpoint() const { return checkpoint_bytes(named_state()); }

    static ChipModel from_checkpoint(const Bytes& bytes) {
        auto params = parse_checkpoint(bytes);
        std::map<std::string, Tensor> by_name(params.begin(), params.end());
        auto take = [&by_name](const std::string& name) -> Tensor {
            auto it = by_name.find(name);
            if (it == by_name.end()) throw std::runtime_error("checkpoint missing parameter " + name);
            Tensor t = std::move(it->second);
            by_name.erase(it);
            return t;
        };
        auto take_into = [&take](Tensor& dst, const std::string& name) {
            Tensor t = take(name);
            if (t.shape != dst.shape)
                throw std::runtime_error("checkpoint parameter " + name + " has shape " +
                                         t.shape_str() + ", expected " + dst.shape_str());
            dst = std::move(t);
        };
        Tensor meta = take("meta.arch");
        Tensor flags = take("meta.flags");
        if (meta.numel() != 8 || flags.numel() != 2) throw std::runtime_error("bad checkpoint metadata");
        ModelConfig cfg;
        cfg.in_channels = static_cast<int>(meta.data[0]);
        cfg.image_size = static_cast<int>(meta.data[1]);
        cfg.num_classes = static_cast<int>(meta.data[2]);
        cfg.c1 = static_cast<int>(meta.data[3]);
        cfg.c2 = static_cast<int>(meta.data[4]);
        cfg.kernel = static_cast<int>(meta.data[5]);
        cfg.stats_mode = meta.data[6] == 0.0f ? StatsMode::batch : StatsMode::group;
        cfg.groups = static_cast<int>(meta.data[7]);
        cfg.passport_layers = flags.data[0] == 0.0f ? PassportSelection::last : PassportSelection::both;
        bool free_branch = flags.data[1] != 0.0f;

        ChipModel m = build(cfg, 0);
        if (!free_branch) m.strip_free_branch();
        take_into(m.conv1.w.value, "conv1.w");
        take_into(m.conv2.w.value, "conv2.w");
        auto load_norm = [&take_into](ChipNormLayer& l) {
            if (l.has_free_branch) {
                take_into(l.gamma0.value, l.gamma0.name);
                take_into(l.beta0.value, l.beta0.name);
            }
            for (Parameter* p : {&l.tlp_gamma.w1, &l.tlp_gamma.b1, &l.tlp_gamma.w2, &l.tlp_gamma.b2,
                                 &l.tlp_beta.w1, &l.tlp_beta.b1, &l.tlp_beta.w2, &l.tlp_beta.b2})
                take_into(p->value, p->name);
            take_into(l.rs.mean, l.name + ".running_mean");
            take_into(l.rs.var, l.name + ".running_var");
        };
        if (m.norm1_is_chip()) {
            load_norm(m.norm1_chip);
        } else {
            take_into(m.norm1_plain.gamma.value, "norm1.gamma");
            take_into(m.norm1_plain.beta.value, "norm1.beta");
            take_into(m.norm1_plain.rs.mean, "norm1.running_mean");
            take_into(m.norm1_plain.rs.var, "norm1.running_var");
        }
        load_norm(m.norm2);
        take_into(m.fc_w.value, "fc.w");
        take_into(m.fc_b.value, "fc.b");
        if (!by_name.empty())
            throw std::runtime_error("checkpoint has unknown parameter " + by_name.begin()->first);
        return m;
    }

    std::string checkpoint_hash() const {
        Sha512Digest d = sha512(checkpoint());
        return to_hex(Bytes(d.begin(), d.begin() + 16));
    }
};

// ---- evaluation helpers ------------------------------------------------------

inline std::vector<int> argmax_rows(const Tensor& logits) {
    const int N = logits.dim(0), K = logits.dim(1);
    std::vector<int> out(static_cast<std::size_t>(N));
    for (int n = 0; n < N; ++n) {
        const float* row = logits.data.data() + static_cast<std::size_t>(n) * K;
        int best = 0;
        for (int k = 1; k < K; ++k)
            if (row[k] > row[best]) best = k;
        out[static_cast<std::size_t>(n)] = best;
    }
    return out;
}

inline double evaluate_accuracy(ChipModel& model, const Dataset& data, Branch branch,
                                const Passport* passport = nullptr, int batch_size = 100) {
    int correct = 0;
    for (int start = 0; start < data.size(); start += batch_size) {
        std::vector<int> idx;
        for (int i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
        Tape t;
        Tensor batch = data.batch(idx);
        Val logits;
        if (branch == Branch::free)
            logits = model.forward_free(t, batch, /*training=*/false);
        else
            logits = model.forward_aware(t, batch, passport, nullptr, /*training=*/false).logits;
        std::vector<int> pred = argmax_rows(t.val(logits));
        std::vector<int> truth = data.batch_labels(idx);
        for (std::size_t i = 0; i < pred.size(); ++i)
            if (pred[i] == truth[i]) ++correct;
    }
    return static_cast<double>(correct) / data.size();
}

inline double signature_match_fraction(const std::vector<std::int8_t>& a,
                                       const std::vector<std::int8_t>& b) {
    if (a.size() != b.size() || a.empty())
        throw std::invalid_argument("signature length mismatch: " + std::to_string(a.size()) +
                                    " vs " + std::to_string(b.size()));
    int same = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] == b[i]) ++same;
    return static_cast<double>(same) / static_cast<double>(a.size());
}

}  // namespace chip
