// Master-model watermarking: joint optimization of both branch losses with
// the sign-matching and balance constraints,
//
//   L_total = L_f + L_a + L_s + L_bal,
//
// against an immutable signature derived from the owner passport digest and
// the licensor certificate through the chameleon hash.
#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "chip/chameleon.hpp"
#include "chip/dataset.hpp"
#include "chip/model.hpp"
#include "chip/passport.hpp"

namespace chip {

struct TrainConfig {
    int epochs = 30;
    float lr = 0.01f;
    std::vector<int> decay_epochs;  // strictly increasing, 1-based epoch numbers
    float decay_factor = 0.1f;
    float momentum = 0.9f;
    float weight_decay = 5e-4f;
    int batch_size = 64;
    std::uint64_t seed = 1;
    // loss weights; unit weights reproduce the plain four-term sum
    float w_free = 1.0f;
    float w_aware = 1.0f;
    float w_sign = 1.0f;
    float w_balance = 1.0f;
    bool alternate_updates = false;  // two-pass variant: free-branch step, then aware-branch step

    void validate() const {
        if (epochs < 1) throw std::invalid_argument("epochs must be positive");
        if (batch_size < 1) throw std::invalid_argument("batch size must be positive");
        for (std::size_t i = 1; i < decay_epochs.size(); ++i)
            if (decay_epochs[i] <= decay_epochs[i - 1])
                throw std::invalid_argument("decay epochs must be strictly increasing");
    }
};

// Owner passport: i.i.d. standard normal clamped to the feasible space.
inline Passport init_owner_passport(const ChipModel& model, std::uint64_t seed) {
    Rng rng(seed);
    Passport p;
    for (const auto& shape : model.passport_shapes()) {
        PassportLayerMaps maps;
        maps.gamma = Tensor(shape);
        maps.beta = Tensor(shape);
        rng.fill_normal(maps.gamma);
        rng.fill_normal(maps.beta);
        clamp_inplace(maps.gamma, -kPassportClamp, kPassportClamp);
        clamp_inplace(maps.beta, -kPassportClamp, kPassportClamp);
        p.layers.push_back(std::move(maps));
    }
    return p;
}

struct MasterCredentials {
    Signature xi;
    Certificate r_o;
    MessageDigest m_o;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["r_o_hex"] = bigint_to_hex(r_o.value);
        j["m_o_hex"] = bigint_to_hex(m_o.value);
        std::string bits;
        for (std::int8_t b : xi.bits) bits.push_back(b > 0 ? '1' : '0');
        j["xi_bits"] = bits;
        return j;
    }

    static MasterCredentials from_json(const nlohmann::json& j) {
        MasterCredentials c;
        c.r_o = Certificate{bigint_from_hex(j.at("r_o_hex").get<std::string>()), CertKind::licensor};
        c.m_o.value = bigint_from_hex(j.at("m_o_hex").get<std::string>());
        std::string bits = j.at("xi_bits").get<std::string>();
        for (char ch : bits) c.xi.bits.push_back(ch == '1' ? std::int8_t{1} : std::int8_t{-1});
        return c;
    }
};

// xi = SGN(CH(PK, Hash(p_gamma), r_o)) with r_o the encoded copyright text.
inline MasterCredentials make_signature(const ChameleonKeySet& keys, const Passport& owner_passport,
                                        const std::string& licensor_text, int signature_length) {
    MasterCredentials c;
    c.m_o = digest_passport(owner_passport.gamma_maps(), keys.params.q);
    c.r_o = encode_text(licensor_text, keys.params.q);
    c.xi = derive_signature(ch_hash(keys, c.m_o, c.r_o), signature_length);
    return c;
}

struct EpochStats {
    int epoch = 0;
    double loss_total = 0, loss_free = 0, loss_aware = 0, loss_sign = 0, loss_balance = 0;
};

struct TrainResult {
    Passport owner_passport;
    MasterCredentials credentials;
    std::vector<EpochStats> history;
    double free_accuracy = 0, aware_accuracy = 0, sda = 0;
};

// Trains in place; the signature is computed once up front and never touched
// again (the per-epoch assert guards accidental mutation).
inline TrainResult train_master(ChipModel& model, const Dataset& train, const Dataset& test,
                                const ChameleonKeySet& keys, const std::string& licensor_text,
                                const TrainConfig& cfg) {
    cfg.validate();
    if (train.num_classes != model.cfg.num_classes)
        throw std::invalid_argument("dataset classes " + std::to_string(train.num_classes) +
                                    " do not match model head " + std::to_string(model.cfg.num_classes));

    TrainResult result;
    result.owner_passport = init_owner_passport(model, cfg.seed);
    result.credentials = make_signature(keys, result.owner_passport, licensor_text,
                                        model.signature_length());
    const Signature frozen_xi = result.credentials.xi;

    Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
    Sgd optimizer;
    std::vector<Parameter*> params = model.trainable_parameters();
    float lr = cfg.lr;

    std::vector<int> order(static_cast<std::size_t>(train.size()));
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        for (int de : cfg.decay_epochs)
            if (de == epoch) lr *= cfg.decay_factor;
        rng.shuffle(order);
        EpochStats stats;
        stats.epoch = epoch;
        int batches = 0;
        for (int start = 0; start < train.size(); start += cfg.batch_size) {
            std::vector<int> idx(order.begin() + start,
                                 order.begin() + std::min<std::size_t>(order.size(),
                                                                       static_cast<std::size_t>(start) +
                                                                           cfg.batch_size));
            Tensor batch = train.batch(idx);
            std::vector<int> labels = train.batch_labels(idx);
            SgdConfig scfg{lr, cfg.momentum, cfg.weight_decay};

            if (!cfg.alternate_updates) {
                Tape t;
                JointForward f = model.forward_joint(t, batch, result.owner_passport, true);
                Val lf = t.softmax_cross_entropy(f.logits_free, labels);
                Val la = t.softmax_cross_entropy(f.logits_aware, labels);
                Val ls = sign_loss(t, f.wp_gammas, frozen_xi.bits);
                std::vector<std::pair<ChipNormLayer*, const AwareAffine*>> pairs;
                for (std::size_t i = 0; i < f.chip_layers.size(); ++i)
                    pairs.emplace_back(f.chip_layers[i], &f.aware[i]);
                Val lbal = balance_loss(t, pairs);
                Val total = t.add(t.add(t.scale(lf, cfg.w_free), t.scale(la, cfg.w_aware)),
                                  t.add(t.scale(ls, cfg.w_sign), t.scale(lbal, cfg.w_balance)));
                float loss = t.scalar(total);
                if (std::isnan(loss))
                    throw std::runtime_error("training diverged (NaN loss) at epoch " +
                                             std::to_string(epoch) + " batch " + std::to_string(batches));
                stats.loss_total += loss;
                stats.loss_free += t.scalar(lf);
                stats.loss_aware += t.scalar(la);
                stats.loss_sign += t.scalar(ls);
                stats.loss_balance += t.scalar(lbal);
                Sgd::zero_grad(params);
                t.backward(total);
                optimizer.step(params, scfg);
            } else {
                {
                    Tape t;
                    Val logits = model.forward_free(t, batch, true, true);
                    Val lf = t.softmax_cross_entropy(logits, labels);
                    float loss = t.scalar(lf);
                    if (std::isnan(loss))
                        throw std::runtime_error("training diverged (NaN loss) at epoch " +
                                                 std::to_string(epoch) + " batch " +
                                                 std::to_string(batches));
                    stats.loss_free += loss;
                    Sgd::zero_grad(params);
                    t.backward(lf);
                    optimizer.step(params, scfg);
                }
                {
                    Tape t;
                    auto f = model.forward_aware(t, batch, &result.owner_passport, nullptr, true);
                    Val la = t.softmax_cross_entropy(f.logits, labels);
                    Val ls = sign_loss(t, f.wp_gammas, frozen_xi.bits);
                    std::vector<std::pair<ChipNormLayer*, const AwareAffine*>> pairs;
                    for (std::size_t i = 0; i < f.chip_layers.size(); ++i)
                        pairs.emplace_back(f.chip_layers[i], &f.aware[i]);
                    Val lbal = balance_loss(t, pairs);
                    Val total = t.add(t.scale(la, cfg.w_aware),
                                      t.add(t.scale(ls, cfg.w_sign), t.scale(lbal, cfg.w_balance)));
                    float loss = t.scalar(total);
                    stats.loss_aware += t.scalar(la);
                    stats.loss_sign += t.scalar(ls);
                    stats.loss_balance += t.scalar(lbal);
                    stats.loss_total += stats.loss_free + loss;
                    Sgd::zero_grad(params);
                    t.backward(total);
                    optimizer.step(params, scfg);
                }
            }
            ++batches;
        }
        stats.loss_total /= batches;
        stats.loss_free /= batches;
        stats.loss_aware /= batches;
        stats.loss_sign /= batches;
        stats.loss_balance /= batches;
        result.history.push_back(stats);
        if (result.credentials.xi.bits != frozen_xi.bits)
            throw std::logic_error("immutable signature changed during training");
    }

    result.free_accuracy = evaluate_accuracy(model, test, Branch::free);
    result.aware_accuracy = evaluate_accuracy(model, test, Branch::aware, &result.owner_passport);
    result.sda = signature_match_fraction(model.extract_signature(result.owner_passport),
                                          frozen_xi.bits);
    return result;
}

}  // namespace chip
