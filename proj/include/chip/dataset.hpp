// Synthetic "pattern blob" classification data: one frozen Gaussian template
// per class plus per-sample noise. Deterministic for a given seed, balanced
// across classes. An IDX loader covers real small datasets.
#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "chip/tensor.hpp"

namespace chip {

struct Dataset {
    Tensor images;            // (N, C, H, W)
    std::vector<int> labels;  // length N
    int num_classes = 0;

    int size() const { return images.rank() == 4 ? images.dim(0) : 0; }

    Tensor sample(int i) const {
        const int C = images.dim(1), H = images.dim(2), W = images.dim(3);
        Tensor out({1, C, H, W});
        std::size_t n = out.data.size();
        std::copy_n(images.data.begin() + static_cast<std::ptrdiff_t>(i) * static_cast<std::ptrdiff_t>(n),
                    n, out.data.begin());
        return out;
    }

    Tensor batch(const std::vector<int>& idx) const {
        const int C = images.dim(1), H = images.dim(2), W = images.dim(3);
        Tensor out({static_cast<int>(idx.size()), C, H, W});
        std::size_t per = static_cast<std::size_t>(C) * H * W;
        for (std::size_t k = 0; k < idx.size(); ++k)
            std::copy_n(images.data.begin() + static_cast<std::ptrdiff_t>(idx[k] * static_cast<int>(per)),
                        per, out.data.begin() + static_cast<std::ptrdiff_t>(k * per));
        return out;
    }

    std::vector<int> batch_labels(const std::vector<int>& idx) const {
        std::vector<int> out;
        out.reserve(idx.size());
        for (int i : idx) out.push_back(labels[static_cast<std::size_t>(i)]);
        return out;
    }

    Dataset subset(const std::vector<int>& idx) const {
        Dataset d;
        d.images = batch(idx);
        d.labels = batch_labels(idx);
        d.num_classes = num_classes;
        return d;
    }
};

struct PatternDataConfig {
    int num_classes = 10;
    int train_count = 2000;
    int test_count = 500;
    int channels = 1;
    int height = 16;
    int width = 16;
    float noise_std = 0.3f;
};

struct TrainTestSplit {
    Dataset train;
    Dataset test;
};

inline TrainTestSplit make_pattern_dataset(std::uint64_t seed, const PatternDataConfig& cfg = {}) {
    if (cfg.train_count % cfg.num_classes != 0 || cfg.test_count % cfg.num_classes != 0)
        throw std::invalid_argument("sample counts must be divisible by num_classes");
    Rng rng(seed);
    std::size_t pixels = static_cast<std::size_t>(cfg.channels) * cfg.height * cfg.width;
    std::vector<Tensor> templates;
    templates.reserve(static_cast<std::size_t>(cfg.num_classes));
    for (int k = 0; k < cfg.num_classes; ++k) {
        Tensor t({cfg.channels, cfg.height, cfg.width});
        rng.fill_normal(t);
        templates.push_back(std::move(t));
    }
    auto generate = [&](int count) {
        Dataset d;
        d.num_classes = cfg.num_classes;
        d.images = Tensor({count, cfg.channels, cfg.height, cfg.width});
        d.labels.resize(static_cast<std::size_t>(count));
        for (int i = 0; i < count; ++i) {
            int cls = i % cfg.num_classes;
            d.labels[static_cast<std::size_t>(i)] = cls;
            const Tensor& tpl = templates[static_cast<std::size_t>(cls)];
            float* dst = d.images.data.data() + static_cast<std::size_t>(i) * pixels;
            for (std::size_t j = 0; j < pixels; ++j)
                dst[j] = tpl.data[j] + cfg.noise_std * static_cast<float>(rng.normal());
        }
        return d;
    };
    TrainTestSplit split;
    split.train = generate(cfg.train_count);
    split.test = generate(cfg.test_count);
    return split;
}

// IDX (MNIST-style) loaders for optional real data.
inline std::uint32_t read_be_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw std::runtime_error("truncated IDX header");
    return static_cast<std::uint32_t>(b[0]) << 24 | static_cast<std::uint32_t>(b[1]) << 16 |
           static_cast<std::uint32_t>(b[2]) << 8 | b[3];
}

inline Dataset load_idx_dataset(const std::string& images_path, const std::string& labels_path,
                                int num_classes) {
    std::ifstream fi(images_path, std::ios::binary);
    if (!fi) throw std::runtime_error("cannot open " + images_path);
    if (read_be_u32(fi) != 0x00000803u) throw std::runtime_error("bad IDX image magic in " + images_path);
    int n = static_cast<int>(read_be_u32(fi));
    int h = static_cast<int>(read_be_u32(fi));
    int w = static_cast<int>(read_be_u32(fi));
    Dataset d;
    d.num_classes = num_classes;
    d.images = Tensor({n, 1, h, w});
    std::vector<unsigned char> row(static_cast<std::size_t>(h) * w);
    for (int i = 0; i < n; ++i) {
        fi.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
        if (!fi) throw std::runtime_error("truncated IDX image data in " + images_path);
        float* dst = d.images.data.data() + static_cast<std::size_t>(i) * row.size();
        for (std::size_t j = 0; j < row.size(); ++j) dst[j] = static_cast<float>(row[j]) / 255.0f;
    }

    std::ifstream fl(labels_path, std::ios::binary);
    if (!fl) throw std::runtime_error("cannot open " + labels_path);
    if (read_be_u32(fl) != 0x00000801u) throw std::runtime_error("bad IDX label magic in " + labels_path);
    int ln = static_cast<int>(read_be_u32(fl));
    if (ln != n) throw std::runtime_error("IDX image/label count mismatch");
    d.labels.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        char c;
        fl.get(c);
        if (!fl) throw std::runtime_error("truncated IDX label data in " + labels_path);
        d.labels[static_cast<std::size_t>(i)] = static_cast<unsigned char>(c);
    }
    return d;
}

}  // namespace chip
