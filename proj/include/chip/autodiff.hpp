// Tape-based reverse-mode autodiff with exactly the operators the passport
// layers and losses need. f32 data, fixed iteration order, single-threaded
// per tape; completed parameter snapshots are plain tensors and may be shared.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "chip/tensor.hpp"

namespace chip {

struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;

    Parameter() = default;
    Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {
        grad = Tensor::zeros_like(value);
    }

    void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), 0.0f); }
};

enum class StatsMode { batch, group };

struct RunningStats {
    Tensor mean;  // shape (C)
    Tensor var;   // shape (C), biased
    void init(int channels) {
        mean = Tensor({channels}, 0.0f);
        var = Tensor({channels}, 1.0f);
    }
};

struct Val {
    int i = -1;
    bool valid() const { return i >= 0; }
};

class Tape {
public:
    // Leaf without gradient tracking.
    Val input(Tensor v) { return push(std::move(v), false, nullptr); }

    // Leaf whose gradient is accumulated into p.grad after backward().
    Val param(Parameter& p) { return push(p.value, true, &p); }

    const Tensor& val(Val v) const { return node(v).value; }
    const Tensor& grad_of(Val v) const {
        const Node& n = node(v);
        if (!n.needs_grad) throw std::logic_error("node does not track gradients");
        return n.grad;
    }

    float scalar(Val v) const {
        const Tensor& t = val(v);
        if (t.numel() != 1) throw std::logic_error("scalar() on tensor " + t.shape_str());
        return t.data[0];
    }

    void backward(Val loss) {
        if (backward_done_) throw std::logic_error("backward already ran on this tape");
        backward_done_ = true;
        Node& top = nodes_.at(static_cast<std::size_t>(loss.i));
        if (top.value.numel() != 1) throw std::logic_error("backward requires a scalar loss");
        if (!top.needs_grad) return;  // loss independent of any parameter
        top.grad.data[0] = 1.0f;
        for (int i = loss.i; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (n.needs_grad && n.backward) n.backward(*this, i);
        }
        for (Node& n : nodes_) {
            if (n.sink) {
                for (std::size_t k = 0; k < n.grad.data.size(); ++k)
                    n.sink->grad.data[k] += n.grad.data[k];
            }
        }
    }

    // ---- operators --------------------------------------------------------

    Val conv2d(Val xv, Val wv, int stride = 1, int pad = 0);
    Val normalize(Val xv, StatsMode mode, int groups, float eps, RunningStats* rs, bool training,
                  bool update_running);
    Val channel_affine(Val xv, Val gammav, Val betav);
    Val avg_pool(Val xv, int k, int s);
    Val adaptive_avg_pool(Val xv);            // (N,C,H,W) -> (N,C); pools to 1x1 per channel
    Val adaptive_avg_pool1d(Val xv, int out_len);
    Val linear(Val xv, Val wv, Val bv);
    Val leaky_relu(Val xv, float slope = 0.01f);
    Val add(Val av, Val bv);
    Val scale(Val av, float s);
    Val reshape(Val xv, std::vector<int> shape);
    Val l1_loss(Val av, Val bv);
    Val hinge_sum(Val vv, const std::vector<std::int8_t>& target_signs, float tau);
    Val softmax_cross_entropy(Val logitsv, const std::vector<int>& labels);
    Val cosine_similarity(Val av, const Tensor& b);

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool needs_grad = false;
        Parameter* sink = nullptr;
        std::function<void(Tape&, int)> backward;
    };

    Val push(Tensor value, bool needs_grad, Parameter* sink,
             std::function<void(Tape&, int)> backward = nullptr) {
        Node n;
        n.value = std::move(value);
        n.needs_grad = needs_grad;
        n.sink = sink;
        n.backward = std::move(backward);
        if (n.needs_grad) n.grad = Tensor::zeros_like(n.value);
        nodes_.push_back(std::move(n));
        return Val{static_cast<int>(nodes_.size()) - 1};
    }

    const Node& node(Val v) const { return nodes_.at(static_cast<std::size_t>(v.i)); }
    Node& node(Val v) { return nodes_.at(static_cast<std::size_t>(v.i)); }

    Tensor& grad_buf(int i) { return nodes_[static_cast<std::size_t>(i)].grad; }
    bool tracked(int i) const { return nodes_[static_cast<std::size_t>(i)].needs_grad; }

    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

// ---- op implementations -----------------------------------------------------

inline Val Tape::conv2d(Val xv, Val wv, int stride, int pad) {
    const Tensor& x = val(xv);
    const Tensor& w = val(wv);
    if (x.rank() != 4 || w.rank() != 4)
        throw std::invalid_argument("conv2d expects NCHW input and OIKK kernel, got " +
                                    x.shape_str() + " and " + w.shape_str());
    if (x.dim(1) != w.dim(1))
        throw std::invalid_argument("conv2d channel mismatch: input " + x.shape_str() +
                                    " vs kernel " + w.shape_str());
    if (stride < 1) throw std::invalid_argument("conv2d stride must be >= 1");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int O = w.dim(0), K = w.dim(2), K2 = w.dim(3);
    const int Ho = (H + 2 * pad - K) / stride + 1;
    const int Wo = (W + 2 * pad - K2) / stride + 1;
    if (Ho < 1 || Wo < 1)
        throw std::invalid_argument("conv2d kernel " + w.shape_str() + " too large for input " +
                                    x.shape_str());

    Tensor out({N, O, Ho, Wo});
    const float* xd = x.data.data();
    const float* wd = w.data.data();
    float* od = out.data.data();
    for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o)
            for (int oh = 0; oh < Ho; ++oh)
                for (int ow = 0; ow < Wo; ++ow) {
                    float acc = 0.0f;
                    for (int c = 0; c < C; ++c)
                        for (int kh = 0; kh < K; ++kh) {
                            int ih = oh * stride - pad + kh;
                            if (ih < 0 || ih >= H) continue;
                            const float* xrow = xd + ((static_cast<std::size_t>(n) * C + c) * H + ih) * W;
                            const float* wrow = wd + ((static_cast<std::size_t>(o) * C + c) * K + kh) * K2;
                            for (int kw = 0; kw < K2; ++kw) {
                                int iw = ow * stride - pad + kw;
                                if (iw < 0 || iw >= W) continue;
                                acc += xrow[iw] * wrow[kw];
                            }
                        }
                    od[((static_cast<std::size_t>(n) * O + o) * Ho + oh) * Wo + ow] = acc;
                }

    bool ng = tracked(xv.i) || tracked(wv.i);
    auto bw = [xv, wv, stride, pad, N, C, H, W, O, K, K2, Ho, Wo](Tape& t, int self) {
        const Tensor& g = t.grad_buf(self);
        const Tensor& x = t.val(xv);
        const Tensor& w = t.val(wv);
        const float* gd = g.data.data();
        if (t.tracked(xv.i)) {
            float* gx = t.grad_buf(xv.i).data.data();
            const float* wd = w.data.data();
            for (int n = 0; n < N; ++n)
                for (int o = 0; o < O; ++o)
                    for (int oh = 0; oh < Ho; ++oh)
                        for (int ow = 0; ow < Wo; ++ow) {
                            float gv = gd[((static_cast<std::size_t>(n) * O + o) * Ho + oh) * Wo + ow];
                            if (gv == 0.0f) continue;
                            for (int c = 0; c < C; ++c)
                                for (int kh = 0; kh < K; ++kh) {
                                    int ih = oh * stride - pad + kh;
                                    if (ih < 0 || ih >= H) continue;
                                    float* gxrow = gx + ((static_cast<std::size_t>(n) * C + c) * H + ih) * W;
                                    const float* wrow =
                                        wd + ((static_cast<std::size_t>(o) * C + c) * K + kh) * K2;
                                    for (int kw = 0; kw < K2; ++kw) {
                                        int iw = ow * stride - pad + kw;
                                        if (iw < 0 || iw >= W) continue;
                                        gxrow[iw] += gv * wrow[kw];
                                    }
                                }
                        }
        }
        if (t.tracked(wv.i)) {
            float* gw = t.grad_buf(wv.i).data.data();
            const float* xd = x.data.data();
            for (int n = 0; n < N; ++n)
                for (int o = 0; o < O; ++o)
                    for (int oh = 0; oh < Ho; ++oh)
                        for (int ow = 0; ow < Wo; ++ow) {
                            float gv = gd[((static_cast<std::size_t>(n) * O + o) * Ho + oh) * Wo + ow];
                            if (gv == 0.0f) continue;
                            for (int c = 0; c < C; ++c)
                                for (int kh = 0; kh < K; ++kh) {
                                    int ih = oh * stride - pad + kh;
                                    if (ih < 0 || ih >= H) continue;
                                    const float* xrow =
                                        xd + ((static_cast<std::size_t>(n) * C + c) * H + ih) * W;
                                    float* gwrow =
                                        gw + ((static_cast<std::size_t>(o) * C + c) * K + kh) * K2;
                                    for (int kw = 0; kw < K2; ++kw) {
                                        int iw = ow * stride - pad + kw;
                                        if (iw < 0 || iw >= W) continue;
                                        gwrow[kw] += gv * xrow[iw];
                                    }
                                }
                        }
        }
    };
    return push(std::move(out), ng, nullptr, ng ? std::function<void(Tape&, int)>(bw) : nullptr);
}

inline Val Tape::normalize(Val xv, StatsMode mode, int groups, float eps, RunningStats* rs,
                           bool training, bool update_running) {
    const Tensor& x = val(xv);
    if (x.rank() != 4) throw std::invalid_argument("normalize expects NCHW, got " + x.shape_str());
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);

    Tensor out(x.shape);
    bool ng = tracked(xv.i);

    if (mode == StatsMode::batch && !training) {
        if (!rs) throw std::invalid_argument("eval-mode batch normalization requires running stats");
        std::vector<float> inv_sigma(static_cast<std::size_t>(C));
        for (int c = 0; c < C; ++c)
            inv_sigma[static_cast<std::size_t>(c)] =
                1.0f / std::sqrt(rs->var.data[static_cast<std::size_t>(c)] + eps);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                float mu = rs->mean.data[static_cast<std::size_t>(c)];
                float is = inv_sigma[static_cast<std::size_t>(c)];
                const float* xs = x.data.data() + (static_cast<std::size_t>(n) * C + c) * H * W;
                float* os = out.data.data() + (static_cast<std::size_t>(n) * C + c) * H * W;
                for (int i = 0; i < H * W; ++i) os[i] = (xs[i] - mu) * is;
            }
        auto bw = [xv, inv_sigma, N, C, H, W](Tape& t, int self) {
            if (!t.tracked(xv.i)) return;
            const Tensor& g = t.grad_buf(self);
            float* gx = t.grad_buf(xv.i).data.data();
            const float* gd = g.data.data();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    float is = inv_sigma[static_cast<std::size_t>(c)];
                    std::size_t base = (static_cast<std::size_t>(n) * C + c) * H * W;
                    for (int i = 0; i < H * W; ++i) gx[base + i] += gd[base + i] * is;
                }
        };
        return push(std::move(out), ng, nullptr, ng ? std::function<void(Tape&, int)>(bw) : nullptr);
    }

    // Training-mode batch stats or group stats: normalize over blocks and keep
    // what backward needs (x-hat and 1/sigma per block).
    int nblocks, block_elems;
    if (mode == StatsMode::batch) {
        nblocks = C;
        block_elems = N * H * W;
    } else {
        if (groups < 1 || C % groups != 0)
            throw std::invalid_argument("group normalization requires C divisible by groups");
        nblocks = N * groups;
        block_elems = (C / groups) * H * W;
    }
    std::vector<float> mean(static_cast<std::size_t>(nblocks)), inv_sigma(static_cast<std::size_t>(nblocks));

    auto for_block = [mode, groups, N, C, H, W](int b, auto&& fn) {
        // fn(flat_index) over all elements of block b
        if (mode == StatsMode::batch) {
            int c = b;
            for (int n = 0; n < N; ++n) {
                std::size_t base = (static_cast<std::size_t>(n) * C + c) * H * W;
                for (int i = 0; i < H * W; ++i) fn(base + i);
            }
        } else {
            int cpg = C / groups;
            int n = b / groups, g = b % groups;
            std::size_t base = (static_cast<std::size_t>(n) * C + g * cpg) * H * W;
            for (int i = 0; i < cpg * H * W; ++i) fn(base + i);
        }
    };

    for (int b = 0; b < nblocks; ++b) {
        double sum = 0.0;
        for_block(b, [&](std::size_t i) { sum += x.data[i]; });
        double mu = sum / block_elems;
        double var = 0.0;
        for_block(b, [&](std::size_t i) {
            double d = x.data[i] - mu;
            var += d * d;
        });
        var /= block_elems;
        mean[static_cast<std::size_t>(b)] = static_cast<float>(mu);
        inv_sigma[static_cast<std::size_t>(b)] = static_cast<float>(1.0 / std::sqrt(var + eps));
        float fm = mean[static_cast<std::size_t>(b)], fis = inv_sigma[static_cast<std::size_t>(b)];
        for_block(b, [&](std::size_t i) { out.data[i] = (x.data[i] - fm) * fis; });
        if (mode == StatsMode::batch && rs && update_running) {
            float v = 1.0f / (fis * fis) - eps;
            rs->mean.data[static_cast<std::size_t>(b)] =
                0.9f * rs->mean.data[static_cast<std::size_t>(b)] + 0.1f * fm;
            rs->var.data[static_cast<std::size_t>(b)] =
                0.9f * rs->var.data[static_cast<std::size_t>(b)] + 0.1f * v;
        }
    }

    Tensor xhat_saved = out;  // keep a copy: backward needs x-hat after `out` moves on
    auto bw = [xv, mode, groups, N, C, H, W, nblocks, block_elems, inv_sigma,
               xhat = std::move(xhat_saved), for_block](Tape& t, int self) {
        if (!t.tracked(xv.i)) return;
        const Tensor& g = t.grad_buf(self);
        float* gx = t.grad_buf(xv.i).data.data();
        for (int b = 0; b < nblocks; ++b) {
            double sum_g = 0.0, sum_gx = 0.0;
            for_block(b, [&](std::size_t i) {
                sum_g += g.data[i];
                sum_gx += static_cast<double>(g.data[i]) * xhat.data[i];
            });
            float is = inv_sigma[static_cast<std::size_t>(b)];
            float m = static_cast<float>(block_elems);
            float c1 = static_cast<float>(sum_g / m);
            float c2 = static_cast<float>(sum_gx / m);
            for_block(b, [&](std::size_t i) {
                gx[i] += is * (g.data[i] - c1 - xhat.data[i] * c2);
            });
        }
    };
    return push(std::move(out), ng, nullptr, ng ? std::function<void(Tape&, int)>(bw) : nullptr);
}

inline Val Tape::channel_affine(Val xv, Val gammav, Val betav) {
    const Tensor& x = val(xv);
    const Tensor& gamma = val(gammav);
    const Tensor& beta = val(betav);
    if (x.rank() != 4) throw std::invalid_argument("channel_affine expects NCHW, got " + x.shape_str());
    const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    if (gamma.numel() != C || beta.numel() != C)
        throw std::invalid_argument("channel_affine factors " + gamma.shape_str() + "/" +
                                    beta.shape_str() + " do not match channels of " + x.shape_str());
    Tensor out(x.shape);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            float gm = gamma.data[static_cast<std::size_t>(c)], bt = beta.data[static_cast<std::size_t>(c)];
            std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
            for (int i = 0; i < HW; ++i) out.data[base + i] = x.data[base + i] * gm + bt;
        }
    bool ng = tracked(xv.i) || tracked(gammav.i) || tracked(betav.i);
    auto bw = [xv, gammav, betav, N, C, HW](Tape& t, int self) {
        const Tensor& g = t.grad_buf(self);
        const Tensor& x = t.val(xv);
        const Tensor& gamma = t.val(gammav);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
                if (t.tracked(xv.i)) {
                    float gm = gamma.data[static_cast<std::size_t>(c)];
                    float* gx = t.grad_buf(xv.i).data.data();
                    for (int i = 0; i < HW; ++i) gx[base + i] += g.data[base + i] * gm;
                }
                if (t.tracked(gammav.i)) {
                    double s = 0.0;
                    for (int i = 0; i < HW; ++i)
                        s += static_cast<double>(g.data[base + i]) * x.data[base + i];
                    t.grad_buf(gammav.i).data[static_cast<std::size_t>(c)] += static_cast<float>(s);
                }
                if (t.tracked(betav.i)) {
                    double s = 0.0;
                    for (int i = 0; i < HW; ++i) s += g.data[base + i];
                    t.grad_buf(betav.i).data[static_cast<std::size_t>(c)] += static_cast<float>(s);
                }
            }
    };
    return push(std::move(out), ng, nullptr, ng ? std::function<void(Tape&, int)>(bw) : nullptr);
}

inline Val Tape::avg_pool(Val xv, int k, int s) {
    const Tensor& x = val(xv);
    if (x.rank() != 4) throw std::invalid_argument("avg_pool expects NCHW, got " + x.shape_str());
    if (k < 1 || s < 1) throw std::invalid_argument("avg_pool window and stride must be >= 1");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Ho = (H - k) / s + 1, Wo = (W - k) / s + 1;
    if (Ho < 1 || Wo < 1)
        throw std::invalid_argument("avg_pool window too large for input " + x.shape_str());
    Tensor out({N, C, Ho, Wo});
    float inv = 1.0f / static_cast<float>(k * k);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int oh = 0; oh < Ho; ++oh)
                for (int ow = 0; ow < Wo; ++ow) {
                    float acc = 0.0f;
                    for (int kh = 0; kh < k; ++kh)
                        for (int kw = 0; kw < k; ++kw)
                            acc += x.data[((static_cast<std::size_t>(n) * C + c) * H + oh * s + kh) * W +
                                          ow * s + kw];
                    out.data[((static_cast<std::size_t>(n) * C + c) * Ho + oh) * Wo + ow] = acc * inv;
                }
    bool ng = tracked(xv.i);
    auto bw = [xv, k, s, N, C, H, W, Ho, Wo, inv](Tape& t, int self) {
        if (!t.tracked(xv.i)) return;
        const Tensor& g = t.grad_buf(self);
        float* gx = t.grad_buf(xv.i).data.data();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int oh = 0; oh < Ho; ++oh)
                    for (int ow = 0; ow < Wo; ++ow) {
                        float gv = g.data[((static_cast<std::size_t>(n) * C + c) * Ho + oh) * Wo + ow] * inv;
                        for (int kh = 0; kh < k; ++kh)
                            for (int kw = 0; kw < k; ++kw)
                                gx[((static_cast<std::size_t>(n) * C + c) * H + oh * s + kh) * W + ow * s +
                                   kw] += gv;
                    }
    };
    return push(std::move(out), ng, nullptr, ng ? std::function<void(Tape&, int)>(bw) : nullptr);
}

inline Val Tape::adaptive_avg_pool(Val xv) {
    const Tensor& x = val(xv);
    if (x.rank() != 4)
        throw std::invalid_argument("adaptive_avg_pool expects NCHW, got " + x.shape_str());
    const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    Tensor out({N, C});
    float inv = 1.0f / static_cast<float>(HW);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            double acc = 0.0;
            std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
            for (int i = 0; i < HW; ++i) acc += x.data[base + i];
            out.data[static_cast<std::size_t>(n) * C + c] = static_cast<float>(acc) * inv;
        }
    bool ng = tracked(xv.i);
    auto bw = [xv, N, C, HW, inv](Tape& t, int self) {
        if (!t.tracked(xv.i)) return;
        const Tensor& g = t.grad_buf(self);
        float* gx = t.grad_buf(xv.i).data.data();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                float gv = g.data[static_cast<std::size_t>(n) * C + c] * inv;
                std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
                for (int i = 0; i < HW; ++i) gx[base + i] += gv;
            }
    };
    return push(std::move(out), ng, nullptr, ng ? std::function<void(Tape&, int)>(bw) : nullptr);
}

inline Val Tape::adaptive_avg_pool1d(Val xv, int out_len) {
    const Tensor& x = val(xv);
    if (x.rank() != 1)
        throw std::invalid_argument("adaptive_avg_pool1d expects a vector, got " + x.shape_str());
    if (out_len < 1) throw std::invalid_argument("adaptive_avg_pool1d output length must be >= 1");
    const int L = x.dim(0);
    Tensor out({out_len});
    auto bin = [L, out_len](int i) {
        int start = static_cast<int>(static_cast<std::int64_t>(i) * L / out_len);
        int end = static_cast<int>((static_cast<std::int64_t>(i + 1) * L + out_len - 1) / out_len);
        return std::pair<int, int>(start, end);
    };
    for (int i = 0; i < out_len; ++i) {
        auto [s, e] = bin(i);
        double acc = 0.0;
        for (int j = s; j < e; ++j) acc += x.data[static_cast<std::size_t>(j)];
        out.data[static_cast<std::size_t>(i)] = static_cast<float>(acc / (e - s));
    }
    bool ng = tracked(xv.i);
    auto bw = [xv, out_len, bin](Tape& t, int self) {
        if (!t.tracked(xv.i)) return;
        const Tensor& g = t.grad_buf(self);
        float* gx = t.grad_buf(xv.i).data.data();
        for (int i = 0; i < out_len; ++i) {
            auto [s, e] = bin(i);
            float gv = g.data[static_cast<std::size_t>(i)] / static_cast<float>(e - s);
            for (int j = s; j < e; ++j) gx[j] += gv;
        }
    };
    return push(std::move(out), ng, nullptr, ng ? std::function<void(Tape&, int)>(bw) : nullptr);
}

inline Val Tape::linear(Val xv, Val wv, Val bv) {
    const Tensor& x = val(xv);
    const Tensor& w = val(wv);
    const Tensor& b = val(bv);
    if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1)
        throw std::invalid_argument("linear expects (N,F) x (O,F) + (O), got " + x.shape_str() + ", " +
                                    w.shape_str() + ", " + b.shape_str());
    const int N = x.dim(0), F = x.dim(1), O = w.dim(0);
    if (w.dim(1) != F || b.dim(0) != O)
        throw std::invalid_argument("linear dimension mismatch: " + x.shape_str() + " vs " +
                                    w.shape_str() + " vs " + b.shape_str());
    Tensor out({N, O});
    for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o) {
            float acc = b.data[static_cast<std::size_t>(o)];
            const float* xr = x.data.data() + static_cast<std::size_t>(n) * F;
            const float* wr = w.data.data() + static_cast<std::size_t>(o) * F;
            for (int f = 0; f < F; ++f) acc += xr[f] * wr[f];
            out.data[static_cast<std::size_t>(n) * O + o] = acc;
        }
    bool ng = tracked(xv.i) || tracked(wv.i) || tracked(bv.i);
    auto bw = [xv, wv, bv, N, F, O](Tape& t, int self) {
        const Tensor& g = t.grad_buf(self);
        const Tensor& x = t.val(xv);
        const Tensor& w = t.val(wv);
        for (int n = 0; n < N; ++n)
            for (int o = 0; o < O; ++o) {
                float gv = g.data[static_cast<std::size_t>(n) * O + o];
                if (gv == 0.0f) continue;
                if (t.tracked(xv.i)) {
                    float* gx = t.grad_buf(xv.i).data.data() + static_cast<std::size_t>(n) * F;
                    const float* wr = w.data.data() + static_cast<std::size_t>(o) * F;
                    for (int f = 0; f < F; ++f) gx[f] += gv * wr[f];
                }
                if (t.tracked(wv.i)) {
                    float* gw = t.grad_buf(wv.i).data.data() + static_cast<std::size_t>(o) * F;
                    const float* xr = x.data.data() + static_cast<std::size_t>(n) * F;
                    for (int f = 0; f < F; ++f) gw[f] += gv * xr[f];
                }
                if (t.tracked(bv.i)) t.grad_buf(bv.i).data[static_cast<std::size_t>(o)] += gv;
            }
    };
    return push(std::move(out), ng, nullptr, ng ? std::function<void(Tape&, int)>(bw) : nullptr);
}

inline Val Tape::leaky_relu(Val xv, float slope) {
    const Tensor& x = val(xv);
    Tensor out(x.shape);
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        float v = x.data[i];
        out.data[i] = v > 0.0f ? v : slope * v;
    }
    bool ng = tracked(xv.i);
    auto bw = [xv, slope](Tape& t, int self) {
        if (!t.tracked(xv.i)) return;
        const Tensor& g = t.grad_buf(self);
        const Tensor& x = t.val(xv);
        float* gx = t.grad_buf(xv.i).data.data();
        for (std::size_t i = 0; i < g.data.size(); ++i)
            gx[i] += g.data[i] * (x.data[i] > 0.0f ? 1.0f : slope);
    };
    return push(std::move(out), ng, nullptr, ng ? std::function<void(Tape&, int)>(bw) : nullptr);
}

inline Val Tape::add(Val av, Val bv) {
    const Tensor& a = val(av);
    const Tensor& b = val(bv);
    check_same_shape(a, b, "add");
    Tensor out(a.shape);
    for (std::size_t i = 0; i < a.data.size(); ++i) out.data[i] = a.data[i] + b.data[i];
    bool ng = tracked(av.i) || tracked(bv.i);
    auto bw = [av, bv](Tape& t, int self) {
        const Tensor& g = t.grad_buf(self);
        for (Val v : {av, bv}) {
            if (!t.tracked(v.i)) continue;
            float* gd = t.grad_buf(v.i).data.data();
            for (std::size_t i = 0; i < g.data.size(); ++i) gd[i] += g.data[i];
        }
    };
    return push(std::move(out), ng, nullptr, ng ? std::function<void(Tape&, int)>(bw) : nullptr);
}

inline Val Tape::scale(Val av, float s) {
    const Tensor& a = val(av);
    Tensor out(a.shape);
    for (std::size_t i = 0; i < a.data.size(); ++i) out.data[i] = a.data[i] * s;
    bool ng = tracked(av.i);
    auto bw = [av, s](Tape& t, int self) {
        if (!t.tracked(av.i)) return;
        const Tensor& g = t.grad_buf(self);
        float* gd = t.grad_buf(av.i).data.data();
        for (std::size_t i = 0; i < g.data.size(); ++i) gd[i] += g.data[i] * s;
    };
    return push(std::move(out), ng, nullptr, ng ? std::function<void(Tape&, int)>(bw) : nullptr);
}

inline Val Tape::reshape(Val xv, std::vector<int> shape) {
    const Tensor& x = val(xv);
    Tensor out = x.reshaped(std::move(shape));
    bool ng = tracked(xv.i);
    auto bw = [xv](Tape& t, int self) {
        if (!t.tracked(xv.i)) return;
        const Tensor& g = t.grad_buf(self);
        float* gd = t.grad_buf(xv.i).data.data();
        for (std::size_t i = 0; i < g.data.size(); ++i) gd[i] += g.data[i];
    };
    return push(std::move(out), ng, nullptr, ng ? std::function<void(Tape&, int)>(bw) : nullptr);
}

inline Val Tape::l1_loss(Val av, Val bv) {
    const Tensor& a = val(av);
    const Tensor& b = val(bv);
    check_same_shape(a, b, "l1_loss");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) acc += std::fabs(a.data[i] - b.data[i]);
    Tensor out({1});
    out.data[0] = static_cast<float>(acc / static_cast<double>(a.data.size()));
    bool ng = tracked(av.i) || tracked(bv.i);
    auto bw = [av, bv](Tape& t, int self) {
        float gv = t.grad_buf(self).data[0];
        const Tensor& a = t.val(av);
        const Tensor& b = t.val(bv);
        float inv = gv / static_cast<float>(a.data.size());
        for (std::size_t i = 0; i < a.data.size(); ++i) {
            float d = a.data[i] - b.data[i];
            float s = d > 0.0f ? 1.0f : (d < 0.0f ? -1.0f : 0.0f);
            if (t.tracked(av.i)) t.grad_buf(av.i).data[i] += inv * s;
            if (t.tracked(bv.i)) t.grad_buf(bv.i).data[i] -= inv * s;
        }
    };
    return push(std::move(out), ng, nullptr, ng ? std::function<void(Tape&, int)>(bw) : nullptr);
}

inline Val Tape::hinge_sum(Val vv, const std::vector<std::int8_t>& target_signs, float tau) {
    const Tensor& v = val(vv);
    if (static_cast<std::size_t>(v.numel()) != target_signs.size())
        throw std::invalid_argument("hinge_sum: " + std::to_string(target_signs.size()) +
                                    " target signs vs value tensor " + v.shape_str());
    double acc = 0.0;
    for (std::size_t i = 0; i < v.data.size(); ++i) {
        float margin = tau - static_cast<float>(target_signs[i]) * v.data[i];
        if (margin > 0.0f) acc += margin;
    }
    Tensor out({1});
    out.data[0] = static_cast<float>(acc);
    bool ng = tracked(vv.i);
    auto bw = [vv, target_signs, tau](Tape& t, int self) {
        if (!t.tracked(vv.i)) return;
        float gv = t.grad_buf(self).data[0];
        const Tensor& v = t.val(vv);
        float* gx = t.grad_buf(vv.i).data.data();
        for (std::size_t i = 0; i < v.data.size(); ++i) {
            float sign = static_cast<float>(target_signs[i]);
            if (tau - sign * v.data[i] > 0.0f) gx[i] -= gv * sign;
        }
    };
    return push(std::move(out), ng, nullptr, ng ? std::function<void(Tape&, int)>(bw) : nullptr);
}

inline Val Tape::softmax_cross_entropy(Val logitsv, const std::vector<int>& labels) {
    const Tensor& logits = val(logitsv);
    if (logits.rank() != 2)
        throw std::invalid_argument("softmax_cross_entropy expects (N,K) logits, got " +
                                    logits.shape_str());
    const int N = logits.dim(0), K = logits.dim(1);
    if (static_cast<std::size_t>(N) != labels.size())
        throw std::invalid_argument("softmax_cross_entropy: batch " + std::to_string(N) + " vs " +
                                    std::to_string(labels.size()) + " labels");
    Tensor probs({N, K});
    double loss = 0.0;
    for (int n = 0; n < N; ++n) {
        int y = labels[static_cast<std::size_t>(n)];
        if (y < 0 || y >= K) throw std::invalid_argument("label out of range");
        const float* row = logits.data.data() + static_cast<std::size_t>(n) * K;
        float mx = row[0];
        for (int k = 1; k < K; ++k) mx = std::max(mx, row[k]);
        double denom = 0.0;
        for (int k = 0; k < K; ++k) denom += std::exp(static_cast<double>(row[k] - mx));
        for (int k = 0; k < K; ++k)
            probs.data[static_cast<std::size_t>(n) * K + k] =
                static_cast<float>(std::exp(static_cast<double>(row[k] - mx)) / denom);
        loss += std::log(denom) - static_cast<double>(row[y] - mx);
    }
    Tensor out({1});
    out.data[0] = static_cast<float>(loss / N);
    bool ng = tracked(logitsv.i);
    auto bw = [logitsv, labels, N, K, probs = std::move(probs)](Tape& t, int self) {
        if (!t.tracked(logitsv.i)) return;
        float gv = t.grad_buf(self).data[0] / static_cast<float>(N);
        float* gx = t.grad_buf(logitsv.i).data.data();
        for (int n = 0; n < N; ++n) {
            int y = labels[static_cast<std::size_t>(n)];
            for (int k = 0; k < K; ++k) {
                float p = probs.data[static_cast<std::size_t>(n) * K + k];
                gx[static_cast<std::size_t>(n) * K + k] += gv * (p - (k == y ? 1.0f : 0.0f));
            }
        }
    };
    return push(std::move(out), ng, nullptr, ng ? std::function<void(Tape&, int)>(bw) : nullptr);
}

inline Val Tape::cosine_similarity(Val av, const Tensor& b) {
    const Tensor& a = val(av);
    if (a.numel() != b.numel())
        throw std::invalid_argument("cosine_similarity over different sizes: " + a.shape_str() +
                                    " vs " + b.shape_str());
    double dot = 0.0, na2 = 0.0, nb2 = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        dot += static_cast<double>(a.data[i]) * b.data[i];
        na2 += static_cast<double>(a.data[i]) * a.data[i];
        nb2 += static_cast<double>(b.data[i]) * b.data[i];
    }
    double na = std::max(std::sqrt(na2), 1e-12), nb = std::max(std::sqrt(nb2), 1e-12);
    double cos = dot / (na * nb);
    Tensor out({1});
    out.data[0] = static_cast<float>(cos);
    bool ng = tracked(av.i);
    auto bw = [av, b, na, nb, cos](Tape& t, int self) {
        if (!t.tracked(av.i)) return;
        float gv = t.grad_buf(self).data[0];
        const Tensor& a = t.val(av);
        float* gx = t.grad_buf(av.i).data.data();
        double inv_ab = 1.0 / (na * nb), inv_a2 = cos / (na * na);
        for (std::size_t i = 0; i < a.data.size(); ++i)
            gx[i] += gv * static_cast<float>(b.data[i] * inv_ab - a.data[i] * inv_a2);
    };
    return push(std::move(out), ng, nullptr, ng ? std::function<void(Tape&, int)>(bw) : nullptr);
}

// ---- optimizer ---------------------------------------------------------------

struct SgdConfig {
    float lr = 0.01f;
    float momentum = 0.9f;
    float weight_decay = 0.0f;
};

class Sgd {
public:
    void step(const std::vector<Parameter*>& params, const SgdConfig& cfg) {
        for (Parameter* p : params) {
            Tensor& vel = velocity(p);
            for (std::size_t i = 0; i < p->value.data.size(); ++i) {
                float g = p->grad.data[i];
                if (std::isnan(g))
                    throw std::runtime_error("NaN gradient in parameter " + p->name);
                g += cfg.weight_decay * p->value.data[i];
                float v = cfg.momentum * vel.data[i] + g;
                vel.data[i] = v;
                p->value.data[i] -= cfg.lr * v;
            }
        }
    }

    static void zero_grad(const std::vector<Parameter*>& params) {
        for (Parameter* p : params) p->zero_grad();
    }

private:
    Tensor& velocity(Parameter* p) {
        auto it = velocity_.find(p);
        if (it == velocity_.end()) it = velocity_.emplace(p, Tensor::zeros_like(p->value)).first;
        return it->second;
    }

    std::unordered_map<Parameter*, Tensor> velocity_;
};

}  // namespace chip
