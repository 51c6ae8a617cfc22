#include <catch_amalgamated.hpp>

#include <functional>

#include "chip/autodiff.hpp"
#include "chip/tensor.hpp"

using namespace chip;
using Catch::Matchers::ContainsSubstring;

namespace {

// Independent 6-loop cross-correlation reference.
Tensor conv_reference(const Tensor& x, const Tensor& w, int stride, int pad) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int O = w.dim(0), K = w.dim(2);
    const int Ho = (H + 2 * pad - K) / stride + 1;
    const int Wo = (W + 2 * pad - K) / stride + 1;
    Tensor out({N, O, Ho, Wo});
    for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o)
            for (int oh = 0; oh < Ho; ++oh)
                for (int ow = 0; ow < Wo; ++ow) {
                    double acc = 0.0;
                    for (int c = 0; c < C; ++c)
                        for (int kh = 0; kh < K; ++kh)
                            for (int kw = 0; kw < K; ++kw) {
                                int ih = oh * stride - pad + kh;
                                int iw = ow * stride - pad + kw;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                acc += static_cast<double>(
                                           x.data[((static_cast<std::size_t>(n) * C + c) * H + ih) * W + iw]) *
                                       w.data[((static_cast<std::size_t>(o) * C + c) * K + kh) * K + kw];
                            }
                    out.data[((static_cast<std::size_t>(n) * O + o) * Ho + oh) * Wo + ow] =
                        static_cast<float>(acc);
                }
    return out;
}

// Central finite differences at h=1e-3 against the tape gradient.
void check_gradients(std::vector<Parameter*> params, const std::function<Val(Tape&)>& build,
                     float h = 1e-3f, float tol = 1e-3f) {
    Sgd::zero_grad(params);
    {
        Tape t;
        Val loss = build(t);
        t.backward(loss);
    }
    auto eval = [&build]() {
        Tape t;
        return t.scalar(build(t));
    };
    for (Parameter* p : params) {
        for (std::size_t i = 0; i < p->value.data.size(); ++i) {
            float keep = p->value.data[i];
            p->value.data[i] = keep + h;
            float up = eval();
            p->value.data[i] = keep - h;
            float down = eval();
            p->value.data[i] = keep;
            float fd = (up - down) / (2 * h);
            float an = p->grad.data[i];
            float scale = std::max({1.0f, std::fabs(fd), std::fabs(an)});
            INFO(p->name << "[" << i << "]: analytic " << an << " vs fd " << fd);
            REQUIRE(std::fabs(an - fd) <= tol * scale);
        }
    }
}

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    rng.fill_uniform(t, lo, hi);
    return t;
}

}  // namespace

TEST_CASE("conv2d: closed-form cases") {
    Tape t;
    Val x = t.input(Tensor({1, 1, 3, 3}, 1.0f));
    Val w = t.input(Tensor({1, 1, 3, 3}, 1.0f));
    Val y = t.conv2d(x, w, 1, 0);
    CHECK(t.val(y).shape == std::vector<int>{1, 1, 1, 1});
    CHECK(t.val(y).data[0] == Catch::Approx(9.0f));

    // identity kernel with pad 1 reproduces the input
    Rng rng(7);
    Tensor img = random_tensor({1, 1, 4, 4}, rng);
    Tensor ident({1, 1, 3, 3}, 0.0f);
    ident.data[4] = 1.0f;
    Tape t2;
    Val y2 = t2.conv2d(t2.input(img), t2.input(ident), 1, 1);
    for (std::size_t i = 0; i < img.data.size(); ++i)
        CHECK(t2.val(y2).data[i] == Catch::Approx(img.data[i]).margin(1e-6));
}

TEST_CASE("conv2d: matches the 6-loop reference") {
    Rng rng(11);
    struct Case {
        std::vector<int> x, w;
        int stride, pad;
    };
    for (const Case& c : {Case{{2, 3, 8, 8}, {4, 3, 3, 3}, 1, 1},
                          Case{{1, 2, 7, 7}, {3, 2, 3, 3}, 2, 0},
                          Case{{2, 1, 5, 6}, {2, 1, 1, 1}, 1, 0},
                          Case{{1, 4, 9, 9}, {2, 4, 5, 5}, 2, 2}}) {
        Tensor x = random_tensor(c.x, rng);
        Tensor w = random_tensor(c.w, rng);
        Tensor ref = conv_reference(x, w, c.stride, c.pad);
        Tape t;
        const Tensor& got = t.val(t.conv2d(t.input(x), t.input(w), c.stride, c.pad));
        REQUIRE(got.shape == ref.shape);
        for (std::size_t i = 0; i < ref.data.size(); ++i)
            REQUIRE(std::fabs(got.data[i] - ref.data[i]) <= 1e-5f);
    }
}

TEST_CASE("conv2d: dimension errors name both shapes") {
    Tape t;
    Val x = t.input(Tensor({1, 3, 8, 8}));
    Val w = t.input(Tensor({4, 2, 3, 3}));
    CHECK_THROWS_WITH(t.conv2d(x, w, 1, 1),
                      ContainsSubstring("(1,3,8,8)") && ContainsSubstring("(4,2,3,3)"));
}

TEST_CASE("gradients: finite differences across every operator") {
    Rng rng(21);

    SECTION("conv2d w.r.t. input and kernel") {
        Parameter x("x", random_tensor({2, 2, 5, 5}, rng));
        Parameter w("w", random_tensor({3, 2, 3, 3}, rng));
        Tensor target = random_tensor({2, 3, 5, 5}, rng);
        check_gradients({&x, &w}, [&](Tape& t) {
            return t.l1_loss(t.conv2d(t.param(x), t.param(w), 1, 1), t.input(target));
        });
    }

    SECTION("batch normalization, training stats") {
        Parameter x("x", random_tensor({3, 2, 4, 4}, rng));
        Tensor target = random_tensor({3, 2, 4, 4}, rng, 2.0, 3.0);
        check_gradients({&x}, [&](Tape& t) {
            Val y = t.normalize(t.param(x), StatsMode::batch, 0, 1e-5f, nullptr, true, false);
            return t.l1_loss(y, t.input(target));
        });
    }

    SECTION("group normalization") {
        Parameter x("x", random_tensor({2, 4, 3, 3}, rng));
        Tensor target = random_tensor({2, 4, 3, 3}, rng, 2.0, 3.0);
        check_gradients({&x}, [&](Tape& t) {
            Val y = t.normalize(t.param(x), StatsMode::group, 2, 1e-5f, nullptr, true, false);
            return t.l1_loss(y, t.input(target));
        });
    }

    SECTION("batch normalization, eval stats") {
        RunningStats rs;
        rs.init(2);
        rs.mean.data = {0.3f, -0.2f};
        rs.var.data = {1.5f, 0.7f};
        Parameter x("x", random_tensor({2, 2, 3, 3}, rng));
        Tensor target = random_tensor({2, 2, 3, 3}, rng, 2.0, 3.0);
        check_gradients({&x}, [&](Tape& t) {
            Val y = t.normalize(t.param(x), StatsMode::batch, 0, 1e-5f, &rs, false, false);
            return t.l1_loss(y, t.input(target));
        });
    }

    SECTION("channel_affine w.r.t. all three inputs") {
        Parameter x("x", random_tensor({2, 3, 4, 4}, rng));
        Parameter g("g", random_tensor({3}, rng, 0.5, 1.5));
        Parameter b("b", random_tensor({3}, rng));
        Tensor target = random_tensor({2, 3, 4, 4}, rng, 2.0, 3.0);
        check_gradients({&x, &g, &b}, [&](Tape& t) {
            return t.l1_loss(t.channel_affine(t.param(x), t.param(g), t.param(b)), t.input(target));
        });
    }

    SECTION("pooling") {
        Parameter x("x", random_tensor({2, 2, 6, 6}, rng));
        Tensor target = random_tensor({2, 2, 3, 3}, rng, 2.0, 3.0);
        check_gradients({&x}, [&](Tape& t) {
            return t.l1_loss(t.avg_pool(t.param(x), 2, 2), t.input(target));
        });
        Tensor target2 = random_tensor({2, 2}, rng, 2.0, 3.0);
        check_gradients({&x}, [&](Tape& t) {
            return t.l1_loss(t.adaptive_avg_pool(t.param(x)), t.input(target2));
        });
        Parameter v("v", random_tensor({6}, rng));
        Tensor target3 = random_tensor({9}, rng, 2.0, 3.0);
        check_gradients({&v}, [&](Tape& t) {
            return t.l1_loss(t.adaptive_avg_pool1d(t.param(v), 9), t.input(target3));
        });
        Tensor target4 = random_tensor({4}, rng, 2.0, 3.0);
        check_gradients({&v}, [&](Tape& t) {
            return t.l1_loss(t.adaptive_avg_pool1d(t.param(v), 4), t.input(target4));
        });
    }

    SECTION("linear, leaky_relu, add, scale, reshape") {
        Parameter x("x", random_tensor({3, 4}, rng, 0.1, 1.0));
        Parameter w("w", random_tensor({5, 4}, rng));
        Parameter b("b", random_tensor({5}, rng));
        Tensor target = random_tensor({15}, rng, 2.0, 3.0);
        check_gradients({&x, &w, &b}, [&](Tape& t) {
            Val y = t.linear(t.param(x), t.param(w), t.param(b));
            y = t.leaky_relu(y, 0.01f);
            y = t.scale(y, 1.7f);
            y = t.add(y, t.input(Tensor({3, 5}, 0.25f)));
            return t.l1_loss(t.reshape(y, {15}), t.input(target));
        });
    }

    SECTION("hinge away from the kink") {
        Parameter v("v", Tensor({4}));
        v.value.data = {0.5f, -0.4f, 0.03f, -0.02f};
        std::vector<std::int8_t> target{1, 1, -1, 1};
        check_gradients({&v}, [&](Tape& t) { return t.hinge_sum(t.param(v), target, 0.1f); });
    }

    SECTION("softmax cross entropy") {
        Parameter logits("logits", random_tensor({4, 5}, rng, -2.0, 2.0));
        std::vector<int> labels{0, 3, 2, 4};
        check_gradients({&logits},
                        [&](Tape& t) { return t.softmax_cross_entropy(t.param(logits), labels); });
    }

    SECTION("cosine similarity") {
        Parameter a("a", random_tensor({12}, rng, 0.2, 1.0));
        Tensor b = random_tensor({12}, rng, 0.2, 1.0);
        check_gradients({&a}, [&](Tape& t) { return t.cosine_similarity(t.param(a), b); });
    }
}

TEST_CASE("normalize: semantics of the affine factors") {
    Rng rng(31);
    Tensor x = random_tensor({4, 3, 5, 5}, rng, -2.0, 2.0);

    SECTION("gamma=1, beta=0 standardizes each channel") {
        Tape t;
        Val y = t.channel_affine(
            t.normalize(t.input(x), StatsMode::batch, 0, 1e-5f, nullptr, true, false),
            t.input(Tensor({3}, 1.0f)), t.input(Tensor({3}, 0.0f)));
        const Tensor& out = t.val(y);
        for (int c = 0; c < 3; ++c) {
            double sum = 0, sq = 0;
            int count = 0;
            for (int n = 0; n < 4; ++n)
                for (int i = 0; i < 25; ++i) {
                    float v = out.data[((static_cast<std::size_t>(n) * 3 + c) * 25) + i];
                    sum += v;
                    sq += static_cast<double>(v) * v;
                    ++count;
                }
            double mean = sum / count;
            double stddev = std::sqrt(sq / count - mean * mean);
            CHECK(std::fabs(mean) < 1e-4);
            CHECK(std::fabs(stddev - 1.0) < 1e-3);
        }
    }

    SECTION("gamma=0 collapses to the broadcast bias") {
        Tensor beta({3});
        beta.data = {1.5f, -0.25f, 4.0f};
        Tape t;
        Val y = t.channel_affine(
            t.normalize(t.input(x), StatsMode::batch, 0, 1e-5f, nullptr, true, false),
            t.input(Tensor({3}, 0.0f)), t.input(beta));
        const Tensor& out = t.val(y);
        for (int n = 0; n < 4; ++n)
            for (int c = 0; c < 3; ++c)
                for (int i = 0; i < 25; ++i)
                    REQUIRE(out.data[(static_cast<std::size_t>(n) * 3 + c) * 25 + i] ==
                            beta.data[static_cast<std::size_t>(c)]);
    }

    SECTION("zero variance handled by eps, no error") {
        Tape t;
        Val y = t.normalize(t.input(Tensor({2, 1, 3, 3}, 5.0f)), StatsMode::batch, 0, 1e-5f, nullptr,
                            true, false);
        for (float v : t.val(y).data) REQUIRE(v == 0.0f);
    }

    SECTION("group mode requires divisibility") {
        Tape t;
        CHECK_THROWS_AS(
            t.normalize(t.input(Tensor({1, 3, 2, 2})), StatsMode::group, 2, 1e-5f, nullptr, true, false),
            std::invalid_argument);
    }
}

TEST_CASE("normalize: running statistics converge to batch statistics") {
    Rng rng(41);
    Tensor x = random_tensor({8, 2, 4, 4}, rng, -1.0, 3.0);
    RunningStats rs;
    rs.init(2);
    Tensor batch_mean({2}), batch_var({2});
    for (int c = 0; c < 2; ++c) {
        double sum = 0, sq = 0;
        int count = 0;
        for (int n = 0; n < 8; ++n)
            for (int i = 0; i < 16; ++i) {
                float v = x.data[(static_cast<std::size_t>(n) * 2 + c) * 16 + i];
                sum += v;
                sq += static_cast<double>(v) * v;
                ++count;
            }
        batch_mean.data[static_cast<std::size_t>(c)] = static_cast<float>(sum / count);
        batch_var.data[static_cast<std::size_t>(c)] =
            static_cast<float>(sq / count - (sum / count) * (sum / count));
    }
    for (int step = 0; step < 150; ++step) {
        Tape t;
        t.normalize(t.input(x), StatsMode::batch, 0, 1e-5f, &rs, true, true);
    }
    for (int c = 0; c < 2; ++c) {
        CHECK(std::fabs(rs.mean.data[static_cast<std::size_t>(c)] -
                        batch_mean.data[static_cast<std::size_t>(c)]) < 1e-4);
        CHECK(std::fabs(rs.var.data[static_cast<std::size_t>(c)] -
                        batch_var.data[static_cast<std::size_t>(c)]) < 1e-4);
    }
}

TEST_CASE("hinge_sum and l1_loss: closed-form values") {
    Tape t;
    Tensor v({2});
    v.data = {0.5f, -0.3f};
    CHECK(t.scalar(t.hinge_sum(t.input(v), {1, 1}, 0.1f)) == Catch::Approx(0.4f));

    Tensor sat({3});
    sat.data = {0.2f, -0.5f, 0.11f};
    CHECK(t.scalar(t.hinge_sum(t.input(sat), {1, -1, 1}, 0.1f)) == Catch::Approx(0.0f));

    Rng rng(5);
    Tensor a = random_tensor({7}, rng);
    CHECK(t.scalar(t.l1_loss(t.input(a), t.input(a))) == 0.0f);

    CHECK_THROWS_AS(t.hinge_sum(t.input(v), {1, 1, 1}, 0.1f), std::invalid_argument);
}

TEST_CASE("hinge_sum: satisfied margins give exactly zero gradient") {
    Parameter v("v", Tensor({3}));
    v.value.data = {0.5f, -0.2f, 0.9f};
    Tape t;
    Val loss = t.hinge_sum(t.param(v), {1, -1, 1}, 0.1f);
    CHECK(t.scalar(loss) == 0.0f);
    t.backward(loss);
    for (float g : v.grad.data) CHECK(g == 0.0f);
}

TEST_CASE("softmax_cross_entropy: value against direct computation") {
    Tensor logits({2, 3});
    logits.data = {1.0f, 2.0f, 0.5f, -1.0f, 0.0f, 1.0f};
    std::vector<int> labels{1, 2};
    double expect = 0.0;
    for (int n = 0; n < 2; ++n) {
        double denom = 0;
        for (int k = 0; k < 3; ++k) denom += std::exp(logits.data[static_cast<std::size_t>(n) * 3 + k]);
        expect -= std::log(std::exp(logits.data[static_cast<std::size_t>(n) * 3 + labels[static_cast<std::size_t>(n)]]) / denom);
    }
    expect /= 2;
    Tape t;
    CHECK(t.scalar(t.softmax_cross_entropy(t.input(logits), labels)) ==
          Catch::Approx(expect).epsilon(1e-5));
}

TEST_CASE("sgd: update rules") {
    SECTION("zero gradient, zero weight decay: parameters unchanged") {
        Parameter p("p", Tensor({3}, 2.0f));
        Sgd opt;
        opt.step({&p}, {0.5f, 0.9f, 0.0f});
        for (float v : p.value.data) CHECK(v == 2.0f);
    }
    SECTION("single scalar, lr=1, no momentum: decreases by the gradient") {
        Parameter p("p", Tensor({1}, 10.0f));
        p.grad.data[0] = 2.0f;
        Sgd opt;
        opt.step({&p}, {1.0f, 0.0f, 0.0f});
        CHECK(p.value.data[0] == Catch::Approx(8.0f));
    }
    SECTION("quadratic bowl converges to the analytic optimum") {
        // f(w) = (w - 3)^2, grad = 2(w - 3); optimum w* = 3
        Parameter p("p", Tensor({1}, -4.0f));
        Sgd opt;
        int steps = 0;
        for (; steps < 200; ++steps) {
            p.grad.data[0] = 2.0f * (p.value.data[0] - 3.0f);
            opt.step({&p}, {0.4f, 0.0f, 0.0f});
            if (std::fabs(p.value.data[0] - 3.0f) < 1e-6f) break;
        }
        CHECK(steps < 200);
        CHECK(std::fabs(p.value.data[0] - 3.0f) < 1e-6f);
    }
    SECTION("NaN gradient aborts with the parameter name") {
        Parameter p("layer2.conv.W", Tensor({2}, 1.0f));
        p.grad.data[1] = std::nanf("");
        Sgd opt;
        CHECK_THROWS_WITH(opt.step({&p}, {0.1f, 0.9f, 0.0f}), ContainsSubstring("layer2.conv.W"));
    }
}

TEST_CASE("tape: double backward is rejected, backward needs a scalar") {
    Parameter p("p", Tensor({2}, 1.0f));
    Tape t;
    Val loss = t.l1_loss(t.param(p), t.input(Tensor({2}, 0.0f)));
    t.backward(loss);
    CHECK_THROWS_AS(t.backward(loss), std::logic_error);

    Tape t2;
    Val vec = t2.param(p);
    CHECK_THROWS_AS(t2.backward(vec), std::logic_error);
}

TEST_CASE("tape: gradients accumulate additively across reuse") {
    Parameter p("p", Tensor({1}, 2.0f));
    Tape t;
    Val leaf = t.param(p);
    Val doubled = t.add(leaf, leaf);  // d/dp = 2
    Val loss = t.l1_loss(doubled, t.input(Tensor({1}, 0.0f)));
    t.backward(loss);
    CHECK(p.grad.data[0] == Catch::Approx(2.0f));
}
