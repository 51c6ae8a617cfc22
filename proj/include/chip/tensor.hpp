// Dense row-major f32 tensor plus a deterministic RNG whose output does not
// depend on the standard library's distribution implementations.
#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace chip {

struct Tensor {
    std::vector<int> shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s, float fill = 0.0f) : shape(std::move(s)) {
        data.assign(static_cast<std::size_t>(numel_of(shape)), fill);
    }

    static std::int64_t numel_of(const std::vector<int>& s) {
        std::int64_t n = 1;
        for (int d : s) {
            if (d <= 0) throw std::invalid_argument("tensor dims must be positive");
            n *= d;
        }
        return n;
    }

    static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape); }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    std::string shape_str() const {
        std::ostringstream os;
        os << '(';
        for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
        os << ')';
        return os.str();
    }

    Tensor reshaped(std::vector<int> s) const {
        if (numel_of(s) != numel())
            throw std::invalid_argument("reshape " + shape_str() + " to incompatible size");
        Tensor out;
        out.shape = std::move(s);
        out.data = data;
        return out;
    }
};

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(what) + ": shape mismatch " + a.shape_str() +
                                    " vs " + b.shape_str());
}

// mt19937_64 with hand-rolled float mappings (Box-Muller for normals) so that
// seeded runs reproduce bit-for-bit on any platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    double uniform() {  // [0, 1)
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n) without std::uniform_int_distribution.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw std::invalid_argument("below(0)");
        std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        for (;;) {
            std::uint64_t v = engine_();
            if (v < limit) return v % n;
        }
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0, u2 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        u2 = uniform();
        double mag = std::sqrt(-2.0 * std::log(u1));
        spare_ = mag * std::sin(2.0 * M_PI * u2);
        have_spare_ = true;
        return mag * std::cos(2.0 * M_PI * u2);
    }

    void fill_normal(Tensor& t, double mean = 0.0, double stddev = 1.0) {
        for (float& v : t.data) v = static_cast<float>(mean + stddev * normal());
    }

    void fill_uniform(Tensor& t, double lo, double hi) {
        for (float& v : t.data) v = static_cast<float>(uniform(lo, hi));
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

inline void clamp_inplace(Tensor& t, float lo, float hi) {
    for (float& v : t.data) v = std::min(hi, std::max(lo, v));
}

}  // namespace chip
