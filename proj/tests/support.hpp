#pragma once

#include <cstdint>
#include <cstring>
#include <random>
#include <string>

#include "adaptsr/backbones.hpp"
#include "adaptsr/tensor.hpp"

namespace adaptsr::testing {

inline std::uint64_t fnv1a(const void* data, std::size_t bytes, std::uint64_t h = 1469598103934665603ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < bytes; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::uint64_t hash_mat(const Mat& m, std::uint64_t h = 1469598103934665603ULL) {
    return fnv1a(m.data(), sizeof(float) * static_cast<std::size_t>(m.size()), h);
}

/// Hash over every parameter whose name does (or does not) end in ".A"/".B".
inline std::uint64_t hash_params(Backbone& model, bool adapters) {
    std::uint64_t h = 1469598103934665603ULL;
    model.visit_params([&](const std::string& name, Param& p) {
        const bool is_adapter = name.size() > 2 && (name.ends_with(".A") || name.ends_with(".B"));
        if (is_adapter == adapters) {
            h = fnv1a(name.data(), name.size(), h);
            h = hash_mat(p.value, h);
        }
    });
    return h;
}

/// Brute-force count of allocated parameters, split by adapter/base.
struct Enumeration {
    std::size_t base = 0;
    std::size_t adapter = 0;
};

inline Enumeration enumerate_params(Backbone& model) {
    Enumeration e;
    model.visit_params([&](const std::string& name, Param& p) {
        const auto n = static_cast<std::size_t>(p.value.size());
        if (name.ends_with(".A") || name.ends_with(".B")) {
            e.adapter += n;
        } else {
            e.base += n;
        }
    });
    return e;
}

inline Mat random_mat(int rows, int cols, std::mt19937_64& rng, float scale = 1.0f) {
    std::normal_distribution<float> n(0.0f, scale);
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    return m;
}

inline Tensor4 random_tensor(int n, int c, int h, int w, std::mt19937_64& rng) {
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    Tensor4 t(n, c, h, w);
    for (float& v : t.data) v = u(rng);
    return t;
}

inline Image random_image(int c, int h, int w, std::mt19937_64& rng) {
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    Image img(c, h, w);
    for (float& v : img.px) v = u(rng);
    return img;
}

inline bool bitwise_equal(const Tensor4& a, const Tensor4& b) {
    return a.same_shape(b) && std::memcmp(a.data.data(), b.data.data(), sizeof(float) * a.data.size()) == 0;
}

inline bool bitwise_equal(const Mat& a, const Mat& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() &&
           std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<std::size_t>(a.size())) == 0;
}

/// max |a-b| / (max |a| + eps)
inline double max_rel_dev(const Tensor4& a, const Tensor4& b, double eps = 1e-12) {
    double diff = 0.0;
    double scale = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        diff = std::max(diff, static_cast<double>(std::abs(a.data[i] - b.data[i])));
        scale = std::max(scale, static_cast<double>(std::abs(a.data[i])));
    }
    return diff / (scale + eps);
}

} // namespace adaptsr::testing
