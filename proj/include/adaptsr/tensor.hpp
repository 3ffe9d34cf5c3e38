#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include <Eigen/Core>

namespace adaptsr {

using Mat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<Mat>;
using ConstMatMap = Eigen::Map<const Mat>;

/// Single image, planar C×H×W float storage.
struct Image {
    int c = 0;
    int h = 0;
    int w = 0;
    std::vector<float> px;

    Image() = default;
    Image(int channels, int height, int width, float fill = 0.0f)
        : c(channels), h(height), w(width),
          px(static_cast<std::size_t>(channels) * height * width, fill) {}

    float& at(int ch, int y, int x) { return px[(static_cast<std::size_t>(ch) * h + y) * w + x]; }
    const float& at(int ch, int y, int x) const { return px[(static_cast<std::size_t>(ch) * h + y) * w + x]; }
    float* plane(int ch) { return px.data() + static_cast<std::size_t>(ch) * h * w; }
    const float* plane(int ch) const { return px.data() + static_cast<std::size_t>(ch) * h * w; }
    bool same_shape(const Image& o) const { return c == o.c && h == o.h && w == o.w; }
};

/// Batched N×C×H×W tensor used by the network layers.
struct Tensor4 {
    int n = 0;
    int c = 0;
    int h = 0;
    int w = 0;
    std::vector<float> data;

    Tensor4() = default;
    Tensor4(int batch, int channels, int height, int width, float fill = 0.0f)
        : n(batch), c(channels), h(height), w(width),
          data(static_cast<std::size_t>(batch) * channels * height * width, fill) {}

    std::size_t size() const { return data.size(); }
    std::size_t plane_size() const { return static_cast<std::size_t>(h) * w; }
    float* plane(int in, int ic) { return data.data() + (static_cast<std::size_t>(in) * c + ic) * plane_size(); }
    const float* plane(int in, int ic) const {
        return data.data() + (static_cast<std::size_t>(in) * c + ic) * plane_size();
    }
    float& at(int in, int ic, int y, int x) { return plane(in, ic)[static_cast<std::size_t>(y) * w + x]; }
    const float& at(int in, int ic, int y, int x) const { return plane(in, ic)[static_cast<std::size_t>(y) * w + x]; }
    bool same_shape(const Tensor4& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }

    static Tensor4 stack(const std::vector<Image>& images);
    Image image(int index) const;
};

/// A named tensor slot of a model. Shape is the logical shape; value is stored as a
/// 2-D matrix (conv kernels flattened to C_out × C_in·k·k, vectors as 1×n).
struct Param {
    Mat value;
    Mat grad;
    bool trainable = true;
    std::vector<int> shape;

    std::size_t numel() const { return static_cast<std::size_t>(value.size()); }
    void zero_grad();
    void ensure_grad();
};

} // namespace adaptsr
