#pragma once

#include "adaptsr/tensor.hpp"

namespace adaptsr::ops {

struct ConvGeometry {
    int c_in = 0;
    int c_out = 0;
    int k = 1;
    int stride = 1;
    int pad = 0;

    int patch() const { return c_in * k * k; }
    int out_h(int h) const { return (h + 2 * pad - k) / stride + 1; }
    int out_w(int w) const { return (w + 2 * pad - k) / stride + 1; }
};

/// Unfolds zero-padded k×k patches into a (C_in·k·k) × (N·H_out·W_out) column matrix.
void im2col(const Tensor4& x, const ConvGeometry& g, Mat& col);

/// Adjoint of im2col: scatters column gradients back into an N×C_in×H×W tensor.
Tensor4 col2im(const Mat& dcol, const ConvGeometry& g, int n, int h, int w);

/// C × (N·H·W) matrix to N×C×H×W tensor and back.
Tensor4 columns_to_tensor(const Mat& y, int n, int h, int w);
Mat tensor_to_columns(const Tensor4& t);

/// Plain convolution with a flattened C_out × (C_in·k·k) kernel. When `col_out` is
/// non-null the unfolded input is left there for a later backward pass.
Tensor4 conv2d(const Tensor4& x, const Mat& kernel, const Mat* bias, const ConvGeometry& g,
               Mat* col_out = nullptr);

float gelu(float x);
float gelu_grad(float x);

Tensor4 pixel_shuffle(const Tensor4& x, int scale);
Tensor4 pixel_unshuffle(const Tensor4& x, int scale);

/// Reflect-pads the bottom and right edges (no edge repeat, as numpy "reflect").
Tensor4 reflect_pad(const Tensor4& x, int pad_bottom, int pad_right);
Tensor4 reflect_pad_backward(const Tensor4& grad, int h, int w);

Tensor4 crop(const Tensor4& x, int h, int w);
Tensor4 uncrop(const Tensor4& grad, int h, int w);

} // namespace adaptsr::ops
