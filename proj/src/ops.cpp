#include "adaptsr/ops.hpp"

#include <cmath>
#include <cstring>

#include "adaptsr/errors.hpp"

namespace adaptsr::ops {

void im2col(const Tensor4& x, const ConvGeometry& g, Mat& col) {
    if (x.c != g.c_in) {
        throw DimensionError("conv expects " + std::to_string(g.c_in) + " input channels, got " +
                             std::to_string(x.c));
    }
    const int oh = g.out_h(x.h);
    const int ow = g.out_w(x.w);
    if (oh <= 0 || ow <= 0) {
        throw DimensionError("conv input smaller than kernel");
    }
    const std::ptrdiff_t per_image = static_cast<std::ptrdiff_t>(oh) * ow;
    col.resize(g.patch(), per_image * x.n);
    for (int c = 0; c < g.c_in; ++c) {
        for (int ki = 0; ki < g.k; ++ki) {
            for (int kj = 0; kj < g.k; ++kj) {
                float* row = col.row((c * g.k + ki) * g.k + kj).data();
                for (int n = 0; n < x.n; ++n) {
                    const float* src = x.plane(n, c);
                    float* dst = row + n * per_image;
                    for (int oy = 0; oy < oh; ++oy) {
                        const int iy = oy * g.stride - g.pad + ki;
                        float* out = dst + static_cast<std::ptrdiff_t>(oy) * ow;
                        if (iy < 0 || iy >= x.h) {
                            std::memset(out, 0, sizeof(float) * ow);
                            continue;
                        }
                        const float* in_row = src + static_cast<std::ptrdiff_t>(iy) * x.w;
                        if (g.stride == 1) {
                            const int x0 = kj - g.pad;
                            // valid ox range: 0 <= ox + x0 < w
                            const int lo = std::max(0, -x0);
                            const int hi = std::min(ow, x.w - x0);
                            for (int ox = 0; ox < lo; ++ox) out[ox] = 0.0f;
                            if (hi > lo) std::memcpy(out + lo, in_row + lo + x0, sizeof(float) * (hi - lo));
                            for (int ox = std::max(hi, lo); ox < ow; ++ox) out[ox] = 0.0f;
                        } else {
                            for (int ox = 0; ox < ow; ++ox) {
                                const int ix = ox * g.stride - g.pad + kj;
                                out[ox] = (ix >= 0 && ix < x.w) ? in_row[ix] : 0.0f;
                            }
                        }
                    }
                }
            }
        }
    }
}

Tensor4 col2im(const Mat& dcol, const ConvGeometry& g, int n, int h, int w) {
    const int oh = g.out_h(h);
    const int ow = g.out_w(w);
    const std::ptrdiff_t per_image = static_cast<std::ptrdiff_t>(oh) * ow;
    Tensor4 dx(n, g.c_in, h, w);
    for (int c = 0; c < g.c_in; ++c) {
        for (int ki = 0; ki < g.k; ++ki) {
            for (int kj = 0; kj < g.k; ++kj) {
                const float* row = dcol.row((c * g.k + ki) * g.k + kj).data();
                for (int b = 0; b < n; ++b) {
                    float* dst = dx.plane(b, c);
                    const float* src = row + b * per_image;
                    for (int oy = 0; oy < oh; ++oy) {
                        const int iy = oy * g.stride - g.pad + ki;
                        if (iy < 0 || iy >= h) continue;
                        float* out_row = dst + static_cast<std::ptrdiff_t>(iy) * w;
                        const float* in = src + static_cast<std::ptrdiff_t>(oy) * ow;
                        for (int ox = 0; ox < ow; ++ox) {
                            const int ix = ox * g.stride - g.pad + kj;
                            if (ix >= 0 && ix < w) out_row[ix] += in[ox];
                        }
                    }
                }
            }
        }
    }
    return dx;
}

Tensor4 columns_to_tensor(const Mat& y, int n, int h, int w) {
    const int c = static_cast<int>(y.rows());
    Tensor4 t(n, c, h, w);
    const std::size_t hw = t.plane_size();
    for (int b = 0; b < n; ++b) {
        for (int ch = 0; ch < c; ++ch) {
            std::memcpy(t.plane(b, ch), y.row(ch).data() + b * hw, sizeof(float) * hw);
        }
    }
    return t;
}

Mat tensor_to_columns(const Tensor4& t) {
    const std::size_t hw = t.plane_size();
    Mat y(t.c, static_cast<Eigen::Index>(hw * t.n));
    for (int b = 0; b < t.n; ++b) {
        for (int ch = 0; ch < t.c; ++ch) {
            std::memcpy(y.row(ch).data() + b * hw, t.plane(b, ch), sizeof(float) * hw);
        }
    }
    return y;
}

Tensor4 conv2d(const Tensor4& x, const Mat& kernel, const Mat* bias, const ConvGeometry& g,
               Mat* col_out) {
    Mat local;
    Mat& col = col_out ? *col_out : local;
    im2col(x, g, col);
    Mat y = kernel * col;
    if (bias) {
        y.colwise() += bias->row(0).transpose();
    }
    return columns_to_tensor(y, x.n, g.out_h(x.h), g.out_w(x.w));
}

float gelu(float x) {
    return 0.5f * x * (1.0f + std::erf(x * static_cast<float>(M_SQRT1_2)));
}

float gelu_grad(float x) {
    const float cdf = 0.5f * (1.0f + std::erf(x * static_cast<float>(M_SQRT1_2)));
    const float pdf = std::exp(-0.5f * x * x) * static_cast<float>(0.5 * M_2_SQRTPI * M_SQRT1_2);
    return cdf + x * pdf;
}

Tensor4 pixel_shuffle(const Tensor4& x, int scale) {
    const int s2 = scale * scale;
    if (x.c % s2 != 0) {
        throw DimensionError("pixel shuffle needs channels divisible by scale^2");
    }
    Tensor4 out(x.n, x.c / s2, x.h * scale, x.w * scale);
    for (int b = 0; b < x.n; ++b) {
        for (int c = 0; c < out.c; ++c) {
            for (int i = 0; i < scale; ++i) {
                for (int j = 0; j < scale; ++j) {
                    const float* src = x.plane(b, c * s2 + i * scale + j);
                    float* dst = out.plane(b, c);
                    for (int y = 0; y < x.h; ++y) {
                        for (int xx = 0; xx < x.w; ++xx) {
                            dst[static_cast<std::size_t>(y * scale + i) * out.w + xx * scale + j] =
                                src[static_cast<std::size_t>(y) * x.w + xx];
                        }
                    }
                }
            }
        }
    }
    return out;
}

Tensor4 pixel_unshuffle(const Tensor4& x, int scale) {
    const int s2 = scale * scale;
    Tensor4 out(x.n, x.c * s2, x.h / scale, x.w / scale);
    for (int b = 0; b < x.n; ++b) {
        for (int c = 0; c < x.c; ++c) {
            for (int i = 0; i < scale; ++i) {
                for (int j = 0; j < scale; ++j) {
                    float* dst = out.plane(b, c * s2 + i * scale + j);
                    const float* src = x.plane(b, c);
                    for (int y = 0; y < out.h; ++y) {
                        for (int xx = 0; xx < out.w; ++xx) {
                            dst[static_cast<std::size_t>(y) * out.w + xx] =
                                src[static_cast<std::size_t>(y * scale + i) * x.w + xx * scale + j];
                        }
                    }
                }
            }
        }
    }
    return out;
}

namespace {

int reflect_index(int i, int n) {
    return i < n ? i : 2 * (n - 1) - i;
}

} // namespace

Tensor4 reflect_pad(const Tensor4& x, int pad_bottom, int pad_right) {
    if (pad_bottom == 0 && pad_right == 0) {
        return x;
    }
    if (pad_bottom >= x.h || pad_right >= x.w) {
        throw DimensionError("reflect padding must be smaller than the input size");
    }
    Tensor4 out(x.n, x.c, x.h + pad_bottom, x.w + pad_right);
    for (int b = 0; b < x.n; ++b) {
        for (int c = 0; c < x.c; ++c) {
            for (int y = 0; y < out.h; ++y) {
                for (int xx = 0; xx < out.w; ++xx) {
                    out.at(b, c, y, xx) = x.at(b, c, reflect_index(y, x.h), reflect_index(xx, x.w));
                }
            }
        }
    }
    return out;
}

Tensor4 reflect_pad_backward(const Tensor4& grad, int h, int w) {
    if (grad.h == h && grad.w == w) {
        return grad;
    }
    Tensor4 out(grad.n, grad.c, h, w);
    for (int b = 0; b < grad.n; ++b) {
        for (int c = 0; c < grad.c; ++c) {
            for (int y = 0; y < grad.h; ++y) {
                for (int xx = 0; xx < grad.w; ++xx) {
                    out.at(b, c, reflect_index(y, h), reflect_index(xx, w)) += grad.at(b, c, y, xx);
                }
            }
        }
    }
    return out;
}

Tensor4 crop(const Tensor4& x, int h, int w) {
    if (x.h == h && x.w == w) {
        return x;
    }
    Tensor4 out(x.n, x.c, h, w);
    for (int b = 0; b < x.n; ++b) {
        for (int c = 0; c < x.c; ++c) {
            for (int y = 0; y < h; ++y) {
                std::memcpy(&out.at(b, c, y, 0), &x.at(b, c, y, 0), sizeof(float) * w);
            }
        }
    }
    return out;
}

Tensor4 uncrop(const Tensor4& grad, int h, int w) {
    if (grad.h == h && grad.w == w) {
        return grad;
    }
    Tensor4 out(grad.n, grad.c, h, w);
    for (int b = 0; b < grad.n; ++b) {
        for (int c = 0; c < grad.c; ++c) {
            for (int y = 0; y < grad.h; ++y) {
                std::memcpy(&out.at(b, c, y, 0), &grad.at(b, c, y, 0), sizeof(float) * grad.w);
            }
        }
    }
    return out;
}

} // namespace adaptsr::ops
