#include "adaptsr/metrics.hpp"

#include <cmath>
#include <limits>
#include <vector>

#include "adaptsr/errors.hpp"

namespace adaptsr {

void MetricConfig::validate() const {
    if (crop_border < 0) {
        throw InvalidConfig("crop_border must be non-negative");
    }
    if (!(dynamic_range > 0.0)) {
        throw InvalidConfig("dynamic_range must be positive");
    }
    if (ssim.window < 1 || ssim.window % 2 == 0) {
        throw InvalidConfig("ssim window must be a positive odd integer");
    }
    if (!(ssim.sigma > 0.0) || !(ssim.k1 > 0.0) || !(ssim.k2 > 0.0)) {
        throw InvalidConfig("ssim constants must be positive");
    }
}

Image rgb_to_y(const Image& rgb) {
    if (rgb.c != 3) {
        throw DimensionError("rgb_to_y expects 3 channels, got " + std::to_string(rgb.c));
    }
    Image y(1, rgb.h, rgb.w);
    const std::size_t n = static_cast<std::size_t>(rgb.h) * rgb.w;
    const float* r = rgb.plane(0);
    const float* g = rgb.plane(1);
    const float* b = rgb.plane(2);
    for (std::size_t i = 0; i < n; ++i) {
        const double v = 65.481 * r[i] + 128.553 * g[i] + 24.966 * b[i] + 16.0;
        y.px[i] = static_cast<float>(v / 255.0);
    }
    return y;
}

namespace {

/// Double-precision planes after luma conversion and cropping.
struct Prepared {
    int c = 0;
    int h = 0;
    int w = 0;
    std::vector<double> px;

    const double* plane(int ch) const { return px.data() + static_cast<std::size_t>(ch) * h * w; }
};

Prepared prepare(const Image& img, const MetricConfig& cfg) {
    const double offset = 16.0 / 255.0;
    const bool to_y = cfg.use_y_channel && img.c == 3;
    const int border = cfg.crop_border;
    Prepared p;
    p.c = to_y ? 1 : img.c;
    p.h = img.h - 2 * border;
    p.w = img.w - 2 * border;
    if (p.h <= 0 || p.w <= 0) {
        throw DimensionError("image is empty after cropping " + std::to_string(border) + " border pixels");
    }
    p.px.resize(static_cast<std::size_t>(p.c) * p.h * p.w);
    std::size_t k = 0;
    for (int ch = 0; ch < p.c; ++ch) {
        for (int y = border; y < img.h - border; ++y) {
            for (int x = border; x < img.w - border; ++x) {
                if (to_y) {
                    p.px[k++] = (65.481 * img.at(0, y, x) + 128.553 * img.at(1, y, x) + 24.966 * img.at(2, y, x)) /
                                    255.0 +
                                offset;
                } else {
                    p.px[k++] = img.at(ch, y, x);
                }
            }
        }
    }
    return p;
}

void check_pair(const Image& a, const Image& b) {
    if (!a.same_shape(b)) {
        throw DimensionError("metric inputs differ in shape");
    }
}

std::vector<double> gaussian_window(int size, double sigma) {
    std::vector<double> g(size);
    const int r = size / 2;
    double sum = 0.0;
    for (int i = 0; i < size; ++i) {
        g[i] = std::exp(-0.5 * (i - r) * (i - r) / (sigma * sigma));
        sum += g[i];
    }
    for (double& v : g) {
        v /= sum;
    }
    return g;
}

/// Separable "valid" filtering with a normalized 1-D kernel.
std::vector<double> filter_valid(const double* src, int h, int w, const std::vector<double>& g) {
    const int k = static_cast<int>(g.size());
    const int oh = h - k + 1;
    const int ow = w - k + 1;
    std::vector<double> tmp(static_cast<std::size_t>(h) * ow);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < ow; ++x) {
            double s = 0.0;
            for (int i = 0; i < k; ++i) s += g[i] * src[static_cast<std::size_t>(y) * w + x + i];
            tmp[static_cast<std::size_t>(y) * ow + x] = s;
        }
    }
    std::vector<double> out(static_cast<std::size_t>(oh) * ow);
    for (int y = 0; y < oh; ++y) {
        for (int x = 0; x < ow; ++x) {
            double s = 0.0;
            for (int i = 0; i < k; ++i) s += g[i] * tmp[static_cast<std::size_t>(y + i) * ow + x];
            out[static_cast<std::size_t>(y) * ow + x] = s;
        }
    }
    return out;
}

} // namespace

double psnr(const Image& a, const Image& b, const MetricConfig& cfg) {
    check_pair(a, b);
    cfg.validate();
    const Prepared pa = prepare(a, cfg);
    const Prepared pb = prepare(b, cfg);
    double sq = 0.0;
    for (std::size_t i = 0; i < pa.px.size(); ++i) {
        const double d = pa.px[i] - pb.px[i];
        sq += d * d;
    }
    const double mse = sq / static_cast<double>(pa.px.size());
    if (mse == 0.0) {
        return std::numeric_limits<double>::infinity();
    }
    return 10.0 * std::log10(cfg.dynamic_range * cfg.dynamic_range / mse);
}

double ssim(const Image& a, const Image& b, const MetricConfig& cfg) {
    check_pair(a, b);
    cfg.validate();
    const Prepared pa = prepare(a, cfg);
    const Prepared pb = prepare(b, cfg);
    const int win = cfg.ssim.window;
    if (pa.h < win || pa.w < win) {
        throw DimensionError("image smaller than the SSIM window");
    }
    const double c1 = std::pow(cfg.ssim.k1 * cfg.dynamic_range, 2);
    const double c2 = std::pow(cfg.ssim.k2 * cfg.dynamic_range, 2);
    const auto g = gaussian_window(win, cfg.ssim.sigma);
    const std::size_t n = static_cast<std::size_t>(pa.h) * pa.w;

    double total = 0.0;
    for (int ch = 0; ch < pa.c; ++ch) {
        const double* x = pa.plane(ch);
        const double* y = pb.plane(ch);
        std::vector<double> xx(n), yy(n), xy(n);
        for (std::size_t i = 0; i < n; ++i) {
            xx[i] = x[i] * x[i];
            yy[i] = y[i] * y[i];
            xy[i] = x[i] * y[i];
        }
        const auto mu_x = filter_valid(x, pa.h, pa.w, g);
        const auto mu_y = filter_valid(y, pa.h, pa.w, g);
        const auto e_xx = filter_valid(xx.data(), pa.h, pa.w, g);
        const auto e_yy = filter_valid(yy.data(), pa.h, pa.w, g);
        const auto e_xy = filter_valid(xy.data(), pa.h, pa.w, g);
        double sum = 0.0;
        for (std::size_t i = 0; i < mu_x.size(); ++i) {
            const double mx2 = mu_x[i] * mu_x[i];
            const double my2 = mu_y[i] * mu_y[i];
            const double mxy = mu_x[i] * mu_y[i];
            const double vx = e_xx[i] - mx2;
            const double vy = e_yy[i] - my2;
            const double cov = e_xy[i] - mxy;
            sum += ((2.0 * mxy + c1) * (2.0 * cov + c2)) / ((mx2 + my2 + c1) * (vx + vy + c2));
        }
        total += sum / static_cast<double>(mu_x.size());
    }
    return total / pa.c;
}

} // namespace adaptsr
