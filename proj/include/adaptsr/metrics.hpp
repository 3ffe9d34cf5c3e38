#pragma once

#include "adaptsr/tensor.hpp"

namespace adaptsr {

struct SsimParams {
    int window = 11;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
};

struct MetricConfig {
    bool use_y_channel = true;
    int crop_border = 0;
    /// Peak value L; 1.0 for images in [0,1].
    double dynamic_range = 1.0;
    SsimParams ssim;

    void validate() const;
};

/// PSNR reported in CSV logs for identical images (psnr() itself returns +inf).
inline constexpr double kPsnrCap = 99.0;

/// BT.601 studio-swing luma of an RGB image in [0,1]: (65.481R + 128.553G + 24.966B + 16)/255.
Image rgb_to_y(const Image& rgb);

/// 10·log10(L²/MSE) after optional luma conversion and border crop; +inf when identical.
double psnr(const Image& a, const Image& b, const MetricConfig& cfg);

/// Mean of the Gaussian-weighted SSIM map (valid region), averaged over channels.
double ssim(const Image& a, const Image& b, const MetricConfig& cfg);

} // namespace adaptsr
