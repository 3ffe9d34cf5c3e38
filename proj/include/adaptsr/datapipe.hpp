#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "adaptsr/tensor.hpp"

namespace adaptsr {

struct Range {
    double lo = 0.0;
    double hi = 0.0;
};

/// blur → bicubic ↓factor → gaussian noise → JPEG, optionally followed by a lighter
/// second pass without the resize.
struct DegradationConfig {
    int blur_kernel = 7;
    Range blur_sigma{0.2, 2.0};
    int factor = 4;
    /// Noise standard deviation in 0–255 units.
    Range noise_sigma{1.0, 10.0};
    Range jpeg_quality{60, 95};
    bool second_order = true;
    std::uint64_t seed = 0;
    /// Probability that a sampled pair uses the pure bicubic pipeline instead.
    double bicubic_mix = 0.0;

    void validate() const;
    bool is_bicubic_only() const;

    /// Degenerate pipeline: plain bicubic downsampling (the source domain).
    static DegradationConfig bicubic(int factor);
    /// Default compound-degradation target domain.
    static DegradationConfig real_world(int factor);
};

/// Catmull-Rom cubic (a = −0.5).
double cubic_kernel(double x);

/// Separable bicubic resize to an explicit size; antialiased (kernel widened) when downscaling.
Image bicubic_resize(const Image& img, int out_h, int out_w, bool antialias = true);
/// Resize by a scale factor; output dims are round(h·scale) × round(w·scale).
Image bicubic_resize(const Image& img, double scale, bool antialias = true);

/// Isotropic Gaussian blur, reflect-101 borders; sigma 0 is the identity.
Image gaussian_blur(const Image& img, int kernel_size, double sigma);

/// Runs the degradation pipeline; every random draw comes from `rng_seed`.
Image degrade(const Image& hr, const DegradationConfig& cfg, std::uint64_t rng_seed, bool* used_bicubic = nullptr);

enum class PatternKind { gratings, stripes, checker, filtered_noise, gradient, shapes };

Image make_pattern(PatternKind kind, int size, std::uint64_t seed);
/// n seeded procedural images cycling through all pattern kinds; values in [0,1].
std::vector<Image> make_synthetic_corpus(int n, int size, std::uint64_t seed);

/// Every *.png in `dir`, in lexicographic filename order.
std::vector<Image> load_corpus_dir(const std::filesystem::path& dir);

struct PatchSampler {
    int patch_size = 64;
    /// Consecutive patches drawn from the same image; 0 picks each image at random.
    int per_image = 0;
    std::uint64_t seed = 0;

    void validate(int factor) const;
};

struct TrainingPair {
    Image lr;
    Image hr;
    std::uint64_t degrade_seed = 0;
    int image_index = 0;
    int y = 0;
    int x = 0;
    bool bicubic = false;
};

/// One batch of random HR crops and their degraded LR counterparts. `batch_index`
/// selects the counter-derived random streams, so any batch can be regenerated alone.
std::vector<TrainingPair> sample_pairs(const std::vector<Image>& corpus, const PatchSampler& sampler,
                                       const DegradationConfig& cfg, int n_batch, std::uint64_t batch_index = 0,
                                       int workers = 1);

} // namespace adaptsr
