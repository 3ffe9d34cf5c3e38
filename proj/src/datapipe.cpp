#include "adaptsr/datapipe.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <random>

#include "adaptsr/errors.hpp"
#include "adaptsr/image_io.hpp"
#include "adaptsr/rng.hpp"

namespace adaptsr {

// ---------------------------------------------------------------------------
// config

void DegradationConfig::validate() const {
    if (blur_kernel < 1 || blur_kernel % 2 == 0) {
        throw InvalidConfig("blur kernel size must be a positive odd integer");
    }
    auto ordered = [](const Range& r, const char* what) {
        if (r.lo < 0.0 || r.hi < r.lo) {
            throw InvalidConfig(std::string(what) + " range must satisfy 0 <= lo <= hi");
        }
    };
    ordered(blur_sigma, "blur sigma");
    ordered(noise_sigma, "noise sigma");
    ordered(jpeg_quality, "jpeg quality");
    if (jpeg_quality.lo < 10 || jpeg_quality.hi > 100) {
        throw InvalidConfig("jpeg quality must lie in [10,100]");
    }
    if (factor < 2) {
        throw InvalidConfig("downscale factor must be >= 2");
    }
    if (bicubic_mix < 0.0 || bicubic_mix > 1.0) {
        throw InvalidConfig("bicubic_mix must lie in [0,1]");
    }
}

bool DegradationConfig::is_bicubic_only() const {
    return blur_sigma.hi == 0.0 && noise_sigma.hi == 0.0 && jpeg_quality.lo >= 100;
}

DegradationConfig DegradationConfig::bicubic(int factor) {
    DegradationConfig cfg;
    cfg.blur_sigma = {0.0, 0.0};
    cfg.noise_sigma = {0.0, 0.0};
    cfg.jpeg_quality = {100, 100};
    cfg.second_order = false;
    cfg.factor = factor;
    return cfg;
}

DegradationConfig DegradationConfig::real_world(int factor) {
    DegradationConfig cfg;
    cfg.factor = factor;
    return cfg;
}

// ---------------------------------------------------------------------------
// resampling

double cubic_kernel(double x) {
    constexpr double a = -0.5;
    const double ax = std::abs(x);
    if (ax <= 1.0) {
        return ((a + 2.0) * ax - (a + 3.0)) * ax * ax + 1.0;
    }
    if (ax < 2.0) {
        return ((a * ax - 5.0 * a) * ax + 8.0 * a) * ax - 4.0 * a;
    }
    return 0.0;
}

namespace {

struct Taps {
    std::vector<int> start;
    std::vector<std::vector<double>> weights;  // per output index, indices start..start+len-1 (clamped later)
};

Taps resize_taps(int in, int out, bool antialias) {
    const double scale = static_cast<double>(out) / in;
    const bool widen = antialias && scale < 1.0;
    const double kscale = widen ? scale : 1.0;
    const double support = 2.0 / kscale;
    Taps t;
    t.start.resize(out);
    t.weights.resize(out);
    for (int i = 0; i < out; ++i) {
        const double center = (i + 0.5) / scale - 0.5;
        const int lo = static_cast<int>(std::floor(center - support)) + 1;
        const int hi = static_cast<int>(std::ceil(center + support)) - 1;
        std::vector<double> w;
        double sum = 0.0;
        for (int j = lo; j <= hi; ++j) {
            const double v = cubic_kernel((center - j) * kscale);
            w.push_back(v);
            sum += v;
        }
        for (double& v : w) v /= sum;
        t.start[i] = lo;
        t.weights[i] = std::move(w);
    }
    return t;
}

} // namespace

Image bicubic_resize(const Image& img, int out_h, int out_w, bool antialias) {
    if (out_h < 1 || out_w < 1) {
        throw InvalidConfig("resize target must be at least 1x1");
    }
    const Taps th = resize_taps(img.h, out_h, antialias);
    const Taps tw = resize_taps(img.w, out_w, antialias);
    Image tmp(img.c, img.h, out_w);
    for (int c = 0; c < img.c; ++c) {
        for (int y = 0; y < img.h; ++y) {
            for (int x = 0; x < out_w; ++x) {
                double s = 0.0;
                const auto& w = tw.weights[x];
                for (std::size_t k = 0; k < w.size(); ++k) {
                    const int ix = std::clamp(tw.start[x] + static_cast<int>(k), 0, img.w - 1);
                    s += w[k] * img.at(c, y, ix);
                }
                tmp.at(c, y, x) = static_cast<float>(s);
            }
        }
    }
    Image out(img.c, out_h, out_w);
    for (int c = 0; c < img.c; ++c) {
        for (int y = 0; y < out_h; ++y) {
            const auto& w = th.weights[y];
            for (int x = 0; x < out_w; ++x) {
                double s = 0.0;
                for (std::size_t k = 0; k < w.size(); ++k) {
                    const int iy = std::clamp(th.start[y] + static_cast<int>(k), 0, img.h - 1);
                    s += w[k] * tmp.at(c, iy, x);
                }
                out.at(c, y, x) = static_cast<float>(s);
            }
        }
    }
    return out;
}

Image bicubic_resize(const Image& img, double scale, bool antialias) {
    if (!(scale > 0.0)) {
        throw InvalidConfig("resize scale must be positive");
    }
    return bicubic_resize(img, static_cast<int>(std::lround(img.h * scale)),
                          static_cast<int>(std::lround(img.w * scale)), antialias);
}

Image gaussian_blur(const Image& img, int kernel_size, double sigma) {
    if (kernel_size < 1 || kernel_size % 2 == 0) {
        throw InvalidConfig("blur kernel size must be a positive odd integer");
    }
    if (sigma <= 0.0 || kernel_size == 1) {
        return img;
    }
    const int r = kernel_size / 2;
    std::vector<double> g(kernel_size);
    double sum = 0.0;
    for (int i = 0; i < kernel_size; ++i) {
        g[i] = std::exp(-0.5 * (i - r) * (i - r) / (sigma * sigma));
        sum += g[i];
    }
    for (double& v : g) v /= sum;
    auto reflect = [](int i, int n) {
        if (n == 1) return 0;
        while (i < 0 || i >= n) {
            i = i < 0 ? -i : 2 * (n - 1) - i;
        }
        return i;
    };
    Image tmp(img.c, img.h, img.w);
    Image out(img.c, img.h, img.w);
    for (int c = 0; c < img.c; ++c) {
        for (int y = 0; y < img.h; ++y) {
            for (int x = 0; x < img.w; ++x) {
                double s = 0.0;
                for (int k = 0; k < kernel_size; ++k) s += g[k] * img.at(c, y, reflect(x + k - r, img.w));
                tmp.at(c, y, x) = static_cast<float>(s);
            }
        }
        for (int y = 0; y < img.h; ++y) {
            for (int x = 0; x < img.w; ++x) {
                double s = 0.0;
                for (int k = 0; k < kernel_size; ++k) s += g[k] * tmp.at(c, reflect(y + k - r, img.h), x);
                out.at(c, y, x) = static_cast<float>(s);
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// degradation

namespace {

void clamp01(Image& img) {
    for (float& v : img.px) v = std::clamp(v, 0.0f, 1.0f);
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
    if (hi <= lo) return lo;
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

int uniform_int(std::mt19937_64& rng, double lo, double hi) {
    const int a = static_cast<int>(std::lround(lo));
    const int b = static_cast<int>(std::lround(hi));
    if (b <= a) return a;
    return std::uniform_int_distribution<int>(a, b)(rng);
}

Image degradation_pass(const Image& in, const DegradationConfig& cfg, double strength, bool resize,
                       std::mt19937_64& rng) {
    const double sigma = uniform(rng, cfg.blur_sigma.lo * strength, cfg.blur_sigma.hi * strength);
    Image img = gaussian_blur(in, cfg.blur_kernel, sigma);
    if (resize) {
        img = bicubic_resize(img, in.h / cfg.factor, in.w / cfg.factor, true);
    }
    const double noise = uniform(rng, cfg.noise_sigma.lo * strength, cfg.noise_sigma.hi * strength);
    if (noise > 0.0) {
        std::normal_distribution<float> n(0.0f, static_cast<float>(noise / 255.0));
        for (float& v : img.px) v += n(rng);
    }
    clamp01(img);
    // strength < 1 moves the quality range proportionally closer to 100
    const int quality = uniform_int(rng, 100.0 - (100.0 - cfg.jpeg_quality.lo) * strength,
                                    100.0 - (100.0 - cfg.jpeg_quality.hi) * strength);
    if (quality < 100) {
        img = jpeg_roundtrip(img, quality);
    }
    return img;
}

} // namespace

Image degrade(const Image& hr, const DegradationConfig& cfg, std::uint64_t rng_seed, bool* used_bicubic) {
    if (used_bicubic) *used_bicubic = false;
    cfg.validate();
    if (hr.h % cfg.factor != 0 || hr.w % cfg.factor != 0) {
        throw DimensionError("HR size " + std::to_string(hr.h) + "x" + std::to_string(hr.w) +
                             " is not divisible by factor " + std::to_string(cfg.factor));
    }
    std::mt19937_64 rng(rng_seed);
    if (cfg.bicubic_mix > 0.0 && std::uniform_real_distribution<double>(0.0, 1.0)(rng) < cfg.bicubic_mix) {
        Image lr = bicubic_resize(hr, hr.h / cfg.factor, hr.w / cfg.factor, true);
        clamp01(lr);
        if (used_bicubic) *used_bicubic = true;
        return lr;
    }
    Image lr = degradation_pass(hr, cfg, 1.0, true, rng);
    if (cfg.second_order) {
        lr = degradation_pass(lr, cfg, 0.5, false, rng);
    }
    return lr;
}

// ---------------------------------------------------------------------------
// synthetic corpus

namespace {

struct Rgb {
    double v[3];
};

Rgb random_color(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    return Rgb{{u(rng), u(rng), u(rng)}};
}

double luma(const Rgb& c) {
    return (65.481 * c.v[0] + 128.553 * c.v[1] + 24.966 * c.v[2]) / 255.0;
}

/// Two colors whose luma differs by at least `min_dy`, so two-tone patterns keep luma structure.
std::pair<Rgb, Rgb> contrasting_colors(std::mt19937_64& rng, double min_dy = 0.2) {
    const Rgb a = random_color(rng);
    Rgb b = random_color(rng);
    while (std::abs(luma(a) - luma(b)) < min_dy) b = random_color(rng);
    return {a, b};
}

void normalize_range(Image& img) {
    const auto [mn, mx] = std::minmax_element(img.px.begin(), img.px.end());
    const float lo = *mn;
    const float span = std::max(*mx - lo, 1e-6f);
    for (float& v : img.px) v = (v - lo) / span;
}

Image gratings(int size, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Image img(3, size, size);
    for (int k = 0; k < 3; ++k) {
        const double freq = 0.02 + 0.1 * u(rng);
        const double theta = M_PI * u(rng);
        const double phase = 2.0 * M_PI * u(rng);
        const Rgb color = random_color(rng);
        const double fx = freq * std::cos(theta);
        const double fy = freq * std::sin(theta);
        for (int y = 0; y < size; ++y) {
            for (int x = 0; x < size; ++x) {
                const double s = std::sin(2.0 * M_PI * (fx * x + fy * y) + phase);
                for (int c = 0; c < 3; ++c) img.at(c, y, x) += static_cast<float>(s * (color.v[c] - 0.5));
            }
        }
    }
    normalize_range(img);
    return img;
}

Image stripes(int size, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double period = 8.0 + 24.0 * u(rng);
    const double theta = M_PI * u(rng);
    const double duty = 0.3 + 0.4 * u(rng);
    const auto [a, b] = contrasting_colors(rng);
    Image img(3, size, size);
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const double t = (x * std::cos(theta) + y * std::sin(theta)) / period;
            const bool on = (t - std::floor(t)) < duty;
            for (int c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>(on ? a.v[c] : b.v[c]);
        }
    }
    return img;
}

Image checker(int size, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double cell = 6.0 + 18.0 * u(rng);
    const double theta = 0.5 * M_PI * u(rng);
    const auto [a, b] = contrasting_colors(rng);
    Image img(3, size, size);
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const double px = (x * std::cos(theta) + y * std::sin(theta)) / cell;
            const double py = (-x * std::sin(theta) + y * std::cos(theta)) / cell;
            const bool on = ((static_cast<long>(std::floor(px)) + static_cast<long>(std::floor(py))) & 1L) != 0;
            for (int c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>(on ? a.v[c] : b.v[c]);
        }
    }
    return img;
}

Image filtered_noise(int size, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<float> n(0.0f, 1.0f);
    const double sigma = 0.6 + 1.4 * u(rng);
    Image img(3, size, size);
    for (float& v : img.px) v = n(rng);
    const int k = 2 * static_cast<int>(std::ceil(3.0 * sigma)) + 1;
    img = gaussian_blur(img, k, sigma);
    // mild channel correlation so the result is not pure chroma noise
    const double mix = 0.3 + 0.6 * u(rng);
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const float mean = (img.at(0, y, x) + img.at(1, y, x) + img.at(2, y, x)) / 3.0f;
            for (int c = 0; c < 3; ++c) {
                img.at(c, y, x) = static_cast<float>(mix * mean + (1.0 - mix) * img.at(c, y, x));
            }
        }
    }
    normalize_range(img);
    return img;
}

Image gradient(int size, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const auto [a, b] = contrasting_colors(rng);
    const double theta = 2.0 * M_PI * u(rng);
    Image img(3, size, size);
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const double t = 0.5 + ((x - size / 2.0) * std::cos(theta) + (y - size / 2.0) * std::sin(theta)) /
                                       (std::sqrt(2.0) * size);
            for (int c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>(a.v[c] + t * (b.v[c] - a.v[c]));
        }
    }
    return img;
}

Image shapes(int size, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Image img = gradient(size, rng);
    const int count = 6 + static_cast<int>(10 * u(rng));
    for (int s = 0; s < count; ++s) {
        const Rgb color = random_color(rng);
        const double cx = size * u(rng);
        const double cy = size * u(rng);
        const double r = size * (0.03 + 0.15 * u(rng));
        const bool circle = u(rng) < 0.5;
        for (int y = 0; y < size; ++y) {
            for (int x = 0; x < size; ++x) {
                const double dx = x - cx;
                const double dy = y - cy;
                const bool inside = circle ? dx * dx + dy * dy <= r * r : std::abs(dx) <= r && std::abs(dy) <= 0.6 * r;
                if (inside) {
                    for (int c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>(color.v[c]);
                }
            }
        }
    }
    return img;
}

} // namespace

Image make_pattern(PatternKind kind, int size, std::uint64_t seed) {
    if (size < 1) {
        throw InvalidConfig("pattern size must be positive");
    }
    std::mt19937_64 rng(seed);
    switch (kind) {
        case PatternKind::gratings: return gratings(size, rng);
        case PatternKind::stripes: return stripes(size, rng);
        case PatternKind::checker: return checker(size, rng);
        case PatternKind::filtered_noise: return filtered_noise(size, rng);
        case PatternKind::gradient: return gradient(size, rng);
        case PatternKind::shapes: return shapes(size, rng);
    }
    throw InvalidConfig("unknown pattern kind");
}

std::vector<Image> make_synthetic_corpus(int n, int size, std::uint64_t seed) {
    if (n < 1) {
        throw InvalidConfig("corpus size must be >= 1");
    }
    constexpr PatternKind kCycle[] = {PatternKind::gratings, PatternKind::stripes, PatternKind::checker,
                                      PatternKind::filtered_noise, PatternKind::shapes};
    std::vector<Image> corpus;
    corpus.reserve(n);
    for (int i = 0; i < n; ++i) {
        corpus.push_back(make_pattern(kCycle[i % 5], size, derive_seed(seed, {static_cast<std::uint64_t>(i)})));
    }
    return corpus;
}

std::vector<Image> load_corpus_dir(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) {
        throw IoError(dir.string() + " is not a directory");
    }
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".png") {
            files.push_back(entry.path());
        }
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) {
        throw IoError("no PNG files in " + dir.string());
    }
    std::vector<Image> corpus;
    corpus.reserve(files.size());
    for (const auto& f : files) {
        corpus.push_back(read_png(f));
    }
    return corpus;
}

// ---------------------------------------------------------------------------
// sampling

void PatchSampler::validate(int factor) const {
    if (patch_size < 1 || patch_size % factor != 0) {
        throw InvalidConfig("patch size " + std::to_string(patch_size) + " must be a positive multiple of " +
                            std::to_string(factor));
    }
    if (per_image < 0) {
        throw InvalidConfig("per_image must be non-negative");
    }
}

namespace {

Image crop_patch(const Image& img, int y0, int x0, int size) {
    Image out(img.c, size, size);
    for (int c = 0; c < img.c; ++c) {
        for (int y = 0; y < size; ++y) {
            const auto src = (static_cast<std::size_t>(c) * img.h + y0 + y) * img.w + x0;
            std::copy_n(img.px.begin() + static_cast<std::ptrdiff_t>(src), size, &out.at(c, y, 0));
        }
    }
    return out;
}

} // namespace

std::vector<TrainingPair> sample_pairs(const std::vector<Image>& corpus, const PatchSampler& sampler,
                                       const DegradationConfig& cfg, int n_batch, std::uint64_t batch_index,
                                       int workers) {
    cfg.validate();
    sampler.validate(cfg.factor);
    if (corpus.empty()) {
        throw InvalidConfig("empty corpus");
    }
    for (const auto& img : corpus) {
        if (img.h < sampler.patch_size || img.w < sampler.patch_size) {
            throw DimensionError("patch size " + std::to_string(sampler.patch_size) +
                                 " is larger than a corpus image");
        }
    }
    std::vector<TrainingPair> pairs(n_batch);
    auto make = [&](int j) {
        const auto jj = static_cast<std::uint64_t>(j);
        std::mt19937_64 rng(derive_seed(sampler.seed, {batch_index, jj}));
        TrainingPair& p = pairs[j];
        const auto n = static_cast<int>(corpus.size());
        if (sampler.per_image > 0) {
            p.image_index = static_cast<int>(((batch_index * n_batch + jj) / sampler.per_image) % n);
        } else {
            p.image_index = std::uniform_int_distribution<int>(0, n - 1)(rng);
        }
        const Image& img = corpus[p.image_index];
        p.y = std::uniform_int_distribution<int>(0, img.h - sampler.patch_size)(rng);
        p.x = std::uniform_int_distribution<int>(0, img.w - sampler.patch_size)(rng);
        p.hr = crop_patch(img, p.y, p.x, sampler.patch_size);
        p.degrade_seed = derive_seed(cfg.seed, {batch_index, jj});
        p.lr = degrade(p.hr, cfg, p.degrade_seed, &p.bicubic);
    };
    if (workers <= 1 || n_batch < 2) {
        for (int j = 0; j < n_batch; ++j) make(j);
    } else {
        std::vector<std::future<void>> jobs;
        const int w = std::min(workers, n_batch);
        for (int t = 0; t < w; ++t) {
            jobs.push_back(std::async(std::launch::async, [&, t] {
                for (int j = t; j < n_batch; j += w) make(j);
            }));
        }
        for (auto& job : jobs) job.get();
    }
    return pairs;
}

} // namespace adaptsr
