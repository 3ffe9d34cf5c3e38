#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "adaptsr/ops.hpp"
#include "adaptsr/tensor.hpp"

namespace adaptsr {

struct LoraConfig {
    int rank = 8;
    double alpha = 1.0;
    double init_std = 0.02;
    std::uint64_t seed = 0;

    void validate() const;
};

/// s = alpha / rank. Throws InvalidConfig for nonpositive inputs.
double effective_scale(double alpha, int rank);

enum class MergeState { wrapped, merged };

/// The trainable pair (A: r×fan_in, B: fan_out×r) shared by linear and conv adapters,
/// plus the merge bookkeeping. B starts at zero so the adapter is an exact no-op.
class LowRankFactors {
public:
    LowRankFactors(int fan_in, int fan_out, const LoraConfig& cfg);

    Param A;
    Param B;

    int rank() const { return rank_; }
    double alpha() const { return alpha_; }
    float scale() const { return scale_; }
    void set_alpha(double alpha);

    MergeState state() const { return state_; }
    const std::optional<Mat>& cached_delta() const { return cached_delta_; }

    /// s·B·A, shape fan_out × fan_in.
    Mat delta() const;

    /// Folds the delta into `base` in place and caches it; requires state wrapped.
    void merge_into(Mat& base);
    /// Subtracts the cached delta from `base`; requires state merged.
    void unmerge_from(Mat& base);

    /// True when rank ≥ min(fan_in, fan_out), i.e. the factorization is not low-rank.
    bool over_rank() const { return rank_ >= std::min(fan_in_, fan_out_); }

    std::size_t param_count() const { return A.numel() + B.numel(); }

private:
    int fan_in_;
    int fan_out_;
    int rank_;
    double alpha_;
    float scale_;
    MergeState state_ = MergeState::wrapped;
    std::optional<Mat> cached_delta_;
};

/// y = x·W0ᵀ + s·(x·Aᵀ)·Bᵀ + b with W0 and b frozen.
class LinearLoraAdapter {
public:
    LinearLoraAdapter(Mat base_weight, std::optional<Mat> base_bias, const LoraConfig& cfg);

    Param base_weight;
    std::optional<Param> base_bias;
    LowRankFactors lora;

    int d_in() const { return static_cast<int>(base_weight.value.cols()); }
    int d_out() const { return static_cast<int>(base_weight.value.rows()); }

    Mat forward(const Mat& x) const;
    /// Accumulates grads into A/B (and into the base when marked trainable); returns dL/dx.
    Mat backward(const Mat& x, const Mat& dy);

    const Mat& merge();
    void unmerge();
};

/// Conv adapter over the flattened kernel: reshape(B·A) is a C_out×C_in×k×k kernel.
class ConvLoraAdapter {
public:
    struct Cache {
        Mat col;
        Mat a_col;
        int n = 0;
        int h = 0;
        int w = 0;
    };

    ConvLoraAdapter(Mat base_kernel, std::optional<Mat> base_bias, const ops::ConvGeometry& geom,
                    const LoraConfig& cfg);

    Param base_kernel;
    std::optional<Param> base_bias;
    LowRankFactors lora;
    ops::ConvGeometry geom;

    /// conv(W0, x) + s·pointwise(B, conv(reshape(A), x)) + bias.
    Tensor4 forward(const Tensor4& x, Cache* cache = nullptr) const;
    Tensor4 backward(const Cache& cache, const Tensor4& dy);

    const Mat& merge();
    void unmerge();
};

LinearLoraAdapter make_linear_adapter(const Mat& base_weight, const std::optional<Mat>& base_bias,
                                      const LoraConfig& cfg);
Mat linear_forward(const LinearLoraAdapter& adapter, const Mat& x);
Tensor4 conv_forward(const ConvLoraAdapter& adapter, const Tensor4& x);

} // namespace adaptsr
