#include "adaptsr/lora.hpp"

#include <cmath>
#include <random>

#include <spdlog/spdlog.h>

#include "adaptsr/errors.hpp"

namespace adaptsr {

void LoraConfig::validate() const {
    if (rank < 1) {
        throw InvalidConfig("lora rank must be >= 1, got " + std::to_string(rank));
    }
    if (!(alpha > 0.0) || !std::isfinite(alpha)) {
        throw InvalidConfig("lora alpha must be a positive finite number");
    }
    if (!(init_std > 0.0)) {
        throw InvalidConfig("lora init_std must be positive");
    }
}

double effective_scale(double alpha, int rank) {
    if (rank < 1) {
        throw InvalidConfig("lora rank must be >= 1, got " + std::to_string(rank));
    }
    if (!(alpha > 0.0)) {
        throw InvalidConfig("lora alpha must be positive");
    }
    return alpha / static_cast<double>(rank);
}

LowRankFactors::LowRankFactors(int fan_in, int fan_out, const LoraConfig& cfg)
    : fan_in_(fan_in), fan_out_(fan_out), rank_(cfg.rank), alpha_(cfg.alpha) {
    cfg.validate();
    scale_ = static_cast<float>(effective_scale(cfg.alpha, cfg.rank));

    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<float> normal(0.0f, static_cast<float>(cfg.init_std));
    A.value.resize(rank_, fan_in_);
    for (Eigen::Index i = 0; i < A.value.size(); ++i) {
        A.value.data()[i] = normal(rng);
    }
    A.shape = {rank_, fan_in_};
    B.value = Mat::Zero(fan_out_, rank_);
    B.shape = {fan_out_, rank_};
}

void LowRankFactors::set_alpha(double alpha) {
    if (state_ == MergeState::merged) {
        throw StateError("cannot change alpha of a merged adapter");
    }
    scale_ = static_cast<float>(effective_scale(alpha, rank_));
    alpha_ = alpha;
}

Mat LowRankFactors::delta() const {
    Mat d = B.value * A.value;
    d *= scale_;
    return d;
}

void LowRankFactors::merge_into(Mat& base) {
    if (state_ != MergeState::wrapped) {
        throw StateError("adapter is already merged");
    }
    Mat d = delta();
    base += d;
    cached_delta_ = std::move(d);
    state_ = MergeState::merged;
}

void LowRankFactors::unmerge_from(Mat& base) {
    if (state_ != MergeState::merged || !cached_delta_) {
        throw StateError("adapter is not merged");
    }
    base -= *cached_delta_;
    cached_delta_.reset();
    state_ = MergeState::wrapped;
}

namespace {

Param frozen(Mat value, std::vector<int> shape) {
    Param p;
    p.value = std::move(value);
    p.shape = std::move(shape);
    p.trainable = false;
    return p;
}

void warn_over_rank(const LowRankFactors& f, const char* kind) {
    if (f.over_rank()) {
        spdlog::warn("{} adapter rank {} is not below min(fan_in, fan_out); the update is no longer low-rank",
                     kind, f.rank());
    }
}

} // namespace

LinearLoraAdapter::LinearLoraAdapter(Mat weight, std::optional<Mat> bias, const LoraConfig& cfg)
    : base_weight(frozen(std::move(weight), {})),
      lora(static_cast<int>(base_weight.value.cols()), static_cast<int>(base_weight.value.rows()), cfg) {
    base_weight.shape = {d_out(), d_in()};
    if (bias) {
        if (bias->size() != d_out()) {
            throw DimensionError("linear bias length does not match d_out");
        }
        base_bias = frozen(std::move(*bias), {d_out()});
    }
    warn_over_rank(lora, "linear");
}

Mat LinearLoraAdapter::forward(const Mat& x) const {
    if (x.cols() != d_in()) {
        throw DimensionError("linear adapter expects " + std::to_string(d_in()) + " input features, got " +
                             std::to_string(x.cols()));
    }
    Mat y = x * base_weight.value.transpose();
    if (lora.state() == MergeState::wrapped) {
        Mat xa = x * lora.A.value.transpose();
        xa *= lora.scale();
        y.noalias() += xa * lora.B.value.transpose();
    }
    if (base_bias) {
        y.rowwise() += base_bias->value.row(0);
    }
    return y;
}

Mat LinearLoraAdapter::backward(const Mat& x, const Mat& dy) {
    if (lora.state() != MergeState::wrapped) {
        throw StateError("backward through a merged adapter");
    }
    const float s = lora.scale();
    Mat xa = x * lora.A.value.transpose();
    if (lora.B.trainable) {
        lora.B.ensure_grad();
        lora.B.grad.noalias() += s * (dy.transpose() * xa);
    }
    Mat dxa = dy * lora.B.value;
    dxa *= s;
    if (lora.A.trainable) {
        lora.A.ensure_grad();
        lora.A.grad.noalias() += dxa.transpose() * x;
    }
    if (base_weight.trainable) {
        base_weight.ensure_grad();
        base_weight.grad.noalias() += dy.transpose() * x;
    }
    if (base_bias && base_bias->trainable) {
        base_bias->ensure_grad();
        base_bias->grad.row(0) += dy.colwise().sum();
    }
    Mat dx = dy * base_weight.value;
    dx.noalias() += dxa * lora.A.value;
    return dx;
}

const Mat& LinearLoraAdapter::merge() {
    lora.merge_into(base_weight.value);
    return base_weight.value;
}

void LinearLoraAdapter::unmerge() {
    lora.unmerge_from(base_weight.value);
}

ConvLoraAdapter::ConvLoraAdapter(Mat kernel, std::optional<Mat> bias, const ops::ConvGeometry& g,
                                 const LoraConfig& cfg)
    : base_kernel(frozen(std::move(kernel), {g.c_out, g.c_in, g.k, g.k})),
      lora(g.patch(), g.c_out, cfg),
      geom(g) {
    if (base_kernel.value.rows() != g.c_out || base_kernel.value.cols() != g.patch()) {
        throw DimensionError("conv kernel does not match its geometry");
    }
    if (bias) {
        if (bias->size() != g.c_out) {
            throw DimensionError("conv bias length does not match C_out");
        }
        base_bias = frozen(std::move(*bias), {g.c_out});
    }
    warn_over_rank(lora, "conv");
}

Tensor4 ConvLoraAdapter::forward(const Tensor4& x, Cache* cache) const {
    Cache local;
    Cache& c = cache ? *cache : local;
    ops::im2col(x, geom, c.col);
    c.n = x.n;
    c.h = x.h;
    c.w = x.w;
    Mat y = base_kernel.value * c.col;
    if (lora.state() == MergeState::wrapped) {
        c.a_col.noalias() = lora.A.value * c.col;
        Mat scaled_b = lora.B.value * lora.scale();
        y.noalias() += scaled_b * c.a_col;
    }
    if (base_bias) {
        y.colwise() += base_bias->value.row(0).transpose();
    }
    return ops::columns_to_tensor(y, x.n, geom.out_h(x.h), geom.out_w(x.w));
}

Tensor4 ConvLoraAdapter::backward(const Cache& cache, const Tensor4& dy) {
    if (lora.state() != MergeState::wrapped) {
        throw StateError("backward through a merged adapter");
    }
    const float s = lora.scale();
    Mat dY = ops::tensor_to_columns(dy);
    if (lora.B.trainable) {
        lora.B.ensure_grad();
        lora.B.grad.noalias() += s * (dY * cache.a_col.transpose());
    }
    Mat da_col = lora.B.value.transpose() * dY;
    da_col *= s;
    if (lora.A.trainable) {
        lora.A.ensure_grad();
        lora.A.grad.noalias() += da_col * cache.col.transpose();
    }
    if (base_kernel.trainable) {
        base_kernel.ensure_grad();
        base_kernel.grad.noalias() += dY * cache.col.transpose();
    }
    if (base_bias && base_bias->trainable) {
        base_bias->ensure_grad();
        base_bias->grad.row(0) += dY.rowwise().sum().transpose();
    }
    Mat dcol = base_kernel.value.transpose() * dY;
    dcol.noalias() += lora.A.value.transpose() * da_col;
    return ops::col2im(dcol, geom, cache.n, cache.h, cache.w);
}

const Mat& ConvLoraAdapter::merge() {
    lora.merge_into(base_kernel.value);
    return base_kernel.value;
}

void ConvLoraAdapter::unmerge() {
    lora.unmerge_from(base_kernel.value);
}

LinearLoraAdapter make_linear_adapter(const Mat& base_weight, const std::optional<Mat>& base_bias,
                                      const LoraConfig& cfg) {
    return LinearLoraAdapter(base_weight, base_bias, cfg);
}

Mat linear_forward(const LinearLoraAdapter& adapter, const Mat& x) {
    return adapter.forward(x);
}

Tensor4 conv_forward(const ConvLoraAdapter& adapter, const Tensor4& x) {
    return adapter.forward(x);
}

} // namespace adaptsr
