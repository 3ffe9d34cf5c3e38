#include "adaptsr/nn.hpp"

#include <cmath>

#include "adaptsr/errors.hpp"

namespace adaptsr::nn {

namespace {

Param make_param(Mat value, std::vector<int> shape) {
    Param p;
    p.value = std::move(value);
    p.shape = std::move(shape);
    return p;
}

void accumulate_bias_rows(std::optional<Param>& bias, const Mat& dy) {
    if (bias && bias->trainable) {
        bias->ensure_grad();
        bias->grad.row(0) += dy.colwise().sum();
    }
}

} // namespace

// ---------------------------------------------------------------------------
// Linear

Linear::Linear(int d_in, int d_out, bool with_bias) : d_in_(d_in), d_out_(d_out) {
    weight_ = make_param(Mat::Zero(d_out, d_in), {d_out, d_in});
    if (with_bias) {
        bias_ = make_param(Mat::Zero(1, d_out), {d_out});
    }
}

Mat Linear::forward(const Mat& x, bool keep) {
    if (keep) {
        input_ = x;
    }
    if (adapter) {
        return adapter->forward(x);
    }
    if (x.cols() != d_in_) {
        throw DimensionError("linear expects " + std::to_string(d_in_) + " input features, got " +
                             std::to_string(x.cols()));
    }
    Mat y = x * weight_.value.transpose();
    if (bias_) {
        y.rowwise() += bias_->value.row(0);
    }
    return y;
}

Mat Linear::backward(const Mat& dy) {
    if (adapter) {
        return adapter->backward(input_, dy);
    }
    if (weight_.trainable) {
        weight_.ensure_grad();
        weight_.grad.noalias() += dy.transpose() * input_;
    }
    accumulate_bias_rows(bias_, dy);
    return dy * weight_.value;
}

void Linear::inject(const LoraConfig& cfg) {
    if (adapter) {
        throw StateError("linear layer already carries an adapter");
    }
    std::optional<Mat> b;
    if (bias_) {
        b = std::move(bias_->value);
    }
    adapter.emplace(std::move(weight_.value), std::move(b), cfg);
    weight_ = Param{};
    bias_.reset();
}

void Linear::merge() {
    if (!adapter) {
        throw StateError("linear layer has no adapter to merge");
    }
    adapter->merge();
}

void Linear::unmerge() {
    if (!adapter) {
        throw StateError("linear layer has no adapter to unmerge");
    }
    adapter->unmerge();
}

void Linear::strip() {
    if (!adapter || adapter->lora.state() != MergeState::merged) {
        throw StateError("only a merged adapter can be stripped");
    }
    weight_ = make_param(std::move(adapter->base_weight.value), {d_out_, d_in_});
    if (adapter->base_bias) {
        bias_ = make_param(std::move(adapter->base_bias->value), {d_out_});
    }
    adapter.reset();
}

void Linear::visit(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + ".weight", weight_param());
    if (auto& b = bias_param()) {
        fn(prefix + ".bias", *b);
    }
    if (adapter) {
        fn(prefix + ".A", adapter->lora.A);
        fn(prefix + ".B", adapter->lora.B);
    }
}

// ---------------------------------------------------------------------------
// Conv2d

Conv2d::Conv2d(int c_in, int c_out, int k, bool with_bias) {
    geom_ = ops::ConvGeometry{c_in, c_out, k, 1, k / 2};
    weight_ = make_param(Mat::Zero(c_out, geom_.patch()), {c_out, c_in, k, k});
    if (with_bias) {
        bias_ = make_param(Mat::Zero(1, c_out), {c_out});
    }
}

Tensor4 Conv2d::forward(const Tensor4& x, bool keep) {
    if (adapter) {
        if (keep) {
            return adapter->forward(x, &cache_);
        }
        return adapter->forward(x);
    }
    const Mat* b = bias_ ? &bias_->value : nullptr;
    if (keep) {
        cache_.n = x.n;
        cache_.h = x.h;
        cache_.w = x.w;
        return ops::conv2d(x, weight_.value, b, geom_, &cache_.col);
    }
    return ops::conv2d(x, weight_.value, b, geom_);
}

Tensor4 Conv2d::backward(const Tensor4& dy) {
    if (adapter) {
        return adapter->backward(cache_, dy);
    }
    Mat dY = ops::tensor_to_columns(dy);
    if (weight_.trainable) {
        weight_.ensure_grad();
        weight_.grad.noalias() += dY * cache_.col.transpose();
    }
    if (bias_ && bias_->trainable) {
        bias_->ensure_grad();
        bias_->grad.row(0) += dY.rowwise().sum().transpose();
    }
    Mat dcol = weight_.value.transpose() * dY;
    return ops::col2im(dcol, geom_, cache_.n, cache_.h, cache_.w);
}

void Conv2d::inject(const LoraConfig& cfg) {
    if (adapter) {
        throw StateError("conv layer already carries an adapter");
    }
    std::optional<Mat> b;
    if (bias_) {
        b = std::move(bias_->value);
    }
    adapter.emplace(std::move(weight_.value), std::move(b), geom_, cfg);
    weight_ = Param{};
    bias_.reset();
}

void Conv2d::merge() {
    if (!adapter) {
        throw StateError("conv layer has no adapter to merge");
    }
    adapter->merge();
}

void Conv2d::unmerge() {
    if (!adapter) {
        throw StateError("conv layer has no adapter to unmerge");
    }
    adapter->unmerge();
}

void Conv2d::strip() {
    if (!adapter || adapter->lora.state() != MergeState::merged) {
        throw StateError("only a merged adapter can be stripped");
    }
    weight_ = make_param(std::move(adapter->base_kernel.value), {geom_.c_out, geom_.c_in, geom_.k, geom_.k});
    if (adapter->base_bias) {
        bias_ = make_param(std::move(adapter->base_bias->value), {geom_.c_out});
    }
    adapter.reset();
}

void Conv2d::visit(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + ".weight", weight_param());
    if (auto& b = bias_param()) {
        fn(prefix + ".bias", *b);
    }
    if (adapter) {
        fn(prefix + ".A", adapter->lora.A);
        fn(prefix + ".B", adapter->lora.B);
    }
}

// ---------------------------------------------------------------------------
// LayerNorm

LayerNorm::LayerNorm(int dim, float eps) : eps_(eps) {
    gamma = make_param(Mat::Ones(1, dim), {dim});
    beta = make_param(Mat::Zero(1, dim), {dim});
}

Mat LayerNorm::forward(const Mat& x, bool keep) {
    const Eigen::Index dim = gamma.value.cols();
    if (x.cols() != dim) {
        throw DimensionError("layer norm width mismatch");
    }
    Mat xhat(x.rows(), dim);
    Eigen::VectorXf rstd(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const float mean = x.row(i).mean();
        const float var = (x.row(i).array() - mean).square().mean();
        rstd(i) = 1.0f / std::sqrt(var + eps_);
        xhat.row(i) = (x.row(i).array() - mean) * rstd(i);
    }
    Mat y = (xhat.array().rowwise() * gamma.value.row(0).array()).rowwise() + beta.value.row(0).array();
    if (keep) {
        xhat_ = std::move(xhat);
        rstd_ = std::move(rstd);
    }
    return y;
}

Mat LayerNorm::backward(const Mat& dy) {
    const auto dim = static_cast<float>(gamma.value.cols());
    if (gamma.trainable) {
        gamma.ensure_grad();
        gamma.grad.row(0) += (dy.array() * xhat_.array()).colwise().sum().matrix();
    }
    if (beta.trainable) {
        beta.ensure_grad();
        beta.grad.row(0) += dy.colwise().sum();
    }
    Mat dxhat = dy.array().rowwise() * gamma.value.row(0).array();
    Mat dx(dy.rows(), dy.cols());
    for (Eigen::Index i = 0; i < dy.rows(); ++i) {
        const float sum_d = dxhat.row(i).sum();
        const float sum_dx = dxhat.row(i).dot(xhat_.row(i));
        dx.row(i) = (rstd_(i) / dim) *
                    (dim * dxhat.row(i).array() - sum_d - xhat_.row(i).array() * sum_dx);
    }
    return dx;
}

void LayerNorm::visit(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + ".gamma", gamma);
    fn(prefix + ".beta", beta);
}

// ---------------------------------------------------------------------------
// init

void init_kaiming_uniform(Conv2d& conv, std::mt19937_64& rng) {
    const float bound = 1.0f / std::sqrt(static_cast<float>(conv.fan_in()));
    std::uniform_real_distribution<float> u(-bound, bound);
    Param& w = conv.weight_param();
    for (Eigen::Index i = 0; i < w.value.size(); ++i) {
        w.value.data()[i] = u(rng);
    }
    if (auto& b = conv.bias_param()) {
        for (Eigen::Index i = 0; i < b->value.size(); ++i) {
            b->value.data()[i] = u(rng);
        }
    }
}

float trunc_normal(std::mt19937_64& rng, float std) {
    std::normal_distribution<float> normal(0.0f, std);
    for (;;) {
        const float v = normal(rng);
        if (std::abs(v) <= 2.0f * std) {
            return v;
        }
    }
}

void init_trunc_normal(Linear& linear, float std, std::mt19937_64& rng) {
    Param& w = linear.weight_param();
    for (Eigen::Index i = 0; i < w.value.size(); ++i) {
        w.value.data()[i] = trunc_normal(rng, std);
    }
    if (auto& b = linear.bias_param()) {
        b->value.setZero();
    }
}

} // namespace adaptsr::nn
