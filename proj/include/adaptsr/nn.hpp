#pragma once

#include <functional>
#include <optional>
#include <random>
#include <string>

#include "adaptsr/lora.hpp"
#include "adaptsr/ops.hpp"
#include "adaptsr/tensor.hpp"

namespace adaptsr::nn {

using ParamVisitor = std::function<void(const std::string& name, Param& p)>;

/// Common surface of every layer the injection engine can wrap with an adapter.
class AdaptableLayer {
public:
    virtual ~AdaptableLayer() = default;

    virtual bool is_conv() const = 0;
    /// d_in for linear layers, C_in·k² for convs.
    virtual int fan_in() const = 0;
    /// d_out for linear layers, C_out for convs.
    virtual int fan_out() const = 0;
    std::size_t weight_numel() const { return static_cast<std::size_t>(fan_in()) * fan_out(); }

    virtual bool has_bias() const = 0;
    virtual bool injected() const = 0;
    virtual void inject(const LoraConfig& cfg) = 0;
    virtual LowRankFactors* factors() = 0;
    virtual const LowRankFactors* factors() const = 0;
    /// Current effective base weight (W0 while wrapped, W0 + s·B·A once merged).
    virtual const Mat& weight() const = 0;
    virtual void merge() = 0;
    virtual void unmerge() = 0;
    /// Replaces a merged adapter by a plain weight, restoring the base layer type.
    virtual void strip() = 0;
    virtual void visit(const std::string& prefix, const ParamVisitor& fn) = 0;
};

class Linear final : public AdaptableLayer {
public:
    Linear() = default;
    Linear(int d_in, int d_out, bool with_bias = true);

    Mat forward(const Mat& x, bool keep);
    Mat backward(const Mat& dy);

    bool is_conv() const override { return false; }
    int fan_in() const override { return d_in_; }
    int fan_out() const override { return d_out_; }
    bool has_bias() const override { return adapter ? adapter->base_bias.has_value() : bias_.has_value(); }
    bool injected() const override { return adapter.has_value(); }
    void inject(const LoraConfig& cfg) override;
    LowRankFactors* factors() override { return adapter ? &adapter->lora : nullptr; }
    const LowRankFactors* factors() const override { return adapter ? &adapter->lora : nullptr; }
    const Mat& weight() const override { return adapter ? adapter->base_weight.value : weight_.value; }
    void merge() override;
    void unmerge() override;
    void strip() override;
    void visit(const std::string& prefix, const ParamVisitor& fn) override;

    Param& weight_param() { return adapter ? adapter->base_weight : weight_; }
    std::optional<Param>& bias_param() { return adapter ? adapter->base_bias : bias_; }

    std::optional<LinearLoraAdapter> adapter;

private:
    int d_in_ = 0;
    int d_out_ = 0;
    Param weight_;
    std::optional<Param> bias_;
    Mat input_;
};

class Conv2d final : public AdaptableLayer {
public:
    Conv2d() = default;
    Conv2d(int c_in, int c_out, int k, bool with_bias = true);

    Tensor4 forward(const Tensor4& x, bool keep);
    Tensor4 backward(const Tensor4& dy);

    const ops::ConvGeometry& geometry() const { return geom_; }

    bool is_conv() const override { return true; }
    int fan_in() const override { return geom_.patch(); }
    int fan_out() const override { return geom_.c_out; }
    bool has_bias() const override { return adapter ? adapter->base_bias.has_value() : bias_.has_value(); }
    bool injected() const override { return adapter.has_value(); }
    void inject(const LoraConfig& cfg) override;
    LowRankFactors* factors() override { return adapter ? &adapter->lora : nullptr; }
    const LowRankFactors* factors() const override { return adapter ? &adapter->lora : nullptr; }
    const Mat& weight() const override { return adapter ? adapter->base_kernel.value : weight_.value; }
    void merge() override;
    void unmerge() override;
    void strip() override;
    void visit(const std::string& prefix, const ParamVisitor& fn) override;

    Param& weight_param() { return adapter ? adapter->base_kernel : weight_; }
    std::optional<Param>& bias_param() { return adapter ? adapter->base_bias : bias_; }

    std::optional<ConvLoraAdapter> adapter;

private:
    ops::ConvGeometry geom_;
    Param weight_;
    std::optional<Param> bias_;
    ConvLoraAdapter::Cache cache_;
};

class LayerNorm {
public:
    LayerNorm() = default;
    explicit LayerNorm(int dim, float eps = 1e-5f);

    Mat forward(const Mat& x, bool keep);
    Mat backward(const Mat& dy);
    void visit(const std::string& prefix, const ParamVisitor& fn);

    Param gamma;
    Param beta;

private:
    float eps_ = 1e-5f;
    Mat xhat_;
    Eigen::VectorXf rstd_;
};

// PyTorch-default style initializers.
void init_kaiming_uniform(Conv2d& conv, std::mt19937_64& rng);
void init_trunc_normal(Linear& linear, float std, std::mt19937_64& rng);
float trunc_normal(std::mt19937_64& rng, float std);

} // namespace adaptsr::nn
