#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "adaptsr/lora.hpp"
#include "adaptsr/nn.hpp"
#include "adaptsr/tensor.hpp"

namespace adaptsr {

enum class LayerKind { conv, linear_qkv, linear_proj, linear_mlp_fc1, linear_mlp_fc2 };
enum class LayerGroup { first_conv, rstlb_convs, dfe_convs, bu_conv, au_conv, msa, mlp, rlb_convs };

std::string to_string(LayerKind kind);
std::string to_string(LayerGroup group);
std::optional<LayerGroup> parse_group(const std::string& name);

struct RegistryEntry {
    std::string name;
    LayerKind kind;
    LayerGroup group;
    nn::AdaptableLayer* layer = nullptr;
};

/// Ordered, uniquely-named list of every adaptable weight in a backbone.
class LayerRegistry {
public:
    void add(std::string name, LayerKind kind, LayerGroup group, nn::AdaptableLayer* layer);

    const std::vector<RegistryEntry>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }
    const RegistryEntry* find(const std::string& name) const;
    const RegistryEntry& at(const std::string& name) const;
    bool has_group(LayerGroup group) const;
    std::size_t count(LayerGroup group) const;
    std::size_t count(LayerKind kind) const;

private:
    std::vector<RegistryEntry> entries_;
};

struct TinySwinConfig {
    int embed_dim = 32;
    int n_rtlb = 2;
    int tll_per_rtlb = 2;
    int n_heads = 4;
    int window = 8;
    double mlp_ratio = 2.0;
    int upscale = 4;
    double img_range = 1.0;
    /// Channels fed to the pixel shuffle (bu_conv emits upsample_feats·upscale²).
    int upsample_feats = 8;
    std::uint64_t seed = 0;

    void validate() const;
    int head_dim() const { return embed_dim / n_heads; }
    int mlp_hidden() const;

    /// Classical-SR SwinIR proportions (embed 180, 6×6 layers, 6 heads, window 8).
    static TinySwinConfig swinir_scale();
};

struct TinyEdsrConfig {
    int n_feats = 32;
    int n_resblocks = 4;
    int upscale = 4;
    double res_scale = 1.0;
    int upsample_feats = 8;
    std::uint64_t seed = 0;

    void validate() const;

    /// The 16-block, 64-feature residual CNN.
    static TinyEdsrConfig edsr_baseline();
};

using BackboneConfig = std::variant<TinySwinConfig, TinyEdsrConfig>;

nlohmann::json to_json(const BackboneConfig& cfg);
BackboneConfig backbone_config_from_json(const nlohmann::json& j);
std::string backbone_id(const BackboneConfig& cfg);

/// What `inject` recorded on the model, enough to rebuild the same adapter layout.
struct AdapterSetup {
    LoraConfig lora;
    std::string spec;
    std::vector<std::string> targets;
};

class Backbone {
public:
    explicit Backbone(BackboneConfig cfg) : config_(std::move(cfg)) {}
    virtual ~Backbone() = default;
    Backbone(const Backbone&) = delete;
    Backbone& operator=(const Backbone&) = delete;

    const BackboneConfig& config() const { return config_; }
    std::string id() const { return backbone_id(config_); }
    virtual int upscale() const = 0;

    /// Unclamped network output; caches activations for backward when `keep`.
    virtual Tensor4 forward(const Tensor4& x, bool keep) = 0;
    /// Backpropagates dL/d(output) produced by the last forward(keep=true).
    virtual void backward(const Tensor4& grad_out) = 0;
    virtual void visit_params(const nn::ParamVisitor& fn) = 0;

    const LayerRegistry& registry() const { return registry_; }

    const std::optional<AdapterSetup>& adapter_setup() const { return setup_; }
    void set_adapter_setup(std::optional<AdapterSetup> setup) { setup_ = std::move(setup); }

    std::size_t param_count();
    void zero_grad();

protected:
    BackboneConfig config_;
    LayerRegistry registry_;
    std::optional<AdapterSetup> setup_;
};

// ---------------------------------------------------------------------------
// transformer pieces

/// Learnable ((2w−1)² × heads) table gathered into an N×N bias per head.
class RelPosBias {
public:
    RelPosBias() = default;
    RelPosBias(int window, int heads);

    Param table;
    int window() const { return window_; }
    int heads() const { return heads_; }
    int tokens() const { return window_ * window_; }
    const std::vector<int>& index() const { return index_; }

    Mat head_bias(int head) const;
    void accumulate_grad(int head, const Mat& d_logits);

private:
    int window_ = 0;
    int heads_ = 0;
    std::vector<int> index_;
};

class WindowAttention {
public:
    WindowAttention() = default;
    WindowAttention(int dim, int heads, int window);

    /// x: (windows·N) × dim rows in window-major order.
    Mat forward(const Mat& x, bool keep);
    Mat backward(const Mat& dy);
    void visit(const std::string& prefix, const nn::ParamVisitor& fn);

    nn::Linear qkv;
    nn::Linear proj;
    RelPosBias rel_pos;

    int heads() const { return heads_; }

    /// Per-(window, head) attention probabilities from the last forward.
    const std::vector<Mat>& last_probs() const { return probs_; }

private:
    int dim_ = 0;
    int heads_ = 0;
    Mat qkv_out_;
    std::vector<Mat> probs_;
};

/// Stateless window attention over one batch of windows with explicit layers.
Mat window_attention(const Mat& x, nn::Linear& qkv, nn::Linear& proj, const RelPosBias& bias, int heads,
                     std::vector<Mat>* probs = nullptr);

class Mlp {
public:
    Mlp() = default;
    Mlp(int dim, int hidden);

    Mat forward(const Mat& x, bool keep);
    Mat backward(const Mat& dy);
    void visit(const std::string& prefix, const nn::ParamVisitor& fn);

    nn::Linear fc1;
    nn::Linear fc2;

private:
    Mat pre_act_;
};

/// fc2(GELU(fc1(x))).
Mat mlp_forward(const Mat& x, nn::Linear& fc1, nn::Linear& fc2);

/// Image ↔ window-major token rows; each is the other's inverse permutation.
Mat to_window_tokens(const Tensor4& x, int window);
Tensor4 from_window_tokens(const Mat& tokens, int n, int h, int w, int window);

// ---------------------------------------------------------------------------
// builders

std::unique_ptr<Backbone> build_tiny_swin(const TinySwinConfig& cfg);
std::unique_ptr<Backbone> build_tiny_edsr(const TinyEdsrConfig& cfg);
std::unique_ptr<Backbone> build_backbone(const BackboneConfig& cfg);

/// Inference: output clamped to [0,1].
Tensor4 model_forward(Backbone& model, const Tensor4& lr);
Image model_forward(Backbone& model, const Image& lr);

} // namespace adaptsr
