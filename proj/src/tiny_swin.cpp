#include <random>

#include "adaptsr/backbones.hpp"
#include "adaptsr/errors.hpp"

namespace adaptsr {

namespace {

constexpr float kRgbMean[3] = {0.4488f, 0.4371f, 0.4040f};

struct TransformerLayer {
    nn::LayerNorm norm1;
    WindowAttention attn;
    nn::LayerNorm norm2;
    Mlp mlp;

    TransformerLayer(int dim, int heads, int window, int hidden)
        : norm1(dim), attn(dim, heads, window), norm2(dim), mlp(dim, hidden) {}

    Mat forward(const Mat& x, bool keep) {
        Mat a = x + attn.forward(norm1.forward(x, keep), keep);
        Mat y = a + mlp.forward(norm2.forward(a, keep), keep);
        return y;
    }

    Mat backward(const Mat& dy) {
        Mat da = dy + norm2.backward(mlp.backward(dy));
        return da + norm1.backward(attn.backward(da));
    }

    void visit(const std::string& prefix, const nn::ParamVisitor& fn) {
        norm1.visit(prefix + ".norm1", fn);
        attn.visit(prefix + ".attn", fn);
        norm2.visit(prefix + ".norm2", fn);
        mlp.visit(prefix + ".mlp", fn);
    }
};

struct ResidualTransformerBlock {
    std::vector<TransformerLayer> layers;
    nn::Conv2d conv;
    int window;
    int h = 0;
    int w = 0;
    int n = 0;

    ResidualTransformerBlock(const TinySwinConfig& cfg)
        : conv(cfg.embed_dim, cfg.embed_dim, 3), window(cfg.window) {
        layers.reserve(cfg.tll_per_rtlb);
        for (int i = 0; i < cfg.tll_per_rtlb; ++i) {
            layers.emplace_back(cfg.embed_dim, cfg.n_heads, cfg.window, cfg.mlp_hidden());
        }
    }

    Tensor4 forward(const Tensor4& f, bool keep) {
        n = f.n;
        h = f.h;
        w = f.w;
        Mat tokens = to_window_tokens(f, window);
        for (auto& layer : layers) {
            tokens = layer.forward(tokens, keep);
        }
        Tensor4 out = conv.forward(from_window_tokens(tokens, f.n, f.h, f.w, window), keep);
        for (std::size_t i = 0; i < out.data.size(); ++i) {
            out.data[i] += f.data[i];
        }
        return out;
    }

    Tensor4 backward(const Tensor4& g) {
        Mat tokens = to_window_tokens(conv.backward(g), window);
        for (auto it = layers.rbegin(); it != layers.rend(); ++it) {
            tokens = it->backward(tokens);
        }
        Tensor4 gf = from_window_tokens(tokens, n, h, w, window);
        for (std::size_t i = 0; i < gf.data.size(); ++i) {
            gf.data[i] += g.data[i];
        }
        return gf;
    }
};

class TinySwin final : public Backbone {
public:
    explicit TinySwin(const TinySwinConfig& cfg)
        : Backbone(cfg),
          cfg_(cfg),
          first_conv_(3, cfg.embed_dim, 3),
          dfe_conv_(cfg.embed_dim, cfg.embed_dim, 3),
          bu_conv_(cfg.embed_dim, cfg.upsample_feats * cfg.upscale * cfg.upscale, 3),
          au_conv_(cfg.upsample_feats, 3, 3) {
        blocks_.reserve(cfg.n_rtlb);
        for (int i = 0; i < cfg.n_rtlb; ++i) {
            blocks_.emplace_back(cfg);
        }
        initialize();
        register_layers();
    }

    int upscale() const override { return cfg_.upscale; }

    Tensor4 forward(const Tensor4& x, bool keep) override {
        if (x.c != 3) {
            throw DimensionError("model expects 3-channel input, got " + std::to_string(x.c));
        }
        const int win = cfg_.window;
        const int pad_h = (win - x.h % win) % win;
        const int pad_w = (win - x.w % win) % win;
        const auto range = static_cast<float>(cfg_.img_range);

        Tensor4 xin = x;
        for (int b = 0; b < x.n; ++b) {
            for (int c = 0; c < 3; ++c) {
                float* p = xin.plane(b, c);
                for (std::size_t i = 0; i < xin.plane_size(); ++i) {
                    p[i] = (p[i] - kRgbMean[c]) * range;
                }
            }
        }
        Tensor4 x0 = first_conv_.forward(ops::reflect_pad(xin, pad_h, pad_w), keep);
        Tensor4 f = x0;
        for (auto& block : blocks_) {
            f = block.forward(f, keep);
        }
        Tensor4 trunk = dfe_conv_.forward(f, keep);
        for (std::size_t i = 0; i < trunk.data.size(); ++i) {
            trunk.data[i] += x0.data[i];
        }
        if (keep) {
            in_h_ = x.h;
            in_w_ = x.w;
            pad_h_ = pad_h;
            pad_w_ = pad_w;
        }
        Tensor4 up = ops::pixel_shuffle(bu_conv_.forward(ops::crop(trunk, x.h, x.w), keep), cfg_.upscale);
        Tensor4 out = au_conv_.forward(up, keep);
        for (int b = 0; b < out.n; ++b) {
            for (int c = 0; c < 3; ++c) {
                float* p = out.plane(b, c);
                for (std::size_t i = 0; i < out.plane_size(); ++i) {
                    p[i] = p[i] / range + kRgbMean[c];
                }
            }
        }
        return out;
    }

    void backward(const Tensor4& grad_out) override {
        Tensor4 g = grad_out;
        const auto inv_range = static_cast<float>(1.0 / cfg_.img_range);
        for (float& v : g.data) {
            v *= inv_range;
        }
        g = au_conv_.backward(g);
        g = bu_conv_.backward(ops::pixel_unshuffle(g, cfg_.upscale));
        g = ops::uncrop(g, in_h_ + pad_h_, in_w_ + pad_w_);
        Tensor4 gx0 = g;
        Tensor4 gf = dfe_conv_.backward(g);
        for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) {
            gf = it->backward(gf);
        }
        for (std::size_t i = 0; i < gx0.data.size(); ++i) {
            gx0.data[i] += gf.data[i];
        }
        first_conv_.backward(gx0);
    }

    void visit_params(const nn::ParamVisitor& fn) override {
        first_conv_.visit("first_conv", fn);
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            const std::string prefix = "layers." + std::to_string(i);
            for (std::size_t j = 0; j < blocks_[i].layers.size(); ++j) {
                blocks_[i].layers[j].visit(prefix + ".blocks." + std::to_string(j), fn);
            }
            blocks_[i].conv.visit(prefix + ".conv", fn);
        }
        dfe_conv_.visit("dfe_conv", fn);
        bu_conv_.visit("bu_conv", fn);
        au_conv_.visit("au_conv", fn);
    }

private:
    void initialize() {
        std::mt19937_64 rng(cfg_.seed);
        nn::init_kaiming_uniform(first_conv_, rng);
        for (auto& block : blocks_) {
            for (auto& layer : block.layers) {
                nn::init_trunc_normal(layer.attn.qkv, 0.02f, rng);
                nn::init_trunc_normal(layer.attn.proj, 0.02f, rng);
                nn::init_trunc_normal(layer.mlp.fc1, 0.02f, rng);
                nn::init_trunc_normal(layer.mlp.fc2, 0.02f, rng);
                Mat& table = layer.attn.rel_pos.table.value;
                for (Eigen::Index i = 0; i < table.size(); ++i) {
                    table.data()[i] = nn::trunc_normal(rng, 0.02f);
                }
            }
            nn::init_kaiming_uniform(block.conv, rng);
        }
        nn::init_kaiming_uniform(dfe_conv_, rng);
        nn::init_kaiming_uniform(bu_conv_, rng);
        nn::init_kaiming_uniform(au_conv_, rng);
    }

    void register_layers() {
        registry_.add("first_conv", LayerKind::conv, LayerGroup::first_conv, &first_conv_);
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            const std::string prefix = "layers." + std::to_string(i);
            for (std::size_t j = 0; j < blocks_[i].layers.size(); ++j) {
                auto& layer = blocks_[i].layers[j];
                const std::string p = prefix + ".blocks." + std::to_string(j);
                registry_.add(p + ".attn.qkv", LayerKind::linear_qkv, LayerGroup::msa, &layer.attn.qkv);
                registry_.add(p + ".attn.proj", LayerKind::linear_proj, LayerGroup::msa, &layer.attn.proj);
                registry_.add(p + ".mlp.fc1", LayerKind::linear_mlp_fc1, LayerGroup::mlp, &layer.mlp.fc1);
                registry_.add(p + ".mlp.fc2", LayerKind::linear_mlp_fc2, LayerGroup::mlp, &layer.mlp.fc2);
            }
            registry_.add(prefix + ".conv", LayerKind::conv, LayerGroup::rstlb_convs, &blocks_[i].conv);
        }
        registry_.add("dfe_conv", LayerKind::conv, LayerGroup::dfe_convs, &dfe_conv_);
        registry_.add("bu_conv", LayerKind::conv, LayerGroup::bu_conv, &bu_conv_);
        registry_.add("au_conv", LayerKind::conv, LayerGroup::au_conv, &au_conv_);
    }

    TinySwinConfig cfg_;
    nn::Conv2d first_conv_;
    std::vector<ResidualTransformerBlock> blocks_;
    nn::Conv2d dfe_conv_;
    nn::Conv2d bu_conv_;
    nn::Conv2d au_conv_;
    int in_h_ = 0;
    int in_w_ = 0;
    int pad_h_ = 0;
    int pad_w_ = 0;
};

} // namespace

std::unique_ptr<Backbone> build_tiny_swin(const TinySwinConfig& cfg) {
    cfg.validate();
    return std::make_unique<TinySwin>(cfg);
}

} // namespace adaptsr
