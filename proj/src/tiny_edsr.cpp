#include <random>

#include "adaptsr/backbones.hpp"
#include "adaptsr/errors.hpp"

namespace adaptsr {

namespace {

constexpr float kRgbMean[3] = {0.4488f, 0.4371f, 0.4040f};

struct ResidualBlock {
    nn::Conv2d conv1;
    nn::Conv2d conv2;
    float res_scale;
    std::vector<unsigned char> active;

    ResidualBlock(int feats, float scale) : conv1(feats, feats, 3), conv2(feats, feats, 3), res_scale(scale) {}

    Tensor4 forward(const Tensor4& x, bool keep) {
        Tensor4 h = conv1.forward(x, keep);
        if (keep) {
            active.resize(h.data.size());
        }
        for (std::size_t i = 0; i < h.data.size(); ++i) {
            const bool on = h.data[i] > 0.0f;
            if (!on) h.data[i] = 0.0f;
            if (keep) active[i] = on ? 1 : 0;
        }
        Tensor4 out = conv2.forward(h, keep);
        for (std::size_t i = 0; i < out.data.size(); ++i) {
            out.data[i] = x.data[i] + res_scale * out.data[i];
        }
        return out;
    }

    Tensor4 backward(const Tensor4& g) {
        Tensor4 gs = g;
        for (float& v : gs.data) {
            v *= res_scale;
        }
        Tensor4 gh = conv2.backward(gs);
        for (std::size_t i = 0; i < gh.data.size(); ++i) {
            if (!active[i]) gh.data[i] = 0.0f;
        }
        Tensor4 gx = conv1.backward(gh);
        for (std::size_t i = 0; i < gx.data.size(); ++i) {
            gx.data[i] += g.data[i];
        }
        return gx;
    }
};

class TinyEdsr final : public Backbone {
public:
    explicit TinyEdsr(const TinyEdsrConfig& cfg)
        : Backbone(cfg),
          cfg_(cfg),
          first_conv_(3, cfg.n_feats, 3),
          bu_conv_(cfg.n_feats, cfg.upsample_feats * cfg.upscale * cfg.upscale, 3),
          au_conv_(cfg.upsample_feats, 3, 3) {
        blocks_.reserve(cfg.n_resblocks);
        for (int i = 0; i < cfg.n_resblocks; ++i) {
            blocks_.emplace_back(cfg.n_feats, static_cast<float>(cfg.res_scale));
        }
        std::mt19937_64 rng(cfg.seed);
        nn::init_kaiming_uniform(first_conv_, rng);
        for (auto& b : blocks_) {
            nn::init_kaiming_uniform(b.conv1, rng);
            nn::init_kaiming_uniform(b.conv2, rng);
        }
        nn::init_kaiming_uniform(bu_conv_, rng);
        nn::init_kaiming_uniform(au_conv_, rng);

        registry_.add("first_conv", LayerKind::conv, LayerGroup::first_conv, &first_conv_);
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            const std::string p = "body." + std::to_string(i);
            registry_.add(p + ".conv1", LayerKind::conv, LayerGroup::rlb_convs, &blocks_[i].conv1);
            registry_.add(p + ".conv2", LayerKind::conv, LayerGroup::rlb_convs, &blocks_[i].conv2);
        }
        registry_.add("bu_conv", LayerKind::conv, LayerGroup::bu_conv, &bu_conv_);
        registry_.add("au_conv", LayerKind::conv, LayerGroup::au_conv, &au_conv_);
    }

    int upscale() const override { return cfg_.upscale; }

    Tensor4 forward(const Tensor4& x, bool keep) override {
        if (x.c != 3) {
            throw DimensionError("model expects 3-channel input, got " + std::to_string(x.c));
        }
        Tensor4 xin = x;
        for (int b = 0; b < x.n; ++b) {
            for (int c = 0; c < 3; ++c) {
                float* p = xin.plane(b, c);
                for (std::size_t i = 0; i < xin.plane_size(); ++i) {
                    p[i] -= kRgbMean[c];
                }
            }
        }
        Tensor4 f = first_conv_.forward(xin, keep);
        for (auto& block : blocks_) {
            f = block.forward(f, keep);
        }
        Tensor4 out = au_conv_.forward(ops::pixel_shuffle(bu_conv_.forward(f, keep), cfg_.upscale), keep);
        for (int b = 0; b < out.n; ++b) {
            for (int c = 0; c < 3; ++c) {
                float* p = out.plane(b, c);
                for (std::size_t i = 0; i < out.plane_size(); ++i) {
                    p[i] += kRgbMean[c];
                }
            }
        }
        return out;
    }

    void backward(const Tensor4& grad_out) override {
        Tensor4 g = au_conv_.backward(grad_out);
        g = bu_conv_.backward(ops::pixel_unshuffle(g, cfg_.upscale));
        for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) {
            g = it->backward(g);
        }
        first_conv_.backward(g);
    }

    void visit_params(const nn::ParamVisitor& fn) override {
        first_conv_.visit("first_conv", fn);
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            const std::string p = "body." + std::to_string(i);
            blocks_[i].conv1.visit(p + ".conv1", fn);
            blocks_[i].conv2.visit(p + ".conv2", fn);
        }
        bu_conv_.visit("bu_conv", fn);
        au_conv_.visit("au_conv", fn);
    }

private:
    TinyEdsrConfig cfg_;
    nn::Conv2d first_conv_;
    std::vector<ResidualBlock> blocks_;
    nn::Conv2d bu_conv_;
    nn::Conv2d au_conv_;
};

} // namespace

std::unique_ptr<Backbone> build_tiny_edsr(const TinyEdsrConfig& cfg) {
    cfg.validate();
    return std::make_unique<TinyEdsr>(cfg);
}

} // namespace adaptsr
