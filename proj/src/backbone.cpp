#include <algorithm>
#include <cmath>

#include "adaptsr/backbones.hpp"
#include "adaptsr/errors.hpp"

namespace adaptsr {

std::string to_string(LayerKind kind) {
    switch (kind) {
        case LayerKind::conv: return "conv";
        case LayerKind::linear_qkv: return "linear_qkv";
        case LayerKind::linear_proj: return "linear_proj";
        case LayerKind::linear_mlp_fc1: return "linear_mlp_fc1";
        case LayerKind::linear_mlp_fc2: return "linear_mlp_fc2";
    }
    return "unknown";
}

std::string to_string(LayerGroup group) {
    switch (group) {
        case LayerGroup::first_conv: return "first_conv";
        case LayerGroup::rstlb_convs: return "rstlb_convs";
        case LayerGroup::dfe_convs: return "dfe_convs";
        case LayerGroup::bu_conv: return "bu_conv";
        case LayerGroup::au_conv: return "au_conv";
        case LayerGroup::msa: return "msa";
        case LayerGroup::mlp: return "mlp";
        case LayerGroup::rlb_convs: return "rlb_convs";
    }
    return "unknown";
}

std::optional<LayerGroup> parse_group(const std::string& name) {
    for (auto g : {LayerGroup::first_conv, LayerGroup::rstlb_convs, LayerGroup::dfe_convs, LayerGroup::bu_conv,
                   LayerGroup::au_conv, LayerGroup::msa, LayerGroup::mlp, LayerGroup::rlb_convs}) {
        if (to_string(g) == name) {
            return g;
        }
    }
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// LayerRegistry

void LayerRegistry::add(std::string name, LayerKind kind, LayerGroup group, nn::AdaptableLayer* layer) {
    if (find(name)) {
        throw InvalidConfig("duplicate registry name " + name);
    }
    entries_.push_back(RegistryEntry{std::move(name), kind, group, layer});
}

const RegistryEntry* LayerRegistry::find(const std::string& name) const {
    auto it = std::find_if(entries_.begin(), entries_.end(), [&](const RegistryEntry& e) { return e.name == name; });
    return it == entries_.end() ? nullptr : &*it;
}

const RegistryEntry& LayerRegistry::at(const std::string& name) const {
    if (const auto* e = find(name)) {
        return *e;
    }
    throw TargetResolutionError("no registry entry named " + name);
}

bool LayerRegistry::has_group(LayerGroup group) const {
    return count(group) > 0;
}

std::size_t LayerRegistry::count(LayerGroup group) const {
    return static_cast<std::size_t>(
        std::count_if(entries_.begin(), entries_.end(), [&](const RegistryEntry& e) { return e.group == group; }));
}

std::size_t LayerRegistry::count(LayerKind kind) const {
    return static_cast<std::size_t>(
        std::count_if(entries_.begin(), entries_.end(), [&](const RegistryEntry& e) { return e.kind == kind; }));
}

// ---------------------------------------------------------------------------
// configs

void TinySwinConfig::validate() const {
    if (embed_dim < 1 || n_heads < 1 || embed_dim % n_heads != 0) {
        throw InvalidConfig("embed_dim " + std::to_string(embed_dim) + " is not divisible by n_heads " +
                            std::to_string(n_heads));
    }
    if (n_rtlb < 1 || tll_per_rtlb < 1) {
        throw InvalidConfig("need at least one RTLB with at least one TLL");
    }
    if (window < 1) {
        throw InvalidConfig("window must be positive");
    }
    if (!(mlp_ratio > 0.0) || std::abs(embed_dim * mlp_ratio - std::round(embed_dim * mlp_ratio)) > 1e-9) {
        throw InvalidConfig("embed_dim * mlp_ratio must be a positive integer");
    }
    if (upscale < 2 || upscale > 4) {
        throw InvalidConfig("upscale must be 2, 3 or 4");
    }
    if (!(img_range > 0.0)) {
        throw InvalidConfig("img_range must be positive");
    }
    if (upsample_feats < 1) {
        throw InvalidConfig("upsample_feats must be positive");
    }
}

int TinySwinConfig::mlp_hidden() const {
    return static_cast<int>(std::lround(embed_dim * mlp_ratio));
}

TinySwinConfig TinySwinConfig::swinir_scale() {
    TinySwinConfig cfg;
    cfg.embed_dim = 180;
    cfg.n_rtlb = 6;
    cfg.tll_per_rtlb = 6;
    cfg.n_heads = 6;
    cfg.window = 8;
    cfg.mlp_ratio = 2.0;
    cfg.upscale = 4;
    cfg.upsample_feats = 64;
    return cfg;
}

void TinyEdsrConfig::validate() const {
    if (n_resblocks < 1) {
        throw InvalidConfig("n_resblocks must be >= 1");
    }
    if (n_feats < 1) {
        throw InvalidConfig("n_feats must be positive");
    }
    if (upscale < 2 || upscale > 4) {
        throw InvalidConfig("upscale must be 2, 3 or 4");
    }
    if (!(res_scale > 0.0)) {
        throw InvalidConfig("res_scale must be positive");
    }
    if (upsample_feats < 1) {
        throw InvalidConfig("upsample_feats must be positive");
    }
}

TinyEdsrConfig TinyEdsrConfig::edsr_baseline() {
    TinyEdsrConfig cfg;
    cfg.n_feats = 64;
    cfg.n_resblocks = 16;
    cfg.upsample_feats = 64;
    return cfg;
}

nlohmann::json to_json(const BackboneConfig& cfg) {
    return std::visit(
        [](const auto& c) -> nlohmann::json {
            using T = std::decay_t<decltype(c)>;
            if constexpr (std::is_same_v<T, TinySwinConfig>) {
                return {{"kind", "tiny-swin"},     {"embed_dim", c.embed_dim}, {"n_rtlb", c.n_rtlb},
                        {"tll_per_rtlb", c.tll_per_rtlb}, {"n_heads", c.n_heads}, {"window", c.window},
                        {"mlp_ratio", c.mlp_ratio}, {"upscale", c.upscale},     {"img_range", c.img_range},
                        {"upsample_feats", c.upsample_feats}, {"seed", c.seed}};
            } else {
                return {{"kind", "tiny-edsr"},  {"n_feats", c.n_feats},     {"n_resblocks", c.n_resblocks},
                        {"upscale", c.upscale}, {"res_scale", c.res_scale}, {"upsample_feats", c.upsample_feats},
                        {"seed", c.seed}};
            }
        },
        cfg);
}

BackboneConfig backbone_config_from_json(const nlohmann::json& j) {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "tiny-swin") {
        TinySwinConfig c;
        c.embed_dim = j.at("embed_dim").get<int>();
        c.n_rtlb = j.at("n_rtlb").get<int>();
        c.tll_per_rtlb = j.at("tll_per_rtlb").get<int>();
        c.n_heads = j.at("n_heads").get<int>();
        c.window = j.at("window").get<int>();
        c.mlp_ratio = j.at("mlp_ratio").get<double>();
        c.upscale = j.at("upscale").get<int>();
        c.img_range = j.at("img_range").get<double>();
        c.upsample_feats = j.at("upsample_feats").get<int>();
        c.seed = j.at("seed").get<std::uint64_t>();
        return c;
    }
    if (kind == "tiny-edsr") {
        TinyEdsrConfig c;
        c.n_feats = j.at("n_feats").get<int>();
        c.n_resblocks = j.at("n_resblocks").get<int>();
        c.upscale = j.at("upscale").get<int>();
        c.res_scale = j.at("res_scale").get<double>();
        c.upsample_feats = j.at("upsample_feats").get<int>();
        c.seed = j.at("seed").get<std::uint64_t>();
        return c;
    }
    throw InvalidConfig("unknown backbone kind " + kind);
}

std::string backbone_id(const BackboneConfig& cfg) {
    return std::holds_alternative<TinySwinConfig>(cfg) ? "tiny-swin" : "tiny-edsr";
}

// ---------------------------------------------------------------------------
// Backbone

std::size_t Backbone::param_count() {
    std::size_t total = 0;
    visit_params([&](const std::string&, Param& p) { total += p.numel(); });
    return total;
}

void Backbone::zero_grad() {
    visit_params([](const std::string&, Param& p) {
        if (p.trainable) {
            p.zero_grad();
        } else {
            p.grad.resize(0, 0);
        }
    });
}

std::unique_ptr<Backbone> build_backbone(const BackboneConfig& cfg) {
    return std::visit(
        [](const auto& c) -> std::unique_ptr<Backbone> {
            using T = std::decay_t<decltype(c)>;
            if constexpr (std::is_same_v<T, TinySwinConfig>) {
                return build_tiny_swin(c);
            } else {
                return build_tiny_edsr(c);
            }
        },
        cfg);
}

Tensor4 model_forward(Backbone& model, const Tensor4& lr) {
    if (lr.c != 3) {
        throw DimensionError("model expects 3-channel input, got " + std::to_string(lr.c));
    }
    Tensor4 out = model.forward(lr, false);
    for (float& v : out.data) {
        v = std::clamp(v, 0.0f, 1.0f);
    }
    return out;
}

Image model_forward(Backbone& model, const Image& lr) {
    return model_forward(model, Tensor4::stack({lr})).image(0);
}

// ---------------------------------------------------------------------------
// relative position bias

RelPosBias::RelPosBias(int window, int heads) : window_(window), heads_(heads) {
    const int span = 2 * window - 1;
    table.value = Mat::Zero(span * span, heads);
    table.shape = {span * span, heads};
    const int n = window * window;
    index_.resize(static_cast<std::size_t>(n) * n);
    for (int i = 0; i < n; ++i) {
        const int yi = i / window;
        const int xi = i % window;
        for (int j = 0; j < n; ++j) {
            const int yj = j / window;
            const int xj = j % window;
            index_[static_cast<std::size_t>(i) * n + j] = (yi - yj + window - 1) * span + (xi - xj + window - 1);
        }
    }
}

Mat RelPosBias::head_bias(int head) const {
    const int n = tokens();
    Mat b(n, n);
    for (int i = 0; i < n * n; ++i) {
        b.data()[i] = table.value(index_[static_cast<std::size_t>(i)], head);
    }
    return b;
}

void RelPosBias::accumulate_grad(int head, const Mat& d_logits) {
    if (!table.trainable) {
        return;
    }
    table.ensure_grad();
    const int n = tokens();
    for (int i = 0; i < n * n; ++i) {
        table.grad(index_[static_cast<std::size_t>(i)], head) += d_logits.data()[i];
    }
}

// ---------------------------------------------------------------------------
// attention

namespace {

void softmax_rows(Mat& s) {
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        const float m = s.row(i).maxCoeff();
        s.row(i) = (s.row(i).array() - m).exp();
        s.row(i) /= s.row(i).sum();
    }
}

Mat attention_core(const Mat& qkv_out, const RelPosBias& bias, int dim, int heads, std::vector<Mat>* probs) {
    const int n = bias.tokens();
    if (qkv_out.rows() % n != 0) {
        throw DimensionError("token count is not a multiple of the window size");
    }
    const int windows = static_cast<int>(qkv_out.rows() / n);
    const int dk = dim / heads;
    const float scale = 1.0f / std::sqrt(static_cast<float>(dk));
    std::vector<Mat> head_bias;
    head_bias.reserve(heads);
    for (int h = 0; h < heads; ++h) {
        head_bias.push_back(bias.head_bias(h));
    }
    if (probs) {
        probs->resize(static_cast<std::size_t>(windows) * heads);
    }
    Mat out(qkv_out.rows(), dim);
    for (int w = 0; w < windows; ++w) {
        for (int h = 0; h < heads; ++h) {
            const auto q = qkv_out.block(w * n, h * dk, n, dk);
            const auto k = qkv_out.block(w * n, dim + h * dk, n, dk);
            const auto v = qkv_out.block(w * n, 2 * dim + h * dk, n, dk);
            Mat s = (q * scale) * k.transpose();
            s += head_bias[h];
            softmax_rows(s);
            out.block(w * n, h * dk, n, dk).noalias() = s * v;
            if (probs) {
                (*probs)[static_cast<std::size_t>(w) * heads + h] = std::move(s);
            }
        }
    }
    return out;
}

} // namespace

WindowAttention::WindowAttention(int dim, int heads, int window)
    : qkv(dim, 3 * dim), proj(dim, dim), rel_pos(window, heads), dim_(dim), heads_(heads) {}

Mat WindowAttention::forward(const Mat& x, bool keep) {
    Mat qkv_out = qkv.forward(x, keep);
    Mat attended = attention_core(qkv_out, rel_pos, dim_, heads_, keep ? &probs_ : nullptr);
    if (keep) {
        qkv_out_ = std::move(qkv_out);
    }
    return proj.forward(attended, keep);
}

Mat WindowAttention::backward(const Mat& dy) {
    Mat g_att = proj.backward(dy);
    const int n = rel_pos.tokens();
    const int windows = static_cast<int>(qkv_out_.rows() / n);
    const int dk = dim_ / heads_;
    const float scale = 1.0f / std::sqrt(static_cast<float>(dk));
    Mat g_qkv(qkv_out_.rows(), 3 * dim_);
    for (int w = 0; w < windows; ++w) {
        for (int h = 0; h < heads_; ++h) {
            const Mat& p = probs_[static_cast<std::size_t>(w) * heads_ + h];
            const auto q = qkv_out_.block(w * n, h * dk, n, dk);
            const auto k = qkv_out_.block(w * n, dim_ + h * dk, n, dk);
            const auto v = qkv_out_.block(w * n, 2 * dim_ + h * dk, n, dk);
            const auto g_o = g_att.block(w * n, h * dk, n, dk);

            g_qkv.block(w * n, 2 * dim_ + h * dk, n, dk).noalias() = p.transpose() * g_o;
            Mat g_p = g_o * v.transpose();
            Eigen::VectorXf row_dot = (g_p.array() * p.array()).rowwise().sum();
            Mat g_s = p.array() * (g_p.array().colwise() - row_dot.array());
            rel_pos.accumulate_grad(h, g_s);
            g_qkv.block(w * n, h * dk, n, dk).noalias() = (g_s * k) * scale;
            g_qkv.block(w * n, dim_ + h * dk, n, dk).noalias() = g_s.transpose() * (q * scale);
        }
    }
    return qkv.backward(g_qkv);
}

void WindowAttention::visit(const std::string& prefix, const nn::ParamVisitor& fn) {
    qkv.visit(prefix + ".qkv", fn);
    proj.visit(prefix + ".proj", fn);
    fn(prefix + ".rel_pos_table", rel_pos.table);
}

Mat window_attention(const Mat& x, nn::Linear& qkv, nn::Linear& proj, const RelPosBias& bias, int heads,
                     std::vector<Mat>* probs) {
    const int dim = static_cast<int>(x.cols());
    if (heads < 1 || dim % heads != 0) {
        throw DimensionError("attention width is not divisible by the head count");
    }
    if (qkv.fan_in() != dim || qkv.fan_out() != 3 * dim || proj.fan_in() != dim || proj.fan_out() != dim) {
        throw DimensionError("qkv/proj shapes do not match the token width");
    }
    if (bias.heads() != heads) {
        throw DimensionError("relative position table head count mismatch");
    }
    Mat qkv_out = qkv.forward(x, false);
    return proj.forward(attention_core(qkv_out, bias, dim, heads, probs), false);
}

// ---------------------------------------------------------------------------
// mlp

Mlp::Mlp(int dim, int hidden) : fc1(dim, hidden), fc2(hidden, dim) {}

Mat Mlp::forward(const Mat& x, bool keep) {
    Mat h = fc1.forward(x, keep);
    Mat a = h.unaryExpr([](float v) { return ops::gelu(v); });
    if (keep) {
        pre_act_ = std::move(h);
    }
    return fc2.forward(a, keep);
}

Mat Mlp::backward(const Mat& dy) {
    Mat ga = fc2.backward(dy);
    Mat gh = ga.array() * pre_act_.unaryExpr([](float v) { return ops::gelu_grad(v); }).array();
    return fc1.backward(gh);
}

void Mlp::visit(const std::string& prefix, const nn::ParamVisitor& fn) {
    fc1.visit(prefix + ".fc1", fn);
    fc2.visit(prefix + ".fc2", fn);
}

Mat mlp_forward(const Mat& x, nn::Linear& fc1, nn::Linear& fc2) {
    if (fc1.fan_out() != fc2.fan_in() || fc1.fan_in() != x.cols()) {
        throw DimensionError("mlp layer shapes do not chain");
    }
    Mat h = fc1.forward(x, false);
    h = h.unaryExpr([](float v) { return ops::gelu(v); });
    return fc2.forward(h, false);
}

// ---------------------------------------------------------------------------
// window partition

Mat to_window_tokens(const Tensor4& x, int window) {
    if (x.h % window != 0 || x.w % window != 0) {
        throw DimensionError("feature map is not a multiple of the window size");
    }
    const int wy = x.h / window;
    const int wx = x.w / window;
    Mat t(static_cast<Eigen::Index>(x.n) * x.h * x.w, x.c);
    for (int b = 0; b < x.n; ++b) {
        for (int c = 0; c < x.c; ++c) {
            const float* src = x.plane(b, c);
            for (int y = 0; y < x.h; ++y) {
                for (int xx = 0; xx < x.w; ++xx) {
                    const Eigen::Index win = (static_cast<Eigen::Index>(b) * wy + y / window) * wx + xx / window;
                    const Eigen::Index row = win * window * window + (y % window) * window + (xx % window);
                    t(row, c) = src[static_cast<std::size_t>(y) * x.w + xx];
                }
            }
        }
    }
    return t;
}

Tensor4 from_window_tokens(const Mat& tokens, int n, int h, int w, int window) {
    const int c = static_cast<int>(tokens.cols());
    const int wy = h / window;
    const int wx = w / window;
    Tensor4 x(n, c, h, w);
    for (int b = 0; b < n; ++b) {
        for (int y = 0; y < h; ++y) {
            for (int xx = 0; xx < w; ++xx) {
                const Eigen::Index win = (static_cast<Eigen::Index>(b) * wy + y / window) * wx + xx / window;
                const Eigen::Index row = win * window * window + (y % window) * window + (xx % window);
                for (int ch = 0; ch < c; ++ch) {
                    x.at(b, ch, y, xx) = tokens(row, ch);
                }
            }
        }
    }
    return x;
}

} // namespace adaptsr
