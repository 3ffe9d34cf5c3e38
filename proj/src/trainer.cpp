#include "adaptsr/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <spdlog/spdlog.h>

#include "adaptsr/errors.hpp"
#include "adaptsr/injection.hpp"
#include "adaptsr/rng.hpp"

namespace adaptsr {

std::string to_string(TrainMode mode) {
    switch (mode) {
        case TrainMode::lora: return "lora";
        case TrainMode::full_ft: return "full_ft";
        case TrainMode::pretrain: return "pretrain";
    }
    return "?";
}

std::optional<TrainMode> parse_train_mode(const std::string& name) {
    if (name == "lora") return TrainMode::lora;
    if (name == "full_ft") return TrainMode::full_ft;
    if (name == "pretrain") return TrainMode::pretrain;
    return std::nullopt;
}

std::vector<Milestone> lora_milestones() {
    return {{0.5, 0.75}, {0.75, 0.75}, {0.9, 0.75}};
}

std::vector<Milestone> full_ft_milestones() {
    return {{0.5, 0.5}, {0.8, 0.5}, {0.9, 0.5}, {0.95, 0.5}};
}

void TrainConfig::validate() const {
    if (iters < 0) throw InvalidConfig("iters must be >= 0");
    if (batch < 1) throw InvalidConfig("batch must be >= 1");
    if (!(lr0 > 0.0)) throw InvalidConfig("lr0 must be positive");
    if (eval_every < 1) throw InvalidConfig("eval_every must be >= 1");
    if (workers < 1) throw InvalidConfig("workers must be >= 1");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
        throw InvalidConfig("Adam betas must lie in [0,1)");
    }
    if (!(eps > 0.0)) throw InvalidConfig("eps must be positive");
    double prev = -1.0;
    for (const auto& m : milestones) {
        if (m.fraction < 0.0 || m.fraction > 1.0) {
            throw InvalidConfig("milestone fractions must lie in [0,1]");
        }
        if (m.fraction < prev) {
            throw InvalidConfig("milestones must be sorted by fraction");
        }
        if (!(m.multiplier > 0.0 && m.multiplier <= 1.0)) {
            throw InvalidConfig("milestone multipliers must lie in (0,1]");
        }
        prev = m.fraction;
    }
}

TrainConfig TrainConfig::for_mode(TrainMode mode) {
    TrainConfig cfg;
    cfg.mode = mode;
    cfg.milestones = mode == TrainMode::lora ? lora_milestones() : full_ft_milestones();
    return cfg;
}

int milestone_iter(const Milestone& m, int iters) {
    return static_cast<int>(std::llround(m.fraction * iters));
}

double lr_at(int t, const TrainConfig& cfg) {
    if (t < 0 || t >= cfg.iters) {
        throw InvalidConfig("iteration " + std::to_string(t) + " outside [0, " + std::to_string(cfg.iters) + ")");
    }
    double lr = cfg.lr0;
    for (const auto& m : cfg.milestones) {
        if (milestone_iter(m, cfg.iters) <= t) lr *= m.multiplier;
    }
    return lr;
}

Batch make_batch(const std::vector<TrainingPair>& pairs) {
    if (pairs.empty()) {
        throw InvalidConfig("empty batch");
    }
    std::vector<Image> lr;
    std::vector<Image> hr;
    lr.reserve(pairs.size());
    hr.reserve(pairs.size());
    for (const auto& p : pairs) {
        lr.push_back(p.lr);
        hr.push_back(p.hr);
    }
    return {Tensor4::stack(lr), Tensor4::stack(hr)};
}

double l1_loss(const Tensor4& sr, const Tensor4& hr, Tensor4* grad) {
    if (!sr.same_shape(hr)) {
        throw DimensionError("SR and HR shapes differ");
    }
    const std::size_t n = sr.data.size();
    double sum = 0.0;
    if (grad) *grad = Tensor4(sr.n, sr.c, sr.h, sr.w);
    const float inv = 1.0f / static_cast<float>(n);
    for (std::size_t i = 0; i < n; ++i) {
        const float d = sr.data[i] - hr.data[i];
        sum += std::abs(d);
        if (grad) grad->data[i] = d > 0.0f ? inv : (d < 0.0f ? -inv : 0.0f);
    }
    return sum / static_cast<double>(n);
}

namespace {

void check_mode(Backbone& model, TrainMode mode) {
    const bool injected = model.adapter_setup().has_value();
    if (mode == TrainMode::lora && !injected) {
        throw StateError("lora training needs an injected model");
    }
    if (mode != TrainMode::lora && injected) {
        throw StateError(to_string(mode) + " training needs a plain model; merge the adapters first");
    }
}

void adam_update(Backbone& model, OptimizerState& state, double lr, const TrainConfig& cfg) {
    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    const float b1 = static_cast<float>(cfg.beta1);
    const float b2 = static_cast<float>(cfg.beta2);
    const float step_size = static_cast<float>(lr / bc1);
    const float sqrt_bc2 = static_cast<float>(std::sqrt(bc2));
    const float eps = static_cast<float>(cfg.eps);
    model.visit_params([&](const std::string& name, Param& p) {
        if (!p.trainable) return;
        p.ensure_grad();
        auto [it, fresh] = state.moments.try_emplace(name);
        Moments& mo = it->second;
        if (fresh) {
            mo.m = Mat::Zero(p.value.rows(), p.value.cols());
            mo.v = Mat::Zero(p.value.rows(), p.value.cols());
        }
        auto g = p.grad.array();
        mo.m.array() = b1 * mo.m.array() + (1.0f - b1) * g;
        mo.v.array() = b2 * mo.v.array() + (1.0f - b2) * g.square();
        p.value.array() -= step_size * mo.m.array() / (mo.v.array().sqrt() / sqrt_bc2 + eps);
    });
}

} // namespace

double train_step(Backbone& model, const Batch& batch, OptimizerState& state, TrainMode mode, double lr,
                  const TrainConfig& cfg) {
    check_mode(model, mode);
    Tensor4 sr = model.forward(batch.lr, true);
    Tensor4 grad;
    const double loss = l1_loss(sr, batch.hr, &grad);
    model.zero_grad();
    model.backward(grad);
    adam_update(model, state, lr, cfg);
    return loss;
}

MetricConfig eval_metric_config(int upscale) {
    MetricConfig m;
    m.use_y_channel = true;
    m.crop_border = upscale;
    return m;
}

EvalResult evaluate(Backbone& model, const std::vector<TrainingPair>& val, const MetricConfig& metrics) {
    if (val.empty()) {
        throw InvalidConfig("empty validation set");
    }
    constexpr std::size_t kChunk = 8;
    double psnr_sum = 0.0;
    double ssim_sum = 0.0;
    for (std::size_t start = 0; start < val.size(); start += kChunk) {
        const std::size_t end = std::min(val.size(), start + kChunk);
        std::vector<Image> lr;
        for (std::size_t i = start; i < end; ++i) lr.push_back(val[i].lr);
        const Tensor4 sr = model_forward(model, Tensor4::stack(lr));
        for (std::size_t i = start; i < end; ++i) {
            const Image out = sr.image(static_cast<int>(i - start));
            psnr_sum += psnr(out, val[i].hr, metrics);
            ssim_sum += ssim(out, val[i].hr, metrics);
        }
    }
    const auto n = static_cast<double>(val.size());
    return {psnr_sum / n, ssim_sum / n};
}

EvalResult evaluate(Backbone& model, const std::vector<TrainingPair>& val) {
    return evaluate(model, val, eval_metric_config(model.upscale()));
}

std::vector<TrainingPair> make_validation_pairs(const std::vector<Image>& corpus, int patch_size,
                                                const DegradationConfig& degradation, std::uint64_t seed) {
    PatchSampler sampler;
    sampler.patch_size = patch_size;
    sampler.per_image = 1;
    sampler.seed = seed;
    DegradationConfig cfg = degradation;
    cfg.seed = derive_seed(degradation.seed, {seed});
    return sample_pairs(corpus, sampler, cfg, static_cast<int>(corpus.size()), 0);
}

namespace {

std::string fmt_metric(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", std::isinf(v) ? kPsnrCap : v);
    return buf;
}

} // namespace

void write_history_csv(const RunHistory& history, const std::filesystem::path& path) {
    std::map<int, std::string> loss;
    std::map<int, std::string> lr;
    std::map<int, std::pair<std::string, std::string>> ev;
    std::map<int, bool> iters;
    for (const auto& [t, v] : history.loss_curve) {
        loss[t] = fmt_metric(v);
        iters[t] = true;
    }
    for (const auto& [t, v] : history.lr_curve) {
        lr[t] = fmt_metric(v);
        iters[t] = true;
    }
    for (const auto& e : history.eval_curve) {
        ev[e.iter] = {fmt_metric(e.psnr), fmt_metric(e.ssim)};
        iters[e.iter] = true;
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out << "iter,loss,lr,psnr,ssim\n";
    for (const auto& [t, _] : iters) {
        out << t << ',' << (loss.count(t) ? loss[t] : "") << ',' << (lr.count(t) ? lr[t] : "") << ',';
        if (ev.count(t)) {
            out << ev[t].first << ',' << ev[t].second;
        } else {
            out << ',';
        }
        out << '\n';
    }
    if (!out) {
        throw IoError("failed writing " + path.string());
    }
}

RunHistory run_training(Backbone& model, const DataHandles& data, const TrainConfig& cfg,
                        const std::optional<std::filesystem::path>& run_dir) {
    cfg.validate();
    check_mode(model, cfg.mode);
    if (!data.corpus || data.corpus->empty()) {
        throw InvalidConfig("training corpus is empty");
    }
    if (!data.val || data.val->empty()) {
        throw InvalidConfig("validation set is empty");
    }
    const MetricConfig metrics = data.metrics.value_or(eval_metric_config(model.upscale()));
    const auto started = std::chrono::steady_clock::now();
    RunHistory history;
    OptimizerState state;
    auto eval_point = [&](int t) {
        const EvalResult r = evaluate(model, *data.val, metrics);
        history.eval_curve.push_back({t, r.psnr, r.ssim});
        spdlog::info("iter {:>6}  psnr {:.4f}  ssim {:.4f}", t, r.psnr, r.ssim);
        return r;
    };
    std::optional<EvalResult> last;
    for (int t = 0; t < cfg.iters; ++t) {
        if (t % cfg.eval_every == 0) eval_point(t);
        const double lr = lr_at(t, cfg);
        const Batch batch = make_batch(sample_pairs(*data.corpus, data.sampler, data.degradation, cfg.batch,
                                                    static_cast<std::uint64_t>(t), cfg.workers));
        const double loss = train_step(model, batch, state, cfg.mode, lr, cfg);
        history.loss_curve.emplace_back(t, loss);
        history.lr_curve.emplace_back(t, lr);
    }
    if (cfg.iters % cfg.eval_every == 0) {
        last = eval_point(cfg.iters);
    }
    history.final_eval = last ? *last : evaluate(model, *data.val, metrics);
    history.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

    if (run_dir) {
        std::filesystem::create_directories(*run_dir / "checkpoints");
        write_history_csv(history, *run_dir / "history.csv");
        if (cfg.mode == TrainMode::lora) {
            save_adapters(model, *run_dir / "checkpoints" / "adapters.ckpt");
        } else {
            save_checkpoint(model, *run_dir / "checkpoints" / "model.ckpt");
        }
    }
    return history;
}

} // namespace adaptsr
