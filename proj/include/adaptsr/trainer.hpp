#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "adaptsr/backbones.hpp"
#include "adaptsr/datapipe.hpp"
#include "adaptsr/metrics.hpp"

namespace adaptsr {

enum class TrainMode { lora, full_ft, pretrain };

std::string to_string(TrainMode mode);
std::optional<TrainMode> parse_train_mode(const std::string& name);

/// At iteration round(fraction·iters) the learning rate is multiplied by `multiplier`.
struct Milestone {
    double fraction = 0.5;
    double multiplier = 0.5;
};

std::vector<Milestone> lora_milestones();
std::vector<Milestone> full_ft_milestones();

struct TrainConfig {
    TrainMode mode = TrainMode::lora;
    int iters = 1000;
    int batch = 8;
    double lr0 = 1e-3;
    std::vector<Milestone> milestones = lora_milestones();
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t seed = 0;
    /// Evaluation happens at every iteration that is a multiple of this (including 0).
    int eval_every = 250;
    /// Data-loading threads; results do not depend on it.
    int workers = 1;

    void validate() const;
    /// Defaults with the milestone schedule belonging to `mode`.
    static TrainConfig for_mode(TrainMode mode);
};

/// lr0 times the product of multipliers whose milestone iteration is <= t.
double lr_at(int t, const TrainConfig& cfg);
int milestone_iter(const Milestone& m, int iters);

struct Moments {
    Mat m;
    Mat v;
};

/// Adam state; only parameters that were trainable at update time get an entry.
struct OptimizerState {
    std::int64_t step = 0;
    std::map<std::string, Moments> moments;
};

struct Batch {
    Tensor4 lr;
    Tensor4 hr;
};

Batch make_batch(const std::vector<TrainingPair>& pairs);

/// mean |sr - hr|; writes dL/dsr into `grad` when given.
double l1_loss(const Tensor4& sr, const Tensor4& hr, Tensor4* grad);

/// One forward/backward/Adam update at learning rate `lr`. Returns the batch L1 loss.
double train_step(Backbone& model, const Batch& batch, OptimizerState& state, TrainMode mode, double lr,
                  const TrainConfig& cfg = {});

struct EvalResult {
    double psnr = 0.0;
    double ssim = 0.0;
};

/// Metric settings used for validation: luma, border crop of `upscale` pixels.
MetricConfig eval_metric_config(int upscale);

/// Mean of per-image PSNR and SSIM over `val`, with model outputs clamped to [0,1].
EvalResult evaluate(Backbone& model, const std::vector<TrainingPair>& val, const MetricConfig& metrics);
EvalResult evaluate(Backbone& model, const std::vector<TrainingPair>& val);

/// Every image of `corpus` contributes one deterministic patch.
std::vector<TrainingPair> make_validation_pairs(const std::vector<Image>& corpus, int patch_size,
                                                const DegradationConfig& degradation, std::uint64_t seed);

struct EvalPoint {
    int iter = 0;
    double psnr = 0.0;
    double ssim = 0.0;
};

struct RunHistory {
    std::vector<std::pair<int, double>> loss_curve;
    std::vector<EvalPoint> eval_curve;
    std::vector<std::pair<int, double>> lr_curve;
    double wall_time = 0.0;
    /// Metrics of the model as returned, whatever eval_every is.
    EvalResult final_eval;
};

struct DataHandles {
    const std::vector<Image>* corpus = nullptr;
    PatchSampler sampler;
    DegradationConfig degradation;
    const std::vector<TrainingPair>* val = nullptr;
    std::optional<MetricConfig> metrics;
};

/// Trains in place. With `run_dir` set, writes history.csv and checkpoints/ there
/// (adapters.ckpt in lora mode, model.ckpt otherwise).
RunHistory run_training(Backbone& model, const DataHandles& data, const TrainConfig& cfg,
                        const std::optional<std::filesystem::path>& run_dir = std::nullopt);

void write_history_csv(const RunHistory& history, const std::filesystem::path& path);

} // namespace adaptsr
