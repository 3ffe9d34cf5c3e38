#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "adaptsr/backbones.hpp"
#include "adaptsr/lora.hpp"

namespace adaptsr {

enum class Preset { all, convs, msa, mlp, first_conv, rstlb_convs, dfe_convs, bu_conv, au_conv, rlb_convs };

std::string to_string(Preset preset);
std::optional<Preset> parse_preset(const std::string& name);

/// Either a named preset or a list of glob patterns over registry names.
struct TargetSpec {
    std::optional<Preset> preset;
    std::vector<std::string> patterns;

    static TargetSpec from_preset(Preset p) { return TargetSpec{p, {}}; }
    static TargetSpec from_patterns(std::vector<std::string> patterns) {
        return TargetSpec{std::nullopt, std::move(patterns)};
    }
    /// A preset name, or a comma-separated list of patterns.
    static TargetSpec parse(const std::string& text);
    std::string str() const;
};

struct ReportRow {
    std::string name;
    std::optional<LayerKind> kind;  // empty for the aggregate of non-adaptable params
    std::optional<LayerGroup> group;
    std::size_t base_params = 0;
    std::size_t lora_params = 0;
};

struct InjectionReport {
    std::vector<ReportRow> rows;
    std::size_t base_total = 0;
    std::size_t lora_total = 0;
    double trainable_fraction = 0.0;

    std::string table() const;
};

/// Registry-ordered names selected by `spec`; throws TargetResolutionError on an
/// empty match or a preset naming a group the backbone does not have.
std::vector<std::string> resolve_targets(const LayerRegistry& registry, const TargetSpec& spec);

/// Wraps the selected layers with zero-initialized adapters and freezes every base parameter.
InjectionReport inject(Backbone& model, const TargetSpec& spec, const LoraConfig& cfg);

/// Closed-form accounting from the registry: r·(fan_in + fan_out) per adapted layer.
InjectionReport count_params(Backbone& model);

/// Folds every adapter in place (state merged) without removing it.
void merge_adapters(Backbone& model);
void unmerge_adapters(Backbone& model);

/// Merges and strips every adapter, leaving the plain base architecture.
void merge_all(Backbone& model);

/// Marks parameters trainable for the given training style.
void freeze_base(Backbone& model);
void unfreeze_all(Backbone& model);

/// Deep copy, including any injected adapters.
std::unique_ptr<Backbone> clone_model(Backbone& model);

// ---------------------------------------------------------------------------
// checkpoints

/// Full plain-model checkpoint (also the merged export format).
void save_checkpoint(Backbone& model, const std::filesystem::path& path);
std::unique_ptr<Backbone> load_checkpoint(const std::filesystem::path& path);

/// Adapter-only checkpoint: A/B factors plus the injection metadata.
void save_adapters(Backbone& model, const std::filesystem::path& path);
/// Loads into an already-injected model whose layout must match the file.
void load_adapters(Backbone& model, const std::filesystem::path& path);
/// Injects the layout recorded in the file, then loads it.
void inject_and_load_adapters(Backbone& model, const std::filesystem::path& path);

} // namespace adaptsr
