#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "adaptsr/backbones.hpp"
#include "adaptsr/datapipe.hpp"
#include "adaptsr/lora.hpp"
#include "adaptsr/metrics.hpp"
#include "adaptsr/trainer.hpp"

namespace adaptsr {

enum class ValueType { integer, real, boolean, text, range };

struct FieldSpec {
    std::string key;  // "section.name"
    ValueType type;
    std::string default_value;
    std::string doc;
};

/// Every accepted key, in the order the resolved config lists them.
const std::vector<FieldSpec>& config_schema();
const FieldSpec* find_field(const std::string& key);

using ConfigValue = std::variant<long long, double, bool, std::string, Range>;

/// Flat `section.key` → value map covering the whole schema.
class ConfigValues {
public:
    /// All keys at their schema defaults.
    ConfigValues();

    /// Parses `text` according to the key's type; unknown keys and bad values throw InvalidConfig.
    void set(const std::string& key, const std::string& text);
    void set_value(const std::string& key, ConfigValue value);
    const ConfigValue& get(const std::string& key) const;

    long long integer(const std::string& key) const;
    double real(const std::string& key) const;
    bool boolean(const std::string& key) const;
    const std::string& text(const std::string& key) const;
    Range range(const std::string& key) const;

    /// Overlays a YAML document of the form `section: {key: value}`.
    void merge_yaml(const std::string& yaml_text);
    void merge_yaml_file(const std::filesystem::path& path);
    /// YAML listing every key; reading it back reproduces these values.
    std::string to_yaml() const;

private:
    std::map<std::string, ConfigValue> values_;
};

std::string format_value(const ConfigValue& v);

struct PathsConfig {
    std::string train;
    std::string val;
    std::string run;
    std::string base;
};

/// Typed view of a ConfigValues document.
struct RunConfig {
    BackboneConfig backbone;
    LoraConfig lora;
    std::string targets;
    DegradationConfig degradation;
    TrainConfig train;
    PatchSampler sampler;
    MetricConfig metrics;
    PathsConfig paths;
    int synthetic_images = 384;
    int synthetic_size = 128;
    int val_images = 16;
    int val_size = 64;
};

/// `mode` picks the schedule behind `train.milestones: auto`.
RunConfig materialize(const ConfigValues& values, TrainMode mode = TrainMode::lora);

} // namespace adaptsr
