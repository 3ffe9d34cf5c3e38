#include "adaptsr/run_config.hpp"

#include <charconv>
#include <limits>
#include <fstream>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "adaptsr/errors.hpp"

namespace adaptsr {

const std::vector<FieldSpec>& config_schema() {
    using T = ValueType;
    static const std::vector<FieldSpec> schema = {
        {"backbone.kind", T::text, "tiny-edsr", "tiny-edsr or tiny-swin"},
        {"backbone.upscale", T::integer, "4", "super-resolution factor (2, 3 or 4)"},
        {"backbone.upsample_feats", T::integer, "8", "channels entering the pixel shuffle"},
        {"backbone.seed", T::integer, "0", "weight initialisation seed"},
        {"backbone.n_feats", T::integer, "32", "tiny-edsr feature channels"},
        {"backbone.n_resblocks", T::integer, "4", "tiny-edsr residual blocks"},
        {"backbone.res_scale", T::real, "1", "tiny-edsr residual scaling"},
        {"backbone.embed_dim", T::integer, "32", "tiny-swin token width"},
        {"backbone.n_rtlb", T::integer, "2", "tiny-swin residual transformer blocks"},
        {"backbone.tll_per_rtlb", T::integer, "2", "tiny-swin transformer layers per block"},
        {"backbone.n_heads", T::integer, "4", "tiny-swin attention heads"},
        {"backbone.window", T::integer, "8", "tiny-swin attention window"},
        {"backbone.mlp_ratio", T::real, "2", "tiny-swin MLP expansion"},
        {"backbone.img_range", T::real, "1", "tiny-swin input scaling"},
        {"lora.rank", T::integer, "8", "adapter rank r"},
        {"lora.alpha", T::real, "1", "adapter alpha; scale is alpha/r"},
        {"lora.init_std", T::real, "0.02", "std of the A initialisation"},
        {"lora.seed", T::integer, "0", "adapter initialisation seed"},
        {"targets.spec", T::text, "all", "preset name or comma-separated name globs"},
        {"degradation.blur_kernel", T::integer, "7", "odd Gaussian kernel size"},
        {"degradation.blur_sigma", T::range, "0.2,2", "blur sigma range"},
        {"degradation.noise_sigma", T::range, "1,10", "noise std range, 0-255 units"},
        {"degradation.jpeg_quality", T::range, "60,95", "JPEG quality range; 100 disables"},
        {"degradation.second_order", T::boolean, "true", "apply a lighter second pass"},
        {"degradation.bicubic_mix", T::real, "0", "probability of a pure bicubic pair"},
        {"degradation.seed", T::integer, "0", "degradation seed"},
        {"train.iters", T::integer, "1000", "optimizer steps"},
        {"train.batch", T::integer, "8", "pairs per step"},
        {"train.lr0", T::real, "0.001", "initial learning rate"},
        {"train.milestones", T::text, "auto", "auto or fraction:multiplier list"},
        {"train.beta1", T::real, "0.9", "Adam beta1"},
        {"train.beta2", T::real, "0.999", "Adam beta2"},
        {"train.eps", T::real, "1e-08", "Adam epsilon"},
        {"train.seed", T::integer, "0", "patch sampling seed"},
        {"train.eval_every", T::integer, "250", "validation interval"},
        {"train.workers", T::integer, "1", "data loading threads"},
        {"train.patch_size", T::integer, "64", "HR patch size"},
        {"train.per_image", T::integer, "0", "consecutive patches per image (0 = random)"},
        {"train.synthetic_images", T::integer, "384", "synthetic training images when paths.train is empty"},
        {"train.synthetic_size", T::integer, "128", "synthetic training image size"},
        {"train.val_images", T::integer, "16", "synthetic validation images when paths.val is empty"},
        {"train.val_size", T::integer, "64", "synthetic validation image size"},
        {"metrics.use_y_channel", T::boolean, "true", "measure on BT.601 luma"},
        {"metrics.crop_border", T::integer, "-1", "border crop; -1 uses the upscale factor"},
        {"metrics.ssim_window", T::integer, "11", "SSIM Gaussian window"},
        {"metrics.ssim_sigma", T::real, "1.5", "SSIM Gaussian sigma"},
        {"paths.train", T::text, "", "directory of training PNGs"},
        {"paths.val", T::text, "", "directory of validation PNGs"},
        {"paths.run", T::text, "", "run directory"},
        {"paths.base", T::text, "", "base model checkpoint"},
    };
    return schema;
}

const FieldSpec* find_field(const std::string& key) {
    for (const auto& f : config_schema()) {
        if (f.key == key) return &f;
    }
    return nullptr;
}

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\n\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\n\r");
    return s.substr(b, e - b + 1);
}

template <typename N>
N parse_number(const std::string& key, const std::string& raw) {
    const std::string s = trim(raw);
    N v{};
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc{} || ptr != s.data() + s.size()) {
        throw InvalidConfig("bad value '" + raw + "' for " + key);
    }
    return v;
}

ConfigValue parse_value(const FieldSpec& f, const std::string& raw) {
    switch (f.type) {
        case ValueType::integer: return parse_number<long long>(f.key, raw);
        case ValueType::real: return parse_number<double>(f.key, raw);
        case ValueType::boolean: {
            const std::string s = trim(raw);
            if (s == "true" || s == "1" || s == "yes") return true;
            if (s == "false" || s == "0" || s == "no") return false;
            throw InvalidConfig("bad boolean '" + raw + "' for " + f.key);
        }
        case ValueType::text: return raw;
        case ValueType::range: {
            std::string s = trim(raw);
            if (!s.empty() && s.front() == '[' && s.back() == ']') s = s.substr(1, s.size() - 2);
            const auto comma = s.find(',');
            if (comma == std::string::npos) {
                const double v = parse_number<double>(f.key, s);
                return Range{v, v};
            }
            return Range{parse_number<double>(f.key, s.substr(0, comma)),
                         parse_number<double>(f.key, s.substr(comma + 1))};
        }
    }
    throw InvalidConfig("unsupported type for " + f.key);
}

std::string format_real(double v) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

const FieldSpec& require_field(const std::string& key) {
    const FieldSpec* f = find_field(key);
    if (!f) throw InvalidConfig("unknown config key '" + key + "'");
    return *f;
}

template <typename V>
const V& typed(const std::map<std::string, ConfigValue>& values, const std::string& key) {
    const auto it = values.find(key);
    if (it == values.end()) throw InvalidConfig("unknown config key '" + key + "'");
    const V* v = std::get_if<V>(&it->second);
    if (!v) throw InvalidConfig("config key '" + key + "' has a different type");
    return *v;
}

} // namespace

std::string format_value(const ConfigValue& v) {
    return std::visit(
        [](const auto& x) -> std::string {
            using X = std::decay_t<decltype(x)>;
            if constexpr (std::is_same_v<X, long long>) {
                return std::to_string(x);
            } else if constexpr (std::is_same_v<X, double>) {
                return format_real(x);
            } else if constexpr (std::is_same_v<X, bool>) {
                return x ? "true" : "false";
            } else if constexpr (std::is_same_v<X, std::string>) {
                return x;
            } else {
                return "[" + format_real(x.lo) + ", " + format_real(x.hi) + "]";
            }
        },
        v);
}

ConfigValues::ConfigValues() {
    for (const auto& f : config_schema()) {
        values_[f.key] = parse_value(f, f.default_value);
    }
}

void ConfigValues::set(const std::string& key, const std::string& text) {
    values_[key] = parse_value(require_field(key), text);
}

void ConfigValues::set_value(const std::string& key, ConfigValue value) {
    const FieldSpec& f = require_field(key);
    if (value.index() != values_.at(f.key).index()) {
        throw InvalidConfig("config key '" + key + "' has a different type");
    }
    values_[key] = std::move(value);
}

const ConfigValue& ConfigValues::get(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw InvalidConfig("unknown config key '" + key + "'");
    return it->second;
}

long long ConfigValues::integer(const std::string& key) const { return typed<long long>(values_, key); }
double ConfigValues::real(const std::string& key) const { return typed<double>(values_, key); }
bool ConfigValues::boolean(const std::string& key) const { return typed<bool>(values_, key); }
const std::string& ConfigValues::text(const std::string& key) const { return typed<std::string>(values_, key); }
Range ConfigValues::range(const std::string& key) const { return typed<Range>(values_, key); }

void ConfigValues::merge_yaml(const std::string& yaml_text) {
    YAML::Node root;
    try {
        root = YAML::Load(yaml_text);
    } catch (const YAML::Exception& e) {
        throw InvalidConfig(std::string("malformed config: ") + e.what());
    }
    if (root.IsNull()) return;
    if (!root.IsMap()) throw InvalidConfig("config must be a mapping of sections");
    for (const auto& section : root) {
        const std::string name = section.first.as<std::string>();
        const YAML::Node& body = section.second;
        if (name == "targets" && body.IsScalar()) {
            set("targets.spec", body.as<std::string>());
            continue;
        }
        if (body.IsNull()) continue;
        if (!body.IsMap()) throw InvalidConfig("section '" + name + "' must be a mapping");
        for (const auto& item : body) {
            const std::string key = name + "." + item.first.as<std::string>();
            const FieldSpec& f = require_field(key);
            const YAML::Node& v = item.second;
            if (v.IsSequence() && f.type == ValueType::range && v.size() == 2) {
                set(key, v[0].as<std::string>() + "," + v[1].as<std::string>());
            } else if (v.IsScalar()) {
                set(key, v.as<std::string>());
            } else if (v.IsNull() && f.type == ValueType::text) {
                set(key, "");
            } else {
                throw InvalidConfig("bad value for " + key);
            }
        }
    }
}

void ConfigValues::merge_yaml_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    merge_yaml(ss.str());
}

std::string ConfigValues::to_yaml() const {
    YAML::Emitter out;
    out << YAML::BeginMap;
    std::string section;
    for (const auto& f : config_schema()) {
        const auto dot = f.key.find('.');
        const std::string sec = f.key.substr(0, dot);
        if (sec != section) {
            if (!section.empty()) out << YAML::EndMap;
            out << YAML::Key << sec << YAML::Value << YAML::BeginMap;
            section = sec;
        }
        out << YAML::Key << f.key.substr(dot + 1) << YAML::Value;
        const ConfigValue& v = values_.at(f.key);
        if (const Range* r = std::get_if<Range>(&v)) {
            out << YAML::Flow << YAML::BeginSeq << format_real(r->lo) << format_real(r->hi) << YAML::EndSeq;
        } else if (const std::string* s = std::get_if<std::string>(&v)) {
            out << YAML::DoubleQuoted << *s;
        } else {
            out << format_value(v);
        }
    }
    if (!section.empty()) out << YAML::EndMap;
    out << YAML::EndMap;
    return std::string(out.c_str()) + "\n";
}

namespace {

std::vector<Milestone> parse_milestones(const std::string& text, TrainMode mode) {
    if (text == "auto") {
        return mode == TrainMode::lora ? lora_milestones() : full_ft_milestones();
    }
    std::vector<Milestone> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        const auto colon = item.find(':');
        if (colon == std::string::npos) {
            throw InvalidConfig("milestone '" + item + "' must be fraction:multiplier");
        }
        out.push_back({parse_number<double>("train.milestones", item.substr(0, colon)),
                       parse_number<double>("train.milestones", item.substr(colon + 1))});
    }
    return out;
}

int as_int(const ConfigValues& v, const std::string& key) {
    const long long x = v.integer(key);
    if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) {
        throw InvalidConfig(key + " is out of range");
    }
    return static_cast<int>(x);
}

std::uint64_t as_seed(const ConfigValues& v, const std::string& key) {
    const long long x = v.integer(key);
    if (x < 0) throw InvalidConfig(key + " must be non-negative");
    return static_cast<std::uint64_t>(x);
}

} // namespace

RunConfig materialize(const ConfigValues& v, TrainMode mode) {
    RunConfig rc;
    const std::string kind = v.text("backbone.kind");
    const int upscale = as_int(v, "backbone.upscale");
    if (kind == "tiny-swin") {
        TinySwinConfig c;
        c.embed_dim = as_int(v, "backbone.embed_dim");
        c.n_rtlb = as_int(v, "backbone.n_rtlb");
        c.tll_per_rtlb = as_int(v, "backbone.tll_per_rtlb");
        c.n_heads = as_int(v, "backbone.n_heads");
        c.window = as_int(v, "backbone.window");
        c.mlp_ratio = v.real("backbone.mlp_ratio");
        c.img_range = v.real("backbone.img_range");
        c.upscale = upscale;
        c.upsample_feats = as_int(v, "backbone.upsample_feats");
        c.seed = as_seed(v, "backbone.seed");
        c.validate();
        rc.backbone = c;
    } else if (kind == "tiny-edsr") {
        TinyEdsrConfig c;
        c.n_feats = as_int(v, "backbone.n_feats");
        c.n_resblocks = as_int(v, "backbone.n_resblocks");
        c.res_scale = v.real("backbone.res_scale");
        c.upscale = upscale;
        c.upsample_feats = as_int(v, "backbone.upsample_feats");
        c.seed = as_seed(v, "backbone.seed");
        c.validate();
        rc.backbone = c;
    } else {
        throw InvalidConfig("unknown backbone kind '" + kind + "' (expected tiny-edsr or tiny-swin)");
    }

    rc.lora.rank = as_int(v, "lora.rank");
    rc.lora.alpha = v.real("lora.alpha");
    rc.lora.init_std = v.real("lora.init_std");
    rc.lora.seed = as_seed(v, "lora.seed");
    rc.lora.validate();
    rc.targets = v.text("targets.spec");

    rc.degradation.factor = upscale;
    rc.degradation.blur_kernel = as_int(v, "degradation.blur_kernel");
    rc.degradation.blur_sigma = v.range("degradation.blur_sigma");
    rc.degradation.noise_sigma = v.range("degradation.noise_sigma");
    rc.degradation.jpeg_quality = v.range("degradation.jpeg_quality");
    rc.degradation.second_order = v.boolean("degradation.second_order");
    rc.degradation.bicubic_mix = v.real("degradation.bicubic_mix");
    rc.degradation.seed = as_seed(v, "degradation.seed");
    rc.degradation.validate();

    rc.train.mode = mode;
    rc.train.iters = as_int(v, "train.iters");
    rc.train.batch = as_int(v, "train.batch");
    rc.train.lr0 = v.real("train.lr0");
    rc.train.beta1 = v.real("train.beta1");
    rc.train.beta2 = v.real("train.beta2");
    rc.train.eps = v.real("train.eps");
    rc.train.seed = as_seed(v, "train.seed");
    rc.train.eval_every = as_int(v, "train.eval_every");
    rc.train.workers = as_int(v, "train.workers");
    rc.train.milestones = parse_milestones(v.text("train.milestones"), rc.train.mode);

    rc.sampler.patch_size = as_int(v, "train.patch_size");
    rc.sampler.per_image = as_int(v, "train.per_image");
    rc.sampler.seed = rc.train.seed;
    rc.sampler.validate(upscale);
    rc.synthetic_images = as_int(v, "train.synthetic_images");
    rc.synthetic_size = as_int(v, "train.synthetic_size");
    rc.val_images = as_int(v, "train.val_images");
    rc.val_size = as_int(v, "train.val_size");
    if (rc.synthetic_images < 1 || rc.val_images < 1) {
        throw InvalidConfig("synthetic image counts must be >= 1");
    }
    if (rc.val_size % upscale != 0) {
        throw InvalidConfig("train.val_size must be a multiple of the upscale factor");
    }

    rc.metrics.use_y_channel = v.boolean("metrics.use_y_channel");
    const int crop = as_int(v, "metrics.crop_border");
    rc.metrics.crop_border = crop < 0 ? upscale : crop;
    rc.metrics.ssim.window = as_int(v, "metrics.ssim_window");
    rc.metrics.ssim.sigma = v.real("metrics.ssim_sigma");
    rc.metrics.validate();

    rc.paths.train = v.text("paths.train");
    rc.paths.val = v.text("paths.val");
    rc.paths.run = v.text("paths.run");
    rc.paths.base = v.text("paths.base");
    return rc;
}

} // namespace adaptsr
