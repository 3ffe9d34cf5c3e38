#include "adaptsr/injection.hpp"

#include <fnmatch.h>

#include <algorithm>
#include <cstdio>
#include <set>
#include <sstream>

#include "adaptsr/checkpoint.hpp"
#include "adaptsr/errors.hpp"
#include "adaptsr/rng.hpp"

namespace adaptsr {

namespace {

constexpr Preset kAllPresets[] = {Preset::all,        Preset::convs,       Preset::msa,
                                  Preset::mlp,        Preset::first_conv,  Preset::rstlb_convs,
                                  Preset::dfe_convs,  Preset::bu_conv,     Preset::au_conv,
                                  Preset::rlb_convs};

std::optional<LayerGroup> preset_group(Preset p) {
    switch (p) {
        case Preset::msa: return LayerGroup::msa;
        case Preset::mlp: return LayerGroup::mlp;
        case Preset::first_conv: return LayerGroup::first_conv;
        case Preset::rstlb_convs: return LayerGroup::rstlb_convs;
        case Preset::dfe_convs: return LayerGroup::dfe_convs;
        case Preset::bu_conv: return LayerGroup::bu_conv;
        case Preset::au_conv: return LayerGroup::au_conv;
        case Preset::rlb_convs: return LayerGroup::rlb_convs;
        case Preset::all:
        case Preset::convs: return std::nullopt;
    }
    return std::nullopt;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) {
        return "";
    }
    const auto e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
}

std::vector<int> base_shape(const nn::AdaptableLayer& layer) {
    if (layer.is_conv()) {
        const auto& conv = dynamic_cast<const nn::Conv2d&>(layer);
        const auto& g = conv.geometry();
        return {g.c_out, g.c_in, g.k, g.k};
    }
    return {layer.fan_out(), layer.fan_in()};
}

void copy_into(Param& dst, const ckpt::StoredTensor& src, const std::string& name) {
    if (static_cast<std::size_t>(dst.value.size()) != src.data.size() ||
        (!dst.shape.empty() && dst.shape != src.shape)) {
        throw CheckpointIncompatible("shape mismatch for " + name);
    }
    std::copy(src.data.begin(), src.data.end(), dst.value.data());
}

} // namespace

std::string to_string(Preset preset) {
    switch (preset) {
        case Preset::all: return "all";
        case Preset::convs: return "convs";
        case Preset::msa: return "msa";
        case Preset::mlp: return "mlp";
        case Preset::first_conv: return "first_conv";
        case Preset::rstlb_convs: return "rstlb_convs";
        case Preset::dfe_convs: return "dfe_convs";
        case Preset::bu_conv: return "bu_conv";
        case Preset::au_conv: return "au_conv";
        case Preset::rlb_convs: return "rlb_convs";
    }
    return "unknown";
}

std::optional<Preset> parse_preset(const std::string& name) {
    for (Preset p : kAllPresets) {
        if (to_string(p) == name) {
            return p;
        }
    }
    return std::nullopt;
}

TargetSpec TargetSpec::parse(const std::string& text) {
    const std::string t = trim(text);
    if (auto p = parse_preset(t)) {
        return from_preset(*p);
    }
    std::vector<std::string> patterns;
    std::stringstream ss(t);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) {
            patterns.push_back(item);
        }
    }
    if (patterns.empty()) {
        throw TargetResolutionError("empty target specification");
    }
    return from_patterns(std::move(patterns));
}

std::string TargetSpec::str() const {
    if (preset) {
        return to_string(*preset);
    }
    std::string out;
    for (std::size_t i = 0; i < patterns.size(); ++i) {
        if (i) out += ',';
        out += patterns[i];
    }
    return out;
}

std::vector<std::string> resolve_targets(const LayerRegistry& registry, const TargetSpec& spec) {
    std::vector<bool> selected(registry.size(), false);
    const auto& entries = registry.entries();
    if (spec.preset) {
        const Preset p = *spec.preset;
        const auto group = preset_group(p);
        if (group && !registry.has_group(*group)) {
            throw TargetResolutionError("preset " + to_string(p) + " has no layers on this backbone");
        }
        for (std::size_t i = 0; i < entries.size(); ++i) {
            if (p == Preset::all) {
                selected[i] = true;
            } else if (p == Preset::convs) {
                selected[i] = entries[i].kind == LayerKind::conv;
            } else {
                selected[i] = entries[i].group == *group;
            }
        }
    } else {
        if (spec.patterns.empty()) {
            throw TargetResolutionError("empty target specification");
        }
        for (const auto& pattern : spec.patterns) {
            bool matched = false;
            for (std::size_t i = 0; i < entries.size(); ++i) {
                if (fnmatch(pattern.c_str(), entries[i].name.c_str(), 0) == 0) {
                    selected[i] = true;
                    matched = true;
                }
            }
            if (!matched) {
                throw TargetResolutionError("pattern '" + pattern + "' matches no registry entry");
            }
        }
    }
    std::vector<std::string> names;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (selected[i]) {
            names.push_back(entries[i].name);
        }
    }
    if (names.empty()) {
        throw TargetResolutionError("target specification '" + spec.str() + "' selects no layers");
    }
    return names;
}

void freeze_base(Backbone& model) {
    model.visit_params([](const std::string&, Param& p) { p.trainable = false; });
    for (const auto& e : model.registry().entries()) {
        if (auto* f = e.layer->factors()) {
            f->A.trainable = true;
            f->B.trainable = true;
        }
    }
}

void unfreeze_all(Backbone& model) {
    model.visit_params([](const std::string&, Param& p) { p.trainable = true; });
}

InjectionReport inject(Backbone& model, const TargetSpec& spec, const LoraConfig& cfg) {
    if (model.adapter_setup()) {
        throw StateError("model already carries adapters");
    }
    cfg.validate();
    const auto targets = resolve_targets(model.registry(), spec);
    const std::set<std::string> chosen(targets.begin(), targets.end());
    const auto& entries = model.registry().entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (!chosen.count(entries[i].name)) {
            continue;
        }
        LoraConfig layer_cfg = cfg;
        layer_cfg.seed = derive_seed(cfg.seed, {static_cast<std::uint64_t>(i)});
        entries[i].layer->inject(layer_cfg);
    }
    freeze_base(model);
    model.set_adapter_setup(AdapterSetup{cfg, spec.str(), targets});
    return count_params(model);
}

InjectionReport count_params(Backbone& model) {
    if (!model.adapter_setup()) {
        throw StateError("parameter report requires an injected model");
    }
    InjectionReport report;
    std::size_t layer_base = 0;
    for (const auto& e : model.registry().entries()) {
        ReportRow row;
        row.name = e.name;
        row.kind = e.kind;
        row.group = e.group;
        row.base_params = e.layer->weight_numel() + (e.layer->has_bias() ? e.layer->fan_out() : 0);
        if (const auto* f = e.layer->factors()) {
            row.lora_params = static_cast<std::size_t>(f->rank()) * (e.layer->fan_in() + e.layer->fan_out());
        }
        layer_base += row.base_params;
        report.lora_total += row.lora_params;
        report.rows.push_back(std::move(row));
    }
    std::size_t everything = 0;
    model.visit_params([&](const std::string&, Param& p) { everything += p.numel(); });
    ReportRow other;
    other.name = "(norms, biases of non-registry layers, position tables)";
    other.base_params = everything - report.lora_total - layer_base;
    report.rows.push_back(other);
    for (const auto& r : report.rows) {
        report.base_total += r.base_params;
    }
    report.trainable_fraction =
        report.base_total ? static_cast<double>(report.lora_total) / static_cast<double>(report.base_total) : 0.0;
    return report;
}

std::string InjectionReport::table() const {
    std::ostringstream os;
    char line[256];
    std::snprintf(line, sizeof(line), "%-34s %-15s %-12s %12s %12s\n", "layer", "kind", "group", "base", "lora");
    os << line;
    for (const auto& r : rows) {
        std::snprintf(line, sizeof(line), "%-34s %-15s %-12s %12zu %12zu\n", r.name.c_str(),
                      r.kind ? to_string(*r.kind).c_str() : "-", r.group ? to_string(*r.group).c_str() : "-",
                      r.base_params, r.lora_params);
        os << line;
    }
    std::snprintf(line, sizeof(line), "%-63s %12zu %12zu\n", "total", base_total, lora_total);
    os << line;
    std::snprintf(line, sizeof(line), "trainable fraction: %.6f (%.2f%%)\n", trainable_fraction,
                  100.0 * trainable_fraction);
    os << line;
    return os.str();
}

void merge_adapters(Backbone& model) {
    if (!model.adapter_setup()) {
        throw StateError("model has no adapters to merge");
    }
    for (const auto& e : model.registry().entries()) {
        if (const auto* f = e.layer->factors(); f && f->state() != MergeState::wrapped) {
            throw StateError("layer " + e.name + " is already merged");
        }
    }
    for (const auto& e : model.registry().entries()) {
        if (e.layer->injected()) {
            e.layer->merge();
        }
    }
}

void unmerge_adapters(Backbone& model) {
    for (const auto& e : model.registry().entries()) {
        if (const auto* f = e.layer->factors(); f && f->state() != MergeState::merged) {
            throw StateError("layer " + e.name + " is not merged");
        }
    }
    for (const auto& e : model.registry().entries()) {
        if (e.layer->injected()) {
            e.layer->unmerge();
        }
    }
}

void merge_all(Backbone& model) {
    merge_adapters(model);
    for (const auto& e : model.registry().entries()) {
        if (e.layer->injected()) {
            e.layer->strip();
        }
    }
    model.set_adapter_setup(std::nullopt);
    unfreeze_all(model);
}

std::unique_ptr<Backbone> clone_model(Backbone& model) {
    auto copy = build_backbone(model.config());
    if (const auto& setup = model.adapter_setup()) {
        for (const auto& e : model.registry().entries()) {
            if (const auto* f = e.layer->factors(); f && f->state() != MergeState::wrapped) {
                throw StateError("cannot clone a model with merged adapters");
            }
        }
        inject(*copy, TargetSpec::from_patterns(setup->targets), setup->lora);
        copy->set_adapter_setup(setup);
    }
    std::map<std::string, Param*> dst;
    copy->visit_params([&](const std::string& name, Param& p) { dst[name] = &p; });
    model.visit_params([&](const std::string& name, Param& p) {
        Param* d = dst.at(name);
        d->value = p.value;
        d->trainable = p.trainable;
    });
    // per-layer alpha may have been changed after injection
    const auto& src_entries = model.registry().entries();
    const auto& dst_entries = copy->registry().entries();
    for (std::size_t i = 0; i < src_entries.size(); ++i) {
        if (const auto* f = src_entries[i].layer->factors()) {
            dst_entries[i].layer->factors()->set_alpha(f->alpha());
        }
    }
    return copy;
}

// ---------------------------------------------------------------------------
// checkpoints

void save_checkpoint(Backbone& model, const std::filesystem::path& path) {
    if (model.adapter_setup()) {
        throw StateError("full checkpoints hold plain models; merge or save adapters instead");
    }
    ckpt::Container c;
    c.meta = {{"format", "adaptsr-model"}, {"backbone", to_json(model.config())}};
    model.visit_params([&](const std::string& name, Param& p) { c.put(name, p); });
    ckpt::write(c, path);
}

std::unique_ptr<Backbone> load_checkpoint(const std::filesystem::path& path) {
    const ckpt::Container c = ckpt::read(path);
    if (c.meta.value("format", "") != "adaptsr-model") {
        throw CheckpointIncompatible(path.string() + " is not a model checkpoint");
    }
    auto model = build_backbone(backbone_config_from_json(c.meta.at("backbone")));
    model->visit_params([&](const std::string& name, Param& p) { copy_into(p, c.get(name), name); });
    return model;
}

void save_adapters(Backbone& model, const std::filesystem::path& path) {
    const auto& setup = model.adapter_setup();
    if (!setup) {
        throw StateError("model has no adapters to save");
    }
    ckpt::Container c;
    nlohmann::json adapters = nlohmann::json::object();
    for (const auto& e : model.registry().entries()) {
        auto* f = e.layer->factors();
        if (!f) {
            continue;
        }
        if (f->state() != MergeState::wrapped) {
            throw StateError("cannot save merged adapters");
        }
        adapters[e.name] = {{"alpha", f->alpha()},
                            {"rank", f->rank()},
                            {"base_shape", base_shape(*e.layer)},
                            {"kind", to_string(e.kind)}};
        c.put(e.name + ".A", f->A);
        c.put(e.name + ".B", f->B);
    }
    c.meta = {{"format", "adaptsr-adapters"},
              {"backbone_id", model.id()},
              {"backbone", to_json(model.config())},
              {"spec", setup->spec},
              {"targets", setup->targets},
              {"rank", setup->lora.rank},
              {"alpha", setup->lora.alpha},
              {"init_std", setup->lora.init_std},
              {"seed", setup->lora.seed},
              {"adapters", adapters}};
    ckpt::write(c, path);
}

namespace {

void check_adapter_meta(Backbone& model, const nlohmann::json& meta, const std::string& where) {
    if (meta.value("format", "") != "adaptsr-adapters") {
        throw CheckpointIncompatible(where + " is not an adapter checkpoint");
    }
    if (meta.at("backbone_id").get<std::string>() != model.id()) {
        throw CheckpointIncompatible("adapter file is for backbone " + meta.at("backbone_id").get<std::string>());
    }
    if (meta.at("backbone") != to_json(model.config())) {
        throw CheckpointIncompatible("adapter file was built for a different backbone configuration");
    }
}

} // namespace

void load_adapters(Backbone& model, const std::filesystem::path& path) {
    const auto& setup = model.adapter_setup();
    if (!setup) {
        throw StateError("load_adapters requires an injected model");
    }
    const ckpt::Container c = ckpt::read(path);
    check_adapter_meta(model, c.meta, path.string());
    if (c.meta.at("rank").get<int>() != setup->lora.rank) {
        throw CheckpointIncompatible("adapter rank " + std::to_string(c.meta.at("rank").get<int>()) +
                                     " does not match injected rank " + std::to_string(setup->lora.rank));
    }
    if (c.meta.at("targets").get<std::vector<std::string>>() != setup->targets) {
        throw CheckpointIncompatible("adapter targets do not match the injected layers");
    }
    for (const auto& e : model.registry().entries()) {
        auto* f = e.layer->factors();
        if (!f) {
            continue;
        }
        const auto& info = c.meta.at("adapters").at(e.name);
        if (info.at("base_shape").get<std::vector<int>>() != base_shape(*e.layer)) {
            throw CheckpointIncompatible("base shape mismatch for " + e.name);
        }
        copy_into(f->A, c.get(e.name + ".A"), e.name + ".A");
        copy_into(f->B, c.get(e.name + ".B"), e.name + ".B");
        f->set_alpha(info.at("alpha").get<double>());
    }
}

void inject_and_load_adapters(Backbone& model, const std::filesystem::path& path) {
    const ckpt::Container c = ckpt::read(path);
    check_adapter_meta(model, c.meta, path.string());
    LoraConfig cfg;
    cfg.rank = c.meta.at("rank").get<int>();
    cfg.alpha = c.meta.at("alpha").get<double>();
    cfg.init_std = c.meta.at("init_std").get<double>();
    cfg.seed = c.meta.at("seed").get<std::uint64_t>();
    inject(model, TargetSpec::parse(c.meta.at("spec").get<std::string>()), cfg);
    load_adapters(model, path);
}

} // namespace adaptsr
