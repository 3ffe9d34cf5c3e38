#include "adaptsr/cli.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "adaptsr/errors.hpp"
#include "adaptsr/image_io.hpp"
#include "adaptsr/injection.hpp"
#include "adaptsr/rng.hpp"
#include "adaptsr/run_config.hpp"

namespace adaptsr {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kTrainCorpusSeed = 1;
constexpr std::uint64_t kValCorpusSeed = 2;

const char* kUsage =
    "usage: adaptsr <command> [options] [--section.key value ...]\n"
    "commands:\n"
    "  gen-data       write a synthetic PNG corpus (train/ and val/) with a manifest\n"
    "  pretrain       train a base model on bicubic pairs\n"
    "  inject-report  print per-layer base and adapter parameter counts\n"
    "  adapt          inject adapters into --base and train them on the target degradation\n"
    "  finetune       fully fine-tune --base on the target degradation\n"
    "  merge          fold a run's adapters into a plain checkpoint\n"
    "  eval           print PSNR/SSIM of a model on the validation pairs\n"
    "  compare        tabulate trainable parameters and metrics across runs\n"
    "run 'adaptsr <command> --help' for options\n";

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Common {
    std::string config;
    std::string run;
    std::string base;
    std::string backbone;
    std::string targets;
    int rank = 0;
    std::vector<std::pair<std::string, std::string>> overrides;
};

/// Pulls every `--section.key value` (or `--section.key=value`) out of `args`.
std::vector<std::pair<std::string, std::string>> extract_overrides(std::vector<std::string>& args) {
    std::vector<std::pair<std::string, std::string>> found;
    std::vector<std::string> rest;
    for (std::size_t i = 0; i < args.size(); ++i) {
        const std::string& a = args[i];
        if (a.rfind("--", 0) != 0) {
            rest.push_back(a);
            continue;
        }
        const auto eq = a.find('=');
        const std::string key = a.substr(2, eq == std::string::npos ? std::string::npos : eq - 2);
        if (key.find('.') == std::string::npos) {
            rest.push_back(a);
            continue;
        }
        if (!find_field(key)) {
            throw UsageError("unknown config key '" + key + "'");
        }
        if (eq != std::string::npos) {
            found.emplace_back(key, a.substr(eq + 1));
        } else {
            if (i + 1 >= args.size()) throw UsageError("missing value for --" + key);
            found.emplace_back(key, args[++i]);
        }
    }
    args = std::move(rest);
    return found;
}

void add_common(CLI::App* cmd, Common& c, bool training) {
    cmd->add_option("--config", c.config, "YAML config file");
    cmd->add_option("--backbone", c.backbone, "alias for --backbone.kind");
    cmd->add_option("--targets", c.targets, "alias for --targets.spec");
    cmd->add_option("--rank", c.rank, "alias for --lora.rank");
    cmd->add_option("--base", c.base, "alias for --paths.base");
    if (training) cmd->add_option("--run", c.run, "alias for --paths.run");
}

ConfigValues resolve(const Common& c, const std::function<void(ConfigValues&)>& command_defaults) {
    ConfigValues v;
    if (command_defaults) command_defaults(v);
    if (!c.config.empty()) v.merge_yaml_file(c.config);
    if (!c.backbone.empty()) v.set("backbone.kind", c.backbone);
    if (!c.targets.empty()) v.set("targets.spec", c.targets);
    if (c.rank != 0) v.set_value("lora.rank", static_cast<long long>(c.rank));
    if (!c.base.empty()) v.set("paths.base", c.base);
    if (!c.run.empty()) v.set("paths.run", c.run);
    for (const auto& [k, val] : c.overrides) v.set(k, val);
    return v;
}

void bicubic_defaults(ConfigValues& v) {
    v.set("degradation.blur_sigma", "0,0");
    v.set("degradation.noise_sigma", "0,0");
    v.set("degradation.jpeg_quality", "100,100");
    v.set("degradation.second_order", "false");
}

/// Rewrites the backbone section so it describes `cfg` exactly.
void set_backbone_values(ConfigValues& v, const BackboneConfig& cfg) {
    const nlohmann::json j = to_json(cfg);
    for (const auto& [key, value] : j.items()) {
        const std::string full = "backbone." + key;
        if (!find_field(full)) continue;
        if (value.is_string()) {
            v.set(full, value.get<std::string>());
        } else if (value.is_number_float()) {
            v.set_value(full, value.get<double>());
        } else {
            v.set_value(full, value.get<long long>());
        }
    }
}

std::vector<Image> train_corpus(const RunConfig& rc) {
    if (!rc.paths.train.empty()) return load_corpus_dir(rc.paths.train);
    return make_synthetic_corpus(rc.synthetic_images, rc.synthetic_size, kTrainCorpusSeed);
}

std::vector<TrainingPair> validation_pairs(const RunConfig& rc) {
    std::vector<Image> corpus = rc.paths.val.empty()
                                    ? make_synthetic_corpus(rc.val_images, rc.val_size, kValCorpusSeed)
                                    : load_corpus_dir(rc.paths.val);
    int size = corpus.front().h;
    for (const auto& img : corpus) size = std::min({size, img.h, img.w});
    size -= size % rc.degradation.factor;
    return make_validation_pairs(corpus, size, rc.degradation, 0);
}

std::unique_ptr<Backbone> load_base(ConfigValues& v, const std::string& command) {
    const std::string path = v.text("paths.base");
    if (path.empty()) throw UsageError(command + " needs --base <checkpoint>");
    auto model = load_checkpoint(path);
    set_backbone_values(v, model->config());
    return model;
}

fs::path require_run_dir(const RunConfig& rc, const std::string& command) {
    if (rc.paths.run.empty()) throw UsageError(command + " needs --run <dir>");
    return rc.paths.run;
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", std::isinf(v) ? kPsnrCap : v);
    return buf;
}

struct RunSummary {
    std::string command;
    TrainMode mode;
    std::string backbone;
    std::string targets = "-";
    std::string rank = "-";
    std::size_t trainable = 0;
    std::size_t base = 0;
    int iters = 0;
    RunHistory history;
};

void write_report(const fs::path& dir, const RunSummary& s) {
    std::ofstream out(dir / "report.txt");
    if (!out) throw IoError("cannot write report in " + dir.string());
    const double fraction = s.base ? static_cast<double>(s.trainable) / static_cast<double>(s.base) : 0.0;
    const double initial = s.history.eval_curve.empty() ? s.history.final_eval.psnr : s.history.eval_curve.front().psnr;
    out << "command: " << s.command << "\n"
        << "mode: " << to_string(s.mode) << "\n"
        << "backbone: " << s.backbone << "\n"
        << "targets: " << s.targets << "\n"
        << "rank: " << s.rank << "\n"
        << "trainable_params: " << s.trainable << "\n"
        << "base_params: " << s.base << "\n"
        << "trainable_fraction: " << fmt_double(fraction) << "\n"
        << "iters: " << s.iters << "\n"
        << "initial_psnr: " << fmt_double(initial) << "\n"
        << "psnr: " << fmt_double(s.history.final_eval.psnr) << "\n"
        << "ssim: " << fmt_double(s.history.final_eval.ssim) << "\n"
        << "wall_time: " << fmt_double(s.history.wall_time) << "\n";
}

std::map<std::string, std::string> read_report(const fs::path& dir) {
    std::ifstream in(dir / "report.txt");
    if (!in) throw IoError("no report.txt in " + dir.string());
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(in, line)) {
        const auto colon = line.find(": ");
        if (colon != std::string::npos) kv[line.substr(0, colon)] = line.substr(colon + 2);
    }
    return kv;
}

void write_resolved(const fs::path& dir, const std::string& command, const ConfigValues& v) {
    fs::create_directories(dir);
    std::ofstream out(dir / "config.resolved");
    if (!out) throw IoError("cannot write config in " + dir.string());
    out << "# adaptsr " << command << "\n" << v.to_yaml();
}

int train_command(const std::string& command, TrainMode mode, Common& c, std::ostream& out) {
    ConfigValues v = resolve(c, mode == TrainMode::pretrain ? bicubic_defaults : std::function<void(ConfigValues&)>{});
    std::unique_ptr<Backbone> model;
    if (mode == TrainMode::pretrain) {
        model = build_backbone(materialize(v, mode).backbone);
    } else {
        model = load_base(v, command);
    }
    const RunConfig rc = materialize(v, mode);
    const fs::path dir = require_run_dir(rc, command);
    if (model->adapter_setup()) throw StateError("base checkpoint must be a plain model");

    RunSummary s;
    s.command = command;
    s.mode = mode;
    s.backbone = model->id();
    s.iters = rc.train.iters;
    if (mode == TrainMode::lora) {
        const InjectionReport rep = inject(*model, TargetSpec::parse(rc.targets), rc.lora);
        s.targets = rc.targets;
        s.rank = std::to_string(rc.lora.rank);
        s.trainable = rep.lora_total;
        s.base = rep.base_total;
    } else {
        s.trainable = model->param_count();
        s.base = s.trainable;
    }
    write_resolved(dir, command, v);

    const std::vector<Image> corpus = train_corpus(rc);
    const std::vector<TrainingPair> val = validation_pairs(rc);
    DataHandles data;
    data.corpus = &corpus;
    data.sampler = rc.sampler;
    data.degradation = rc.degradation;
    data.val = &val;
    data.metrics = rc.metrics;
    s.history = run_training(*model, data, rc.train, dir);
    write_report(dir, s);

    out << "run: " << dir.string() << "\n"
        << "trainable_params: " << s.trainable << "\n"
        << "psnr: " << fmt_double(s.history.final_eval.psnr) << "\n"
        << "ssim: " << fmt_double(s.history.final_eval.ssim) << "\n";
    return kExitOk;
}

/// Loads whatever a run directory holds: adapters on top of the recorded base, or a full model.
std::unique_ptr<Backbone> load_run_model(const fs::path& dir, ConfigValues& v) {
    const fs::path adapters = dir / "checkpoints" / "adapters.ckpt";
    const fs::path full = dir / "checkpoints" / "model.ckpt";
    if (fs::exists(adapters)) {
        auto model = load_base(v, "run " + dir.string());
        inject_and_load_adapters(*model, adapters);
        return model;
    }
    if (fs::exists(full)) {
        auto model = load_checkpoint(full);
        set_backbone_values(v, model->config());
        return model;
    }
    throw IoError("no checkpoint in " + (dir / "checkpoints").string());
}

ConfigValues run_values(const fs::path& dir, const Common& c) {
    ConfigValues v;
    v.merge_yaml_file(dir / "config.resolved");
    if (!c.config.empty()) v.merge_yaml_file(c.config);
    for (const auto& [k, val] : c.overrides) v.set(k, val);
    return v;
}

int cmd_gen_data(const std::string& out_dir, int count, int size, std::uint64_t seed, int val_count, int val_size,
                 std::ostream& out) {
    if (count < 1 || val_count < 0 || size < 1 || val_size < 1) throw UsageError("counts and sizes must be positive");
    const fs::path root(out_dir);
    nlohmann::json manifest;
    manifest["seed"] = seed;
    auto write_set = [&](const std::string& name, int n, int sz, std::uint64_t s) {
        fs::create_directories(root / name);
        const auto images = make_synthetic_corpus(n, sz, s);
        nlohmann::json files = nlohmann::json::array();
        for (int i = 0; i < n; ++i) {
            char fname[32];
            std::snprintf(fname, sizeof fname, "%05d.png", i);
            write_png(images[i], root / name / fname);
            files.push_back(name + "/" + fname);
        }
        manifest[name] = {{"count", n}, {"size", sz}, {"seed", s}, {"files", files}};
    };
    write_set("train", count, size, derive_seed(seed, {kTrainCorpusSeed}));
    if (val_count > 0) write_set("val", val_count, val_size, derive_seed(seed, {kValCorpusSeed}));
    std::ofstream mf(root / "manifest.json");
    mf << manifest.dump(2) << "\n";
    if (!mf) throw IoError("cannot write manifest in " + root.string());
    out << "wrote " << count << " training and " << val_count << " validation images to " << root.string() << "\n";
    return kExitOk;
}

int cmd_inject_report(Common& c, std::ostream& out) {
    ConfigValues v = resolve(c, {});
    std::unique_ptr<Backbone> model;
    if (!v.text("paths.base").empty()) {
        model = load_base(v, "inject-report");
    } else {
        model = build_backbone(materialize(v).backbone);
    }
    const RunConfig rc = materialize(v);
    const InjectionReport rep = inject(*model, TargetSpec::parse(rc.targets), rc.lora);
    out << "backbone: " << model->id() << "\n"
        << "targets: " << rc.targets << "\n"
        << "rank: " << rc.lora.rank << "\n"
        << rep.table();
    return kExitOk;
}

int cmd_merge(const std::string& in_dir, const std::string& out_path, int samples, Common& c, std::ostream& out) {
    if (in_dir.empty() || out_path.empty()) throw UsageError("merge needs --in <run dir> and --out <checkpoint>");
    ConfigValues v = run_values(in_dir, c);
    auto wrapped = load_run_model(in_dir, v);
    if (!wrapped->adapter_setup()) throw StateError("run " + in_dir + " has no adapters to merge");
    auto merged = clone_model(*wrapped);
    merge_all(*merged);

    std::mt19937_64 rng(derive_seed(0, {static_cast<std::uint64_t>(samples)}));
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    double max_dev = 0.0;
    for (int i = 0; i < samples; ++i) {
        Tensor4 x(1, 3, 16, 16);
        for (float& val : x.data) val = u(rng);
        const Tensor4 a = wrapped->forward(x, false);
        const Tensor4 b = merged->forward(x, false);
        double diff = 0.0;
        double scale = 0.0;
        for (std::size_t k = 0; k < a.data.size(); ++k) {
            diff = std::max(diff, static_cast<double>(std::abs(a.data[k] - b.data[k])));
            scale = std::max(scale, static_cast<double>(std::abs(a.data[k])));
        }
        max_dev = std::max(max_dev, scale > 0.0 ? diff / scale : diff);
    }
    save_checkpoint(*merged, out_path);
    out << "merged: " << out_path << "\n"
        << "params: " << merged->param_count() << "\n"
        << "max relative deviation: " << fmt_double(max_dev) << "\n";
    return kExitOk;
}

int cmd_eval(const std::string& run_dir, const std::string& model_path, Common& c, std::ostream& out) {
    ConfigValues v;
    std::unique_ptr<Backbone> model;
    if (!run_dir.empty()) {
        v = run_values(run_dir, c);
        model = load_run_model(run_dir, v);
    } else {
        v = resolve(c, {});
        const std::string path = model_path.empty() ? v.text("paths.base") : model_path;
        if (path.empty()) throw UsageError("eval needs --run <dir> or --model <checkpoint>");
        model = load_checkpoint(path);
        set_backbone_values(v, model->config());
    }
    const RunConfig rc = materialize(v);
    const std::vector<TrainingPair> val = validation_pairs(rc);
    const EvalResult r = evaluate(*model, val, rc.metrics);
    out << "psnr: " << fmt_double(r.psnr) << "\n"
        << "ssim: " << fmt_double(r.ssim) << "\n";
    return kExitOk;
}

int cmd_compare(const std::vector<std::string>& runs, std::ostream& out) {
    if (runs.empty()) throw UsageError("compare needs at least one --run <dir>");
    char line[256];
    std::snprintf(line, sizeof line, "%-28s %-8s %14s %10s %10s %8s\n", "model", "mode", "trainable", "fraction",
                  "psnr", "ssim");
    out << line;
    for (const auto& r : runs) {
        auto kv = read_report(r);
        const std::string name = fs::path(r).filename().empty() ? fs::path(r).parent_path().filename().string()
                                                                : fs::path(r).filename().string();
        const double frac = std::stod(kv["trainable_fraction"]);
        std::snprintf(line, sizeof line, "%-28s %-8s %14s %9.2f%% %10.4f %8.4f\n", name.c_str(), kv["mode"].c_str(),
                      kv["trainable_params"].c_str(), 100.0 * frac, std::stod(kv["psnr"]), std::stod(kv["ssim"]));
        out << line;
    }
    return kExitOk;
}

void configure_logging(bool quiet) {
    static auto logger = [] {
        auto l = spdlog::stderr_color_mt("adaptsr");
        l->set_pattern("[%H:%M:%S] %v");
        return l;
    }();
    spdlog::set_default_logger(logger);
    spdlog::set_level(quiet ? spdlog::level::warn : spdlog::level::info);
}

} // namespace

int run_cli(const std::vector<std::string>& input, std::ostream& out, std::ostream& err) {
    std::vector<std::string> args(input.begin() + (input.empty() ? 0 : 1), input.end());
    if (args.empty()) {
        err << kUsage;
        return kExitUsage;
    }
    Common c;
    try {
        c.overrides = extract_overrides(args);
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n" << kUsage;
        return kExitUsage;
    }

    CLI::App app{"LoRA domain adaptation for super-resolution", "adaptsr"};
    app.require_subcommand(1);
    bool quiet = false;
    app.add_flag("-q,--quiet", quiet, "only log warnings");

    std::string gen_out;
    int gen_count = 384;
    int gen_size = 128;
    std::uint64_t gen_seed = 0;
    int gen_val_count = 16;
    int gen_val_size = 64;
    auto* gen = app.add_subcommand("gen-data", "write a synthetic PNG corpus");
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--count", gen_count, "training images");
    gen->add_option("--size", gen_size, "training image size");
    gen->add_option("--seed", gen_seed, "corpus seed");
    gen->add_option("--val-count", gen_val_count, "validation images");
    gen->add_option("--val-size", gen_val_size, "validation image size");

    auto* pretrain = app.add_subcommand("pretrain", "train a base model on bicubic pairs");
    add_common(pretrain, c, true);
    auto* report = app.add_subcommand("inject-report", "print adapter parameter accounting");
    add_common(report, c, false);
    auto* adapt = app.add_subcommand("adapt", "train adapters on the target degradation");
    add_common(adapt, c, true);
    auto* finetune = app.add_subcommand("finetune", "full fine-tuning baseline");
    add_common(finetune, c, true);

    std::string merge_in;
    std::string merge_out;
    int merge_samples = 8;
    auto* merge = app.add_subcommand("merge", "fold adapters into a plain checkpoint");
    merge->add_option("--in", merge_in, "run directory holding adapters")->required();
    merge->add_option("--out", merge_out, "merged checkpoint path")->required();
    merge->add_option("--samples", merge_samples, "random inputs for the equivalence check");
    merge->add_option("--config", c.config, "YAML config overlay");

    std::string eval_run;
    std::string eval_model;
    auto* eval = app.add_subcommand("eval", "evaluate a run or checkpoint");
    eval->add_option("--run", eval_run, "run directory");
    eval->add_option("--model,--in", eval_model, "plain checkpoint");
    add_common(eval, c, false);

    std::vector<std::string> compare_runs;
    auto* compare = app.add_subcommand("compare", "tabulate runs");
    compare->add_option("--run,runs", compare_runs, "run directories");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            out << app.help();
            return kExitOk;
        }
        err << "error: " << e.what() << "\n" << kUsage;
        return kExitUsage;
    }
    configure_logging(quiet);

    try {
        if (gen->parsed()) return cmd_gen_data(gen_out, gen_count, gen_size, gen_seed, gen_val_count, gen_val_size, out);
        if (pretrain->parsed()) return train_command("pretrain", TrainMode::pretrain, c, out);
        if (adapt->parsed()) return train_command("adapt", TrainMode::lora, c, out);
        if (finetune->parsed()) return train_command("finetune", TrainMode::full_ft, c, out);
        if (report->parsed()) return cmd_inject_report(c, out);
        if (merge->parsed()) return cmd_merge(merge_in, merge_out, merge_samples, c, out);
        if (eval->parsed()) return cmd_eval(eval_run, eval_model, c, out);
        if (compare->parsed()) return cmd_compare(compare_runs, out);
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const InvalidConfig& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const TargetResolutionError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    err << kUsage;
    return kExitUsage;
}

int run_cli(int argc, char** argv) {
    return run_cli(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}

} // namespace adaptsr
