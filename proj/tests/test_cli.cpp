#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <spdlog/spdlog.h>

#include "adaptsr/cli.hpp"
#include "adaptsr/errors.hpp"
#include "adaptsr/injection.hpp"
#include "adaptsr/run_config.hpp"
#include "support.hpp"

using namespace adaptsr;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code = 0;
    std::string out;
    std::string err;
};

Result cli(std::vector<std::string> args) {
    args.insert(args.begin(), {"adaptsr", "-q"});
    std::ostringstream out;
    std::ostringstream err;
    const int code = run_cli(args, out, err);
    spdlog::set_level(spdlog::level::err);
    return {code, out.str(), err.str()};
}

const std::vector<std::string> kSmall = {
    "--backbone.n_feats", "8",  "--backbone.n_resblocks", "1",  "--backbone.upsample_feats", "4",
    "--train.iters",      "4",  "--train.batch",          "2",  "--train.eval_every",        "2",
    "--train.patch_size", "16", "--train.synthetic_images", "4", "--train.synthetic_size",   "32",
    "--train.val_images", "2",  "--train.val_size",       "32"};

std::vector<std::string> with_small(std::vector<std::string> args) {
    args.insert(args.end(), kSmall.begin(), kSmall.end());
    return args;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string value_of(const std::string& text, const std::string& key) {
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.rfind(key + ": ", 0) == 0) return line.substr(key.size() + 2);
    }
    return {};
}

} // namespace

TEST_CASE("cli usage errors") {
    CHECK(cli({}).code == kExitUsage);
    CHECK(cli({"bogus"}).code == kExitUsage);
    CHECK(cli({"inject-report", "--lora.bogus", "3"}).code == kExitUsage);
    CHECK(cli({"inject-report", "--targets", "nothing.matches.*"}).code == kExitUsage);
    CHECK(cli({"inject-report", "--lora.rank", "0"}).code == kExitUsage);
    CHECK(cli({"adapt", "--run", "/tmp/x"}).code == kExitUsage);
    CHECK(cli({"eval", "--model", "/nonexistent/model.ckpt"}).code == kExitRuntime);
}

TEST_CASE("inject-report matches the closed form") {
    const auto r = cli(with_small({"inject-report", "--backbone", "tiny-edsr", "--targets", "convs", "--rank", "4"}));
    REQUIRE(r.code == kExitOk);
    TinyEdsrConfig c;
    c.n_feats = 8;
    c.n_resblocks = 1;
    c.upsample_feats = 4;
    auto model = build_tiny_edsr(c);
    LoraConfig lc;
    lc.rank = 4;
    const auto rep = inject(*model, TargetSpec::from_preset(Preset::convs), lc);
    std::size_t closed = 0;
    for (const auto& e : model->registry().entries()) {
        closed += 4u * static_cast<std::size_t>(e.layer->fan_in() + e.layer->fan_out());
    }
    CHECK(rep.lora_total == closed);
    const auto pos = r.out.find("\ntotal");
    REQUIRE(pos != std::string::npos);
    std::istringstream line(r.out.substr(pos + 6));
    std::size_t base = 0;
    std::size_t lora = 0;
    line >> base >> lora;
    CHECK(base == rep.base_total);
    CHECK(lora == closed);
}

TEST_CASE("config round trip") {
    ConfigValues v;
    v.set("lora.rank", "16");
    v.set("degradation.blur_sigma", "0.5,1.5");
    v.set("targets.spec", "msa");
    v.set("train.lr0", "0.0002");
    const std::string yaml = v.to_yaml();
    ConfigValues back;
    back.merge_yaml(yaml);
    CHECK(back.to_yaml() == yaml);
    const RunConfig rc = materialize(back);
    CHECK(rc.lora.rank == 16);
    CHECK(rc.degradation.blur_sigma.lo == 0.5);
    CHECK(rc.train.lr0 == 0.0002);
    CHECK(rc.targets == "msa");
    CHECK_THROWS_AS(back.merge_yaml("lora:\n  nope: 1\n"), InvalidConfig);
    CHECK_THROWS_AS(back.set("lora.rank", "abc"), InvalidConfig);
}

TEST_CASE("end-to-end pipeline") {
    const fs::path root = fs::temp_directory_path() / "adaptsr_cli_test";
    fs::remove_all(root);
    const std::string base_run = (root / "base").string();
    const std::string base_ckpt = (root / "base" / "checkpoints" / "model.ckpt").string();

    auto pre = cli(with_small({"pretrain", "--backbone", "tiny-edsr", "--run", base_run}));
    INFO(pre.err);
    REQUIRE(pre.code == kExitOk);
    CHECK(fs::exists(base_ckpt));
    CHECK(slurp(root / "base" / "config.resolved").rfind("# adaptsr pretrain\n", 0) == 0);

    const std::string adapt_run = (root / "adapt").string();
    auto ad = cli(with_small({"adapt", "--base", base_ckpt, "--targets", "convs", "--rank", "4", "--run", adapt_run}));
    REQUIRE(ad.code == kExitOk);
    CHECK(fs::exists(root / "adapt" / "checkpoints" / "adapters.ckpt"));
    CHECK(fs::exists(root / "adapt" / "history.csv"));

    SUBCASE("re-running the resolved config reproduces the history") {
        const std::string again = (root / "again").string();
        auto r = cli({"adapt", "--config", (root / "adapt" / "config.resolved").string(), "--run", again});
        REQUIRE(r.code == kExitOk);
        CHECK(slurp(root / "again" / "history.csv") == slurp(root / "adapt" / "history.csv"));
        auto threaded = cli({"adapt", "--config", (root / "adapt" / "config.resolved").string(), "--run",
                             (root / "threaded").string(), "--train.workers", "3"});
        REQUIRE(threaded.code == kExitOk);
        CHECK(slurp(root / "threaded" / "history.csv") == slurp(root / "adapt" / "history.csv"));
    }
    SUBCASE("eval reproduces the report") {
        auto ev = cli({"eval", "--run", adapt_run});
        REQUIRE(ev.code == kExitOk);
        const std::string report = slurp(root / "adapt" / "report.txt");
        CHECK(value_of(ev.out, "psnr") == value_of(report, "psnr"));
        CHECK(value_of(ev.out, "ssim") == value_of(report, "ssim"));
    }
    SUBCASE("merge") {
        auto m = cli({"merge", "--in", adapt_run, "--out", (root / "merged.ckpt").string()});
        REQUIRE(m.code == kExitOk);
        CHECK(std::stod(value_of(m.out, "max relative deviation")) < 1e-5);
        auto plain = load_checkpoint(root / "merged.ckpt");
        CHECK_FALSE(plain->adapter_setup());
        CHECK(std::to_string(plain->param_count()) == value_of(m.out, "params"));

        auto zero_args = with_small({"adapt", "--base", base_ckpt, "--run", (root / "zero").string()});
        zero_args.insert(zero_args.end(), {"--train.iters", "0"});
        auto zero = cli(zero_args);
        REQUIRE(zero.code == kExitOk);
        auto mz = cli({"merge", "--in", (root / "zero").string(), "--out", (root / "zero.ckpt").string()});
        REQUIRE(mz.code == kExitOk);
        CHECK(value_of(mz.out, "max relative deviation") == "0");
        auto base = load_checkpoint(base_ckpt);
        auto z = load_checkpoint(root / "zero.ckpt");
        CHECK(testing::hash_params(*base, false) == testing::hash_params(*z, false));

        CHECK(cli({"merge", "--in", base_run, "--out", (root / "bad.ckpt").string()}).code == kExitRuntime);
    }
    SUBCASE("finetune and compare") {
        const std::string ft_run = (root / "ft").string();
        REQUIRE(cli(with_small({"finetune", "--base", base_ckpt, "--run", ft_run})).code == kExitOk);
        auto cmp = cli({"compare", "--run", adapt_run, "--run", ft_run});
        REQUIRE(cmp.code == kExitOk);
        CHECK(cmp.out.find("adapt") != std::string::npos);
        CHECK(cmp.out.find("full_ft") != std::string::npos);
        CHECK(cmp.out.find("100.00%") != std::string::npos);
        const std::string report = slurp(root / "ft" / "report.txt");
        CHECK(value_of(report, "trainable_params") == value_of(report, "base_params"));
    }
    fs::remove_all(root);
}

TEST_CASE("gen-data writes a loadable corpus") {
    const fs::path root = fs::temp_directory_path() / "adaptsr_gen_test";
    fs::remove_all(root);
    auto r = cli({"gen-data", "--out", root.string(), "--count", "3", "--size", "32", "--val-count", "2",
                  "--val-size", "16"});
    REQUIRE(r.code == kExitOk);
    CHECK(fs::exists(root / "manifest.json"));
    CHECK(load_corpus_dir(root / "train").size() == 3);
    CHECK(load_corpus_dir(root / "val").size() == 2);
    fs::remove_all(root);
}
