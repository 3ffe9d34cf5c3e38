#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>

#include "adaptsr/errors.hpp"
#include "adaptsr/injection.hpp"
#include "support.hpp"

using namespace adaptsr;
namespace fs = std::filesystem;

namespace {

std::unique_ptr<Backbone> swin() { return build_tiny_swin(TinySwinConfig{}); }
std::unique_ptr<Backbone> edsr() { return build_tiny_edsr(TinyEdsrConfig{}); }

LoraConfig rank(int r, std::uint64_t seed = 5) {
    LoraConfig c;
    c.rank = r;
    c.seed = seed;
    return c;
}

/// Gives every adapter a nonzero B so merged/wrapped comparisons are meaningful.
void randomize_b(Backbone& m, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    m.visit_params([&](const std::string& name, Param& p) {
        if (name.ends_with(".B")) {
            p.value = testing::random_mat(static_cast<int>(p.value.rows()), static_cast<int>(p.value.cols()), rng,
                                          0.05f);
        }
    });
}

fs::path temp_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("adaptsr_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

/// Independent closed form: r·(fan_in + fan_out) over the selected registry names.
std::size_t closed_form(Backbone& m, const std::vector<std::string>& names, int r) {
    std::size_t total = 0;
    for (const auto& n : names) {
        const auto& layer = *m.registry().at(n).layer;
        total += static_cast<std::size_t>(r) * (layer.fan_in() + layer.fan_out());
    }
    return total;
}

} // namespace

TEST_CASE("target resolution") {
    auto e = edsr();
    auto s = swin();
    CHECK(resolve_targets(e->registry(), TargetSpec::from_preset(Preset::convs)).size() == 11);
    CHECK(resolve_targets(e->registry(), TargetSpec::from_preset(Preset::all)).size() == 11);
    const auto msa = resolve_targets(s->registry(), TargetSpec::from_preset(Preset::msa));
    CHECK(msa.size() == 8);
    for (const auto& n : msa) CHECK((n.ends_with("attn.qkv") || n.ends_with("attn.proj")));
    CHECK(resolve_targets(s->registry(), TargetSpec::from_preset(Preset::mlp)).size() == 8);
    CHECK(resolve_targets(s->registry(), TargetSpec::from_preset(Preset::convs)).size() == 6);
    CHECK(resolve_targets(s->registry(), TargetSpec::from_preset(Preset::all)).size() == 22);
    CHECK(resolve_targets(s->registry(), TargetSpec::from_preset(Preset::first_conv)) ==
          std::vector<std::string>{"first_conv"});
    CHECK_THROWS_AS(resolve_targets(e->registry(), TargetSpec::from_preset(Preset::dfe_convs)), TargetResolutionError);
    CHECK_THROWS_AS(resolve_targets(e->registry(), TargetSpec::from_preset(Preset::msa)), TargetResolutionError);
    CHECK_THROWS_AS(resolve_targets(s->registry(), TargetSpec::from_preset(Preset::rlb_convs)),
                    TargetResolutionError);
    CHECK_THROWS_AS(resolve_targets(e->registry(), TargetSpec::parse("nothing.*")), TargetResolutionError);
}

TEST_CASE("pattern specs are registry-ordered, deduplicated and idempotent") {
    auto s = swin();
    const TargetSpec spec = TargetSpec::parse("au_conv,layers.*.conv,first_conv,layers.1.conv");
    const auto names = resolve_targets(s->registry(), spec);
    CHECK(names == std::vector<std::string>{"first_conv", "layers.0.conv", "layers.1.conv", "au_conv"});
    CHECK(resolve_targets(s->registry(), spec) == names);
    CHECK(TargetSpec::parse("convs").preset == Preset::convs);
    CHECK(TargetSpec::parse(TargetSpec::from_preset(Preset::mlp).str()).preset == Preset::mlp);
}

TEST_CASE("zero-init identity on every preset") {
    std::mt19937_64 rng(1);
    const Tensor4 x = testing::random_tensor(2, 3, 16, 16, rng);
    for (int kind = 0; kind < 2; ++kind) {
        const std::vector<Preset> presets = kind == 0
            ? std::vector<Preset>{Preset::all, Preset::convs, Preset::msa, Preset::mlp, Preset::first_conv,
                                  Preset::rstlb_convs, Preset::dfe_convs, Preset::bu_conv, Preset::au_conv}
            : std::vector<Preset>{Preset::all, Preset::convs, Preset::first_conv, Preset::rlb_convs,
                                  Preset::bu_conv, Preset::au_conv};
        for (Preset p : presets) {
            auto m = kind == 0 ? swin() : edsr();
            const Tensor4 before = m->forward(x, false);
            inject(*m, TargetSpec::from_preset(p), rank(4));
            CHECK_MESSAGE(testing::bitwise_equal(m->forward(x, false), before), to_string(p));
        }
    }
}

TEST_CASE("inject freezes the base and reports consistent counts") {
    auto m = swin();
    const std::size_t base = m->param_count();
    const InjectionReport rep = inject(*m, TargetSpec::from_preset(Preset::all), rank(8));
    CHECK(rep.base_total == base);
    std::size_t rows_base = 0;
    std::size_t rows_lora = 0;
    for (const auto& r : rep.rows) {
        rows_base += r.base_params;
        rows_lora += r.lora_params;
    }
    CHECK(rows_base == rep.base_total);
    CHECK(rows_lora == rep.lora_total);
    const auto oracle = testing::enumerate_params(*m);
    CHECK(oracle.base == rep.base_total);
    CHECK(oracle.adapter == rep.lora_total);
    CHECK(rep.lora_total ==
          closed_form(*m, resolve_targets(m->registry(), TargetSpec::from_preset(Preset::all)), 8));
    CHECK(rep.trainable_fraction == doctest::Approx(static_cast<double>(rep.lora_total) / rep.base_total));
    m->visit_params([](const std::string& name, Param& p) {
        CHECK_MESSAGE(p.trainable == (name.ends_with(".A") || name.ends_with(".B")), name);
    });
    CHECK_THROWS_AS(inject(*m, TargetSpec::from_preset(Preset::all), rank(8)), StateError);
}

TEST_CASE("report totals against brute-force enumeration across configurations") {
    struct Case {
        int kind;
        Preset preset;
        int r;
    };
    const Case cases[] = {{0, Preset::all, 1}, {0, Preset::msa, 4},   {0, Preset::mlp, 8},
                          {0, Preset::convs, 2}, {1, Preset::all, 8}, {1, Preset::rlb_convs, 4},
                          {1, Preset::first_conv, 1}, {0, Preset::bu_conv, 16}};
    for (const auto& c : cases) {
        auto m = c.kind == 0 ? swin() : edsr();
        const auto rep = inject(*m, TargetSpec::from_preset(c.preset), rank(c.r));
        const auto oracle = testing::enumerate_params(*m);
        CHECK(rep.lora_total == oracle.adapter);
        CHECK(rep.base_total == oracle.base);
        CHECK(count_params(*m).lora_total == rep.lora_total);
    }
}

TEST_CASE("counts are exactly linear in rank") {
    std::vector<std::size_t> totals;
    for (int r : {1, 4, 8, 64}) {
        auto m = swin();
        totals.push_back(inject(*m, TargetSpec::from_preset(Preset::all), rank(r)).lora_total);
    }
    CHECK(totals[1] == 4 * totals[0]);
    CHECK(totals[2] == 8 * totals[0]);
    CHECK(totals[3] == 64 * totals[0]);
    CHECK(totals[0] < totals[1]);
}

TEST_CASE("fraction grows under preset refinement") {
    auto frac = [](Preset p) {
        auto m = build_tiny_swin(TinySwinConfig{});
        return inject(*m, TargetSpec::from_preset(p), rank(8)).trainable_fraction;
    };
    CHECK(frac(Preset::all) > frac(Preset::convs));
    CHECK(frac(Preset::convs) > frac(Preset::first_conv));
}

TEST_CASE("single-layer accounting") {
    nn::Linear lin(64, 64);
    CHECK(lin.fan_in() + lin.fan_out() == 128);
    CHECK(8 * (lin.fan_in() + lin.fan_out()) == 1024);
    CHECK(lin.weight_numel() == 4096);
    nn::Conv2d conv(16, 16, 3);
    CHECK(4 * (conv.fan_in() + conv.fan_out()) == 640);
    CHECK(conv.weight_numel() == 2304);
}

TEST_CASE("count_params needs an injected model") {
    auto m = edsr();
    CHECK_THROWS_AS(count_params(*m), StateError);
}

TEST_CASE("SwinIR-scale adapter count near 886k") {
    auto m = build_tiny_swin(TinySwinConfig::swinir_scale());
    const auto rep = inject(*m, TargetSpec::from_preset(Preset::all), rank(8));
    MESSAGE("SwinIR-scale r=8 all-layer adapter parameters: " << rep.lora_total);
    CHECK(std::abs(static_cast<double>(rep.lora_total) - 886e3) / 886e3 <= 0.20);
    CHECK(rep.trainable_fraction < 0.15);
}

TEST_CASE("merge_all") {
    std::mt19937_64 rng(2);
    SUBCASE("B = 0 restores the base weights bitwise") {
        auto m = swin();
        std::map<std::string, Mat> before;
        m->visit_params([&](const std::string& n, Param& p) { before[n] = p.value; });
        inject(*m, TargetSpec::from_preset(Preset::all), rank(8));
        merge_all(*m);
        CHECK_FALSE(m->adapter_setup().has_value());
        std::size_t seen = 0;
        m->visit_params([&](const std::string& n, Param& p) {
            REQUIRE(before.count(n));
            CHECK(testing::bitwise_equal(p.value, before[n]));
            CHECK(p.trainable);
            ++seen;
        });
        CHECK(seen == before.size());
    }
    SUBCASE("trained adapters merge to an equivalent plain model") {
        for (int kind = 0; kind < 2; ++kind) {
            auto m = kind == 0 ? swin() : edsr();
            const std::size_t base = m->param_count();
            inject(*m, TargetSpec::from_preset(Preset::all), rank(8));
            randomize_b(*m, 3);
            auto merged = clone_model(*m);
            merge_all(*merged);
            CHECK(merged->param_count() == base);
            for (int t = 0; t < 5; ++t) {
                const Tensor4 x = testing::random_tensor(1, 3, 16, 16, rng);
                CHECK(testing::max_rel_dev(m->forward(x, false), merged->forward(x, false)) <= 1e-5);
            }
        }
    }
    SUBCASE("partially merged models are rejected") {
        auto m = edsr();
        inject(*m, TargetSpec::from_preset(Preset::all), rank(4));
        m->registry().at("first_conv").layer->merge();
        CHECK_THROWS_AS(merge_all(*m), StateError);
        CHECK_THROWS_AS(merge_adapters(*m), StateError);
    }
    SUBCASE("merge_adapters and unmerge_adapters round trip") {
        auto m = edsr();
        inject(*m, TargetSpec::from_preset(Preset::convs), rank(4));
        randomize_b(*m, 4);
        const auto h = testing::hash_params(*m, false);
        std::map<std::string, Mat> before;
        m->visit_params([&](const std::string& n, Param& p) { before[n] = p.value; });
        merge_adapters(*m);
        CHECK(testing::hash_params(*m, false) != h);
        unmerge_adapters(*m);
        m->visit_params([&](const std::string& n, Param& p) {
            CHECK((p.value - before[n]).cwiseAbs().maxCoeff() <= 1e-6f);
        });
        CHECK_THROWS_AS(unmerge_adapters(*m), StateError);
    }
}

TEST_CASE("clone_model is a deep copy") {
    std::mt19937_64 rng(4);
    auto m = swin();
    inject(*m, TargetSpec::from_preset(Preset::msa), rank(2));
    randomize_b(*m, 5);
    auto c = clone_model(*m);
    const Tensor4 x = testing::random_tensor(1, 3, 8, 8, rng);
    CHECK(testing::bitwise_equal(m->forward(x, false), c->forward(x, false)));
    c->visit_params([](const std::string&, Param& p) { p.value.setZero(); });
    CHECK_FALSE(testing::bitwise_equal(m->forward(x, false), c->forward(x, false)));
}

TEST_CASE("checkpoints") {
    std::mt19937_64 rng(5);
    const fs::path dir = temp_dir("ckpt");
    const Tensor4 x = testing::random_tensor(1, 3, 16, 16, rng);

    SUBCASE("plain model round trip") {
        auto m = swin();
        save_checkpoint(*m, dir / "m.ckpt");
        auto back = load_checkpoint(dir / "m.ckpt");
        CHECK(back->id() == m->id());
        CHECK(testing::bitwise_equal(back->forward(x, false), m->forward(x, false)));
        inject(*m, TargetSpec::from_preset(Preset::all), rank(2));
        CHECK_THROWS_AS(save_checkpoint(*m, dir / "x.ckpt"), StateError);
    }
    SUBCASE("adapter round trip") {
        auto m = swin();
        save_checkpoint(*m, dir / "base.ckpt");
        inject(*m, TargetSpec::from_preset(Preset::all), rank(8));
        randomize_b(*m, 6);
        save_adapters(*m, dir / "ad.ckpt");
        CHECK(fs::file_size(dir / "ad.ckpt") < fs::file_size(dir / "base.ckpt") * 3 / 10);

        auto fresh = load_checkpoint(dir / "base.ckpt");
        inject_and_load_adapters(*fresh, dir / "ad.ckpt");
        CHECK(testing::bitwise_equal(fresh->forward(x, false), m->forward(x, false)));

        auto other = load_checkpoint(dir / "base.ckpt");
        inject(*other, TargetSpec::from_preset(Preset::all), rank(4));
        CHECK_THROWS_AS(load_adapters(*other, dir / "ad.ckpt"), CheckpointIncompatible);
        auto other2 = load_checkpoint(dir / "base.ckpt");
        inject(*other2, TargetSpec::from_preset(Preset::msa), rank(8));
        CHECK_THROWS_AS(load_adapters(*other2, dir / "ad.ckpt"), CheckpointIncompatible);
        auto cnn = edsr();
        CHECK_THROWS_AS(inject_and_load_adapters(*cnn, dir / "ad.ckpt"), CheckpointIncompatible);
    }
    SUBCASE("corrupt files") {
        {
            std::ofstream bad(dir / "bad.ckpt");
            bad << "not a checkpoint";
        }
        CHECK_THROWS_AS(load_checkpoint(dir / "bad.ckpt"), Error);
        CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), IoError);
    }
    fs::remove_all(dir);
}
