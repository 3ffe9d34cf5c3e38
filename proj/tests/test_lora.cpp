#include <doctest.h>

#include <cmath>
#include <memory>

#include <spdlog/sinks/ringbuffer_sink.h>
#include <spdlog/spdlog.h>

#include "adaptsr/errors.hpp"
#include "adaptsr/lora.hpp"
#include "support.hpp"

using namespace adaptsr;
using adaptsr::testing::random_mat;

namespace {

LoraConfig cfg_of(int rank, double alpha = 1.0, std::uint64_t seed = 7) {
    LoraConfig c;
    c.rank = rank;
    c.alpha = alpha;
    c.seed = seed;
    return c;
}

Mat row(std::initializer_list<float> v) {
    Mat m(1, static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (float x : v) m(0, i++) = x;
    return m;
}

} // namespace

TEST_CASE("effective_scale") {
    CHECK(effective_scale(1, 8) == 0.125);
    CHECK(effective_scale(1, 1) == 1.0);
    CHECK(effective_scale(2, 4) == 0.5);
    CHECK_THROWS_AS(effective_scale(1, 0), InvalidConfig);
    CHECK_THROWS_AS(effective_scale(0, 4), InvalidConfig);
    CHECK_THROWS_AS(effective_scale(-1, 4), InvalidConfig);
}

TEST_CASE("lora config validation") {
    LoraConfig c;
    CHECK_NOTHROW(c.validate());
    c.rank = 0;
    CHECK_THROWS_AS(c.validate(), InvalidConfig);
    c.rank = 4;
    c.init_std = 0.0;
    CHECK_THROWS_AS(c.validate(), InvalidConfig);
}

TEST_CASE("linear adapter starts as the identity of its base") {
    std::mt19937_64 rng(1);
    const Mat w = random_mat(2, 2, rng);
    const Mat b = random_mat(1, 2, rng);
    auto a = make_linear_adapter(w, b, cfg_of(1));
    CHECK((a.lora.B.value.array() == 0.0f).all());
    CHECK_FALSE(a.base_weight.trainable);
    CHECK_FALSE(a.base_bias->trainable);
    for (int t = 0; t < 20; ++t) {
        const Mat x = random_mat(5, 2, rng);
        Mat base = x * w.transpose();
        base.rowwise() += b.row(0);
        CHECK(testing::bitwise_equal(linear_forward(a, x), base));
    }
}

TEST_CASE("A initialisation is seeded") {
    std::mt19937_64 rng(2);
    const Mat w = random_mat(6, 5, rng);
    auto a1 = make_linear_adapter(w, std::nullopt, cfg_of(3, 1.0, 42));
    auto a2 = make_linear_adapter(w, std::nullopt, cfg_of(3, 1.0, 42));
    auto a3 = make_linear_adapter(w, std::nullopt, cfg_of(3, 1.0, 43));
    CHECK(testing::bitwise_equal(a1.lora.A.value, a2.lora.A.value));
    CHECK_FALSE(testing::bitwise_equal(a1.lora.A.value, a3.lora.A.value));
}

TEST_CASE("A entries follow normal(0, init_std)") {
    std::mt19937_64 rng(3);
    const Mat w = random_mat(256, 256, rng);
    auto a = make_linear_adapter(w, std::nullopt, cfg_of(16));
    const double n = static_cast<double>(a.lora.A.value.size());
    const double mean = a.lora.A.value.cast<double>().sum() / n;
    const double var = (a.lora.A.value.cast<double>().array() - mean).square().sum() / n;
    CHECK(std::abs(mean) < 1e-3);
    CHECK(std::sqrt(var) == doctest::Approx(0.02).epsilon(0.03));
}

TEST_CASE("over-rank construction warns but succeeds") {
    auto sink = std::make_shared<spdlog::sinks::ringbuffer_sink_mt>(16);
    auto logger = std::make_shared<spdlog::logger>("capture", sink);
    auto previous = spdlog::default_logger();
    spdlog::set_default_logger(logger);
    Mat w = Mat::Identity(2, 2);
    std::optional<LinearLoraAdapter> a;
    CHECK_NOTHROW(a.emplace(make_linear_adapter(w, std::nullopt, cfg_of(3))));
    CHECK(a->lora.over_rank());
    const auto lines = sink->last_formatted(16);
    spdlog::set_default_logger(previous);
    REQUIRE(lines.size() == 1);
    CHECK(lines[0].find("no longer low-rank") != std::string::npos);
}

TEST_CASE("linear forward hand example") {
    LinearLoraAdapter a(Mat::Identity(2, 2), std::nullopt, cfg_of(1));
    a.lora.A.value = row({1, 0});
    a.lora.B.value = Mat(2, 1);
    a.lora.B.value << 1, 0;
    const Mat y = linear_forward(a, row({1, 2}));
    CHECK(y(0, 0) == 2.0f);
    CHECK(y(0, 1) == 2.0f);
    CHECK_THROWS_AS(linear_forward(a, row({1, 2, 3})), DimensionError);

    const Mat& merged = a.merge();
    Mat expect(2, 2);
    expect << 2, 0, 0, 1;
    CHECK(testing::bitwise_equal(merged, expect));
}

TEST_CASE("doubling alpha doubles the delta path") {
    std::mt19937_64 rng(4);
    const Mat w = random_mat(4, 3, rng);
    auto a = make_linear_adapter(w, std::nullopt, cfg_of(2, 1.0));
    a.lora.B.value = random_mat(4, 2, rng);
    const Mat x = random_mat(6, 3, rng);
    const Mat base = x * w.transpose();
    const Mat d1 = linear_forward(a, x) - base;
    a.lora.set_alpha(2.0);
    const Mat d2 = linear_forward(a, x) - base;
    CHECK((d2 - 2.0f * d1).cwiseAbs().maxCoeff() <= 1e-5f * d1.cwiseAbs().maxCoeff());

    const Mat delta2 = a.lora.delta();
    a.lora.set_alpha(1.0);
    CHECK(testing::bitwise_equal(delta2, 2.0f * a.lora.delta()));
}

TEST_CASE("delta is linear in each entry of B") {
    std::mt19937_64 rng(5);
    auto a = make_linear_adapter(random_mat(3, 4, rng), std::nullopt, cfg_of(2));
    a.lora.B.value = random_mat(3, 2, rng);
    const Mat d0 = a.lora.delta();
    a.lora.B.value(1, 0) += 0.5f;
    const Mat d1 = a.lora.delta();
    a.lora.B.value(1, 0) += 0.5f;
    const Mat d2 = a.lora.delta();
    CHECK(((d2 - d1) - (d1 - d0)).cwiseAbs().maxCoeff() < 1e-6f);
    // only row 1 moves
    CHECK((d1.row(0) - d0.row(0)).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("conv adapter scalar example") {
    ops::ConvGeometry g{1, 1, 1};
    ConvLoraAdapter a(Mat::Constant(1, 1, 2.0f), std::nullopt, g, cfg_of(1));
    a.lora.A.value = Mat::Constant(1, 1, 0.5f);
    a.lora.B.value = Mat::Constant(1, 1, 3.0f);
    Tensor4 x(1, 1, 1, 1);
    x.data[0] = 2.0f;
    CHECK(conv_forward(a, x).data[0] == 7.0f);
    CHECK(a.merge()(0, 0) == 3.5f);
    Tensor4 bad(1, 2, 1, 1);
    a.unmerge();
    CHECK_THROWS_AS(conv_forward(a, bad), DimensionError);
}

TEST_CASE("conv adapter starts as its base conv") {
    std::mt19937_64 rng(6);
    for (int k : {1, 3}) {
        ops::ConvGeometry g{4, 5, k, 1, k / 2};
        const Mat kernel = random_mat(5, g.patch(), rng, 0.2f);
        const Mat bias = random_mat(1, 5, rng);
        ConvLoraAdapter a(kernel, bias, g, cfg_of(2));
        const Tensor4 x = testing::random_tensor(2, 4, 6, 7, rng);
        CHECK(testing::bitwise_equal(conv_forward(a, x), ops::conv2d(x, kernel, &bias, g)));
    }
}

TEST_CASE("conv dual path: factored vs merged kernel") {
    std::mt19937_64 rng(7);
    for (int k : {1, 3}) {
        for (int pad : {0, k / 2, 1}) {
            for (int rank : {1, 4, 8}) {
                ops::ConvGeometry g{3, 6, k, 1, pad};
                ConvLoraAdapter a(random_mat(6, g.patch(), rng, 0.2f), random_mat(1, 6, rng), g, cfg_of(rank));
                a.lora.B.value = random_mat(6, rank, rng, 0.5f);
                const Tensor4 x = testing::random_tensor(2, 3, 5, 6, rng);
                const Tensor4 factored = conv_forward(a, x);
                a.merge();
                const Tensor4 merged = conv_forward(a, x);
                CHECK(testing::max_rel_dev(factored, merged) <= 1e-5);
            }
        }
    }
}

TEST_CASE("merge, unmerge and their state errors") {
    std::mt19937_64 rng(8);
    const Mat w = random_mat(5, 4, rng);
    auto a = make_linear_adapter(w, std::nullopt, cfg_of(2));

    SUBCASE("B = 0 merges to W0 bitwise") {
        CHECK(testing::bitwise_equal(a.merge(), w));
    }
    SUBCASE("round trip and re-merge") {
        a.lora.B.value = random_mat(5, 2, rng);
        const Mat first = a.merge();
        CHECK(a.lora.state() == MergeState::merged);
        CHECK(a.lora.cached_delta().has_value());
        CHECK_THROWS_AS(a.merge(), StateError);
        CHECK_THROWS_AS(a.lora.set_alpha(2.0), StateError);
        a.unmerge();
        CHECK(a.lora.state() == MergeState::wrapped);
        CHECK((a.base_weight.value - w).cwiseAbs().maxCoeff() <= 1e-6f);
        CHECK_THROWS_AS(a.unmerge(), StateError);
        const Mat second = a.merge();
        CHECK((first - second).cwiseAbs().maxCoeff() <= 1e-6f);
    }
    SUBCASE("merged forwards match wrapped ones") {
        for (int rank : {1, 4, 8}) {
            auto b = make_linear_adapter(random_mat(12, 10, rng), random_mat(1, 12, rng), cfg_of(rank));
            b.lora.B.value = random_mat(12, rank, rng);
            const Mat x = random_mat(9, 10, rng);
            const Mat wrapped = linear_forward(b, x);
            b.merge();
            const Mat merged = linear_forward(b, x);
            const float rel = (wrapped - merged).cwiseAbs().maxCoeff() / wrapped.cwiseAbs().maxCoeff();
            CHECK(rel <= 1e-5f);
        }
    }
}

TEST_CASE("backward isolates the frozen base") {
    std::mt19937_64 rng(9);
    auto a = make_linear_adapter(random_mat(4, 3, rng), random_mat(1, 4, rng), cfg_of(2));
    a.lora.B.value = random_mat(4, 2, rng);
    a.backward(random_mat(5, 3, rng), random_mat(5, 4, rng));
    CHECK(a.base_weight.grad.size() == 0);
    CHECK(a.base_bias->grad.size() == 0);
    CHECK(a.lora.A.grad.cwiseAbs().maxCoeff() > 0.0f);
    CHECK(a.lora.B.grad.cwiseAbs().maxCoeff() > 0.0f);
    a.merge();
    CHECK_THROWS_AS(a.backward(random_mat(5, 3, rng), random_mat(5, 4, rng)), StateError);
}

namespace {

using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// L = 0.5·||x·(W0 + s·B·A)ᵀ + b − t||², evaluated in double precision.
double linear_loss(const MatD& x, const MatD& w, const MatD& b, const MatD& A, const MatD& B, double s,
                   const MatD& t) {
    MatD y = x * (w + s * B * A).transpose();
    y.rowwise() += b.row(0);
    return 0.5 * (y - t).squaredNorm();
}

double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

} // namespace

TEST_CASE("finite-difference gradient check on a 2x2 adapter") {
    std::mt19937_64 rng(10);
    for (int rank : {1, 2}) {
        auto a = make_linear_adapter(random_mat(2, 2, rng), random_mat(1, 2, rng), cfg_of(rank, 1.0));
        a.lora.A.value = random_mat(rank, 2, rng);
        a.lora.B.value = random_mat(2, rank, rng);
        const Mat x = random_mat(3, 2, rng);
        const Mat t = random_mat(3, 2, rng);
        const Mat y = linear_forward(a, x);
        a.backward(x, y - t);

        const MatD xd = x.cast<double>();
        const MatD wd = a.base_weight.value.cast<double>();
        const MatD bd = a.base_bias->value.cast<double>();
        const MatD td = t.cast<double>();
        const double s = a.lora.scale();
        const double h = 1e-6;
        for (int which = 0; which < 2; ++which) {
            const Mat& value = which == 0 ? a.lora.A.value : a.lora.B.value;
            const Mat& grad = which == 0 ? a.lora.A.grad : a.lora.B.grad;
            for (Eigen::Index i = 0; i < value.rows(); ++i) {
                for (Eigen::Index j = 0; j < value.cols(); ++j) {
                    MatD A = a.lora.A.value.cast<double>();
                    MatD B = a.lora.B.value.cast<double>();
                    MatD& P = which == 0 ? A : B;
                    const double orig = P(i, j);
                    P(i, j) = orig + h;
                    const double up = linear_loss(xd, wd, bd, A, B, s, td);
                    P(i, j) = orig - h;
                    const double down = linear_loss(xd, wd, bd, A, B, s, td);
                    const double numeric = (up - down) / (2 * h);
                    CHECK(rel_err(grad(i, j), numeric) <= 1e-3);
                }
            }
        }
    }
}

TEST_CASE("finite-difference gradient check on a conv adapter") {
    std::mt19937_64 rng(11);
    ops::ConvGeometry g{2, 2, 3, 1, 1};
    ConvLoraAdapter a(random_mat(2, g.patch(), rng, 0.3f), random_mat(1, 2, rng), g, cfg_of(2, 2.0));
    a.lora.A.value = random_mat(2, g.patch(), rng, 0.3f);
    a.lora.B.value = random_mat(2, 2, rng, 0.3f);
    const Tensor4 x = testing::random_tensor(1, 2, 4, 4, rng);
    const Tensor4 t = testing::random_tensor(1, 2, 4, 4, rng);
    ConvLoraAdapter::Cache cache;
    const Tensor4 y = a.forward(x, &cache);
    Tensor4 dy = y;
    for (std::size_t i = 0; i < dy.data.size(); ++i) dy.data[i] = y.data[i] - t.data[i];
    a.backward(cache, dy);

    // double-precision direct convolution oracle
    auto loss = [&](const MatD& A, const MatD& B) {
        const MatD kernel = a.base_kernel.value.cast<double>() + a.lora.scale() * B * A;
        double l = 0.0;
        for (int co = 0; co < 2; ++co) {
            for (int yy = 0; yy < 4; ++yy) {
                for (int xx = 0; xx < 4; ++xx) {
                    double acc = a.base_bias->value(0, co);
                    for (int ci = 0; ci < 2; ++ci) {
                        for (int ky = 0; ky < 3; ++ky) {
                            for (int kx = 0; kx < 3; ++kx) {
                                const int iy = yy + ky - 1;
                                const int ix = xx + kx - 1;
                                if (iy < 0 || iy >= 4 || ix < 0 || ix >= 4) continue;
                                acc += kernel(co, (ci * 3 + ky) * 3 + kx) * x.at(0, ci, iy, ix);
                            }
                        }
                    }
                    const double d = acc - t.at(0, co, yy, xx);
                    l += 0.5 * d * d;
                }
            }
        }
        return l;
    };
    const double h = 1e-6;
    for (int which = 0; which < 2; ++which) {
        const Mat& value = which == 0 ? a.lora.A.value : a.lora.B.value;
        const Mat& grad = which == 0 ? a.lora.A.grad : a.lora.B.grad;
        for (Eigen::Index i = 0; i < value.rows(); ++i) {
            for (Eigen::Index j = 0; j < value.cols(); ++j) {
                MatD A = a.lora.A.value.cast<double>();
                MatD B = a.lora.B.value.cast<double>();
                MatD& P = which == 0 ? A : B;
                const double orig = P(i, j);
                P(i, j) = orig + h;
                const double up = loss(A, B);
                P(i, j) = orig - h;
                const double down = loss(A, B);
                CHECK(rel_err(grad(i, j), (up - down) / (2 * h)) <= 1e-3);
            }
        }
    }
}
