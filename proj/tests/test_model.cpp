#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tsflow/model.hpp"
#include "tsflow/ops.hpp"
#include "tsflow/tasks.hpp"

using namespace tsflow;
using namespace tsflow::ops;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.width = 16;
    c.depth = 2;
    c.heads = 2;
    c.patch = {2, 2};
    c.image_h = 8;
    c.image_w = 6;
    c.frames = 3;
    return c;
}

ConditionInput<double> random_condition(const ModelConfig& c, std::size_t B, Rng& rng) {
    ConditionInput<double> in;
    const std::size_t Tc = c.cond_frames();
    in.cond = rng.uniform_tensor<double>({B, Tc, c.cond_channels, c.image_h, c.image_w}, 0.0, 1.0);
    in.aux = rng.uniform_tensor<double>({B, Tc, c.aux_channels, c.image_h, c.image_w}, 0.0, 1.0);
    for (std::size_t b = 0; b < B; ++b) {
        std::vector<int> doy(c.frames);
        for (std::size_t i = 0; i < c.frames; ++i) doy[i] = static_cast<int>(10 + 20 * i + b);
        in.doy.push_back(doy);
        in.lonlat.push_back({rng.uniform(-170.0, 170.0), rng.uniform(-80.0, 80.0)});
    }
    return in;
}

void randomize(FlowTransformer<double>& m, Rng& rng, double stddev = 0.2) {
    for (auto& v : m.params().vars())
        for (auto& x : v.mutable_value().data()) x = rng.normal() * stddev;
}

}  // namespace

TEST_CASE("configuration validation") {
    auto c = small_config();
    CHECK_NOTHROW(c.validate());
    c.width = 12;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = small_config();
    c.heads = 3;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = small_config();
    c.image_w = 7;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = small_config();
    c.forecast = true;
    c.history = 2;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    CHECK_THROWS(FlowTransformer<double>(ModelConfig{.width = 20}, 0));
}

TEST_CASE("a fresh model is the identity on tokens and emits zero velocity") {
    Rng rng(1);
    for (Fusion f : {Fusion::acor, Fusion::concat, Fusion::crossattn}) {
        auto c = small_config();
        c.fusion = f;
        FlowTransformer<double> m(c, 42);
        const auto in = random_condition(c, 2, rng);
        const auto ctx = m.prepare(in);
        const auto z = rng.normal_tensor<double>({2, c.frames, c.tokens_per_frame(), c.width});
        const std::vector<double> t{0.3, 0.8};
        const Var<double> z_fm(m.flow_time_codes(t));
        CHECK(max_abs_diff(m.run_blocks(ctx, constant(z), z_fm).value(), z) == 0.0);
        const auto x = rng.normal_tensor<double>({2, c.frames, c.channels, c.image_h, c.image_w});
        const auto v = m.forward(ctx, constant(x), t).value();
        CHECK(v.shape() == x.shape());
        for (double e : v.data()) CHECK(e == 0.0);
    }
}

TEST_CASE("STM and metadata switches control parameters and inputs") {
    auto c = small_config();
    c.use_stm = false;
    FlowTransformer<double> m(c, 0);
    for (const auto& n : m.params().names()) CHECK(n.find("stm.") == std::string::npos);
    Rng rng(2);
    auto in = random_condition(c, 1, rng);
    in.aux = Tensor<double>();
    CHECK_NOTHROW(m.prepare(in));

    c.use_stm = true;
    FlowTransformer<double> s(c, 0);
    CHECK(s.params().contains("blocks.0.spatial.stm.w1"));
    CHECK(s.params().contains("blocks.1.temporal.stm.w2"));
    CHECK(s.params().get("blocks.0.spatial.stm.w1").value()[0] == 0.0);
    CHECK_THROWS(s.prepare(in));

    auto nometa = random_condition(c, 1, rng);
    nometa.doy.clear();
    CHECK_THROWS(s.prepare(nometa));
    c.use_metadata = false;
    FlowTransformer<double> q(c, 0);
    CHECK_NOTHROW(q.prepare(nometa));
}

TEST_CASE("output shapes for every published task layout") {
    Rng rng(3);
    for (Task task : {Task::recon, Task::cloudrm, Task::scd, Task::forecast})
        for (int variant : {0, 1}) {
            const auto tc = TaskConfig::published(task, variant);
            ModelConfig base = small_config();
            base.depth = 1;
            const auto c = tc.apply(base);
            INFO(to_string(task) << " variant " << variant);
            FlowTransformer<double> m(c, 1);
            const auto ctx = m.prepare(random_condition(c, 2, rng));
            const auto x = rng.normal_tensor<double>({2, c.frames, c.channels, c.image_h, c.image_w});
            const std::vector<double> t{0.1, 0.9};
            const auto y = m.forward(ctx, constant(x), t);
            CHECK(y.shape() == Shape{2, c.output_frames(), tc.channels, c.image_h, c.image_w});
            for (double e : y.value().data()) CHECK(e == 0.0);
        }
    CHECK(TaskConfig::published(Task::recon).cond_channels == 12);
    CHECK(TaskConfig::published(Task::recon).channels == 10);
    CHECK(TaskConfig::published(Task::scd, 0).cond_channels == 4);
    CHECK(TaskConfig::published(Task::scd, 0).channels == 6);
    CHECK(TaskConfig::published(Task::scd, 1).cond_channels == 3);
    CHECK(TaskConfig::published(Task::scd, 1).channels == 2);
    CHECK(TaskConfig::published(Task::forecast, 1).cond_channels == 6);
    CHECK(TaskConfig::published(Task::forecast, 1).channels == 4);
}

TEST_CASE("forecasting emits history and future frames jointly") {
    auto c = small_config();
    c.forecast = true;
    c.frames = 4;
    c.history = 4;
    c.cond_channels = 3;
    FlowTransformer<double> m(c, 0);
    Rng rng(4);
    auto in = random_condition(c, 1, rng);
    const auto ctx = m.prepare(in);
    const std::vector<double> t{0.5};
    const auto y = m.forward(ctx, constant(rng.normal_tensor<double>({1, 4, 3, c.image_h, c.image_w})), t).value();
    CHECK(y.shape() == Shape{1, 8, 3, c.image_h, c.image_w});
    for (double e : y.data()) CHECK(e == 0.0);
    for (const auto& n : m.params().names()) {
        CHECK_FALSE((n.find("temporal.acor") != std::string::npos));
        CHECK_FALSE((n.find("temporal.stm") != std::string::npos));
    }
    in.doy.clear();
    CHECK_THROWS_WITH(m.prepare(in), doctest::Contains("future DOY"));
}

TEST_CASE("channel mismatches are reported with expected and actual counts") {
    auto c = small_config();
    FlowTransformer<double> m(c, 0);
    Rng rng(5);
    auto in = random_condition(c, 1, rng);
    in.cond = Tensor<double>({1, c.frames, 4, c.image_h, c.image_w});
    CHECK_THROWS_WITH(m.prepare(in), doctest::Contains("4 channels, task expects C_con=5"));
    const auto ctx = m.prepare(random_condition(c, 1, rng));
    const std::vector<double> t{0.5};
    CHECK_THROWS_WITH(m.forward(ctx, constant(Tensor<double>({1, c.frames, 2, c.image_h, c.image_w})), t),
                      doctest::Contains("2 channels, task expects C=3"));
}

TEST_CASE("parameter specialisation reduces the spatial sub-block to a pre-LN attention residual") {
    auto c = small_config();
    c.depth = 1;
    FlowTransformer<double> m(c, 6);
    Rng rng(6);
    randomize(m, rng);
    const auto& p0 = m.spatial_params(0);
    SubBlockParams<double> p = p0;
    const std::size_t d = c.width, S = c.tokens_per_frame();
    p.acor.weight = Var<double>(Tensor<double>(p0.acor.weight.shape()), true);
    p.acor.bias = Var<double>(Tensor<double>(p0.acor.bias.shape()), true);
    Tensor<double> ab({3 * d});
    for (std::size_t i = 0; i < d; ++i) {
        ab[i] = 1.0;          // gamma
        ab[2 * d + i] = 1.0;  // alpha
    }
    p.adaln = {Var<double>(Tensor<double>({d, 3 * d}), true), Var<double>(ab, true)};
    p.w1 = Var<double>(Tensor<double>({1}), true);
    p.w2 = Var<double>(Tensor<double>({1}), true);

    const std::size_t B = 2;
    const auto z = rng.normal_tensor<double>({B * c.frames, S, d});
    const auto zc = rng.normal_tensor<double>({B * c.frames, S, d});
    const auto zfm = rng.normal_tensor<double>({B, d});
    const auto aux = rng.normal_tensor<double>({B * c.frames, S, S});
    const auto y = spatial_block(constant(z), constant(zc), constant(Tensor<double>({B, d})), constant(zfm), constant(aux), c, p);
    const auto expect = add(constant(z), biased_mhsa(layer_norm(constant(z)), Var<double>(), c.heads, p.attn));
    CHECK(max_abs_diff(y.value(), expect.value()) < 1e-12);
}

TEST_CASE("temporal sub-block is equivariant to frame permutations once positional terms are neutral") {
    auto c = small_config();
    c.depth = 1;
    c.frames = 4;
    FlowTransformer<double> m(c, 7);
    Rng rng(7);
    randomize(m, rng, 0.3);
    SubBlockParams<double> p = m.temporal_params(0);
    const std::size_t d = c.width, T = c.frames, R = 3, B = 2;
    // Keep only the centre tap of the 1D ACor convolution and disable the
    // distance prior: both encode frame order by construction.
    Tensor<double> w = p.acor.weight.value();
    for (std::size_t k : {std::size_t(0), std::size_t(2)})
        std::fill_n(w.data().begin() + k * d * 2 * d, d * 2 * d, 0.0);
    p.acor.weight = Var<double>(w, true);
    p.w1 = Var<double>(Tensor<double>({1}), true);
    p.w2 = Var<double>(Tensor<double>({1}, {0.7}), true);

    const auto z = rng.normal_tensor<double>({B * R, T, d});
    const auto zc = rng.normal_tensor<double>({B * R, T, d});
    const auto doy = rng.normal_tensor<double>({B, T, d});
    const auto zfm = rng.normal_tensor<double>({B, d});
    const auto q = rng.normal_tensor<double>({B * R, T, 2});
    auto aux_of = [&](const Tensor<double>& qq) {
        Tensor<double> a({B * R, T, T});
        for (std::size_t n = 0; n < B * R; ++n)
            for (std::size_t i = 0; i < T; ++i)
                for (std::size_t j = 0; j < T; ++j)
                    a.at({n, i, j}) = -0.5 * (std::abs(qq.at({n, i, 0}) - qq.at({n, j, 0})) + std::abs(qq.at({n, i, 1}) - qq.at({n, j, 1})));
        return a;
    };
    const std::vector<std::size_t> perm{2, 0, 3, 1};
    auto permuted = [&](const Tensor<double>& x) {
        Tensor<double> y(x.shape());
        const std::size_t rows = x.dim(0), inner = x.numel() / (rows * T);
        for (std::size_t n = 0; n < rows; ++n)
            for (std::size_t i = 0; i < T; ++i)
                std::copy_n(x.data().begin() + (n * T + perm[i]) * inner, inner, y.data().begin() + (n * T + i) * inner);
        return y;
    };
    const auto y = temporal_block(constant(z), constant(zc), constant(doy), constant(zfm), constant(aux_of(q)), c, p).value();
    const auto yp = temporal_block(constant(permuted(z)), constant(permuted(zc)), constant(permuted(doy)), constant(zfm),
                                   constant(aux_of(permuted(q))), c, p)
                        .value();
    CHECK(max_abs_diff(permuted(y), yp) < 1e-10);

    // The distance prior breaks the symmetry, as intended.
    p.w1 = Var<double>(Tensor<double>({1}, {1.0}), true);
    const auto y1 = temporal_block(constant(z), constant(zc), constant(doy), constant(zfm), constant(aux_of(q)), c, p).value();
    const auto y1p = temporal_block(constant(permuted(z)), constant(permuted(zc)), constant(permuted(doy)), constant(zfm),
                                    constant(aux_of(permuted(q))), c, p)
                         .value();
    CHECK(max_abs_diff(permuted(y1), y1p) > 1e-6);
}

TEST_CASE("condition tokens are left untouched by a forward pass") {
    auto c = small_config();
    FlowTransformer<double> m(c, 8);
    Rng rng(8);
    randomize(m, rng);
    const auto ctx = m.prepare(random_condition(c, 2, rng));
    const auto before_s = ctx.cond_s.value();
    const auto before_t = ctx.cond_t.value();
    const std::vector<double> t{0.2, 0.4};
    const auto x = rng.normal_tensor<double>({2, c.frames, c.channels, c.image_h, c.image_w});
    const auto a = m.forward(ctx, constant(x), t).value();
    const auto b = m.forward(ctx, constant(x), t).value();
    CHECK(a == b);
    CHECK(ctx.cond_s.value() == before_s);
    CHECK(ctx.cond_t.value() == before_t);
}

TEST_CASE("temporal sub-block over a single frame") {
    auto c = small_config();
    c.frames = 1;
    c.depth = 1;
    FlowTransformer<double> m(c, 9);
    Rng rng(9);
    const auto ctx = m.prepare(random_condition(c, 1, rng));
    const auto z = rng.normal_tensor<double>({1, 1, c.tokens_per_frame(), c.width});
    const std::vector<double> t{0.5};
    CHECK(m.run_blocks(ctx, constant(z), Var<double>(m.flow_time_codes(t))).value() == z);
}
