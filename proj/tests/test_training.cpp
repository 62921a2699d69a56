#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <sstream>

#include "tsflow/layer_checks.hpp"
#include "tsflow/training.hpp"

using namespace tsflow;
namespace fs = std::filesystem;

namespace {

TrainConfig small_run(std::uint64_t seed = 3) {
    TrainConfig c;
    c.model.width = 16;
    c.model.depth = 1;
    c.model.heads = 2;
    c.batch = 2;
    c.steps = 10;
    c.seed = seed;
    c.optim.lr = 1e-3;
    return c;
}

const std::vector<TimeSeriesSample>& small_data() {
    static const auto data = [] {
        SynthConfig sc;
        sc.rois = 4;
        sc.seed = 21;
        return synthesize_samples(sc);
    }();
    return data;
}

fs::path scratch(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("tsflow_train_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

}  // namespace

TEST_CASE("AdamW first step and decoupled decay") {
    std::vector<Var<double>> p{Var<double>(Tensor<double>({3}, {1.0, -2.0, 0.5}), true)};
    AdamWState<double> st;
    AdamWConfig cfg{.lr = 0.01, .weight_decay = 0.0};
    REQUIRE(adamw_step(p, {Tensor<double>({3}, {4.0, -0.1, 1e-3})}, st, cfg));
    // Bias-corrected first step: lr * g / (|g| + eps).
    CHECK(p[0].value()[0] == doctest::Approx(1.0 - 0.01 * 4.0 / (4.0 + 1e-8)).epsilon(1e-12));
    CHECK(p[0].value()[1] == doctest::Approx(-2.0 + 0.01 * 0.1 / (0.1 + 1e-8)).epsilon(1e-12));
    CHECK(p[0].value()[2] == doctest::Approx(0.5 - 0.01 * 1e-3 / (1e-3 + 1e-8)).epsilon(1e-12));

    std::vector<Var<double>> q{Var<double>(Tensor<double>({2}, {1.0, -3.0}), true)};
    AdamWState<double> sq;
    AdamWConfig decay{.lr = 0.1, .weight_decay = 0.5};
    adamw_step(q, {Tensor<double>({2})}, sq, decay);
    CHECK(q[0].value()[0] == doctest::Approx(1.0 * (1.0 - 0.05)).epsilon(1e-14));
    CHECK(q[0].value()[1] == doctest::Approx(-3.0 * (1.0 - 0.05)).epsilon(1e-14));
}

TEST_CASE("AdamW skips non-finite gradients") {
    std::vector<Var<double>> p{Var<double>(Tensor<double>({2}, {1.0, 2.0}), true)};
    AdamWState<double> st;
    CHECK_FALSE(adamw_step(p, {Tensor<double>({2}, {std::numeric_limits<double>::quiet_NaN(), 0.0})}, st, AdamWConfig{}));
    CHECK(p[0].value()[0] == 1.0);
    CHECK(st.skipped == 1);
    CHECK(st.step == 0);
    CHECK_THROWS(adamw_step(p, {Tensor<double>({3})}, st, AdamWConfig{}));
}

TEST_CASE("AdamW descends a quadratic bowl") {
    std::vector<Var<double>> p{Var<double>(Tensor<double>({4}, {1.0, -2.0, 3.0, 0.5}), true)};
    AdamWState<double> st;
    AdamWConfig cfg{.lr = 0.05, .weight_decay = 0.0};
    auto loss = [&] {
        double s = 0.0;
        for (double v : p[0].value().data()) s += v * v;
        return s;
    };
    const double start = loss();
    for (int i = 0; i < 300; ++i) {
        Tensor<double> g = p[0].value();
        for (auto& v : g.data()) v *= 2.0;
        adamw_step(p, {g}, st, cfg);
    }
    CHECK(loss() < 1e-2 * start);
}

TEST_CASE("gradient clipping bounds the first moment") {
    const Tensor<double> g({3}, {3.0, 4.0, 12.0});  // norm 13
    CHECK(global_norm<double>({g}) == doctest::Approx(13.0));
    for (double clip : {1.0, 13.0, 100.0}) {
        std::vector<Var<double>> p{Var<double>(Tensor<double>({3}), true)};
        AdamWState<double> st;
        AdamWConfig cfg{.clip_norm = clip};
        adamw_step(p, {g}, st, cfg);
        const double mnorm = global_norm<double>(st.m) / (1.0 - cfg.beta1);
        CHECK(mnorm <= std::min(clip, 13.0) + 1e-12);
        CHECK(mnorm == doctest::Approx(std::min(clip, 13.0)).epsilon(1e-12));
    }
}

TEST_CASE("training is deterministic per seed") {
    Trainer a(small_run(), small_data()), b(small_run(), small_data());
    a.run(4);
    b.run(4);
    CHECK(a.losses() == b.losses());
    // Parameters too: reductions must not depend on where buffers are allocated.
    const auto& pa = a.model().params().vars();
    const auto& pb = b.model().params().vars();
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].value() == pb[i].value());
    Trainer c(small_run(4), small_data());
    c.run(4);
    CHECK(c.losses() != a.losses());
    for (double l : a.losses()) CHECK(std::isfinite(l));
}

TEST_CASE("checkpoints restore bit-exact outputs and resume step-identically") {
    const auto dir = scratch("ckpt");
    Trainer straight(small_run(), small_data());
    straight.run(10);

    Trainer first(small_run(), small_data());
    first.run(5);
    first.save(dir / "half.ckpt");
    auto resumed = Trainer::resume(dir / "half.ckpt", small_data());
    CHECK(resumed.steps_done() == 5);
    resumed.run(10);
    REQUIRE(resumed.losses().size() >= 5);
    const auto& tail = resumed.losses();
    for (std::size_t i = 0; i < 5; ++i) CHECK(tail[tail.size() - 5 + i] == straight.losses()[5 + i]);
    CHECK(resumed.current_ema() == straight.current_ema());

    straight.save(dir / "full.ckpt");
    const auto ck = load_checkpoint(dir / "full.ckpt");
    CHECK(ck.step == 10);
    const auto batch = make_batch(small_data(), {WindowRef{0, 0}}, straight.config().task);
    SolverConfig solver;
    CHECK(sample(*ck.model, batch.cond, solver, 5) == sample(straight.model(), batch.cond, solver, 5));
    CHECK(ck.model->params().names() == straight.model().params().names());
    fs::remove_all(dir);
}

TEST_CASE("checkpoint corruption is reported") {
    const auto dir = scratch("corrupt");
    Trainer t(small_run(), small_data());
    t.save(dir / "a.ckpt");
    fs::resize_file(dir / "a.ckpt", fs::file_size(dir / "a.ckpt") - 16);
    CHECK_THROWS(load_checkpoint(dir / "a.ckpt"));
    CHECK_THROWS(load_checkpoint(dir / "missing.ckpt"));
    fs::remove_all(dir);
}

TEST_CASE("configuration round-trips through JSON") {
    auto c = small_run();
    c.task = TaskConfig::toy(Task::scd, 3, 4, 5);
    c.optim.clip_norm = 1.0;
    const auto back = train_config_from_json(to_json(c));
    CHECK(to_json(back) == to_json(c));
    CHECK(back.task.classes == 5);
    CHECK(*back.optim.clip_norm == 1.0);
}

TEST_CASE("trainer rejects data that does not fit the model") {
    auto c = small_run();
    c.model.image_h = 32;
    CHECK_THROWS_WITH(Trainer(c, small_data()), doctest::Contains("model expects"));
    c = small_run();
    c.task.frames = 400;
    CHECK_THROWS(Trainer(c, small_data()));
}

TEST_CASE("an empty ablation grid is a no-op") {
    std::ostringstream log;
    const auto rows = run_ablation_grid({}, {0}, small_run(), EvalConfig{}, small_data(), small_data(), &log);
    CHECK(rows.empty());
    CHECK(default_ablation_cells().size() >= 4);
}

TEST_CASE("every layer passes its finite-difference check") {
    const auto checks = run_layer_checks(0);
    REQUIRE(checks.size() >= checked_layers().size());
    for (const auto& c : checks) {
        INFO(c.layer << " " << c.shape << " err " << c.result.max_rel_error);
        CHECK(c.result.max_rel_error < 1e-4);
        CHECK(c.result.coordinates_checked > 0);
    }
}
