// Acceptance suite: one PASS/FAIL line per criterion. Details land in
// <workdir>/acceptance.json. Criteria listed with --expect-fail still print
// their verdict but do not change the exit status.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "oracles.hpp"
#include "tsflow/flow_matching.hpp"
#include "tsflow/layer_checks.hpp"
#include "tsflow/metrics.hpp"
#include "tsflow/ops.hpp"
#include "tsflow/training.hpp"

using namespace tsflow;
using nlohmann::json;
namespace fs = std::filesystem;
namespace m = tsflow::metrics;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
    bool pass = true;
    std::ostringstream detail;
    json data = json::object();

    void require(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            detail << "[failed: " << what << "] ";
        }
    }
};

// ---- 1 -------------------------------------------------------------------

void gradient_correctness(Verdict& v) {
    const auto t0 = Clock::now();
    const auto checks = run_layer_checks(2026, 3);
    const double elapsed = seconds_since(t0);
    const std::vector<std::string> required{"patch_embed", "acor_spatial", "acor_temporal", "adaln",
                                            "stm_attention", "full_block", "decoder", "fm_loss"};
    double worst = 0.0;
    for (const auto& layer : required) {
        std::size_t cases = 0;
        double layer_worst = 0.0;
        for (const auto& c : checks)
            if (c.layer == layer) {
                ++cases;
                layer_worst = std::max(layer_worst, c.result.max_rel_error);
                v.require(c.result.coordinates_checked > 0, layer + " checked no coordinates");
            }
        v.require(cases >= 3, layer + " has fewer than 3 shapes");
        v.require(layer_worst < 1e-4, layer + " rel err " + std::to_string(layer_worst));
        v.data["layers"][layer] = {{"cases", cases}, {"max_rel_error", layer_worst}};
        worst = std::max(worst, layer_worst);
    }
    v.require(elapsed < 120.0, "suite took " + std::to_string(elapsed) + " s");
    v.data["seconds"] = elapsed;
    v.detail << required.size() << " layers x 3 shapes, max rel err " << std::scientific << std::setprecision(2) << worst
             << std::fixed << ", " << std::setprecision(1) << elapsed << " s";
}

// ---- 2 -------------------------------------------------------------------

double decay_error(SolverMethod method, std::size_t steps) {
    SolverConfig cfg{.method = method, .steps = steps};
    const auto x = integrate<double>([](const Tensor<double>& x, double) {
        Tensor<double> d = x;
        for (auto& e : d.data()) e = -e;
        return d;
    }, Tensor<double>({1}, {1.0}), cfg);
    return std::abs(x[0] - std::exp(-1.0));
}

double fitted_order(SolverMethod method, const std::vector<std::size_t>& steps) {
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    const double n = static_cast<double>(steps.size());
    for (auto s : steps) {
        const double x = std::log(1.0 / static_cast<double>(s)), y = std::log(decay_error(method, s));
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

void flow_matching_exactness(Verdict& v) {
    Rng rng(2);
    const auto x0 = rng.normal_tensor<double>({8, 8});
    const auto x1 = rng.normal_tensor<double>({8, 8});
    const auto vel = velocity_target(x0, x1);
    const auto one = integrate<double>([&](const Tensor<double>&, double) { return vel; }, x0,
                                       SolverConfig{.method = SolverMethod::euler, .steps = 1});
    const double euler_exact = max_abs_diff(one, x1);
    v.require(euler_exact <= 4 * std::numeric_limits<double>::epsilon(), "single Euler step off by " + std::to_string(euler_exact));

    const double oe = fitted_order(SolverMethod::euler, {20, 40, 80, 160});
    const double o4 = fitted_order(SolverMethod::rk4, {4, 8, 16, 32});
    v.require(std::abs(oe - 1.0) < 0.1, "Euler order");
    v.require(std::abs(o4 - 4.0) < 0.3, "RK4 order");

    SolverConfig d5{.method = SolverMethod::dopri5, .adaptive = true, .rtol = 1e-6, .atol = 1e-6};
    const auto d5x = integrate<double>([](const Tensor<double>& x, double) {
        Tensor<double> d = x;
        for (auto& e : d.data()) e = -e;
        return d;
    }, Tensor<double>({1}, {1.0}), d5);
    const double d5err = std::abs(d5x[0] - std::exp(-1.0));
    v.require(d5err < 1e-5, "Dopri5 error");
    v.data = {{"euler_one_step_max_abs", euler_exact}, {"euler_order", oe}, {"rk4_order", o4}, {"dopri5_error", d5err}};
    v.detail << std::setprecision(4) << "one-step err " << euler_exact << ", orders " << oe << " / " << o4
             << ", dopri5 err " << std::scientific << std::setprecision(2) << d5err;
}

// ---- 3 -------------------------------------------------------------------

void init_identity(Verdict& v) {
    Rng rng(3);
    double worst_tokens = 0.0, worst_velocity = 0.0;
    for (Fusion f : {Fusion::acor, Fusion::concat, Fusion::crossattn}) {
        ModelConfig c;  // the toy layout: d=64, N=4
        c.fusion = f;
        FlowTransformer<double> model(c, 11);
        ConditionInput<double> in;
        in.cond = rng.uniform_tensor<double>({2, c.frames, c.cond_channels, c.image_h, c.image_w}, 0.0, 1.0);
        in.aux = rng.uniform_tensor<double>({2, c.frames, c.aux_channels, c.image_h, c.image_w}, 0.0, 1.0);
        in.doy.assign(2, {30, 90, 150, 210});
        in.lonlat.assign(2, LonLat{8.0, 46.0});
        const auto ctx = model.prepare(in);
        const std::vector<double> t{0.25, 0.75};
        const auto z = rng.normal_tensor<double>({2, c.frames, c.tokens_per_frame(), c.width});
        worst_tokens = std::max(worst_tokens,
                                max_abs_diff(model.run_blocks(ctx, ops::constant(z), Var<double>(model.flow_time_codes(t))).value(), z));
        const auto x = rng.normal_tensor<double>({2, c.frames, c.channels, c.image_h, c.image_w});
        const auto vel = model.forward(ctx, ops::constant(x), t).value();
        for (double e : vel.data()) worst_velocity = std::max(worst_velocity, std::abs(e));
    }
    v.require(worst_tokens == 0.0, "token stream changed");
    v.require(worst_velocity == 0.0, "non-zero velocity");
    v.data = {{"token_max_abs_diff", worst_tokens}, {"velocity_max_abs", worst_velocity}};
    v.detail << "3 fusions x " << ModelConfig{}.depth << " blocks: token diff " << worst_tokens << ", |v| max " << worst_velocity;
}

// ---- 4, 5, 6 -------------------------------------------------------------

struct ToyRun {
    std::unique_ptr<Trainer> trainer;
    std::vector<TimeSeriesSample> train, test;
    double train_seconds = 0.0;
};

// Trains in place: the trainer keeps a pointer to r.train.
void train_toy(ToyRun& r, const fs::path& workdir) {
    SynthConfig sc;
    sc.rois = 200;
    sc.seed = 1;
    r.train = synthesize_samples(sc);
    sc.rois = 40;
    sc.seed = 2;
    r.test = synthesize_samples(sc);
    TrainConfig cfg;  // 16x16, C=3, C_con=5, T=4, d=64, N=4
    cfg.steps = 2000;
    cfg.optim.lr = 1e-3;
    cfg.seed = 0;
    cfg.log_every = 500;
    cfg.run_dir = workdir / "toy_recon";
    fs::remove_all(cfg.run_dir);
    const auto t0 = Clock::now();
    r.trainer = std::make_unique<Trainer>(cfg, r.train);
    r.trainer->run(std::nullopt, &std::cerr);
    r.train_seconds = seconds_since(t0);
}

void toy_reconstruction(Verdict& v, ToyRun& run) {
    const auto t0 = Clock::now();
    const auto& tr = *run.trainer;
    const auto& losses = tr.losses();
    double initial = 0.0;
    const std::size_t head = std::min<std::size_t>(20, losses.size());
    for (std::size_t i = 0; i < head; ++i) initial += losses[i] / static_cast<double>(head);
    const double final_ema = tr.ema().back();
    v.require(final_ema < 0.5 * initial, "smoothed loss did not halve");

    EvalConfig ec;  // missing rate 0.5
    const auto s = evaluate_task(tr.model(), tr.config().task, run.test, ec);
    const double runtime = run.train_seconds + seconds_since(t0);
    v.require(s.psnr_hidden >= s.psnr_baseline + 2.0, "hidden PSNR below baseline + 2 dB");
    v.require(runtime <= 1800.0, "runtime over 30 min");
    v.data = {{"train_rois", run.train.size()},  {"test_rois", run.test.size()},     {"initial_loss", initial},
              {"final_ema", final_ema},          {"psnr_hidden", s.psnr_hidden},    {"psnr_baseline", s.psnr_baseline},
              {"psnr_window", s.psnr},           {"hidden_windows", s.hidden_windows}, {"runtime_s", runtime}};
    v.detail << std::setprecision(4) << "loss " << initial << " -> " << final_ema << " (ratio " << final_ema / initial
             << "); hidden PSNR " << s.psnr_hidden << " dB vs interpolation " << s.psnr_baseline << " dB; "
             << std::setprecision(0) << runtime << " s";
}

void missing_rate_trend(Verdict& v, const ToyRun& run) {
    std::vector<double> psnr;
    for (double rate : {0.3, 0.5, 0.7, 0.9}) {
        EvalConfig ec;
        ec.missing_rate = rate;
        const auto s = evaluate_task(run.trainer->model(), run.trainer->config().task, run.test, ec);
        psnr.push_back(s.psnr_hidden);
        v.data["rates"].push_back({{"rate", rate}, {"psnr_hidden", s.psnr_hidden}, {"psnr_baseline", s.psnr_baseline}});
    }
    v.detail << std::setprecision(4);
    for (std::size_t i = 0; i < psnr.size(); ++i) {
        v.detail << (i ? " > " : "PSNR 30/50/70/90%: ") << psnr[i];
        if (i) v.require(psnr[i] < psnr[i - 1], "not strictly decreasing");
    }
}

void sampling_steps(Verdict& v, const ToyRun& run) {
    std::vector<double> psnr;
    for (std::size_t steps : {10, 20, 30, 40}) {
        EvalConfig ec;
        ec.solver.steps = steps;
        psnr.push_back(evaluate_task(run.trainer->model(), run.trainer->config().task, run.test, ec).psnr_hidden);
        v.data["steps"].push_back({{"steps", steps}, {"psnr_hidden", psnr.back()}});
    }
    const double spread = *std::max_element(psnr.begin(), psnr.end()) - *std::min_element(psnr.begin(), psnr.end());
    v.require(spread < 0.5, "spread " + std::to_string(spread) + " dB");
    v.data["spread_db"] = spread;
    v.detail << std::setprecision(4) << "PSNR at 10/20/30/40 steps: " << psnr[0] << " / " << psnr[1] << " / " << psnr[2]
             << " / " << psnr[3] << ", spread " << spread << " dB";
}

// ---- 7, 8 ----------------------------------------------------------------

struct CloudData {
    std::vector<TimeSeriesSample> train, test;
};

CloudData cloud_data() {
    CloudData d;
    SynthConfig sc;
    sc.mode = DatasetMode::ts_s12cr;
    sc.rois = 80;
    sc.seed = 31;
    d.train = synthesize_samples(sc);
    sc.rois = 24;
    sc.seed = 32;
    d.test = synthesize_samples(sc);
    return d;
}

TrainConfig ablation_base() {
    TrainConfig cfg;
    cfg.task = TaskConfig::toy(Task::cloudrm);
    // Width stays at 64: below the 48-value patch the noise cannot pass through
    // the tokens and the loss floors near the lost variance share.
    cfg.model.width = 64;
    cfg.model.depth = 2;
    cfg.model.heads = 4;
    cfg.steps = 1200;
    cfg.batch = 8;
    cfg.optim.lr = 1e-3;
    cfg.log_every = 0;
    return cfg;
}

const std::vector<std::uint64_t> kAblationSeeds{0, 1, 2};

void ablation_ordering(Verdict& v, const CloudData& data, const fs::path& workdir) {
    const auto cells = default_ablation_cells(false);
    EvalConfig ec;
    auto base = ablation_base();
    base.run_dir = workdir / "ablation";
    fs::remove_all(base.run_dir);
    const auto rows = run_ablation_grid(cells, kAblationSeeds, base, ec, data.train, data.test, &std::cerr);
    write_ablation_csv(workdir / "ablation.csv", rows);
    std::map<std::string, double> mean;
    for (const auto& r : rows) mean[r.cell] += r.psnr / static_cast<double>(kAblationSeeds.size());
    const double full = mean.at("full");
    for (const auto& [cell, psnr] : mean) {
        v.data["mean_psnr"][cell] = psnr;
        if (cell != "full") v.require(full - psnr >= 0.0, "full < " + cell);
    }
    v.detail << std::setprecision(4) << "mean PSNR over 3 seeds: full " << full;
    for (const auto& [cell, psnr] : mean)
        if (cell != "full") v.detail << ", " << cell << " " << psnr;
}

void aux_absence(Verdict& v, const CloudData& data, const fs::path&) {
    double with = 0.0, without = 0.0, aux_free = 0.0;
    const double n = static_cast<double>(kAblationSeeds.size());
    for (auto seed : kAblationSeeds) {
        auto cfg = ablation_base();
        cfg.seed = seed;
        Trainer trained(cfg, data.train);
        trained.run();
        EvalConfig ec;
        const double a = evaluate_task(trained.model(), cfg.task, data.test, ec).psnr;
        ec.drop_aux = true;
        const double b = evaluate_task(trained.model(), cfg.task, data.test, ec).psnr;

        cfg.drop_aux_prob = 1.0;
        Trainer blind(cfg, data.train);
        blind.run();
        const double c = evaluate_task(blind.model(), cfg.task, data.test, ec).psnr;
        v.data["seeds"].push_back({{"seed", seed}, {"aux_tested", a}, {"aux_absent", b}, {"aux_free_trained", c}});
        with += a / n;
        without += b / n;
        aux_free += c / n;
    }
    v.require(with > without, "aux-tested <= aux-absent");
    v.require(without > aux_free, "aux-absent <= aux-free-trained");
    v.data["mean"] = {{"aux_tested", with}, {"aux_absent", without}, {"aux_free_trained", aux_free}};
    v.detail << std::setprecision(4) << "mean PSNR: aux-trained/aux-tested " << with << " > aux-trained/aux-absent "
             << without << " > aux-free-trained " << aux_free;
}

// ---- 9 -------------------------------------------------------------------

std::vector<int> random_labels(Rng& rng, std::size_t n, int classes) {
    std::vector<int> out(n);
    for (auto& x : out) x = static_cast<int>(rng.integer(0, classes - 1));
    return out;
}

void metrics_oracle(Verdict& v) {
    Rng rng(9);
    double worst = 0.0;
    auto track = [&](double a, double b) { worst = std::max(worst, std::abs(a - b)); };
    for (int trial = 0; trial < 100; ++trial) {
        const auto x = rng.uniform_tensor<double>({3, 8, 8}, 0.0, 1.0);
        const auto y = rng.uniform_tensor<double>({3, 8, 8}, 0.0, 1.0);
        const auto& a = x.storage();
        const auto& b = y.storage();
        track(m::psnr(x, y), oracle::psnr(a, b));
        track(m::rmse(x, y), oracle::rmse(a, b));
        track(m::mae(x, y), oracle::mae(a, b));
        track(m::ssim(x, y), oracle::ssim(a, b, 3, 8, 8));
        track(m::sam(x, y).degrees, *oracle::sam(a, b, 3, 64));
        const auto lp = random_labels(rng, 64, 4), lg = random_labels(rng, 64, 4);
        track(m::miou(lp, lg, 4).mean, oracle::miou(lp, lg, 4));
        const auto sp = random_labels(rng, 4 * 64, 3), sg = random_labels(rng, 4 * 64, 3);
        const auto got = m::change_scores(sp, sg, 4, 3);
        const auto want = oracle::change(sp, sg, 4, 3);
        track(got.bc, want.bc);
        track(got.sc, want.sc);
        track(got.scs, want.scs);
    }
    v.require(worst < 1e-6, "oracle mismatch " + std::to_string(worst));

    Tensor<double> p({1, 10, 10}, 0.5), q({1, 10, 10}, 0.6);
    const double twenty = m::psnr(p, q);
    const auto same = rng.uniform_tensor<double>({3, 8, 8}, 0.0, 1.0);
    const double ssim_same = m::ssim(same, same);
    const double sam_same = m::sam(same, same).degrees;
    v.require(std::abs(twenty - 20.0) < 1e-9, "MSE 0.01 anchor");
    v.require(std::abs(ssim_same - 1.0) < 1e-12, "SSIM identity anchor");
    v.require(sam_same < 1e-6, "SAM identity anchor");
    v.data = {{"max_abs_diff", worst}, {"psnr_mse_0.01", twenty}, {"ssim_identical", ssim_same}, {"sam_identical", sam_same}};
    v.detail << "100 cases x 9 scores, max |diff| " << std::scientific << std::setprecision(2) << worst << std::fixed
             << std::setprecision(6) << "; anchors " << twenty << " dB, SSIM " << ssim_same << ", SAM " << sam_same;
}

// ---- 10 ------------------------------------------------------------------

void dataset_compliance(Verdict& v) {
    std::size_t emitted = 0, violations = 0;
    for (DatasetMode mode : {DatasetMode::ts_s12, DatasetMode::ts_s12cr}) {
        SynthConfig sc;
        sc.mode = mode;
        sc.rois = 60;
        sc.seed = 101;
        for (const auto& s : synthesize_samples(sc)) {
            ++emitted;
            const auto why = filter_violation(s, mode);
            if (!why.empty()) {
                ++violations;
                v.data["violations"].push_back(s.id + ": " + why);
            }
        }
    }
    v.require(emitted > 0, "no samples emitted");
    v.require(violations == 0, std::to_string(violations) + " non-compliant samples");

    // Calibrate on one seed, measure on fresh data.
    const double density = calibrate_cloud_density(0.84, 7);
    SynthConfig sc;
    sc.mode = DatasetMode::ts_s12cr;
    sc.rois = 60;
    sc.seed = 202;
    sc.cloud_density = density;
    double total = 0.0;
    std::size_t frames = 0;
    for (const auto& s : synthesize_samples(sc))
        for (double f : s.contam_cloud_frac) {
            total += f;
            ++frames;
        }
    const double mean_cloud = frames ? total / static_cast<double>(frames) : 0.0;
    v.require(std::abs(mean_cloud - 0.84) <= 0.05, "mean contaminated cloud " + std::to_string(mean_cloud));
    v.data["emitted"] = emitted;
    v.data["calibrated_density"] = density;
    v.data["mean_contam_cloud"] = mean_cloud;
    v.data["contam_frames"] = frames;
    v.detail << emitted << " samples, " << violations << " violations; calibrated mean cloud " << std::setprecision(4)
             << mean_cloud << " over " << frames << " frames";
}

// ---- 11 ------------------------------------------------------------------

bool same_sample(const TimeSeriesSample& a, const TimeSeriesSample& b) {
    return a.id == b.id && a.x_clear == b.x_clear && a.x_contam == b.x_contam && a.cloud_mask == b.cloud_mask &&
           a.shadow_mask == b.shadow_mask && a.aux == b.aux && a.labels == b.labels && a.doy == b.doy &&
           a.aux_doy == b.aux_doy && a.contam_doy == b.contam_doy && a.lonlat.lon == b.lonlat.lon &&
           a.lonlat.lat == b.lonlat.lat && a.cloud_frac == b.cloud_frac && a.shadow_frac == b.shadow_frac &&
           a.contam_cloud_frac == b.contam_cloud_frac && a.contam_shadow_frac == b.contam_shadow_frac &&
           a.band_names == b.band_names && a.classes == b.classes;
}

void determinism(Verdict& v, const fs::path& workdir) {
    SynthConfig sc;
    sc.rois = 6;
    sc.mode = DatasetMode::ts_s12cr;
    sc.seed = 77;
    const auto data = synthesize_samples(sc);
    v.require(!data.empty(), "no data");
    TrainConfig cfg;
    cfg.model.width = 16;
    cfg.model.depth = 2;
    cfg.model.heads = 2;
    cfg.batch = 4;
    cfg.steps = 20;
    cfg.seed = 5;
    cfg.log_every = 0;
    Trainer a(cfg, data), b(cfg, data);
    a.run();
    b.run();
    v.require(a.losses() == b.losses(), "loss curves differ");

    InferenceOptions opt;
    opt.seed = 3;
    const auto sa = infer_sequence(a.model(), data[0], cfg.task, opt);
    const auto sb = infer_sequence(b.model(), data[0], cfg.task, opt);
    v.require(sa.frames == sb.frames, "samples differ");

    const auto ck = workdir / "determinism.ckpt";
    a.save(ck);
    const auto loaded = load_checkpoint(ck);
    const auto sl = infer_sequence(*loaded.model, data[0], cfg.task, opt);
    v.require(sl.frames == sa.frames, "checkpoint changes samples");
    const auto batch = make_batch(data, {WindowRef{0, 0}}, cfg.task);
    const auto ctx_a = a.model().prepare(batch.cond);
    const auto ctx_l = loaded.model->prepare(batch.cond);
    Rng rng(4);
    const auto x = rng.normal_tensor<float>(batch.target.shape());
    const std::vector<double> t{0.4};
    const auto fa = a.model().forward(ctx_a, ops::constant(x), t).value();
    const auto fl = loaded.model->forward(ctx_l, ops::constant(x), t).value();
    v.require(fa == fl, "checkpoint changes forward outputs");

    bool containers = true;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto path = workdir / ("roundtrip_" + std::to_string(i) + ".unts");
        write_sample(path, data[i]);
        containers = containers && same_sample(read_sample(path), data[i]);
    }
    v.require(containers, "container round trip lossy");
    v.data = {{"loss_steps", a.losses().size()}, {"samples_compared", sa.frames.numel()}, {"containers", data.size()}};
    v.detail << "20-step loss curves, samples, checkpoint forward and " << data.size()
             << " containers bit-identical";
}

}  // namespace

int main(int argc, char** argv) {
    fs::path workdir = fs::temp_directory_path() / "tsflow_acceptance";
    std::set<int> expect_fail;
    std::set<int> only;
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--workdir" && i + 1 < argc) workdir = argv[++i];
        else if (a == "--expect-fail" && i + 1 < argc) expect_fail.insert(std::stoi(argv[++i]));
        else if (a == "--only" && i + 1 < argc) only.insert(std::stoi(argv[++i]));
        else {
            std::cerr << "usage: tsflow_acceptance [--workdir DIR] [--expect-fail N]... [--only N]...\n";
            return 2;
        }
    }
    fs::create_directories(workdir);

    std::unique_ptr<ToyRun> toy;
    auto toy_run = [&]() -> ToyRun& {
        if (!toy) {
            toy = std::make_unique<ToyRun>();
            train_toy(*toy, workdir);
        }
        return *toy;
    };
    std::unique_ptr<CloudData> clouds;
    auto cloud = [&]() -> const CloudData& {
        if (!clouds) clouds = std::make_unique<CloudData>(cloud_data());
        return *clouds;
    };

    const std::vector<std::pair<std::string, std::function<void(Verdict&)>>> criteria{
        {"gradient correctness", gradient_correctness},
        {"flow-matching exactness", flow_matching_exactness},
        {"init identity", init_identity},
        {"toy reconstruction", [&](Verdict& v) { toy_reconstruction(v, toy_run()); }},
        {"missing-rate trend", [&](Verdict& v) { missing_rate_trend(v, toy_run()); }},
        {"sampling-step insensitivity", [&](Verdict& v) { sampling_steps(v, toy_run()); }},
        {"ablation ordering", [&](Verdict& v) { ablation_ordering(v, cloud(), workdir); }},
        {"modality-absence ordering", [&](Verdict& v) { aux_absence(v, cloud(), workdir); }},
        {"metrics oracle", metrics_oracle},
        {"dataset compliance", dataset_compliance},
        {"determinism and persistence", [&](Verdict& v) { determinism(v, workdir); }},
    };

    json report = json::object();
    int unexpected = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i + 1);
        if (!only.empty() && !only.count(id)) continue;
        Verdict v;
        const auto t0 = Clock::now();
        try {
            criteria[i].second(v);
        } catch (const std::exception& e) {
            v.pass = false;
            v.detail << "[exception: " << e.what() << "]";
        }
        const double secs = seconds_since(t0);
        std::cout << "criterion " << std::setw(2) << id << " " << (v.pass ? "PASS" : "FAIL") << "  " << criteria[i].first
                  << ": " << v.detail.str() << (v.pass || !expect_fail.count(id) ? "" : " (expected failure)") << std::endl;
        report[std::to_string(id)] = {{"name", criteria[i].first}, {"pass", v.pass}, {"detail", v.detail.str()},
                                      {"seconds", secs}, {"data", v.data}};
        if (!v.pass && !expect_fail.count(id)) ++unexpected;
    }
    std::ofstream(workdir / "acceptance.json") << report.dump(2) << "\n";
    return unexpected ? 1 : 0;
}
