#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "tsflow/layer_checks.hpp"
#include "tsflow/training.hpp"

using namespace tsflow;
using nlohmann::json;

namespace {

constexpr const char* kEnvPrefix = "TSFLOW_";

struct Options {
    std::string config_file;
    // data / run layout
    std::string data, test_data, run_dir, checkpoint, resume, out;
    // task
    std::string task = "recon";
    std::size_t window = 4, horizon = 0, optical = 3, classes = 4;
    // model
    std::size_t width = 64, depth = 4, heads = 4, patch = 4;
    std::string fusion = "acor";
    bool stm = true, metadata = true, ffn = false;
    // optimization
    std::size_t train_steps = 2000, batch = 8, checkpoint_every = 0, log_every = 100;
    double lr = 1e-4, weight_decay = 0.01, clip_norm = 0.0, drop_aux_prob = 0.0, pixel_mask_prob = 0.5;
    std::uint64_t seed = 0;
    // sampling / evaluation
    std::string solver = "dopri5";
    std::size_t steps = 10, max_windows = 32, windows_per_sample = 2, max_samples = 4, rollout = 0;
    bool adaptive = false, drop_aux = false;
    double rtol = 1e-6, atol = 1e-6, missing_rate = 0.5;
    // synth
    std::size_t rois = 8;
    std::vector<std::size_t> size{16, 16};
    std::string mode = "ts_s12";
    double cloud_density = -1.0;
    // ablate / gradcheck
    std::string seeds = "0,1,2";
    bool include_steps = true;
    std::size_t cases = 3;
    std::string layers;
};

std::string env_name(const std::string& flag) {
    std::string s = kEnvPrefix;
    for (char c : flag) s += c == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return s;
}

std::vector<std::string> split_ws(const std::string& s) {
    std::istringstream is(s);
    std::vector<std::string> out;
    for (std::string w; is >> w;) out.push_back(w);
    return out;
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
    std::vector<std::uint64_t> out;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ',');)
        if (!item.empty()) out.push_back(std::stoull(item));
    return out;
}

// key = value lines; keys are long flag names ('_' and '-' interchangeable), '#' starts a comment.
std::vector<std::string> config_file_args(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read config file " + path);
    std::vector<std::string> args;
    std::string line;
    for (std::size_t no = 1; std::getline(is, line); ++no) {
        if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
        auto words = split_ws(line);
        if (words.empty()) continue;
        std::string key = words[0], rest;
        if (auto eq = line.find('='); eq != std::string::npos) {
            key = line.substr(0, eq);
            rest = line.substr(eq + 1);
            auto k = split_ws(key);
            if (k.size() != 1) throw std::runtime_error(path + ":" + std::to_string(no) + ": malformed key");
            key = k[0];
        } else {
            throw std::runtime_error(path + ":" + std::to_string(no) + ": expected key = value");
        }
        std::replace(key.begin(), key.end(), '_', '-');
        args.push_back("--" + key);
        for (auto& v : split_ws(rest)) args.push_back(v);
    }
    return args;
}

std::string find_config_flag(int argc, char** argv) {
    for (int i = 1; i < argc; ++i) {
        std::string a = argv[i];
        if (a == "--config" && i + 1 < argc) return argv[i + 1];
        if (a.rfind("--config=", 0) == 0) return a.substr(9);
    }
    if (const char* e = std::getenv("TSFLOW_CONFIG")) return e;
    return {};
}

TaskConfig task_config(const Options& o) {
    const Task task = task_from_string(o.task);
    auto t = TaskConfig::toy(task, o.optical, o.window, o.classes);
    if (task == Task::forecast) {
        t.history = o.window;
        t.frames = o.horizon ? o.horizon : o.window;
    } else if (o.horizon) {
        throw std::invalid_argument("--horizon applies to the forecast task only");
    }
    return t;
}

SolverConfig solver_config(const Options& o) {
    SolverConfig s;
    s.method = solver_from_string(o.solver);
    s.steps = o.steps;
    s.adaptive = o.adaptive;
    s.rtol = o.rtol;
    s.atol = o.atol;
    s.validate();
    return s;
}

TrainConfig train_config(const Options& o) {
    TrainConfig c;
    c.task = task_config(o);
    c.model.width = o.width;
    c.model.depth = o.depth;
    c.model.heads = o.heads;
    c.model.patch = {o.patch, o.patch};
    c.model.fusion = fusion_from_string(o.fusion);
    c.model.use_stm = o.stm;
    c.model.use_metadata = o.metadata;
    c.model.ffn = o.ffn;
    c.optim.lr = o.lr;
    c.optim.weight_decay = o.weight_decay;
    if (o.clip_norm > 0.0) c.optim.clip_norm = o.clip_norm;
    c.batch = o.batch;
    c.steps = o.train_steps;
    c.seed = o.seed;
    c.checkpoint_every = o.checkpoint_every;
    c.log_every = o.log_every;
    c.drop_aux_prob = o.drop_aux_prob;
    c.pixel_mask_prob = o.pixel_mask_prob;
    c.run_dir = o.run_dir.empty() ? std::filesystem::path("runs") / (o.task + "-seed" + std::to_string(o.seed)) : std::filesystem::path(o.run_dir);
    return c;
}

EvalConfig eval_config(const Options& o) {
    EvalConfig e;
    e.solver = solver_config(o);
    e.seed = o.seed;
    e.max_windows = o.max_windows;
    e.windows_per_sample = o.windows_per_sample;
    e.batch = o.batch;
    e.missing_rate = o.missing_rate;
    e.drop_aux = o.drop_aux;
    return e;
}

std::vector<TimeSeriesSample> require_data(const std::string& dir, const char* what) {
    if (dir.empty()) throw std::invalid_argument(std::string(what) + " directory not given");
    auto d = load_dataset(dir);
    if (d.empty()) throw std::invalid_argument(std::string(what) + " directory '" + dir + "' holds no samples");
    return d;
}

void set_image(TrainConfig& c, const std::vector<TimeSeriesSample>& data) {
    c.model.image_h = data.front().x_clear.dim(2);
    c.model.image_w = data.front().x_clear.dim(3);
}

void write_eval(const std::filesystem::path& dir, const EvalSummary& r, const json& extra) {
    std::filesystem::create_directories(dir / "reports");
    json j = r.to_json();
    for (auto& [k, v] : extra.items()) j[k] = v;
    std::ofstream(dir / "metrics.json") << j.dump(2) << "\n";
    for (std::size_t i = 0; i < r.reports.size(); ++i) {
        std::ostringstream name;
        name << "window_" << std::setw(4) << std::setfill('0') << i;
        r.reports[i].write_csv(dir / "reports" / (name.str() + "_frames.csv"));
        r.reports[i].write_band_csv(dir / "reports" / (name.str() + "_bands.csv"));
    }
    std::cout << j.dump(2) << "\n";
}

int cmd_synth(const Options& o) {
    if (o.out.empty()) throw std::invalid_argument("synth needs --out DIR");
    SynthConfig c;
    c.rois = o.rois;
    c.h = o.size.at(0);
    c.w = o.size.at(1);
    c.channels = o.optical;
    c.classes = o.classes;
    c.mode = dataset_mode_from_string(o.mode);
    c.seed = o.seed;
    c.cloud_density = o.cloud_density;
    const auto s = synthesize(c, o.out);
    std::cout << "emitted " << s.emitted << " samples (" << s.dropped << " streams dropped), cloud density "
              << s.cloud_density << ", index " << (std::filesystem::path(o.out) / "index.json").string() << "\n";
    return 0;
}

int cmd_train(const Options& o) {
    const auto data = require_data(o.data, "training data");
    if (!o.resume.empty()) {
        auto t = Trainer::resume(o.resume, data);
        std::cout << "resuming at step " << t.steps_done() << "\n";
        t.run(o.train_steps, &std::cout);
        return 0;
    }
    auto cfg = train_config(o);
    set_image(cfg, data);
    Trainer t(cfg, data);
    std::cout << "training " << t.model().params().scalar_count() << " parameters for " << cfg.steps << " steps into "
              << cfg.run_dir.string() << "\n";
    t.run(std::nullopt, &std::cout);
    if (!o.test_data.empty()) {
        const auto test = require_data(o.test_data, "test data");
        write_eval(cfg.run_dir / "eval", evaluate_task(t.model(), cfg.task, test, eval_config(o)),
                   {{"train_steps", t.steps_done()}, {"budget", "desk-scale, artifact-defined"}});
    }
    return 0;
}

int cmd_eval(const Options& o) {
    if (o.checkpoint.empty()) throw std::invalid_argument("eval needs --checkpoint FILE");
    const auto ck = load_checkpoint(o.checkpoint);
    const auto data = require_data(o.test_data.empty() ? o.data : o.test_data, "evaluation data");
    const auto dir = o.run_dir.empty() ? std::filesystem::path(o.checkpoint).parent_path() / "eval" : std::filesystem::path(o.run_dir);
    EvalConfig ec = eval_config(o);
    write_eval(dir, evaluate_task(*ck.model, ck.config.task, data, ec),
               {{"checkpoint", o.checkpoint}, {"checkpoint_step", ck.step}, {"solver", to_string(ec.solver.method)},
                {"solver_steps", ec.solver.steps}, {"missing_rate", ec.missing_rate}, {"aux_dropped", ec.drop_aux}});
    return 0;
}

int cmd_sample(const Options& o) {
    if (o.checkpoint.empty()) throw std::invalid_argument("sample needs --checkpoint FILE");
    const auto ck = load_checkpoint(o.checkpoint);
    const auto data = require_data(o.data, "conditioning data");
    const auto& task = ck.config.task;
    const auto& mc = ck.model->config();
    const auto dir = (o.run_dir.empty() ? std::filesystem::path(o.checkpoint).parent_path() : std::filesystem::path(o.run_dir)) / "samples";
    std::filesystem::create_directories(dir);
    const auto solver = solver_config(o);
    json index = json::array();
    for (std::size_t i = 0; i < data.size() && i < o.max_samples; ++i) {
        const auto& s = data[i];
        TimeSeriesSample out = s;
        out.id = s.id + "_generated";
        std::size_t calls = 0;
        const std::uint64_t seed = derive_seed(o.seed, i);
        if (task.task == Task::forecast) {
            const std::size_t Th = mc.history;
            if (s.frames() < Th + 1) throw std::invalid_argument("sample '" + s.id + "' is shorter than the history window");
            const std::size_t horizon = std::min(o.rollout ? o.rollout : mc.frames, s.frames() - Th);
            const auto hist = slice_frames(s.x_clear, 0, Th);
            const auto aux = slice_frames(s.aux, 0, Th + horizon);
            const std::vector<int> fut(s.doy.begin() + static_cast<long>(Th), s.doy.begin() + static_cast<long>(Th + horizon));
            auto r = infer_autoregressive(*ck.model, hist, aux, horizon, fut, s.lonlat, solver, seed);
            calls = r.model_calls;
            out.x_clear = concat_frames(hist, r.frames);
            out.doy.resize(Th + horizon);
            out.aux = aux;
            out.aux_doy.resize(Th + horizon);
            out.cloud_frac.resize(Th + horizon);
            out.shadow_frac.resize(Th + horizon);
            out.x_contam = {};
            out.cloud_mask = {};
            out.shadow_mask = {};
            out.labels = out.labels.empty() ? out.labels : slice_frames(out.labels, 0, Th + horizon);
            out.contam_doy.clear();
            out.contam_cloud_frac.clear();
            out.contam_shadow_frac.clear();
        } else {
            InferenceOptions opt;
            opt.solver = solver;
            opt.seed = seed;
            opt.drop_aux = o.drop_aux;
            if (task.task == Task::recon) {
                Rng rng(seed);
                opt.mask = frame_missing_plan(s.frames(), 0, s.frames(), o.missing_rate, rng);
            }
            auto r = infer_sequence(*ck.model, s, task, opt);
            calls = r.model_calls;
            if (task.task == Task::scd)
                out.labels = decode_argmax(r.frames);
            else
                out.x_clear = std::move(r.frames);
        }
        const auto file = dir / (out.id + ".unts");
        write_sample(file, out);
        index.push_back({{"id", out.id}, {"source", s.id}, {"file", file.filename().string()}, {"model_calls", calls}});
        std::cout << "wrote " << file.string() << " (" << calls << " model calls)\n";
    }
    std::ofstream(dir / "index.json") << json{{"task", to_string(task.task)}, {"checkpoint", o.checkpoint},
                                              {"solver", to_string(solver.method)}, {"steps", solver.steps}, {"samples", index}}
                                                 .dump(2)
                                      << "\n";
    return 0;
}

int cmd_gradcheck(const Options& o) {
    std::vector<std::string> only;
    std::stringstream ss(o.layers);
    for (std::string item; std::getline(ss, item, ',');)
        if (!item.empty()) only.push_back(item);
    const auto checks = run_layer_checks(o.seed, o.cases, only);
    bool ok = true;
    for (const auto& c : checks) {
        const bool pass = c.result.max_rel_error < 1e-4;
        ok = ok && pass;
        std::cout << (pass ? "ok   " : "FAIL ") << std::left << std::setw(14) << c.layer << " " << std::setw(48) << c.shape
                  << " max rel err " << std::scientific << std::setprecision(3) << c.result.max_rel_error << std::defaultfloat
                  << " over " << c.result.coordinates_checked << " coordinates\n";
    }
    return ok ? 0 : 1;
}

int cmd_ablate(const Options& o) {
    const auto train = require_data(o.data, "training data");
    const auto test = o.test_data.empty() ? train : require_data(o.test_data, "test data");
    auto base = train_config(o);
    set_image(base, train);
    if (o.run_dir.empty()) base.run_dir = "runs/ablation";
    std::filesystem::create_directories(base.run_dir);
    const auto rows = run_ablation_grid(default_ablation_cells(o.include_steps), parse_seeds(o.seeds), base, eval_config(o), train,
                                        test, &std::cout);
    write_ablation_csv(base.run_dir / "ablation.csv", rows);
    std::cout << "wrote " << (base.run_dir / "ablation.csv").string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Conditional flow-matching generator for satellite image time series"};
    app.require_subcommand(1);
    app.footer(std::string("Every option may also be set in a key = value config file (--config) or through an environment\n"
                           "variable named ") +
               kEnvPrefix + "<OPTION> (upper case, '-' -> '_'), e.g. TSFLOW_TASK=cloudrm.\n"
                            "Precedence: command line > environment > config file > built-in default.");
    Options o;

    app.add_option("--config", o.config_file, "key = value configuration file");
    app.add_option("--data", o.data, "dataset directory (index.json)");
    app.add_option("--test-data", o.test_data, "held-out dataset directory");
    app.add_option("--run-dir", o.run_dir, "output directory for manifests, logs, checkpoints, reports");
    app.add_option("--checkpoint", o.checkpoint, "checkpoint to evaluate or sample from");
    app.add_option("--resume", o.resume, "continue training from a checkpoint");
    app.add_option("--out", o.out, "synth output directory");

    app.add_option("--task", o.task, "recon|cloudrm|scd|forecast")->check(CLI::IsMember({"recon", "cloudrm", "scd", "forecast"}));
    app.add_option("--window", o.window, "frames per window (history length when forecasting)");
    app.add_option("--horizon", o.horizon, "forecast frames per model call (defaults to --window)");
    app.add_option("--optical", o.optical, "optical bands");
    app.add_option("--classes", o.classes, "segmentation classes");

    app.add_option("--width", o.width, "token channels d");
    app.add_option("--depth", o.depth, "spatio-temporal blocks N");
    app.add_option("--heads", o.heads, "attention heads");
    app.add_option("--patch", o.patch, "square patch size");
    app.add_option("--fusion", o.fusion, "acor|concat|crossattn")->check(CLI::IsMember({"acor", "concat", "crossattn"}));
    app.add_option("--stm", o.stm, "attention bias modulation on/off");
    app.add_option("--metadata", o.metadata, "DOY and lon/lat embeddings on/off");
    app.add_option("--ffn", o.ffn, "feed-forward sub-layers on/off");

    app.add_option("--train-steps", o.train_steps, "optimizer steps");
    app.add_option("--batch", o.batch, "batch size");
    app.add_option("--lr", o.lr, "AdamW learning rate");
    app.add_option("--weight-decay", o.weight_decay, "AdamW decoupled weight decay");
    app.add_option("--clip-norm", o.clip_norm, "global gradient-norm clip (0 = off)");
    app.add_option("--checkpoint-every", o.checkpoint_every, "periodic checkpoint interval (0 = final only)");
    app.add_option("--log-every", o.log_every, "log interval");
    app.add_option("--drop-aux-prob", o.drop_aux_prob, "probability of zeroing the auxiliary modality per window");
    app.add_option("--pixel-mask-prob", o.pixel_mask_prob, "reconstruction: share of windows masked by cloud blobs");
    app.add_option("--seed", o.seed, "master seed");

    app.add_option("--solver", o.solver, "euler|rk4|dopri5")->check(CLI::IsMember({"euler", "rk4", "dopri5"}));
    app.add_option("--steps", o.steps, "solver steps on [0, 1]");
    app.add_option("--adaptive", o.adaptive, "adaptive step control (dopri5)");
    app.add_option("--rtol", o.rtol, "adaptive relative tolerance");
    app.add_option("--atol", o.atol, "adaptive absolute tolerance");
    app.add_option("--missing-rate", o.missing_rate, "reconstruction: share of hidden frames");
    app.add_option("--drop-aux", o.drop_aux, "evaluate with the auxiliary modality zeroed");
    app.add_option("--max-windows", o.max_windows, "evaluation windows cap");
    app.add_option("--windows-per-sample", o.windows_per_sample, "evaluation windows per sequence");
    app.add_option("--max-samples", o.max_samples, "sequences to generate");
    app.add_option("--rollout", o.rollout, "forecast frames to roll out autoregressively");

    app.add_option("--rois", o.rois, "regions of interest to simulate");
    app.add_option("--size", o.size, "image height and width")->expected(2);
    app.add_option("--mode", o.mode, "ts_s12|ts_s12cr")->check(CLI::IsMember({"ts_s12", "ts_s12cr"}));
    app.add_option("--cloud-density", o.cloud_density, "cloud density (negative = mode default)");

    app.add_option("--seeds", o.seeds, "comma-separated ablation seeds");
    app.add_option("--include-steps", o.include_steps, "add the sampling-step axis to the ablation grid");
    app.add_option("--cases", o.cases, "random shapes per layer");
    app.add_option("--layers", o.layers, "comma-separated subset of layers to check");

    for (auto* opt : app.get_options()) {
        if (opt->get_lnames().empty()) continue;
        opt->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    }

    struct Command {
        const char* name;
        const char* help;
        int (*fn)(const Options&);
    };
    const Command commands[] = {{"train", "train a model", cmd_train},
                                {"sample", "generate sequences from a checkpoint", cmd_sample},
                                {"eval", "evaluate a checkpoint", cmd_eval},
                                {"synth", "write a synthetic dataset", cmd_synth},
                                {"gradcheck", "finite-difference checks of every layer", cmd_gradcheck},
                                {"ablate", "train and evaluate the ablation grid", cmd_ablate}};
    std::vector<CLI::App*> subs;
    for (const auto& c : commands) subs.push_back(app.add_subcommand(c.name, c.help)->fallthrough());

    // Config file first, then environment, then the command line: later values win.
    std::vector<std::string> args{argv[0]};
    try {
        const auto cfg = find_config_flag(argc, argv);
        if (!cfg.empty()) {
            auto extra = config_file_args(cfg);
            args.insert(args.end(), extra.begin(), extra.end());
        }
        for (auto* opt : app.get_options()) {
            if (opt->get_lnames().empty() || opt->get_lnames()[0] == "config") continue;
            const auto& flag = opt->get_lnames()[0];
            if (const char* v = std::getenv(env_name(flag).c_str())) {
                args.push_back("--" + flag);
                for (auto& w : split_ws(v)) args.push_back(w);
            }
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    args.insert(args.end(), argv + 1, argv + argc);
    std::vector<char*> cargs;
    for (auto& a : args) cargs.push_back(a.data());

    try {
        app.parse(static_cast<int>(cargs.size()), cargs.data());
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }
    try {
        for (std::size_t i = 0; i < subs.size(); ++i)
            if (subs[i]->parsed()) return commands[i].fn(o);
    } catch (const TrainingFault& e) {
        std::cerr << "training fault at step " << e.step << ": " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
