#include "tsflow/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "tsflow/ops.hpp"
#include "tsflow/serialize.hpp"

namespace tsflow {

using nlohmann::json;

template <typename Real>
double global_norm(const std::vector<Tensor<Real>>& grads) {
    double acc = 0.0;
    for (const auto& g : grads)
        for (Real v : g.data()) acc += static_cast<double>(v) * static_cast<double>(v);
    return std::sqrt(acc);
}

template <typename Real>
bool adamw_step(std::vector<Var<Real>>& params, std::vector<Tensor<Real>> grads, AdamWState<Real>& state,
                const AdamWConfig& cfg) {
    if (params.size() != grads.size())
        throw std::invalid_argument("adamw: " + std::to_string(params.size()) + " params but " +
                                    std::to_string(grads.size()) + " gradients");
    for (std::size_t i = 0; i < params.size(); ++i)
        if (params[i].shape() != grads[i].shape()) throw_shape_mismatch("adamw gradient", params[i].shape(), grads[i].shape());
    for (const auto& g : grads)
        if (!g.all_finite()) {
            ++state.skipped;
            return false;
        }
    if (cfg.clip_norm) {
        const double norm = global_norm(grads);
        if (norm > *cfg.clip_norm && norm > 0.0) {
            const Real s = static_cast<Real>(*cfg.clip_norm / norm);
            for (auto& g : grads)
                for (auto& v : g.data()) v *= s;
        }
    }
    if (state.m.empty()) {
        for (const auto& p : params) {
            state.m.emplace_back(p.shape());
            state.v.emplace_back(p.shape());
        }
    }
    if (state.m.size() != params.size()) throw std::invalid_argument("adamw: optimizer state does not match parameters");
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t), bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i].mutable_value();
        auto& m = state.m[i];
        auto& v = state.v[i];
        const auto& g = grads[i];
        if (m.shape() != p.shape()) throw_shape_mismatch("adamw state", p.shape(), m.shape());
        for (std::size_t j = 0; j < p.numel(); ++j) {
            const double gj = g[j];
            const double mj = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            const double vj = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            m[j] = static_cast<Real>(mj);
            v[j] = static_cast<Real>(vj);
            double pj = p[j];
            pj -= cfg.lr * cfg.weight_decay * pj;
            pj -= cfg.lr * (mj / bc1) / (std::sqrt(vj / bc2) + cfg.eps);
            p[j] = static_cast<Real>(pj);
        }
    }
    return true;
}

void TrainConfig::validate() const {
    if (!(optim.lr > 0.0)) throw std::invalid_argument("learning rate must be > 0");
    if (steps < 1) throw std::invalid_argument("steps must be >= 1");
    if (batch < 1) throw std::invalid_argument("batch must be >= 1");
    if (!(drop_aux_prob >= 0.0 && drop_aux_prob <= 1.0)) throw std::invalid_argument("drop_aux_prob must lie in [0, 1]");
    if (!(pixel_mask_prob >= 0.0 && pixel_mask_prob <= 1.0)) throw std::invalid_argument("pixel_mask_prob must lie in [0, 1]");
    if (optim.clip_norm && !(*optim.clip_norm > 0.0)) throw std::invalid_argument("clip norm must be > 0");
    task.validate();
    resolved_model().validate();
}

json to_json(const ModelConfig& c) {
    return {{"width", c.width},
            {"depth", c.depth},
            {"heads", c.heads},
            {"patch", {c.patch.h, c.patch.w}},
            {"image", {c.image_h, c.image_w}},
            {"frames", c.frames},
            {"channels", c.channels},
            {"cond_channels", c.cond_channels},
            {"aux_channels", c.aux_channels},
            {"fusion", to_string(c.fusion)},
            {"use_stm", c.use_stm},
            {"use_metadata", c.use_metadata},
            {"ffn", c.ffn},
            {"ffn_mult", c.ffn_mult},
            {"forecast", c.forecast},
            {"history", c.history},
            {"rff_seed", c.rff_seed}};
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    c.width = j.at("width");
    c.depth = j.at("depth");
    c.heads = j.at("heads");
    c.patch = {j.at("patch").at(0), j.at("patch").at(1)};
    c.image_h = j.at("image").at(0);
    c.image_w = j.at("image").at(1);
    c.frames = j.at("frames");
    c.channels = j.at("channels");
    c.cond_channels = j.at("cond_channels");
    c.aux_channels = j.at("aux_channels");
    c.fusion = fusion_from_string(j.at("fusion"));
    c.use_stm = j.at("use_stm");
    c.use_metadata = j.at("use_metadata");
    c.ffn = j.at("ffn");
    c.ffn_mult = j.at("ffn_mult");
    c.forecast = j.at("forecast");
    c.history = j.at("history");
    c.rff_seed = j.at("rff_seed");
    return c;
}

json to_json(const TaskConfig& c) {
    return {{"task", to_string(c.task)},       {"channels", c.channels}, {"cond_channels", c.cond_channels},
            {"aux_channels", c.aux_channels}, {"frames", c.frames},     {"history", c.history},
            {"classes", c.classes},           {"use_metadata", c.use_metadata}};
}

TaskConfig task_config_from_json(const json& j) {
    TaskConfig c;
    c.task = task_from_string(j.at("task"));
    c.channels = j.at("channels");
    c.cond_channels = j.at("cond_channels");
    c.aux_channels = j.at("aux_channels");
    c.frames = j.at("frames");
    c.history = j.at("history");
    c.classes = j.at("classes");
    c.use_metadata = j.at("use_metadata");
    return c;
}

json to_json(const TrainConfig& c) {
    json optim = {{"name", "adamw"},      {"lr", c.optim.lr},   {"beta1", c.optim.beta1},
                  {"beta2", c.optim.beta2}, {"eps", c.optim.eps}, {"weight_decay", c.optim.weight_decay}};
    optim["clip_norm"] = c.optim.clip_norm ? json(*c.optim.clip_norm) : json(nullptr);
    return {{"task", to_json(c.task)},
            {"model", to_json(c.model)},
            {"optim", optim},
            {"batch", c.batch},
            {"steps", c.steps},
            {"seed", c.seed},
            {"checkpoint_every", c.checkpoint_every},
            {"log_every", c.log_every},
            {"drop_aux_prob", c.drop_aux_prob},
            {"pixel_mask_prob", c.pixel_mask_prob},
            {"run_dir", c.run_dir.string()}};
}

TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    c.task = task_config_from_json(j.at("task"));
    c.model = model_config_from_json(j.at("model"));
    const auto& o = j.at("optim");
    c.optim.lr = o.at("lr");
    c.optim.beta1 = o.at("beta1");
    c.optim.beta2 = o.at("beta2");
    c.optim.eps = o.at("eps");
    c.optim.weight_decay = o.at("weight_decay");
    if (!o.at("clip_norm").is_null()) c.optim.clip_norm = o.at("clip_norm").get<double>();
    c.batch = j.at("batch");
    c.steps = j.at("steps");
    c.seed = j.at("seed");
    c.checkpoint_every = j.at("checkpoint_every");
    c.log_every = j.at("log_every");
    c.drop_aux_prob = j.at("drop_aux_prob");
    c.pixel_mask_prob = j.at("pixel_mask_prob");
    c.run_dir = j.at("run_dir").get<std::string>();
    return c;
}

namespace {

const char kCheckpointMagic[4] = {'U', 'N', 'T', 'C'};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const FlowTransformer<float>& model, const TrainConfig& cfg,
                     std::size_t step, double ema, const AdamWState<float>* optimizer, const json& metrics) {
    const auto& store = model.params();
    json params = json::array();
    for (std::size_t i = 0; i < store.size(); ++i)
        params.push_back({{"name", store.names()[i]}, {"shape", store.vars()[i].shape()}});
    const bool with_opt = optimizer && !optimizer->m.empty();
    json m;
    m["format"] = "tsflow-checkpoint";
    m["config"] = to_json(cfg);
    m["resolved_model"] = to_json(model.config());
    m["step"] = step;
    m["seed"] = cfg.seed;
    m["ema"] = ema;
    m["metrics"] = metrics;
    m["params"] = params;
    m["optimizer"] = {{"present", with_opt},
                      {"step", optimizer ? optimizer->step : 0},
                      {"skipped", optimizer ? optimizer->skipped : 0}};

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw std::runtime_error("cannot open " + tmp + " for writing");
        os.write(kCheckpointMagic, 4);
        write_u32(os, kCheckpointVersion);
        write_json_block(os, m.dump());
        for (const auto& v : store.vars()) write_tensor(os, v.value());
        if (with_opt) {
            for (const auto& t : optimizer->m) write_tensor(os, t);
            for (const auto& t : optimizer->v) write_tensor(os, t);
        }
        if (!os) throw std::runtime_error("write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
    char magic[4];
    read_exact(is, magic, 4, "checkpoint magic");
    if (!std::equal(magic, magic + 4, kCheckpointMagic)) throw FormatError(path.string() + ": not a checkpoint (bad magic)");
    const auto version = read_u32(is, "checkpoint version");
    if (version != kCheckpointVersion) throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
    Checkpoint ck;
    try {
        ck.manifest = json::parse(read_json_block(is, "checkpoint manifest"));
        ck.config = train_config_from_json(ck.manifest.at("config"));
        ck.step = ck.manifest.at("step");
        ck.ema = ck.manifest.at("ema");
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": malformed manifest: " + e.what());
    }
    ck.model = std::make_unique<FlowTransformer<float>>(ck.config.resolved_model(), 0);
    auto& store = ck.model->params();
    const auto& listed = ck.manifest.at("params");
    if (listed.size() != store.size())
        throw FormatError(path.string() + ": checkpoint lists " + std::to_string(listed.size()) + " tensors, model has " +
                          std::to_string(store.size()));
    for (std::size_t i = 0; i < store.size(); ++i) {
        const auto name = listed[i].at("name").get<std::string>();
        if (name != store.names()[i])
            throw FormatError(path.string() + ": parameter " + std::to_string(i) + " is '" + name + "', expected '" +
                              store.names()[i] + "'");
        auto t = read_tensor<float>(is);
        if (t.shape() != store.vars()[i].shape())
            throw FormatError(path.string() + ": parameter '" + name + "' has shape " + shape_str(t.shape()) +
                              ", model expects " + shape_str(store.vars()[i].shape()));
        store.vars()[i].mutable_value() = std::move(t);
    }
    const auto& opt = ck.manifest.at("optimizer");
    ck.optimizer.step = opt.at("step");
    ck.optimizer.skipped = opt.at("skipped");
    if (opt.at("present").get<bool>()) {
        for (int pass = 0; pass < 2; ++pass) {
            auto& dst = pass == 0 ? ck.optimizer.m : ck.optimizer.v;
            for (std::size_t i = 0; i < store.size(); ++i) {
                auto t = read_tensor<float>(is);
                if (t.shape() != store.vars()[i].shape()) throw FormatError(path.string() + ": optimizer state shape mismatch");
                dst.push_back(std::move(t));
            }
        }
    }
    return ck;
}

Trainer::Trainer(TrainConfig cfg, const std::vector<TimeSeriesSample>& data)
    : Trainer(cfg, data, std::make_unique<FlowTransformer<float>>(cfg.resolved_model(), derive_seed(cfg.seed, 0x1417))) {
    if (!cfg_.run_dir.empty()) {
        std::filesystem::create_directories(cfg_.run_dir);
        std::ofstream os(cfg_.run_dir / "loss.csv");
        os << "step,loss,ema\n";
        json m;
        m["config"] = to_json(cfg_);
        m["resolved_model"] = to_json(model_->config());
        m["parameters"] = model_->params().scalar_count();
        m["parameter_names"] = model_->params().names();
        m["note"] = "desk-scale budget; training length and batch size are artifact choices";
        std::ofstream ms(cfg_.run_dir / "manifest.json");
        ms << m.dump(2) << "\n";
    }
}

Trainer::Trainer(TrainConfig cfg, const std::vector<TimeSeriesSample>& data, std::unique_ptr<FlowTransformer<float>> model)
    : cfg_(std::move(cfg)), data_(&data), model_(std::move(model)) {
    cfg_.validate();
    const auto mc = model_->config();
    const std::size_t span = cfg_.task.span();
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& s = data[i];
        if (s.x_clear.rank() != 4) throw std::invalid_argument("sample " + std::to_string(i) + " has no frames");
        if (s.x_clear.dim(2) != mc.image_h || s.x_clear.dim(3) != mc.image_w)
            throw std::invalid_argument("sample '" + s.id + "' is " + std::to_string(s.x_clear.dim(2)) + "x" +
                                        std::to_string(s.x_clear.dim(3)) + ", model expects " + std::to_string(mc.image_h) +
                                        "x" + std::to_string(mc.image_w));
        if (s.frames() >= span) eligible_.push_back(i);
    }
    if (eligible_.empty())
        throw std::invalid_argument("no sample has the " + std::to_string(span) + " frames the task window needs");
    // Surface channel mismatches before the first step.
    make_batch(data, {WindowRef{eligible_.front(), 0, {}, false}}, cfg_.task);
}

Trainer Trainer::resume(const std::filesystem::path& checkpoint, const std::vector<TimeSeriesSample>& data) {
    auto ck = load_checkpoint(checkpoint);
    Trainer t(ck.config, data, std::move(ck.model));
    t.step_ = ck.step;
    t.ema_ = ck.ema;
    t.opt_ = std::move(ck.optimizer);
    return t;
}

std::vector<WindowRef> Trainer::draw_windows(std::size_t step) const {
    Rng rng(derive_seed(cfg_.seed, step + 1));
    const std::size_t span = cfg_.task.span(), T = cfg_.task.frames;
    std::vector<WindowRef> refs;
    for (std::size_t b = 0; b < cfg_.batch; ++b) {
        WindowRef r;
        r.sample = eligible_[static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(eligible_.size()) - 1))];
        const auto& s = (*data_)[r.sample];
        r.start = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(s.frames() - span)));
        if (cfg_.task.task == Task::recon) {
            if (rng.bernoulli(cfg_.pixel_mask_prob)) {
                const Tensor<float> blank(Shape{s.frames(), 1, s.x_clear.dim(2), s.x_clear.dim(3)});
                const std::uint64_t mseed = rng.engine()();
                r.mask.pixel_mask = contaminate(blank, mseed, rng.uniform(0.2, 0.9)).cloud_mask;
            } else {
                const auto hidden = rng.integer(1, static_cast<std::int64_t>(T));
                r.mask = frame_missing_plan(s.frames(), r.start, T, static_cast<double>(hidden) / static_cast<double>(T), rng);
            }
        }
        r.drop_aux = cfg_.drop_aux_prob > 0.0 && rng.bernoulli(cfg_.drop_aux_prob);
        refs.push_back(std::move(r));
    }
    return refs;
}

double Trainer::step() {
    const auto batch = make_batch(*data_, draw_windows(step_), cfg_.task);
    const auto& mc = model_->config();
    const auto ctx = model_->prepare(batch.cond);
    Rng noise(derive_seed(cfg_.seed ^ 0x5eed5eedULL, step_));
    const auto x0 = noise.normal_tensor<float>({cfg_.batch, mc.frames, mc.channels, mc.image_h, mc.image_w});
    const auto loss = fm_loss(*model_, ctx, x0, batch.target, batch.history, noise, step_);
    auto& params = model_->params().vars();
    auto grads = grad(loss, std::span<const Var<float>>(params));
    adamw_step(params, std::move(grads), opt_, cfg_.optim);
    const double value = loss.value().item();
    ema_ = step_ == 0 ? value : kLossEmaDecay * ema_ + (1.0 - kLossEmaDecay) * value;
    losses_.push_back(value);
    ema_curve_.push_back(ema_);
    write_loss_row(step_, value, ema_);
    ++step_;
    if (cfg_.checkpoint_every && !cfg_.run_dir.empty() && step_ % cfg_.checkpoint_every == 0) {
        std::ostringstream name;
        name << "step_" << std::setw(6) << std::setfill('0') << step_ << ".ckpt";
        save(cfg_.run_dir / "checkpoints" / name.str());
    }
    return value;
}

void Trainer::write_loss_row(std::size_t step, double loss, double ema) const {
    if (cfg_.run_dir.empty()) return;
    std::ofstream os(cfg_.run_dir / "loss.csv", std::ios::app);
    os << std::setprecision(10) << step << "," << loss << "," << ema << "\n";
}

void Trainer::run(std::optional<std::size_t> until, std::ostream* log) {
    const std::size_t target = until.value_or(cfg_.steps);
    while (step_ < target) {
        const double loss = step();
        if (log && cfg_.log_every && (step_ % cfg_.log_every == 0 || step_ == target))
            *log << "step " << step_ << " loss " << loss << " ema " << ema_ << (opt_.skipped ? " skipped " : "")
                 << (opt_.skipped ? std::to_string(opt_.skipped) : "") << "\n";
    }
    if (!cfg_.run_dir.empty()) save(cfg_.run_dir / "checkpoint.ckpt");
}

void Trainer::save(const std::filesystem::path& path) const {
    json metrics = {{"ema_loss", ema_}, {"skipped_updates", opt_.skipped}};
    if (!losses_.empty()) metrics["last_loss"] = losses_.back();
    save_checkpoint(path, *model_, cfg_, step_, ema_, &opt_, metrics);
}

json EvalSummary::to_json() const {
    json j = {{"windows", windows}, {"psnr", psnr}, {"ssim", ssim}, {"rmse", rmse}, {"mae", mae}, {"sam_deg", sam}};
    if (hidden_windows) {
        j["hidden_windows"] = hidden_windows;
        j["psnr_hidden"] = psnr_hidden;
        j["psnr_linear_baseline_hidden"] = psnr_baseline;
    }
    if (miou > 0.0 || scs > 0.0) {
        j["miou"] = miou;
        j["bc"] = bc;
        j["sc"] = sc;
        j["scs"] = scs;
        j["change_convention"] = metrics::kChangeConvention;
    }
    j["weighting"] = "uniform over windows; per-window values pool all frames";
    return j;
}

std::vector<WindowRef> eval_windows(const std::vector<TimeSeriesSample>& data, const TaskConfig& task, const EvalConfig& cfg) {
    std::vector<WindowRef> refs;
    const std::size_t span = task.span();
    for (std::size_t i = 0; i < data.size() && refs.size() < cfg.max_windows; ++i) {
        const auto& s = data[i];
        if (s.frames() < span) continue;
        const std::size_t room = s.frames() - span;
        const std::size_t n = std::max<std::size_t>(1, cfg.windows_per_sample);
        for (std::size_t k = 0; k < n && refs.size() < cfg.max_windows; ++k) {
            WindowRef r;
            r.sample = i;
            r.start = n == 1 ? 0 : static_cast<std::size_t>(std::llround(static_cast<double>(k * room) / static_cast<double>(n - 1)));
            if (task.task == Task::recon) {
                Rng rng(derive_seed(cfg.seed, refs.size()));
                r.mask = frame_missing_plan(s.frames(), r.start, task.frames, cfg.missing_rate, rng);
            }
            r.drop_aux = cfg.drop_aux;
            refs.push_back(std::move(r));
        }
    }
    return refs;
}

namespace {

double psnr_from_mse(double mse) { return mse == 0.0 ? metrics::kPsnrCap : std::min(metrics::kPsnrCap, -10.0 * std::log10(mse)); }

// MSE over entries whose pixel is hidden (vis == 0), values clamped to [0, 1].
double hidden_mse(const Tensor<float>& pred, const Tensor<float>& gt, const Tensor<float>& vis, std::size_t* count) {
    const std::size_t T = gt.dim(0), C = gt.dim(1), HW = gt.dim(2) * gt.dim(3);
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t p = 0; p < HW; ++p) {
            if (vis[t * HW + p] > 0.5f) continue;
            for (std::size_t c = 0; c < C; ++c) {
                const std::size_t i = (t * C + c) * HW + p;
                const double d = std::clamp<double>(pred[i], 0.0, 1.0) - std::clamp<double>(gt[i], 0.0, 1.0);
                acc += d * d;
                ++n;
            }
        }
    *count = n;
    return n ? acc / static_cast<double>(n) : 0.0;
}

Tensor<float> slice0(const Tensor<float>& x, std::size_t i) {
    Shape s(x.shape().begin() + 1, x.shape().end());
    const std::size_t per = numel(s);
    return Tensor<float>(s, std::vector<float>(x.data().begin() + i * per, x.data().begin() + (i + 1) * per));
}

}  // namespace

EvalSummary evaluate_task(const FlowTransformer<float>& model, const TaskConfig& task, const std::vector<TimeSeriesSample>& data,
                          const EvalConfig& cfg) {
    const auto refs = eval_windows(data, task, cfg);
    if (refs.empty()) throw std::invalid_argument("no evaluation windows: samples shorter than the task window");
    EvalSummary out;
    const std::size_t bs = std::max<std::size_t>(1, cfg.batch);
    for (std::size_t b0 = 0; b0 < refs.size(); b0 += bs) {
        const std::vector<WindowRef> chunk(refs.begin() + static_cast<long>(b0),
                                           refs.begin() + static_cast<long>(std::min(refs.size(), b0 + bs)));
        const auto batch = make_batch(data, chunk, task);
        const auto gen = sample(model, batch.cond, cfg.solver, derive_seed(cfg.seed, 0x5A3 + b0));
        for (std::size_t i = 0; i < chunk.size(); ++i) {
            const auto pred = slice0(gen, i), gt = slice0(batch.target, i);
            const auto& s = data[chunk[i].sample];
            ++out.windows;
            if (task.task == Task::scd) {
                const auto pl = to_int_labels(decode_argmax(pred)), gl = to_int_labels(decode_argmax(gt));
                out.miou += metrics::miou(pl, gl, task.classes).mean;
                const auto cs = metrics::change_scores(pl, gl, task.frames, task.classes);
                out.bc += cs.bc;
                out.sc += cs.sc;
                out.scs += cs.scs;
                continue;
            }
            auto rep = metrics::evaluate_reflectance(pred, gt);
            out.psnr += metrics::psnr(pred, gt);
            out.ssim += rep.mean.ssim;
            out.rmse += metrics::rmse(pred, gt);
            out.mae += metrics::mae(pred, gt);
            out.sam += metrics::sam(pred, gt).degrees;
            if (task.task == Task::recon) {
                const auto vis = visibility(s, chunk[i].start, task.frames, chunk[i].mask);
                std::size_t n = 0;
                const double m = hidden_mse(pred, gt, vis, &n);
                if (n) {
                    const std::vector<int> doy(s.doy.begin() + static_cast<long>(chunk[i].start),
                                               s.doy.begin() + static_cast<long>(chunk[i].start + task.frames));
                    const auto base = linear_interpolation_fill(gt, doy, vis);
                    std::size_t nb = 0;
                    out.psnr_hidden += psnr_from_mse(m);
                    out.psnr_baseline += psnr_from_mse(hidden_mse(base, gt, vis, &nb));
                    ++out.hidden_windows;
                }
            }
            out.reports.push_back(std::move(rep));
        }
    }
    const double n = static_cast<double>(out.windows);
    for (double* v : {&out.psnr, &out.ssim, &out.rmse, &out.mae, &out.sam, &out.miou, &out.bc, &out.sc, &out.scs}) *v /= n;
    if (out.hidden_windows) {
        out.psnr_hidden /= static_cast<double>(out.hidden_windows);
        out.psnr_baseline /= static_cast<double>(out.hidden_windows);
    }
    return out;
}

std::vector<AblationCell> default_ablation_cells(bool include_steps) {
    std::vector<AblationCell> cells{
        {"none", Fusion::concat, false, false, 10},
        {"acor", Fusion::acor, false, false, 10},
        {"stm", Fusion::concat, true, false, 10},
        {"acor+stm", Fusion::acor, true, false, 10},
        {"full", Fusion::acor, true, true, 10},
        {"fusion=concat", Fusion::concat, true, true, 10},
        {"fusion=crossattn", Fusion::crossattn, true, true, 10},
    };
    if (include_steps)
        for (std::size_t s : {20, 30, 40}) cells.push_back({"full@steps=" + std::to_string(s), Fusion::acor, true, true, s});
    return cells;
}

std::vector<AblationRow> run_ablation_grid(const std::vector<AblationCell>& cells, const std::vector<std::uint64_t>& seeds,
                                           const TrainConfig& base, const EvalConfig& eval,
                                           const std::vector<TimeSeriesSample>& train,
                                           const std::vector<TimeSeriesSample>& test, std::ostream* log) {
    std::vector<AblationRow> rows;
    if (cells.empty() || seeds.empty()) {
        std::cerr << "warning: empty ablation grid, nothing to run\n";
        return rows;
    }
    for (std::uint64_t seed : seeds) {
        std::map<std::string, std::unique_ptr<Trainer>> trained;
        for (const auto& cell : cells) {
            const std::string key = to_string(cell.fusion) + (cell.use_stm ? "+stm" : "") + (cell.use_metadata ? "+meta" : "");
            auto it = trained.find(key);
            if (it == trained.end()) {
                TrainConfig cfg = base;
                cfg.seed = seed;
                cfg.model.fusion = cell.fusion;
                cfg.model.use_stm = cell.use_stm;
                cfg.model.use_metadata = cell.use_metadata;
                if (!base.run_dir.empty()) cfg.run_dir = base.run_dir / (key + "_seed" + std::to_string(seed));
                auto t = std::make_unique<Trainer>(cfg, train);
                t->run();
                it = trained.emplace(key, std::move(t)).first;
            }
            EvalConfig ec = eval;
            ec.solver.steps = cell.sample_steps;
            const auto r = evaluate_task(it->second->model(), base.task, test, ec);
            rows.push_back({cell.name, seed, r.psnr, r.ssim, r.sam, it->second->current_ema()});
            if (log)
                *log << "ablation " << cell.name << " seed " << seed << " psnr " << r.psnr << " ssim " << r.ssim << " sam "
                     << r.sam << "\n";
        }
    }
    return rows;
}

void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << "cell,seed,psnr,ssim,sam,final_ema_loss\n" << std::setprecision(8);
    for (const auto& r : rows) os << r.cell << "," << r.seed << "," << r.psnr << "," << r.ssim << "," << r.sam << "," << r.final_ema << "\n";
}

#define TSFLOW_INSTANTIATE_TRAIN(R)                                                                                \
    template double global_norm(const std::vector<Tensor<R>>&);                                                    \
    template bool adamw_step(std::vector<Var<R>>&, std::vector<Tensor<R>>, AdamWState<R>&, const AdamWConfig&);

TSFLOW_INSTANTIATE_TRAIN(float)
TSFLOW_INSTANTIATE_TRAIN(double)

}  // namespace tsflow
