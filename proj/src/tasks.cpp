#include "tsflow/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tsflow/ops.hpp"

namespace tsflow {

std::string to_string(Task t) {
    switch (t) {
        case Task::recon: return "recon";
        case Task::cloudrm: return "cloudrm";
        case Task::scd: return "scd";
        case Task::forecast: return "forecast";
    }
    return "?";
}

Task task_from_string(const std::string& s) {
    if (s == "recon" || s == "reconstruction") return Task::recon;
    if (s == "cloudrm" || s == "cloud_removal") return Task::cloudrm;
    if (s == "scd") return Task::scd;
    if (s == "forecast" || s == "forecasting") return Task::forecast;
    throw std::invalid_argument("unknown task '" + s + "' (expected recon|cloudrm|scd|forecast)");
}

TaskConfig TaskConfig::toy(Task task, std::size_t optical, std::size_t frames, std::size_t classes) {
    TaskConfig c;
    c.task = task;
    c.frames = frames;
    switch (task) {
        case Task::recon:
        case Task::cloudrm:
            c.channels = optical;
            c.cond_channels = optical + kAuxChannels;
            break;
        case Task::scd:
            c.channels = classes;
            c.cond_channels = optical;
            c.classes = classes;
            break;
        case Task::forecast:
            c.channels = optical;
            c.cond_channels = optical;
            c.history = frames;
            break;
    }
    return c;
}

TaskConfig TaskConfig::published(Task task, int variant) {
    TaskConfig c;
    c.task = task;
    c.frames = 8;
    switch (task) {
        case Task::recon:
        case Task::cloudrm:
            c.channels = 10;
            c.cond_channels = 12;
            break;
        case Task::scd:
            c.cond_channels = variant == 0 ? 4 : 3;
            c.channels = variant == 0 ? 6 : 2;
            c.classes = c.channels;
            break;
        case Task::forecast:
            c.cond_channels = variant == 0 ? 10 : 6;
            c.channels = variant == 0 ? 10 : 4;
            c.frames = 4;
            c.history = 4;
            break;
    }
    return c;
}

void TaskConfig::validate() const {
    auto fail = [this](const std::string& m) { throw std::invalid_argument("task " + to_string(task) + ": " + m); };
    if (channels == 0 || cond_channels == 0 || frames == 0) fail("channel and frame counts must be positive");
    switch (task) {
        case Task::recon:
        case Task::cloudrm:
            if (cond_channels != channels + aux_channels)
                fail("C_con must equal C + C_STM (" + std::to_string(channels + aux_channels) + "), got " +
                     std::to_string(cond_channels));
            break;
        case Task::scd:
            if (classes != channels) fail("segmentation targets need C == K");
            if (classes < 2) fail("need at least 2 classes");
            break;
        case Task::forecast:
            if (history == 0) fail("forecasting needs T_his >= 1");
            if (cond_channels < channels) fail("forecast history must carry the C target bands first");
            break;
    }
}

ModelConfig TaskConfig::apply(ModelConfig base) const {
    validate();
    base.channels = channels;
    base.cond_channels = cond_channels;
    base.aux_channels = aux_channels;
    base.frames = frames;
    base.forecast = task == Task::forecast;
    base.history = task == Task::forecast ? history : 0;
    base.use_metadata = base.use_metadata && use_metadata;
    return base;
}

MaskPlan frame_missing_plan(std::size_t length, std::size_t start, std::size_t frames, double rate, Rng& rng) {
    if (!(rate >= 0.0 && rate <= 1.0)) throw std::invalid_argument("missing rate must lie in [0, 1]");
    if (start + frames > length) throw std::out_of_range("mask window exceeds sequence");
    MaskPlan plan;
    plan.frame_missing.assign(length, 0);
    const auto count = static_cast<std::size_t>(std::llround(rate * static_cast<double>(frames)));
    std::vector<std::size_t> idx(frames);
    std::iota(idx.begin(), idx.end(), start);
    std::shuffle(idx.begin(), idx.end(), rng.engine());
    for (std::size_t i = 0; i < count; ++i) plan.frame_missing[idx[i]] = 1;
    return plan;
}

Tensor<float> slice_frames(const Tensor<float>& x, std::size_t start, std::size_t n) {
    if (x.rank() < 1 || start + n > x.dim(0))
        throw std::out_of_range("window [" + std::to_string(start) + ", " + std::to_string(start + n) + ") outside " +
                                shape_str(x.shape()));
    Shape s = x.shape();
    const std::size_t per = x.numel() / s[0];
    s[0] = n;
    return Tensor<float>(s, std::vector<float>(x.data().begin() + start * per, x.data().begin() + (start + n) * per));
}

Tensor<float> concat_frames(const Tensor<float>& a, const Tensor<float>& b) {
    if (a.empty()) return b;
    if (b.empty()) return a;
    if (a.rank() != b.rank() || !std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1))
        throw_shape_mismatch("concat_frames", a.shape(), b.shape());
    Shape s = a.shape();
    s[0] += b.dim(0);
    std::vector<float> d(a.data().begin(), a.data().end());
    d.insert(d.end(), b.data().begin(), b.data().end());
    return Tensor<float>(s, std::move(d));
}

namespace {

void check_sample(const TimeSeriesSample& s) {
    if (s.x_clear.rank() != 4 || s.x_clear.dim(0) != s.frames())
        throw std::invalid_argument("sample '" + s.id + "' has inconsistent frame tensors");
}

}  // namespace

Tensor<float> visibility(const TimeSeriesSample& s, std::size_t start, std::size_t frames, const MaskPlan& mask) {
    const std::size_t H = s.x_clear.dim(2), W = s.x_clear.dim(3), HW = H * W;
    Tensor<float> vis(Shape{frames, H, W}, 1.0f);
    for (std::size_t t = 0; t < frames; ++t) {
        const std::size_t f = start + t;
        const bool frame_hidden = !mask.frame_missing.empty() && mask.frame_missing.at(f);
        for (std::size_t p = 0; p < HW; ++p) {
            const bool px_hidden = !mask.pixel_mask.empty() && mask.pixel_mask[f * HW + p] > 0.5f;
            if (frame_hidden || px_hidden) vis[t * HW + p] = 0.0f;
        }
    }
    return vis;
}

AssembledCondition assemble_condition(const TimeSeriesSample& s, std::size_t start, const TaskConfig& task,
                                      const MaskPlan& mask, bool drop_aux) {
    task.validate();
    check_sample(s);
    const std::size_t C_opt = s.x_clear.dim(1), H = s.x_clear.dim(2), W = s.x_clear.dim(3), HW = H * W;
    const std::size_t Tc = task.task == Task::forecast ? task.history : task.frames;
    if (start + task.span() > s.frames())
        throw std::out_of_range("window of " + std::to_string(task.span()) + " frames at " + std::to_string(start) +
                                " exceeds sample length " + std::to_string(s.frames()));
    if (!mask.frame_missing.empty() && mask.frame_missing.size() != s.frames())
        throw std::invalid_argument("frame mask length differs from sample length");
    if (!mask.pixel_mask.empty() && mask.pixel_mask.shape() != Shape{s.frames(), H, W})
        throw_shape_mismatch("pixel mask", Shape{s.frames(), H, W}, mask.pixel_mask.shape());

    AssembledCondition out;
    const bool have_aux = !drop_aux && s.aux.rank() == 4 && s.aux.dim(0) == s.frames();
    out.aux_absent = !have_aux;
    out.aux = have_aux ? slice_frames(s.aux, start, Tc) : Tensor<float>(Shape{Tc, task.aux_channels, H, W});
    if (out.aux.dim(1) != task.aux_channels)
        throw std::invalid_argument("sample carries " + std::to_string(out.aux.dim(1)) + " aux channels, task expects " +
                                    std::to_string(task.aux_channels));
    out.hidden.assign(Tc, 0);

    Tensor<float> optical;
    switch (task.task) {
        case Task::recon: {
            optical = slice_frames(s.x_clear, start, Tc);
            const auto vis = visibility(s, start, Tc, mask);
            for (std::size_t t = 0; t < Tc; ++t)
                for (std::size_t p = 0; p < HW; ++p)
                    if (vis[t * HW + p] == 0.0f) {
                        out.hidden[t] = 1;
                        for (std::size_t c = 0; c < C_opt; ++c) optical[(t * C_opt + c) * HW + p] = kMaskFill;
                    }
            break;
        }
        case Task::cloudrm:
            if (s.x_contam.empty()) throw std::invalid_argument("cloud removal needs contaminated frames (ts_s12cr data)");
            optical = slice_frames(s.x_contam, start, Tc);
            break;
        case Task::scd:
        case Task::forecast:
            optical = slice_frames(s.x_clear, start, Tc);
            break;
    }

    const bool with_aux = task.task == Task::recon || task.task == Task::cloudrm;
    const std::size_t C_in = optical.dim(1) + (with_aux ? task.aux_channels : 0);
    if (C_in != task.cond_channels)
        throw std::invalid_argument("sample provides " + std::to_string(C_in) + " condition channels, task expects C_con=" +
                                    std::to_string(task.cond_channels));
    if (!with_aux) {
        out.cond = std::move(optical);
        return out;
    }
    out.cond = Tensor<float>(Shape{Tc, C_in, H, W});
    const std::size_t A = task.aux_channels;
    for (std::size_t t = 0; t < Tc; ++t) {
        std::copy_n(out.aux.data().data() + t * A * HW, A * HW, out.cond.data().data() + t * C_in * HW);
        std::copy_n(optical.data().data() + t * C_opt * HW, C_opt * HW, out.cond.data().data() + (t * C_in + A) * HW);
    }
    return out;
}

Tensor<float> task_target(const TimeSeriesSample& s, std::size_t start, const TaskConfig& task) {
    check_sample(s);
    switch (task.task) {
        case Task::recon:
        case Task::cloudrm: return slice_frames(s.x_clear, start, task.frames);
        case Task::scd:
            if (s.labels.empty()) throw std::invalid_argument("segmentation task needs label maps");
            return encode_onehot(slice_frames(s.labels, start, task.frames), task.classes);
        case Task::forecast: {
            auto fut = slice_frames(s.x_clear, start + task.history, task.frames);
            if (fut.dim(1) != task.channels)
                throw std::invalid_argument("forecast target has " + std::to_string(fut.dim(1)) + " bands, task expects " +
                                            std::to_string(task.channels));
            return fut;
        }
    }
    throw std::logic_error("unreachable");
}

std::vector<int> task_doy(const TimeSeriesSample& s, std::size_t start, const TaskConfig& task) {
    const std::size_t first = task.task == Task::forecast ? start + task.history : start;
    if (first + task.frames > s.doy.size()) throw std::out_of_range("date window exceeds sample");
    return {s.doy.begin() + static_cast<long>(first), s.doy.begin() + static_cast<long>(first + task.frames)};
}

Tensor<float> encode_onehot(const Tensor<float>& labels, std::size_t classes) {
    if (labels.rank() != 3) throw ShapeError("labels must be [T, H, W], got " + shape_str(labels.shape()));
    const std::size_t T = labels.dim(0), HW = labels.dim(1) * labels.dim(2);
    Tensor<float> out(Shape{T, classes, labels.dim(1), labels.dim(2)});
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t p = 0; p < HW; ++p) {
            const float v = labels[t * HW + p];
            if (!(v >= 0.0f) || v != std::floor(v) || static_cast<std::size_t>(v) >= classes)
                throw std::invalid_argument("label " + std::to_string(v) + " outside [0, " + std::to_string(classes) + ")");
            out[(t * classes + static_cast<std::size_t>(v)) * HW + p] = 1.0f;
        }
    return out;
}

Tensor<float> decode_argmax(const Tensor<float>& scores) {
    if (scores.rank() != 4) throw ShapeError("scores must be [T, K, H, W], got " + shape_str(scores.shape()));
    const std::size_t T = scores.dim(0), K = scores.dim(1), HW = scores.dim(2) * scores.dim(3);
    Tensor<float> out(Shape{T, scores.dim(2), scores.dim(3)});
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t p = 0; p < HW; ++p) {
            std::size_t best = 0;
            for (std::size_t k = 1; k < K; ++k)
                if (scores[(t * K + k) * HW + p] > scores[(t * K + best) * HW + p]) best = k;
            out[t * HW + p] = static_cast<float>(best);
        }
    return out;
}

std::vector<int> to_int_labels(const Tensor<float>& labels) {
    std::vector<int> out(labels.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<int>(labels[i]);
    return out;
}

std::vector<std::size_t> window_starts(std::size_t length, std::size_t window) {
    if (window == 0) throw std::invalid_argument("window must be >= 1");
    if (length <= window) return {0};
    std::vector<std::size_t> starts;
    std::size_t s = 0;
    for (; s + window <= length; s += window) starts.push_back(s);
    if (starts.back() + window < length) starts.push_back(length - window);
    return starts;
}

Batch make_batch(const std::vector<TimeSeriesSample>& data, const std::vector<WindowRef>& refs, const TaskConfig& task) {
    if (refs.empty()) throw std::invalid_argument("empty batch");
    Batch b;
    const std::size_t B = refs.size();
    std::vector<Tensor<float>> conds, auxes, targets, hists;
    for (const auto& r : refs) {
        const auto& s = data.at(r.sample);
        auto c = assemble_condition(s, r.start, task, r.mask, r.drop_aux);
        conds.push_back(std::move(c.cond));
        auxes.push_back(std::move(c.aux));
        targets.push_back(task_target(s, r.start, task));
        if (task.task == Task::forecast) {
            auto h = slice_frames(s.x_clear, r.start, task.history);
            if (h.dim(1) != task.channels)
                throw std::invalid_argument("forecast history has " + std::to_string(h.dim(1)) + " bands, task expects " +
                                            std::to_string(task.channels));
            hists.push_back(std::move(h));
        }
        b.cond.doy.push_back(task_doy(s, r.start, task));
        b.cond.lonlat.push_back(s.lonlat);
    }
    auto stack = [B](const std::vector<Tensor<float>>& parts) {
        Shape shape = parts.front().shape();
        shape.insert(shape.begin(), B);
        Tensor<float> out(shape);
        const std::size_t per = parts.front().numel();
        for (std::size_t i = 0; i < B; ++i) {
            if (parts[i].shape() != parts.front().shape()) throw_shape_mismatch("batch", parts.front().shape(), parts[i].shape());
            std::copy(parts[i].data().begin(), parts[i].data().end(), out.data().begin() + i * per);
        }
        return out;
    };
    b.cond.cond = stack(conds);
    b.cond.aux = stack(auxes);
    b.target = stack(targets);
    if (!hists.empty()) b.history = stack(hists);
    return b;
}

namespace {

// Pads a short sample by repeating its last frame (dates advance by one day).
TimeSeriesSample pad_sample(const TimeSeriesSample& s, std::size_t length) {
    TimeSeriesSample p = s;
    auto pad = [length](Tensor<float>& x) {
        if (x.empty()) return;
        const std::size_t L = x.dim(0), per = x.numel() / L;
        Shape shape = x.shape();
        shape[0] = length;
        std::vector<float> data(x.data().begin(), x.data().end());
        for (std::size_t t = L; t < length; ++t) data.insert(data.end(), x.data().end() - per, x.data().end());
        x = Tensor<float>(shape, std::move(data));
    };
    pad(p.x_clear);
    pad(p.x_contam);
    pad(p.aux);
    pad(p.labels);
    pad(p.cloud_mask);
    pad(p.shadow_mask);
    while (p.doy.size() < length) p.doy.push_back(std::min(366, p.doy.back() + 1));
    return p;
}

}  // namespace

SequenceResult infer_sequence(const FlowTransformer<float>& model, const TimeSeriesSample& s, const TaskConfig& task,
                              const InferenceOptions& opt) {
    if (task.task == Task::forecast) throw std::invalid_argument("use infer_autoregressive for forecasting");
    const auto& cfg = model.config();
    const std::size_t window = cfg.frames, L = s.frames();
    if (task.frames != window) throw std::invalid_argument("task window differs from model frames");
    const TimeSeriesSample* src = &s;
    TimeSeriesSample padded;
    MaskPlan mask = opt.mask;
    if (L < window) {
        padded = pad_sample(s, window);
        src = &padded;
        if (!mask.frame_missing.empty()) mask.frame_missing.resize(window, 0);
        if (!mask.pixel_mask.empty()) {
            Shape sh = mask.pixel_mask.shape();
            sh[0] = window;
            std::vector<float> d(mask.pixel_mask.data().begin(), mask.pixel_mask.data().end());
            d.resize(numel(sh), 0.0f);
            mask.pixel_mask = Tensor<float>(sh, std::move(d));
        }
    }
    SequenceResult r;
    const std::size_t C = cfg.channels, per = C * cfg.image_h * cfg.image_w;
    r.frames = Tensor<float>(Shape{L, C, cfg.image_h, cfg.image_w});
    std::vector<std::uint8_t> written(L, 0);
    const auto starts = window_starts(L, window);
    for (std::size_t w = 0; w < starts.size(); ++w) {
        const std::size_t start = starts[w];
        auto batch = make_batch({*src}, {WindowRef{0, start, mask, opt.drop_aux}}, task);
        auto gen = sample(model, batch.cond, opt.solver, derive_seed(opt.seed, w));
        ++r.model_calls;
        for (std::size_t t = 0; t < window; ++t) {
            const std::size_t f = start + t;
            if (f >= L || written[f]) continue;  // padding, or first write wins
            std::copy_n(gen.data().data() + t * per, per, r.frames.data().data() + f * per);
            written[f] = 1;
        }
    }
    return r;
}

AutoregressiveResult infer_autoregressive(const FlowTransformer<float>& model, const Tensor<float>& history,
                                          const Tensor<float>& aux_timeline, std::size_t horizon,
                                          const std::vector<int>& future_doy, LonLat lonlat, const SolverConfig& solver,
                                          std::uint64_t seed) {
    const auto& cfg = model.config();
    if (!cfg.forecast) throw std::invalid_argument("autoregressive inference needs a forecasting model");
    if (horizon == 0) throw std::invalid_argument("horizon must be >= 1");
    if (future_doy.size() < horizon)
        throw std::invalid_argument("future DOY list has " + std::to_string(future_doy.size()) + " entries, need " +
                                    std::to_string(horizon));
    const std::size_t Th = cfg.history, Tf = cfg.frames, C = cfg.channels, H = cfg.image_h, W = cfg.image_w;
    const std::size_t per = C * H * W;
    const Shape hist_shape{Th, cfg.cond_channels, H, W};
    if (history.shape() != hist_shape) throw_shape_mismatch("forecast history", hist_shape, history.shape());
    if (cfg.cond_channels != C) throw std::invalid_argument("autoregressive rollout needs C_con == C");
    const std::size_t A = cfg.aux_channels, aper = A * H * W;
    if (!aux_timeline.empty() && aux_timeline.shape() != Shape{Th + horizon, A, H, W})
        throw_shape_mismatch("aux timeline", Shape{Th + horizon, A, H, W}, aux_timeline.shape());

    std::vector<float> timeline(history.data().begin(), history.data().end());
    AutoregressiveResult r;
    r.frames = Tensor<float>(Shape{horizon, C, H, W});
    std::size_t emitted = 0;
    while (emitted < horizon) {
        const std::size_t now = Th + emitted;  // timeline index of the first frame to predict
        const std::size_t first = now - Th;
        ConditionInput<float> in;
        in.cond = Tensor<float>(Shape{1, Th, C, H, W},
                                std::vector<float>(timeline.begin() + first * per, timeline.begin() + now * per));
        in.aux = Tensor<float>(Shape{1, Th, A, H, W});
        if (!aux_timeline.empty())
            std::copy_n(aux_timeline.data().data() + first * aper, Th * aper, in.aux.data().data());
        std::vector<long> used;
        for (std::size_t i = first; i < now; ++i) used.push_back(static_cast<long>(i));
        r.access.push_back(std::move(used));

        std::vector<int> doy(Tf);
        for (std::size_t i = 0; i < Tf; ++i) doy[i] = future_doy[std::min(emitted + i, horizon - 1)];
        in.doy.push_back(doy);
        in.lonlat.push_back(lonlat);
        auto gen = sample(model, in, solver, derive_seed(seed, r.model_calls));
        ++r.model_calls;
        const std::size_t take = std::min(Tf, horizon - emitted);
        timeline.insert(timeline.end(), gen.data().begin(), gen.data().begin() + take * per);
        std::copy_n(gen.data().data(), take * per, r.frames.data().data() + emitted * per);
        emitted += take;
    }
    return r;
}

Tensor<float> linear_interpolation_fill(const Tensor<float>& frames, const std::vector<int>& doy, const Tensor<float>& visible) {
    if (frames.rank() != 4) throw ShapeError("frames must be [T, C, H, W]");
    const std::size_t T = frames.dim(0), C = frames.dim(1), HW = frames.dim(2) * frames.dim(3);
    if (doy.size() != T) throw std::invalid_argument("one date per frame required");
    if (visible.shape() != Shape{T, frames.dim(2), frames.dim(3)})
        throw_shape_mismatch("visibility", Shape{T, frames.dim(2), frames.dim(3)}, visible.shape());
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t p = 0; p < HW; ++p)
            if (visible[t * HW + p] > 0.5f)
                for (std::size_t c = 0; c < C; ++c) {
                    total += frames[(t * C + c) * HW + p];
                    ++count;
                }
    const float fallback = count ? static_cast<float>(total / static_cast<double>(count)) : 0.5f;

    Tensor<float> out = frames;
    std::vector<std::size_t> obs;
    for (std::size_t p = 0; p < HW; ++p) {
        obs.clear();
        for (std::size_t t = 0; t < T; ++t)
            if (visible[t * HW + p] > 0.5f) obs.push_back(t);
        for (std::size_t t = 0; t < T; ++t) {
            if (visible[t * HW + p] > 0.5f) continue;
            for (std::size_t c = 0; c < C; ++c) {
                float v = fallback;
                if (!obs.empty()) {
                    auto after = std::lower_bound(obs.begin(), obs.end(), t);
                    if (after == obs.begin()) v = frames[(*after * C + c) * HW + p];
                    else if (after == obs.end()) v = frames[(obs.back() * C + c) * HW + p];
                    else {
                        const std::size_t t1 = *after, t0 = *(after - 1);
                        const double a = static_cast<double>(doy[t] - doy[t0]) / static_cast<double>(doy[t1] - doy[t0]);
                        v = static_cast<float>((1.0 - a) * frames[(t0 * C + c) * HW + p] + a * frames[(t1 * C + c) * HW + p]);
                    }
                }
                out[(t * C + c) * HW + p] = v;
            }
        }
    }
    return out;
}

}  // namespace tsflow
