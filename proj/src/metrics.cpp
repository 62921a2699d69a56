#include "tsflow/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>

#include <json.hpp>

namespace tsflow::metrics {

namespace {

void check_same(const char* what, const Shape& a, const Shape& b) {
    if (a != b) throw_shape_mismatch(what, a, b);
}

double clamp_to(double v, double peak) { return std::clamp(v, 0.0, peak); }

template <typename Real>
double mean_error(const Tensor<Real>& pred, const Tensor<Real>& gt, double peak, bool squared) {
    check_same(squared ? "mse" : "mae", pred.shape(), gt.shape());
    if (pred.empty()) throw std::invalid_argument("metric on empty tensors");
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.numel(); ++i) {
        const double d = clamp_to(pred[i], peak) - clamp_to(gt[i], peak);
        acc += squared ? d * d : std::abs(d);
    }
    return acc / static_cast<double>(pred.numel());
}

}  // namespace

template <typename Real>
double psnr(const Tensor<Real>& pred, const Tensor<Real>& gt, double peak) {
    const double mse = mean_error(pred, gt, peak, true);
    if (mse == 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

template <typename Real>
double rmse(const Tensor<Real>& pred, const Tensor<Real>& gt, double peak) {
    return std::sqrt(mean_error(pred, gt, peak, true));
}

template <typename Real>
double mae(const Tensor<Real>& pred, const Tensor<Real>& gt, double peak) {
    return mean_error(pred, gt, peak, false);
}

std::vector<double> ssim_window(std::size_t h, std::size_t w, std::size_t* size_out) {
    std::size_t n = std::min({kSsimWindow, h, w});
    if (n % 2 == 0) --n;
    if (n == 0) throw std::invalid_argument("SSIM needs images of at least 1x1");
    const double sigma = kSsimSigma * static_cast<double>(n) / static_cast<double>(kSsimWindow);
    std::vector<double> g(n);
    const double c = static_cast<double>(n / 2);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double x = static_cast<double>(i) - c;
        g[i] = std::exp(-x * x / (2.0 * sigma * sigma));
        total += g[i];
    }
    for (auto& v : g) v /= total;
    if (size_out) *size_out = n;
    return g;
}

namespace {

// Separable weighted means over every valid window placement.
std::vector<double> filter_valid(const std::vector<double>& img, std::size_t h, std::size_t w, const std::vector<double>& g) {
    const std::size_t n = g.size(), oh = h - n + 1, ow = w - n + 1;
    std::vector<double> rows(h * ow, 0.0);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
            double acc = 0.0;
            for (std::size_t k = 0; k < n; ++k) acc += g[k] * img[y * w + x + k];
            rows[y * ow + x] = acc;
        }
    std::vector<double> out(oh * ow, 0.0);
    for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
            double acc = 0.0;
            for (std::size_t k = 0; k < n; ++k) acc += g[k] * rows[(y + k) * ow + x];
            out[y * ow + x] = acc;
        }
    return out;
}

double ssim_plane(const double* a, const double* b, std::size_t h, std::size_t w) {
    const auto g = ssim_window(h, w, nullptr);
    const std::size_t n = h * w;
    std::vector<double> x(a, a + n), y(b, b + n), xx(n), yy(n), xy(n);
    for (std::size_t i = 0; i < n; ++i) {
        xx[i] = x[i] * x[i];
        yy[i] = y[i] * y[i];
        xy[i] = x[i] * y[i];
    }
    const auto mx = filter_valid(x, h, w, g), my = filter_valid(y, h, w, g);
    const auto sxx = filter_valid(xx, h, w, g), syy = filter_valid(yy, h, w, g), sxy = filter_valid(xy, h, w, g);
    double acc = 0.0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
        const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cxy = sxy[i] - mx[i] * my[i];
        acc += ((2 * mx[i] * my[i] + kSsimC1) * (2 * cxy + kSsimC2)) /
               ((mx[i] * mx[i] + my[i] * my[i] + kSsimC1) * (vx + vy + kSsimC2));
    }
    return acc / static_cast<double>(mx.size());
}

}  // namespace

template <typename Real>
double ssim_band(const Tensor<Real>& pred, const Tensor<Real>& gt) {
    check_same("ssim", pred.shape(), gt.shape());
    if (pred.rank() != 2) throw ShapeError("ssim_band expects [H, W], got " + shape_str(pred.shape()));
    std::vector<double> a(pred.data().begin(), pred.data().end()), b(gt.data().begin(), gt.data().end());
    return ssim_plane(a.data(), b.data(), pred.dim(0), pred.dim(1));
}

template <typename Real>
double ssim(const Tensor<Real>& pred, const Tensor<Real>& gt) {
    check_same("ssim", pred.shape(), gt.shape());
    if (pred.rank() < 2 || pred.rank() > 4) throw ShapeError("ssim expects 2-4 dims, got " + shape_str(pred.shape()));
    const std::size_t h = pred.dim(pred.rank() - 2), w = pred.dim(pred.rank() - 1);
    const std::size_t planes = pred.numel() / (h * w);
    std::vector<double> a(pred.data().begin(), pred.data().end()), b(gt.data().begin(), gt.data().end());
    double acc = 0.0;
    for (std::size_t p = 0; p < planes; ++p) acc += ssim_plane(a.data() + p * h * w, b.data() + p * h * w, h, w);
    return acc / static_cast<double>(planes);
}

template <typename Real>
SamResult sam(const Tensor<Real>& pred, const Tensor<Real>& gt) {
    check_same("sam", pred.shape(), gt.shape());
    if (pred.rank() != 3 && pred.rank() != 4) throw ShapeError("sam expects [C, H, W] or [T, C, H, W]");
    const std::size_t frames = pred.rank() == 4 ? pred.dim(0) : 1;
    const std::size_t C = pred.dim(pred.rank() - 3), HW = pred.dim(pred.rank() - 2) * pred.dim(pred.rank() - 1);
    if (C < 2) throw std::invalid_argument("sam needs at least 2 bands");
    SamResult r;
    double acc = 0.0;
    for (std::size_t t = 0; t < frames; ++t)
        for (std::size_t p = 0; p < HW; ++p) {
            double dot = 0.0, np = 0.0, ng = 0.0;
            for (std::size_t c = 0; c < C; ++c) {
                const double a = pred[(t * C + c) * HW + p], b = gt[(t * C + c) * HW + p];
                dot += a * b;
                np += a * a;
                ng += b * b;
            }
            np = std::sqrt(np);
            ng = std::sqrt(ng);
            if (np < kSamEps || ng < kSamEps) {
                ++r.skipped;
                continue;
            }
            acc += std::acos(std::clamp(dot / std::max(np * ng, kSamEps), -1.0, 1.0));
            ++r.counted;
        }
    r.degrees = r.counted ? acc / static_cast<double>(r.counted) * 180.0 / std::numbers::pi : 0.0;
    return r;
}

IouResult miou(std::span<const int> pred, std::span<const int> gt, std::size_t classes) {
    if (pred.size() != gt.size()) throw std::invalid_argument("miou: label maps differ in size");
    std::vector<std::size_t> tp(classes, 0), fp(classes, 0), fn(classes, 0);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] < 0 || gt[i] < 0 || static_cast<std::size_t>(pred[i]) >= classes ||
            static_cast<std::size_t>(gt[i]) >= classes)
            throw std::invalid_argument("miou: label outside [0, " + std::to_string(classes) + ")");
        const auto p = static_cast<std::size_t>(pred[i]), g = static_cast<std::size_t>(gt[i]);
        if (p == g) ++tp[p];
        else {
            ++fp[p];
            ++fn[g];
        }
    }
    IouResult r;
    r.per_class.resize(classes);
    double acc = 0.0;
    std::size_t present = 0;
    for (std::size_t k = 0; k < classes; ++k) {
        const std::size_t denom = tp[k] + fp[k] + fn[k];
        if (denom == 0) continue;
        r.per_class[k] = static_cast<double>(tp[k]) / static_cast<double>(denom);
        acc += *r.per_class[k];
        ++present;
    }
    r.mean = present ? acc / static_cast<double>(present) : 1.0;
    return r;
}

ChangeScores change_scores(std::span<const int> pred, std::span<const int> gt, std::size_t frames, std::size_t classes) {
    if (pred.size() != gt.size()) throw std::invalid_argument("change_scores: sequences differ in size");
    if (frames == 0 || pred.size() % frames != 0) throw std::invalid_argument("change_scores: size not divisible by frames");
    ChangeScores s;
    if (frames < 2) return s;
    for (int v : pred)
        if (v < 0 || static_cast<std::size_t>(v) >= classes) throw std::invalid_argument("change_scores: label out of range");
    for (int v : gt)
        if (v < 0 || static_cast<std::size_t>(v) >= classes) throw std::invalid_argument("change_scores: label out of range");
    const std::size_t n = pred.size() / frames;
    std::size_t inter = 0, uni = 0;
    std::map<long, std::size_t> both, either;
    for (std::size_t t = 0; t + 1 < frames; ++t)
        for (std::size_t p = 0; p < n; ++p) {
            const int pa = pred[t * n + p], pb = pred[(t + 1) * n + p];
            const int ga = gt[t * n + p], gb = gt[(t + 1) * n + p];
            const bool pc = pa != pb, gc = ga != gb;
            inter += pc && gc;
            uni += pc || gc;
            const long kp = pc ? static_cast<long>(pa) * static_cast<long>(classes) + pb : -1;
            const long kg = gc ? static_cast<long>(ga) * static_cast<long>(classes) + gb : -1;
            if (kp >= 0) ++either[kp];
            if (kg >= 0 && kg != kp) ++either[kg];
            if (kp >= 0 && kp == kg) ++both[kp];
        }
    s.defined = true;
    s.bc = uni ? static_cast<double>(inter) / static_cast<double>(uni) : 1.0;
    if (either.empty()) s.sc = 1.0;
    else {
        double acc = 0.0;
        for (const auto& [k, u] : either) acc += static_cast<double>(both[k]) / static_cast<double>(u);
        s.sc = acc / static_cast<double>(either.size());
    }
    s.scs = 0.5 * (s.bc + s.sc);
    return s;
}

template <typename Real>
MetricReport evaluate_reflectance(const Tensor<Real>& pred, const Tensor<Real>& gt, const std::vector<std::size_t>& frames) {
    check_same("evaluate", pred.shape(), gt.shape());
    if (pred.rank() != 4) throw ShapeError("evaluate expects [T, C, H, W], got " + shape_str(pred.shape()));
    const std::size_t T = pred.dim(0), C = pred.dim(1), H = pred.dim(2), W = pred.dim(3), per = C * H * W;
    std::vector<std::size_t> sel = frames;
    if (sel.empty())
        for (std::size_t t = 0; t < T; ++t) sel.push_back(t);
    if (sel.empty()) throw std::invalid_argument("evaluate: no frames selected");
    MetricReport r;
    auto frame_of = [&](const Tensor<Real>& x, std::size_t t) {
        return Tensor<Real>(Shape{C, H, W}, std::vector<Real>(x.data().begin() + t * per, x.data().begin() + (t + 1) * per));
    };
    std::size_t sam_frames = 0;
    for (std::size_t t : sel) {
        if (t >= T) throw std::out_of_range("evaluate: frame index " + std::to_string(t));
        const auto p = frame_of(pred, t), g = frame_of(gt, t);
        FrameMetrics m;
        m.frame = t;
        m.psnr = psnr(p, g);
        m.ssim = ssim(p, g);
        m.rmse = rmse(p, g);
        m.mae = mae(p, g);
        if (C >= 2) {
            const auto s = sam(p, g);
            m.sam = s.degrees;
            m.sam_defined = s.defined();
        } else {
            m.sam_defined = false;
        }
        r.frames.push_back(m);
        r.mean.psnr += m.psnr;
        r.mean.ssim += m.ssim;
        r.mean.rmse += m.rmse;
        r.mean.mae += m.mae;
        if (m.sam_defined) {
            r.mean.sam += m.sam;
            ++sam_frames;
        }
        for (std::size_t c = 0; c < C; ++c) {
            Tensor<Real> pb(Shape{H, W}, std::vector<Real>(p.data().begin() + c * H * W, p.data().begin() + (c + 1) * H * W));
            Tensor<Real> gb(Shape{H, W}, std::vector<Real>(g.data().begin() + c * H * W, g.data().begin() + (c + 1) * H * W));
            r.bands.push_back({t, c, psnr(pb, gb), rmse(pb, gb)});
        }
    }
    const double n = static_cast<double>(sel.size());
    r.mean.psnr /= n;
    r.mean.ssim /= n;
    r.mean.rmse /= n;
    r.mean.mae /= n;
    r.mean.sam_defined = sam_frames > 0;
    r.mean.sam = sam_frames ? r.mean.sam / static_cast<double>(sam_frames) : 0.0;
    return r;
}

void MetricReport::write_csv(const std::filesystem::path& path) const {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << "frame,metric,value\n";
    os.precision(10);
    for (const auto& f : frames) {
        os << f.frame << ",psnr," << f.psnr << "\n";
        os << f.frame << ",ssim," << f.ssim << "\n";
        os << f.frame << ",rmse," << f.rmse << "\n";
        os << f.frame << ",mae," << f.mae << "\n";
        if (f.sam_defined) os << f.frame << ",sam," << f.sam << "\n";
    }
}

void MetricReport::write_band_csv(const std::filesystem::path& path) const {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << "frame,band,psnr,rmse\n";
    os.precision(10);
    for (const auto& b : bands) os << b.frame << "," << b.band << "," << b.psnr << "," << b.rmse << "\n";
}

std::string MetricReport::to_json() const {
    nlohmann::json j;
    j["frames"] = frames.size();
    j["weighting"] = "uniform over frames";
    j["psnr"] = mean.psnr;
    j["ssim"] = mean.ssim;
    j["rmse"] = mean.rmse;
    j["mae"] = mean.mae;
    if (mean.sam_defined) j["sam_deg"] = mean.sam;
    else j["sam_deg"] = nullptr;
    if (iou) {
        j["miou"] = iou->mean;
        nlohmann::json per = nlohmann::json::array();
        for (const auto& v : iou->per_class) per.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
        j["iou_per_class"] = per;
    }
    if (change) {
        j["change_convention"] = change->convention;
        if (change->defined) {
            j["bc"] = change->bc;
            j["sc"] = change->sc;
            j["scs"] = change->scs;
        } else {
            j["bc"] = j["sc"] = j["scs"] = nullptr;
        }
    }
    if (!note.empty()) j["note"] = note;
    return j.dump(2);
}

#define TSFLOW_INSTANTIATE_METRICS(R)                                                            \
    template double psnr(const Tensor<R>&, const Tensor<R>&, double);                            \
    template double rmse(const Tensor<R>&, const Tensor<R>&, double);                            \
    template double mae(const Tensor<R>&, const Tensor<R>&, double);                             \
    template double ssim_band(const Tensor<R>&, const Tensor<R>&);                               \
    template double ssim(const Tensor<R>&, const Tensor<R>&);                                    \
    template SamResult sam(const Tensor<R>&, const Tensor<R>&);                                  \
    template MetricReport evaluate_reflectance(const Tensor<R>&, const Tensor<R>&, const std::vector<std::size_t>&);

TSFLOW_INSTANTIATE_METRICS(float)
TSFLOW_INSTANTIATE_METRICS(double)

}  // namespace tsflow::metrics
