#include "tsflow/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "tsflow/serialize.hpp"

namespace tsflow {

using nlohmann::json;

namespace {

constexpr double kYear = 365.0;
constexpr double kBetaConcentration = 8.0;

double smoothstep(double x) { return x * x * (3.0 - 2.0 * x); }

}  // namespace

Tensor<double> value_noise(std::size_t h, std::size_t w, double cell, Rng& rng) {
    if (!(cell > 0.0)) throw std::invalid_argument("value_noise: cell size must be positive");
    const std::size_t gh = static_cast<std::size_t>(std::ceil(h / cell)) + 2;
    const std::size_t gw = static_cast<std::size_t>(std::ceil(w / cell)) + 2;
    std::vector<double> lattice(gh * gw);
    for (auto& v : lattice) v = rng.uniform();
    const double oy = rng.uniform(0.0, 1.0), ox = rng.uniform(0.0, 1.0);
    Tensor<double> out(Shape{h, w});
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            const double fy = y / cell + oy, fx = x / cell + ox;
            const auto iy = static_cast<std::size_t>(fy), ix = static_cast<std::size_t>(fx);
            const double ty = smoothstep(fy - iy), tx = smoothstep(fx - ix);
            const double v00 = lattice[iy * gw + ix], v01 = lattice[iy * gw + ix + 1];
            const double v10 = lattice[(iy + 1) * gw + ix], v11 = lattice[(iy + 1) * gw + ix + 1];
            out[y * w + x] = (v00 * (1 - tx) + v01 * tx) * (1 - ty) + (v10 * (1 - tx) + v11 * tx) * ty;
        }
    return out;
}

World generate_world(std::uint64_t seed, std::size_t h, std::size_t w, std::size_t channels, std::size_t classes) {
    if (h == 0 || w == 0 || channels == 0 || classes == 0) throw std::invalid_argument("world dimensions must be positive");
    if (classes > h * w) throw std::invalid_argument("more classes than pixels");
    Rng rng(seed);
    World world;
    world.h = h;
    world.w = w;
    world.channels = channels;
    world.classes = classes;

    // Voronoi sites at distinct pixels; the first K sites cover every class once.
    const std::size_t n_sites = std::min(h * w, std::max<std::size_t>(2 * classes, 6));
    std::vector<std::size_t> pixels(h * w);
    std::iota(pixels.begin(), pixels.end(), 0);
    std::shuffle(pixels.begin(), pixels.end(), rng.engine());
    std::vector<std::size_t> sites(pixels.begin(), pixels.begin() + n_sites);
    std::vector<int> site_class(n_sites);
    for (std::size_t i = 0; i < n_sites; ++i)
        site_class[i] = i < classes ? static_cast<int>(i) : static_cast<int>(rng.integer(0, classes - 1));

    std::vector<std::size_t> owner(h * w);
    for (std::size_t p = 0; p < h * w; ++p) {
        const double py = static_cast<double>(p / w), px = static_cast<double>(p % w);
        double best = 1e300;
        for (std::size_t s = 0; s < n_sites; ++s) {
            const double dy = py - static_cast<double>(sites[s] / w), dx = px - static_cast<double>(sites[s] % w);
            const double d2 = dy * dy + dx * dx;
            if (d2 < best) {
                best = d2;
                owner[p] = s;
            }
        }
    }
    world.class_map.resize(h * w);
    for (std::size_t p = 0; p < h * w; ++p) world.class_map[p] = site_class[owner[p]];

    // A random subset of regions switches class at a mid-year date.
    std::vector<int> changed_class = site_class;
    if (classes > 1) {
        bool any = false;
        for (std::size_t s = 0; s < n_sites; ++s)
            if (rng.bernoulli(0.3)) {
                changed_class[s] = static_cast<int>((site_class[s] + rng.integer(1, classes - 1)) % classes);
                any = true;
            }
        if (!any) {
            const auto s = static_cast<std::size_t>(rng.integer(0, n_sites - 1));
            changed_class[s] = static_cast<int>((site_class[s] + 1) % classes);
        }
    }
    world.changed_map.resize(h * w);
    for (std::size_t p = 0; p < h * w; ++p) world.changed_map[p] = changed_class[owner[p]];
    world.change_doy = static_cast<int>(rng.integer(120, 240));

    world.base = Tensor<double>(Shape{classes, channels});
    world.amplitude = Tensor<double>(Shape{classes, channels});
    world.peak_doy.resize(classes);
    for (std::size_t k = 0; k < classes; ++k) {
        for (std::size_t c = 0; c < channels; ++c) {
            double a = rng.uniform(0.03, 0.15);
            if (c == 0 && channels > 1) a = -a;
            else if (c + 1 < channels) a *= rng.bernoulli(0.5) ? 1.0 : -1.0;
            world.amplitude[k * channels + c] = a;
            world.base[k * channels + c] = rng.uniform(std::abs(a) + 0.05, 0.8 - std::abs(a));
        }
        world.peak_doy[k] = rng.uniform(1.0, kYear);
    }
    auto tex = value_noise(h, w, 4.0, rng);
    world.texture = Tensor<double>(Shape{h, w});
    for (std::size_t p = 0; p < h * w; ++p) world.texture[p] = 1.0 + 0.08 * (tex[p] - 0.5);
    return world;
}

double seasonal_phase(double peak_doy, double lat) { return peak_doy - kYear / 4.0 + (lat < 0.0 ? kYear / 2.0 : 0.0); }

double class_reflectance(const World& world, std::size_t k, std::size_t band, double doy, double lat) {
    const double phase = seasonal_phase(world.peak_doy.at(k), lat);
    const std::size_t i = k * world.channels + band;
    return world.base[i] + world.amplitude[i] * std::sin(2.0 * std::numbers::pi * (doy - phase) / kYear);
}

RenderedSeries render_timeseries(const World& world, const std::vector<int>& doy, LonLat where, std::uint64_t seed) {
    const std::size_t T = doy.size(), C = world.channels, H = world.h, W = world.w, HW = H * W;
    RenderedSeries out;
    out.clear = Tensor<float>(Shape{T, C, H, W});
    out.aux = Tensor<float>(Shape{T, kAuxChannels, H, W});
    out.labels = Tensor<float>(Shape{T, H, W});
    std::vector<double> refl(C * world.classes);
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t k = 0; k < world.classes; ++k)
            for (std::size_t c = 0; c < C; ++c) refl[k * C + c] = class_reflectance(world, k, c, doy[t], where.lat);
        // Speckle depends only on (seed, date) so a date renders identically in any sequence.
        Rng speckle(derive_seed(seed, static_cast<std::uint64_t>(doy[t] + 1000)));
        const auto& cmap = doy[t] >= world.change_doy ? world.changed_map : world.class_map;
        for (std::size_t p = 0; p < HW; ++p) {
            const auto k = static_cast<std::size_t>(cmap[p]);
            double mean = 0.0;
            for (std::size_t c = 0; c < C; ++c) {
                const double v = std::clamp(refl[k * C + c] * world.texture[p], 0.0, 1.0);
                out.clear[(t * C + c) * HW + p] = static_cast<float>(v);
                mean += v;
            }
            mean /= static_cast<double>(C);
            const double first = out.clear[(t * C) * HW + p], last = out.clear[(t * C + C - 1) * HW + p];
            const double a0 = 0.5 * mean + 0.5 * last;
            const double a1 = 0.5 + 0.5 * (last - first);
            out.aux[(t * kAuxChannels + 0) * HW + p] = static_cast<float>(a0 * (1.0 + 0.05 * speckle.normal()));
            out.aux[(t * kAuxChannels + 1) * HW + p] = static_cast<float>(a1 * (1.0 + 0.05 * speckle.normal()));
            out.labels[t * HW + p] = static_cast<float>(k);
        }
    }
    return out;
}

double draw_coverage(Rng& rng, double cloud_density) {
    if (cloud_density <= 0.0) return 0.0;
    if (cloud_density >= 1.0) return 1.0;
    std::gamma_distribution<double> ga(kBetaConcentration * cloud_density, 1.0);
    std::gamma_distribution<double> gb(kBetaConcentration * (1.0 - cloud_density), 1.0);
    const double a = ga(rng.engine()), b = gb(rng.engine());
    return a + b > 0.0 ? a / (a + b) : cloud_density;
}

namespace {

struct FrameMasks {
    std::vector<float> cloud, shadow, alpha;
    double cloud_frac = 0.0, shadow_frac = 0.0;
};

FrameMasks make_masks(std::size_t h, std::size_t w, double coverage, Rng& rng) {
    const std::size_t n = h * w;
    FrameMasks m;
    m.cloud.assign(n, 0.0f);
    m.shadow.assign(n, 0.0f);
    m.alpha.assign(n, 0.0f);
    auto coarse = value_noise(h, w, 6.0, rng);
    auto fine = value_noise(h, w, 3.0, rng);
    const int dy = static_cast<int>(rng.integer(1, 3)) * (rng.bernoulli(0.5) ? 1 : -1);
    const int dx = static_cast<int>(rng.integer(1, 3)) * (rng.bernoulli(0.5) ? 1 : -1);
    const auto n_cloud = static_cast<std::size_t>(std::llround(coverage * static_cast<double>(n)));
    if (n_cloud == 0) return m;

    std::vector<double> noise(n);
    for (std::size_t p = 0; p < n; ++p) noise[p] = 0.65 * coarse[p] + 0.35 * fine[p];
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return noise[a] > noise[b]; });
    const double thr = noise[order[n_cloud - 1]];
    for (std::size_t i = 0; i < n_cloud; ++i) {
        const std::size_t p = order[i];
        m.cloud[p] = 1.0f;
        m.alpha[p] = static_cast<float>(std::min(1.0, 0.75 + 5.0 * (noise[p] - thr)));
    }
    std::size_t n_shadow = 0;
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            const long sy = static_cast<long>(y) - dy, sx = static_cast<long>(x) - dx;
            if (sy < 0 || sx < 0 || sy >= static_cast<long>(h) || sx >= static_cast<long>(w)) continue;
            const std::size_t p = y * w + x;
            if (m.cloud[static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)] > 0.0f && m.cloud[p] == 0.0f) {
                m.shadow[p] = 1.0f;
                ++n_shadow;
            }
        }
    m.cloud_frac = static_cast<double>(n_cloud) / static_cast<double>(n);
    m.shadow_frac = static_cast<double>(n_shadow) / static_cast<double>(n);
    return m;
}

void apply_masks(float* frame, std::size_t channels, std::size_t n, const FrameMasks& m) {
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t p = 0; p < n; ++p) {
            float& v = frame[c * n + p];
            if (m.cloud[p] > 0.0f) v = (1.0f - m.alpha[p]) * v + m.alpha[p];
            else if (m.shadow[p] > 0.0f) v *= 0.45f;
        }
}

// Masks of one optical acquisition; replayable from the stream seed and date.
FrameMasks acquisition_masks(const AcquisitionStream& s, int doy, bool* clear_day = nullptr) {
    Rng rng(derive_seed(s.seed, 0x10000 + static_cast<std::uint64_t>(doy)));
    const bool clear = rng.bernoulli(s.clear_probability);
    const double c = clear ? 0.0 : draw_coverage(rng, s.cloud_density);
    if (clear_day) *clear_day = clear;
    return make_masks(s.world.h, s.world.w, c, rng);
}

}  // namespace

Contamination contaminate(const Tensor<float>& frames, std::uint64_t seed, double cloud_density) {
    if (frames.rank() != 4) throw ShapeError("contaminate expects [T, C, H, W], got " + shape_str(frames.shape()));
    if (!(cloud_density >= 0.0 && cloud_density <= 1.0))
        throw std::invalid_argument("cloud density " + std::to_string(cloud_density) + " outside [0, 1]");
    const std::size_t T = frames.dim(0), C = frames.dim(1), H = frames.dim(2), W = frames.dim(3), HW = H * W;
    Contamination out;
    out.frames = frames;
    out.cloud_mask = Tensor<float>(Shape{T, H, W});
    out.shadow_mask = Tensor<float>(Shape{T, H, W});
    for (std::size_t t = 0; t < T; ++t) {
        Rng rng(derive_seed(seed, t));
        const double c = draw_coverage(rng, cloud_density);
        const auto m = make_masks(H, W, c, rng);
        apply_masks(out.frames.data().data() + t * C * HW, C, HW, m);
        std::copy(m.cloud.begin(), m.cloud.end(), out.cloud_mask.data().begin() + t * HW);
        std::copy(m.shadow.begin(), m.shadow.end(), out.shadow_mask.data().begin() + t * HW);
        out.cloud_frac.push_back(m.cloud_frac);
        out.shadow_frac.push_back(m.shadow_frac);
    }
    return out;
}

AcquisitionStream simulate_stream(const StreamConfig& cfg, std::uint64_t seed) {
    if (cfg.optical_revisit <= 0 || cfg.aux_revisit <= 0) throw std::invalid_argument("revisit intervals must be positive");
    AcquisitionStream s;
    s.seed = seed;
    s.cloud_density = cfg.cloud_density;
    s.clear_probability = cfg.clear_probability;
    s.world = generate_world(derive_seed(seed, 1), cfg.h, cfg.w, cfg.channels, cfg.classes);
    Rng rng(derive_seed(seed, 2));
    s.lonlat = {rng.uniform(-180.0, 180.0), rng.uniform(-60.0, 70.0)};

    for (int d = static_cast<int>(rng.integer(1, cfg.optical_revisit)); d <= 365; d += cfg.optical_revisit) {
        s.optical_doy.push_back(d);
        const auto m = acquisition_masks(s, d);
        s.cloud_frac.push_back(m.cloud_frac);
        s.shadow_frac.push_back(m.shadow_frac);
    }

    // Aux availability uses its own stream: independent of cloud state.
    Rng aux_rng(derive_seed(seed, 3));
    int outage_start = 1000;
    if (aux_rng.bernoulli(cfg.outage_probability)) outage_start = static_cast<int>(aux_rng.integer(1, 365));
    for (int d = static_cast<int>(aux_rng.integer(1, cfg.aux_revisit)); d <= 365; d += cfg.aux_revisit) {
        s.aux_doy.push_back(d);
        const bool in_outage = d >= outage_start && d < outage_start + cfg.outage_days;
        s.aux_available.push_back(!in_outage && aux_rng.bernoulli(cfg.aux_availability) ? 1 : 0);
    }
    return s;
}

std::string to_string(DatasetMode m) { return m == DatasetMode::ts_s12 ? "ts_s12" : "ts_s12cr"; }

DatasetMode dataset_mode_from_string(const std::string& s) {
    if (s == "ts_s12") return DatasetMode::ts_s12;
    if (s == "ts_s12cr") return DatasetMode::ts_s12cr;
    throw std::invalid_argument("unknown dataset mode '" + s + "' (expected ts_s12|ts_s12cr)");
}

bool passes_filters(double cloud, double shadow) { return cloud < kMaxCloud && shadow < kMaxShadow; }

int match_within(int doy, const std::vector<int>& candidates, const std::vector<std::uint8_t>* usable) {
    int best = -1;
    int best_gap = kMatchDays + 1;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        if (usable && !(*usable)[i]) continue;
        const int gap = std::abs(candidates[i] - doy);
        if (gap < best_gap) {
            best_gap = gap;
            best = static_cast<int>(i);
        }
    }
    return best;
}

BuildResult build_dataset(const AcquisitionStream& stream, DatasetMode mode) {
    BuildResult r;
    std::vector<std::size_t> refs;
    std::vector<int> aux_idx, contam_idx;
    std::vector<std::uint8_t> cloudy(stream.optical_doy.size());
    for (std::size_t i = 0; i < cloudy.size(); ++i)
        cloudy[i] = passes_filters(stream.cloud_frac[i], stream.shadow_frac[i]) ? 0 : 1;

    for (std::size_t i = 0; i < stream.optical_doy.size(); ++i) {
        if (cloudy[i]) continue;
        const int doy = stream.optical_doy[i];
        const int a = match_within(doy, stream.aux_doy, &stream.aux_available);
        if (a < 0) continue;
        int c = -1;
        if (mode == DatasetMode::ts_s12cr) {
            c = match_within(doy, stream.optical_doy, &cloudy);
            if (c < 0) continue;
        }
        refs.push_back(i);
        aux_idx.push_back(a);
        contam_idx.push_back(c);
    }
    if (refs.size() < kMinSequence) {
        r.reason = "only " + std::to_string(refs.size()) + " frames survive the filters (need " +
                   std::to_string(kMinSequence) + ")";
        return r;
    }

    auto& s = r.sample;
    const auto& world = stream.world;
    const std::size_t C = world.channels, HW = world.h * world.w;
    s.lonlat = stream.lonlat;
    s.classes = world.classes;
    for (std::size_t c = 0; c < C; ++c) s.band_names.push_back("band" + std::to_string(c));
    for (std::size_t j = 0; j < refs.size(); ++j) {
        s.doy.push_back(stream.optical_doy[refs[j]]);
        s.aux_doy.push_back(stream.aux_doy[static_cast<std::size_t>(aux_idx[j])]);
        s.cloud_frac.push_back(stream.cloud_frac[refs[j]]);
        s.shadow_frac.push_back(stream.shadow_frac[refs[j]]);
    }
    const std::uint64_t render_seed = derive_seed(stream.seed, 4);
    auto ref = render_timeseries(world, s.doy, s.lonlat, render_seed);
    // Reference frames are shown as acquired, including any residual cloud under the threshold.
    for (std::size_t j = 0; j < refs.size(); ++j)
        apply_masks(ref.clear.data().data() + j * C * HW, C, HW, acquisition_masks(stream, s.doy[j]));
    s.x_clear = std::move(ref.clear);
    s.labels = std::move(ref.labels);
    s.aux = render_timeseries(world, s.aux_doy, s.lonlat, render_seed).aux;

    if (mode == DatasetMode::ts_s12cr) {
        for (int c : contam_idx) {
            const auto ci = static_cast<std::size_t>(c);
            s.contam_doy.push_back(stream.optical_doy[ci]);
            s.contam_cloud_frac.push_back(stream.cloud_frac[ci]);
            s.contam_shadow_frac.push_back(stream.shadow_frac[ci]);
        }
        auto cr = render_timeseries(world, s.contam_doy, s.lonlat, render_seed);
        const std::size_t T = refs.size();
        s.cloud_mask = Tensor<float>(Shape{T, world.h, world.w});
        s.shadow_mask = Tensor<float>(Shape{T, world.h, world.w});
        for (std::size_t j = 0; j < T; ++j) {
            const auto m = acquisition_masks(stream, s.contam_doy[j]);
            apply_masks(cr.clear.data().data() + j * C * HW, C, HW, m);
            std::copy(m.cloud.begin(), m.cloud.end(), s.cloud_mask.data().begin() + j * HW);
            std::copy(m.shadow.begin(), m.shadow.end(), s.shadow_mask.data().begin() + j * HW);
        }
        s.x_contam = std::move(cr.clear);
    }
    return r;
}

std::string filter_violation(const TimeSeriesSample& s, DatasetMode mode) {
    const std::size_t T = s.frames();
    if (T < kMinSequence) return "sequence length " + std::to_string(T) + " < " + std::to_string(kMinSequence);
    if (s.x_clear.rank() != 4 || s.x_clear.dim(0) != T) return "clear frames do not match the date list";
    if (s.aux.rank() != 4 || s.aux.dim(0) != T) return "aux frames do not match the date list";
    if (s.cloud_frac.size() != T || s.shadow_frac.size() != T || s.aux_doy.size() != T) return "per-frame lists truncated";
    for (std::size_t t = 0; t < T; ++t) {
        if (t > 0 && s.doy[t] <= s.doy[t - 1]) return "dates not strictly increasing at frame " + std::to_string(t);
        if (!(s.cloud_frac[t] < kMaxCloud)) return "cloud " + std::to_string(s.cloud_frac[t]) + " at frame " + std::to_string(t);
        if (!(s.shadow_frac[t] < kMaxShadow))
            return "shadow " + std::to_string(s.shadow_frac[t]) + " at frame " + std::to_string(t);
        if (std::abs(s.aux_doy[t] - s.doy[t]) > kMatchDays) return "aux date off by more than 3 days at frame " + std::to_string(t);
    }
    for (float v : s.x_clear.data())
        if (!(v >= 0.0f && v <= 1.0f)) return "reflectance outside [0, 1]";
    if (mode == DatasetMode::ts_s12cr) {
        if (s.contam_doy.size() != T || s.x_contam.rank() != 4 || s.x_contam.dim(0) != T) return "missing contaminated frames";
        for (std::size_t t = 0; t < T; ++t) {
            if (std::abs(s.contam_doy[t] - s.doy[t]) > kMatchDays || s.contam_doy[t] == s.doy[t])
                return "contaminated date not matched at frame " + std::to_string(t);
        }
    }
    return {};
}

double mean_contam_cloud(double cloud_density, std::uint64_t seed, std::size_t rois, std::size_t h, std::size_t w) {
    double acc = 0.0;
    std::size_t n = 0;
    StreamConfig cfg;
    cfg.h = h;
    cfg.w = w;
    cfg.cloud_density = cloud_density;
    for (std::size_t r = 0; r < rois; ++r) {
        const auto stream = simulate_stream(cfg, derive_seed(seed, r));
        // Only fractions are needed: replicate the matching without rendering.
        std::vector<std::uint8_t> cloudy(stream.optical_doy.size());
        for (std::size_t i = 0; i < cloudy.size(); ++i)
            cloudy[i] = passes_filters(stream.cloud_frac[i], stream.shadow_frac[i]) ? 0 : 1;
        for (std::size_t i = 0; i < cloudy.size(); ++i) {
            if (cloudy[i]) continue;
            if (match_within(stream.optical_doy[i], stream.aux_doy, &stream.aux_available) < 0) continue;
            const int c = match_within(stream.optical_doy[i], stream.optical_doy, &cloudy);
            if (c < 0) continue;
            acc += stream.cloud_frac[static_cast<std::size_t>(c)];
            ++n;
        }
    }
    return n ? acc / static_cast<double>(n) : 0.0;
}

double calibrate_cloud_density(double target, std::uint64_t seed, std::size_t rois, std::size_t h, std::size_t w) {
    if (!(target > kMaxCloud && target < 1.0))
        throw std::invalid_argument("calibration target must lie in (0.15, 1)");
    double lo = 0.0, hi = 1.0;
    for (int it = 0; it < 16; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (mean_contam_cloud(mid, seed, rois, h, w) < target) lo = mid;
        else hi = mid;
    }
    return 0.5 * (lo + hi);
}

namespace {

const char kMagic[4] = {'U', 'N', 'T', 'S'};

}  // namespace

void write_sample(const std::filesystem::path& path, const TimeSeriesSample& s) {
    json m;
    m["id"] = s.id;
    m["doy"] = s.doy;
    m["aux_doy"] = s.aux_doy;
    m["contam_doy"] = s.contam_doy;
    m["lonlat"] = {s.lonlat.lon, s.lonlat.lat};
    m["cloud_frac"] = s.cloud_frac;
    m["shadow_frac"] = s.shadow_frac;
    m["contam_cloud_frac"] = s.contam_cloud_frac;
    m["contam_shadow_frac"] = s.contam_shadow_frac;
    m["band_names"] = s.band_names;
    m["aux_band_names"] = {"aux0", "aux1"};
    m["classes"] = s.classes;
    std::vector<std::pair<std::string, const Tensor<float>*>> tensors{
        {"x_clear", &s.x_clear}, {"x_contam", &s.x_contam}, {"cloud_mask", &s.cloud_mask},
        {"shadow_mask", &s.shadow_mask}, {"aux", &s.aux}, {"labels", &s.labels}};
    json list = json::array();
    for (const auto& [name, t] : tensors)
        if (!t->empty()) list.push_back({{"name", name}, {"shape", t->shape()}});
    m["tensors"] = list;

    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    os.write(kMagic, 4);
    write_u32(os, kSampleFormatVersion);
    write_json_block(os, m.dump());
    for (const auto& [name, t] : tensors)
        if (!t->empty()) write_tensor(os, *t);
    if (!os) throw std::runtime_error("write failed for " + path.string());
}

TimeSeriesSample read_sample(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    char magic[4];
    read_exact(is, magic, 4, "sample magic");
    if (!std::equal(magic, magic + 4, kMagic)) throw FormatError(path.string() + ": bad magic, not a sample container");
    const auto version = read_u32(is, "sample version");
    if (version != kSampleFormatVersion)
        throw FormatError(path.string() + ": unsupported sample version " + std::to_string(version));
    json m;
    try {
        m = json::parse(read_json_block(is, "sample manifest"));
    } catch (const json::parse_error& e) {
        throw FormatError(path.string() + ": corrupt manifest: " + e.what());
    }
    TimeSeriesSample s;
    try {
        s.id = m.at("id").get<std::string>();
        s.doy = m.at("doy").get<std::vector<int>>();
        s.aux_doy = m.at("aux_doy").get<std::vector<int>>();
        s.contam_doy = m.at("contam_doy").get<std::vector<int>>();
        s.lonlat = {m.at("lonlat").at(0).get<double>(), m.at("lonlat").at(1).get<double>()};
        s.cloud_frac = m.at("cloud_frac").get<std::vector<double>>();
        s.shadow_frac = m.at("shadow_frac").get<std::vector<double>>();
        s.contam_cloud_frac = m.at("contam_cloud_frac").get<std::vector<double>>();
        s.contam_shadow_frac = m.at("contam_shadow_frac").get<std::vector<double>>();
        s.band_names = m.at("band_names").get<std::vector<std::string>>();
        s.classes = m.at("classes").get<std::size_t>();
        for (const auto& entry : m.at("tensors")) {
            const auto name = entry.at("name").get<std::string>();
            const auto shape = entry.at("shape").get<Shape>();
            auto t = read_tensor<float>(is);
            if (t.shape() != shape)
                throw FormatError(path.string() + ": tensor '" + name + "' has shape " + shape_str(t.shape()) +
                                  ", manifest says " + shape_str(shape));
            if (name == "x_clear") s.x_clear = std::move(t);
            else if (name == "x_contam") s.x_contam = std::move(t);
            else if (name == "cloud_mask") s.cloud_mask = std::move(t);
            else if (name == "shadow_mask") s.shadow_mask = std::move(t);
            else if (name == "aux") s.aux = std::move(t);
            else if (name == "labels") s.labels = std::move(t);
            else throw FormatError(path.string() + ": unknown tensor '" + name + "'");
        }
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": malformed manifest: " + e.what());
    }
    return s;
}

namespace {

double default_density(const SynthConfig& cfg) {
    if (cfg.cloud_density >= 0.0) return cfg.cloud_density;
    if (cfg.mode == DatasetMode::ts_s12) return 0.5;
    return calibrate_cloud_density(0.84, derive_seed(cfg.seed, 99), 24, cfg.h, cfg.w);
}

StreamConfig stream_config(const SynthConfig& cfg, double density) {
    StreamConfig sc;
    sc.h = cfg.h;
    sc.w = cfg.w;
    sc.channels = cfg.channels;
    sc.classes = cfg.classes;
    sc.cloud_density = density;
    return sc;
}

}  // namespace

std::vector<TimeSeriesSample> synthesize_samples(const SynthConfig& cfg, double* density_used) {
    const double density = default_density(cfg);
    if (density_used) *density_used = density;
    const auto sc = stream_config(cfg, density);
    std::vector<TimeSeriesSample> out;
    for (std::size_t r = 0; r < cfg.rois; ++r) {
        auto built = build_dataset(simulate_stream(sc, derive_seed(cfg.seed, r)), cfg.mode);
        if (built.sample.empty()) continue;
        built.sample.id = "roi" + std::to_string(r);
        out.push_back(std::move(built.sample));
    }
    return out;
}

SynthSummary synthesize(const SynthConfig& cfg, const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir);
    SynthSummary summary;
    summary.cloud_density = default_density(cfg);
    const auto sc = stream_config(cfg, summary.cloud_density);
    json dropped = json::array();
    for (std::size_t r = 0; r < cfg.rois; ++r) {
        auto built = build_dataset(simulate_stream(sc, derive_seed(cfg.seed, r)), cfg.mode);
        if (built.sample.empty()) {
            ++summary.dropped;
            dropped.push_back({{"roi", r}, {"reason", built.reason}});
            continue;
        }
        built.sample.id = "roi" + std::to_string(r);
        std::ostringstream name;
        name << "sample_" << std::setw(4) << std::setfill('0') << r << ".unts";
        write_sample(out_dir / name.str(), built.sample);
        summary.files.push_back(name.str());
        ++summary.emitted;
    }
    json index;
    index["mode"] = to_string(cfg.mode);
    index["seed"] = cfg.seed;
    index["rois"] = cfg.rois;
    index["size"] = {cfg.h, cfg.w};
    index["channels"] = cfg.channels;
    index["classes"] = cfg.classes;
    index["cloud_density"] = summary.cloud_density;
    index["samples"] = summary.files;
    index["dropped"] = dropped;
    std::ofstream os(out_dir / "index.json");
    os << index.dump(2) << "\n";
    return summary;
}

std::vector<TimeSeriesSample> load_dataset(const std::filesystem::path& dir) {
    std::ifstream is(dir / "index.json");
    if (!is) throw std::runtime_error("no index.json in " + dir.string());
    json index;
    try {
        index = json::parse(is);
    } catch (const json::parse_error& e) {
        throw FormatError((dir / "index.json").string() + ": " + e.what());
    }
    std::vector<TimeSeriesSample> out;
    for (const auto& f : index.at("samples")) out.push_back(read_sample(dir / f.get<std::string>()));
    return out;
}

}  // namespace tsflow
