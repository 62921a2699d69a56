#include "tsflow/layer_checks.hpp"

#include <algorithm>
#include <functional>
#include <sstream>

#include "tsflow/attention.hpp"
#include "tsflow/conditioning.hpp"
#include "tsflow/embeddings.hpp"
#include "tsflow/flow_matching.hpp"
#include "tsflow/model.hpp"
#include "tsflow/ops.hpp"
#include "tsflow/rng.hpp"

namespace tsflow {

namespace {

using namespace ops;
using V = Var<double>;
using T = Tensor<double>;

constexpr std::size_t kModelCoords = 6;

V param(Rng& rng, const Shape& s, double scale = 0.5) { return V(rng.normal_tensor<double>(s, scale), true); }

// Random linear functional of the output so every output entry matters.
V project(const V& out, const T& r) { return mean(mul(out, constant(r))); }

std::string shape_of(std::initializer_list<std::pair<const char*, std::size_t>> dims) {
    std::ostringstream os;
    bool first = true;
    for (const auto& [k, v] : dims) {
        os << (first ? "" : " ") << k << "=" << v;
        first = false;
    }
    return os.str();
}

ModelConfig check_model(std::size_t c) {
    ModelConfig m;
    m.width = 8;
    m.depth = 1;
    m.heads = 2;
    m.patch = {2, 2};
    m.image_h = c == 1 ? 6 : 4;
    m.image_w = c == 2 ? 6 : 4;
    m.frames = c == 0 ? 2 : 3;
    m.channels = 2;
    m.cond_channels = 4;
    m.aux_channels = 2;
    m.fusion = c == 1 ? Fusion::crossattn : c == 2 ? Fusion::concat : Fusion::acor;
    return m;
}

ConditionInput<double> random_condition(const ModelConfig& m, std::size_t batch, Rng& rng) {
    ConditionInput<double> in;
    in.cond = rng.uniform_tensor<double>({batch, m.cond_frames(), m.cond_channels, m.image_h, m.image_w}, 0.0, 1.0);
    in.aux = rng.uniform_tensor<double>({batch, m.cond_frames(), m.aux_channels, m.image_h, m.image_w}, 0.0, 1.0);
    for (std::size_t b = 0; b < batch; ++b) {
        std::vector<int> d;
        for (std::size_t t = 0; t < m.frames; ++t) d.push_back(static_cast<int>(20 + 37 * t + 11 * b));
        in.doy.push_back(d);
        in.lonlat.push_back({10.0 + 5.0 * static_cast<double>(b), -20.0 + 3.0 * static_cast<double>(b)});
    }
    return in;
}

void randomize(ParamStore<double>& store, Rng& rng) {
    for (auto& v : store.vars()) v.mutable_value() = rng.normal_tensor<double>(v.shape(), 0.2);
}

GradCheckResult check_all(const std::function<V()>& f, std::vector<V>& params, std::uint64_t seed,
                          std::optional<std::size_t> coords = std::nullopt) {
    return finite_difference_check(f, params, 1e-4, coords, seed);
}

LayerCheck patch_embed_case(std::size_t c, Rng& rng) {
    const std::size_t n = 1 + c, ch = 1 + c, ph = 2, pw = c == 2 ? 3 : 2, H = 2 * ph, W = (c == 1 ? 3 : 2) * pw, d = 4 + c;
    std::vector<V> p{param(rng, {n, ch, H, W}), param(rng, {ph * pw * ch, d}), param(rng, {d})};
    const T r = rng.normal_tensor<double>({n, (H / ph) * (W / pw), d});
    auto f = [&] { return project(patch_embed_tokens(p[0], PatchSize{ph, pw}, p[1], p[2]), r); };
    return {"patch_embed", shape_of({{"N", n}, {"C", ch}, {"H", H}, {"W", W}, {"d", d}}), check_all(f, p, c)};
}

LayerCheck acor_spatial_case(std::size_t c, Rng& rng) {
    const std::size_t n = 1 + c % 2, nh = 2 + c, nw = c == 1 ? 2 : 3, d = 8 * (1 + c / 2);
    std::vector<V> p{param(rng, {n, nh * nw, d}), param(rng, {n, nh * nw, d}), param(rng, {kAcorKernel, kAcorKernel, d, 2 * d}, 0.2),
                     param(rng, {2 * d}, 0.2)};
    const T r = rng.normal_tensor<double>({n, nh * nw, d});
    auto f = [&] { return project(acor_spatial(p[0], p[1], nh, nw, AcorParams<double>{p[2], p[3]}), r); };
    return {"acor_spatial", shape_of({{"N", n}, {"n_h", nh}, {"n_w", nw}, {"d", d}}), check_all(f, p, c, 40)};
}

LayerCheck acor_temporal_case(std::size_t c, Rng& rng) {
    const std::size_t n = 1 + c, L = 2 + c, d = 8 * (1 + c / 2);
    std::vector<V> p{param(rng, {n, L, d}), param(rng, {n, L, d}), param(rng, {kAcorKernel, d, 2 * d}, 0.2), param(rng, {2 * d}, 0.2)};
    const T r = rng.normal_tensor<double>({n, L, d});
    auto f = [&] { return project(acor_temporal(p[0], p[1], AcorParams<double>{p[2], p[3]}), r); };
    return {"acor_temporal", shape_of({{"N", n}, {"T", L}, {"d", d}}), check_all(f, p, c, 40)};
}

LayerCheck adaln_case(std::size_t c, Rng& rng) {
    const std::size_t B = 1 + c % 2, R = 2, L = 2 + c, d = 4 + 2 * c;
    // Case 0: [B, M, d] with one code per sample; case 1: [B, R, L, d]; case 2: per-position codes.
    const Shape feat = c == 0 ? Shape{B, L, d} : Shape{B, R, L, d};
    const Shape code = c == 2 ? Shape{B, L, d} : Shape{B, d};
    std::vector<V> p{param(rng, feat), param(rng, code), param(rng, {d, 3 * d}), param(rng, {3 * d})};
    const T r1 = rng.normal_tensor<double>(feat), r2 = rng.normal_tensor<double>(feat);
    auto f = [&] {
        const auto m = adaln_modulate(layer_norm(p[0]), p[1], AdaLnParams<double>{p[2], p[3]});
        return add(project(m.modulated, r1), project(mul(m.gate, constant(T(feat, 1.0))), r2));
    };
    return {"adaln", shape_of({{"B", B}, {"L", L}, {"d", d}, {"per_position", c == 2}}), check_all(f, p, c)};
}

LayerCheck stm_attention_case(std::size_t c, Rng& rng) {
    const std::size_t n = 1 + c % 2, nh = 2, nw = 1 + c, L = nh * nw, d = 4 * (1 + c / 2), heads = 2;
    const T m_pos = manhattan_bias_spatial<double>(nh, nw);
    std::vector<V> p{param(rng, {n, L, d}), param(rng, {1}), param(rng, {1}), param(rng, {n, L, L}),
                     param(rng, {d, 3 * d}), param(rng, {3 * d}), param(rng, {d, d}), param(rng, {d})};
    const T r = rng.normal_tensor<double>({n, L, d});
    auto f = [&] {
        const auto bias = stm_bias(p[1], p[2], m_pos, p[3]);
        return project(biased_mhsa(p[0], bias, heads, AttentionParams<double>{p[4], p[5], p[6], p[7]}), r);
    };
    return {"stm_attention", shape_of({{"N", n}, {"L", L}, {"d", d}, {"heads", heads}}), check_all(f, p, c)};
}

std::string model_shape(const ModelConfig& m, std::size_t batch) {
    return shape_of({{"B", batch}, {"T", m.frames}, {"H", m.image_h}, {"W", m.image_w}, {"d", m.width}}) + " fusion=" +
           to_string(m.fusion) + (m.forecast ? " forecast" : "");
}

LayerCheck full_block_case(std::size_t c, Rng& rng) {
    const auto mc = check_model(c);
    const std::size_t B = 1 + c % 2;
    FlowTransformer<double> model(mc, 11 + c);
    randomize(model.params(), rng);
    const auto in = random_condition(mc, B, rng);
    std::vector<V> p;
    for (const auto& name : model.params().names())
        if (name.rfind("blocks.", 0) == 0 || name.rfind("cond_embed", 0) == 0) p.push_back(model.params().get(name));
    p.push_back(param(rng, {B, mc.frames, mc.tokens_per_frame(), mc.width}));
    p.push_back(param(rng, {B, mc.width}));
    const T r = rng.normal_tensor<double>({B, mc.frames, mc.tokens_per_frame(), mc.width});
    auto f = [&] {
        const auto ctx = model.prepare(in);
        return project(model.run_blocks(ctx, p[p.size() - 2], p.back()), r);
    };
    return {"full_block", model_shape(mc, B), check_all(f, p, c, kModelCoords)};
}

LayerCheck decoder_case(std::size_t c, Rng& rng) {
    auto mc = check_model(c);
    const std::size_t B = 1 + c % 2;
    FlowTransformer<double> model(mc, 21 + c);
    randomize(model.params(), rng);
    const auto in = random_condition(mc, B, rng);
    std::vector<V> p;
    for (const auto& name : model.params().names())
        if (name.rfind("final.", 0) == 0 || name.rfind("state_embed", 0) == 0) p.push_back(model.params().get(name));
    p.push_back(param(rng, {B, mc.frames, mc.channels, mc.image_h, mc.image_w}));
    const std::vector<double> t{0.3, 0.8};
    const T r = rng.normal_tensor<double>({B, mc.output_frames(), mc.channels, mc.image_h, mc.image_w});
    auto f = [&] {
        const auto ctx = model.prepare(in);
        return project(model.forward(ctx, p.back(), std::span<const double>(t.data(), B)), r);
    };
    return {"decoder", model_shape(mc, B), check_all(f, p, c, kModelCoords)};
}

LayerCheck fm_loss_case(std::size_t c, Rng& rng) {
    auto mc = check_model(c);
    if (c == 2) {
        // Forecasting layout: history stream carries the target bands.
        mc.fusion = Fusion::acor;
        mc.forecast = true;
        mc.history = mc.frames;
        mc.cond_channels = mc.channels;
    }
    const std::size_t B = 2;
    FlowTransformer<double> model(mc, 31 + c);
    randomize(model.params(), rng);
    const auto in = random_condition(mc, B, rng);
    const T x0 = rng.normal_tensor<double>({B, mc.frames, mc.channels, mc.image_h, mc.image_w});
    const T x1 = rng.uniform_tensor<double>({B, mc.frames, mc.channels, mc.image_h, mc.image_w}, 0.0, 1.0);
    T history;
    if (mc.forecast) history = rng.uniform_tensor<double>({B, mc.history, mc.channels, mc.image_h, mc.image_w}, 0.0, 1.0);
    std::vector<V> p = model.params().vars();
    auto f = [&] {
        Rng t_rng(99 + c);
        const auto ctx = model.prepare(in);
        return fm_loss(model, ctx, x0, x1, history, t_rng);
    };
    return {"fm_loss", model_shape(mc, B), check_all(f, p, c, kModelCoords)};
}

using CaseFn = LayerCheck (*)(std::size_t, Rng&);

const std::vector<std::pair<std::string, CaseFn>>& registry() {
    static const std::vector<std::pair<std::string, CaseFn>> r{
        {"patch_embed", patch_embed_case},   {"acor_spatial", acor_spatial_case}, {"acor_temporal", acor_temporal_case},
        {"adaln", adaln_case},               {"stm_attention", stm_attention_case}, {"full_block", full_block_case},
        {"decoder", decoder_case},           {"fm_loss", fm_loss_case}};
    return r;
}

}  // namespace

std::vector<std::string> checked_layers() {
    std::vector<std::string> names;
    for (const auto& [n, fn] : registry()) names.push_back(n);
    return names;
}

std::vector<LayerCheck> run_layer_checks(std::uint64_t seed, std::size_t cases, const std::vector<std::string>& only) {
    for (const auto& o : only) {
        const auto names = checked_layers();
        if (std::find(names.begin(), names.end(), o) == names.end())
            throw std::invalid_argument("unknown layer '" + o + "' for gradient check");
    }
    std::vector<LayerCheck> out;
    const auto& reg = registry();
    for (std::size_t i = 0; i < reg.size(); ++i) {
        const auto& [name, fn] = reg[i];
        if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) continue;
        for (std::size_t c = 0; c < cases; ++c) {
            Rng rng(derive_seed(seed, 16 * i + c));
            out.push_back(fn(c % 3, rng));
        }
    }
    return out;
}

}  // namespace tsflow
