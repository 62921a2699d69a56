#include "tsflow/model.hpp"

#include <cmath>
#include <stdexcept>

#include "tsflow/ops.hpp"
#include "tsflow/rng.hpp"

namespace tsflow {

std::string to_string(Fusion f) {
    switch (f) {
        case Fusion::acor: return "acor";
        case Fusion::concat: return "concat";
        case Fusion::crossattn: return "crossattn";
    }
    return "?";
}

Fusion fusion_from_string(const std::string& s) {
    if (s == "acor") return Fusion::acor;
    if (s == "concat") return Fusion::concat;
    if (s == "crossattn") return Fusion::crossattn;
    throw std::invalid_argument("unknown fusion '" + s + "' (expected acor|concat|crossattn)");
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
    if (width == 0 || width % kNormGroups != 0) fail("width " + std::to_string(width) + " must be divisible by 8");
    if (width % 4 != 0) fail("width must be divisible by 4");
    if (heads == 0 || width % heads != 0) fail("width " + std::to_string(width) + " not divisible by heads " + std::to_string(heads));
    if (depth == 0) fail("depth must be >= 1");
    if (patch.h == 0 || patch.w == 0 || image_h % patch.h || image_w % patch.w)
        fail("image " + std::to_string(image_h) + "x" + std::to_string(image_w) + " not divisible by patch");
    if (frames == 0 || channels == 0 || cond_channels == 0) fail("frames and channel counts must be positive");
    if (use_stm && aux_channels == 0) fail("STM needs at least one auxiliary channel");
    if (forecast) {
        if (history == 0) fail("forecasting needs history >= 1");
        if (fusion != Fusion::crossattn && history != frames)
            fail("frame-paired fusion needs history == frames (got " + std::to_string(history) + " vs " + std::to_string(frames) + ")");
    }
}

namespace {

template <typename Real>
Tensor<Real> xavier(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    return rng.uniform_tensor<Real>({fan_in, fan_out}, -limit, limit);
}

template <typename Real>
Var<Real> broadcast_rows(const Var<Real>& rows, std::size_t batch) {
    // [L, d] -> [B, L, d]
    Shape s{batch, rows.shape()[0], rows.shape()[1]};
    return ops::add(ops::constant(Tensor<Real>(s)), rows);
}

}  // namespace

template <typename Real>
Var<Real> attention_sub_block(const Var<Real>& z, std::size_t batch, const SubBlockInputs<Real>& in,
                              const SubBlockParams<Real>& p, std::size_t heads, Fusion fusion,
                              std::optional<std::pair<std::size_t, std::size_t>> grid) {
    const auto& zs = z.shape();
    if (zs.size() != 3 || batch == 0 || zs[0] % batch != 0) throw ShapeError("sub-block tokens " + shape_str(zs));
    const std::size_t N = zs[0], L = zs[1], d = zs[2], R = N / batch;

    Var<Real> h = z;
    if (in.cond.defined()) {
        if (fusion == Fusion::acor && p.acor.weight.defined()) {
            h = grid ? acor_spatial(z, in.cond, grid->first, grid->second, p.acor) : acor_temporal(z, in.cond, p.acor);
        } else if (fusion == Fusion::crossattn && p.cross.qkv_weight.defined()) {
            h = ops::add(z, cross_mhsa(z, in.cond, heads, p.cross));
        }
    }
    auto x = ops::reshape(h, {batch, R, L, d});
    if (in.meta.defined()) x = ops::add(x, in.meta);
    auto mod = adaln_modulate(ops::layer_norm(x), in.z_fm, p.adaln);
    auto att = biased_mhsa(ops::reshape(mod.modulated, {N, L, d}), in.bias, heads, p.attn);
    auto out = ops::add(ops::mul(mod.gate, ops::reshape(att, {batch, R, L, d})), ops::reshape(z, {batch, R, L, d}));
    if (p.fc1_w.defined()) {
        auto m2 = adaln_modulate(ops::layer_norm(out), in.z_fm, p.ffn_adaln);
        auto f = ops::linear(ops::gelu(ops::linear(m2.modulated, p.fc1_w, p.fc1_b)), p.fc2_w, p.fc2_b);
        out = ops::add(out, ops::mul(m2.gate, f));
    }
    return ops::reshape(out, {N, L, d});
}

template <typename Real>
Var<Real> spatial_block(const Var<Real>& z, const Var<Real>& z_con, const Var<Real>& z_lonlat, const Var<Real>& z_fm,
                        const Var<Real>& m_aux, const ModelConfig& cfg, const SubBlockParams<Real>& p) {
    const std::size_t batch = z_fm.shape()[0];
    const std::size_t d = z.shape().back();
    SubBlockInputs<Real> in;
    in.cond = z_con;
    if (z_lonlat.defined()) in.meta = ops::reshape(z_lonlat, {batch, 1, 1, d});
    in.z_fm = z_fm;
    if (p.w1.defined())
        in.bias = stm_bias(p.w1, p.w2, manhattan_bias_spatial<Real>(cfg.grid_h(), cfg.grid_w()), m_aux);
    return attention_sub_block(z, batch, in, p, cfg.heads, cfg.fusion, std::make_pair(cfg.grid_h(), cfg.grid_w()));
}

template <typename Real>
Var<Real> temporal_block(const Var<Real>& z, const Var<Real>& z_con, const Var<Real>& z_doy, const Var<Real>& z_fm,
                         const Var<Real>& m_aux, const ModelConfig& cfg, const SubBlockParams<Real>& p) {
    const std::size_t batch = z_fm.shape()[0];
    const std::size_t L = z.shape()[1], d = z.shape()[2];
    SubBlockInputs<Real> in;
    in.cond = z_con;
    if (z_doy.defined()) in.meta = ops::reshape(z_doy, {batch, 1, L, d});
    in.z_fm = z_fm;
    if (p.w1.defined()) in.bias = stm_bias(p.w1, p.w2, manhattan_bias_temporal<Real>(L), m_aux);
    return attention_sub_block(z, batch, in, p, cfg.heads, cfg.fusion, std::nullopt);
}

template <typename Real>
FlowTransformer<Real>::FlowTransformer(ModelConfig cfg, std::uint64_t init_seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(init_seed);
    const std::size_t d = cfg_.width;
    const std::size_t state_in = cfg_.patch_dim(cfg_.channels + (cfg_.fusion == Fusion::concat ? cfg_.cond_channels : 0));
    params_.add("state_embed.weight", xavier<Real>(rng, state_in, d));
    params_.add("state_embed.bias", Tensor<Real>(Shape{d}));
    if (cfg_.fusion != Fusion::concat) {
        params_.add("cond_embed.weight", xavier<Real>(rng, cfg_.patch_dim(cfg_.cond_channels), d));
        params_.add("cond_embed.bias", Tensor<Real>(Shape{d}));
    }
    const std::size_t timeline = cfg_.forecast ? cfg_.history + cfg_.frames : cfg_.frames;
    params_.add("pos_spatial", sincos_2d<Real>(cfg_.grid_h(), cfg_.grid_w(), d));
    params_.add("pos_temporal", sincos_1d<Real>(timeline, d));
    if (cfg_.forecast) params_.add("time_con", condition_time_embedding<Real>(cfg_.history, d));

    for (std::size_t i = 0; i < cfg_.depth; ++i) {
        spatial_.push_back(make_sub_block("blocks." + std::to_string(i) + ".spatial", true, rng));
        temporal_.push_back(make_sub_block("blocks." + std::to_string(i) + ".temporal", false, rng));
    }
    auto [fw, fb] = adaln_init<Real>(d, 2);
    params_.add("final.adaln.weight", std::move(fw));
    params_.add("final.adaln.bias", std::move(fb));
    params_.add("final.linear.weight", Tensor<Real>(Shape{d, cfg_.patch_dim(cfg_.channels)}));
    params_.add("final.linear.bias", Tensor<Real>(Shape{cfg_.patch_dim(cfg_.channels)}));

    m_pos_s_ = manhattan_bias_spatial<Real>(cfg_.grid_h(), cfg_.grid_w());
    m_pos_t_ = manhattan_bias_temporal<Real>(cfg_.frames);
    rff_ = rff_frequencies(d, cfg_.rff_seed);
}

template <typename Real>
SubBlockParams<Real> FlowTransformer<Real>::make_sub_block(const std::string& prefix, bool spatial, Rng& rng) {
    const std::size_t d = cfg_.width;
    const bool conditioned = spatial || !cfg_.forecast;  // forecasting drops ACor/STM from temporal sub-blocks
    SubBlockParams<Real> p;
    if (conditioned && cfg_.fusion == Fusion::acor) {
        const Shape ws = spatial ? Shape{kAcorKernel, kAcorKernel, d, 2 * d} : Shape{kAcorKernel, d, 2 * d};
        p.acor.weight = params_.add(prefix + ".acor.weight", Tensor<Real>(ws));
        p.acor.bias = params_.add(prefix + ".acor.bias", Tensor<Real>(Shape{2 * d}));
    }
    if (conditioned && cfg_.fusion == Fusion::crossattn) {
        p.cross.qkv_weight = params_.add(prefix + ".cross.qkv_weight", xavier<Real>(rng, d, 3 * d));
        p.cross.qkv_bias = params_.add(prefix + ".cross.qkv_bias", Tensor<Real>(Shape{3 * d}));
        p.cross.out_weight = params_.add(prefix + ".cross.out_weight", Tensor<Real>(Shape{d, d}));
        p.cross.out_bias = params_.add(prefix + ".cross.out_bias", Tensor<Real>(Shape{d}));
    }
    auto [aw, ab] = adaln_init<Real>(d);
    p.adaln.weight = params_.add(prefix + ".adaln.weight", std::move(aw));
    p.adaln.bias = params_.add(prefix + ".adaln.bias", std::move(ab));
    p.attn.qkv_weight = params_.add(prefix + ".attn.qkv_weight", xavier<Real>(rng, d, 3 * d));
    p.attn.qkv_bias = params_.add(prefix + ".attn.qkv_bias", Tensor<Real>(Shape{3 * d}));
    p.attn.out_weight = params_.add(prefix + ".attn.out_weight", xavier<Real>(rng, d, d));
    p.attn.out_bias = params_.add(prefix + ".attn.out_bias", Tensor<Real>(Shape{d}));
    if (conditioned && cfg_.use_stm) {
        p.w1 = params_.add(prefix + ".stm.w1", Tensor<Real>(Shape{1}));
        p.w2 = params_.add(prefix + ".stm.w2", Tensor<Real>(Shape{1}));
    }
    if (cfg_.ffn) {
        const std::size_t hidden = cfg_.ffn_mult * d;
        auto [fw, fb] = adaln_init<Real>(d);
        p.ffn_adaln.weight = params_.add(prefix + ".ffn.adaln.weight", std::move(fw));
        p.ffn_adaln.bias = params_.add(prefix + ".ffn.adaln.bias", std::move(fb));
        p.fc1_w = params_.add(prefix + ".ffn.fc1.weight", xavier<Real>(rng, d, hidden));
        p.fc1_b = params_.add(prefix + ".ffn.fc1.bias", Tensor<Real>(Shape{hidden}));
        p.fc2_w = params_.add(prefix + ".ffn.fc2.weight", Tensor<Real>(Shape{hidden, d}));
        p.fc2_b = params_.add(prefix + ".ffn.fc2.bias", Tensor<Real>(Shape{d}));
    }
    return p;
}

template <typename Real>
Tensor<Real> FlowTransformer<Real>::flow_time_codes(std::span<const double> t) const {
    const std::size_t d = cfg_.width;
    Tensor<Real> out(Shape{t.size(), d});
    for (std::size_t b = 0; b < t.size(); ++b) {
        const auto e = embed_flow_time<Real>(t[b], d, 1, 1);
        std::copy_n(e.z_fm.data().data(), d, out.data().data() + b * d);
    }
    return out;
}

template <typename Real>
typename FlowTransformer<Real>::Context FlowTransformer<Real>::prepare(const ConditionInput<Real>& in) const {
    const std::size_t B = in.batch();
    const std::size_t Tc = cfg_.cond_frames(), S = cfg_.tokens_per_frame(), d = cfg_.width;
    const std::size_t H = cfg_.image_h, W = cfg_.image_w;
    if (B == 0) throw std::invalid_argument("empty condition batch");
    const Shape expect_cond{B, Tc, cfg_.cond_channels, H, W};
    if (in.cond.shape() != expect_cond) {
        if (in.cond.rank() == 5 && in.cond.dim(2) != cfg_.cond_channels)
            throw std::invalid_argument("condition has " + std::to_string(in.cond.dim(2)) + " channels, task expects C_con=" +
                                        std::to_string(cfg_.cond_channels));
        throw_shape_mismatch("condition input", expect_cond, in.cond.shape());
    }

    Context ctx;
    ctx.batch = B;
    if (cfg_.fusion == Fusion::concat) {
        if (Tc != cfg_.frames) throw std::invalid_argument("concat fusion needs condition and state frame counts to match");
        ctx.concat_cond = in.cond.reshaped({B * Tc, cfg_.cond_channels, H, W});
    } else {
        auto tok = patch_embed_tokens(Var<Real>(in.cond.reshaped({B * Tc, cfg_.cond_channels, H, W})), cfg_.patch,
                                      params_.get("cond_embed.weight"), params_.get("cond_embed.bias"));
        tok = ops::add(tok, params_.get("pos_spatial"));
        auto p_tmp = ops::reshape(ops::slice(params_.get("pos_temporal"), 0, 0, Tc), {Tc, 1, d});
        auto tok4 = ops::add(ops::reshape(tok, {B, Tc, S, d}), p_tmp);
        ctx.cond_s = ops::reshape(tok4, {B * Tc, S, d});
        ctx.cond_t = ops::reshape(ops::permute(tok4, {0, 2, 1, 3}), {B * S, Tc, d});
    }

    if (cfg_.use_stm) {
        const Shape expect_aux{B, Tc, cfg_.aux_channels, H, W};
        if (in.aux.shape() != expect_aux) throw_shape_mismatch("auxiliary input", expect_aux, in.aux.shape());
        Tensor<Real> ms(Shape{B * Tc, S, S});
        Tensor<Real> mt(Shape{B * S, Tc, Tc});
        const std::size_t per = Tc * cfg_.aux_channels * H * W;
        for (std::size_t b = 0; b < B; ++b) {
            Tensor<Real> one(Shape{Tc, cfg_.aux_channels, H, W},
                             std::vector<Real>(in.aux.data().begin() + b * per, in.aux.data().begin() + (b + 1) * per));
            const auto q = downsample_aux(one, cfg_.patch);
            const auto bs = aux_bias_spatial(q);
            std::copy(bs.data().begin(), bs.data().end(), ms.data().begin() + b * Tc * S * S);
            if (!cfg_.forecast) {
                const auto bt = aux_bias_temporal(q);
                std::copy(bt.data().begin(), bt.data().end(), mt.data().begin() + b * S * Tc * Tc);
            }
        }
        ctx.aux_s = Var<Real>(std::move(ms));
        if (!cfg_.forecast) ctx.aux_t = Var<Real>(std::move(mt));
    }

    if (cfg_.use_metadata) {
        if (in.lonlat.size() != B) throw std::invalid_argument("need one lon/lat pair per batch item");
        if (in.doy.size() != B) throw std::invalid_argument(cfg_.forecast ? "missing future DOY list" : "missing DOY list");
        Tensor<Real> ll(Shape{B, d});
        Tensor<Real> dy(Shape{B, cfg_.frames, d});
        for (std::size_t b = 0; b < B; ++b) {
            const auto e = embed_lonlat_with<Real>(in.lonlat[b], d, rff_);
            std::copy_n(e.data().data(), d, ll.data().data() + b * d);
            if (in.doy[b].size() != cfg_.frames)
                throw std::invalid_argument((cfg_.forecast ? "future DOY list has " : "DOY list has ") +
                                            std::to_string(in.doy[b].size()) + " entries, expected " + std::to_string(cfg_.frames));
            const auto e2 = embed_doy<Real>(in.doy[b], d);
            std::copy_n(e2.data().data(), cfg_.frames * d, dy.data().data() + b * cfg_.frames * d);
        }
        ctx.lonlat = Var<Real>(std::move(ll));
        ctx.doy = Var<Real>(std::move(dy));
    }
    return ctx;
}

template <typename Real>
Var<Real> FlowTransformer<Real>::embed_state(const Context& ctx, const Var<Real>& x_t) const {
    const std::size_t B = ctx.batch, T = cfg_.frames, S = cfg_.tokens_per_frame(), d = cfg_.width;
    auto frames = ops::reshape(x_t, {B * T, cfg_.channels, cfg_.image_h, cfg_.image_w});
    if (cfg_.fusion == Fusion::concat) frames = ops::concat<Real>({frames, ops::constant(ctx.concat_cond)}, 1);
    auto tok = patch_embed_tokens(frames, cfg_.patch, params_.get("state_embed.weight"), params_.get("state_embed.bias"));
    tok = ops::add(tok, params_.get("pos_spatial"));
    const std::size_t t0 = cfg_.forecast ? cfg_.history : 0;
    auto p_tmp = ops::reshape(ops::slice(params_.get("pos_temporal"), 0, t0, T), {T, 1, d});
    return ops::add(ops::reshape(tok, {B, T, S, d}), p_tmp);
}

template <typename Real>
Var<Real> FlowTransformer<Real>::run_blocks(const Context& ctx, const Var<Real>& z_in, const Var<Real>& z_fm) const {
    const std::size_t B = ctx.batch, T = cfg_.frames, S = cfg_.tokens_per_frame(), d = cfg_.width;
    if (z_in.shape() != Shape{B, T, S, d}) throw_shape_mismatch("run_blocks", Shape{B, T, S, d}, z_in.shape());
    Var<Real> time_codes;  // forecasting: per-position codes over [history; future]
    if (cfg_.forecast) {
        Tensor<Real> rep(Shape{B, T, d});
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < T; ++i)
                std::copy_n(z_fm.value().data().data() + b * d, d, rep.data().data() + (b * T + i) * d);
        time_codes = ops::concat<Real>({broadcast_rows(params_.get("time_con"), B), Var<Real>(std::move(rep))}, 1);
    }

    Var<Real> z = z_in;
    for (std::size_t i = 0; i < cfg_.depth; ++i) {
        auto zs = spatial_block(ops::reshape(z, {B * T, S, d}), ctx.cond_s, ctx.lonlat, z_fm, ctx.aux_s, cfg_, spatial_[i]);
        z = ops::reshape(zs, {B, T, S, d});
        if (cfg_.forecast && i == 0 && ctx.doy.defined()) z = ops::add(z, ops::reshape(ctx.doy, {B, T, 1, d}));
        auto zt = ops::reshape(ops::permute(z, {0, 2, 1, 3}), {B * S, T, d});
        if (cfg_.forecast) {
            SubBlockInputs<Real> in;
            in.z_fm = time_codes;
            auto seq = ops::concat<Real>({ctx.cond_t, zt}, 1);
            auto out = attention_sub_block(seq, B, in, temporal_[i], cfg_.heads, cfg_.fusion, std::nullopt);
            zt = ops::slice(out, 1, cfg_.history, T);
        } else {
            zt = temporal_block(zt, ctx.cond_t, ctx.doy, z_fm, ctx.aux_t, cfg_, temporal_[i]);
        }
        z = ops::permute(ops::reshape(zt, {B, S, T, d}), {0, 2, 1, 3});
    }
    return z;
}

template <typename Real>
Var<Real> FlowTransformer<Real>::forward(const Context& ctx, const Var<Real>& x_t, std::span<const double> t) const {
    const std::size_t B = ctx.batch, T = cfg_.frames, S = cfg_.tokens_per_frame(), d = cfg_.width;
    const Shape expect{B, T, cfg_.channels, cfg_.image_h, cfg_.image_w};
    if (x_t.shape() != expect) {
        if (x_t.shape().size() == 5 && x_t.shape()[2] != cfg_.channels)
            throw std::invalid_argument("state has " + std::to_string(x_t.shape()[2]) + " channels, task expects C=" +
                                        std::to_string(cfg_.channels));
        throw_shape_mismatch("flow state", expect, x_t.shape());
    }
    if (t.size() != B) throw std::invalid_argument("need one flow time per batch item");
    const Var<Real> z_fm(flow_time_codes(t));

    auto z = run_blocks(ctx, embed_state(ctx, x_t), z_fm);

    const std::size_t To = cfg_.output_frames();
    Var<Real> tokens = z;
    Var<Real> codes = z_fm;
    Shape mod_shape{B, 1, 1, 2 * d};
    if (cfg_.forecast) {
        auto cond4 = ops::reshape(ctx.cond_s, {B, cfg_.history, S, d});
        tokens = ops::concat<Real>({cond4, z}, 1);
        Tensor<Real> rep(Shape{B, T, d});
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < T; ++i)
                std::copy_n(z_fm.value().data().data() + b * d, d, rep.data().data() + (b * T + i) * d);
        codes = ops::concat<Real>({broadcast_rows(params_.get("time_con"), B), Var<Real>(std::move(rep))}, 1);
        mod_shape = Shape{B, To, 1, 2 * d};
    }
    auto mod = ops::reshape(ops::linear(codes, params_.get("final.adaln.weight"), params_.get("final.adaln.bias")), mod_shape);
    auto gamma = ops::slice(mod, 3, 0, d);
    auto beta = ops::slice(mod, 3, d, d);
    auto h = ops::add(ops::mul(gamma, ops::layer_norm(tokens)), beta);
    auto pix = ops::linear(h, params_.get("final.linear.weight"), params_.get("final.linear.bias"));
    auto img = unpatchify(ops::reshape(pix, {B * To, S, cfg_.patch_dim(cfg_.channels)}), cfg_.grid_h(), cfg_.grid_w(),
                          cfg_.patch, cfg_.channels);
    return ops::reshape(img, {B, To, cfg_.channels, cfg_.image_h, cfg_.image_w});
}

#define TSFLOW_INSTANTIATE_MODEL(R)                                                                                       \
    template class FlowTransformer<R>;                                                                                    \
    template Var<R> attention_sub_block(const Var<R>&, std::size_t, const SubBlockInputs<R>&, const SubBlockParams<R>&,    \
                                        std::size_t, Fusion, std::optional<std::pair<std::size_t, std::size_t>>);         \
    template Var<R> spatial_block(const Var<R>&, const Var<R>&, const Var<R>&, const Var<R>&, const Var<R>&,              \
                                  const ModelConfig&, const SubBlockParams<R>&);                                          \
    template Var<R> temporal_block(const Var<R>&, const Var<R>&, const Var<R>&, const Var<R>&, const Var<R>&,             \
                                   const ModelConfig&, const SubBlockParams<R>&);

TSFLOW_INSTANTIATE_MODEL(float)
TSFLOW_INSTANTIATE_MODEL(double)

}  // namespace tsflow
