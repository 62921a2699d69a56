#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tsflow/attention.hpp"
#include "tsflow/conditioning.hpp"
#include "tsflow/embeddings.hpp"
#include "tsflow/params.hpp"
#include "tsflow/rng.hpp"

namespace tsflow {

/// How condition tokens reach the state stream.
enum class Fusion { acor, concat, crossattn };

std::string to_string(Fusion f);
Fusion fusion_from_string(const std::string& s);

struct ModelConfig {
    std::size_t width = 64;  // token channels d
    std::size_t depth = 4;   // spatio-temporal blocks N
    std::size_t heads = 4;
    PatchSize patch{4, 4};
    std::size_t image_h = 16;
    std::size_t image_w = 16;
    std::size_t frames = 4;  // T; the future length T_fut when forecasting
    std::size_t channels = 3;       // C
    std::size_t cond_channels = 5;  // C_con
    std::size_t aux_channels = 2;   // C_STM
    Fusion fusion = Fusion::acor;
    bool use_stm = true;
    bool use_metadata = true;
    bool ffn = false;
    std::size_t ffn_mult = 4;
    bool forecast = false;
    std::size_t history = 0;  // T_his, forecasting only
    std::uint64_t rff_seed = 7;

    std::size_t grid_h() const { return image_h / patch.h; }
    std::size_t grid_w() const { return image_w / patch.w; }
    std::size_t tokens_per_frame() const { return grid_h() * grid_w(); }
    std::size_t patch_dim(std::size_t c) const { return patch.h * patch.w * c; }
    /// Frames carried by the condition stream.
    std::size_t cond_frames() const { return forecast ? history : frames; }
    /// Frames emitted by the decoder.
    std::size_t output_frames() const { return forecast ? history + frames : frames; }

    /// Throws std::invalid_argument describing the first violated constraint.
    void validate() const;
};

/// Everything the network sees except the flow state.
template <typename Real>
struct ConditionInput {
    Tensor<Real> cond;                  // [B, T_c, C_con, H, W]
    Tensor<Real> aux;                   // [B, T_c, C_STM, H, W]; may be empty when STM is off
    std::vector<std::vector<int>> doy;  // B lists of length T (future dates when forecasting)
    std::vector<LonLat> lonlat;         // B
    std::size_t batch() const { return cond.empty() ? 0 : cond.dim(0); }
};

template <typename Real>
struct SubBlockParams {
    AcorParams<Real> acor;         // fusion == acor
    AttentionParams<Real> cross;   // fusion == crossattn
    AdaLnParams<Real> adaln;
    AttentionParams<Real> attn;
    Var<Real> w1, w2;              // STM mixing weights
    AdaLnParams<Real> ffn_adaln;   // optional feed-forward sub-layer
    Var<Real> fc1_w, fc1_b, fc2_w, fc2_b;
};

/// Condition-side inputs for one sub-block, all optional.
template <typename Real>
struct SubBlockInputs {
    Var<Real> cond;      // [N, L, d] condition tokens in the same layout as the state
    Var<Real> meta;      // [B, 1, 1 or L, d] metadata embedding added before LN
    Var<Real> z_fm;      // [B, d] or [B, L, d]
    Var<Real> bias;      // [N or 1, L, L] attention logit bias
};

/// One attention sub-block over the middle axis of z [B*R, L, d]:
///   out = alpha * MSA[gamma * LN(fuse(z, cond) + meta) + beta] + z
/// `grid` selects the 2D (spatial) ACor convolution; otherwise 1D over L.
template <typename Real>
Var<Real> attention_sub_block(const Var<Real>& z, std::size_t batch, const SubBlockInputs<Real>& in,
                              const SubBlockParams<Real>& p, std::size_t heads, Fusion fusion,
                              std::optional<std::pair<std::size_t, std::size_t>> grid);

/// Spatial sub-block. z, z_con: [B*T, S, d]; z_lonlat: [B, d] or undefined;
/// z_fm: [B, d]; m_aux: [B*T, S, S] or undefined.
template <typename Real>
Var<Real> spatial_block(const Var<Real>& z, const Var<Real>& z_con, const Var<Real>& z_lonlat, const Var<Real>& z_fm,
                        const Var<Real>& m_aux, const ModelConfig& cfg, const SubBlockParams<Real>& p);

/// Temporal sub-block. z, z_con: [B*S, T, d]; z_doy: [B, T, d] or undefined;
/// z_fm: [B, d]; m_aux: [B*S, T, T] or undefined.
template <typename Real>
Var<Real> temporal_block(const Var<Real>& z, const Var<Real>& z_con, const Var<Real>& z_doy, const Var<Real>& z_fm,
                         const Var<Real>& m_aux, const ModelConfig& cfg, const SubBlockParams<Real>& p);

/// Velocity-field network f(x_t, t | condition).
template <typename Real>
class FlowTransformer {
public:
    /// Precomputed per-batch condition state, reusable across ODE steps.
    struct Context {
        std::size_t batch = 0;
        Var<Real> cond_s;    // [B*T_c, S, d] condition tokens (with positional embeddings)
        Var<Real> cond_t;    // [B*S, T_c, d]
        Var<Real> lonlat;    // [B, d]
        Var<Real> doy;       // [B, T, d]
        Var<Real> aux_s;     // [B*T_c, S, S]
        Var<Real> aux_t;     // [B*S, T_c, T_c]
        Tensor<Real> concat_cond;  // [B*T, C_con, H, W] for concat fusion
    };

    FlowTransformer(ModelConfig cfg, std::uint64_t init_seed);
    FlowTransformer(const FlowTransformer&) = delete;
    FlowTransformer& operator=(const FlowTransformer&) = delete;
    FlowTransformer(FlowTransformer&&) = default;

    const ModelConfig& config() const { return cfg_; }
    ParamStore<Real>& params() { return params_; }
    const ParamStore<Real>& params() const { return params_; }

    Context prepare(const ConditionInput<Real>& in) const;

    /// x_t: [B, T, C, H, W]; t: B flow times. Returns [B, T_out, C, H, W].
    Var<Real> forward(const Context& ctx, const Var<Real>& x_t, std::span<const double> t) const;

    /// Token stream through the N blocks only. z: [B, T, S, d] state tokens; z_fm [B, d].
    Var<Real> run_blocks(const Context& ctx, const Var<Real>& z, const Var<Real>& z_fm) const;

    /// Flow-time codes [B, d] for the given times.
    Tensor<Real> flow_time_codes(std::span<const double> t) const;

    const SubBlockParams<Real>& spatial_params(std::size_t block) const { return spatial_[block]; }
    const SubBlockParams<Real>& temporal_params(std::size_t block) const { return temporal_[block]; }

private:
    SubBlockParams<Real> make_sub_block(const std::string& prefix, bool spatial, Rng& rng);
    Var<Real> embed_state(const Context& ctx, const Var<Real>& x_t) const;

    ModelConfig cfg_;
    ParamStore<Real> params_;
    std::vector<SubBlockParams<Real>> spatial_;
    std::vector<SubBlockParams<Real>> temporal_;
    Tensor<Real> m_pos_s_;
    Tensor<Real> m_pos_t_;
    Tensor<double> rff_;
};

extern template class FlowTransformer<float>;
extern template class FlowTransformer<double>;

}  // namespace tsflow
