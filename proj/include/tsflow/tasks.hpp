#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tsflow/flow_matching.hpp"
#include "tsflow/model.hpp"
#include "tsflow/synthdata.hpp"

namespace tsflow {

enum class Task { recon, cloudrm, scd, forecast };

std::string to_string(Task t);
/// Accepts recon|cloudrm|scd|forecast (and the long names reconstruction|cloud_removal|forecasting).
Task task_from_string(const std::string& s);

struct TaskConfig {
    Task task = Task::recon;
    std::size_t channels = 3;       // C, generated channels
    std::size_t cond_channels = 5;  // C_con
    std::size_t aux_channels = kAuxChannels;
    std::size_t frames = 4;         // T (T_fut when forecasting)
    std::size_t history = 0;        // T_his, forecasting only
    std::size_t classes = 0;        // K, segmentation targets only
    bool use_metadata = true;

    /// Desk-scale configuration for `optical` reflectance bands.
    static TaskConfig toy(Task task, std::size_t optical = 3, std::size_t frames = 4, std::size_t classes = 4);
    /// Published channel layouts; `variant` selects the second SCD / forecasting dataset.
    static TaskConfig published(Task task, int variant = 0);

    void validate() const;
    /// Window length read from a sample per training example.
    std::size_t span() const { return task == Task::forecast ? history + frames : frames; }
    /// Copies task channel counts and frame layout into a model configuration.
    ModelConfig apply(ModelConfig base) const;
};

/// Pixels (or whole frames) hidden from a reconstruction condition.
struct MaskPlan {
    std::vector<std::uint8_t> frame_missing;  // one flag per sample frame, or empty
    Tensor<float> pixel_mask;                 // [L, H, W], 1 = hidden, or empty
};

/// Hides exactly round(rate * frames) frames of the window [start, start + frames).
MaskPlan frame_missing_plan(std::size_t length, std::size_t start, std::size_t frames, double rate, Rng& rng);

inline constexpr float kMaskFill = 1.0f;

struct AssembledCondition {
    Tensor<float> cond;  // [T_c, C_con, H, W]
    Tensor<float> aux;   // [T_c, C_STM, H, W]
    bool aux_absent = false;
    std::vector<std::uint8_t> hidden;  // per condition frame: any pixel hidden
};

/// Builds the condition for the window starting at `start`. Reconstruction:
/// [aux, masked optical] with hidden pixels set to 1.0; cloud removal:
/// [aux, contaminated]; SCD: optical frames; forecasting: history frames.
/// Missing or dropped aux is zero-filled and flagged.
AssembledCondition assemble_condition(const TimeSeriesSample& s, std::size_t start, const TaskConfig& task,
                                      const MaskPlan& mask = {}, bool drop_aux = false);

/// Generation target for the same window: [T, C, H, W].
Tensor<float> task_target(const TimeSeriesSample& s, std::size_t start, const TaskConfig& task);

/// Dates attached to the window (future dates when forecasting).
std::vector<int> task_doy(const TimeSeriesSample& s, std::size_t start, const TaskConfig& task);

/// labels [T, H, W] (integer-valued) -> one-hot [T, K, H, W].
Tensor<float> encode_onehot(const Tensor<float>& labels, std::size_t classes);
/// [T, K, H, W] -> labels [T, H, W]; ties resolve to the lowest class index.
Tensor<float> decode_argmax(const Tensor<float>& scores);
std::vector<int> to_int_labels(const Tensor<float>& labels);

/// Window starts tiling [0, length) with stride `window`; the last window is
/// right-aligned. Sequences shorter than the window give a single start 0.
std::vector<std::size_t> window_starts(std::size_t length, std::size_t window);

struct Batch {
    ConditionInput<float> cond;
    Tensor<float> target;   // x1: [B, T, C, H, W]
    Tensor<float> history;  // forecasting: clean history [B, T_his, C, H, W]
};

struct WindowRef {
    std::size_t sample = 0;
    std::size_t start = 0;
    MaskPlan mask;
    bool drop_aux = false;
};

Batch make_batch(const std::vector<TimeSeriesSample>& data, const std::vector<WindowRef>& refs, const TaskConfig& task);

struct InferenceOptions {
    SolverConfig solver;
    std::uint64_t seed = 0;
    MaskPlan mask;          // over the whole sample
    bool drop_aux = false;
};

struct SequenceResult {
    Tensor<float> frames;  // [L, C, H, W]
    std::size_t model_calls = 0;
};

/// Generates a whole sequence with a sliding window of model.config().frames;
/// overlapping frames keep the first generated value.
SequenceResult infer_sequence(const FlowTransformer<float>& model, const TimeSeriesSample& s, const TaskConfig& task,
                              const InferenceOptions& opt);

struct AutoregressiveResult {
    Tensor<float> frames;                   // [N_fut, C, H, W]
    std::size_t model_calls = 0;
    std::vector<std::vector<long>> access;  // per call: timeline indices used as condition
};

/// Rolls a forecasting model forward: each call conditions on the most recent
/// T_his frames of [history; predictions]. `aux_timeline` covers history and
/// horizon ([T_his + N_fut, C_STM, H, W]) or is empty (zero aux for predicted frames).
AutoregressiveResult infer_autoregressive(const FlowTransformer<float>& model, const Tensor<float>& history,
                                          const Tensor<float>& aux_timeline, std::size_t horizon,
                                          const std::vector<int>& future_doy, LonLat lonlat, const SolverConfig& solver,
                                          std::uint64_t seed);

/// Frames [start, start + n) of a [L, ...] tensor.
Tensor<float> slice_frames(const Tensor<float>& x, std::size_t start, std::size_t n);
/// Joins two [L, ...] tensors along the frame axis.
Tensor<float> concat_frames(const Tensor<float>& a, const Tensor<float>& b);

/// Per-pixel linear interpolation in DOY over visible observations; pixels
/// before the first / after the last observation copy the nearest one. Pixels
/// never observed take the mean of all visible values (0.5 if none).
Tensor<float> linear_interpolation_fill(const Tensor<float>& frames, const std::vector<int>& doy,
                                        const Tensor<float>& visible);

/// [T, H, W] visibility (1 = observed) of the optical condition of a reconstruction window.
Tensor<float> visibility(const TimeSeriesSample& s, std::size_t start, std::size_t frames, const MaskPlan& mask);

}  // namespace tsflow
