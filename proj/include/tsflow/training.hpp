#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tsflow/flow_matching.hpp"
#include "tsflow/metrics.hpp"
#include "tsflow/model.hpp"
#include "tsflow/synthdata.hpp"
#include "tsflow/tasks.hpp"

namespace tsflow {

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    std::optional<double> clip_norm;  // global gradient-norm clipping when set
};

template <typename Real>
struct AdamWState {
    std::size_t step = 0;     // applied updates
    std::size_t skipped = 0;  // updates skipped for non-finite gradients
    std::vector<Tensor<Real>> m, v;
};

/// Decoupled-weight-decay Adam. Returns false (and leaves parameters and
/// moments untouched) when any gradient entry is non-finite.
template <typename Real>
bool adamw_step(std::vector<Var<Real>>& params, std::vector<Tensor<Real>> grads, AdamWState<Real>& state,
                const AdamWConfig& cfg);

/// Global L2 norm over a gradient list.
template <typename Real>
double global_norm(const std::vector<Tensor<Real>>& grads);

struct TrainConfig {
    TaskConfig task = TaskConfig::toy(Task::recon);
    ModelConfig model;
    AdamWConfig optim;
    std::size_t batch = 8;
    std::size_t steps = 2000;
    std::uint64_t seed = 0;
    std::size_t checkpoint_every = 0;  // 0: final checkpoint only
    std::size_t log_every = 100;
    double drop_aux_prob = 0.0;       // 1.0 trains an aux-free model
    double pixel_mask_prob = 0.5;     // reconstruction: share of windows masked by cloud blobs instead of whole frames
    std::filesystem::path run_dir;    // empty: no files written

    void validate() const;
    /// Model configuration with task channel layout applied.
    ModelConfig resolved_model() const { return task.apply(model); }
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TaskConfig& c);
TaskConfig task_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct Checkpoint {
    TrainConfig config;
    std::size_t step = 0;
    double ema = 0.0;
    std::unique_ptr<FlowTransformer<float>> model;
    AdamWState<float> optimizer;
    nlohmann::json manifest;
};

/// Container: "UNTC" | u32 version | manifest JSON | parameter tensors | Adam m | Adam v.
inline constexpr std::uint32_t kCheckpointVersion = 1;
void save_checkpoint(const std::filesystem::path& path, const FlowTransformer<float>& model, const TrainConfig& cfg,
                     std::size_t step, double ema, const AdamWState<float>* optimizer,
                     const nlohmann::json& metrics = nlohmann::json::object());
Checkpoint load_checkpoint(const std::filesystem::path& path);

class Trainer {
public:
    /// Validates data against the task before any step runs.
    Trainer(TrainConfig cfg, const std::vector<TimeSeriesSample>& data);
    /// Continues a run from a checkpoint written by save().
    static Trainer resume(const std::filesystem::path& checkpoint, const std::vector<TimeSeriesSample>& data);

    /// One optimizer step; returns the raw loss.
    double step();
    /// Runs until `cfg.steps` (or `until`) steps have been taken.
    void run(std::optional<std::size_t> until = std::nullopt, std::ostream* log = nullptr);
    void save(const std::filesystem::path& path) const;

    const FlowTransformer<float>& model() const { return *model_; }
    FlowTransformer<float>& model() { return *model_; }
    const TrainConfig& config() const { return cfg_; }
    std::size_t steps_done() const { return step_; }
    const std::vector<double>& losses() const { return losses_; }
    const std::vector<double>& ema() const { return ema_curve_; }
    double current_ema() const { return ema_; }
    std::size_t skipped_updates() const { return opt_.skipped; }

    /// Windows drawn for a given step; exposed for tests.
    std::vector<WindowRef> draw_windows(std::size_t step) const;

private:
    Trainer(TrainConfig cfg, const std::vector<TimeSeriesSample>& data, std::unique_ptr<FlowTransformer<float>> model);
    void write_loss_row(std::size_t step, double loss, double ema) const;

    TrainConfig cfg_;
    const std::vector<TimeSeriesSample>* data_;
    std::vector<std::size_t> eligible_;
    std::unique_ptr<FlowTransformer<float>> model_;
    AdamWState<float> opt_;
    std::size_t step_ = 0;
    double ema_ = 0.0;
    std::vector<double> losses_;
    std::vector<double> ema_curve_;
};

inline constexpr double kLossEmaDecay = 0.99;

struct EvalConfig {
    SolverConfig solver;
    std::uint64_t seed = 1234;
    std::size_t windows_per_sample = 2;
    std::size_t max_windows = 32;
    std::size_t batch = 8;
    double missing_rate = 0.5;  // reconstruction: share of hidden frames per window
    bool drop_aux = false;
};

struct EvalSummary {
    std::size_t windows = 0;
    double psnr = 0.0, ssim = 0.0, rmse = 0.0, mae = 0.0, sam = 0.0;  // whole windows, averaged over windows
    double psnr_hidden = 0.0;       // reconstruction: hidden pixels only
    double psnr_baseline = 0.0;     // reconstruction: linear interpolation on hidden pixels
    std::size_t hidden_windows = 0;
    double miou = 0.0, bc = 0.0, sc = 0.0, scs = 0.0;  // segmentation targets
    std::vector<metrics::MetricReport> reports;        // one per window

    nlohmann::json to_json() const;
};

/// Deterministic evaluation windows: up to `windows_per_sample` evenly spaced
/// starts per sample, capped at `max_windows`.
std::vector<WindowRef> eval_windows(const std::vector<TimeSeriesSample>& data, const TaskConfig& task, const EvalConfig& cfg);

EvalSummary evaluate_task(const FlowTransformer<float>& model, const TaskConfig& task,
                          const std::vector<TimeSeriesSample>& data, const EvalConfig& cfg);

struct AblationCell {
    std::string name;
    Fusion fusion = Fusion::acor;
    bool use_stm = true;
    bool use_metadata = true;
    std::size_t sample_steps = 10;
};

struct AblationRow {
    std::string cell;
    std::uint64_t seed = 0;
    double psnr = 0.0, ssim = 0.0, sam = 0.0;
    double final_ema = 0.0;
};

/// The module, fusion and sampling-step axes of the ablation study.
std::vector<AblationCell> default_ablation_cells(bool include_steps = true);

/// Trains each distinct model cell once per seed (cells differing only in
/// sampling steps share a model) and evaluates on `test`. Empty grid: warns, returns {}.
std::vector<AblationRow> run_ablation_grid(const std::vector<AblationCell>& cells, const std::vector<std::uint64_t>& seeds,
                                           const TrainConfig& base, const EvalConfig& eval,
                                           const std::vector<TimeSeriesSample>& train,
                                           const std::vector<TimeSeriesSample>& test, std::ostream* log = nullptr);

void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows);

}  // namespace tsflow
