#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tsflow/tensor.hpp"

namespace tsflow::metrics {

inline constexpr double kPsnrCap = 100.0;
inline constexpr double kSamEps = 1e-8;
inline constexpr std::size_t kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

/// Inputs are clamped to [0, peak] before scoring. Zero MSE reports kPsnrCap.
template <typename Real>
double psnr(const Tensor<Real>& pred, const Tensor<Real>& gt, double peak = 1.0);
template <typename Real>
double rmse(const Tensor<Real>& pred, const Tensor<Real>& gt, double peak = 1.0);
template <typename Real>
double mae(const Tensor<Real>& pred, const Tensor<Real>& gt, double peak = 1.0);

/// Gaussian weights of the SSIM window for an image of the given size.
/// Images smaller than 11 pixels use the largest odd window that fits, with
/// sigma scaled by window/11.
std::vector<double> ssim_window(std::size_t h, std::size_t w, std::size_t* size_out);

/// Mean SSIM over all valid window positions of one band [H, W].
template <typename Real>
double ssim_band(const Tensor<Real>& pred, const Tensor<Real>& gt);

/// [H, W], [C, H, W] or [T, C, H, W]: per-band SSIM averaged uniformly.
template <typename Real>
double ssim(const Tensor<Real>& pred, const Tensor<Real>& gt);

struct SamResult {
    double degrees = 0.0;
    std::size_t skipped = 0;
    std::size_t counted = 0;
    bool defined() const { return counted > 0; }
};

/// Mean spectral angle over pixels; [C, H, W] or [T, C, H, W] with C >= 2.
template <typename Real>
SamResult sam(const Tensor<Real>& pred, const Tensor<Real>& gt);

struct IouResult {
    std::vector<std::optional<double>> per_class;  // nullopt: class absent from both maps
    double mean = 0.0;
};

/// Classes absent from both prediction and reference are left out of the mean.
IouResult miou(std::span<const int> pred, std::span<const int> gt, std::size_t classes);

inline constexpr const char* kChangeConvention = "change-scores/v1";

struct ChangeScores {
    bool defined = false;  // false for single-frame sequences
    double bc = 0.0;
    double sc = 0.0;
    double scs = 0.0;
    std::string convention = kChangeConvention;
};

/// Label sequences [T, H*W] flattened frame-major.
///   BC  = IoU of the changed-pixel masks over consecutive frame pairs (1 when both are empty)
///   SC  = mean IoU over (from, to) transition categories present in either sequence,
///         counted on changed pixels only (1 when no transitions exist)
///   SCS = (BC + SC) / 2
ChangeScores change_scores(std::span<const int> pred, std::span<const int> gt, std::size_t frames, std::size_t classes);

struct FrameMetrics {
    std::size_t frame = 0;
    double psnr = 0.0, ssim = 0.0, rmse = 0.0, mae = 0.0, sam = 0.0;
    bool sam_defined = true;
};

struct BandMetrics {
    std::size_t frame = 0;
    std::size_t band = 0;
    double psnr = 0.0, rmse = 0.0;
};

struct MetricReport {
    std::vector<FrameMetrics> frames;
    std::vector<BandMetrics> bands;
    FrameMetrics mean;  // uniform mean of per-frame values
    std::optional<IouResult> iou;
    std::optional<ChangeScores> change;
    std::string note;

    void write_csv(const std::filesystem::path& path) const;
    void write_band_csv(const std::filesystem::path& path) const;
    std::string to_json() const;
};

/// Per-frame reflectance metrics for pred/gt [T, C, H, W]; `frames` selects a subset (all when empty).
template <typename Real>
MetricReport evaluate_reflectance(const Tensor<Real>& pred, const Tensor<Real>& gt,
                                  const std::vector<std::size_t>& frames = {});

}  // namespace tsflow::metrics
