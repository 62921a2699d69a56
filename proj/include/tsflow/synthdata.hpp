#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tsflow/embeddings.hpp"
#include "tsflow/rng.hpp"
#include "tsflow/tensor.hpp"

namespace tsflow {

/// Static procedural scene: Voronoi land-cover classes with per-class seasonal spectra.
struct World {
    std::size_t h = 0, w = 0, channels = 0, classes = 0;
    std::vector<int> class_map;          // h*w, class before the change date
    std::vector<int> changed_map;        // h*w, class after the change date
    int change_doy = 366;                // first DOY showing changed_map
    Tensor<double> base;                 // [K, C]
    Tensor<double> amplitude;            // [K, C] seasonal swing; band 0 <= 0, last band >= 0
    std::vector<double> peak_doy;        // K, northern-hemisphere peak of the seasonal cycle
    Tensor<double> texture;              // [h, w] multiplicative brightness field around 1
};

World generate_world(std::uint64_t seed, std::size_t h, std::size_t w, std::size_t channels, std::size_t classes);

inline constexpr std::size_t kAuxChannels = 2;

/// Seasonal term phase: reflectance peaks at peak_doy (shifted half a year south of the equator).
double seasonal_phase(double peak_doy, double lat);

/// Noise-free reflectance of one class/band at a day of year.
double class_reflectance(const World& world, std::size_t k, std::size_t band, double doy, double lat);

struct RenderedSeries {
    Tensor<float> clear;   // [T, C, H, W] in [0, 1]
    Tensor<float> aux;     // [T, 2, H, W]
    Tensor<float> labels;  // [T, H, W] class indices
};

/// Aux frames are a fixed band mix of the rendered scene plus seeded speckle;
/// they never see clouds.
RenderedSeries render_timeseries(const World& world, const std::vector<int>& doy, LonLat where, std::uint64_t seed);

struct Contamination {
    Tensor<float> frames;        // [T, C, H, W]
    Tensor<float> cloud_mask;    // [T, H, W] in {0, 1}
    Tensor<float> shadow_mask;   // [T, H, W] in {0, 1}
    std::vector<double> cloud_frac;
    std::vector<double> shadow_frac;
};

/// Smooth value noise in [0, 1] on an h x w grid with the given lattice cell size.
Tensor<double> value_noise(std::size_t h, std::size_t w, double cell, Rng& rng);

/// Per-frame coverage c ~ Beta around `cloud_density` (exactly 0 / 1 at the ends);
/// cloud = top-c quantile of a value-noise field, shadow = cloud mask displaced by a few pixels.
Contamination contaminate(const Tensor<float>& frames, std::uint64_t seed, double cloud_density);

/// Coverage for a single frame drawn as in `contaminate`.
double draw_coverage(Rng& rng, double cloud_density);

/// One simulated year of acquisitions over one ROI.
struct AcquisitionStream {
    World world;
    LonLat lonlat;
    std::vector<int> optical_doy;          // every 2 days
    std::vector<double> cloud_frac, shadow_frac;
    std::vector<int> aux_doy;              // every 6 days
    std::vector<std::uint8_t> aux_available;
    std::uint64_t seed = 0;
    double cloud_density = 0.5;
    double clear_probability = 0.3;
};

struct StreamConfig {
    std::size_t h = 16, w = 16, channels = 3, classes = 4;
    double cloud_density = 0.5;
    double clear_probability = 0.3;  // share of optical acquisitions that are cloud-free
    int optical_revisit = 2;
    int aux_revisit = 6;
    double aux_availability = 0.85;
    double outage_probability = 0.3;  // chance of one contiguous aux outage per year
    int outage_days = 24;
};

AcquisitionStream simulate_stream(const StreamConfig& cfg, std::uint64_t seed);

enum class DatasetMode { ts_s12, ts_s12cr };
std::string to_string(DatasetMode m);
DatasetMode dataset_mode_from_string(const std::string& s);

inline constexpr double kMaxCloud = 0.15;
inline constexpr double kMaxShadow = 0.30;
inline constexpr int kMatchDays = 3;
inline constexpr std::size_t kMinSequence = 8;

bool passes_filters(double cloud, double shadow);
/// Index of the candidate DOY nearest to `doy` within +-kMatchDays (ties: earlier), or -1.
int match_within(int doy, const std::vector<int>& candidates, const std::vector<std::uint8_t>* usable = nullptr);

struct TimeSeriesSample {
    std::string id;
    Tensor<float> x_clear;         // [T, C, H, W]
    Tensor<float> x_contam;        // [T, C, H, W] or empty
    Tensor<float> cloud_mask;      // [T, H, W] masks of x_contam, or empty
    Tensor<float> shadow_mask;
    Tensor<float> aux;             // [T, 2, H, W]
    Tensor<float> labels;          // [T, H, W] or empty
    std::vector<int> doy;          // reference dates, strictly increasing
    std::vector<int> aux_doy;      // matched aux acquisition dates
    std::vector<int> contam_doy;   // matched contaminated acquisition dates (ts_s12cr)
    LonLat lonlat;
    std::vector<double> cloud_frac, shadow_frac;                // reference frames
    std::vector<double> contam_cloud_frac, contam_shadow_frac;  // contaminated frames
    std::vector<std::string> band_names;
    std::size_t classes = 0;

    std::size_t frames() const { return doy.size(); }
    bool empty() const { return doy.empty(); }
};

struct BuildResult {
    TimeSeriesSample sample;  // empty when nothing survives
    std::string reason;       // why the sample is empty
};

BuildResult build_dataset(const AcquisitionStream& stream, DatasetMode mode);

/// Cloud density whose ts_s12cr contaminated frames average `target` cloud cover.
double calibrate_cloud_density(double target, std::uint64_t seed, std::size_t rois = 24, std::size_t h = 16,
                               std::size_t w = 16);

/// Mean contaminated-frame cloud fraction over ts_s12cr samples built from `rois` streams.
double mean_contam_cloud(double cloud_density, std::uint64_t seed, std::size_t rois, std::size_t h, std::size_t w);

/// Checks every dataset rule on a built sample; returns an empty string when compliant.
std::string filter_violation(const TimeSeriesSample& s, DatasetMode mode);

/// Container: "UNTS" | u32 version | JSON manifest block | tensor records.
inline constexpr std::uint32_t kSampleFormatVersion = 1;
void write_sample(const std::filesystem::path& path, const TimeSeriesSample& s);
TimeSeriesSample read_sample(const std::filesystem::path& path);

struct SynthConfig {
    std::size_t rois = 8;
    std::size_t h = 16, w = 16, channels = 3, classes = 4;
    DatasetMode mode = DatasetMode::ts_s12;
    std::uint64_t seed = 0;
    double cloud_density = -1.0;  // < 0: mode default (0.5 for ts_s12, calibrated 0.84 target for ts_s12cr)
};

struct SynthSummary {
    std::size_t emitted = 0;
    std::size_t dropped = 0;
    double cloud_density = 0.0;
    std::vector<std::string> files;
};

/// Generates `rois` streams, builds samples and writes one container each plus index.json.
SynthSummary synthesize(const SynthConfig& cfg, const std::filesystem::path& out_dir);

/// In-memory variant of synthesize (no files); dropped streams are skipped.
std::vector<TimeSeriesSample> synthesize_samples(const SynthConfig& cfg, double* density_used = nullptr);

/// Loads every container listed in out_dir/index.json.
std::vector<TimeSeriesSample> load_dataset(const std::filesystem::path& dir);

}  // namespace tsflow
