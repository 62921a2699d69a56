#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "tsflow/serialize.hpp"
#include "tsflow/synthdata.hpp"

using namespace tsflow;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("tsflow_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

double correlation(const std::vector<double>& a, const std::vector<double>& b) {
    const double n = static_cast<double>(a.size());
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i] / n;
        mb += b[i] / n;
    }
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
}

}  // namespace

TEST_CASE("worlds are deterministic and cover their classes") {
    const auto a = generate_world(5, 32, 32, 3, 6);
    const auto b = generate_world(5, 32, 32, 3, 6);
    CHECK(a.class_map == b.class_map);
    CHECK(a.base == b.base);
    CHECK(a.class_map != generate_world(6, 32, 32, 3, 6).class_map);

    const auto one = generate_world(1, 16, 16, 3, 1);
    for (int k : one.class_map) CHECK(k == 0);

    int full = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const auto w = generate_world(seed, 32, 32, 3, 8);
        std::set<int> seen(w.class_map.begin(), w.class_map.end());
        full += seen.size() == 8;
    }
    CHECK(full >= 95);
}

TEST_CASE("rendering follows the seasonal model") {
    auto w = generate_world(3, 8, 8, 3, 2);
    const std::vector<int> days{10, 100, 200};
    const auto r = render_timeseries(w, days, {5.0, 40.0}, 1);
    for (float v : r.clear.data()) CHECK((v >= 0.0f && v <= 1.0f));
    CHECK(r.aux.shape() == Shape{3, kAuxChannels, 8, 8});

    // Periodicity: DOY and DOY + 365 (with the land-cover change pinned).
    w.changed_map = w.class_map;
    const std::vector<int> d1{40}, d2{405};
    CHECK(render_timeseries(w, d1, {5.0, 40.0}, 1).clear == render_timeseries(w, d2, {5.0, 40.0}, 1).clear);

    // Zero amplitude: constant in time.
    for (auto& v : w.amplitude.data()) v = 0.0;
    const auto flat = render_timeseries(w, days, {5.0, 40.0}, 1).clear;
    const std::size_t per = flat.numel() / 3;
    for (std::size_t i = 0; i < per; ++i) {
        CHECK(flat[i] == flat[per + i]);
        CHECK(flat[i] == flat[2 * per + i]);
    }
}

TEST_CASE("vegetation-like band ratio peaks near the configured phase") {
    int within = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto w = generate_world(seed, 8, 8, 3, 1);
        std::vector<int> year(365);
        for (int d = 0; d < 365; ++d) year[d] = d + 1;
        const double lat = 30.0;
        const auto r = render_timeseries(w, year, {0.0, lat}, seed);
        const std::size_t HW = 64, C = 3;
        int best = 0;
        double best_v = -1e9;
        for (std::size_t t = 0; t < 365; ++t) {
            double ratio = 0.0;
            for (std::size_t p = 0; p < HW; ++p) {
                const double lo = r.clear[(t * C + 0) * HW + p], hi = r.clear[(t * C + C - 1) * HW + p];
                ratio += (hi - lo) / (hi + lo + 1e-9);
            }
            if (ratio > best_v) {
                best_v = ratio;
                best = year[t];
            }
        }
        double gap = std::abs(best - w.peak_doy[0]);
        gap = std::min(gap, 365.0 - gap);
        within += gap <= 10.0;
    }
    CHECK(within == 20);
}

TEST_CASE("contamination extremes and determinism") {
    auto w = generate_world(2, 16, 16, 3, 3);
    const std::vector<int> days{20, 60, 90, 150};
    const auto clear = render_timeseries(w, days, {0, 0}, 2).clear;
    const auto none = contaminate(clear, 7, 0.0);
    CHECK(none.frames == clear);
    for (double f : none.cloud_frac) CHECK(f == 0.0);
    for (float v : none.cloud_mask.data()) CHECK(v == 0.0f);
    const auto full = contaminate(clear, 7, 1.0);
    for (double f : full.cloud_frac) CHECK(f == 1.0);
    const auto a = contaminate(clear, 9, 0.5), b = contaminate(clear, 9, 0.5);
    CHECK(a.frames == b.frames);
    CHECK(a.cloud_frac == b.cloud_frac);
    for (float v : a.cloud_mask.data()) CHECK((v == 0.0f || v == 1.0f));
    CHECK_THROWS(contaminate(clear, 1, 1.5));
}

TEST_CASE("dataset filters") {
    CHECK(passes_filters(0.10, 0.20));
    CHECK_FALSE(passes_filters(0.20, 0.0));
    CHECK_FALSE(passes_filters(0.0, 0.35));
    const std::vector<int> cands{10, 20, 30};
    CHECK(match_within(13, cands) == 0);
    CHECK(match_within(14, cands) == -1);
    CHECK(match_within(24, cands) == -1);
    CHECK(match_within(27, cands) == 2);
    CHECK(match_within(15, std::vector<int>{12, 18}) == 0);  // tie resolves to the earlier date
    const std::vector<std::uint8_t> usable{1, 0, 1};
    CHECK(match_within(21, cands, &usable) == -1);
}

TEST_CASE("every built sample complies with the dataset rules") {
    std::size_t emitted = 0;
    for (DatasetMode mode : {DatasetMode::ts_s12, DatasetMode::ts_s12cr}) {
        StreamConfig cfg;
        cfg.cloud_density = mode == DatasetMode::ts_s12 ? 0.5 : 0.84;
        for (std::uint64_t seed = 0; seed < 12; ++seed) {
            const auto r = build_dataset(simulate_stream(cfg, seed), mode);
            if (r.sample.empty()) {
                CHECK_FALSE(r.reason.empty());
                continue;
            }
            ++emitted;
            INFO(to_string(mode) << " seed " << seed);
            CHECK(filter_violation(r.sample, mode) == "");
            CHECK(r.sample.frames() >= kMinSequence);
            for (std::size_t i = 0; i < r.sample.frames(); ++i) {
                CHECK(r.sample.cloud_frac[i] < kMaxCloud);
                CHECK(r.sample.shadow_frac[i] < kMaxShadow);
                CHECK(std::abs(r.sample.aux_doy[i] - r.sample.doy[i]) <= kMatchDays);
                if (i) CHECK(r.sample.doy[i] > r.sample.doy[i - 1]);
                if (mode == DatasetMode::ts_s12cr) CHECK(std::abs(r.sample.contam_doy[i] - r.sample.doy[i]) <= kMatchDays);
            }
        }
    }
    CHECK(emitted > 0);

    // The checker itself flags violations.
    SynthConfig sc;
    sc.rois = 2;
    auto samples = synthesize_samples(sc);
    REQUIRE_FALSE(samples.empty());
    auto bad = samples[0];
    bad.cloud_frac[0] = 0.2;
    CHECK(filter_violation(bad, DatasetMode::ts_s12) != "");
    bad = samples[0];
    bad.aux_doy[1] = bad.doy[1] + 4;
    CHECK(filter_violation(bad, DatasetMode::ts_s12) != "");
}

TEST_CASE("aux availability is independent of cloud state") {
    std::vector<double> avail, cloudy;
    StreamConfig cfg;
    for (std::uint64_t seed = 0; avail.size() < 1000; ++seed) {
        const auto s = simulate_stream(cfg, seed);
        for (std::size_t i = 0; i < s.aux_doy.size() && avail.size() < 1000; ++i) {
            std::size_t nearest = 0;
            for (std::size_t j = 0; j < s.optical_doy.size(); ++j)
                if (std::abs(s.optical_doy[j] - s.aux_doy[i]) < std::abs(s.optical_doy[nearest] - s.aux_doy[i])) nearest = j;
            avail.push_back(s.aux_available[i]);
            cloudy.push_back(s.cloud_frac[nearest]);
        }
    }
    CHECK(std::abs(correlation(avail, cloudy)) < 0.1);
}

TEST_CASE("sample containers round-trip and reject corruption") {
    SynthConfig sc;
    sc.rois = 3;
    sc.mode = DatasetMode::ts_s12cr;
    sc.seed = 4;
    const auto dir = scratch_dir("containers");
    const auto summary = synthesize(sc, dir);
    REQUIRE(summary.emitted > 0);
    const auto loaded = load_dataset(dir);
    const auto direct = synthesize_samples(sc);
    REQUIRE(loaded.size() == direct.size());
    for (std::size_t i = 0; i < loaded.size(); ++i) {
        CHECK(loaded[i].x_clear == direct[i].x_clear);
        CHECK(loaded[i].x_contam == direct[i].x_contam);
        CHECK(loaded[i].aux == direct[i].aux);
        CHECK(loaded[i].labels == direct[i].labels);
        CHECK(loaded[i].doy == direct[i].doy);
        CHECK(loaded[i].cloud_frac == direct[i].cloud_frac);
        CHECK(loaded[i].lonlat.lon == direct[i].lonlat.lon);
    }

    const auto path = dir / "roundtrip.unts";
    write_sample(path, direct[0]);
    const auto back = read_sample(path);
    CHECK(back.x_clear == direct[0].x_clear);
    CHECK(back.band_names == direct[0].band_names);
    CHECK(back.contam_doy == direct[0].contam_doy);

    std::string bytes;
    {
        std::ifstream in(path, std::ios::binary);
        bytes.assign(std::istreambuf_iterator<char>(in), {});
    }
    auto write_bytes = [&](const fs::path& p, const std::string& b) {
        std::ofstream out(p, std::ios::binary);
        out << b;
    };
    std::string bad_magic = bytes;
    bad_magic[0] = 'X';
    write_bytes(dir / "magic.unts", bad_magic);
    CHECK_THROWS_AS(read_sample(dir / "magic.unts"), FormatError);
    write_bytes(dir / "short.unts", bytes.substr(0, bytes.size() - 100));
    CHECK_THROWS_WITH_AS(read_sample(dir / "short.unts"), doctest::Contains("expected"), FormatError);
    fs::remove_all(dir);
}

TEST_CASE("generation is deterministic per seed") {
    SynthConfig sc;
    sc.rois = 2;
    sc.seed = 11;
    const auto a = synthesize_samples(sc), b = synthesize_samples(sc);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].x_clear == b[i].x_clear);
    CHECK(dataset_mode_from_string("ts_s12cr") == DatasetMode::ts_s12cr);
    CHECK_THROWS(dataset_mode_from_string("s2"));
}
