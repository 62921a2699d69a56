#include <doctest.h>

#include <cmath>
#include <numeric>

#include "oracles.hpp"
#include "tsflow/metrics.hpp"
#include "tsflow/rng.hpp"

using namespace tsflow;
namespace m = tsflow::metrics;

namespace {

std::vector<double> vec(const Tensor<double>& t) { return t.storage(); }

std::vector<int> random_labels(Rng& rng, std::size_t n, int classes) {
    std::vector<int> v(n);
    for (auto& x : v) x = static_cast<int>(rng.integer(0, classes - 1));
    return v;
}

}  // namespace

TEST_CASE("reflectance metric anchors") {
    Rng rng(1);
    const auto x = rng.uniform_tensor<double>({3, 8, 8}, 0.0, 1.0);
    CHECK(m::psnr(x, x) == 100.0);
    CHECK(m::rmse(x, x) == 0.0);
    CHECK(m::mae(x, x) == 0.0);
    CHECK(m::ssim(x, x) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(m::sam(x, x).degrees == doctest::Approx(0.0).epsilon(1e-6));

    Tensor<double> a({1, 10, 10}, 0.5), b({1, 10, 10}, 0.6);
    CHECK(m::psnr(a, b) == doctest::Approx(20.0).epsilon(1e-9));
    CHECK(m::rmse(a, b) == doctest::Approx(0.1));

    const Tensor<double> zero({16, 16}, 0.0), one({16, 16}, 1.0);
    CHECK(m::ssim(zero, one) == doctest::Approx(m::kSsimC1 / (1.0 + m::kSsimC1)).epsilon(1e-9));

    Tensor<double> p({2, 1, 1}, {1.0, 0.0}), q({2, 1, 1}, {0.0, 1.0});
    CHECK(m::sam(p, q).degrees == doctest::Approx(90.0));
    const auto z = m::sam(Tensor<double>({2, 1, 2}), Tensor<double>({2, 1, 2}));
    CHECK_FALSE(z.defined());
    CHECK(z.skipped == 2);
    CHECK_THROWS(m::sam(Tensor<double>({1, 2, 2}), Tensor<double>({1, 2, 2})));
    CHECK_THROWS(m::psnr(x, Tensor<double>({3, 8, 7})));
}

TEST_CASE("values are clamped to the peak before scoring") {
    const Tensor<double> a({4}, {-0.5, 0.2, 1.7, 0.4}), b({4}, {0.0, 0.2, 1.0, 0.4});
    CHECK(m::psnr(a, b) == 100.0);
    CHECK(m::mae(a, b) == 0.0);
}

TEST_CASE("reflectance metrics are symmetric") {
    Rng rng(2);
    const auto x = rng.uniform_tensor<double>({3, 12, 12}, 0.0, 1.0);
    const auto y = rng.uniform_tensor<double>({3, 12, 12}, 0.0, 1.0);
    CHECK(m::psnr(x, y) == doctest::Approx(m::psnr(y, x)).epsilon(1e-12));
    CHECK(m::rmse(x, y) == doctest::Approx(m::rmse(y, x)).epsilon(1e-12));
    CHECK(m::mae(x, y) == doctest::Approx(m::mae(y, x)).epsilon(1e-12));
}

TEST_CASE("every metric matches a brute-force oracle on random 8x8 cases") {
    Rng rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t C = 3;
        const auto x = rng.uniform_tensor<double>({C, 8, 8}, 0.0, 1.0);
        const auto y = rng.uniform_tensor<double>({C, 8, 8}, 0.0, 1.0);
        CHECK(std::abs(m::psnr(x, y) - oracle::psnr(vec(x), vec(y))) < 1e-6);
        CHECK(std::abs(m::rmse(x, y) - oracle::rmse(vec(x), vec(y))) < 1e-6);
        CHECK(std::abs(m::mae(x, y) - oracle::mae(vec(x), vec(y))) < 1e-6);
        CHECK(std::abs(m::ssim(x, y) - oracle::ssim(vec(x), vec(y), C, 8, 8)) < 1e-6);
        CHECK(std::abs(m::sam(x, y).degrees - *oracle::sam(vec(x), vec(y), C, 64)) < 1e-6);

        const int K = 4;
        const auto lp = random_labels(rng, 64, K), lg = random_labels(rng, 64, K);
        CHECK(std::abs(m::miou(lp, lg, K).mean - oracle::miou(lp, lg, K)) < 1e-6);
        const auto sp = random_labels(rng, 3 * 64, 3), sg = random_labels(rng, 3 * 64, 3);
        const auto got = m::change_scores(sp, sg, 3, 3);
        const auto want = oracle::change(sp, sg, 3, 3);
        CHECK(got.defined);
        CHECK(std::abs(got.bc - want.bc) < 1e-12);
        CHECK(std::abs(got.sc - want.sc) < 1e-12);
        CHECK(std::abs(got.scs - want.scs) < 1e-12);
    }
}

TEST_CASE("SSIM on full-size windows matches the oracle") {
    Rng rng(4);
    const auto x = rng.uniform_tensor<double>({20, 17}, 0.0, 1.0);
    auto y = x;
    for (auto& v : y.data()) v = std::clamp(v + rng.normal() * 0.1, 0.0, 1.0);
    CHECK(std::abs(m::ssim_band(x, y) - oracle::ssim_plane(x.data().data(), y.data().data(), 20, 17)) < 1e-9);
    std::size_t n = 0;
    m::ssim_window(20, 17, &n);
    CHECK(n == 11);
    m::ssim_window(8, 8, &n);
    CHECK(n == 7);
}

TEST_CASE("mIoU") {
    const std::vector<int> gt{0, 0, 1, 1}, all0{0, 0, 0, 0};
    const auto r = m::miou(all0, gt, 2);
    CHECK(*r.per_class[0] == doctest::Approx(0.5));
    CHECK(*r.per_class[1] == 0.0);
    CHECK(r.mean == doctest::Approx(0.25));
    CHECK(m::miou(gt, gt, 5).mean == 1.0);
    CHECK_FALSE(m::miou(gt, gt, 5).per_class[3].has_value());
    const std::vector<int> bad{0, 0, 7, 1};
    CHECK_THROWS(m::miou(bad, gt, 2));

    // Invariance under a consistent relabelling.
    Rng rng(5);
    const auto p = random_labels(rng, 200, 5), g = random_labels(rng, 200, 5);
    const std::vector<int> perm{3, 0, 4, 1, 2};
    std::vector<int> pp(p.size()), gp(g.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
        pp[i] = perm[p[i]];
        gp[i] = perm[g[i]];
    }
    CHECK(m::miou(p, g, 5).mean == doctest::Approx(m::miou(pp, gp, 5).mean).epsilon(1e-12));
}

TEST_CASE("change-score edge conventions") {
    const std::vector<int> still{1, 2, 1, 2};  // 2 frames x 2 pixels, no change
    const auto s = m::change_scores(still, still, 2, 3);
    CHECK(s.defined);
    CHECK(s.bc == 1.0);
    CHECK(s.scs == 1.0);
    const std::vector<int> flips{1, 2, 2, 1};
    CHECK(m::change_scores(flips, still, 2, 3).bc == 0.0);
    const std::vector<int> one{1, 2};
    CHECK_FALSE(m::change_scores(one, one, 1, 3).defined);
    CHECK(s.convention == std::string(m::kChangeConvention));
}

TEST_CASE("per-frame report aggregates uniformly") {
    Rng rng(6);
    const auto x = rng.uniform_tensor<double>({4, 3, 8, 8}, 0.0, 1.0);
    const auto y = rng.uniform_tensor<double>({4, 3, 8, 8}, 0.0, 1.0);
    const auto r = m::evaluate_reflectance(x, y);
    REQUIRE(r.frames.size() == 4);
    double ps = 0.0, ss = 0.0;
    for (const auto& f : r.frames) {
        ps += f.psnr;
        ss += f.ssim;
    }
    CHECK(r.mean.psnr == doctest::Approx(ps / 4));
    CHECK(r.mean.ssim == doctest::Approx(ss / 4));
    CHECK(r.bands.size() == 12);
    const auto sub = m::evaluate_reflectance(x, y, {1, 3});
    CHECK(sub.frames.size() == 2);
    CHECK(sub.frames[1].frame == 3);
}
