#include <doctest.h>

#include <cmath>
#include <set>

#include "tsflow/embeddings.hpp"
#include "tsflow/rng.hpp"

using namespace tsflow;

TEST_CASE("patch embedding shapes and rejection of indivisible sizes") {
    const Tensor<double> frames({2, 3, 8, 8}, 0.5);
    const std::size_t d = 16;
    const auto g = patch_embed(frames, {4, 4}, Tensor<double>({48, d}), Tensor<double>({d}));
    CHECK(g.tokens.shape() == Shape{2, d, 2, 2});
    for (double v : g.tokens.data()) CHECK(v == 0.0);
    CHECK_THROWS(patch_embed(Tensor<double>({1, 3, 6, 8}), {4, 4}, Tensor<double>({48, d}), Tensor<double>({d})));
}

TEST_CASE("permutation projection makes patch embedding a pixel rearrangement") {
    Rng rng(3);
    const std::size_t T = 2, C = 3, H = 4, W = 6, ph = 2, pw = 3, d = ph * pw * C;
    const auto x = rng.uniform_tensor<double>({T, C, H, W}, 0.0, 1.0);
    Tensor<double> w({d, d});
    for (std::size_t i = 0; i < d; ++i) w[i * d + i] = 1.0;
    const auto g = patch_embed(x, {ph, pw}, w, Tensor<double>({d}));
    CHECK(unpatchify(g, {ph, pw}, C) == x);

    // Brute-force index check of the patch layout (row, col, channel).
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t xx = 0; xx < W; ++xx) {
                    const std::size_t ch = ((y % ph) * pw + xx % pw) * C + c;
                    CHECK(g.tokens.at({t, ch, y / ph, xx / pw}) == x.at({t, c, y, xx}));
                }
}

TEST_CASE("unpatchify of zeros and channel mismatch") {
    TokenGrid<double> g{Tensor<double>({1, 12, 2, 2})};
    const auto img = unpatchify(g, {2, 2}, 3);
    CHECK(img.shape() == Shape{1, 3, 4, 4});
    for (double v : img.data()) CHECK(v == 0.0);
    CHECK_THROWS(unpatchify(g, {2, 2}, 2));
}

TEST_CASE("spatial and temporal views round-trip") {
    Rng rng(4);
    TokenGrid<double> g{rng.normal_tensor<double>({3, 8, 2, 5})};
    CHECK(TokenGrid<double>::from_spatial_view(g.spatial_view(), 2, 5).tokens == g.tokens);
    CHECK(TokenGrid<double>::from_temporal_view(g.temporal_view(), 2, 5).tokens == g.tokens);
}

TEST_CASE("sincos encodings") {
    const auto p0 = sincos_1d<double>(1, 8);
    for (std::size_t k = 0; k < 8; ++k) CHECK(p0[k] == (k % 2 == 0 ? 0.0 : 1.0));
    const auto s11 = sincos_2d<double>(1, 1, 8);
    for (std::size_t k = 0; k < 8; ++k) CHECK(s11[k] == (k % 2 == 0 ? 0.0 : 1.0));
    CHECK_THROWS(sincos_2d<double>(2, 2, 6));
    CHECK_THROWS(sincos_1d<double>(2, 5));

    // Frequency bank oracle.
    const std::size_t d = 12;
    const auto e = sincos_1d<double>(7, d);
    for (std::size_t p = 0; p < 7; ++p)
        for (std::size_t k = 0; k < d / 2; ++k) {
            const double ang = static_cast<double>(p) / std::pow(10000.0, 2.0 * static_cast<double>(k) / d);
            CHECK(e[p * d + 2 * k] == doctest::Approx(std::sin(ang)).epsilon(1e-12));
            CHECK(e[p * d + 2 * k + 1] == doctest::Approx(std::cos(ang)).epsilon(1e-12));
        }
}

TEST_CASE("sincos rows are distinct") {
    const std::size_t d = 16;
    const auto e = sincos_1d<double>(300, d);
    std::set<std::vector<double>> rows;
    for (std::size_t p = 0; p < 300; ++p) rows.insert(std::vector<double>(e.data().begin() + p * d, e.data().begin() + (p + 1) * d));
    CHECK(rows.size() == 300);

    const auto g = sincos_2d<double>(64, 64, d);
    std::set<std::vector<double>> grid;
    for (std::size_t p = 0; p < 64 * 64; ++p) grid.insert(std::vector<double>(g.data().begin() + p * d, g.data().begin() + (p + 1) * d));
    CHECK(grid.size() == 64 * 64);
}

TEST_CASE("day-of-year embedding uses absolute dates") {
    const std::vector<int> same{1, 1};
    const auto e = embed_doy<double>(same, 8);
    for (std::size_t k = 0; k < 8; ++k) CHECK(e[k] == e[8 + k]);
    const std::vector<int> two{1, 183};
    const auto f = embed_doy<double>(two, 8);
    CHECK(f[0] - f[8] == doctest::Approx(std::sin(1.0) - std::sin(183.0)));
    const std::vector<int> zero{0};
    CHECK_THROWS(embed_doy<double>(zero, 4));
    const std::vector<int> late{367};
    CHECK_THROWS(embed_doy<double>(late, 4));
}

TEST_CASE("geographic embedding") {
    const LonLat p{12.5, 41.9};
    CHECK(embed_lonlat<double>(p, 16, 7) == embed_lonlat<double>(p, 16, 7));
    CHECK_THROWS(embed_lonlat<double>({181.0, 0.0}, 16, 7));
    CHECK_THROWS(embed_lonlat<double>({0.0, -91.0}, 16, 7));

    const auto z = embed_lonlat_with<double>({0.0, 0.0}, 16, Tensor<double>({4, 2}));
    for (std::size_t k = 0; k < 4; ++k) {
        CHECK(z[k] == 1.0);
        CHECK(z[4 + k] == 0.0);
    }

    // Nearby points embed closer than distant ones.
    Rng rng(5);
    int closer = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const LonLat a{rng.uniform(-80.0, 80.0), rng.uniform(-40.0, 40.0)};
        const LonLat near{a.lon + 0.01, a.lat};
        const LonLat far{a.lon + 90.0, a.lat};
        const auto ea = embed_lonlat<double>(a, 32, 100 + trial);
        const double dn = l2_norm(Tensor<double>(ea.shape(), [&] {
            auto v = embed_lonlat<double>(near, 32, 100 + trial);
            for (std::size_t i = 0; i < v.numel(); ++i) v[i] -= ea[i];
            return v.storage();
        }()));
        const double df = l2_norm(Tensor<double>(ea.shape(), [&] {
            auto v = embed_lonlat<double>(far, 32, 100 + trial);
            for (std::size_t i = 0; i < v.numel(); ++i) v[i] -= ea[i];
            return v.storage();
        }()));
        closer += dn < df;
    }
    CHECK(closer == 100);
}

TEST_CASE("flow-time embedding") {
    const auto e0 = embed_flow_time<double>(0.0, 8, 4, 3);
    for (std::size_t k = 0; k < 8; ++k) CHECK(e0.z_fm[k] == (k % 2 == 0 ? 0.0 : 1.0));
    for (std::size_t s = 0; s < 4; ++s)
        for (std::size_t k = 0; k < 8; ++k) CHECK(e0.z_fm_s[s * 8 + k] == e0.z_fm[k]);
    for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t k = 0; k < 8; ++k) CHECK(e0.z_fm_t[t * 8 + k] == e0.z_fm[k]);
    CHECK_FALSE(e0.z_fm_con.has_value());
    const auto e1 = embed_flow_time<double>(1.0, 8, 4, 3, 2);
    CHECK(e1.z_fm_con.has_value());
    CHECK(max_abs_diff(e0.z_fm, e1.z_fm) > 0.0);
    CHECK_THROWS(embed_flow_time<double>(1.5, 8, 4, 3));
    CHECK_THROWS(embed_flow_time<double>(-0.1, 8, 4, 3));
}
