#include <doctest.h>

#include <cmath>

#include "spi/field.hpp"

using namespace spi;
using namespace spi::field;
using geometry::Intrinsics;
using geometry::look_at_pose;
using geometry::mirror_pose;
using geometry::Vec3;

namespace {

/// Makes every basis grid mirror-symmetric about the world plane x = 0.
void symmetrize_grids(PriorDecoder& model) {
    for (std::size_t l = 0; l < model.grids.size(); ++l) {
        const auto& spec = model.levels[l];
        int r = spec.resolution, f = spec.channels;
        Tensor& g = model.grids[l];
        for (int b = 0; b < spec.basis; ++b)
            for (int z = 0; z < r; ++z)
                for (int y = 0; y < r; ++y)
                    for (int x = 0; x < r / 2; ++x)
                        for (int c = 0; c < f; ++c) {
                            std::int64_t base =
                                (((static_cast<std::int64_t>(b) * r + z) * r + y) * r) * f;
                            g[base + static_cast<std::int64_t>(r - 1 - x) * f + c] =
                                g[base + static_cast<std::int64_t>(x) * f + c];
                        }
    }
}

PriorDecoder zero_model(int hidden = 16) {
    auto model = PriorDecoder::create(PriorDecoder::tiny_levels(), 3, hidden);
    for (auto& g : model.grids) g.fill(0.0);
    model.w1.fill(0.0);
    model.b1.fill(0.0);
    model.w2.fill(0.0);
    model.b2.fill(0.0);
    return model;
}

} // namespace

TEST_SUITE("field") {

TEST_CASE("constant network: zero grids and zero biases") {
    auto model = zero_model();
    LatentCode w = Tensor::zeros({model.latent_dim()});
    QueryResult q = query(model, w, Vec3{0.1, -0.2, 0.3});
    CHECK(q.density == doctest::Approx(std::log(2.0)).epsilon(1e-12)); // softplus(0)
    for (double c : q.rgb) CHECK(c == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("zero latent zeroes the features regardless of grids") {
    auto model = PriorDecoder::create(PriorDecoder::tiny_levels(), 5);
    LatentCode w = Tensor::zeros({model.latent_dim()});
    auto feat = query_features(model, w, Vec3{0.3, 0.1, -0.4});
    for (double f : feat) CHECK(f == 0.0);
}

TEST_CASE("feature at a grid vertex is the vertex value times w") {
    GridLevelSpec spec{5, 3, 2};
    auto model = PriorDecoder::create({spec}, 9);
    LatentCode w = Tensor::randn({3}, 10);
    // Vertex (ix,iy,iz) = (1,2,3) in a 5^3 grid.
    int r = 5, f = 2;
    double x = -1.0 + 2.0 * 1 / (r - 1);
    double y = -1.0 + 2.0 * 2 / (r - 1);
    double z = -1.0 + 2.0 * 3 / (r - 1);
    auto feat = query_features(model, w, Vec3{x, y, z});
    for (int c = 0; c < f; ++c) {
        double want = 0.0;
        for (int b = 0; b < 3; ++b) {
            std::int64_t idx = ((((static_cast<std::int64_t>(b) * r + 3) * r + 2) * r) + 1) * f + c;
            want += w[b] * model.grids[0][idx];
        }
        CHECK(feat[static_cast<std::size_t>(c)] == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("points outside the scene box have zero density") {
    auto model = PriorDecoder::create(PriorDecoder::tiny_levels(), 4);
    LatentCode w = Tensor::randn({model.latent_dim()}, 6);
    QueryResult q = query(model, w, Vec3{1.5, 0.0, 0.0});
    CHECK(q.density == 0.0);
}

TEST_CASE("empty volume renders white background, zero opacity, far depth") {
    auto model = zero_model();
    model.b2[0] = -100.0; // softplus(-100) ~ 0 density
    LatentCode w = Tensor::zeros({model.latent_dim()});
    auto K = Intrinsics::for_resolution(16, 16);
    auto out = render(model, w, look_at_pose(0.2, 0.1, 3.0), K, 11);
    for (double v : out.rgb.data) CHECK(v == doctest::Approx(1.0).epsilon(1e-9));
    for (double v : out.opacity.data) CHECK(std::abs(v) < 1e-9);
    for (double v : out.depth.data) CHECK(v == doctest::Approx(model.render.far).epsilon(1e-9));
}

TEST_CASE("compositing weights plus remaining transmittance telescope to one") {
    // With black emission the rendered value is T_N * background, so
    // opacity + rgb recovers sum(w_i) + T_N exactly.
    auto model = PriorDecoder::create(PriorDecoder::tiny_levels(), 13);
    model.b2[1] = model.b2[2] = model.b2[3] = -100.0; // colors ~ 0
    LatentCode w = Tensor::randn({model.latent_dim()}, 14, 0.7);
    auto K = Intrinsics::for_resolution(16, 16);
    auto out = render(model, w, look_at_pose(0.3, -0.1, 3.0), K, 2);
    for (std::size_t p = 0; p < out.opacity.data.size(); ++p) {
        double total = out.opacity.data[p] + out.rgb.data[3 * p];
        CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
        CHECK(out.opacity.data[p] >= 0.0);
        CHECK(out.opacity.data[p] <= 1.0 + 1e-12);
    }
}

TEST_CASE("opaque slab depth matches a 1D compositing oracle") {
    // One level, one basis volume; decoder wired to a steep density ramp.
    GridLevelSpec spec{33, 1, 1};
    PriorDecoder model;
    model.levels = {spec};
    model.hidden = 4;
    Tensor g({1, 33, 33, 33, 1});
    for (int z = 0; z < 33; ++z) {
        double zw = -1.0 + 2.0 * z / 32.0;
        double inside = std::abs(zw) <= 0.1 ? 60.0 : -60.0;
        for (int y = 0; y < 33; ++y)
            for (int x = 0; x < 33; ++x)
                g[((static_cast<std::int64_t>(z) * 33 + y) * 33 + x)] = inside;
    }
    model.grids = {g};
    model.w1 = Tensor::zeros({4, 1});
    model.w1[0] = 1.0;
    model.b1 = Tensor::zeros({4});
    model.w2 = Tensor::zeros({4, 4});
    model.w2[0] = 200.0; // raw density ~ +-200 -> sigma 200 or 0
    model.b2 = Tensor::zeros({4});
    model.validate();
    LatentCode w = Tensor::full({1}, 1.0);

    auto K = Intrinsics::for_resolution(16, 16);
    auto pose = look_at_pose(0.0, 0.0, 3.0);
    auto out = render(model, w, pose, K, 7);
    double center = out.depth.at(8, 8, 0);
    double spacing = (model.render.far - model.render.near) / model.render.samples;

    // Independent 1D oracle along the center ray using query().
    double T = 1.0, oracle = 0.0;
    int n = model.render.samples;
    for (int k = 0; k < n; ++k) {
        double t = model.render.near + (k + 0.5) * spacing;
        QueryResult q = query(model, w, Vec3{pose.position().x, pose.position().y,
                                             pose.position().z} +
                                             pose.forward() * t);
        double alpha = 1.0 - std::exp(-q.density * spacing);
        oracle += T * alpha * t;
        T *= 1.0 - alpha;
    }
    oracle += T * model.render.far;

    CHECK(std::abs(center - 2.9) < 1.5 * spacing);
    CHECK(std::abs(center - oracle) < 1.5 * spacing);
}

TEST_CASE("keystone: mirror-symmetric model renders flip-consistently") {
    auto model = PriorDecoder::create(PriorDecoder::default_levels(), 21);
    symmetrize_grids(model);
    LatentCode w = Tensor::randn({model.latent_dim()}, 22, 0.5);
    auto K = Intrinsics::for_resolution(32, 32);
    for (double yaw : {0.0, 0.35, -0.9}) {
        auto pose = look_at_pose(yaw, 0.12, 3.0);
        auto a = render(model, w, pose, K, 40);
        auto b = render(model, w, mirror_pose(pose), K, 40);
        CHECK(max_abs_diff(fliplr(a.rgb), b.rgb) < 1e-9);
        CHECK(max_abs_diff(fliplr(a.depth), b.depth) < 1e-9);
        CHECK(max_abs_diff(fliplr(a.opacity), b.opacity) < 1e-9);
    }
}

TEST_CASE("density scaling never decreases opacity") {
    auto model = PriorDecoder::create(PriorDecoder::default_levels(), 31);
    LatentCode w = Tensor::randn({model.latent_dim()}, 32, 0.6);
    auto K = Intrinsics::for_resolution(24, 24);
    auto pose = look_at_pose(0.5, 0.0, 3.0);
    auto base = render(model, w, pose, K, 1);
    PriorDecoder scaled = model;
    scaled.render.density_scale = 2.0;
    auto boosted = render(scaled, w, pose, K, 1);
    for (std::size_t i = 0; i < base.opacity.data.size(); ++i) {
        CHECK(boosted.opacity.data[i] >= base.opacity.data[i] - 1e-12);
    }
}

TEST_CASE("noise map adds to rgb scaled by noise_gain") {
    auto model = PriorDecoder::create(PriorDecoder::tiny_levels(), 41);
    model.noise_gain = 0.07;
    LatentCode w = Tensor::randn({model.latent_dim()}, 42, 0.5);
    auto K = Intrinsics::for_resolution(8, 8);
    auto pose = look_at_pose(0.1, 0.0, 3.0);
    NoiseMap n = Tensor::randn({8, 8}, 43);
    auto clean = render(model, w, pose, K, 9);
    auto noisy = render(model, w, pose, K, 9, &n);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x)
            for (int c = 0; c < 3; ++c) {
                double want = clean.rgb.at(x, y, c) + 0.07 * n[y * 8 + x];
                CHECK(noisy.rgb.at(x, y, c) == doctest::Approx(want).epsilon(1e-12));
            }
    NoiseMap bad = Tensor::zeros({4, 4});
    CHECK_THROWS_AS(render(model, w, pose, K, 9, &bad), Error);
}

TEST_CASE("determinism: identical seeds give bit-identical renders across thread counts") {
    auto model = PriorDecoder::create(PriorDecoder::default_levels(), 51);
    LatentCode w = Tensor::randn({model.latent_dim()}, 52, 0.5);
    auto K = Intrinsics::for_resolution(32, 32);
    auto pose = look_at_pose(0.6, 0.1, 3.0);
    int saved = max_threads();
    set_max_threads(1);
    auto serial = render(model, w, pose, K, 77);
    set_max_threads(2);
    auto threaded = render(model, w, pose, K, 77);
    set_max_threads(saved);
    CHECK(max_abs_diff(serial.rgb, threaded.rgb) == 0.0);
    CHECK(max_abs_diff(serial.depth, threaded.depth) == 0.0);
    auto again = render(model, w, pose, K, 77);
    CHECK(max_abs_diff(serial.rgb, again.rgb) == 0.0);
}

TEST_CASE("render_depth_set matches individual renders") {
    auto model = PriorDecoder::create(PriorDecoder::tiny_levels(), 61);
    LatentCode w = Tensor::randn({model.latent_dim()}, 62, 0.5);
    auto K = Intrinsics::for_resolution(8, 8);
    std::vector<geometry::Pose> poses = {look_at_pose(0.0, 0.0, 3.0),
                                         look_at_pose(0.3, 0.0, 3.0)};
    auto depths = render_depth_set(model, w, poses, K, 5);
    CHECK(depths.size() == 2);
    auto single = render(model, w, poses[1], K, 5);
    CHECK(max_abs_diff(depths[1], single.depth) == 0.0);
    CHECK(render_depth_set(model, w, {}, K, 5).empty());
}

} // TEST_SUITE
