#include <doctest.h>

#include <cmath>

#include "spi/geometry.hpp"

using namespace spi;
using namespace spi::geometry;

namespace {

Pose random_rig_pose(Rng& rng) {
    double yaw = rng.uniform(-M_PI, M_PI);
    double pitch = rng.uniform(-1.2, 1.2);
    double radius = rng.uniform(1.2, 6.0);
    return look_at_pose(yaw, pitch, radius);
}

} // namespace

TEST_SUITE("geometry") {

TEST_CASE("look_at frontal rig") {
    Pose p = look_at_pose(0.0, 0.0, 3.0);
    CHECK(p.position().x == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(p.position().y == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(p.position().z == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(p.forward().z == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(std::abs(p.forward().x) < 1e-12);
    CHECK(std::abs(p.forward().y) < 1e-12);
}

TEST_CASE("look_at quarter turn") {
    Pose p = look_at_pose(M_PI / 2, 0.0, 3.0);
    CHECK(p.position().x == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(std::abs(p.position().z) < 1e-9);
    CHECK(p.forward().x == doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("look_at rotation is orthonormal") {
    Pose p = look_at_pose(0.4, 0.2, 3.0);
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            double want = i == j ? 1.0 : 0.0;
            CHECK(dot(p.axis(i), p.axis(j)) == doctest::Approx(want).epsilon(1e-12));
        }
    }
    CHECK(p.is_rigid(1e-12));
}

TEST_CASE("look_at rejects degenerate pitch") {
    CHECK_THROWS_AS(look_at_pose(0.0, M_PI / 2, 3.0), Error);
    CHECK_THROWS_AS(look_at_pose(0.0, 0.0, -1.0), Error);
}

TEST_CASE("mirror_pose negates yaw and stays proper") {
    Pose p = look_at_pose(0.5, 0.13, 3.0);
    Pose m = mirror_pose(p);
    CHECK(yaw_of(m) == doctest::Approx(-0.5).epsilon(1e-12));
    CHECK(m.is_rigid(1e-12));
}

TEST_CASE("mirror_pose involution and determinant on random poses") {
    Rng rng(7);
    for (int i = 0; i < 500; ++i) {
        Pose p = random_rig_pose(rng);
        Pose mm = mirror_pose(mirror_pose(p));
        for (int k = 0; k < 16; ++k) {
            CHECK(mm.m[static_cast<std::size_t>(k)] ==
                  doctest::Approx(p.m[static_cast<std::size_t>(k)]).epsilon(1e-12));
        }
        CHECK(mirror_pose(p).is_rigid(1e-9));
    }
}

TEST_CASE("yaw_of inverts construction and ignores pitch") {
    CHECK(yaw_of(look_at_pose(0.7, 0.0, 3.0)) == doctest::Approx(0.7).epsilon(1e-12));
    CHECK(yaw_of(look_at_pose(0.0, 0.3, 3.0)) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(yaw_of(mirror_pose(look_at_pose(0.7, 0.0, 3.0))) ==
          doctest::Approx(-0.7).epsilon(1e-12));
    // On-axis camera has no azimuth.
    Pose p = look_at_pose(0.0, 0.0, 3.0);
    p.at(0, 3) = 0.0;
    p.at(2, 3) = 0.0;
    p.at(1, 3) = 3.0;
    CHECK_THROWS_AS(yaw_of(p), Error);
}

TEST_CASE("project optical axis point hits the principal point") {
    Intrinsics K = Intrinsics::for_resolution(64, 64);
    K.cx = 32.0;
    K.cy = 32.0;
    Pose p = look_at_pose(0.0, 0.0, 3.0);
    Projection pr = project(K, p, Vec3{0, 0, 0});
    CHECK(pr.u == doctest::Approx(32.0).epsilon(1e-12));
    CHECK(pr.v == doctest::Approx(32.0).epsilon(1e-12));
    CHECK(pr.depth == doctest::Approx(3.0).epsilon(1e-12));
}

TEST_CASE("project axis-sign convention") {
    // Fixes the sign convention for the whole repo: world +x maps to smaller
    // u for the frontal camera.
    Intrinsics K = Intrinsics::for_resolution(64, 64);
    Pose p = look_at_pose(0.0, 0.0, 3.0);
    Projection pr = project(K, p, Vec3{0.5, 0, 0});
    CHECK(pr.u == doctest::Approx(32.0 + 64.0 * (-0.5) / 3.0).epsilon(1e-12));
    CHECK(pr.v == doctest::Approx(32.0).epsilon(1e-12));
    // World +y maps to smaller v (rows count down from the top).
    Projection pu = project(K, p, Vec3{0, 0.5, 0});
    CHECK(pu.v < 32.0);
}

TEST_CASE("project rejects points behind the camera") {
    Intrinsics K = Intrinsics::for_resolution(64, 64);
    Pose p = look_at_pose(0.0, 0.0, 3.0);
    CHECK_THROWS_AS(project(K, p, Vec3{0, 0, 5.0}), Error);
    CHECK_THROWS_AS(backproject(K, p, 10, 10, -0.5), Error);
}

TEST_CASE("project/backproject roundtrip on random frustum points") {
    Intrinsics K = Intrinsics::for_resolution(64, 64);
    Rng rng(123);
    for (int i = 0; i < 500; ++i) {
        Pose p = random_rig_pose(rng);
        double u = rng.uniform(0.0, 64.0);
        double v = rng.uniform(0.0, 64.0);
        double depth = rng.uniform(0.5, 6.0);
        Vec3 x = backproject(K, p, u, v, depth);
        Projection pr = project(K, p, x);
        CHECK(std::abs(pr.u - u) < 1e-9);
        CHECK(std::abs(pr.v - v) < 1e-9);
        CHECK(std::abs(pr.depth - depth) < 1e-9);
    }
}

TEST_CASE("backproject corner pixel lies on the corner viewing ray") {
    Intrinsics K = Intrinsics::for_resolution(64, 64);
    Pose p = look_at_pose(0.25, -0.1, 2.5);
    Vec3 x = backproject(K, p, 0.0, 0.0, 2.0);
    // Independent ray equation: X = C + z * (R * ((u-cx)/f, -(v-cy)/f, 1)).
    Vec3 dir_cam{(0.0 - K.cx) / K.focal, -(0.0 - K.cy) / K.focal, 1.0};
    Vec3 on_ray = p.to_world(dir_cam * 2.0);
    CHECK(std::abs(x.x - on_ray.x) < 1e-12);
    CHECK(std::abs(x.y - on_ray.y) < 1e-12);
    CHECK(std::abs(x.z - on_ray.z) < 1e-12);
    // Principal point backprojects onto the forward axis.
    Vec3 axis_pt = backproject(K, p, K.cx, K.cy, 1.7);
    Vec3 d = axis_pt - p.position();
    CHECK(norm(cross(normalized(d), p.forward())) < 1e-12);
}

TEST_CASE("mirror_weight clamps near the frontal view") {
    MirrorWeightParams params; // sigma 0.3, mu 0, k 0.85
    CHECK(mirror_weight(0.0, params) == 0.0);
    double expected = 1.0 - std::exp(-(M_PI / 3) * (M_PI / 3) / (2 * 0.3 * 0.3));
    CHECK(mirror_weight(M_PI / 3, params) == doctest::Approx(expected).epsilon(1e-12));
    CHECK(mirror_weight(M_PI / 3, params) == doctest::Approx(0.9977).epsilon(1e-4));
    // At the branch boundary E == k the weight is 1 - k.
    double boundary = params.sigma * std::sqrt(-2.0 * std::log(params.clamp_k));
    CHECK(mirror_weight(boundary, params) == doctest::Approx(0.15).epsilon(1e-9));
}

TEST_CASE("mirror_weight symmetry and monotone growth") {
    MirrorWeightParams params;
    for (double yaw : {0.05, 0.2, 0.5, 1.0, 1.5}) {
        CHECK(mirror_weight(yaw, params) == doctest::Approx(mirror_weight(-yaw, params)));
    }
    CHECK(mirror_weight(M_PI / 2, params) >= mirror_weight(M_PI / 6, params));
    for (double sigma : {0.1, 0.3, 0.5}) {
        MirrorWeightParams q;
        q.sigma = sigma;
        CHECK(mirror_weight(M_PI / 2, q) >= mirror_weight(M_PI / 6, q));
    }
    MirrorWeightParams bad;
    bad.sigma = -1.0;
    CHECK_THROWS_AS(mirror_weight(0.3, bad), Error);
}

} // TEST_SUITE

