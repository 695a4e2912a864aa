#include "spi/geometry.hpp"

namespace spi::geometry {

bool Pose::is_rigid(double tol) const {
    // Last row must be (0,0,0,1).
    if (std::abs(at(3, 0)) > tol || std::abs(at(3, 1)) > tol || std::abs(at(3, 2)) > tol ||
        std::abs(at(3, 3) - 1.0) > tol) {
        return false;
    }
    // R^T R = I.
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            double want = i == j ? 1.0 : 0.0;
            if (std::abs(dot(axis(i), axis(j)) - want) > tol) return false;
        }
    }
    // det(R) = +1.
    double det = dot(cross(axis(0), axis(1)), axis(2));
    return std::abs(det - 1.0) <= tol;
}

Pose look_at_pose(double yaw, double pitch, double radius) {
    SPI_CHECK(radius > 0.0, "radius must be positive");
    SPI_CHECK(std::abs(pitch) < M_PI / 2 - 1e-9, "degenerate up direction at |pitch| = pi/2");
    Vec3 pos{radius * std::sin(yaw) * std::cos(pitch), radius * std::sin(pitch),
             radius * std::cos(yaw) * std::cos(pitch)};
    Vec3 fwd = normalized(-pos);
    Vec3 world_up{0.0, 1.0, 0.0};
    Vec3 xaxis = normalized(cross(world_up, fwd));
    Vec3 yaxis = cross(fwd, xaxis);
    Pose p;
    p.at(0, 0) = xaxis.x; p.at(1, 0) = xaxis.y; p.at(2, 0) = xaxis.z;
    p.at(0, 1) = yaxis.x; p.at(1, 1) = yaxis.y; p.at(2, 1) = yaxis.z;
    p.at(0, 2) = fwd.x;   p.at(1, 2) = fwd.y;   p.at(2, 2) = fwd.z;
    p.at(0, 3) = pos.x;   p.at(1, 3) = pos.y;   p.at(2, 3) = pos.z;
    return p;
}

Pose mirror_pose(const Pose& p) {
    // S * C * H with S = H = diag(-1,1,1,1): negate row 0 and column 0 of the
    // upper 3x4 block; the (0,0) entry is negated twice. Sign flips are exact
    // in floating point, so the involution property is exact.
    Pose out = p;
    for (int c = 1; c < 4; ++c) out.at(0, c) = -out.at(0, c);
    for (int r = 1; r < 3; ++r) out.at(r, 0) = -out.at(r, 0);
    return out;
}

double yaw_of(const Pose& p) {
    Vec3 pos = p.position();
    SPI_CHECK(std::sqrt(pos.x * pos.x + pos.z * pos.z) > 1e-9,
              "yaw undefined for camera on the world y axis");
    return std::atan2(pos.x, pos.z);
}

double pitch_of(const Pose& p) {
    Vec3 pos = p.position();
    double r = norm(pos);
    SPI_CHECK(r > 1e-9, "pitch undefined for camera at the origin");
    return std::asin(pos.y / r);
}

Projection project(const Intrinsics& K, const Pose& p, const Vec3& point) {
    Vec3 cam = p.to_camera(point);
    SPI_CHECK(cam.z > 1e-9, "point at or behind the camera");
    Projection out;
    out.u = K.cx + K.focal * cam.x / cam.z;
    out.v = K.cy - K.focal * cam.y / cam.z;
    out.depth = cam.z;
    return out;
}

Vec3 backproject(const Intrinsics& K, const Pose& p, double u, double v, double depth) {
    SPI_CHECK(depth > 0.0, "backproject needs positive depth");
    Vec3 cam{(u - K.cx) / K.focal * depth, -(v - K.cy) / K.focal * depth, depth};
    return p.to_world(cam);
}

double peak_gaussian(double yaw, const MirrorWeightParams& params) {
    params.validate();
    double d = yaw - params.mu;
    return std::exp(-d * d / (2.0 * params.sigma * params.sigma));
}

double mirror_weight(double yaw, const MirrorWeightParams& params) {
    double e = peak_gaussian(yaw, params);
    return e <= params.clamp_k ? 1.0 - e : 0.0;
}

} // namespace spi::geometry
