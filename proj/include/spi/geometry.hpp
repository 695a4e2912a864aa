#pragma once

#include <array>
#include <cmath>

#include "spi/common.hpp"

namespace spi::geometry {

struct Vec3 {
    double x = 0.0, y = 0.0, z = 0.0;

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    Vec3 operator-() const { return {-x, -y, -z}; }
};

inline double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline Vec3 normalized(const Vec3& a) {
    double n = norm(a);
    SPI_CHECK(n > 1e-12, "cannot normalize near-zero vector");
    return a * (1.0 / n);
}

/// Pinhole calibration with square pixels. Pixel (i, j) has continuous
/// coordinate (i + 0.5, j + 0.5); the principal point sits at the image
/// center so horizontal mirroring lands exactly on pixel centers.
struct Intrinsics {
    double focal = 64.0;
    double cx = 32.0;
    double cy = 32.0;
    int width = 64;
    int height = 64;

    static Intrinsics for_resolution(int w, int h) {
        Intrinsics k;
        k.width = w;
        k.height = h;
        k.focal = static_cast<double>(w);
        k.cx = w / 2.0;
        k.cy = h / 2.0;
        return k;
    }

    void validate() const {
        SPI_CHECK(focal > 0.0, "focal must be positive");
        SPI_CHECK(width > 0 && height > 0, "resolution must be positive");
        SPI_CHECK(cx >= 0 && cx <= width && cy >= 0 && cy <= height,
                  "principal point outside image");
    }
};

/// Rigid camera-to-world transform. Rotation columns are the camera axes
/// expressed in world coordinates: column 0 the pixel-u axis, column 1 the
/// world-up-aligned axis (pixel v runs against it), column 2 the forward
/// viewing direction.
struct Pose {
    // Row-major 4x4.
    std::array<double, 16> m{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};

    double& at(int r, int c) { return m[static_cast<std::size_t>(r) * 4 + c]; }
    double at(int r, int c) const { return m[static_cast<std::size_t>(r) * 4 + c]; }

    Vec3 position() const { return {at(0, 3), at(1, 3), at(2, 3)}; }
    Vec3 axis(int col) const { return {at(0, col), at(1, col), at(2, col)}; }
    Vec3 right() const { return axis(0); }
    Vec3 up() const { return axis(1); }
    Vec3 forward() const { return axis(2); }

    /// World -> camera coordinates.
    Vec3 to_camera(const Vec3& p) const {
        Vec3 d = p - position();
        return {dot(axis(0), d), dot(axis(1), d), dot(axis(2), d)};
    }
    /// Camera -> world coordinates.
    Vec3 to_world(const Vec3& p) const {
        return position() + axis(0) * p.x + axis(1) * p.y + axis(2) * p.z;
    }

    bool is_rigid(double tol = 1e-9) const;
};

struct MirrorWeightParams {
    double sigma = 0.3; // radians
    double mu = 0.0;    // radians
    double clamp_k = 0.85;

    void validate() const {
        SPI_CHECK(sigma > 0.0, "sigma must be positive");
        SPI_CHECK(clamp_k > 0.0 && clamp_k < 1.0, "clamp threshold must be in (0,1)");
    }
};

/// Camera on a sphere of `radius` about the origin, azimuth `yaw` about the
/// world y axis (0 = on +z), elevation `pitch`, aimed at the origin with the
/// up axis aligned to world +y.
Pose look_at_pose(double yaw, double pitch, double radius);

/// Reflects a pose across the world plane x = 0: diag(-1,1,1,1) on both
/// sides, so the result is again a proper rigid pose and yaw negates.
Pose mirror_pose(const Pose& p);

/// Azimuth of the camera position about the world y axis, in (-pi, pi].
double yaw_of(const Pose& p);

/// Elevation of the camera position, in (-pi/2, pi/2).
double pitch_of(const Pose& p);

struct Projection {
    double u = 0.0;
    double v = 0.0;
    double depth = 0.0; // camera-frame forward coordinate
};

/// Pinhole projection: u = cx + focal * x/z, v = cy - focal * y/z with
/// (x, y, z) in the camera frame. Throws for points at or behind the camera.
Projection project(const Intrinsics& K, const Pose& p, const Vec3& point);

/// Inverse of project for a given pixel coordinate and positive depth.
Vec3 backproject(const Intrinsics& K, const Pose& p, double u, double v, double depth);

/// Peak-normalized Gaussian importance of the input view. Exposed because
/// the adjacent-pose spread reuses it.
double peak_gaussian(double yaw, const MirrorWeightParams& params);

/// Adaptive weight of the mirror view: 1 - E(yaw) when E(yaw) <= k, else 0.
double mirror_weight(double yaw, const MirrorWeightParams& params);

} // namespace spi::geometry
