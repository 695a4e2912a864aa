#pragma once

#include <optional>
#include <vector>

#include "spi/geometry.hpp"
#include "spi/image.hpp"
#include "spi/tape.hpp"
#include "spi/tensor.hpp"

namespace spi::field {

using geometry::Intrinsics;
using geometry::Pose;

/// One multi-resolution feature-grid level: `basis` volumes of
/// resolution^3 voxels with `channels` features each, mixed by the
/// per-level latent coefficients.
struct GridLevelSpec {
    int resolution = 16;
    int basis = 8;
    int channels = 8;
};

struct RenderSettings {
    double near = 1.5;
    double far = 4.5;
    int samples = 48;
    double background = 1.0; // white
    bool early_termination = true;
    double density_scale = 1.0; // test hook for the opacity monotonicity property
};

/// The generator: latent-modulated feature grids plus a two-layer decoder
/// producing raw density (softplus) and raw RGB (logistic). Color is
/// view-independent.
struct PriorDecoder {
    std::vector<GridLevelSpec> levels;
    std::vector<Tensor> grids; // per level: shape [B, R, R, R, F]
    Tensor w1;                 // [hidden, feature_dim]
    Tensor b1;                 // [hidden]
    Tensor w2;                 // [4, hidden]
    Tensor b2;                 // [4]
    int hidden = 32;
    double noise_gain = 0.05;
    RenderSettings render;

    int latent_dim() const;
    int feature_dim() const;
    void validate() const;

    /// Randomly initialized model with the default two-level layout.
    static PriorDecoder create(const std::vector<GridLevelSpec>& levels, std::uint64_t seed,
                               int hidden = 32);
    static std::vector<GridLevelSpec> default_levels();
    /// Small layout used by gradient checks and smoke tests.
    static std::vector<GridLevelSpec> tiny_levels();

    /// Rounds all parameters to f32, the checkpoint precision.
    void quantize_f32();
    std::uint64_t params_hash() const;
};

/// Flat per-level coefficient vector (the W+ analogue), length
/// model.latent_dim(); level l owns the contiguous slice [offset_l, B_l).
using LatentCode = Tensor;

/// Per-view noise image at render resolution, shape [H, W].
using NoiseMap = Tensor;

struct RenderOutput {
    Image rgb;     // H x W x 3, unclamped (clamp only for display)
    Image depth;   // H x W
    Image opacity; // H x W
};

/// Per-level modulated grids: M_l = sum_b w_b * G_{l,b}.
std::vector<Tensor> modulate_grids(const PriorDecoder& model, const LatentCode& w);

/// Density and color at a world point (zero density outside [-1,1]^3).
struct QueryResult {
    double density = 0.0;
    double rgb[3] = {0, 0, 0};
};
QueryResult query(const PriorDecoder& model, const LatentCode& w, const geometry::Vec3& x);
/// Concatenated per-level features at a point (before the decoder).
std::vector<double> query_features(const PriorDecoder& model, const LatentCode& w,
                                   const geometry::Vec3& x);

/// Volumetric render with stratified, seed-paired jitter. Resolution comes
/// from the intrinsics. `noise` (if given) must match the resolution; it is
/// added to the composited RGB scaled by noise_gain.
RenderOutput render(const PriorDecoder& model, const LatentCode& w, const Pose& pose,
                    const Intrinsics& K, std::uint64_t seed = 0,
                    const NoiseMap* noise = nullptr);

/// Depth channels for a pose set under one stratification seed.
std::vector<Image> render_depth_set(const PriorDecoder& model, const LatentCode& w,
                                    const std::vector<Pose>& poses, const Intrinsics& K,
                                    std::uint64_t seed = 0);

// ---------------------------------------------------------------------------
// Differentiable path.

/// Tape handles for every trainable piece of (w, theta, n). Unused entries
/// stay invalid.
struct ModelVars {
    grad::Var w;                  // [latent_dim]
    std::vector<grad::Var> grids; // per level [B,R,R,R,F]
    grad::Var w1, b1, w2, b2;
    grad::Var noise; // [H, W], optional
};

/// Canonical parameter set for (w, theta, n): names "latent", "grid<l>",
/// "dec_w1".."dec_b2", and optionally "noise".
grad::ParamSet make_param_set(const PriorDecoder& model, const LatentCode& w,
                              const NoiseMap* noise = nullptr);

/// Wires already-bound leaves (named as in make_param_set) into ModelVars,
/// creating the per-level modulation nodes. This is the path grad_check
/// exercises.
ModelVars assemble_model_vars(grad::Tape& tape, const PriorDecoder& specs,
                              const grad::BoundVars& vars);

/// Binds model tensors (and optionally a latent + noise) onto a tape.
/// `train_latent` / `train_theta` / `train_noise` control requires_grad.
/// The model reference supplies only specs and render settings afterwards;
/// all parameter values flow from the tape.
ModelVars bind_model(grad::Tape& tape, const PriorDecoder& model, const LatentCode& w,
                     bool train_latent, bool train_theta, const NoiseMap* noise = nullptr,
                     bool train_noise = false);

struct RenderVars {
    grad::Var rgb;     // [H, W, 3]
    grad::Var depth;   // [H, W]
    grad::Var opacity; // [H, W]
};

/// Differentiable render. Gradients flow to the latent, the grids, the
/// decoder and the noise map as bound in `vars`. `with_noise` selects
/// whether vars.noise feeds the RGB output.
RenderVars render_op(grad::Tape& tape, const PriorDecoder& model, const ModelVars& vars,
                     const Pose& pose, const Intrinsics& K, std::uint64_t seed,
                     bool with_noise = false, const RenderSettings* settings_override = nullptr);

} // namespace spi::field
