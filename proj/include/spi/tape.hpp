#pragma once

#include <array>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "spi/tensor.hpp"

namespace spi::grad {

class Tape;

/// Handle to a node on a tape. Plain value type; cheap to copy.
struct Var {
    Tape* tape = nullptr;
    int id = -1;
    bool valid() const { return tape != nullptr && id >= 0; }
};

/// Define-by-run reverse-mode tape over Tensor-valued operations. Values are
/// computed eagerly; each op records a closure that pushes adjoints to its
/// parents. One tape serves one loss evaluation and is not shared across
/// threads (ops may parallelize internally).
class Tape {
  public:
    Var leaf(Tensor value, bool requires_grad = false, std::string label = "");

    const Tensor& value(const Var& v) const;
    /// Accumulated adjoint of a node; zeros if the node never received one.
    Tensor gradient(const Var& v) const;

    void set_label(const Var& v, std::string label);
    const std::string& label(const Var& v) const;

    /// Reverse sweep from a scalar loss node. Throws if the loss value is
    /// not finite, naming the node.
    void backward(const Var& loss);

    std::size_t size() const { return nodes_.size(); }

    // --- extension API for custom ops (renderer etc.) ---
    int add_node(Tensor value, std::vector<int> parents, std::function<void()> backward_fn,
                 std::string label = "");
    bool node_requires_grad(int id) const;
    const Tensor& node_value(int id) const;
    /// Adjoint accumulator for a node; allocates zeros on first touch.
    Tensor& node_grad(int id);
    bool node_grad_touched(int id) const;

  private:
    struct Node {
        Tensor value;
        Tensor grad;
        std::vector<int> parents;
        std::function<void()> backward;
        std::string label;
        bool requires_grad = false;
        bool grad_touched = false;
    };
    std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Elementwise / scalar ops.

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_const(const Var& a, double c);
Var neg(const Var& a);
Var square(const Var& a);
Var vlog(const Var& a);
Var vexp(const Var& a);
Var vsum(const Var& a);
Var vmean(const Var& a);
/// sqrt(a + shift); shift keeps the derivative finite at zero.
Var sqrt_shifted(const Var& a, double shift);
/// c0 + sum_i coeff_i * v_i over scalar nodes.
Var linear_combination(Tape& tape, const std::vector<std::pair<double, Var>>& terms,
                       double constant = 0.0);

// ---------------------------------------------------------------------------
// Image ops. Images on the tape are tensors shaped [H, W, C] (or [H, W]).

/// Multiplies an [H,W,C] image by an [H,W] (or [H,W,1]) mask, broadcasting
/// over channels. Both sides may carry gradients.
Var mul_mask(const Var& img, const Var& mask);
/// Mean of |a-b| weighted by an optional constant mask (broadcast over
/// channels). Empty effective mask yields 0.
Var mean_abs_diff(const Var& a, const Var& b, const Tensor* mask = nullptr);
/// Mean of (a-b)^2 with the same masking rules.
Var mean_sq_diff(const Var& a, const Var& b, const Tensor* mask = nullptr);
/// sqrt(masked mean of (a-b)^2 + 1e-20).
Var masked_rms_diff(const Var& a, const Var& b, const Tensor& mask);
/// Horizontal forward differences: [H, W-1, C].
Var grad_x(const Var& a);
/// Vertical forward differences: [H-1, W, C].
Var grad_y(const Var& a);
/// Factor-2 area downsampling of [H,W,C]; odd trailing row/column dropped.
Var downsample2(const Var& a);
/// Circular shift by one pixel along x / y for [H,W] maps.
Var roll_x(const Var& a);
Var roll_y(const Var& a);
/// Crops box [x0,y0)..(x1,y1) from an [H,W,C] image and bilinearly resizes
/// to out x out. Differentiable w.r.t. the image.
Var crop_resize(const Var& img, const std::array<int, 4>& box, int out);
/// Bilinear samples an [H,W,C] image at continuous (x,y) positions given as
/// an [N,2] constant tensor. Out-of-range coordinates are clamped; callers
/// needing invalid flags use the non-differentiable path in spi::warp.
Var bilinear_sample(const Var& img, const Tensor& coords);

// ---------------------------------------------------------------------------
// Matrix ops used by the contextual loss. 2-D tensors [rows, cols].

/// All 3x3xC patches of an [H,W,C] image, flattened to [(H-2)(W-2), 9C].
Var im2col3(const Var& img);
/// Column means: [N,D] -> [D].
Var mean_rows(const Var& x);
/// Subtracts a row vector from every row.
Var sub_rowvec(const Var& x, const Var& mu);
/// Scales every row to unit L2 norm; the norm is smoothed by eps^2.
Var normalize_rows(const Var& x, double eps = 1e-12);
/// A [N,D] * B[M,D]^T -> [N,M].
Var matmul_nt(const Var& a, const Var& b);
/// alpha * x + beta, elementwise.
Var affine(const Var& x, double alpha, double beta);
/// Row minima of [N,M] -> [N]; gradient routes to the first argmin.
Var row_min(const Var& x);
/// x[i,j] / (r[i] + eps).
Var div_rows_shifted(const Var& x, const Var& r, double eps);
/// Softmax over rows (down each column) of [N,M].
Var softmax_cols(const Var& x);
/// Column maxima of [N,M] -> [M]; gradient routes to the first argmax.
Var col_max(const Var& x);

// ---------------------------------------------------------------------------
// Parameter plumbing.

/// Ordered, uniquely named collection of trainable tensors.
struct ParamSet {
    std::vector<std::pair<std::string, Tensor>> items;

    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    bool has(const std::string& name) const;
    void add(std::string name, Tensor t);
};

using BoundVars = std::map<std::string, Var>;
using LossBuilder = std::function<Var(Tape&, const BoundVars&)>;

/// Builds the loss once, runs the reverse sweep, returns gradients keyed
/// like the parameter set. Parameters that never touch the loss get exact
/// zero gradients.
std::map<std::string, Tensor> compute_gradients(const LossBuilder& build, const ParamSet& params,
                                                double* loss_value = nullptr);

struct GradReport {
    struct Entry {
        std::string name;
        double max_rel_error = 0.0;
        int coords_checked = 0;
    };
    std::vector<Entry> entries;
    double epsilon = 0.0;
    double max_rel_error() const;
    std::string to_json() const;
};

/// Central-difference check of compute_gradients on a random coordinate
/// subsample (at least min(64, numel) per tensor). Relative error uses
/// max(|analytic|, |numeric|, 1e-8) as denominator.
GradReport grad_check(const LossBuilder& build, const ParamSet& params, double epsilon,
                      std::uint64_t seed = 0, int coords_per_tensor = 64);

} // namespace spi::grad
