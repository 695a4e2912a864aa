#include <doctest.h>

#include <cmath>

#include "spi/field.hpp"
#include "spi/tape.hpp"

using namespace spi;
using namespace spi::grad;

namespace {

field::PriorDecoder tiny_model(std::uint64_t seed, int hidden = 16) {
    return field::PriorDecoder::create(field::PriorDecoder::tiny_levels(), seed, hidden);
}

geometry::Intrinsics tiny_K() { return geometry::Intrinsics::for_resolution(8, 8); }

} // namespace

TEST_SUITE("grad") {

TEST_CASE("quadratic loss has exact gradient 2w") {
    ParamSet p;
    p.add("w", Tensor::randn({10}, 42));
    auto build = [](Tape& t, const BoundVars& v) { return vsum(square(v.at("w"))); };
    auto grads = compute_gradients(build, p);
    for (std::int64_t i = 0; i < 10; ++i) {
        CHECK(grads["w"][i] == doctest::Approx(2.0 * p.at("w")[i]).epsilon(1e-15));
    }
}

TEST_CASE("parameter not influencing the loss gets exact zeros") {
    ParamSet p;
    p.add("used", Tensor::randn({4}, 1));
    p.add("unused", Tensor::randn({4}, 2));
    auto build = [](Tape& t, const BoundVars& v) { return vmean(v.at("used")); };
    auto grads = compute_gradients(build, p);
    for (std::int64_t i = 0; i < 4; ++i) CHECK(grads["unused"][i] == 0.0);
}

TEST_CASE("non-finite loss raises an error naming the term") {
    ParamSet p;
    p.add("w", Tensor::full({2}, -1.0));
    auto build = [](Tape& t, const BoundVars& v) {
        Var bad = vlog(v.at("w")); // log of negative -> nan
        Var loss = vsum(bad);
        t.set_label(loss, "bad_term");
        return loss;
    };
    CHECK_THROWS_WITH_AS(compute_gradients(build, p), doctest::Contains("bad_term"), Error);
}

TEST_CASE("backward is linear in the loss combination") {
    ParamSet p;
    p.add("x", Tensor::randn({6}, 3));
    auto l1 = [](Tape& t, const BoundVars& v) { return vmean(square(v.at("x"))); };
    auto l2 = [](Tape& t, const BoundVars& v) { return vsum(vexp(scale(v.at("x"), 0.3))); };
    double a = 0.7, b = -1.3;
    auto combo = [&](Tape& t, const BoundVars& v) {
        return linear_combination(t, {{a, l1(t, v)}, {b, l2(t, v)}});
    };
    auto g1 = compute_gradients(l1, p);
    auto g2 = compute_gradients(l2, p);
    auto gc = compute_gradients(combo, p);
    for (std::int64_t i = 0; i < 6; ++i) {
        CHECK(gc["x"][i] == doctest::Approx(a * g1["x"][i] + b * g2["x"][i]).epsilon(1e-9));
    }
}

TEST_CASE("grad_check on smooth tensor-op composites") {
    ParamSet p;
    p.add("img", Tensor::randn({6, 6, 3}, 11, 0.5));
    p.add("vec", Tensor::randn({4}, 12));
    Tensor target = Tensor::randn({6, 6, 3}, 13, 0.5);
    Tensor mask = Tensor::full({6, 6}, 1.0);
    mask[0] = 0.0;
    auto build = [&](Tape& t, const BoundVars& v) {
        Var img = v.at("img");
        Var tgt = t.leaf(target);
        Var a = mean_sq_diff(img, tgt, &mask);
        Var b = mean_abs_diff(downsample2(img), downsample2(tgt));
        Var c = vmean(square(grad_x(img)));
        Var d = vmean(square(grad_y(img)));
        Var e = vmean(square(crop_resize(img, {1, 1, 5, 5}, 8)));
        Var f = vmean(vexp(scale(v.at("vec"), 0.5)));
        return linear_combination(
            t, {{1.0, a}, {0.5, b}, {0.3, c}, {0.3, d}, {0.2, e}, {0.1, f}});
    };
    auto report = grad_check(build, p, 1e-4, 99);
    CHECK(report.max_rel_error() < 1e-3);
}

TEST_CASE("grad_check on matrix-op chain (contextual-loss machinery)") {
    ParamSet p;
    p.add("x", Tensor::randn({5, 5, 3}, 21, 0.4));
    Tensor yimg = Tensor::randn({5, 5, 3}, 22, 0.4);
    auto build = [&](Tape& t, const BoundVars& v) {
        Var xp = im2col3(v.at("x"));
        Var yp = im2col3(t.leaf(yimg));
        Var mu = mean_rows(yp);
        Var xc = normalize_rows(sub_rowvec(xp, mu));
        Var yc = normalize_rows(sub_rowvec(yp, mu));
        Var cos = matmul_nt(xc, yc);
        Var d = affine(cos, -1.0, 1.0);
        Var dn = div_rows_shifted(d, row_min(d), 1e-5);
        Var aff = softmax_cols(affine(dn, -2.0, 2.0));
        Var cx = neg(vlog(vmean(col_max(aff))));
        return cx;
    };
    auto report = grad_check(build, p, 1e-5, 31);
    CHECK(report.max_rel_error() < 1e-3);
}

TEST_CASE("render gradcheck against central differences") {
    auto model = tiny_model(7);
    auto K = tiny_K();
    auto pose = geometry::look_at_pose(0.45, 0.1, 3.0);
    field::LatentCode w = Tensor::randn({model.latent_dim()}, 17, 0.5);
    field::NoiseMap n = Tensor::randn({K.height, K.width}, 18, 0.3);
    Tensor target_rgb = Tensor::randn({K.height, K.width, 3}, 19, 0.2);
    Tensor target_depth = Tensor::full({K.height, K.width}, 3.0);

    ParamSet params = field::make_param_set(model, w, &n);
    auto build = [&](Tape& t, const BoundVars& v) {
        field::ModelVars mv = field::assemble_model_vars(t, model, v);
        field::RenderVars r = field::render_op(t, model, mv, pose, K, 5, true);
        Var lr = mean_sq_diff(r.rgb, t.leaf(target_rgb));
        Var ld = mean_sq_diff(r.depth, t.leaf(target_depth));
        Var lo = vmean(square(r.opacity));
        return linear_combination(t, {{1.0, lr}, {0.2, ld}, {0.1, lo}});
    };
    auto report = grad_check(build, params, 1e-3, 55);
    for (const auto& e : report.entries) {
        INFO(e.name, " rel err ", e.max_rel_error);
        CHECK(e.max_rel_error < 1e-3);
    }
}

TEST_CASE("gradients vanish at an exact reconstruction minimum") {
    auto model = tiny_model(8);
    auto K = tiny_K();
    auto pose = geometry::look_at_pose(-0.3, 0.0, 3.0);
    field::LatentCode w = Tensor::randn({model.latent_dim()}, 27, 0.5);
    Tensor target(Tensor::zeros({K.height, K.width, 3}));
    {
        auto out = field::render(model, w, pose, K, 3);
        for (std::size_t i = 0; i < out.rgb.data.size(); ++i) target[static_cast<std::int64_t>(i)] = out.rgb.data[i];
    }
    ParamSet params = field::make_param_set(model, w);
    auto build = [&](Tape& t, const BoundVars& v) {
        field::ModelVars mv = field::assemble_model_vars(t, model, v);
        field::RenderVars r = field::render_op(t, model, mv, pose, K, 3);
        return mean_sq_diff(r.rgb, t.leaf(target));
    };
    double loss = 0.0;
    auto grads = compute_gradients(build, params, &loss);
    CHECK(loss == 0.0);
    for (const auto& [name, g] : grads) {
        for (std::int64_t i = 0; i < g.numel(); ++i) {
            INFO(name);
            CHECK(g[i] == 0.0);
        }
    }
}

} // TEST_SUITE
