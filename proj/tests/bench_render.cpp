// Quick render benchmark; not part of the test suites.
#include <chrono>
#include <cstdio>

#include "spi/field.hpp"
#include "spi/tape.hpp"

using namespace spi;
using Clock = std::chrono::steady_clock;

int main() {
    auto model = field::PriorDecoder::create(field::PriorDecoder::default_levels(), 7);
    field::LatentCode w = Tensor::randn({model.latent_dim()}, 8, 0.5);
    auto K = geometry::Intrinsics::for_resolution(64, 64);
    auto pose = geometry::look_at_pose(0.5, 0.1, 3.0);

    // warmup + forward timing
    auto out = field::render(model, w, pose, K, 1);
    auto t0 = Clock::now();
    int reps = 20;
    for (int i = 0; i < reps; ++i) out = field::render(model, w, pose, K, i);
    auto t1 = Clock::now();
    double fwd_ms =
        std::chrono::duration_cast<std::chrono::microseconds>(t1 - t0).count() / 1000.0 / reps;
    std::printf("forward 64x64: %.2f ms (threads=%d)\n", fwd_ms, max_threads());

    Tensor target = Tensor::zeros({64, 64, 3});
    auto t2 = Clock::now();
    for (int i = 0; i < reps; ++i) {
        grad::Tape tape;
        auto vars = field::bind_model(tape, model, w, true, true);
        auto r = field::render_op(tape, model, vars, pose, K, i);
        auto loss = grad::mean_sq_diff(r.rgb, tape.leaf(target));
        tape.backward(loss);
    }
    auto t3 = Clock::now();
    double fb_ms =
        std::chrono::duration_cast<std::chrono::microseconds>(t3 - t2).count() / 1000.0 / reps;
    std::printf("forward+backward 64x64 (w+theta): %.2f ms\n", fb_ms);
    return 0;
}
