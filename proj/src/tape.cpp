#include "spi/tape.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <set>

#include <json.hpp>

#include "spi/common.hpp"

namespace spi::grad {

namespace {

void warn_empty_mask() {
    static std::atomic<bool> warned{false};
    if (!warned.exchange(true)) {
        std::fprintf(stderr, "spi: warning: loss evaluated with an empty mask -> 0\n");
    }
}

struct ImageShape {
    std::int64_t h = 0, w = 0, c = 1;
};

ImageShape image_shape(const Tensor& t) {
    SPI_CHECK(t.ndim() == 2 || t.ndim() == 3, "expected [H,W] or [H,W,C] tensor");
    ImageShape s;
    s.h = t.dim(0);
    s.w = t.dim(1);
    s.c = t.ndim() == 3 ? t.dim(2) : 1;
    return s;
}

} // namespace

// ---------------------------------------------------------------------------
// Tape core

Var Tape::leaf(Tensor value, bool requires_grad, std::string label) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.label = std::move(label);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size() - 1)};
}

const Tensor& Tape::value(const Var& v) const {
    SPI_CHECK(v.tape == this && v.id >= 0 && v.id < static_cast<int>(nodes_.size()),
              "var does not belong to this tape");
    return nodes_[static_cast<std::size_t>(v.id)].value;
}

Tensor Tape::gradient(const Var& v) const {
    const Node& n = nodes_.at(static_cast<std::size_t>(v.id));
    if (n.grad_touched) return n.grad;
    return Tensor::zeros(n.value.shape());
}

void Tape::set_label(const Var& v, std::string label) {
    nodes_.at(static_cast<std::size_t>(v.id)).label = std::move(label);
}

const std::string& Tape::label(const Var& v) const {
    return nodes_.at(static_cast<std::size_t>(v.id)).label;
}

int Tape::add_node(Tensor value, std::vector<int> parents, std::function<void()> backward_fn,
                   std::string label) {
    Node n;
    n.value = std::move(value);
    n.parents = std::move(parents);
    n.label = std::move(label);
    for (int p : n.parents) {
        if (nodes_.at(static_cast<std::size_t>(p)).requires_grad) {
            n.requires_grad = true;
            break;
        }
    }
    if (n.requires_grad) n.backward = std::move(backward_fn);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size() - 1);
}

bool Tape::node_requires_grad(int id) const {
    return nodes_.at(static_cast<std::size_t>(id)).requires_grad;
}

const Tensor& Tape::node_value(int id) const {
    return nodes_.at(static_cast<std::size_t>(id)).value;
}

Tensor& Tape::node_grad(int id) {
    Node& n = nodes_.at(static_cast<std::size_t>(id));
    if (!n.grad_touched) {
        n.grad = Tensor::zeros(n.value.shape());
        n.grad_touched = true;
    }
    return n.grad;
}

bool Tape::node_grad_touched(int id) const {
    return nodes_.at(static_cast<std::size_t>(id)).grad_touched;
}

void Tape::backward(const Var& loss) {
    SPI_CHECK(loss.tape == this, "loss from another tape");
    const Node& ln = nodes_.at(static_cast<std::size_t>(loss.id));
    SPI_CHECK(ln.value.numel() == 1, "backward needs a scalar loss");
    if (!std::isfinite(ln.value.item())) {
        std::string name = ln.label.empty() ? "loss" : ln.label;
        throw Error("non-finite value in '" + name + "'");
    }
    node_grad(loss.id)[0] = 1.0;
    for (int id = loss.id; id >= 0; --id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.grad_touched && n.requires_grad && n.backward) n.backward();
    }
}

// ---------------------------------------------------------------------------
// Op helpers

namespace {

Tape& tape_of(const Var& v) {
    SPI_CHECK(v.valid(), "invalid var");
    return *v.tape;
}

// The backward closures need the freshly created node's id, so ops go
// through a small two-phase writer.
struct OpWriter {
    Tape& t;
    Tensor value;
    std::vector<int> parents;
    const char* label = "";

    template <typename F>
    Var finish(F&& fn) {
        struct Shared {
            F fn;
            explicit Shared(F&& f) : fn(std::move(f)) {}
        };
        auto shared = std::make_shared<Shared>(std::forward<F>(fn));
        Tape* tp = &t;
        // Two-phase: create node with placeholder, then patch the closure via
        // captured id holder.
        auto id_holder = std::make_shared<int>(-1);
        int id = t.add_node(std::move(value), parents,
                            [tp, shared, id_holder]() { shared->fn(*tp, *id_holder); }, label);
        *id_holder = id;
        return Var{tp, id};
    }
};

// convenience accessors inside backward closures
inline const Tensor& val(Tape& t, int id) { return t.node_value(id); }
inline bool wants(Tape& t, int id) { return t.node_requires_grad(id); }

} // namespace

Var add(const Var& a, const Var& b) {
    Tape& t = tape_of(a);
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    SPI_CHECK(av.same_shape(bv), "add: shape mismatch");
    Tensor out = av;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
    int aid = a.id, bid = b.id;
    return OpWriter{t, std::move(out), {aid, bid}, "add"}.finish([aid, bid](Tape& t, int self) {
        const Tensor& g = t.node_grad(self);
        if (wants(t, aid)) {
            Tensor& ga = t.node_grad(aid);
            for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
        }
        if (wants(t, bid)) {
            Tensor& gb = t.node_grad(bid);
            for (std::int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i];
        }
    });
}

Var sub(const Var& a, const Var& b) {
    Tape& t = tape_of(a);
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    SPI_CHECK(av.same_shape(bv), "sub: shape mismatch");
    Tensor out = av;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
    int aid = a.id, bid = b.id;
    return OpWriter{t, std::move(out), {aid, bid}, "sub"}.finish([aid, bid](Tape& t, int self) {
        const Tensor& g = t.node_grad(self);
        if (wants(t, aid)) {
            Tensor& ga = t.node_grad(aid);
            for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
        }
        if (wants(t, bid)) {
            Tensor& gb = t.node_grad(bid);
            for (std::int64_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    Tape& t = tape_of(a);
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    SPI_CHECK(av.same_shape(bv), "mul: shape mismatch");
    Tensor out = av;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
    int aid = a.id, bid = b.id;
    return OpWriter{t, std::move(out), {aid, bid}, "mul"}.finish([aid, bid](Tape& t, int self) {
        const Tensor& g = t.node_grad(self);
        const Tensor& av = val(t, aid);
        const Tensor& bv = val(t, bid);
        if (wants(t, aid)) {
            Tensor& ga = t.node_grad(aid);
            for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv[i];
        }
        if (wants(t, bid)) {
            Tensor& gb = t.node_grad(bid);
            for (std::int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av[i];
        }
    });
}

Var scale(const Var& a, double s) {
    Tape& t = tape_of(a);
    Tensor out = t.value(a);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= s;
    int aid = a.id;
    return OpWriter{t, std::move(out), {aid}, "scale"}.finish([aid, s](Tape& t, int self) {
        const Tensor& g = t.node_grad(self);
        Tensor& ga = t.node_grad(aid);
        for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * s;
    });
}

Var add_const(const Var& a, double c) {
    Tape& t = tape_of(a);
    Tensor out = t.value(a);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += c;
    int aid = a.id;
    return OpWriter{t, std::move(out), {aid}, "add_const"}.finish([aid](Tape& t, int self) {
        const Tensor& g = t.node_grad(self);
        Tensor& ga = t.node_grad(aid);
        for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var square(const Var& a) {
    Tape& t = tape_of(a);
    Tensor out = t.value(a);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= out[i];
    int aid = a.id;
    return OpWriter{t, std::move(out), {aid}, "square"}.finish([aid](Tape& t, int self) {
        const Tensor& g = t.node_grad(self);
        const Tensor& av = val(t, aid);
        Tensor& ga = t.node_grad(aid);
        for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += 2.0 * av[i] * g[i];
    });
}

Var vlog(const Var& a) {
    Tape& t = tape_of(a);
    Tensor out = t.value(a);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::log(out[i]);
    int aid = a.id;
    return OpWriter{t, std::move(out), {aid}, "log"}.finish([aid](Tape& t, int self) {
        const Tensor& g = t.node_grad(self);
        const Tensor& av = val(t, aid);
        Tensor& ga = t.node_grad(aid);
        for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] / av[i];
    });
}

Var vexp(const Var& a) {
    Tape& t = tape_of(a);
    Tensor out = t.value(a);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::exp(out[i]);
    int aid = a.id;
    return OpWriter{t, std::move(out), {aid}, "exp"}.finish([aid](Tape& t, int self) {
        const Tensor& g = t.node_grad(self);
        const Tensor& ov = val(t, self);
        Tensor& ga = t.node_grad(aid);
        for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * ov[i];
    });
}

Var vsum(const Var& a) {
    Tape& t = tape_of(a);
    const Tensor& av = t.value(a);
    double s = 0.0;
    for (std::int64_t i = 0; i < av.numel(); ++i) s += av[i];
    int aid = a.id;
    return OpWriter{t, Tensor::scalar(s), {aid}, "sum"}.finish([aid](Tape& t, int self) {
        double g = t.node_grad(self)[0];
        Tensor& ga = t.node_grad(aid);
        for (std::int64_t i = 0; i < ga.numel(); ++i) ga[i] += g;
    });
}

Var vmean(const Var& a) {
    Tape& t = tape_of(a);
    const Tensor& av = t.value(a);
    SPI_CHECK(av.numel() > 0, "mean of empty tensor");
    return scale(vsum(a), 1.0 / static_cast<double>(av.numel()));
}

Var sqrt_shifted(const Var& a, double shift) {
    Tape& t = tape_of(a);
    Tensor out = t.value(a);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::sqrt(out[i] + shift);
    int aid = a.id;
    return OpWriter{t, std::move(out), {aid}, "sqrt"}.finish([aid](Tape& t, int self) {
        const Tensor& g = t.node_grad(self);
        const Tensor& ov = val(t, self);
        Tensor& ga = t.node_grad(aid);
        for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * 0.5 / ov[i];
    });
}

Var linear_combination(Tape& tape, const std::vector<std::pair<double, Var>>& terms,
                       double constant) {
    double v = constant;
    std::vector<int> parents;
    std::vector<double> coeffs;
    for (const auto& [c, var] : terms) {
        SPI_CHECK(var.tape == &tape, "linear_combination: var from another tape");
        SPI_CHECK(tape.value(var).numel() == 1, "linear_combination needs scalars");
        v += c * tape.value(var).item();
        parents.push_back(var.id);
        coeffs.push_back(c);
    }
    return OpWriter{tape, Tensor::scalar(v), parents, "lincomb"}.finish(
        [parents, coeffs](Tape& t, int self) {
            double g = t.node_grad(self)[0];
            for (std::size_t k = 0; k < parents.size(); ++k) {
                if (wants(t, parents[k])) t.node_grad(parents[k])[0] += coeffs[k] * g;
            }
        });
}

// ---------------------------------------------------------------------------
// Image ops

Var mul_mask(const Var& img, const Var& mask) {
    Tape& t = tape_of(img);
    const Tensor& iv = t.value(img);
    const Tensor& mv = t.value(mask);
    ImageShape is = image_shape(iv);
    ImageShape ms = image_shape(mv);
    SPI_CHECK(is.h == ms.h && is.w == ms.w && ms.c == 1, "mul_mask: mask must be [H,W]");
    Tensor out = iv;
    std::int64_t np = is.h * is.w;
    for (std::int64_t p = 0; p < np; ++p) {
        for (std::int64_t c = 0; c < is.c; ++c) out[p * is.c + c] *= mv[p];
    }
    int iid = img.id, mid = mask.id;
    std::int64_t C = is.c;
    return OpWriter{t, std::move(out), {iid, mid}, "mul_mask"}.finish(
        [iid, mid, np, C](Tape& t, int self) {
            const Tensor& g = t.node_grad(self);
            const Tensor& iv = val(t, iid);
            const Tensor& mv = val(t, mid);
            if (wants(t, iid)) {
                Tensor& gi = t.node_grad(iid);
                for (std::int64_t p = 0; p < np; ++p)
                    for (std::int64_t c = 0; c < C; ++c) gi[p * C + c] += g[p * C + c] * mv[p];
            }
            if (wants(t, mid)) {
                Tensor& gm = t.node_grad(mid);
                for (std::int64_t p = 0; p < np; ++p) {
                    double acc = 0.0;
                    for (std::int64_t c = 0; c < C; ++c) acc += g[p * C + c] * iv[p * C + c];
                    gm[p] += acc;
                }
            }
        });
}

namespace {

// Shared core of mean_abs_diff / mean_sq_diff. mode 0 = |.|, 1 = (.)^2.
Var masked_mean_diff(const Var& a, const Var& b, const Tensor* mask, int mode) {
    Tape& t = tape_of(a);
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    SPI_CHECK(av.same_shape(bv), "loss: shape mismatch");
    std::int64_t n = av.numel();
    std::shared_ptr<Tensor> weights; // per-entry weights, or null for uniform
    double wsum = static_cast<double>(n);
    if (mask != nullptr) {
        ImageShape is = image_shape(av);
        ImageShape ms = image_shape(*mask);
        SPI_CHECK(is.h == ms.h && is.w == ms.w && ms.c == 1, "loss mask must be [H,W]");
        weights = std::make_shared<Tensor>(Tensor::zeros({n}));
        wsum = 0.0;
        std::int64_t np = is.h * is.w;
        for (std::int64_t p = 0; p < np; ++p) {
            double m = (*mask)[p];
            for (std::int64_t c = 0; c < is.c; ++c) (*weights)[p * is.c + c] = m;
            wsum += m * static_cast<double>(is.c);
        }
    }
    if (wsum <= 0.0) {
        warn_empty_mask();
        return t.leaf(Tensor::scalar(0.0));
    }
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        double d = av[i] - bv[i];
        double w = weights ? (*weights)[i] : 1.0;
        acc += w * (mode == 0 ? std::abs(d) : d * d);
    }
    double value = acc / wsum;
    int aid = a.id, bid = b.id;
    return OpWriter{t, Tensor::scalar(value), {aid, bid}, mode == 0 ? "mean_abs" : "mean_sq"}
        .finish([aid, bid, weights, wsum, mode](Tape& t, int self) {
            double g = t.node_grad(self)[0] / wsum;
            const Tensor& av = val(t, aid);
            const Tensor& bv = val(t, bid);
            bool wa = wants(t, aid), wb = wants(t, bid);
            Tensor* ga = wa ? &t.node_grad(aid) : nullptr;
            Tensor* gb = wb ? &t.node_grad(bid) : nullptr;
            for (std::int64_t i = 0; i < av.numel(); ++i) {
                double d = av[i] - bv[i];
                double w = weights ? (*weights)[i] : 1.0;
                double dd = mode == 0 ? (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0)) : 2.0 * d;
                double push = g * w * dd;
                if (wa) (*ga)[i] += push;
                if (wb) (*gb)[i] -= push;
            }
        });
}

} // namespace

Var mean_abs_diff(const Var& a, const Var& b, const Tensor* mask) {
    return masked_mean_diff(a, b, mask, 0);
}

Var mean_sq_diff(const Var& a, const Var& b, const Tensor* mask) {
    return masked_mean_diff(a, b, mask, 1);
}

Var masked_rms_diff(const Var& a, const Var& b, const Tensor& mask) {
    Tape& t = tape_of(a);
    double wsum = 0.0;
    for (std::int64_t i = 0; i < mask.numel(); ++i) wsum += mask[i];
    if (wsum <= 0.0) {
        warn_empty_mask();
        return t.leaf(Tensor::scalar(0.0));
    }
    return sqrt_shifted(mean_sq_diff(a, b, &mask), 1e-20);
}

Var grad_x(const Var& a) {
    Tape& t = tape_of(a);
    const Tensor& av = t.value(a);
    ImageShape is = image_shape(av);
    SPI_CHECK(is.w >= 2, "grad_x needs width >= 2");
    Tensor out({is.h, is.w - 1, is.c});
    for (std::int64_t y = 0; y < is.h; ++y)
        for (std::int64_t x = 0; x + 1 < is.w; ++x)
            for (std::int64_t c = 0; c < is.c; ++c)
                out[(y * (is.w - 1) + x) * is.c + c] =
                    av[(y * is.w + x + 1) * is.c + c] - av[(y * is.w + x) * is.c + c];
    int aid = a.id;
    return OpWriter{t, std::move(out), {aid}, "grad_x"}.finish([aid, is](Tape& t, int self) {
        const Tensor& g = t.node_grad(self);
        Tensor& ga = t.node_grad(aid);
        for (std::int64_t y = 0; y < is.h; ++y)
            for (std::int64_t x = 0; x + 1 < is.w; ++x)
                for (std::int64_t c = 0; c < is.c; ++c) {
                    double gv = g[(y * (is.w - 1) + x) * is.c + c];
                    ga[(y * is.w + x + 1) * is.c + c] += gv;
                    ga[(y * is.w + x) * is.c + c] -= gv;
                }
    });
}

Var grad_y(const Var& a) {
    Tape& t = tape_of(a);
    const Tensor& av = t.value(a);
    ImageShape is = image_shape(av);
    SPI_CHECK(is.h >= 2, "grad_y needs height >= 2");
    Tensor out({is.h - 1, is.w, is.c});
    for (std::int64_t y = 0; y + 1 < is.h; ++y)
        for (std::int64_t x = 0; x < is.w; ++x)
            for (std::int64_t c = 0; c < is.c; ++c)
                out[(y * is.w + x) * is.c + c] =
                    av[((y + 1) * is.w + x) * is.c + c] - av[(y * is.w + x) * is.c + c];
    int aid = a.id;
    return OpWriter{t, std::move(out), {aid}, "grad_y"}.finish([aid, is](Tape& t, int self) {
        const Tensor& g = t.node_grad(self);
        Tensor& ga = t.node_grad(aid);
        for (std::int64_t y = 0; y + 1 < is.h; ++y)
            for (std::int64_t x = 0; x < is.w; ++x)
                for (std::int64_t c = 0; c < is.c; ++c) {
                    double gv = g[(y * is.w + x) * is.c + c];
                    ga[((y + 1) * is.w + x) * is.c + c] += gv;
                    ga[(y * is.w + x) * is.c + c] -= gv;
                }
    });
}

Var downsample2(const Var& a) {
    Tape& t = tape_of(a);
    const Tensor& av = t.value(a);
    ImageShape is = image_shape(av);
    std::int64_t oh = is.h / 2, ow = is.w / 2;
    SPI_CHECK(oh >= 1 && ow >= 1, "downsample2: image too small");
    Tensor out(av.ndim() == 3 ? std::vector<std::int64_t>{oh, ow, is.c}
                              : std::vector<std::int64_t>{oh, ow});
    for (std::int64_t y = 0; y < oh; ++y)
        for (std::int64_t x = 0; x < ow; ++x)
            for (std::int64_t c = 0; c < is.c; ++c) {
                double s = av[((2 * y) * is.w + 2 * x) * is.c + c] +
                           av[((2 * y) * is.w + 2 * x + 1) * is.c + c] +
                           av[((2 * y + 1) * is.w + 2 * x) * is.c + c] +
                           av[((2 * y + 1) * is.w + 2 * x + 1) * is.c + c];
                out[(y * ow + x) * is.c + c] = 0.25 * s;
            }
    int aid = a.id;
    return OpWriter{t, std::move(out), {aid}, "downsample2"}.finish(
        [aid, is, oh, ow](Tape& t, int self) {
            const Tensor& g = t.node_grad(self);
            Tensor& ga = t.node_grad(aid);
            for (std::int64_t y = 0; y < oh; ++y)
                for (std::int64_t x = 0; x < ow; ++x)
                    for (std::int64_t c = 0; c < is.c; ++c) {
                        double gv = 0.25 * g[(y * ow + x) * is.c + c];
                        ga[((2 * y) * is.w + 2 * x) * is.c + c] += gv;
                        ga[((2 * y) * is.w + 2 * x + 1) * is.c + c] += gv;
                        ga[((2 * y + 1) * is.w + 2 * x) * is.c + c] += gv;
                        ga[((2 * y + 1) * is.w + 2 * x + 1) * is.c + c] += gv;
                    }
        });
}

namespace {

Var roll_impl(const Var& a, bool along_x) {
    Tape& t = tape_of(a);
    const Tensor& av = t.value(a);
    SPI_CHECK(av.ndim() == 2, "roll expects an [H,W] map");
    std::int64_t h = av.dim(0), w = av.dim(1);
    Tensor out(av.shape());
    for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) {
            std::int64_t sy = along_x ? y : (y + 1) % h;
            std::int64_t sx = along_x ? (x + 1) % w : x;
            out[y * w + x] = av[sy * w + sx];
        }
    int aid = a.id;
    return OpWriter{t, std::move(out), {aid}, along_x ? "roll_x" : "roll_y"}.finish(
        [aid, h, w, along_x](Tape& t, int self) {
            const Tensor& g = t.node_grad(self);
            Tensor& ga = t.node_grad(aid);
            for (std::int64_t y = 0; y < h; ++y)
                for (std::int64_t x = 0; x < w; ++x) {
                    std::int64_t sy = along_x ? y : (y + 1) % h;
                    std::int64_t sx = along_x ? (x + 1) % w : x;
                    ga[sy * w + sx] += g[y * w + x];
                }
        });
}

} // namespace

Var roll_x(const Var& a) { return roll_impl(a, true); }
Var roll_y(const Var& a) { return roll_impl(a, false); }

Var crop_resize(const Var& img, const std::array<int, 4>& box, int out) {
    Tape& t = tape_of(img);
    const Tensor& iv = t.value(img);
    ImageShape is = image_shape(iv);
    int x0 = box[0], y0 = box[1], x1 = box[2], y1 = box[3];
    SPI_CHECK(x0 >= 0 && y0 >= 0 && x1 <= is.w && y1 <= is.h && x1 > x0 && y1 > y0,
              "degenerate or out-of-bounds crop box");
    std::int64_t bw = x1 - x0, bh = y1 - y0;
    // Precompute sampling taps; they are constant w.r.t. the image.
    struct Tap {
        std::int64_t i00, i01, i10, i11;
        double w00, w01, w10, w11;
    };
    auto taps = std::make_shared<std::vector<Tap>>();
    taps->reserve(static_cast<std::size_t>(out) * out);
    Tensor outv({out, out, is.c});
    for (int oy = 0; oy < out; ++oy) {
        double sy = y0 + (oy + 0.5) * static_cast<double>(bh) / out - 0.5;
        sy = std::min(std::max(sy, static_cast<double>(y0)), static_cast<double>(y1 - 1));
        std::int64_t iy0 = static_cast<std::int64_t>(std::floor(sy));
        std::int64_t iy1 = std::min<std::int64_t>(iy0 + 1, y1 - 1);
        double fy = sy - static_cast<double>(iy0);
        for (int ox = 0; ox < out; ++ox) {
            double sx = x0 + (ox + 0.5) * static_cast<double>(bw) / out - 0.5;
            sx = std::min(std::max(sx, static_cast<double>(x0)), static_cast<double>(x1 - 1));
            std::int64_t ix0 = static_cast<std::int64_t>(std::floor(sx));
            std::int64_t ix1 = std::min<std::int64_t>(ix0 + 1, x1 - 1);
            double fx = sx - static_cast<double>(ix0);
            Tap tp;
            tp.i00 = (iy0 * is.w + ix0) * is.c;
            tp.i01 = (iy0 * is.w + ix1) * is.c;
            tp.i10 = (iy1 * is.w + ix0) * is.c;
            tp.i11 = (iy1 * is.w + ix1) * is.c;
            tp.w00 = (1 - fy) * (1 - fx);
            tp.w01 = (1 - fy) * fx;
            tp.w10 = fy * (1 - fx);
            tp.w11 = fy * fx;
            for (std::int64_t c = 0; c < is.c; ++c) {
                outv[(static_cast<std::int64_t>(oy) * out + ox) * is.c + c] =
                    tp.w00 * iv[tp.i00 + c] + tp.w01 * iv[tp.i01 + c] + tp.w10 * iv[tp.i10 + c] +
                    tp.w11 * iv[tp.i11 + c];
            }
            taps->push_back(tp);
        }
    }
    int iid = img.id;
    std::int64_t C = is.c;
    return OpWriter{t, std::move(outv), {iid}, "crop_resize"}.finish(
        [iid, taps, C](Tape& t, int self) {
            const Tensor& g = t.node_grad(self);
            Tensor& gi = t.node_grad(iid);
            for (std::size_t k = 0; k < taps->size(); ++k) {
                const Tap& tp = (*taps)[k];
                for (std::int64_t c = 0; c < C; ++c) {
                    double gv = g[static_cast<std::int64_t>(k) * C + c];
                    gi[tp.i00 + c] += tp.w00 * gv;
                    gi[tp.i01 + c] += tp.w01 * gv;
                    gi[tp.i10 + c] += tp.w10 * gv;
                    gi[tp.i11 + c] += tp.w11 * gv;
                }
            }
        });
}

Var bilinear_sample(const Var& img, const Tensor& coords) {
    Tape& t = tape_of(img);
    const Tensor& iv = t.value(img);
    ImageShape is = image_shape(iv);
    SPI_CHECK(coords.ndim() == 2 && coords.dim(1) == 2, "coords must be [N,2]");
    std::int64_t n = coords.dim(0);
    struct Tap {
        std::int64_t i00, i01, i10, i11;
        double w00, w01, w10, w11;
    };
    auto taps = std::make_shared<std::vector<Tap>>();
    taps->reserve(static_cast<std::size_t>(n));
    Tensor outv({n, is.c});
    for (std::int64_t k = 0; k < n; ++k) {
        double x = std::min(std::max(coords[k * 2 + 0], 0.0), static_cast<double>(is.w - 1));
        double y = std::min(std::max(coords[k * 2 + 1], 0.0), static_cast<double>(is.h - 1));
        std::int64_t x0 = static_cast<std::int64_t>(std::floor(x));
        std::int64_t y0 = static_cast<std::int64_t>(std::floor(y));
        std::int64_t x1 = std::min(x0 + 1, is.w - 1);
        std::int64_t y1 = std::min(y0 + 1, is.h - 1);
        double fx = x - static_cast<double>(x0);
        double fy = y - static_cast<double>(y0);
        Tap tp;
        tp.i00 = (y0 * is.w + x0) * is.c;
        tp.i01 = (y0 * is.w + x1) * is.c;
        tp.i10 = (y1 * is.w + x0) * is.c;
        tp.i11 = (y1 * is.w + x1) * is.c;
        tp.w00 = (1 - fy) * (1 - fx);
        tp.w01 = (1 - fy) * fx;
        tp.w10 = fy * (1 - fx);
        tp.w11 = fy * fx;
        for (std::int64_t c = 0; c < is.c; ++c) {
            outv[k * is.c + c] = tp.w00 * iv[tp.i00 + c] + tp.w01 * iv[tp.i01 + c] +
                                 tp.w10 * iv[tp.i10 + c] + tp.w11 * iv[tp.i11 + c];
        }
        taps->push_back(tp);
    }
    int iid = img.id;
    std::int64_t C = is.c;
    return OpWriter{t, std::move(outv), {iid}, "bilinear_sample"}.finish(
        [iid, taps, C](Tape& t, int self) {
            const Tensor& g = t.node_grad(self);
            Tensor& gi = t.node_grad(iid);
            for (std::size_t k = 0; k < taps->size(); ++k) {
                const Tap& tp = (*taps)[k];
                for (std::int64_t c = 0; c < C; ++c) {
                    double gv = g[static_cast<std::int64_t>(k) * C + c];
                    gi[tp.i00 + c] += tp.w00 * gv;
                    gi[tp.i01 + c] += tp.w01 * gv;
                    gi[tp.i10 + c] += tp.w10 * gv;
                    gi[tp.i11 + c] += tp.w11 * gv;
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Matrix ops

Var im2col3(const Var& img) {
    Tape& t = tape_of(img);
    const Tensor& iv = t.value(img);
    ImageShape is = image_shape(iv);
    SPI_CHECK(is.h >= 3 && is.w >= 3, "im2col3 needs at least a 3x3 image");
    std::int64_t ph = is.h - 2, pw = is.w - 2;
    std::int64_t n = ph * pw, d = 9 * is.c;
    Tensor out({n, d});
    for (std::int64_t py = 0; py < ph; ++py)
        for (std::int64_t px = 0; px < pw; ++px) {
            std::int64_t row = py * pw + px;
            std::int64_t f = 0;
            for (std::int64_t dy = 0; dy < 3; ++dy)
                for (std::int64_t dx = 0; dx < 3; ++dx)
                    for (std::int64_t c = 0; c < is.c; ++c, ++f)
                        out[row * d + f] = iv[((py + dy) * is.w + (px + dx)) * is.c + c];
        }
    int iid = img.id;
    return OpWriter{t, std::move(out), {iid}, "im2col3"}.finish(
        [iid, is, ph, pw, d](Tape& t, int self) {
            const Tensor& g = t.node_grad(self);
            Tensor& gi = t.node_grad(iid);
            for (std::int64_t py = 0; py < ph; ++py)
                for (std::int64_t px = 0; px < pw; ++px) {
                    std::int64_t row = py * pw + px;
                    std::int64_t f = 0;
                    for (std::int64_t dy = 0; dy < 3; ++dy)
                        for (std::int64_t dx = 0; dx < 3; ++dx)
                            for (std::int64_t c = 0; c < is.c; ++c, ++f)
                                gi[((py + dy) * is.w + (px + dx)) * is.c + c] += g[row * d + f];
                }
        });
}

Var mean_rows(const Var& x) {
    Tape& t = tape_of(x);
    const Tensor& xv = t.value(x);
    SPI_CHECK(xv.ndim() == 2, "mean_rows expects [N,D]");
    std::int64_t n = xv.dim(0), d = xv.dim(1);
    Tensor out({d});
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < d; ++j) out[j] += xv[i * d + j];
    for (std::int64_t j = 0; j < d; ++j) out[j] /= static_cast<double>(n);
    int xid = x.id;
    return OpWriter{t, std::move(out), {xid}, "mean_rows"}.finish([xid, n, d](Tape& t, int self) {
        const Tensor& g = t.node_grad(self);
        Tensor& gx = t.node_grad(xid);
        double inv = 1.0 / static_cast<double>(n);
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < d; ++j) gx[i * d + j] += g[j] * inv;
    });
}

Var sub_rowvec(const Var& x, const Var& mu) {
    Tape& t = tape_of(x);
    const Tensor& xv = t.value(x);
    const Tensor& mv = t.value(mu);
    SPI_CHECK(xv.ndim() == 2 && mv.ndim() == 1 && mv.dim(0) == xv.dim(1),
              "sub_rowvec: shape mismatch");
    std::int64_t n = xv.dim(0), d = xv.dim(1);
    Tensor out = xv;
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < d; ++j) out[i * d + j] -= mv[j];
    int xid = x.id, mid = mu.id;
    return OpWriter{t, std::move(out), {xid, mid}, "sub_rowvec"}.finish(
        [xid, mid, n, d](Tape& t, int self) {
            const Tensor& g = t.node_grad(self);
            if (wants(t, xid)) {
                Tensor& gx = t.node_grad(xid);
                for (std::int64_t i = 0; i < n * d; ++i) gx[i] += g[i];
            }
            if (wants(t, mid)) {
                Tensor& gm = t.node_grad(mid);
                for (std::int64_t i = 0; i < n; ++i)
                    for (std::int64_t j = 0; j < d; ++j) gm[j] -= g[i * d + j];
            }
        });
}

Var normalize_rows(const Var& x, double eps) {
    Tape& t = tape_of(x);
    const Tensor& xv = t.value(x);
    SPI_CHECK(xv.ndim() == 2, "normalize_rows expects [N,D]");
    std::int64_t n = xv.dim(0), d = xv.dim(1);
    auto norms = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n));
    Tensor out = xv;
    for (std::int64_t i = 0; i < n; ++i) {
        double s = eps * eps;
        for (std::int64_t j = 0; j < d; ++j) s += xv[i * d + j] * xv[i * d + j];
        double nn = std::sqrt(s);
        (*norms)[static_cast<std::size_t>(i)] = nn;
        for (std::int64_t j = 0; j < d; ++j) out[i * d + j] /= nn;
    }
    int xid = x.id;
    return OpWriter{t, std::move(out), {xid}, "normalize_rows"}.finish(
        [xid, norms, n, d](Tape& t, int self) {
            const Tensor& g = t.node_grad(self);
            const Tensor& ov = val(t, self);
            Tensor& gx = t.node_grad(xid);
            for (std::int64_t i = 0; i < n; ++i) {
                double nn = (*norms)[static_cast<std::size_t>(i)];
                double gdot = 0.0;
                for (std::int64_t j = 0; j < d; ++j) gdot += g[i * d + j] * ov[i * d + j];
                for (std::int64_t j = 0; j < d; ++j)
                    gx[i * d + j] += (g[i * d + j] - ov[i * d + j] * gdot) / nn;
            }
        });
}

Var matmul_nt(const Var& a, const Var& b) {
    Tape& t = tape_of(a);
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    SPI_CHECK(av.ndim() == 2 && bv.ndim() == 2 && av.dim(1) == bv.dim(1),
              "matmul_nt: inner dimensions differ");
    std::int64_t n = av.dim(0), m = bv.dim(0), d = av.dim(1);
    Tensor out({n, m});
    parallel_for(n, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) {
            const double* arow = av.data() + i * d;
            for (std::int64_t j = 0; j < m; ++j) {
                const double* brow = bv.data() + j * d;
                double s = 0.0;
                for (std::int64_t k = 0; k < d; ++k) s += arow[k] * brow[k];
                out[i * m + j] = s;
            }
        }
    });
    int aid = a.id, bid = b.id;
    return OpWriter{t, std::move(out), {aid, bid}, "matmul_nt"}.finish(
        [aid, bid, n, m, d](Tape& t, int self) {
            const Tensor& g = t.node_grad(self);
            const Tensor& av = val(t, aid);
            const Tensor& bv = val(t, bid);
            if (wants(t, aid)) {
                Tensor& ga = t.node_grad(aid);
                parallel_for(n, [&](std::int64_t lo, std::int64_t hi) {
                    for (std::int64_t i = lo; i < hi; ++i)
                        for (std::int64_t j = 0; j < m; ++j) {
                            double gv = g[i * m + j];
                            if (gv == 0.0) continue;
                            for (std::int64_t k = 0; k < d; ++k)
                                ga[i * d + k] += gv * bv[j * d + k];
                        }
                });
            }
            if (wants(t, bid)) {
                Tensor& gb = t.node_grad(bid);
                parallel_for(m, [&](std::int64_t lo, std::int64_t hi) {
                    for (std::int64_t j = lo; j < hi; ++j)
                        for (std::int64_t i = 0; i < n; ++i) {
                            double gv = g[i * m + j];
                            if (gv == 0.0) continue;
                            for (std::int64_t k = 0; k < d; ++k)
                                gb[j * d + k] += gv * av[i * d + k];
                        }
                });
            }
        });
}

Var affine(const Var& x, double alpha, double beta) {
    Tape& t = tape_of(x);
    Tensor out = t.value(x);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = alpha * out[i] + beta;
    int xid = x.id;
    return OpWriter{t, std::move(out), {xid}, "affine"}.finish([xid, alpha](Tape& t, int self) {
        const Tensor& g = t.node_grad(self);
        Tensor& gx = t.node_grad(xid);
        for (std::int64_t i = 0; i < g.numel(); ++i) gx[i] += alpha * g[i];
    });
}

Var row_min(const Var& x) {
    Tape& t = tape_of(x);
    const Tensor& xv = t.value(x);
    SPI_CHECK(xv.ndim() == 2, "row_min expects [N,M]");
    std::int64_t n = xv.dim(0), m = xv.dim(1);
    auto arg = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(n));
    Tensor out({n});
    for (std::int64_t i = 0; i < n; ++i) {
        double best = xv[i * m];
        std::int64_t bj = 0;
        for (std::int64_t j = 1; j < m; ++j) {
            if (xv[i * m + j] < best) {
                best = xv[i * m + j];
                bj = j;
            }
        }
        out[i] = best;
        (*arg)[static_cast<std::size_t>(i)] = bj;
    }
    int xid = x.id;
    return OpWriter{t, std::move(out), {xid}, "row_min"}.finish([xid, arg, m](Tape& t, int self) {
        const Tensor& g = t.node_grad(self);
        Tensor& gx = t.node_grad(xid);
        for (std::int64_t i = 0; i < g.numel(); ++i)
            gx[i * m + (*arg)[static_cast<std::size_t>(i)]] += g[i];
    });
}

Var div_rows_shifted(const Var& x, const Var& r, double eps) {
    Tape& t = tape_of(x);
    const Tensor& xv = t.value(x);
    const Tensor& rv = t.value(r);
    SPI_CHECK(xv.ndim() == 2 && rv.ndim() == 1 && rv.dim(0) == xv.dim(0),
              "div_rows_shifted: shape mismatch");
    std::int64_t n = xv.dim(0), m = xv.dim(1);
    Tensor out = xv;
    for (std::int64_t i = 0; i < n; ++i) {
        double denom = rv[i] + eps;
        for (std::int64_t j = 0; j < m; ++j) out[i * m + j] /= denom;
    }
    int xid = x.id, rid = r.id;
    return OpWriter{t, std::move(out), {xid, rid}, "div_rows"}.finish(
        [xid, rid, n, m, eps](Tape& t, int self) {
            const Tensor& g = t.node_grad(self);
            const Tensor& ov = val(t, self);
            const Tensor& rv = val(t, rid);
            if (wants(t, xid)) {
                Tensor& gx = t.node_grad(xid);
                for (std::int64_t i = 0; i < n; ++i) {
                    double denom = rv[i] + eps;
                    for (std::int64_t j = 0; j < m; ++j) gx[i * m + j] += g[i * m + j] / denom;
                }
            }
            if (wants(t, rid)) {
                Tensor& gr = t.node_grad(rid);
                for (std::int64_t i = 0; i < n; ++i) {
                    double denom = rv[i] + eps;
                    double acc = 0.0;
                    for (std::int64_t j = 0; j < m; ++j) acc += g[i * m + j] * ov[i * m + j];
                    gr[i] -= acc / denom;
                }
            }
        });
}

Var softmax_cols(const Var& x) {
    Tape& t = tape_of(x);
    const Tensor& xv = t.value(x);
    SPI_CHECK(xv.ndim() == 2, "softmax_cols expects [N,M]");
    std::int64_t n = xv.dim(0), m = xv.dim(1);
    Tensor out({n, m});
    parallel_for(m, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t j = lo; j < hi; ++j) {
            double mx = -1e300;
            for (std::int64_t i = 0; i < n; ++i) mx = std::max(mx, xv[i * m + j]);
            double s = 0.0;
            for (std::int64_t i = 0; i < n; ++i) {
                double e = std::exp(xv[i * m + j] - mx);
                out[i * m + j] = e;
                s += e;
            }
            double inv = 1.0 / s;
            for (std::int64_t i = 0; i < n; ++i) out[i * m + j] *= inv;
        }
    });
    int xid = x.id;
    return OpWriter{t, std::move(out), {xid}, "softmax_cols"}.finish(
        [xid, n, m](Tape& t, int self) {
            const Tensor& g = t.node_grad(self);
            const Tensor& ov = val(t, self);
            Tensor& gx = t.node_grad(xid);
            parallel_for(m, [&](std::int64_t lo, std::int64_t hi) {
                for (std::int64_t j = lo; j < hi; ++j) {
                    double dot = 0.0;
                    for (std::int64_t i = 0; i < n; ++i) dot += g[i * m + j] * ov[i * m + j];
                    for (std::int64_t i = 0; i < n; ++i)
                        gx[i * m + j] += ov[i * m + j] * (g[i * m + j] - dot);
                }
            });
        });
}

Var col_max(const Var& x) {
    Tape& t = tape_of(x);
    const Tensor& xv = t.value(x);
    SPI_CHECK(xv.ndim() == 2, "col_max expects [N,M]");
    std::int64_t n = xv.dim(0), m = xv.dim(1);
    auto arg = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(m));
    Tensor out({m});
    for (std::int64_t j = 0; j < m; ++j) {
        double best = xv[j];
        std::int64_t bi = 0;
        for (std::int64_t i = 1; i < n; ++i) {
            if (xv[i * m + j] > best) {
                best = xv[i * m + j];
                bi = i;
            }
        }
        out[j] = best;
        (*arg)[static_cast<std::size_t>(j)] = bi;
    }
    int xid = x.id;
    return OpWriter{t, std::move(out), {xid}, "col_max"}.finish([xid, arg, m](Tape& t, int self) {
        const Tensor& g = t.node_grad(self);
        Tensor& gx = t.node_grad(xid);
        for (std::int64_t j = 0; j < g.numel(); ++j)
            gx[(*arg)[static_cast<std::size_t>(j)] * m + j] += g[j];
    });
}

// ---------------------------------------------------------------------------
// Parameter plumbing

Tensor& ParamSet::at(const std::string& name) {
    for (auto& [n, t] : items)
        if (n == name) return t;
    throw Error("unknown parameter: " + name);
}

const Tensor& ParamSet::at(const std::string& name) const {
    for (const auto& [n, t] : items)
        if (n == name) return t;
    throw Error("unknown parameter: " + name);
}

bool ParamSet::has(const std::string& name) const {
    for (const auto& [n, t] : items)
        if (n == name) return true;
    return false;
}

void ParamSet::add(std::string name, Tensor t) {
    SPI_CHECK(!has(name), "duplicate parameter name: " + name);
    items.emplace_back(std::move(name), std::move(t));
}

std::map<std::string, Tensor> compute_gradients(const LossBuilder& build, const ParamSet& params,
                                                double* loss_value) {
    Tape tape;
    BoundVars vars;
    std::vector<std::pair<std::string, Var>> leaves;
    for (const auto& [name, tensor] : params.items) {
        Var v = tape.leaf(tensor, true, name);
        vars[name] = v;
        leaves.emplace_back(name, v);
    }
    Var loss = build(tape, vars);
    SPI_CHECK(tape.value(loss).numel() == 1, "loss must be scalar");
    if (loss_value != nullptr) *loss_value = tape.value(loss).item();
    tape.backward(loss);
    std::map<std::string, Tensor> grads;
    for (const auto& [name, v] : leaves) grads[name] = tape.gradient(v);
    return grads;
}

double GradReport::max_rel_error() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_error);
    return m;
}

std::string GradReport::to_json() const {
    nlohmann::json j;
    j["epsilon"] = epsilon;
    j["max_rel_error"] = max_rel_error();
    j["params"] = nlohmann::json::array();
    for (const auto& e : entries) {
        j["params"].push_back({{"name", e.name},
                               {"max_rel_error", e.max_rel_error},
                               {"coords_checked", e.coords_checked}});
    }
    return j.dump(2);
}

GradReport grad_check(const LossBuilder& build, const ParamSet& params, double epsilon,
                      std::uint64_t seed, int coords_per_tensor) {
    SPI_CHECK(epsilon > 0.0, "epsilon must be positive");
    GradReport report;
    report.epsilon = epsilon;

    auto eval_loss = [&](const ParamSet& p) {
        Tape tape;
        BoundVars vars;
        for (const auto& [name, tensor] : p.items) vars[name] = tape.leaf(tensor, false, name);
        Var loss = build(tape, vars);
        return tape.value(loss).item();
    };

    std::map<std::string, Tensor> analytic = compute_gradients(build, params);

    ParamSet scratch = params;
    for (std::size_t pi = 0; pi < params.items.size(); ++pi) {
        const auto& [name, tensor] = params.items[pi];
        std::int64_t n = tensor.numel();
        std::set<std::int64_t> coords;
        Rng rng(hash_combine(seed, pi + 1));
        if (n <= coords_per_tensor) {
            for (std::int64_t i = 0; i < n; ++i) coords.insert(i);
        } else {
            while (static_cast<int>(coords.size()) < coords_per_tensor)
                coords.insert(static_cast<std::int64_t>(rng.next_u64() % static_cast<std::uint64_t>(n)));
        }
        GradReport::Entry entry;
        entry.name = name;
        entry.coords_checked = static_cast<int>(coords.size());
        Tensor& slot = scratch.at(name);
        for (std::int64_t idx : coords) {
            double saved = slot[idx];
            slot[idx] = saved + epsilon;
            double fp = eval_loss(scratch);
            slot[idx] = saved - epsilon;
            double fm = eval_loss(scratch);
            slot[idx] = saved;
            double numeric = (fp - fm) / (2.0 * epsilon);
            double an = analytic[name][idx];
            double denom = std::max({std::abs(an), std::abs(numeric), 1e-8});
            entry.max_rel_error = std::max(entry.max_rel_error, std::abs(an - numeric) / denom);
        }
        report.entries.push_back(entry);
    }
    return report;
}

} // namespace spi::grad
