#include "spi/field.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace spi::field {

using geometry::Vec3;

namespace {

constexpr int kMaxSamples = 256;
constexpr int kMaxFeat = 64;
constexpr int kMaxHidden = 64;

inline double stable_softplus(double x) {
    if (x > 30.0) return x;
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

inline double stable_sigmoid(double x) {
    if (x >= 0.0) {
        double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    double e = std::exp(x);
    return e / (1.0 + e);
}

inline double jitter_unit(std::uint64_t seed, int fold_x, int y, int k) {
    std::uint64_t h = hash_combine(seed, static_cast<std::uint64_t>(fold_x));
    h = hash_combine(h, static_cast<std::uint64_t>(y));
    h = hash_combine(h, static_cast<std::uint64_t>(k));
    return u64_to_unit(h);
}

struct LevelView {
    const double* m = nullptr; // modulated grid [R,R,R,F]
    int r = 0;
    int f = 0;
};

struct ModelView {
    std::vector<LevelView> levels;
    int featdim = 0;
    int hidden = 0;
    const double* w1 = nullptr;
    const double* b1 = nullptr;
    const double* w2 = nullptr;
    const double* b2 = nullptr;
    RenderSettings s;
};

struct Ray {
    Vec3 origin;
    Vec3 dir;     // unnormalized; t is the camera-frame forward coordinate
    double dlen;  // |dir|
};

inline Ray pixel_ray(const Pose& pose, const Intrinsics& K, int x, int y) {
    double dx = (x + 0.5 - K.cx) / K.focal;
    double dy = -(y + 0.5 - K.cy) / K.focal;
    Ray r;
    r.origin = pose.position();
    r.dir = Vec3{pose.at(0, 0) * dx + pose.at(0, 1) * dy + pose.at(0, 2),
                 pose.at(1, 0) * dx + pose.at(1, 1) * dy + pose.at(1, 2),
                 pose.at(2, 0) * dx + pose.at(2, 1) * dy + pose.at(2, 2)};
    r.dlen = std::sqrt(dx * dx + dy * dy + 1.0);
    return r;
}

/// Trilinear feature gather from one modulated level; feat += not used,
/// writes F values.
inline void gather_level(const LevelView& lv, const Vec3& p, double* feat) {
    const int r = lv.r;
    const int f = lv.f;
    double gx = (p.x + 1.0) * 0.5 * (r - 1);
    double gy = (p.y + 1.0) * 0.5 * (r - 1);
    double gz = (p.z + 1.0) * 0.5 * (r - 1);
    int ix = std::min(static_cast<int>(gx), r - 2);
    int iy = std::min(static_cast<int>(gy), r - 2);
    int iz = std::min(static_cast<int>(gz), r - 2);
    double fx = gx - ix, fy = gy - iy, fz = gz - iz;
    const std::int64_t sx = f;
    const std::int64_t sy = static_cast<std::int64_t>(r) * f;
    const std::int64_t sz = static_cast<std::int64_t>(r) * r * f;
    const double* base = lv.m + (static_cast<std::int64_t>(iz) * r + iy) * r * f +
                         static_cast<std::int64_t>(ix) * f;
    const double w000 = (1 - fz) * (1 - fy) * (1 - fx);
    const double w001 = (1 - fz) * (1 - fy) * fx;
    const double w010 = (1 - fz) * fy * (1 - fx);
    const double w011 = (1 - fz) * fy * fx;
    const double w100 = fz * (1 - fy) * (1 - fx);
    const double w101 = fz * (1 - fy) * fx;
    const double w110 = fz * fy * (1 - fx);
    const double w111 = fz * fy * fx;
    for (int c = 0; c < f; ++c) {
        feat[c] = w000 * base[c] + w001 * base[sx + c] + w010 * base[sy + c] +
                  w011 * base[sy + sx + c] + w100 * base[sz + c] + w101 * base[sz + sx + c] +
                  w110 * base[sz + sy + c] + w111 * base[sz + sy + sx + c];
    }
}

/// Scatter of dfeat through the same trilinear weights.
inline void scatter_level(const LevelView& lv, const Vec3& p, const double* dfeat, double* dm) {
    const int r = lv.r;
    const int f = lv.f;
    double gx = (p.x + 1.0) * 0.5 * (r - 1);
    double gy = (p.y + 1.0) * 0.5 * (r - 1);
    double gz = (p.z + 1.0) * 0.5 * (r - 1);
    int ix = std::min(static_cast<int>(gx), r - 2);
    int iy = std::min(static_cast<int>(gy), r - 2);
    int iz = std::min(static_cast<int>(gz), r - 2);
    double fx = gx - ix, fy = gy - iy, fz = gz - iz;
    const std::int64_t sx = f;
    const std::int64_t sy = static_cast<std::int64_t>(r) * f;
    const std::int64_t sz = static_cast<std::int64_t>(r) * r * f;
    double* base = dm + (static_cast<std::int64_t>(iz) * r + iy) * r * f +
                   static_cast<std::int64_t>(ix) * f;
    const double w000 = (1 - fz) * (1 - fy) * (1 - fx);
    const double w001 = (1 - fz) * (1 - fy) * fx;
    const double w010 = (1 - fz) * fy * (1 - fx);
    const double w011 = (1 - fz) * fy * fx;
    const double w100 = fz * (1 - fy) * (1 - fx);
    const double w101 = fz * (1 - fy) * fx;
    const double w110 = fz * fy * (1 - fx);
    const double w111 = fz * fy * fx;
    for (int c = 0; c < f; ++c) {
        double g = dfeat[c];
        base[c] += w000 * g;
        base[sx + c] += w001 * g;
        base[sy + c] += w010 * g;
        base[sy + sx + c] += w011 * g;
        base[sz + c] += w100 * g;
        base[sz + sx + c] += w101 * g;
        base[sz + sy + c] += w110 * g;
        base[sz + sy + sx + c] += w111 * g;
    }
}

inline bool inside_box(const Vec3& p) {
    return p.x >= -1.0 && p.x <= 1.0 && p.y >= -1.0 && p.y <= 1.0 && p.z >= -1.0 && p.z <= 1.0;
}

/// Decoder forward for one sample. Returns sigma (scaled density) and color.
inline void decode(const ModelView& mv, const double* feat, double* hidden_out, double* sigma,
                   double* color) {
    const int fd = mv.featdim;
    const int hd = mv.hidden;
    for (int h = 0; h < hd; ++h) {
        const double* wrow = mv.w1 + static_cast<std::int64_t>(h) * fd;
        double acc = mv.b1[h];
        for (int k = 0; k < fd; ++k) acc += wrow[k] * feat[k];
        hidden_out[h] = acc / std::sqrt(1.0 + acc * acc); // smooth bounded activation
    }
    double raw[4];
    for (int o = 0; o < 4; ++o) {
        const double* wrow = mv.w2 + static_cast<std::int64_t>(o) * hd;
        double acc = mv.b2[o];
        for (int h = 0; h < hd; ++h) acc += wrow[h] * hidden_out[h];
        raw[o] = acc;
    }
    *sigma = stable_softplus(raw[0]);
    color[0] = stable_sigmoid(raw[1]);
    color[1] = stable_sigmoid(raw[2]);
    color[2] = stable_sigmoid(raw[3]);
}

/// Per-ray stash filled when the backward pass recomputes the march.
struct RayStash {
    int count = 0;      // samples marched (early termination may stop short)
    double t_final = 0; // transmittance after the marched samples
    bool inside[kMaxSamples];
    double t[kMaxSamples];
    double sigma[kMaxSamples];
    double e[kMaxSamples]; // exp(-sigma * delta * scale)
    double alpha[kMaxSamples];
    double trans[kMaxSamples]; // T before the sample
    double color[kMaxSamples][3];
    double feat[kMaxSamples][kMaxFeat];
    double hid[kMaxSamples][kMaxHidden];
};

/// Marches one pixel. Outputs composited rgb/depth/opacity; optionally
/// records per-sample state for the backward pass.
void march_pixel(const ModelView& mv, const Ray& ray, std::uint64_t seed, int fold_x, int y,
                 double* out_rgb, double* out_depth, double* out_opac, RayStash* stash) {
    const RenderSettings& s = mv.s;
    const int n = s.samples;
    const double step = (s.far - s.near) / n;
    const double delta = step * ray.dlen * s.density_scale;

    double T = 1.0;
    double rgb[3] = {0, 0, 0};
    double depth = 0.0;
    double opac = 0.0;
    int k = 0;
    for (; k < n; ++k) {
        double t = s.near + (k + jitter_unit(seed, fold_x, y, k)) * step;
        Vec3 p = ray.origin + ray.dir * t;
        bool in = inside_box(p);
        if (stash != nullptr) {
            stash->inside[k] = in;
            stash->t[k] = t;
            stash->trans[k] = T;
        }
        if (!in) continue;
        double feat[kMaxFeat];
        int off = 0;
        for (const auto& lv : mv.levels) {
            gather_level(lv, p, feat + off);
            off += lv.f;
        }
        double hid[kMaxHidden];
        double sigma, color[3];
        decode(mv, feat, hid, &sigma, color);
        double x = sigma * delta;
        double e = std::exp(-x);
        double alpha = -std::expm1(-x);
        double w = T * alpha;
        rgb[0] += w * color[0];
        rgb[1] += w * color[1];
        rgb[2] += w * color[2];
        depth += w * t;
        opac += w;
        T *= e;
        if (stash != nullptr) {
            stash->sigma[k] = sigma;
            stash->e[k] = e;
            stash->alpha[k] = alpha;
            stash->color[k][0] = color[0];
            stash->color[k][1] = color[1];
            stash->color[k][2] = color[2];
            std::memcpy(stash->feat[k], feat, sizeof(double) * static_cast<std::size_t>(mv.featdim));
            std::memcpy(stash->hid[k], hid, sizeof(double) * static_cast<std::size_t>(mv.hidden));
        }
        if (s.early_termination && T < 1e-12) {
            ++k;
            break;
        }
    }
    rgb[0] += T * s.background;
    rgb[1] += T * s.background;
    rgb[2] += T * s.background;
    depth += T * s.far;
    if (stash != nullptr) {
        stash->count = k;
        stash->t_final = T;
    }
    out_rgb[0] = rgb[0];
    out_rgb[1] = rgb[1];
    out_rgb[2] = rgb[2];
    *out_depth = depth;
    *out_opac = opac;
}

ModelView make_view(const PriorDecoder& model, const std::vector<const double*>& modulated,
                    const RenderSettings* override_settings) {
    ModelView mv;
    for (std::size_t l = 0; l < model.levels.size(); ++l) {
        mv.levels.push_back(LevelView{modulated[l], model.levels[l].resolution,
                                      model.levels[l].channels});
    }
    mv.featdim = model.feature_dim();
    mv.hidden = model.hidden;
    mv.w1 = model.w1.data();
    mv.b1 = model.b1.data();
    mv.w2 = model.w2.data();
    mv.b2 = model.b2.data();
    mv.s = override_settings != nullptr ? *override_settings : model.render;
    return mv;
}

/// View whose parameter pointers come from tape node values, so perturbed
/// leaves (finite differences) and trained leaves flow through rendering.
ModelView make_view_from_tape(grad::Tape& t, const PriorDecoder& specs,
                              const std::vector<int>& mod_ids, int w1, int b1, int w2, int b2,
                              const RenderSettings& settings) {
    ModelView mv;
    for (std::size_t l = 0; l < specs.levels.size(); ++l) {
        mv.levels.push_back(LevelView{t.node_value(mod_ids[l]).data(),
                                      specs.levels[l].resolution, specs.levels[l].channels});
    }
    mv.featdim = specs.feature_dim();
    mv.hidden = specs.hidden;
    mv.w1 = t.node_value(w1).data();
    mv.b1 = t.node_value(b1).data();
    mv.w2 = t.node_value(w2).data();
    mv.b2 = t.node_value(b2).data();
    mv.s = settings;
    return mv;
}

void render_forward(const ModelView& mv, const Pose& pose, const Intrinsics& K,
                    std::uint64_t seed, const double* noise, double noise_gain, double* rgb,
                    double* depth, double* opac) {
    const int w = K.width, h = K.height;
    parallel_for(h, [&](std::int64_t ylo, std::int64_t yhi) {
        for (std::int64_t y = ylo; y < yhi; ++y) {
            for (int x = 0; x < w; ++x) {
                Ray ray = pixel_ray(pose, K, x, static_cast<int>(y));
                int fold = std::min(x, w - 1 - x);
                std::int64_t pi = y * w + x;
                march_pixel(mv, ray, seed, fold, static_cast<int>(y), rgb + pi * 3, depth + pi,
                            opac + pi, nullptr);
                if (noise != nullptr) {
                    double nz = noise_gain * noise[pi];
                    rgb[pi * 3 + 0] += nz;
                    rgb[pi * 3 + 1] += nz;
                    rgb[pi * 3 + 2] += nz;
                }
            }
        }
    });
}

/// Gradient sinks for one backward pass. Null members are skipped.
struct GradSinks {
    std::vector<double*> dm; // per level, full-size accumulators
    double* dw1 = nullptr;
    double* db1 = nullptr;
    double* dw2 = nullptr;
    double* db2 = nullptr;
    double* dnoise = nullptr; // [H,W], per-pixel rows are disjoint
};

void backward_pixel(const ModelView& mv, const Ray& ray, const RayStash& st, const double* drgb,
                    double ddepth, double dopac, GradSinks& sinks) {
    const RenderSettings& s = mv.s;
    const double step = (s.far - s.near) / s.samples;
    const double delta = step * ray.dlen * s.density_scale;
    const bool want_m = !sinks.dm.empty();
    const bool want_dec = sinks.dw1 != nullptr;

    // d(loss)/d(T_N) from the background terms.
    double d_tn = (drgb[0] + drgb[1] + drgb[2]) * s.background + ddepth * s.far;
    // Reverse sweep over samples: S accumulates dT contributions of later
    // samples plus the background term.
    double S = d_tn * st.t_final;
    for (int k = st.count - 1; k >= 0; --k) {
        if (!st.inside[k]) continue;
        double T = st.trans[k];
        double alpha = st.alpha[k];
        double e = std::max(st.e[k], 1e-300);
        double w = T * alpha;
        double dw = drgb[0] * st.color[k][0] + drgb[1] * st.color[k][1] +
                    drgb[2] * st.color[k][2] + ddepth * st.t[k] + dopac;
        double dalpha = dw * T - S / e;
        S += dw * w;
        double dsigma = dalpha * delta * e;
        double draw[4];
        // softplus'(r0) = sigmoid(r0) = 1 - exp(-sigma)
        draw[0] = dsigma * (-std::expm1(-st.sigma[k]));
        for (int c = 0; c < 3; ++c) {
            double col = st.color[k][c];
            draw[c + 1] = drgb[c] * w * col * (1.0 - col);
        }
        // Decoder backward.
        double dh[kMaxHidden];
        for (int h = 0; h < mv.hidden; ++h) {
            double acc = mv.w2[h] * draw[0] + mv.w2[mv.hidden + h] * draw[1] +
                         mv.w2[2 * mv.hidden + h] * draw[2] + mv.w2[3 * mv.hidden + h] * draw[3];
            double hv = st.hid[k][h];
            double one_m = 1.0 - hv * hv;
            dh[h] = acc * one_m * std::sqrt(one_m);
        }
        if (want_dec) {
            for (int o = 0; o < 4; ++o) {
                double g = draw[o];
                double* row = sinks.dw2 + static_cast<std::int64_t>(o) * mv.hidden;
                for (int h = 0; h < mv.hidden; ++h) row[h] += g * st.hid[k][h];
                sinks.db2[o] += g;
            }
            for (int h = 0; h < mv.hidden; ++h) {
                double g = dh[h];
                double* row = sinks.dw1 + static_cast<std::int64_t>(h) * mv.featdim;
                for (int f = 0; f < mv.featdim; ++f) row[f] += g * st.feat[k][f];
                sinks.db1[h] += g;
            }
        }
        if (want_m) {
            double dfeat[kMaxFeat];
            for (int f = 0; f < mv.featdim; ++f) {
                double acc = 0.0;
                for (int h = 0; h < mv.hidden; ++h)
                    acc += mv.w1[static_cast<std::int64_t>(h) * mv.featdim + f] * dh[h];
                dfeat[f] = acc;
            }
            Vec3 p = ray.origin + ray.dir * st.t[k];
            int off = 0;
            for (std::size_t l = 0; l < mv.levels.size(); ++l) {
                scatter_level(mv.levels[l], p, dfeat + off, sinks.dm[l]);
                off += mv.levels[l].f;
            }
        }
    }
}

} // namespace

// ---------------------------------------------------------------------------
// PriorDecoder

int PriorDecoder::latent_dim() const {
    int n = 0;
    for (const auto& l : levels) n += l.basis;
    return n;
}

int PriorDecoder::feature_dim() const {
    int n = 0;
    for (const auto& l : levels) n += l.channels;
    return n;
}

void PriorDecoder::validate() const {
    SPI_CHECK(!levels.empty(), "model needs at least one grid level");
    SPI_CHECK(levels.size() == grids.size(), "level/grid count mismatch");
    SPI_CHECK(feature_dim() <= kMaxFeat && hidden <= kMaxHidden, "model too large for renderer");
    SPI_CHECK(render.samples >= 1 && render.samples <= kMaxSamples, "bad sample count");
    SPI_CHECK(render.near > 0 && render.far > render.near, "bad near/far");
    for (std::size_t l = 0; l < levels.size(); ++l) {
        const auto& spec = levels[l];
        SPI_CHECK(spec.resolution >= 2 && spec.basis >= 1 && spec.channels >= 1,
                  "bad level spec");
        SPI_CHECK(grids[l].shape() ==
                      std::vector<std::int64_t>({spec.basis, spec.resolution, spec.resolution,
                                                 spec.resolution, spec.channels}),
                  "grid tensor shape mismatch");
        SPI_CHECK(grids[l].all_finite(), "grid values must be finite");
    }
    SPI_CHECK(w1.shape() == std::vector<std::int64_t>({hidden, feature_dim()}), "w1 shape");
    SPI_CHECK(b1.shape() == std::vector<std::int64_t>({hidden}), "b1 shape");
    SPI_CHECK(w2.shape() == std::vector<std::int64_t>({4, hidden}), "w2 shape");
    SPI_CHECK(b2.shape() == std::vector<std::int64_t>({4}), "b2 shape");
}

PriorDecoder PriorDecoder::create(const std::vector<GridLevelSpec>& levels, std::uint64_t seed,
                                  int hidden) {
    PriorDecoder m;
    m.levels = levels;
    m.hidden = hidden;
    int fd = 0;
    for (const auto& l : levels) fd += l.channels;
    int idx = 0;
    for (const auto& l : levels) {
        m.grids.push_back(Tensor::randn({l.basis, l.resolution, l.resolution, l.resolution,
                                         l.channels},
                                        hash_combine(seed, 100 + idx), 0.1));
        ++idx;
    }
    m.w1 = Tensor::randn({hidden, fd}, hash_combine(seed, 1), 1.0 / std::sqrt(fd));
    m.b1 = Tensor::zeros({hidden});
    m.w2 = Tensor::randn({4, hidden}, hash_combine(seed, 2), 0.3 / std::sqrt(hidden));
    m.b2 = Tensor::zeros({4});
    m.b2[0] = -0.5; // mildly transparent start
    return m;
}

std::vector<GridLevelSpec> PriorDecoder::default_levels() {
    return {GridLevelSpec{16, 8, 8}, GridLevelSpec{32, 8, 8}};
}

std::vector<GridLevelSpec> PriorDecoder::tiny_levels() {
    return {GridLevelSpec{4, 4, 4}, GridLevelSpec{4, 4, 4}};
}

void PriorDecoder::quantize_f32() {
    for (auto& g : grids) g.quantize_f32();
    w1.quantize_f32();
    b1.quantize_f32();
    w2.quantize_f32();
    b2.quantize_f32();
    noise_gain = static_cast<double>(static_cast<float>(noise_gain));
}

std::uint64_t PriorDecoder::params_hash() const {
    std::uint64_t h = 0x5b1e5ULL;
    for (const auto& g : grids) h = hash_combine(h, g.content_hash());
    h = hash_combine(h, w1.content_hash());
    h = hash_combine(h, b1.content_hash());
    h = hash_combine(h, w2.content_hash());
    h = hash_combine(h, b2.content_hash());
    return h;
}

// ---------------------------------------------------------------------------
// Plain (non-tape) path

std::vector<Tensor> modulate_grids(const PriorDecoder& model, const LatentCode& w) {
    SPI_CHECK(w.numel() == model.latent_dim(), "latent dimension mismatch");
    std::vector<Tensor> out;
    int off = 0;
    for (std::size_t l = 0; l < model.levels.size(); ++l) {
        const auto& spec = model.levels[l];
        const Tensor& g = model.grids[l];
        std::int64_t voxels = static_cast<std::int64_t>(spec.resolution) * spec.resolution *
                              spec.resolution * spec.channels;
        Tensor m({spec.resolution, spec.resolution, spec.resolution, spec.channels});
        for (int b = 0; b < spec.basis; ++b) {
            double wb = w[off + b];
            const double* src = g.data() + static_cast<std::int64_t>(b) * voxels;
            double* dst = m.data();
            for (std::int64_t i = 0; i < voxels; ++i) dst[i] += wb * src[i];
        }
        off += spec.basis;
        out.push_back(std::move(m));
    }
    return out;
}

std::vector<double> query_features(const PriorDecoder& model, const LatentCode& w,
                                   const geometry::Vec3& x) {
    auto mod = modulate_grids(model, w);
    std::vector<double> feat(static_cast<std::size_t>(model.feature_dim()), 0.0);
    if (!inside_box(x)) return feat;
    int off = 0;
    for (std::size_t l = 0; l < model.levels.size(); ++l) {
        LevelView lv{mod[l].data(), model.levels[l].resolution, model.levels[l].channels};
        gather_level(lv, x, feat.data() + off);
        off += model.levels[l].channels;
    }
    return feat;
}

QueryResult query(const PriorDecoder& model, const LatentCode& w, const geometry::Vec3& x) {
    QueryResult out;
    if (!inside_box(x)) {
        out.density = 0.0;
        out.rgb[0] = out.rgb[1] = out.rgb[2] = model.render.background;
        return out;
    }
    auto mod = modulate_grids(model, w);
    std::vector<const double*> ptrs;
    for (const auto& m : mod) ptrs.push_back(m.data());
    ModelView mv = make_view(model, ptrs, nullptr);
    double feat[kMaxFeat];
    int off = 0;
    for (const auto& lv : mv.levels) {
        gather_level(lv, x, feat + off);
        off += lv.f;
    }
    double hid[kMaxHidden];
    double color[3];
    decode(mv, feat, hid, &out.density, color);
    out.rgb[0] = color[0];
    out.rgb[1] = color[1];
    out.rgb[2] = color[2];
    return out;
}

RenderOutput render(const PriorDecoder& model, const LatentCode& w, const Pose& pose,
                    const Intrinsics& K, std::uint64_t seed, const NoiseMap* noise) {
    model.validate();
    K.validate();
    if (noise != nullptr) {
        SPI_CHECK(noise->ndim() == 2 && noise->dim(0) == K.height && noise->dim(1) == K.width,
                  "noise map shape must match the render target");
    }
    auto mod = modulate_grids(model, w);
    std::vector<const double*> ptrs;
    for (const auto& m : mod) ptrs.push_back(m.data());
    ModelView mv = make_view(model, ptrs, nullptr);
    RenderOutput out;
    out.rgb = Image(K.width, K.height, 3);
    out.depth = Image(K.width, K.height, 1);
    out.opacity = Image(K.width, K.height, 1);
    render_forward(mv, pose, K, seed, noise != nullptr ? noise->data() : nullptr,
                   model.noise_gain, out.rgb.data.data(), out.depth.data.data(),
                   out.opacity.data.data());
    return out;
}

std::vector<Image> render_depth_set(const PriorDecoder& model, const LatentCode& w,
                                    const std::vector<Pose>& poses, const Intrinsics& K,
                                    std::uint64_t seed) {
    std::vector<Image> out;
    for (const auto& pose : poses) out.push_back(render(model, w, pose, K, seed).depth);
    return out;
}

// ---------------------------------------------------------------------------
// Tape path

namespace {

grad::Var modulate_level_op(grad::Tape& t, const grad::Var& w_flat, const grad::Var& grid,
                            int level_offset, const GridLevelSpec& spec) {
    const Tensor& wv = t.value(w_flat);
    const Tensor& gv = t.value(grid);
    std::int64_t voxels = static_cast<std::int64_t>(spec.resolution) * spec.resolution *
                          spec.resolution * spec.channels;
    Tensor m({spec.resolution, spec.resolution, spec.resolution, spec.channels});
    for (int b = 0; b < spec.basis; ++b) {
        double wb = wv[level_offset + b];
        const double* src = gv.data() + static_cast<std::int64_t>(b) * voxels;
        double* dst = m.data();
        for (std::int64_t i = 0; i < voxels; ++i) dst[i] += wb * src[i];
    }
    int wid = w_flat.id, gid = grid.id;
    int basis = spec.basis;
    auto holder = std::make_shared<int>(-1);
    grad::Tape* tp = &t;
    int id = t.add_node(
        std::move(m), {wid, gid},
        [tp, wid, gid, level_offset, basis, voxels, holder]() {
            grad::Tape& t = *tp;
            const Tensor& dm = t.node_grad(*holder);
            const Tensor& wv = t.node_value(wid);
            const Tensor& gv = t.node_value(gid);
            if (t.node_requires_grad(wid)) {
                Tensor& dw = t.node_grad(wid);
                for (int b = 0; b < basis; ++b) {
                    const double* src = gv.data() + static_cast<std::int64_t>(b) * voxels;
                    double acc = 0.0;
                    for (std::int64_t i = 0; i < voxels; ++i) acc += dm[i] * src[i];
                    dw[level_offset + b] += acc;
                }
            }
            if (t.node_requires_grad(gid)) {
                Tensor& dg = t.node_grad(gid);
                for (int b = 0; b < basis; ++b) {
                    double wb = wv[level_offset + b];
                    double* dst = dg.data() + static_cast<std::int64_t>(b) * voxels;
                    for (std::int64_t i = 0; i < voxels; ++i) dst[i] += wb * dm[i];
                }
            }
        },
        "modulate");
    *holder = id;
    return grad::Var{tp, id};
}

} // namespace

grad::ParamSet make_param_set(const PriorDecoder& model, const LatentCode& w,
                              const NoiseMap* noise) {
    grad::ParamSet p;
    p.add("latent", w);
    for (std::size_t l = 0; l < model.grids.size(); ++l)
        p.add("grid" + std::to_string(l), model.grids[l]);
    p.add("dec_w1", model.w1);
    p.add("dec_b1", model.b1);
    p.add("dec_w2", model.w2);
    p.add("dec_b2", model.b2);
    if (noise != nullptr) p.add("noise", *noise);
    return p;
}

ModelVars assemble_model_vars(grad::Tape& tape, const PriorDecoder& specs,
                              const grad::BoundVars& vars) {
    ModelVars out;
    out.w = vars.at("latent");
    int off = 0;
    for (std::size_t l = 0; l < specs.levels.size(); ++l) {
        const grad::Var& g = vars.at("grid" + std::to_string(l));
        out.grids.push_back(modulate_level_op(tape, out.w, g, off, specs.levels[l]));
        off += specs.levels[l].basis;
    }
    out.w1 = vars.at("dec_w1");
    out.b1 = vars.at("dec_b1");
    out.w2 = vars.at("dec_w2");
    out.b2 = vars.at("dec_b2");
    if (auto it = vars.find("noise"); it != vars.end()) out.noise = it->second;
    return out;
}

ModelVars bind_model(grad::Tape& tape, const PriorDecoder& model, const LatentCode& w,
                     bool train_latent, bool train_theta, const NoiseMap* noise,
                     bool train_noise) {
    model.validate();
    grad::BoundVars vars;
    vars["latent"] = tape.leaf(w, train_latent, "latent");
    for (std::size_t l = 0; l < model.levels.size(); ++l) {
        vars["grid" + std::to_string(l)] =
            tape.leaf(model.grids[l], train_theta, "grid" + std::to_string(l));
    }
    vars["dec_w1"] = tape.leaf(model.w1, train_theta, "dec_w1");
    vars["dec_b1"] = tape.leaf(model.b1, train_theta, "dec_b1");
    vars["dec_w2"] = tape.leaf(model.w2, train_theta, "dec_w2");
    vars["dec_b2"] = tape.leaf(model.b2, train_theta, "dec_b2");
    if (noise != nullptr) vars["noise"] = tape.leaf(*noise, train_noise, "noise");
    return assemble_model_vars(tape, model, vars);
}

RenderVars render_op(grad::Tape& tape, const PriorDecoder& model, const ModelVars& vars,
                     const Pose& pose, const Intrinsics& K, std::uint64_t seed, bool with_noise,
                     const RenderSettings* settings_override) {
    const int w = K.width, h = K.height;
    SPI_CHECK(!with_noise || vars.noise.valid(), "render_op: noise var not bound");
    if (with_noise) {
        const Tensor& nv = tape.value(vars.noise);
        SPI_CHECK(nv.ndim() == 2 && nv.dim(0) == h && nv.dim(1) == w,
                  "noise map shape must match the render target");
    }

    struct Cache {
        grad::Tape* tape = nullptr;
        const PriorDecoder* model = nullptr;
        Pose pose;
        Intrinsics K;
        std::uint64_t seed = 0;
        bool with_noise = false;
        RenderSettings settings;
        std::vector<int> mod_ids;
        int w1 = -1, b1 = -1, w2 = -1, b2 = -1, noise = -1;
        int self = -1, rgb = -1, depth = -1, opac = -1;
    };
    auto cache = std::make_shared<Cache>();
    cache->tape = &tape;
    cache->model = &model;
    cache->pose = pose;
    cache->K = K;
    cache->seed = seed;
    cache->with_noise = with_noise;
    cache->settings = settings_override != nullptr ? *settings_override : model.render;
    for (const auto& m : vars.grids) cache->mod_ids.push_back(m.id);
    cache->w1 = vars.w1.id;
    cache->b1 = vars.b1.id;
    cache->w2 = vars.w2.id;
    cache->b2 = vars.b2.id;
    cache->noise = with_noise ? vars.noise.id : -1;

    // Forward.
    ModelView mv = make_view_from_tape(tape, model, cache->mod_ids, cache->w1, cache->b1,
                                       cache->w2, cache->b2, cache->settings);
    Tensor rgb({h, w, 3});
    Tensor depth({h, w});
    Tensor opac({h, w});
    const double* noise_ptr =
        with_noise ? tape.node_value(cache->noise).data() : nullptr;
    render_forward(mv, pose, K, seed, noise_ptr, model.noise_gain, rgb.data(), depth.data(),
                   opac.data());

    // Parent node owns the real backward.
    std::vector<int> parents = cache->mod_ids;
    parents.push_back(cache->w1);
    parents.push_back(cache->b1);
    parents.push_back(cache->w2);
    parents.push_back(cache->b2);
    if (with_noise) parents.push_back(cache->noise);

    int self = tape.add_node(
        Tensor::scalar(0.0), parents,
        [cache]() {
            grad::Tape& t = *cache->tape;
            const PriorDecoder& model = *cache->model;
            const Intrinsics& K = cache->K;
            const int w = K.width, h = K.height;

            const Tensor& drgb = t.node_grad(cache->rgb);
            const Tensor& ddepth = t.node_grad(cache->depth);
            const Tensor& dopac = t.node_grad(cache->opac);

            ModelView mv = make_view_from_tape(t, model, cache->mod_ids, cache->w1, cache->b1,
                                               cache->w2, cache->b2, cache->settings);

            bool want_m = false;
            for (int id : cache->mod_ids) want_m = want_m || t.node_requires_grad(id);
            bool want_dec = t.node_requires_grad(cache->w1);
            bool want_noise = cache->with_noise && t.node_requires_grad(cache->noise);
            double* dnoise = want_noise ? t.node_grad(cache->noise).data() : nullptr;

            // Per-block accumulators, reduced in block order.
            int nblocks = parallel_block_count(h);
            std::vector<GradSinks> sinks(static_cast<std::size_t>(nblocks));
            std::vector<std::vector<std::vector<double>>> m_bufs(
                static_cast<std::size_t>(nblocks));
            std::vector<std::vector<double>> dec_bufs(static_cast<std::size_t>(nblocks));
            std::vector<std::int64_t> m_sizes;
            for (int id : cache->mod_ids) m_sizes.push_back(t.node_value(id).numel());
            std::int64_t dec_size =
                want_dec ? t.node_value(cache->w1).numel() + t.node_value(cache->b1).numel() +
                               t.node_value(cache->w2).numel() + t.node_value(cache->b2).numel()
                         : 0;

            parallel_for_blocks(h, [&](int block, std::int64_t ylo, std::int64_t yhi) {
                GradSinks& sk = sinks[static_cast<std::size_t>(block)];
                if (want_m) {
                    auto& bufs = m_bufs[static_cast<std::size_t>(block)];
                    for (std::int64_t sz : m_sizes)
                        bufs.emplace_back(static_cast<std::size_t>(sz), 0.0);
                    for (auto& b : bufs) sk.dm.push_back(b.data());
                }
                if (want_dec) {
                    auto& buf = dec_bufs[static_cast<std::size_t>(block)];
                    buf.assign(static_cast<std::size_t>(dec_size), 0.0);
                    double* p = buf.data();
                    sk.dw1 = p;
                    p += t.node_value(cache->w1).numel();
                    sk.db1 = p;
                    p += t.node_value(cache->b1).numel();
                    sk.dw2 = p;
                    p += t.node_value(cache->w2).numel();
                    sk.db2 = p;
                }
                sk.dnoise = dnoise;

                auto stash = std::make_unique<RayStash>();
                for (std::int64_t y = ylo; y < yhi; ++y) {
                    for (int x = 0; x < w; ++x) {
                        std::int64_t pi = y * w + x;
                        double drgb_px[3] = {drgb[pi * 3 + 0], drgb[pi * 3 + 1],
                                             drgb[pi * 3 + 2]};
                        double dd = ddepth[pi];
                        double dop = dopac[pi];
                        if (dnoise != nullptr) {
                            dnoise[pi] +=
                                model.noise_gain * (drgb_px[0] + drgb_px[1] + drgb_px[2]);
                        }
                        if (drgb_px[0] == 0 && drgb_px[1] == 0 && drgb_px[2] == 0 && dd == 0 &&
                            dop == 0) {
                            continue;
                        }
                        if (!want_m && !want_dec) continue;
                        Ray ray = pixel_ray(cache->pose, K, x, static_cast<int>(y));
                        int fold = std::min(x, w - 1 - x);
                        double tmp_rgb[3], tmp_d, tmp_o;
                        march_pixel(mv, ray, cache->seed, fold, static_cast<int>(y), tmp_rgb,
                                    &tmp_d, &tmp_o, stash.get());
                        backward_pixel(mv, ray, *stash, drgb_px, dd, dop, sk);
                    }
                }
            });

            // Deterministic reduction in block order.
            if (want_m) {
                for (std::size_t l = 0; l < cache->mod_ids.size(); ++l) {
                    if (!t.node_requires_grad(cache->mod_ids[l])) continue;
                    Tensor& dst = t.node_grad(cache->mod_ids[l]);
                    for (int b = 0; b < nblocks; ++b) {
                        const auto& buf = m_bufs[static_cast<std::size_t>(b)][l];
                        for (std::int64_t i = 0; i < dst.numel(); ++i) dst[i] += buf[i];
                    }
                }
            }
            if (want_dec) {
                Tensor& dw1 = t.node_grad(cache->w1);
                Tensor& db1 = t.node_grad(cache->b1);
                Tensor& dw2 = t.node_grad(cache->w2);
                Tensor& db2 = t.node_grad(cache->b2);
                for (int b = 0; b < nblocks; ++b) {
                    const GradSinks& sk = sinks[static_cast<std::size_t>(b)];
                    if (sk.dw1 == nullptr) continue;
                    for (std::int64_t i = 0; i < dw1.numel(); ++i) dw1[i] += sk.dw1[i];
                    for (std::int64_t i = 0; i < db1.numel(); ++i) db1[i] += sk.db1[i];
                    for (std::int64_t i = 0; i < dw2.numel(); ++i) dw2[i] += sk.dw2[i];
                    for (std::int64_t i = 0; i < db2.numel(); ++i) db2[i] += sk.db2[i];
                }
            }
        },
        "render");
    cache->self = self;

    grad::Tape* tp = &tape;
    auto touch_parent = [tp, cache]() { tp->node_grad(cache->self); };
    cache->rgb = tape.add_node(std::move(rgb), {self}, touch_parent, "render.rgb");
    cache->depth = tape.add_node(std::move(depth), {self}, touch_parent, "render.depth");
    cache->opac = tape.add_node(std::move(opac), {self}, touch_parent, "render.opacity");

    RenderVars out;
    out.rgb = grad::Var{&tape, cache->rgb};
    out.depth = grad::Var{&tape, cache->depth};
    out.opacity = grad::Var{&tape, cache->opac};
    return out;
}

} // namespace spi::field
