#include <algorithm>
#include <cmath>
#include <limits>

#include "sml/ops.hpp"

namespace sml {

namespace {

void check_same_dims(const Tensor& a, const Tensor& b, const char* op) {
    if (a.dims() != b.dims())
        throw ConfigError(std::string(op) + ": dims mismatch " + a.dims().str() + " vs " +
                          b.dims().str());
}

}  // namespace

BatchNormParams make_batch_norm(int channels) {
    BatchNormParams p;
    p.gamma = Tensor::full({1, channels, 1, 1}, 1.0f, true);
    p.beta = Tensor::zeros({1, channels, 1, 1}, true);
    p.running_mean = Tensor::zeros({1, channels, 1, 1});
    p.running_var = Tensor::full({1, channels, 1, 1}, 1.0f);
    return p;
}

Tensor batch_norm(const Tensor& x, BatchNormParams& p, bool training) {
    const Dims4 d = x.dims();
    const int C = d.c;
    const Dims4 want{1, C, 1, 1};
    if (p.gamma.dims() != want || p.beta.dims() != want || p.running_mean.dims() != want ||
        p.running_var.dims() != want)
        throw ConfigError("batch_norm: parameter dims do not match " + std::to_string(C) +
                          " channels");

    const size_t plane = size_t(d.h) * d.w;
    const int64_t cnt = int64_t(d.n) * plane;
    std::vector<float> mean(C), inv_std(C);

    if (training) {
        for (int c = 0; c < C; ++c) {
            double sum = 0.0, sumsq = 0.0;
            for (int n = 0; n < d.n; ++n) {
                const float* xc = x.ptr() + (size_t(n) * C + c) * plane;
                for (size_t i = 0; i < plane; ++i) {
                    const double v = xc[i];
                    sum += v;
                    sumsq += v * v;
                }
            }
            const double m = sum / double(cnt);
            const double var = std::max(0.0, sumsq / double(cnt) - m * m);
            mean[c] = float(m);
            inv_std[c] = float(1.0 / std::sqrt(var + double(p.eps)));
            p.running_mean.data()[c] = (1.0f - p.momentum) * p.running_mean.data()[c] +
                                       p.momentum * float(m);
            p.running_var.data()[c] = (1.0f - p.momentum) * p.running_var.data()[c] +
                                      p.momentum * float(var);
        }
    } else {
        for (int c = 0; c < C; ++c) {
            mean[c] = p.running_mean.data()[c];
            inv_std[c] = 1.0f / std::sqrt(p.running_var.data()[c] + p.eps);
        }
    }

    Tensor out = Tensor::zeros(d);
    for (int n = 0; n < d.n; ++n)
        for (int c = 0; c < C; ++c) {
            const float* xc = x.ptr() + (size_t(n) * C + c) * plane;
            float* oc = out.ptr() + (size_t(n) * C + c) * plane;
            const float g = p.gamma.data()[c], b = p.beta.data()[c];
            const float m = mean[c], is = inv_std[c];
            for (size_t i = 0; i < plane; ++i) oc[i] = g * (xc[i] - m) * is + b;
        }

    if (track_grad({&x, &p.gamma, &p.beta})) {
        out.set_requires_grad(true);
        Tensor xc = x, gamma = p.gamma, beta = p.beta, o = out;
        active_tape()->record([xc, gamma, beta, o, mean, inv_std, training, d, plane,
                               cnt]() mutable {
            if (!o.has_grad()) return;
            const float* gy = o.grad_view().data();
            const int C = d.c;
            for (int c = 0; c < C; ++c) {
                const float m = mean[c], is = inv_std[c], g = gamma.data()[c];
                double sum_gy = 0.0, sum_gy_xh = 0.0;
                for (int n = 0; n < d.n; ++n) {
                    const float* xp = xc.ptr() + (size_t(n) * C + c) * plane;
                    const float* gp = gy + (size_t(n) * C + c) * plane;
                    for (size_t i = 0; i < plane; ++i) {
                        sum_gy += gp[i];
                        sum_gy_xh += double(gp[i]) * (xp[i] - m) * is;
                    }
                }
                if (gamma.requires_grad()) gamma.grad()[c] += float(sum_gy_xh);
                if (beta.requires_grad()) beta.grad()[c] += float(sum_gy);
                if (!xc.requires_grad()) continue;
                if (training) {
                    const float k = g * is / float(cnt);
                    const float sg = float(sum_gy), sgx = float(sum_gy_xh);
                    for (int n = 0; n < d.n; ++n) {
                        const float* xp = xc.ptr() + (size_t(n) * C + c) * plane;
                        const float* gp = gy + (size_t(n) * C + c) * plane;
                        float* dp = xc.grad().data() + (size_t(n) * C + c) * plane;
                        for (size_t i = 0; i < plane; ++i) {
                            const float xh = (xp[i] - m) * is;
                            dp[i] += k * (float(cnt) * gp[i] - sg - xh * sgx);
                        }
                    }
                } else {
                    const float k = g * is;
                    for (int n = 0; n < d.n; ++n) {
                        const float* gp = gy + (size_t(n) * C + c) * plane;
                        float* dp = xc.grad().data() + (size_t(n) * C + c) * plane;
                        for (size_t i = 0; i < plane; ++i) dp[i] += k * gp[i];
                    }
                }
            }
        });
    }
    return out;
}

Tensor relu(const Tensor& x) {
    Tensor out = Tensor::zeros(x.dims());
    const float* xp = x.ptr();
    float* op = out.ptr();
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) op[i] = xp[i] > 0.0f ? xp[i] : 0.0f;
    if (track_grad({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, o = out;
        active_tape()->record([xc, o]() mutable {
            if (!o.has_grad() || !xc.requires_grad()) return;
            const float* gy = o.grad_view().data();
            const float* xp = xc.ptr();
            float* dx = xc.grad().data();
            const int64_t n = xc.numel();
            for (int64_t i = 0; i < n; ++i)
                if (xp[i] > 0.0f) dx[i] += gy[i];
        });
    }
    return out;
}

Tensor sigmoid(const Tensor& x) {
    Tensor out = Tensor::zeros(x.dims());
    const float* xp = x.ptr();
    float* op = out.ptr();
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) op[i] = 1.0f / (1.0f + std::exp(-xp[i]));
    if (track_grad({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, o = out;
        active_tape()->record([xc, o]() mutable {
            if (!o.has_grad() || !xc.requires_grad()) return;
            const float* gy = o.grad_view().data();
            const float* yp = o.ptr();
            float* dx = xc.grad().data();
            const int64_t n = xc.numel();
            for (int64_t i = 0; i < n; ++i) dx[i] += gy[i] * yp[i] * (1.0f - yp[i]);
        });
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_dims(a, b, "add");
    Tensor out = Tensor::zeros(a.dims());
    const float* ap = a.ptr();
    const float* bp = b.ptr();
    float* op = out.ptr();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) op[i] = ap[i] + bp[i];
    if (track_grad({&a, &b})) {
        out.set_requires_grad(true);
        Tensor ac = a, bc = b, o = out;
        active_tape()->record([ac, bc, o]() mutable {
            if (!o.has_grad()) return;
            const float* gy = o.grad_view().data();
            const int64_t n = ac.numel();
            if (ac.requires_grad()) {
                float* d = ac.grad().data();
                for (int64_t i = 0; i < n; ++i) d[i] += gy[i];
            }
            if (bc.requires_grad()) {
                float* d = bc.grad().data();
                for (int64_t i = 0; i < n; ++i) d[i] += gy[i];
            }
        });
    }
    return out;
}

Tensor scale(const Tensor& x, float c) {
    Tensor out = Tensor::zeros(x.dims());
    const float* xp = x.ptr();
    float* op = out.ptr();
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) op[i] = c * xp[i];
    if (track_grad({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, o = out;
        active_tape()->record([xc, o, c]() mutable {
            if (!o.has_grad() || !xc.requires_grad()) return;
            const float* gy = o.grad_view().data();
            float* dx = xc.grad().data();
            const int64_t n = xc.numel();
            for (int64_t i = 0; i < n; ++i) dx[i] += c * gy[i];
        });
    }
    return out;
}

Tensor scale_by(const Tensor& x, const Tensor& s) {
    if (s.dims() != Dims4{1, 1, 1, 1})
        throw ConfigError("scale_by: scale must be (1,1,1,1), got " + s.dims().str());
    const float sv = s.data()[0];
    Tensor out = Tensor::zeros(x.dims());
    const float* xp = x.ptr();
    float* op = out.ptr();
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) op[i] = sv * xp[i];
    if (track_grad({&x, &s})) {
        out.set_requires_grad(true);
        Tensor xc = x, sc = s, o = out;
        active_tape()->record([xc, sc, o, sv]() mutable {
            if (!o.has_grad()) return;
            const float* gy = o.grad_view().data();
            const int64_t n = xc.numel();
            if (xc.requires_grad()) {
                float* dx = xc.grad().data();
                for (int64_t i = 0; i < n; ++i) dx[i] += sv * gy[i];
            }
            if (sc.requires_grad()) {
                const float* xp = xc.ptr();
                double acc = 0.0;
                for (int64_t i = 0; i < n; ++i) acc += double(gy[i]) * xp[i];
                sc.grad()[0] += float(acc);
            }
        });
    }
    return out;
}

Tensor pool(const Tensor& x, PoolKind kind, PoolAxis axis, int groups) {
    const Dims4 d = x.dims();
    const size_t plane = size_t(d.h) * d.w;

    if (axis == PoolAxis::Spatial) {
        Tensor out = Tensor::zeros({d.n, d.c, 1, 1});
        for (int n = 0; n < d.n; ++n)
            for (int c = 0; c < d.c; ++c) {
                const float* xc = x.ptr() + (size_t(n) * d.c + c) * plane;
                float v;
                if (kind == PoolKind::Avg) {
                    double acc = 0.0;
                    for (size_t i = 0; i < plane; ++i) acc += xc[i];
                    v = float(acc / double(plane));
                } else {
                    v = xc[0];
                    for (size_t i = 1; i < plane; ++i)
                        if (xc[i] > v) v = xc[i];
                }
                out.at(n, c, 0, 0) = v;
            }
        if (track_grad({&x})) {
            out.set_requires_grad(true);
            Tensor xc = x, o = out;
            active_tape()->record([xc, o, kind, d, plane]() mutable {
                if (!o.has_grad() || !xc.requires_grad()) return;
                const float* gy = o.grad_view().data();
                for (int n = 0; n < d.n; ++n)
                    for (int c = 0; c < d.c; ++c) {
                        const float g = gy[size_t(n) * d.c + c];
                        float* dx = xc.grad().data() + (size_t(n) * d.c + c) * plane;
                        if (kind == PoolKind::Avg) {
                            const float k = g / float(plane);
                            for (size_t i = 0; i < plane; ++i) dx[i] += k;
                        } else {
                            const float* xp = xc.ptr() + (size_t(n) * d.c + c) * plane;
                            size_t arg = 0;
                            for (size_t i = 1; i < plane; ++i)
                                if (xp[i] > xp[arg]) arg = i;  // ties keep the first index
                            dx[arg] += g;
                        }
                    }
            });
        }
        return out;
    }

    if (groups < 1 || d.c % groups != 0)
        throw ConfigError("pool: groups " + std::to_string(groups) + " does not divide " +
                          std::to_string(d.c) + " channels");
    const int cb = d.c / groups;
    Tensor out = Tensor::zeros({d.n, groups, d.h, d.w});
    for (int n = 0; n < d.n; ++n)
        for (int g = 0; g < groups; ++g) {
            float* oc = out.ptr() + (size_t(n) * groups + g) * plane;
            const float* base = x.ptr() + (size_t(n) * d.c + size_t(g) * cb) * plane;
            if (kind == PoolKind::Avg) {
                for (size_t i = 0; i < plane; ++i) oc[i] = base[i];
                for (int ci = 1; ci < cb; ++ci) {
                    const float* xc = base + size_t(ci) * plane;
                    for (size_t i = 0; i < plane; ++i) oc[i] += xc[i];
                }
                const float k = 1.0f / float(cb);
                for (size_t i = 0; i < plane; ++i) oc[i] *= k;
            } else {
                for (size_t i = 0; i < plane; ++i) oc[i] = base[i];
                for (int ci = 1; ci < cb; ++ci) {
                    const float* xc = base + size_t(ci) * plane;
                    for (size_t i = 0; i < plane; ++i)
                        if (xc[i] > oc[i]) oc[i] = xc[i];
                }
            }
        }
    if (track_grad({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, o = out;
        const int g_ = groups;
        active_tape()->record([xc, o, kind, d, plane, g_, cb]() mutable {
            if (!o.has_grad() || !xc.requires_grad()) return;
            const float* gy = o.grad_view().data();
            for (int n = 0; n < d.n; ++n)
                for (int g = 0; g < g_; ++g) {
                    const float* gc = gy + (size_t(n) * g_ + g) * plane;
                    const float* base = xc.ptr() + (size_t(n) * d.c + size_t(g) * cb) * plane;
                    float* dbase = xc.grad().data() + (size_t(n) * d.c + size_t(g) * cb) * plane;
                    if (kind == PoolKind::Avg) {
                        const float k = 1.0f / float(cb);
                        for (int ci = 0; ci < cb; ++ci) {
                            float* dx = dbase + size_t(ci) * plane;
                            for (size_t i = 0; i < plane; ++i) dx[i] += k * gc[i];
                        }
                    } else {
                        for (size_t i = 0; i < plane; ++i) {
                            int arg = 0;
                            float best = base[i];
                            for (int ci = 1; ci < cb; ++ci) {
                                const float v = base[size_t(ci) * plane + i];
                                if (v > best) {
                                    best = v;
                                    arg = ci;
                                }
                            }
                            dbase[size_t(arg) * plane + i] += gc[i];
                        }
                    }
                }
        });
    }
    return out;
}

Tensor bilinear_resize(const Tensor& x, int out_h, int out_w, bool align_corners) {
    if (out_h < 1 || out_w < 1) throw ConfigError("bilinear_resize: output dims must be >= 1");
    const Dims4 d = x.dims();

    if (out_h == d.h && out_w == d.w) {
        Tensor out = Tensor::from_data(d, std::vector<float>(x.data()));
        if (track_grad({&x})) {
            out.set_requires_grad(true);
            Tensor xc = x, o = out;
            active_tape()->record([xc, o]() mutable {
                if (!o.has_grad() || !xc.requires_grad()) return;
                const float* gy = o.grad_view().data();
                float* dx = xc.grad().data();
                const int64_t n = xc.numel();
                for (int64_t i = 0; i < n; ++i) dx[i] += gy[i];
            });
        }
        return out;
    }

    auto make_axis = [align_corners](int in, int out, std::vector<int>& i0, std::vector<int>& i1,
                                     std::vector<float>& frac) {
        i0.resize(out);
        i1.resize(out);
        frac.resize(out);
        for (int o = 0; o < out; ++o) {
            double src;
            if (align_corners)
                src = out == 1 ? 0.0 : double(o) * (in - 1) / double(out - 1);
            else
                src = (double(o) + 0.5) * in / double(out) - 0.5;
            src = std::min(std::max(src, 0.0), double(in - 1));
            const int lo = int(std::floor(src));
            i0[o] = lo;
            i1[o] = std::min(lo + 1, in - 1);
            frac[o] = float(src - lo);
        }
    };

    std::vector<int> y0, y1, xx0, xx1;
    std::vector<float> fy, fx;
    make_axis(d.h, out_h, y0, y1, fy);
    make_axis(d.w, out_w, xx0, xx1, fx);

    Tensor out = Tensor::zeros({d.n, d.c, out_h, out_w});
    const size_t in_plane = size_t(d.h) * d.w;
    const size_t out_plane = size_t(out_h) * out_w;
    for (int n = 0; n < d.n; ++n)
        for (int c = 0; c < d.c; ++c) {
            const float* xc = x.ptr() + (size_t(n) * d.c + c) * in_plane;
            float* oc = out.ptr() + (size_t(n) * d.c + c) * out_plane;
            for (int oy = 0; oy < out_h; ++oy) {
                const float* r0 = xc + size_t(y0[oy]) * d.w;
                const float* r1 = xc + size_t(y1[oy]) * d.w;
                const float wy = fy[oy];
                float* orow = oc + size_t(oy) * out_w;
                for (int ox = 0; ox < out_w; ++ox) {
                    const float wx = fx[ox];
                    const float top = (1.0f - wx) * r0[xx0[ox]] + wx * r0[xx1[ox]];
                    const float bot = (1.0f - wx) * r1[xx0[ox]] + wx * r1[xx1[ox]];
                    orow[ox] = (1.0f - wy) * top + wy * bot;
                }
            }
        }

    if (track_grad({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, o = out;
        active_tape()->record([xc, o, y0, y1, xx0, xx1, fy, fx, d, out_h, out_w, in_plane,
                               out_plane]() mutable {
            if (!o.has_grad() || !xc.requires_grad()) return;
            const float* gy = o.grad_view().data();
            for (int n = 0; n < d.n; ++n)
                for (int c = 0; c < d.c; ++c) {
                    float* dx = xc.grad().data() + (size_t(n) * d.c + c) * in_plane;
                    const float* gc = gy + (size_t(n) * d.c + c) * out_plane;
                    for (int oy = 0; oy < out_h; ++oy) {
                        const float wy = fy[oy];
                        const size_t r0 = size_t(y0[oy]) * d.w, r1 = size_t(y1[oy]) * d.w;
                        const float* grow = gc + size_t(oy) * out_w;
                        for (int ox = 0; ox < out_w; ++ox) {
                            const float wx = fx[ox];
                            const float g = grow[ox];
                            dx[r0 + xx0[ox]] += (1.0f - wy) * (1.0f - wx) * g;
                            dx[r0 + xx1[ox]] += (1.0f - wy) * wx * g;
                            dx[r1 + xx0[ox]] += wy * (1.0f - wx) * g;
                            dx[r1 + xx1[ox]] += wy * wx * g;
                        }
                    }
                }
        });
    }
    return out;
}

Tensor broadcast_spatial(const Tensor& x, int h, int w) {
    const Dims4 d = x.dims();
    if (d.h != 1 || d.w != 1)
        throw ConfigError("broadcast_spatial: input must be (N,C,1,1), got " + d.str());
    if (h < 1 || w < 1) throw ConfigError("broadcast_spatial: target dims must be >= 1");
    Tensor out = Tensor::zeros({d.n, d.c, h, w});
    const size_t plane = size_t(h) * w;
    for (int n = 0; n < d.n; ++n)
        for (int c = 0; c < d.c; ++c) {
            const float v = x.at(n, c, 0, 0);
            float* oc = out.ptr() + (size_t(n) * d.c + c) * plane;
            for (size_t i = 0; i < plane; ++i) oc[i] = v;
        }
    if (track_grad({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, o = out;
        active_tape()->record([xc, o, d, plane]() mutable {
            if (!o.has_grad() || !xc.requires_grad()) return;
            const float* gy = o.grad_view().data();
            for (int n = 0; n < d.n; ++n)
                for (int c = 0; c < d.c; ++c) {
                    const float* gc = gy + (size_t(n) * d.c + c) * plane;
                    double acc = 0.0;
                    for (size_t i = 0; i < plane; ++i) acc += gc[i];
                    xc.grad()[size_t(n) * d.c + c] += float(acc);
                }
        });
    }
    return out;
}

Tensor concat_channels(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw ConfigError("concat_channels: empty input list");
    const Dims4 d0 = xs[0].dims();
    int c_total = 0;
    for (const auto& t : xs) {
        const Dims4 d = t.dims();
        if (d.n != d0.n || d.h != d0.h || d.w != d0.w)
            throw ConfigError("concat_channels: spatial/batch mismatch " + d.str() + " vs " +
                              d0.str());
        c_total += d.c;
    }
    Tensor out = Tensor::zeros({d0.n, c_total, d0.h, d0.w});
    const size_t plane = size_t(d0.h) * d0.w;
    for (int n = 0; n < d0.n; ++n) {
        int co = 0;
        for (const auto& t : xs) {
            const int c = t.dims().c;
            const float* src = t.ptr() + size_t(n) * c * plane;
            float* dst = out.ptr() + (size_t(n) * c_total + co) * plane;
            std::copy(src, src + size_t(c) * plane, dst);
            co += c;
        }
    }
    bool any = false;
    for (const auto& t : xs)
        if (track_grad({&t})) any = true;
    if (any) {
        out.set_requires_grad(true);
        std::vector<Tensor> ins = xs;
        Tensor o = out;
        active_tape()->record([ins, o, d0, c_total, plane]() mutable {
            if (!o.has_grad()) return;
            const float* gy = o.grad_view().data();
            for (int n = 0; n < d0.n; ++n) {
                int co = 0;
                for (auto& t : ins) {
                    const int c = t.dims().c;
                    if (t.requires_grad()) {
                        float* dst = t.grad().data() + size_t(n) * c * plane;
                        const float* src = gy + (size_t(n) * c_total + co) * plane;
                        for (size_t i = 0; i < size_t(c) * plane; ++i) dst[i] += src[i];
                    }
                    co += c;
                }
            }
        });
    }
    return out;
}

Tensor slice_channels(const Tensor& x, int c0, int len) {
    const Dims4 d = x.dims();
    if (c0 < 0 || len < 1 || c0 + len > d.c)
        throw ConfigError("slice_channels: range [" + std::to_string(c0) + "," +
                          std::to_string(c0 + len) + ") out of " + std::to_string(d.c));
    Tensor out = Tensor::zeros({d.n, len, d.h, d.w});
    const size_t plane = size_t(d.h) * d.w;
    for (int n = 0; n < d.n; ++n) {
        const float* src = x.ptr() + (size_t(n) * d.c + c0) * plane;
        float* dst = out.ptr() + size_t(n) * len * plane;
        std::copy(src, src + size_t(len) * plane, dst);
    }
    if (track_grad({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, o = out;
        active_tape()->record([xc, o, d, c0, len, plane]() mutable {
            if (!o.has_grad() || !xc.requires_grad()) return;
            const float* gy = o.grad_view().data();
            for (int n = 0; n < d.n; ++n) {
                float* dst = xc.grad().data() + (size_t(n) * d.c + c0) * plane;
                const float* src = gy + size_t(n) * len * plane;
                for (size_t i = 0; i < size_t(len) * plane; ++i) dst[i] += src[i];
            }
        });
    }
    return out;
}

Tensor interleave_channels(const Tensor& a, const Tensor& b) {
    check_same_dims(a, b, "interleave_channels");
    const Dims4 d = a.dims();
    Tensor out = Tensor::zeros({d.n, 2 * d.c, d.h, d.w});
    const size_t plane = size_t(d.h) * d.w;
    for (int n = 0; n < d.n; ++n)
        for (int c = 0; c < d.c; ++c) {
            const float* ap = a.ptr() + (size_t(n) * d.c + c) * plane;
            const float* bp = b.ptr() + (size_t(n) * d.c + c) * plane;
            float* oa = out.ptr() + (size_t(n) * 2 * d.c + 2 * c) * plane;
            float* ob = out.ptr() + (size_t(n) * 2 * d.c + 2 * c + 1) * plane;
            std::copy(ap, ap + plane, oa);
            std::copy(bp, bp + plane, ob);
        }
    if (track_grad({&a, &b})) {
        out.set_requires_grad(true);
        Tensor ac = a, bc = b, o = out;
        active_tape()->record([ac, bc, o, d, plane]() mutable {
            if (!o.has_grad()) return;
            const float* gy = o.grad_view().data();
            for (int n = 0; n < d.n; ++n)
                for (int c = 0; c < d.c; ++c) {
                    const float* ga = gy + (size_t(n) * 2 * d.c + 2 * c) * plane;
                    const float* gb = gy + (size_t(n) * 2 * d.c + 2 * c + 1) * plane;
                    if (ac.requires_grad()) {
                        float* da = ac.grad().data() + (size_t(n) * d.c + c) * plane;
                        for (size_t i = 0; i < plane; ++i) da[i] += ga[i];
                    }
                    if (bc.requires_grad()) {
                        float* db = bc.grad().data() + (size_t(n) * d.c + c) * plane;
                        for (size_t i = 0; i < plane; ++i) db[i] += gb[i];
                    }
                }
        });
    }
    return out;
}

Tensor mul_channel_gate(const Tensor& x, const Tensor& gate) {
    const Dims4 d = x.dims();
    if (gate.dims() != Dims4{d.n, d.c, 1, 1})
        throw ConfigError("mul_channel_gate: gate must be (N,C,1,1), got " + gate.dims().str());
    Tensor out = Tensor::zeros(d);
    const size_t plane = size_t(d.h) * d.w;
    for (int n = 0; n < d.n; ++n)
        for (int c = 0; c < d.c; ++c) {
            const float g = gate.at(n, c, 0, 0);
            const float* xc = x.ptr() + (size_t(n) * d.c + c) * plane;
            float* oc = out.ptr() + (size_t(n) * d.c + c) * plane;
            for (size_t i = 0; i < plane; ++i) oc[i] = g * xc[i];
        }
    if (track_grad({&x, &gate})) {
        out.set_requires_grad(true);
        Tensor xc = x, gc = gate, o = out;
        active_tape()->record([xc, gc, o, d, plane]() mutable {
            if (!o.has_grad()) return;
            const float* gy = o.grad_view().data();
            for (int n = 0; n < d.n; ++n)
                for (int c = 0; c < d.c; ++c) {
                    const float* gyc = gy + (size_t(n) * d.c + c) * plane;
                    if (xc.requires_grad()) {
                        const float g = gc.at(n, c, 0, 0);
                        float* dx = xc.grad().data() + (size_t(n) * d.c + c) * plane;
                        for (size_t i = 0; i < plane; ++i) dx[i] += g * gyc[i];
                    }
                    if (gc.requires_grad()) {
                        const float* xp = xc.ptr() + (size_t(n) * d.c + c) * plane;
                        double acc = 0.0;
                        for (size_t i = 0; i < plane; ++i) acc += double(gyc[i]) * xp[i];
                        gc.grad()[size_t(n) * d.c + c] += float(acc);
                    }
                }
        });
    }
    return out;
}

Tensor mul_group_map(const Tensor& x, const Tensor& map) {
    const Dims4 d = x.dims();
    const Dims4 md = map.dims();
    if (md.n != d.n || md.h != d.h || md.w != d.w || md.c < 1 || d.c % md.c != 0)
        throw ConfigError("mul_group_map: map " + md.str() + " incompatible with " + d.str());
    const int groups = md.c;
    const int cb = d.c / groups;
    const size_t plane = size_t(d.h) * d.w;
    Tensor out = Tensor::zeros(d);
    for (int n = 0; n < d.n; ++n)
        for (int g = 0; g < groups; ++g) {
            const float* mp = map.ptr() + (size_t(n) * groups + g) * plane;
            for (int ci = 0; ci < cb; ++ci) {
                const int c = g * cb + ci;
                const float* xc = x.ptr() + (size_t(n) * d.c + c) * plane;
                float* oc = out.ptr() + (size_t(n) * d.c + c) * plane;
                for (size_t i = 0; i < plane; ++i) oc[i] = mp[i] * xc[i];
            }
        }
    if (track_grad({&x, &map})) {
        out.set_requires_grad(true);
        Tensor xc = x, mc = map, o = out;
        active_tape()->record([xc, mc, o, d, groups, cb, plane]() mutable {
            if (!o.has_grad()) return;
            const float* gy = o.grad_view().data();
            for (int n = 0; n < d.n; ++n)
                for (int g = 0; g < groups; ++g) {
                    const float* mp = mc.ptr() + (size_t(n) * groups + g) * plane;
                    float* dm = mc.requires_grad()
                                    ? mc.grad().data() + (size_t(n) * groups + g) * plane
                                    : nullptr;
                    for (int ci = 0; ci < cb; ++ci) {
                        const int c = g * cb + ci;
                        const float* gyc = gy + (size_t(n) * d.c + c) * plane;
                        if (xc.requires_grad()) {
                            float* dx = xc.grad().data() + (size_t(n) * d.c + c) * plane;
                            for (size_t i = 0; i < plane; ++i) dx[i] += mp[i] * gyc[i];
                        }
                        if (dm) {
                            const float* xp = xc.ptr() + (size_t(n) * d.c + c) * plane;
                            for (size_t i = 0; i < plane; ++i) dm[i] += gyc[i] * xp[i];
                        }
                    }
                }
        });
    }
    return out;
}

Tensor flip_horizontal(const Tensor& x) {
    const Dims4 d = x.dims();
    Tensor out = Tensor::zeros(d);
    const size_t plane = size_t(d.h) * d.w;
    for (int n = 0; n < d.n; ++n)
        for (int c = 0; c < d.c; ++c) {
            const float* xc = x.ptr() + (size_t(n) * d.c + c) * plane;
            float* oc = out.ptr() + (size_t(n) * d.c + c) * plane;
            for (int y = 0; y < d.h; ++y)
                for (int w = 0; w < d.w; ++w)
                    oc[size_t(y) * d.w + w] = xc[size_t(y) * d.w + (d.w - 1 - w)];
        }
    if (track_grad({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, o = out;
        active_tape()->record([xc, o, d, plane]() mutable {
            if (!o.has_grad() || !xc.requires_grad()) return;
            const float* gy = o.grad_view().data();
            for (int n = 0; n < d.n; ++n)
                for (int c = 0; c < d.c; ++c) {
                    const float* gc = gy + (size_t(n) * d.c + c) * plane;
                    float* dx = xc.grad().data() + (size_t(n) * d.c + c) * plane;
                    for (int y = 0; y < d.h; ++y)
                        for (int w = 0; w < d.w; ++w)
                            dx[size_t(y) * d.w + (d.w - 1 - w)] += gc[size_t(y) * d.w + w];
                }
        });
    }
    return out;
}

namespace {
Tensor reduce_impl(const Tensor& x, bool mean) {
    double acc = 0.0;
    const float* xp = x.ptr();
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) acc += xp[i];
    if (mean) acc /= double(n);
    Tensor out = Tensor::from_data({1, 1, 1, 1}, {float(acc)});
    out.set_precise(acc);
    if (track_grad({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, o = out;
        active_tape()->record([xc, o, mean]() mutable {
            if (!o.has_grad() || !xc.requires_grad()) return;
            const float g = o.grad_view()[0];
            const int64_t n = xc.numel();
            const float k = mean ? g / float(n) : g;
            float* dx = xc.grad().data();
            for (int64_t i = 0; i < n; ++i) dx[i] += k;
        });
    }
    return out;
}
}  // namespace

Tensor reduce_mean(const Tensor& x) { return reduce_impl(x, true); }
Tensor reduce_sum(const Tensor& x) { return reduce_impl(x, false); }

Tensor cross_entropy(const Tensor& logits, const LabelMap& labels, int ignore_index) {
    const Dims4 d = logits.dims();
    if (labels.n != d.n || labels.h != d.h || labels.w != d.w)
        throw ConfigError("cross_entropy: labels (" + std::to_string(labels.n) + "," +
                          std::to_string(labels.h) + "," + std::to_string(labels.w) +
                          ") do not match logits " + d.str());
    const int K = d.c;
    const size_t plane = size_t(d.h) * d.w;

    double loss = 0.0;
    int64_t count = 0;
    for (int n = 0; n < d.n; ++n) {
        const float* base = logits.ptr() + size_t(n) * K * plane;
        for (size_t i = 0; i < plane; ++i) {
            const int32_t lab = labels.data[size_t(n) * plane + i];
            if (lab == ignore_index) continue;
            if (lab < 0 || lab >= K)
                throw DataError("cross_entropy: label " + std::to_string(lab) +
                                " out of range for " + std::to_string(K) + " classes");
            float mx = base[i];
            for (int k = 1; k < K; ++k) mx = std::max(mx, base[size_t(k) * plane + i]);
            double se = 0.0;
            for (int k = 0; k < K; ++k) se += std::exp(double(base[size_t(k) * plane + i]) - mx);
            loss += (std::log(se) + mx) - double(base[size_t(lab) * plane + i]);
            ++count;
        }
    }
    const float value = count > 0 ? float(loss / double(count)) : 0.0f;
    Tensor out = Tensor::from_data({1, 1, 1, 1}, {value});
    out.set_precise(count > 0 ? loss / double(count) : 0.0);

    if (track_grad({&logits})) {
        out.set_requires_grad(true);
        Tensor lc = logits, o = out;
        LabelMap lab = labels;
        active_tape()->record([lc, o, lab, ignore_index, d, plane, K, count]() mutable {
            if (!o.has_grad() || !lc.requires_grad() || count == 0) return;
            const float g = o.grad_view()[0] / float(count);
            for (int n = 0; n < d.n; ++n) {
                const float* base = lc.ptr() + size_t(n) * K * plane;
                float* dbase = lc.grad().data() + size_t(n) * K * plane;
                for (size_t i = 0; i < plane; ++i) {
                    const int32_t y = lab.data[size_t(n) * plane + i];
                    if (y == ignore_index) continue;
                    float mx = base[i];
                    for (int k = 1; k < K; ++k) mx = std::max(mx, base[size_t(k) * plane + i]);
                    double se = 0.0;
                    for (int k = 0; k < K; ++k)
                        se += std::exp(double(base[size_t(k) * plane + i]) - mx);
                    for (int k = 0; k < K; ++k) {
                        const double p = std::exp(double(base[size_t(k) * plane + i]) - mx) / se;
                        dbase[size_t(k) * plane + i] += g * float(p - (k == y ? 1.0 : 0.0));
                    }
                }
            }
        });
    }
    return out;
}

}  // namespace sml
