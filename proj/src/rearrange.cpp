#include "sml/rearrange.hpp"

namespace sml {

namespace {

// lo: (n, c_lo, h_lo, w_lo), hi: (n, c_lo/r^2, h_lo*r, w_lo*r).
// Low-res channel c_hi*r*r + a*r + b lands on offset (a,b) of each r x r cell.

void scatter_lo_to_hi(const float* lo, float* hi, int n_batch, int c_lo, int h_lo, int w_lo,
                      int r) {
    const int c_hi = c_lo / (r * r);
    const int w_hi = w_lo * r;
    const size_t lo_plane = size_t(h_lo) * w_lo;
    const size_t hi_plane = lo_plane * r * r;
    for (int n = 0; n < n_batch; ++n)
        for (int ch = 0; ch < c_hi; ++ch)
            for (int a = 0; a < r; ++a)
                for (int b = 0; b < r; ++b) {
                    const int cl = ch * r * r + a * r + b;
                    const float* lp = lo + (size_t(n) * c_lo + cl) * lo_plane;
                    float* hp = hi + (size_t(n) * c_hi + ch) * hi_plane;
                    for (int y = 0; y < h_lo; ++y) {
                        const float* src = lp + size_t(y) * w_lo;
                        float* dst = hp + (size_t(y) * r + a) * size_t(w_hi) + b;
                        for (int x = 0; x < w_lo; ++x) dst[size_t(x) * r] = src[x];
                    }
                }
}

void gather_hi_to_lo(float* lo, const float* hi, int n_batch, int c_lo, int h_lo, int w_lo,
                     int r) {
    const int c_hi = c_lo / (r * r);
    const int w_hi = w_lo * r;
    const size_t lo_plane = size_t(h_lo) * w_lo;
    const size_t hi_plane = lo_plane * r * r;
    for (int n = 0; n < n_batch; ++n)
        for (int ch = 0; ch < c_hi; ++ch)
            for (int a = 0; a < r; ++a)
                for (int b = 0; b < r; ++b) {
                    const int cl = ch * r * r + a * r + b;
                    float* lp = lo + (size_t(n) * c_lo + cl) * lo_plane;
                    const float* hp = hi + (size_t(n) * c_hi + ch) * hi_plane;
                    for (int y = 0; y < h_lo; ++y) {
                        float* dst = lp + size_t(y) * w_lo;
                        const float* src = hp + (size_t(y) * r + a) * size_t(w_hi) + b;
                        for (int x = 0; x < w_lo; ++x) dst[x] = src[size_t(x) * r];
                    }
                }
}

Tensor identity_copy(const Tensor& x) {
    Tensor out = Tensor::from_data(x.dims(), std::vector<float>(x.data()));
    if (track_grad({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, o = out;
        active_tape()->record([xc, o]() mutable {
            if (!o.has_grad() || !xc.requires_grad()) return;
            const float* gy = o.grad_view().data();
            float* dx = xc.grad().data();
            for (int64_t i = 0; i < xc.numel(); ++i) dx[i] += gy[i];
        });
    }
    return out;
}

}  // namespace

Tensor pixel_shuffle(const Tensor& x, int r) {
    if (r < 1) throw ConfigError("pixel_shuffle: factor must be >= 1");
    const Dims4 d = x.dims();
    if (d.c % (r * r) != 0)
        throw ConfigError("pixel_shuffle: channels " + std::to_string(d.c) +
                          " not divisible by r^2 = " + std::to_string(r * r));
    if (r == 1) return identity_copy(x);

    Tensor out = Tensor::zeros({d.n, d.c / (r * r), d.h * r, d.w * r});
    scatter_lo_to_hi(x.ptr(), out.ptr(), d.n, d.c, d.h, d.w, r);

    if (track_grad({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, o = out;
        active_tape()->record([xc, o, d, r]() mutable {
            if (!o.has_grad() || !xc.requires_grad()) return;
            // gradient of a permutation is the inverse permutation, accumulated
            std::vector<float> tmp(size_t(xc.numel()), 0.0f);
            gather_hi_to_lo(tmp.data(), o.grad_view().data(), d.n, d.c, d.h, d.w, r);
            float* dx = xc.grad().data();
            for (int64_t i = 0; i < xc.numel(); ++i) dx[i] += tmp[size_t(i)];
        });
    }
    return out;
}

Tensor pixel_unshuffle(const Tensor& x, int r) {
    if (r < 1) throw ConfigError("pixel_unshuffle: factor must be >= 1");
    const Dims4 d = x.dims();
    if (d.h % r != 0 || d.w % r != 0)
        throw ConfigError("pixel_unshuffle: spatial dims " + d.str() + " not divisible by r = " +
                          std::to_string(r));
    if (r == 1) return identity_copy(x);

    const Dims4 od{d.n, d.c * r * r, d.h / r, d.w / r};
    Tensor out = Tensor::zeros(od);
    gather_hi_to_lo(out.ptr(), x.ptr(), d.n, od.c, od.h, od.w, r);

    if (track_grad({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, o = out;
        active_tape()->record([xc, o, od, r]() mutable {
            if (!o.has_grad() || !xc.requires_grad()) return;
            std::vector<float> tmp(size_t(xc.numel()), 0.0f);
            scatter_lo_to_hi(o.grad_view().data(), tmp.data(), od.n, od.c, od.h, od.w, r);
            float* dx = xc.grad().data();
            for (int64_t i = 0; i < xc.numel(); ++i) dx[i] += tmp[size_t(i)];
        });
    }
    return out;
}

}  // namespace sml
