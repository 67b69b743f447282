#include <cmath>

#include "sml/grad_check.hpp"

namespace sml {

double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, float eps) {
    x.set_requires_grad(true);
    x.zero_grad();

    Tape tape;
    {
        TapeScope scope(tape);
        Tensor y = f(x);
        if (y.dims() != Dims4{1, 1, 1, 1})
            throw ConfigError("grad_check: f must be scalar-valued, got " + y.dims().str());
        if (!std::isfinite(y.scalar()))
            throw NumericError("grad_check: non-finite output");
        tape.backward(y);
    }
    std::vector<float> g_ad = x.grad();
    x.zero_grad();

    double worst = 0.0;
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) {
        const float orig = x.data()[i];
        const float up_x = orig + eps;
        const float down_x = orig - eps;
        x.data()[i] = up_x;
        const double up = f(x).scalar_precise();
        x.data()[i] = down_x;
        const double down = f(x).scalar_precise();
        x.data()[i] = orig;
        if (!std::isfinite(up) || !std::isfinite(down))
            throw NumericError("grad_check: non-finite output during finite differences");
        // use the realized perturbation, not the nominal eps
        const double step = double(up_x) - double(down_x);
        const double fd = (up - down) / step;
        const double ad = g_ad[i];
        const double denom = std::max({std::abs(fd), std::abs(ad), 1e-8});
        worst = std::max(worst, std::abs(fd - ad) / denom);
    }
    return worst;
}

GradCheckReport grad_check_composite(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                                     float eps) {
    x.set_requires_grad(true);
    x.zero_grad();

    Tape tape;
    {
        TapeScope scope(tape);
        Tensor y = f(x);
        if (y.dims() != Dims4{1, 1, 1, 1})
            throw ConfigError("grad_check: f must be scalar-valued, got " + y.dims().str());
        if (!std::isfinite(y.scalar()))
            throw NumericError("grad_check: non-finite output");
        tape.backward(y);
    }
    std::vector<float> g_ad = x.grad();
    x.zero_grad();

    auto eval_at = [&](int64_t i, float v) {
        const float orig = x.data()[i];
        x.data()[i] = v;
        const double out = f(x).scalar_precise();
        x.data()[i] = orig;
        if (!std::isfinite(out))
            throw NumericError("grad_check: non-finite output during finite differences");
        return out;
    };
    const double f0 = f(x).scalar_precise();

    GradCheckReport report;
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) {
        const float o = x.data()[i];
        const double ad = g_ad[i];
        bool measured = false;
        double best_rel = 0.0;
        // shrink the window until it is free of kinks; a wrong analytic
        // gradient is step-invariant and survives every refinement
        for (float step : {eps, eps * 0.25f, eps * 0.0625f}) {
            const float e2 = step * 0.5f;
            const double up_w = eval_at(i, o + step), dn_w = eval_at(i, o - step);
            const double up_n = eval_at(i, o + e2), dn_n = eval_at(i, o - e2);
            const double ce = (up_w - dn_w) / (double(o + step) - double(o - step));
            const double ce2 = (up_n - dn_n) / (double(o + e2) - double(o - e2));
            const double fwd = (up_n - f0) / (double(o + e2) - double(o));
            const double bwd = (f0 - dn_n) / (double(o) - double(o - e2));

            // a kink inside the window shows up as disagreeing one-sided
            // slopes; the coordinate is not in a smooth region at this step
            const double side_scale = std::max({std::abs(fwd), std::abs(bwd), 1e-6});
            if (std::abs(fwd - bwd) > 0.05 * side_scale) continue;

            // deviations within the measured step-halving residue are float
            // noise, not gradient error
            const double noise = 4.0 * std::abs(ce - ce2);
            const double err = std::abs(ce2 - ad);
            const double rel =
                err <= noise ? 0.0 : err / std::max({std::abs(ce2), std::abs(ad), 1e-8});
            if (!measured || rel < best_rel) {
                measured = true;
                best_rel = rel;
            }
            if (rel <= 1e-3) break;
        }
        if (!measured) {
            ++report.skipped;
            continue;
        }
        ++report.checked;
        report.max_rel = std::max(report.max_rel, best_rel);
    }
    return report;
}

}  // namespace sml
