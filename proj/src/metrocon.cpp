#include <algorithm>
#include <cmath>

#include "sml/init.hpp"
#include "sml/metrocon.hpp"

namespace sml {

ConvParams make_conv(int cin, int cout, int k, int stride, int dilation, Rng& rng, bool bias,
                     int groups) {
    ConvParams c;
    const int cg = cin / groups;
    if (cg * groups != cin || cout % groups != 0)
        throw ConfigError("make_conv: groups must divide channel counts");
    c.weight = Tensor::kaiming_normal({cout, cg, k, k}, cg * k * k, rng);
    if (bias) c.bias = Tensor::zeros({1, cout, 1, 1}, true);
    c.stride_h = c.stride_w = stride;
    c.dil_h = c.dil_w = dilation;
    c.pad_h = c.pad_w = (k - 1) / 2 * dilation;
    c.groups = groups;
    return c;
}

ConvParams make_zero_conv1x1(int cin, int cout) {
    ConvParams c;
    c.weight = Tensor::zeros({cout, cin, 1, 1}, true);
    c.bias = Tensor::zeros({1, cout, 1, 1}, true);
    return c;
}

void collect_conv(ParamRegistry& reg, const std::string& prefix, const ConvParams& p) {
    reg.add(prefix + ".weight", p.weight, true);
    if (p.bias.defined()) reg.add(prefix + ".bias", p.bias, true);
}

void collect_bn(ParamRegistry& reg, const std::string& prefix, const BatchNormParams& p) {
    reg.add(prefix + ".gamma", p.gamma, true);
    reg.add(prefix + ".beta", p.beta, true);
    reg.add(prefix + ".running_mean", p.running_mean, false);
    reg.add(prefix + ".running_var", p.running_var, false);
}

namespace {

int round_half_even(double v) {
    const double f = std::floor(v);
    const double frac = v - f;
    if (frac > 0.5) return int(f) + 1;
    if (frac < 0.5) return int(f);
    const long long fl = (long long)f;
    return int(fl % 2 == 0 ? fl : fl + 1);
}

bool is_range(const std::vector<int>& r, int lo, int hi) {
    if (int(r.size()) != hi - lo + 1) return false;
    for (int i = 0; i < int(r.size()); ++i)
        if (r[i] != lo + i) return false;
    return true;
}

// Published depths for the three reference grids; everything else follows
// the budget formula.
int pinned_depth(const std::vector<int>& rv, const std::vector<int>& rh) {
    if (rv == std::vector<int>{6, 12, 18} && rh == rv) return 144;
    if (is_range(rv, 1, 9) && rv == rh) return 16;
    if (is_range(rv, 1, 18) && rv == rh) return 4;
    return 0;
}

ConvParams make_branch_conv(int in_channels, int depth, int dil_v, int dil_h, Rng& rng) {
    ConvParams c;
    c.weight = Tensor::kaiming_normal({depth, in_channels, 3, 3}, in_channels * 9, rng);
    c.dil_h = dil_v;
    c.dil_w = dil_h;
    c.pad_h = dil_v;
    c.pad_w = dil_h;
    return c;
}

}  // namespace

DilationGrid build_grid(const std::vector<int>& rates_v, const std::vector<int>& rates_h,
                        int total_budget) {
    if (rates_v.empty() || rates_h.empty()) throw ConfigError("build_grid: empty rate list");
    for (int r : rates_v)
        if (r < 1) throw ConfigError("build_grid: rates must be >= 1");
    for (int r : rates_h)
        if (r < 1) throw ConfigError("build_grid: rates must be >= 1");

    DilationGrid g;
    g.rates_v = rates_v;
    g.rates_h = rates_h;
    for (int i : rates_v)
        for (int j : rates_h) g.pairs.emplace_back(i, j);

    for (size_t a = 0; a < g.pairs.size(); ++a)
        for (size_t b = a + 1; b < g.pairs.size(); ++b)
            if (g.pairs[a] == g.pairs[b]) throw ConfigError("build_grid: duplicate rate pair");

    const int pinned = pinned_depth(rates_v, rates_h);
    g.depth = pinned > 0 ? pinned
                         : round_half_even(double(total_budget) / double(g.pairs.size()));
    if (g.depth < 1) throw ConfigError("build_grid: budget too small for this grid");
    return g;
}

int grid_out_channels(const DilationGrid& grid) { return grid.depth * int(grid.pairs.size()); }

MetroConParams make_metrocon(int in_channels, const DilationGrid& grid, Rng& rng) {
    MetroConParams p;
    p.grid = grid;
    p.in_channels = in_channels;
    p.branches.reserve(grid.pairs.size());
    for (const auto& [i, j] : grid.pairs) {
        MetroConBranch b;
        b.conv = make_branch_conv(in_channels, grid.depth, i, j, rng);
        b.bn = make_batch_norm(grid.depth);
        b.confidence = Tensor::full({1, 1, 1, 1}, 1.0f, true);
        p.branches.push_back(std::move(b));
    }
    return p;
}

Tensor metrocon_forward(const Tensor& x, MetroConParams& p, bool training) {
    if (x.dims().c != p.in_channels)
        throw ConfigError("metrocon_forward: expected " + std::to_string(p.in_channels) +
                          " input channels, got " + std::to_string(x.dims().c));
    std::vector<Tensor> slices;
    slices.reserve(p.branches.size());
    for (auto& b : p.branches) {
        if (!b.enabled) {
            slices.push_back(Tensor::zeros({x.dims().n, p.grid.depth, x.dims().h, x.dims().w}));
            continue;
        }
        Tensor y = scale_by(relu(batch_norm(conv2d(x, b.conv), b.bn, training)), b.confidence);
        slices.push_back(std::move(y));
    }
    return concat_channels(slices);
}

void collect_metrocon(ParamRegistry& reg, const std::string& prefix, const MetroConParams& p) {
    for (size_t k = 0; k < p.branches.size(); ++k) {
        const auto& b = p.branches[k];
        if (!b.enabled) continue;
        const std::string bp = prefix + ".branch" + std::to_string(k);
        collect_conv(reg, bp + ".conv", b.conv);
        collect_bn(reg, bp + ".bn", b.bn);
        reg.add(bp + ".confidence", b.confidence, true);
    }
}

AsppParams make_aspp(int in_channels, Rng& rng, int branch_channels) {
    AsppParams p;
    p.in_channels = in_channels;
    p.branch_channels = branch_channels;
    p.convs.push_back(make_conv(in_channels, branch_channels, 1, 1, 1, rng));
    p.convs.push_back(make_conv(in_channels, branch_channels, 3, 1, 6, rng));
    p.convs.push_back(make_conv(in_channels, branch_channels, 3, 1, 12, rng));
    p.convs.push_back(make_conv(in_channels, branch_channels, 3, 1, 18, rng));
    for (int i = 0; i < 4; ++i) p.bns.push_back(make_batch_norm(branch_channels));
    p.pool_conv = make_conv(in_channels, branch_channels, 1, 1, 1, rng);
    p.pool_bn = make_batch_norm(branch_channels);
    p.project = make_conv(5 * branch_channels, branch_channels, 1, 1, 1, rng);
    p.project_bn = make_batch_norm(branch_channels);
    return p;
}

Tensor aspp_forward(const Tensor& x, AsppParams& p, bool training) {
    if (x.dims().c != p.in_channels)
        throw ConfigError("aspp_forward: expected " + std::to_string(p.in_channels) +
                          " input channels, got " + std::to_string(x.dims().c));
    std::vector<Tensor> branches;
    for (int i = 0; i < 4; ++i)
        branches.push_back(relu(batch_norm(conv2d(x, p.convs[i]), p.bns[i], training)));
    Tensor pooled =
        relu(batch_norm(conv2d(avg_pool_spatial(x), p.pool_conv), p.pool_bn, training));
    branches.push_back(broadcast_spatial(pooled, x.dims().h, x.dims().w));
    Tensor cat = concat_channels(branches);  // 5 * branch_channels
    return relu(batch_norm(conv2d(cat, p.project), p.project_bn, training));
}

int aspp_out_channels(const AsppParams& p) { return p.branch_channels; }

void collect_aspp(ParamRegistry& reg, const std::string& prefix, const AsppParams& p) {
    for (int i = 0; i < 4; ++i) {
        collect_conv(reg, prefix + ".conv" + std::to_string(i), p.convs[i]);
        collect_bn(reg, prefix + ".bn" + std::to_string(i), p.bns[i]);
    }
    collect_conv(reg, prefix + ".pool_conv", p.pool_conv);
    collect_bn(reg, prefix + ".pool_bn", p.pool_bn);
    collect_conv(reg, prefix + ".project", p.project);
    collect_bn(reg, prefix + ".project_bn", p.project_bn);
}

int64_t count_params(const MetroConParams& p) {
    ParamRegistry reg;
    collect_metrocon(reg, "head", p);
    return reg.trainable_count();
}

int64_t count_params(const AsppParams& p) {
    ParamRegistry reg;
    collect_aspp(reg, "head", p);
    return reg.trainable_count();
}

int64_t count_macs(const MetroConParams& p, int h, int w) {
    int64_t macs = 0;
    const int64_t px = int64_t(h) * w;
    for (const auto& b : p.branches) {
        if (!b.enabled) continue;
        macs += px * int64_t(p.grid.depth) * p.in_channels * 9;  // conv
        macs += px * int64_t(p.grid.depth) * 3;                  // bn + relu + confidence
    }
    return macs;
}

int64_t count_macs(const AsppParams& p, int h, int w) {
    const int64_t px = int64_t(h) * w;
    const int64_t bc = p.branch_channels;
    int64_t macs = 0;
    macs += px * bc * p.in_channels;          // 1x1
    macs += 3 * px * bc * p.in_channels * 9;  // dilated 3x3s
    macs += int64_t(p.in_channels) * px;      // global pool
    macs += bc * p.in_channels;               // pooled 1x1
    macs += px * bc * (5 * bc);               // projection
    macs += 6 * px * bc * 2;                  // bn + relu per branch and projection
    return macs;
}

}  // namespace sml
