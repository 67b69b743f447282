#include "sml/attention.hpp"

namespace sml {

int effective_groups(int channels, int requested) {
    if (channels < 1) throw ConfigError("effective_groups: channels must be >= 1");
    int g = std::max(1, std::min(requested, channels));
    while (channels % g != 0) --g;
    return g;
}

ScaParams make_sca(int channels, const AttentionConfig& cfg, Rng& rng) {
    if (cfg.sca_kernel % 2 == 0) throw ConfigError("make_sca: kernel must be odd");
    ScaParams p;
    p.groups = effective_groups(channels, cfg.groups);
    const int k = cfg.sca_kernel;
    p.conv.weight = Tensor::kaiming_normal({p.groups, 2, k, k}, 2 * k * k, rng);
    p.conv.bias = Tensor::zeros({1, p.groups, 1, 1}, true);
    p.conv.groups = p.groups;
    p.conv.pad_h = p.conv.pad_w = (k - 1) / 2;
    return p;
}

Tensor sca_forward(const Tensor& x, const ScaParams& p) {
    if (x.dims().c % p.groups != 0)
        throw ConfigError("sca_forward: groups " + std::to_string(p.groups) +
                          " do not divide channels " + std::to_string(x.dims().c));
    Tensor avg = avg_pool_channels(x, p.groups);
    Tensor mx = max_pool_channels(x, p.groups);
    Tensor stacked = interleave_channels(avg, mx);  // group g reads channels (2g, 2g+1)
    Tensor gate = sigmoid(conv2d(stacked, p.conv));
    return mul_group_map(x, gate);
}

CcaParams make_cca(int channels, const AttentionConfig& cfg, Rng& rng) {
    CcaParams p;
    p.groups = effective_groups(channels, cfg.groups);
    const int per_group = channels / p.groups;
    const int rho = effective_groups(per_group, cfg.cca_reduction);  // same "largest divisor" rule
    const int hidden = channels / rho;

    p.fc1.weight = Tensor::kaiming_normal({hidden, per_group, 1, 1}, per_group, rng);
    p.fc1.bias = Tensor::zeros({1, hidden, 1, 1}, true);
    p.fc1.groups = p.groups;
    p.fc2.weight = Tensor::kaiming_normal({channels, hidden / p.groups, 1, 1}, hidden / p.groups, rng);
    p.fc2.bias = Tensor::zeros({1, channels, 1, 1}, true);
    p.fc2.groups = p.groups;
    return p;
}

Tensor cca_forward(const Tensor& x, const CcaParams& p) {
    if (x.dims().c % p.groups != 0)
        throw ConfigError("cca_forward: groups " + std::to_string(p.groups) +
                          " do not divide channels " + std::to_string(x.dims().c));
    Tensor avg = avg_pool_spatial(x);
    Tensor mx = max_pool_spatial(x);
    Tensor fa = conv2d(relu(conv2d(avg, p.fc1)), p.fc2);
    Tensor fm = conv2d(relu(conv2d(mx, p.fc1)), p.fc2);
    Tensor gate = sigmoid(add(fa, fm));
    return mul_channel_gate(x, gate);
}

void collect_sca(ParamRegistry& reg, const std::string& prefix, const ScaParams& p) {
    reg.add(prefix + ".conv.weight", p.conv.weight, true);
    reg.add(prefix + ".conv.bias", p.conv.bias, true);
}

void collect_cca(ParamRegistry& reg, const std::string& prefix, const CcaParams& p) {
    reg.add(prefix + ".fc1.weight", p.fc1.weight, true);
    reg.add(prefix + ".fc1.bias", p.fc1.bias, true);
    reg.add(prefix + ".fc2.weight", p.fc2.weight, true);
    reg.add(prefix + ".fc2.bias", p.fc2.bias, true);
}

}  // namespace sml
