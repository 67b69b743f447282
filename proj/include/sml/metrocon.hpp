#pragma once

#include <utility>
#include <vector>

#include "sml/ops.hpp"

namespace sml {

// Meshgrid of dilation-rate pairs (vertical outer, horizontal inner) with a
// fixed per-branch output depth. Depth follows round-half-even(budget / (M*N))
// except for three reference grids that pin their published depth so the
// concatenated width stays at 1296 for all of them.
struct DilationGrid {
    std::vector<int> rates_v, rates_h;
    std::vector<std::pair<int, int>> pairs;
    int depth = 0;
};

DilationGrid build_grid(const std::vector<int>& rates_v, const std::vector<int>& rates_h,
                        int total_budget = 1280);

int grid_out_channels(const DilationGrid& grid);

// One dilated 3x3 branch: conv (pad = dilation) -> BN -> ReLU -> * confidence.
// A disabled branch keeps its slot in the concat as zeros and owns no
// parameters.
struct MetroConBranch {
    ConvParams conv;
    BatchNormParams bn;
    Tensor confidence;
    bool enabled = true;
};

struct MetroConParams {
    DilationGrid grid;
    int in_channels = 0;
    std::vector<MetroConBranch> branches;
};

MetroConParams make_metrocon(int in_channels, const DilationGrid& grid, Rng& rng);
Tensor metrocon_forward(const Tensor& x, MetroConParams& p, bool training);
void collect_metrocon(ParamRegistry& reg, const std::string& prefix, const MetroConParams& p);

// DeepLab-style pyramid baseline: 1x1 + three 3x3 at dilations 6/12/18 +
// image pooling, each to `branch_channels`, concatenated and projected.
struct AsppParams {
    int in_channels = 0;
    int branch_channels = 256;
    std::vector<ConvParams> convs;  // 1x1, d6, d12, d18
    std::vector<BatchNormParams> bns;
    ConvParams pool_conv;
    BatchNormParams pool_bn;
    ConvParams project;
    BatchNormParams project_bn;
};

AsppParams make_aspp(int in_channels, Rng& rng, int branch_channels = 256);
Tensor aspp_forward(const Tensor& x, AsppParams& p, bool training);
int aspp_out_channels(const AsppParams& p);
void collect_aspp(ParamRegistry& reg, const std::string& prefix, const AsppParams& p);

// Exact trainable scalar count for a head collected into a fresh registry.
int64_t count_params(const MetroConParams& p);
int64_t count_params(const AsppParams& p);

// Multiply-accumulate count of one forward pass on an (h, w) feature map.
int64_t count_macs(const MetroConParams& p, int h, int w);
int64_t count_macs(const AsppParams& p, int h, int w);

}  // namespace sml
