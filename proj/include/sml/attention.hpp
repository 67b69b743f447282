#pragma once

#include "sml/ops.hpp"

namespace sml {

// Grouped multi-head gating applied around the pixel shuffle/un-shuffle
// rearrangements. SCA gates spatially (one map per channel group), CCA gates
// per channel (one scalar per channel, constant over space). Gates are
// sigmoid outputs, so both modules shrink magnitudes and preserve shape.
struct AttentionConfig {
    int groups = 4;
    int sca_kernel = 7;     // odd
    int cca_reduction = 4;  // bottleneck ratio within each group
};

// Largest divisor of `channels` that is <= `requested`; the model builder
// uses this to keep the group count valid on narrow tensors.
int effective_groups(int channels, int requested);

struct ScaParams {
    int groups = 1;
    ConvParams conv;  // grouped k x k, 2 -> 1 channels per group
};

struct CcaParams {
    int groups = 1;
    ConvParams fc1, fc2;  // grouped 1x1 bottleneck, shared by avg and max paths
};

ScaParams make_sca(int channels, const AttentionConfig& cfg, Rng& rng);
CcaParams make_cca(int channels, const AttentionConfig& cfg, Rng& rng);

Tensor sca_forward(const Tensor& x, const ScaParams& p);
Tensor cca_forward(const Tensor& x, const CcaParams& p);

void collect_sca(ParamRegistry& reg, const std::string& prefix, const ScaParams& p);
void collect_cca(ParamRegistry& reg, const std::string& prefix, const CcaParams& p);

}  // namespace sml
