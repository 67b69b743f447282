#pragma once

#include <string>

#include "sml/ops.hpp"

namespace sml {

// Kaiming-normal conv with square kernel; padding = (k-1)/2 * dilation so
// stride-1 convs preserve spatial dims.
ConvParams make_conv(int cin, int cout, int k, int stride, int dilation, Rng& rng,
                     bool bias = false, int groups = 1);

// Zero-initialized 1x1 fusion adapter (with bias); an exchange starts silent
// and learns its contribution.
ConvParams make_zero_conv1x1(int cin, int cout);

void collect_conv(ParamRegistry& reg, const std::string& prefix, const ConvParams& p);
void collect_bn(ParamRegistry& reg, const std::string& prefix, const BatchNormParams& p);

}  // namespace sml
