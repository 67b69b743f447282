#pragma once

#include "sml/tensor.hpp"

namespace sml {

// Sub-pixel rearrangements trading channels for spatial resolution.
// Mapping: out[n, c, h*r+a, w*r+b] = in[n, c*r*r + a*r + b, h, w]
// (row-major within each r x r cell). pixel_unshuffle is the exact inverse.
// r = 1 is the identity.
Tensor pixel_shuffle(const Tensor& x, int r);
Tensor pixel_unshuffle(const Tensor& x, int r);

}  // namespace sml
