#pragma once

#include <vector>

#include "sml/tensor.hpp"

namespace sml {

// 2D convolution (cross-correlation, no kernel flip).
// weight: (C_out, C_in/groups, k_h, k_w); bias optional, shape (1,C_out,1,1).
// Per-axis dilation (dil_h, dil_w) maps to the vertical/horizontal rates.
struct ConvParams {
    Tensor weight;
    Tensor bias;  // undefined handle = no bias
    int stride_h = 1, stride_w = 1;
    int pad_h = 0, pad_w = 0;
    int dil_h = 1, dil_w = 1;
    int groups = 1;
};

Dims4 conv2d_out_dims(const Dims4& in, const ConvParams& p);
Tensor conv2d(const Tensor& x, const ConvParams& p);

// Batch normalization state. gamma/beta are trainable (1,C,1,1) tensors;
// running stats are buffers updated only in training mode.
struct BatchNormParams {
    Tensor gamma, beta;
    Tensor running_mean, running_var;
    float eps = 1e-5f;
    float momentum = 0.1f;
};

BatchNormParams make_batch_norm(int channels);
Tensor batch_norm(const Tensor& x, BatchNormParams& p, bool training);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float c);
// x * s with a trainable scalar s of shape (1,1,1,1).
Tensor scale_by(const Tensor& x, const Tensor& s);

enum class PoolKind { Avg, Max };
enum class PoolAxis { Spatial, Channels };

// Spatial axis: reduce H,W -> (N,C,1,1), groups ignored.
// Channels axis: reduce each contiguous block of C/groups channels -> (N,groups,H,W).
Tensor pool(const Tensor& x, PoolKind kind, PoolAxis axis, int groups = 1);

inline Tensor avg_pool_spatial(const Tensor& x) { return pool(x, PoolKind::Avg, PoolAxis::Spatial); }
inline Tensor max_pool_spatial(const Tensor& x) { return pool(x, PoolKind::Max, PoolAxis::Spatial); }
inline Tensor avg_pool_channels(const Tensor& x, int g) { return pool(x, PoolKind::Avg, PoolAxis::Channels, g); }
inline Tensor max_pool_channels(const Tensor& x, int g) { return pool(x, PoolKind::Max, PoolAxis::Channels, g); }

Tensor bilinear_resize(const Tensor& x, int out_h, int out_w, bool align_corners = false);
Tensor broadcast_spatial(const Tensor& x, int h, int w);  // x is (N,C,1,1)

Tensor concat_channels(const std::vector<Tensor>& xs);
Tensor slice_channels(const Tensor& x, int c0, int len);
// (N,C,H,W) x (N,C,H,W) -> (N,2C,H,W) with channels [a0,b0,a1,b1,...].
Tensor interleave_channels(const Tensor& a, const Tensor& b);

// x * gate with gate (N,C,1,1), broadcast over H,W.
Tensor mul_channel_gate(const Tensor& x, const Tensor& gate);
// x * map with map (N,G,H,W); map channel g gates the g-th block of C/G channels.
Tensor mul_group_map(const Tensor& x, const Tensor& map);

Tensor flip_horizontal(const Tensor& x);
Tensor reduce_mean(const Tensor& x);
Tensor reduce_sum(const Tensor& x);

// Mean over non-ignored pixels of -log softmax at the true class.
// Returns scalar 0 with zero gradient when every pixel is ignored.
Tensor cross_entropy(const Tensor& logits, const LabelMap& labels, int ignore_index = 255);

}  // namespace sml
