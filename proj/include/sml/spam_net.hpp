#pragma once

#include <optional>

#include "sml/config.hpp"
#include "sml/rearrange.hpp"

namespace sml {

struct ResBlockParams {
    ConvParams conv1, conv2;
    BatchNormParams bn1, bn2;
    bool has_proj = false;
    ConvParams proj;
    BatchNormParams proj_bn;
};

struct StemParams {
    ConvParams conv1, conv2;
    BatchNormParams bn1, bn2;
};

struct StageParams {
    std::vector<ResBlockParams> blocks;
};

// One hop of the backbone->SpaM exchange: shuffle up by r, gate, adapt width.
struct DownHop {
    std::optional<ScaParams> sca;
    ConvParams adapter;
};

// One hop of the SpaM->backbone exchange: unshuffle by r, gate, adapt width.
struct UpHop {
    std::optional<CcaParams> cca;
    ConvParams adapter;
};

struct ExchangeParams {
    std::vector<DownHop> down;
    std::vector<UpHop> up;
};

// Backbone plus the full-resolution SpaM stream. Stages whose cumulative
// stride is a power of the shuffle factor (4 and 16 here) exchange features
// in both directions; the stride-8 stage cannot be bridged by factor-4 hops
// and is skipped.
struct SpamNetParams {
    ModelConfig cfg;

    StemParams stem;
    std::array<StageParams, 4> stages;

    ConvParams spam_init;                // 3x3, image -> spam width
    std::vector<ConvParams> spam_convs;  // one SpaM block per backbone stage
    std::vector<BatchNormParams> spam_bns;
    std::vector<std::optional<ExchangeParams>> exchanges;  // indexed by stage
};

// Cumulative stride after each of the five stages: 4,4,8,16,16.
std::array<int, 5> stage_cum_strides();

SpamNetParams make_spam_net(const ModelConfig& cfg, Rng& rng);

// Plain backbone pass over the shared weights; returns all stage outputs.
std::vector<Tensor> backbone_forward(const Tensor& x, SpamNetParams& p, bool training);

struct TrunkOutputs {
    Tensor backbone_final;  // stride 16, input to the context head and aux head
    Tensor spam_final;      // stride 1, undefined when SpaM is disabled
};

TrunkOutputs spam_joint_forward(const Tensor& x, SpamNetParams& p, bool training);

void collect_spam_net(ParamRegistry& reg, const std::string& prefix, const SpamNetParams& p);

struct AuxHeadParams {
    ConvParams conv;
    BatchNormParams bn;
    ConvParams cls;
};

AuxHeadParams make_aux_head(int in_channels, int width, int classes, Rng& rng);
Tensor aux_head_forward(const Tensor& feat, AuxHeadParams& p, int out_h, int out_w,
                        bool training);
void collect_aux_head(ParamRegistry& reg, const std::string& prefix, const AuxHeadParams& p);

}  // namespace sml
