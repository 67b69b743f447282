#pragma once

#include <optional>

#include "sml/metrocon.hpp"
#include "sml/spam_net.hpp"

namespace sml {

// Decoder joining the context-head feature (stride 16) and the SpaM feature
// (stride 1) at stride 4: shuffle + SCA on the head side, un-shuffle + CCA on
// the SpaM side, concat, two 3x3 conv blocks, 1x1 classifier, bilinear resize.
struct DecoderParams {
    int r = 4;
    bool expects_spam = true;
    std::optional<ScaParams> sca;
    std::optional<CcaParams> cca;
    ConvParams conv1, conv2, cls;
    BatchNormParams bn1, bn2;
};

DecoderParams make_decoder(int head_channels, const ModelConfig& cfg, Rng& rng);
// spam_out may be an undefined handle when the model runs without SpaM.
Tensor decoder_forward(const Tensor& head_out, const Tensor& spam_out, DecoderParams& p,
                       int out_h, int out_w, bool training);
void collect_decoder(ParamRegistry& reg, const std::string& prefix, const DecoderParams& p);

// Full model: trunk (backbone + SpaM), selectable context head, decoder and
// auxiliary head. The head choice only changes head/decoder-input channels.
struct SpaceMeshLab {
    ModelConfig cfg;
    SpamNetParams trunk;
    std::optional<MetroConParams> metrocon;
    std::optional<AsppParams> aspp;
    DecoderParams decoder;
    AuxHeadParams aux;
    int64_t forward_count = 0;

    int head_channels() const;
};

SpaceMeshLab build_model(const ModelConfig& cfg, uint64_t seed);

struct ForwardResult {
    Tensor main_logits;
    Tensor aux_logits;  // defined only in training mode
};

ForwardResult model_forward(SpaceMeshLab& m, const Tensor& x, bool training);
void collect_model(ParamRegistry& reg, const SpaceMeshLab& m);

}  // namespace sml
