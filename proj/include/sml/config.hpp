#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "sml/attention.hpp"

namespace sml {

enum class HeadKind { MetroCon, Aspp };

// Architecture hyperparameters at desk scale. The backbone keeps the
// five-stage OS16 topology (stem /4, then strides 1,2,2,1 with the last
// stage dilated); widths are scaled down from the full-size network.
struct ModelConfig {
    int num_classes = 4;
    std::array<int, 5> widths{16, 16, 32, 64, 64};
    int blocks_per_stage = 1;

    bool use_spam = true;
    bool use_attention = true;
    int spam_width = 8;
    int shuffle_factor = 4;
    // Adapter width between two consecutive shuffle hops; must be divisible
    // by shuffle_factor^2 so the second hop stays valid.
    int exchange_mid_width = 16;

    AttentionConfig attention;

    HeadKind head = HeadKind::MetroCon;
    std::vector<int> rates_v, rates_h;  // empty = the default 1..18 range
    int head_budget = 1280;
    int aspp_channels = 256;

    int decoder_width = 64;
    int aux_width = 64;

    static constexpr int output_stride = 16;

    std::vector<int> resolved_rates_v() const;
    std::vector<int> resolved_rates_h() const;
};

inline std::vector<int> default_rate_range() {
    std::vector<int> r(18);
    for (int i = 0; i < 18; ++i) r[i] = i + 1;
    return r;
}

inline std::vector<int> ModelConfig::resolved_rates_v() const {
    return rates_v.empty() ? default_rate_range() : rates_v;
}

inline std::vector<int> ModelConfig::resolved_rates_h() const {
    return rates_h.empty() ? default_rate_range() : rates_h;
}

}  // namespace sml
