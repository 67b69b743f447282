#include "sml/spam_net.hpp"

#include "sml/init.hpp"

namespace sml {

namespace {

struct StageSpec {
    int stride;
    int dilation;
};

// Stage topology behind the cumulative strides 4,4,8,16,16.
constexpr std::array<StageSpec, 4> kStageSpecs{{{1, 1}, {2, 1}, {2, 1}, {1, 2}}};

ResBlockParams make_res_block(int cin, int cout, int stride, int dilation, Rng& rng) {
    ResBlockParams b;
    b.conv1 = make_conv(cin, cout, 3, stride, dilation, rng);
    b.bn1 = make_batch_norm(cout);
    b.conv2 = make_conv(cout, cout, 3, 1, dilation, rng);
    b.bn2 = make_batch_norm(cout);
    if (stride != 1 || cin != cout) {
        b.has_proj = true;
        b.proj = make_conv(cin, cout, 1, stride, 1, rng);
        b.proj_bn = make_batch_norm(cout);
    }
    return b;
}

Tensor res_block_forward(const Tensor& x, ResBlockParams& b, bool training) {
    Tensor y = relu(batch_norm(conv2d(x, b.conv1), b.bn1, training));
    y = batch_norm(conv2d(y, b.conv2), b.bn2, training);
    Tensor skip = b.has_proj ? batch_norm(conv2d(x, b.proj), b.proj_bn, training) : x;
    return relu(add(y, skip));
}

// Number of factor-r hops bridging a cumulative stride, or -1 when the
// stride is not an exact power of r.
int hops_for_stride(int cum, int r) {
    int hops = 0;
    while (cum > 1) {
        if (cum % r != 0) return -1;
        cum /= r;
        ++hops;
    }
    return hops >= 1 ? hops : -1;
}

ExchangeParams make_exchange(int stage_width, int hops, const ModelConfig& cfg, Rng& rng) {
    const int r = cfg.shuffle_factor;
    const int rr = r * r;
    ExchangeParams ex;

    int ch = stage_width;
    for (int h = 0; h < hops; ++h) {
        if (ch % rr != 0)
            throw ConfigError("exchange: " + std::to_string(ch) +
                              " channels not divisible by r^2 = " + std::to_string(rr));
        ch /= rr;
        DownHop hop;
        if (cfg.use_attention) hop.sca = make_sca(ch, cfg.attention, rng);
        const int target = (h + 1 == hops) ? cfg.spam_width : cfg.exchange_mid_width;
        hop.adapter = make_zero_conv1x1(ch, target);
        ex.down.push_back(std::move(hop));
        ch = target;
    }

    ch = cfg.spam_width;
    for (int h = 0; h < hops; ++h) {
        ch *= rr;
        UpHop hop;
        if (cfg.use_attention) hop.cca = make_cca(ch, cfg.attention, rng);
        const int target = (h + 1 == hops) ? stage_width : cfg.exchange_mid_width;
        hop.adapter = make_zero_conv1x1(ch, target);
        ex.up.push_back(std::move(hop));
        ch = target;
    }
    return ex;
}

}  // namespace

std::array<int, 5> stage_cum_strides() {
    std::array<int, 5> cum{};
    cum[0] = 4;
    for (int s = 0; s < 4; ++s) cum[s + 1] = cum[s] * kStageSpecs[s].stride;
    return cum;
}

SpamNetParams make_spam_net(const ModelConfig& cfg, Rng& rng) {
    SpamNetParams p;
    p.cfg = cfg;

    p.stem.conv1 = make_conv(3, cfg.widths[0], 3, 2, 1, rng);
    p.stem.bn1 = make_batch_norm(cfg.widths[0]);
    p.stem.conv2 = make_conv(cfg.widths[0], cfg.widths[0], 3, 2, 1, rng);
    p.stem.bn2 = make_batch_norm(cfg.widths[0]);

    for (int s = 0; s < 4; ++s) {
        int cin = cfg.widths[s];
        for (int b = 0; b < cfg.blocks_per_stage; ++b) {
            const int stride = b == 0 ? kStageSpecs[s].stride : 1;
            p.stages[s].blocks.push_back(
                make_res_block(cin, cfg.widths[s + 1], stride, kStageSpecs[s].dilation, rng));
            cin = cfg.widths[s + 1];
        }
    }

    p.exchanges.assign(5, std::nullopt);
    if (cfg.use_spam) {
        const int r = cfg.shuffle_factor;
        if (cfg.exchange_mid_width % (r * r) != 0)
            throw ConfigError("exchange_mid_width must be divisible by r^2");
        p.spam_init = make_conv(3, cfg.spam_width, 3, 1, 1, rng, /*bias=*/true);
        const auto cum = stage_cum_strides();
        for (int s = 0; s < 5; ++s) {
            p.spam_convs.push_back(make_conv(cfg.spam_width, cfg.spam_width, 3, 1, 1, rng));
            p.spam_bns.push_back(make_batch_norm(cfg.spam_width));
            const int hops = hops_for_stride(cum[s], r);
            if (hops > 0) p.exchanges[s] = make_exchange(cfg.widths[s], hops, cfg, rng);
        }
    }
    return p;
}

std::vector<Tensor> backbone_forward(const Tensor& x, SpamNetParams& p, bool training) {
    if (x.dims().h % ModelConfig::output_stride != 0 ||
        x.dims().w % ModelConfig::output_stride != 0)
        throw ConfigError("backbone_forward: input dims " + x.dims().str() +
                          " not divisible by the output stride");
    std::vector<Tensor> feats;
    Tensor b = relu(batch_norm(conv2d(x, p.stem.conv1), p.stem.bn1, training));
    b = relu(batch_norm(conv2d(b, p.stem.conv2), p.stem.bn2, training));
    feats.push_back(b);
    for (int s = 0; s < 4; ++s) {
        for (auto& blk : p.stages[s].blocks) b = res_block_forward(b, blk, training);
        feats.push_back(b);
    }
    return feats;
}

TrunkOutputs spam_joint_forward(const Tensor& x, SpamNetParams& p, bool training) {
    if (!p.cfg.use_spam) {
        auto feats = backbone_forward(x, p, training);
        return {feats.back(), Tensor()};
    }
    if (x.dims().h % ModelConfig::output_stride != 0 ||
        x.dims().w % ModelConfig::output_stride != 0)
        throw ConfigError("spam_joint_forward: input dims " + x.dims().str() +
                          " not divisible by the output stride");

    const int r = p.cfg.shuffle_factor;
    Tensor spam = conv2d(x, p.spam_init);
    Tensor b;
    for (int s = 0; s < 5; ++s) {
        if (s == 0) {
            b = relu(batch_norm(conv2d(x, p.stem.conv1), p.stem.bn1, training));
            b = relu(batch_norm(conv2d(b, p.stem.conv2), p.stem.bn2, training));
        } else {
            for (auto& blk : p.stages[s - 1].blocks) b = res_block_forward(b, blk, training);
        }
        spam = relu(batch_norm(conv2d(spam, p.spam_convs[s]), p.spam_bns[s], training));

        if (p.exchanges[s]) {
            auto& ex = *p.exchanges[s];
            // both directions read the pre-exchange features
            Tensor t = b;
            for (auto& hop : ex.down) {
                t = pixel_shuffle(t, r);
                if (hop.sca) t = sca_forward(t, *hop.sca);
                t = conv2d(t, hop.adapter);
            }
            Tensor u = spam;
            for (auto& hop : ex.up) {
                u = pixel_unshuffle(u, r);
                if (hop.cca) u = cca_forward(u, *hop.cca);
                u = conv2d(u, hop.adapter);
            }
            spam = add(spam, t);
            b = add(b, u);
        }
    }
    return {b, spam};
}

void collect_spam_net(ParamRegistry& reg, const std::string& prefix, const SpamNetParams& p) {
    collect_conv(reg, prefix + ".stem.conv1", p.stem.conv1);
    collect_bn(reg, prefix + ".stem.bn1", p.stem.bn1);
    collect_conv(reg, prefix + ".stem.conv2", p.stem.conv2);
    collect_bn(reg, prefix + ".stem.bn2", p.stem.bn2);
    for (int s = 0; s < 4; ++s)
        for (size_t bi = 0; bi < p.stages[s].blocks.size(); ++bi) {
            const auto& b = p.stages[s].blocks[bi];
            const std::string bp =
                prefix + ".stage" + std::to_string(s + 1) + ".block" + std::to_string(bi);
            collect_conv(reg, bp + ".conv1", b.conv1);
            collect_bn(reg, bp + ".bn1", b.bn1);
            collect_conv(reg, bp + ".conv2", b.conv2);
            collect_bn(reg, bp + ".bn2", b.bn2);
            if (b.has_proj) {
                collect_conv(reg, bp + ".proj", b.proj);
                collect_bn(reg, bp + ".proj_bn", b.proj_bn);
            }
        }
    if (!p.cfg.use_spam) return;
    collect_conv(reg, prefix + ".spam.init", p.spam_init);
    for (int s = 0; s < 5; ++s) {
        const std::string sp = prefix + ".spam.block" + std::to_string(s);
        collect_conv(reg, sp + ".conv", p.spam_convs[s]);
        collect_bn(reg, sp + ".bn", p.spam_bns[s]);
        if (!p.exchanges[s]) continue;
        const auto& ex = *p.exchanges[s];
        for (size_t h = 0; h < ex.down.size(); ++h) {
            const std::string hp =
                prefix + ".exchange" + std::to_string(s) + ".down" + std::to_string(h);
            if (ex.down[h].sca) collect_sca(reg, hp + ".sca", *ex.down[h].sca);
            collect_conv(reg, hp + ".adapter", ex.down[h].adapter);
        }
        for (size_t h = 0; h < ex.up.size(); ++h) {
            const std::string hp =
                prefix + ".exchange" + std::to_string(s) + ".up" + std::to_string(h);
            if (ex.up[h].cca) collect_cca(reg, hp + ".cca", *ex.up[h].cca);
            collect_conv(reg, hp + ".adapter", ex.up[h].adapter);
        }
    }
}

AuxHeadParams make_aux_head(int in_channels, int width, int classes, Rng& rng) {
    AuxHeadParams p;
    p.conv = make_conv(in_channels, width, 3, 1, 1, rng);
    p.bn = make_batch_norm(width);
    p.cls = make_conv(width, classes, 1, 1, 1, rng, /*bias=*/true);
    return p;
}

Tensor aux_head_forward(const Tensor& feat, AuxHeadParams& p, int out_h, int out_w,
                        bool training) {
    Tensor y = relu(batch_norm(conv2d(feat, p.conv), p.bn, training));
    return bilinear_resize(conv2d(y, p.cls), out_h, out_w);
}

void collect_aux_head(ParamRegistry& reg, const std::string& prefix, const AuxHeadParams& p) {
    collect_conv(reg, prefix + ".conv", p.conv);
    collect_bn(reg, prefix + ".bn", p.bn);
    collect_conv(reg, prefix + ".cls", p.cls);
}

}  // namespace sml
