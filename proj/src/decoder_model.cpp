#include "sml/decoder_model.hpp"

#include "sml/init.hpp"

namespace sml {

DecoderParams make_decoder(int head_channels, const ModelConfig& cfg, Rng& rng) {
    DecoderParams p;
    p.r = cfg.shuffle_factor;
    p.expects_spam = cfg.use_spam;
    const int rr = p.r * p.r;
    if (head_channels % rr != 0)
        throw ConfigError("decoder: head channels " + std::to_string(head_channels) +
                          " not divisible by r^2 = " + std::to_string(rr));
    const int head_ch = head_channels / rr;
    const int spam_ch = cfg.use_spam ? cfg.spam_width * rr : 0;
    if (cfg.use_attention) {
        p.sca = make_sca(head_ch, cfg.attention, rng);
        if (cfg.use_spam) p.cca = make_cca(spam_ch, cfg.attention, rng);
    }
    p.conv1 = make_conv(head_ch + spam_ch, cfg.decoder_width, 3, 1, 1, rng);
    p.bn1 = make_batch_norm(cfg.decoder_width);
    p.conv2 = make_conv(cfg.decoder_width, cfg.decoder_width, 3, 1, 1, rng);
    p.bn2 = make_batch_norm(cfg.decoder_width);
    p.cls = make_conv(cfg.decoder_width, cfg.num_classes, 1, 1, 1, rng, /*bias=*/true);
    return p;
}

Tensor decoder_forward(const Tensor& head_out, const Tensor& spam_out, DecoderParams& p,
                       int out_h, int out_w, bool training) {
    Tensor t = pixel_shuffle(head_out, p.r);
    if (p.sca) t = sca_forward(t, *p.sca);
    Tensor joined;
    if (p.expects_spam) {
        if (!spam_out.defined())
            throw ConfigError("decoder_forward: missing the stride-1 feature");
        if (spam_out.dims().h != head_out.dims().h * p.r * p.r ||
            spam_out.dims().w != head_out.dims().w * p.r * p.r)
            throw ConfigError("decoder_forward: spatial ratio between inputs must be " +
                              std::to_string(p.r * p.r));
        Tensor u = pixel_unshuffle(spam_out, p.r);
        if (p.cca) u = cca_forward(u, *p.cca);
        joined = concat_channels({t, u});
    } else {
        joined = t;
    }
    Tensor y = relu(batch_norm(conv2d(joined, p.conv1), p.bn1, training));
    y = relu(batch_norm(conv2d(y, p.conv2), p.bn2, training));
    return bilinear_resize(conv2d(y, p.cls), out_h, out_w);
}

void collect_decoder(ParamRegistry& reg, const std::string& prefix, const DecoderParams& p) {
    if (p.sca) collect_sca(reg, prefix + ".sca", *p.sca);
    if (p.cca) collect_cca(reg, prefix + ".cca", *p.cca);
    collect_conv(reg, prefix + ".conv1", p.conv1);
    collect_bn(reg, prefix + ".bn1", p.bn1);
    collect_conv(reg, prefix + ".conv2", p.conv2);
    collect_bn(reg, prefix + ".bn2", p.bn2);
    collect_conv(reg, prefix + ".cls", p.cls);
}

int SpaceMeshLab::head_channels() const {
    if (metrocon) return grid_out_channels(metrocon->grid);
    return aspp_out_channels(*aspp);
}

SpaceMeshLab build_model(const ModelConfig& cfg, uint64_t seed) {
    SpaceMeshLab m;
    m.cfg = cfg;
    Rng rng(seed);
    m.trunk = make_spam_net(cfg, rng);
    const int backbone_out = cfg.widths[4];
    if (cfg.head == HeadKind::MetroCon) {
        DilationGrid grid =
            build_grid(cfg.resolved_rates_v(), cfg.resolved_rates_h(), cfg.head_budget);
        m.metrocon = make_metrocon(backbone_out, grid, rng);
    } else {
        m.aspp = make_aspp(backbone_out, rng, cfg.aspp_channels);
    }
    m.decoder = make_decoder(m.head_channels(), cfg, rng);
    m.aux = make_aux_head(backbone_out, cfg.aux_width, cfg.num_classes, rng);
    return m;
}

ForwardResult model_forward(SpaceMeshLab& m, const Tensor& x, bool training) {
    ++m.forward_count;
    TrunkOutputs trunk = spam_joint_forward(x, m.trunk, training);
    Tensor head_out = m.metrocon ? metrocon_forward(trunk.backbone_final, *m.metrocon, training)
                                 : aspp_forward(trunk.backbone_final, *m.aspp, training);
    ForwardResult r;
    r.main_logits =
        decoder_forward(head_out, trunk.spam_final, m.decoder, x.dims().h, x.dims().w, training);
    if (training)
        r.aux_logits = aux_head_forward(trunk.backbone_final, m.aux, x.dims().h, x.dims().w,
                                        training);
    return r;
}

void collect_model(ParamRegistry& reg, const SpaceMeshLab& m) {
    collect_spam_net(reg, "trunk", m.trunk);
    if (m.metrocon) collect_metrocon(reg, "head", *m.metrocon);
    if (m.aspp) collect_aspp(reg, "head", *m.aspp);
    collect_decoder(reg, "decoder", m.decoder);
    collect_aux_head(reg, "aux", m.aux);
}

}  // namespace sml
