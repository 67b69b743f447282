#include "sml/train_eval.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "sml/data_io.hpp"

namespace sml {

float poly_lr(int iter, const TrainConfig& cfg) {
    if (iter < 0 || iter > cfg.max_iter)
        throw ConfigError("poly_lr: iter " + std::to_string(iter) + " outside [0," +
                          std::to_string(cfg.max_iter) + "]");
    return cfg.lr0 * std::pow(1.0f - float(iter) / float(cfg.max_iter), cfg.poly_power);
}

Tensor total_loss(const Tensor& main_logits, const Tensor& aux_logits, const LabelMap& labels,
                  const TrainConfig& cfg) {
    Tensor main_ce = cross_entropy(main_logits, labels, cfg.ignore_index);
    if (!aux_logits.defined()) return main_ce;
    Tensor aux_ce = cross_entropy(aux_logits, labels, cfg.ignore_index);
    return add(main_ce, scale(aux_ce, cfg.aux_weight));
}

SgdOptimizer::SgdOptimizer(std::vector<Tensor> params, const TrainConfig& cfg)
    : params_(std::move(params)), momentum_(cfg.momentum), weight_decay_(cfg.weight_decay) {
    velocity_.reserve(params_.size());
    for (const auto& p : params_) velocity_.emplace_back(size_t(p.numel()), 0.0f);
}

void SgdOptimizer::step(float lr) {
    if (lr < 0.0f) throw ConfigError("sgd_step: negative learning rate");
    for (size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i];
        if (!p.has_grad()) continue;
        const std::vector<float>& g = p.grad_view();
        for (float gv : g)
            if (!std::isfinite(gv))
                throw NumericError("sgd_step: non-finite gradient in parameter " +
                                   std::to_string(i));
        std::vector<float>& v = velocity_[i];
        float* pd = p.ptr();
        for (size_t j = 0; j < v.size(); ++j) {
            v[j] = momentum_ * v[j] + g[j] + weight_decay_ * pd[j];
            pd[j] -= lr * v[j];
        }
    }
}

void SgdOptimizer::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

ConfusionMatrix::ConfusionMatrix(int num_classes, int ignore_index)
    : k_(num_classes), ignore_(ignore_index), cells_(size_t(num_classes) * num_classes, 0) {}

void ConfusionMatrix::add(const LabelMap& pred, const LabelMap& gt) {
    if (pred.n != gt.n || pred.h != gt.h || pred.w != gt.w)
        throw ConfigError("confusion: prediction/label shape mismatch");
    for (size_t i = 0; i < gt.data.size(); ++i) {
        const int32_t g = gt.data[i];
        if (g == ignore_) continue;
        const int32_t p = pred.data[i];
        if (g < 0 || g >= k_ || p < 0 || p >= k_)
            throw DataError("confusion: label outside [0," + std::to_string(k_) + ")");
        ++cells_[size_t(g) * k_ + p];
    }
}

MiouResult ConfusionMatrix::miou() const {
    MiouResult r;
    r.per_class.assign(k_, std::nan(""));
    double sum = 0.0;
    int valid = 0;
    for (int c = 0; c < k_; ++c) {
        int64_t tp = cells_[size_t(c) * k_ + c];
        int64_t fn = 0, fp = 0;
        for (int o = 0; o < k_; ++o) {
            if (o == c) continue;
            fn += cells_[size_t(c) * k_ + o];
            fp += cells_[size_t(o) * k_ + c];
        }
        const int64_t denom = tp + fp + fn;
        if (denom == 0) continue;  // class absent from both pred and gt
        r.per_class[c] = double(tp) / double(denom);
        sum += r.per_class[c];
        ++valid;
    }
    r.any_valid = valid > 0;
    r.mean = valid > 0 ? sum / valid : 0.0;
    return r;
}

MiouResult miou(const LabelMap& pred, const LabelMap& gt, int num_classes, int ignore_index) {
    ConfusionMatrix cm(num_classes, ignore_index);
    cm.add(pred, gt);
    return cm.miou();
}

LabelMap argmax_labels(const Tensor& logits) {
    const Dims4 d = logits.dims();
    LabelMap out(d.n, d.h, d.w);
    const size_t plane = size_t(d.h) * d.w;
    for (int n = 0; n < d.n; ++n) {
        const float* base = logits.ptr() + size_t(n) * d.c * plane;
        for (size_t i = 0; i < plane; ++i) {
            int best = 0;
            float bv = base[i];
            for (int c = 1; c < d.c; ++c) {
                const float v = base[size_t(c) * plane + i];
                if (v > bv) {  // ties keep the lower class index
                    bv = v;
                    best = c;
                }
            }
            out.data[size_t(n) * plane + i] = best;
        }
    }
    return out;
}

std::pair<int, int> snap_to_16(int h, int w) {
    if (h < 16 || w < 16)
        throw ConfigError("snap_to_16: dims must be >= 16, got " + std::to_string(h) + "x" +
                          std::to_string(w));
    return {h / 16 * 16, w / 16 * 16};
}

Tensor eval_forward(SpaceMeshLab& m, const Tensor& image) {
    const Dims4 d = image.dims();
    auto [sh, sw] = snap_to_16(d.h, d.w);
    Tensor in = bilinear_resize(image, sh, sw);
    Tensor logits = model_forward(m, in, /*training=*/false).main_logits;
    return bilinear_resize(logits, d.h, d.w);
}

Tensor tta_predict(SpaceMeshLab& m, const Tensor& image, const TtaConfig& cfg) {
    if (cfg.scales.empty()) throw ConfigError("tta_predict: empty scale list");
    const Dims4 d = image.dims();
    Tensor acc;
    int count = 0;
    for (float s : cfg.scales) {
        if (s <= 0.0f) throw ConfigError("tta_predict: scales must be positive");
        const int th = int(std::lround(double(d.h) * s));
        const int tw = int(std::lround(double(d.w) * s));
        auto [sh, sw] = snap_to_16(th, tw);
        Tensor in = bilinear_resize(image, sh, sw);

        Tensor logits = model_forward(m, in, false).main_logits;
        logits = bilinear_resize(logits, d.h, d.w);
        acc = acc.defined() ? add(acc, logits) : logits;
        ++count;

        if (cfg.flip) {
            Tensor flipped = flip_horizontal(in);
            Tensor fl = model_forward(m, flipped, false).main_logits;
            fl = flip_horizontal(bilinear_resize(fl, d.h, d.w));
            acc = add(acc, fl);
            ++count;
        }
    }
    return scale(acc, 1.0f / float(count));
}

MiouResult evaluate(SpaceMeshLab& m, const std::vector<SegSample>& samples, int ignore_index,
                    const TtaConfig* tta) {
    ConfusionMatrix cm(m.cfg.num_classes, ignore_index);
    for (const auto& s : samples) {
        Tensor logits = tta ? tta_predict(m, s.image, *tta) : eval_forward(m, s.image);
        cm.add(argmax_labels(logits), s.label);
    }
    return cm.miou();
}

namespace {

// Fixed-order batch assembly; optional horizontal flip per sample.
std::pair<Tensor, LabelMap> make_batch(const std::vector<SegSample>& set,
                                       const std::vector<int>& idx, bool flip_enabled, Rng& rng) {
    const Dims4 d0 = set[idx[0]].image.dims();
    Tensor images = Tensor::zeros({int(idx.size()), d0.c, d0.h, d0.w});
    LabelMap labels(int(idx.size()), d0.h, d0.w);
    const size_t img_len = size_t(d0.c) * d0.h * d0.w;
    const size_t lab_len = size_t(d0.h) * d0.w;
    for (size_t b = 0; b < idx.size(); ++b) {
        const SegSample& s = set[idx[b]];
        if (s.image.dims() != d0) throw DataError("train batch: mixed sample dims");
        const bool flip = flip_enabled && rng.uniform_int(0, 1) == 1;
        if (!flip) {
            std::copy(s.image.data().begin(), s.image.data().end(),
                      images.data().begin() + b * img_len);
            std::copy(s.label.data.begin(), s.label.data.end(),
                      labels.data.begin() + b * lab_len);
        } else {
            for (int c = 0; c < d0.c; ++c)
                for (int y = 0; y < d0.h; ++y)
                    for (int x = 0; x < d0.w; ++x)
                        images.data()[b * img_len + (size_t(c) * d0.h + y) * d0.w + x] =
                            s.image.at(0, c, y, d0.w - 1 - x);
            for (int y = 0; y < d0.h; ++y)
                for (int x = 0; x < d0.w; ++x)
                    labels.data[b * lab_len + size_t(y) * d0.w + x] =
                        s.label.at(0, y, d0.w - 1 - x);
        }
    }
    return {std::move(images), std::move(labels)};
}

}  // namespace

TrainReport train_loop(SpaceMeshLab& m, const std::vector<SegSample>& train_set,
                       const std::vector<SegSample>& val_set, const TrainConfig& cfg,
                       const std::string& out_dir) {
    if (train_set.empty()) throw DataError("train_loop: empty training set");
    std::filesystem::create_directories(out_dir);

    ParamRegistry reg;
    collect_model(reg, m);
    SgdOptimizer opt(reg.trainable(), cfg);
    Rng order_rng(cfg.seed);
    Rng aug_rng(cfg.seed + 0x9e3779b97f4a7c15ull);

    std::vector<int> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), order_rng.engine());
    size_t cursor = 0;

    TrainReport report;
    report.log_path = out_dir + "/train_log.csv";
    report.checkpoint_path = out_dir + "/checkpoint.smck";
    std::ofstream log(report.log_path);
    if (!log) throw DataError("train_loop: cannot write " + report.log_path);
    log << "iter,lr,loss,aux_loss,miou\n";

    for (int iter = 0; iter < cfg.max_iter; ++iter) {
        std::vector<int> idx;
        for (int b = 0; b < cfg.batch; ++b) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), order_rng.engine());
                cursor = 0;
            }
            idx.push_back(order[cursor++]);
        }
        auto [images, labels] = make_batch(train_set, idx, cfg.train_flip, aug_rng);

        const float lr = poly_lr(iter, cfg);
        opt.zero_grad();
        Tape tape;
        float loss_v = 0.0f, aux_v = 0.0f;
        {
            TapeScope scope(tape);
            ForwardResult fw = model_forward(m, images, true);
            Tensor main_ce = cross_entropy(fw.main_logits, labels, cfg.ignore_index);
            Tensor aux_ce = cross_entropy(fw.aux_logits, labels, cfg.ignore_index);
            Tensor loss = add(main_ce, scale(aux_ce, cfg.aux_weight));
            loss_v = loss.scalar();
            aux_v = aux_ce.scalar();
            if (!std::isfinite(loss_v))
                throw NumericError("train_loop: non-finite loss at iteration " +
                                   std::to_string(iter));
            tape.backward(loss);
        }
        opt.step(lr);
        report.losses.push_back(loss_v);

        const bool eval_now =
            !val_set.empty() && ((iter + 1) % cfg.eval_every == 0 || iter + 1 == cfg.max_iter);
        log << iter << ',' << lr << ',' << loss_v << ',' << aux_v << ',';
        if (eval_now) {
            MiouResult r = evaluate(m, val_set, cfg.ignore_index);
            report.final_val_miou = r.mean;
            report.best_val_miou = std::max(report.best_val_miou, r.mean);
            log << r.mean;
        }
        log << '\n';
    }
    log.close();

    report.initial_loss = report.losses.front();
    const size_t tail = std::min<size_t>(50, report.losses.size());
    double s = 0.0;
    for (size_t i = report.losses.size() - tail; i < report.losses.size(); ++i)
        s += report.losses[i];
    report.final_loss = float(s / double(tail));

    save_checkpoint(report.checkpoint_path, reg);
    return report;
}

}  // namespace sml
