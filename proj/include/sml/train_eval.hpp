#pragma once

#include <string>
#include <vector>

#include "sml/data_io.hpp"
#include "sml/decoder_model.hpp"

namespace sml {

struct TrainConfig {
    float lr0 = 0.01f;
    int max_iter = 2000;
    int batch = 4;
    float momentum = 0.9f;
    float weight_decay = 1e-4f;
    float poly_power = 0.9f;
    float aux_weight = 0.4f;
    int ignore_index = 255;
    uint64_t seed = 1;
    int eval_every = 250;
    bool train_flip = true;  // random horizontal flip, the only train-time augmentation
};

// lr0 * (1 - iter/max_iter)^power
float poly_lr(int iter, const TrainConfig& cfg);

// CE(main) + aux_weight * CE(aux); aux may be undefined (weight then unused).
Tensor total_loss(const Tensor& main_logits, const Tensor& aux_logits, const LabelMap& labels,
                  const TrainConfig& cfg);

// SGD with momentum and coupled weight decay:
// v <- momentum*v + g + wd*p; p <- p - lr*v.
class SgdOptimizer {
public:
    SgdOptimizer(std::vector<Tensor> params, const TrainConfig& cfg);
    void step(float lr);  // throws NumericError on non-finite gradients
    void zero_grad();

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<float>> velocity_;
    float momentum_, weight_decay_;
};

struct MiouResult {
    std::vector<double> per_class;  // NaN for classes absent from pred and gt
    double mean = 0.0;
    bool any_valid = false;
};

// Global K x K confusion accumulator; mIoU excludes ignored pixels and
// classes absent from both prediction and ground truth.
class ConfusionMatrix {
public:
    ConfusionMatrix(int num_classes, int ignore_index);
    void add(const LabelMap& pred, const LabelMap& gt);
    MiouResult miou() const;

private:
    int k_, ignore_;
    std::vector<int64_t> cells_;  // k_ x k_, gt-major
};

MiouResult miou(const LabelMap& pred, const LabelMap& gt, int num_classes, int ignore_index);

// argmax over classes, ties toward the lower class index
LabelMap argmax_labels(const Tensor& logits);

struct TtaConfig {
    std::vector<float> scales{0.5f, 0.75f, 1.0f, 1.25f, 1.5f, 1.75f};
    bool flip = true;
};

std::pair<int, int> snap_to_16(int h, int w);

// Multi-scale + flip averaging of eval-mode logits, all resized back to the
// input resolution.
Tensor tta_predict(SpaceMeshLab& m, const Tensor& image, const TtaConfig& cfg);

// Plain eval: snap to /16, forward, resize logits back.
Tensor eval_forward(SpaceMeshLab& m, const Tensor& image);

struct TrainReport {
    std::vector<float> losses;      // per-iteration total loss
    float initial_loss = 0.0f;
    float final_loss = 0.0f;        // mean of the last 50 iterations
    double best_val_miou = 0.0;
    double final_val_miou = 0.0;
    std::string checkpoint_path;
    std::string log_path;
};

// Seeded loop: shuffle, batch, forward, total loss, backward, SGD step with
// the poly schedule, periodic val mIoU. Writes CSV log and checkpoint (via
// temp file + rename) under out_dir.
TrainReport train_loop(SpaceMeshLab& m, const std::vector<SegSample>& train_set,
                       const std::vector<SegSample>& val_set, const TrainConfig& cfg,
                       const std::string& out_dir);

// Confusion-matrix evaluation over a set; TTA optional.
MiouResult evaluate(SpaceMeshLab& m, const std::vector<SegSample>& samples, int ignore_index,
                    const TtaConfig* tta = nullptr);

}  // namespace sml
