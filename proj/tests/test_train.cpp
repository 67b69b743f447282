#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "oracle.hpp"
#include "sml/train_eval.hpp"

using namespace sml;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.num_classes = 4;
    cfg.rates_v = {1, 2};
    cfg.rates_h = {1, 2};
    return cfg;
}

std::vector<SegSample> random_samples(int count, int hw, int k, Rng& rng) {
    std::vector<SegSample> out;
    for (int i = 0; i < count; ++i) {
        SegSample s;
        s.image = oracle::random_tensor({1, 3, hw, hw}, rng);
        s.label = LabelMap(1, hw, hw);
        for (auto& v : s.label.data) v = rng.uniform_int(0, k - 1);
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace

TEST_CASE("poly_lr values") {
    TrainConfig cfg;
    cfg.max_iter = 2000;
    CHECK(poly_lr(0, cfg) == doctest::Approx(0.01).epsilon(1e-9));
    CHECK(poly_lr(2000, cfg) == doctest::Approx(0.0));
    CHECK(poly_lr(1000, cfg) ==
          doctest::Approx(0.01 * std::pow(0.5, 0.9)).epsilon(1e-6));
    CHECK(poly_lr(1000, cfg) == doctest::Approx(0.0053589).epsilon(1e-4));
    CHECK_THROWS_AS(poly_lr(-1, cfg), ConfigError);
    CHECK_THROWS_AS(poly_lr(2001, cfg), ConfigError);

    // strictly decreasing over the schedule
    float prev = poly_lr(0, cfg);
    for (int i = 1; i <= 2000; i += 50) {
        const float v = poly_lr(i, cfg);
        CHECK(v < prev);
        prev = v;
    }
}

TEST_CASE("total_loss is linear in the aux weight") {
    Rng rng(301);
    Tensor main_l = oracle::random_tensor({1, 4, 4, 4}, rng);
    Tensor aux_l = oracle::random_tensor({1, 4, 4, 4}, rng);
    LabelMap lab(1, 4, 4);
    for (auto& v : lab.data) v = rng.uniform_int(0, 3);

    TrainConfig cfg;
    cfg.aux_weight = 0.0f;
    const float main_only = total_loss(main_l, aux_l, lab, cfg).scalar();
    CHECK(main_only == cross_entropy(main_l, lab).scalar());

    cfg.aux_weight = 0.4f;
    const float with_aux = total_loss(main_l, aux_l, lab, cfg).scalar();
    const float aux_ce = cross_entropy(aux_l, lab).scalar();
    CHECK(with_aux - main_only == doctest::Approx(0.4f * aux_ce).epsilon(1e-6));

    cfg.aux_weight = 0.8f;
    const float doubled = total_loss(main_l, aux_l, lab, cfg).scalar();
    CHECK(doubled - main_only == doctest::Approx(2.0 * (with_aux - main_only)).epsilon(1e-5));

    LabelMap ignored(1, 4, 4, 255);
    CHECK(total_loss(main_l, aux_l, ignored, cfg).scalar() == 0.0f);
}

TEST_CASE("sgd_step single-scalar arithmetic") {
    TrainConfig cfg;
    cfg.momentum = 0.9f;
    cfg.weight_decay = 0.0f;
    Tensor p = Tensor::full({1, 1, 1, 1}, 1.0f, true);
    p.grad()[0] = 1.0f;
    SgdOptimizer opt({p}, cfg);
    opt.step(0.1f);
    CHECK(p.data()[0] == doctest::Approx(0.9f));

    // lr = 0 leaves parameters unchanged (velocity still accumulates)
    Tensor q = Tensor::full({1, 1, 1, 1}, 2.0f, true);
    q.grad()[0] = 3.0f;
    SgdOptimizer opt2({q}, cfg);
    opt2.step(0.0f);
    CHECK(q.data()[0] == 2.0f);

    Tensor r = Tensor::full({1, 1, 1, 1}, 1.0f, true);
    r.grad()[0] = std::numeric_limits<float>::quiet_NaN();
    SgdOptimizer opt3({r}, cfg);
    CHECK_THROWS_AS(opt3.step(0.1f), NumericError);
}

TEST_CASE("miou examples and oracle equivalence") {
    LabelMap gt(1, 2, 2);
    gt.data = {0, 0, 1, 1};
    MiouResult perfect = miou(gt, gt, 2, 255);
    CHECK(perfect.mean == doctest::Approx(1.0));

    LabelMap all0(1, 2, 2, 0);
    MiouResult half = miou(all0, gt, 2, 255);
    CHECK(half.per_class[0] == doctest::Approx(0.5));
    CHECK(half.per_class[1] == doctest::Approx(0.0));
    CHECK(half.mean == doctest::Approx(0.25));

    LabelMap ignored(1, 2, 2, 255);
    MiouResult empty = miou(all0, ignored, 2, 255);
    CHECK_FALSE(empty.any_valid);
    CHECK(empty.mean == 0.0);

    Rng rng(307);
    for (int trial = 0; trial < 20; ++trial) {
        const int k = rng.uniform_int(2, 6);
        LabelMap a(2, 5, 5), b(2, 5, 5);
        for (auto& v : a.data) v = rng.uniform_int(0, k - 1);
        for (auto& v : b.data) v = rng.uniform_int(0, k);  // k acts as ignore sometimes
        for (auto& v : b.data)
            if (v == k) v = 255;
        MiouResult ours = miou(a, b, k, 255);
        MiouResult ref = oracle::miou_reference(a, b, k, 255);
        CHECK(ours.mean == doctest::Approx(ref.mean).epsilon(1e-12));
        for (int c = 0; c < k; ++c) {
            CHECK(std::isnan(ours.per_class[c]) == std::isnan(ref.per_class[c]));
            if (!std::isnan(ref.per_class[c]))
                CHECK(ours.per_class[c] == doctest::Approx(ref.per_class[c]).epsilon(1e-12));
        }
    }
}

TEST_CASE("argmax breaks ties toward the lower class") {
    Tensor logits = Tensor::zeros({1, 3, 1, 2});
    logits.data() = {1.0f, 0.0f, 1.0f, 2.0f, 0.5f, 0.1f};
    LabelMap pred = argmax_labels(logits);
    CHECK(pred.at(0, 0, 0) == 0);  // classes 0 and 1 tie at 1.0
    CHECK(pred.at(0, 0, 1) == 1);
}

TEST_CASE("snap_to_16") {
    CHECK(snap_to_16(500, 375) == std::pair<int, int>{496, 368});
    CHECK(snap_to_16(512, 512) == std::pair<int, int>{512, 512});
    CHECK(snap_to_16(16, 17) == std::pair<int, int>{16, 16});
    CHECK_THROWS_AS(snap_to_16(15, 64), ConfigError);
}

TEST_CASE("tta with singleton scale and no flip equals plain eval bit-exactly") {
    SpaceMeshLab m = build_model(tiny_config(), 11);
    Rng rng(311);
    Tensor img = oracle::random_tensor({1, 3, 48, 48}, rng);
    TtaConfig tta;
    tta.scales = {1.0f};
    tta.flip = false;
    CHECK(oracle::bit_equal(tta_predict(m, img, tta), eval_forward(m, img)));
}

TEST_CASE("tta flip branch un-mirrors and averages exactly") {
    SpaceMeshLab m = build_model(tiny_config(), 12);
    Rng rng(313);
    Tensor img = oracle::random_tensor({1, 3, 32, 32}, rng);
    TtaConfig tta;
    tta.scales = {1.0f};
    tta.flip = true;

    const int64_t before = m.forward_count;
    Tensor got = tta_predict(m, img, tta);
    CHECK(m.forward_count - before == 2);

    Tensor plain = model_forward(m, img, false).main_logits;
    Tensor mirrored = flip_horizontal(model_forward(m, flip_horizontal(img), false).main_logits);
    Tensor want = scale(add(bilinear_resize(plain, 32, 32), bilinear_resize(mirrored, 32, 32)),
                        0.5f);
    CHECK(oracle::bit_equal(got, want));
}

TEST_CASE("training is deterministic and logs the schedule") {
    namespace fs = std::filesystem;
    const std::string dir = (fs::temp_directory_path() / "sml_train_test").string();
    fs::remove_all(dir);

    Rng rng(317);
    auto train_set = random_samples(8, 32, 4, rng);
    auto val_set = random_samples(2, 32, 4, rng);

    TrainConfig cfg;
    cfg.max_iter = 6;
    cfg.batch = 2;
    cfg.eval_every = 3;
    cfg.seed = 99;

    SpaceMeshLab m1 = build_model(tiny_config(), 21);
    TrainReport r1 = train_loop(m1, train_set, val_set, cfg, dir + "/a");
    SpaceMeshLab m2 = build_model(tiny_config(), 21);
    TrainReport r2 = train_loop(m2, train_set, val_set, cfg, dir + "/b");

    REQUIRE(r1.losses.size() == 6);
    CHECK(r1.losses == r2.losses);  // bit-identical loss curves

    // same-seed runs leave bit-identical parameters
    ParamRegistry reg1, reg2;
    collect_model(reg1, m1);
    collect_model(reg2, m2);
    for (size_t i = 0; i < reg1.entries().size(); ++i)
        CHECK(oracle::bit_equal(reg1.entries()[i].tensor, reg2.entries()[i].tensor));

    std::ifstream log(r1.log_path);
    REQUIRE(log.good());
    std::string header, first;
    std::getline(log, header);
    std::getline(log, first);
    CHECK(header == "iter,lr,loss,aux_loss,miou");
    CHECK(first.rfind("0,0.01,", 0) == 0);  // lr at iter 0 is 0.01
    CHECK(fs::exists(r1.checkpoint_path));

    fs::remove_all(dir);
}

TEST_CASE("initial main loss sits near ln K on random labels") {
    Rng rng(331);
    SpaceMeshLab m = build_model(tiny_config(), 23);
    auto samples = random_samples(2, 32, 4, rng);
    Tensor batch = Tensor::zeros({2, 3, 32, 32});
    LabelMap labels(2, 32, 32);
    for (int b = 0; b < 2; ++b) {
        std::copy(samples[b].image.data().begin(), samples[b].image.data().end(),
                  batch.data().begin() + size_t(b) * 3 * 32 * 32);
        std::copy(samples[b].label.data.begin(), samples[b].label.data.end(),
                  labels.data.begin() + size_t(b) * 32 * 32);
    }
    ForwardResult fw = model_forward(m, batch, true);
    const float ce = cross_entropy(fw.main_logits, labels).scalar();
    CHECK(std::abs(ce - std::log(4.0)) < 0.3);
}
