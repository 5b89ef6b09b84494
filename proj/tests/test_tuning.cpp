#include "doctest.h"

#include <cmath>
#include <sstream>

#include "mpcad/synthetic.hpp"
#include "mpcad/tuning.hpp"
#include "oracles.hpp"

using namespace mpcad;

namespace {

BackboneConfig small_config() {
    BackboneConfig c;
    c.n_layers = 2;
    c.dim = 16;
    c.heads = 2;
    c.patch_size = 8;
    c.input_hw = 32;
    c.mlp_hidden = 32;
    c.tap_layer_key = 2;
    c.tap_layer_score = 2;
    c.text_dim = 8;
    c.text_heads = 2;
    c.text_mlp_hidden = 16;
    return c;
}

SyntheticTaskSpec small_spec(const std::string& name, Texture t, std::size_t train = 5) {
    SyntheticTaskSpec s;
    s.name = name;
    s.texture = t;
    s.image_hw = 32;
    s.patch_size = 8;
    s.train_images = train;
    s.test_normal = 2;
    s.test_anomalous = 2;
    s.defect_area = 0.1;
    return s;
}

TrainConfig fast_config(std::size_t epochs = 2) {
    TrainConfig c;
    c.epochs = epochs;
    c.batch_size = 4;
    return c;
}

RegionMask random_regions(std::size_t h, std::size_t w, int levels, Rng& rng) {
    RegionMask m{h, w, {}};
    for (std::size_t i = 0; i < h * w; ++i) m.labels.push_back(static_cast<int>(rng.below(levels)));
    return m;
}

}  // namespace

TEST_CASE("loss_text examples and oracle") {
    const std::vector<double> a{0.2, 0.7, 1.0};
    CHECK(loss_text(a, a) == 0.0);
    CHECK(loss_text(std::vector<double>{0, 1}, std::vector<double>{1, 0}) == 1.0);
    CHECK_THROWS_AS(loss_text(std::vector<double>{1}, std::vector<double>{1, 0}), DataError);

    Rng rng(21);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> x(7), y(7);
        for (auto& v : x) v = rng.uniform(0, 2);
        for (auto& v : y) v = static_cast<double>(rng.below(2));
        CHECK(std::abs(loss_text(x, y) - oracle::mse(x, y)) <= 1e-12);
    }
}

TEST_CASE("loss_visual matches pair enumeration") {
    Rng rng(4);
    for (int trial = 0; trial < 120; ++trial) {
        const std::size_t h = 1 + rng.below(4), w = 2 + rng.below(3);
        const Mat f = oracle::random_mat(h * w, 5, rng);
        const RegionMask m = random_regions(h, w, 3, rng);
        const double la = rng.uniform(0.1, 2), lb = rng.uniform(0.1, 2);
        const double got = loss_visual(FeatureGrid(h, w, f), m, la, lb).value;
        CHECK(std::abs(got - oracle::loss_visual(f, m.labels, la, lb)) <= 1e-9);
    }
}

TEST_CASE("loss_visual hand cases") {
    // identical vectors, one region: every pair contributes -lambda_beta
    const FeatureGrid same(3, 3, Mat::Constant(9, 4, 0.7));
    const RegionMask one{3, 3, std::vector<int>(9, 0)};
    CHECK(std::abs(loss_visual(same, one, 1.0, 2.0).value - (-2.0 * 36)) <= 1e-12);

    // two regions spanned by orthogonal directions: no cross-region contribution
    Mat f = Mat::Zero(4, 3);
    f << 1, 0, 0, 2, 0, 0, 0, 1, 0, 0, 3, 0;
    const RegionMask two{2, 2, {0, 0, 1, 1}};
    CHECK(std::abs(loss_visual(FeatureGrid(2, 2, f), two, 5.0, 1.0).value - (-2.0)) <= 1e-12);

    // 2x2 hand example: cos(a,b)=0.6, a c orthogonal
    Mat g(4, 2);
    g << 1, 0, 0.6, 0.8, 0, 1, 1, 1;
    const RegionMask lab{2, 2, {0, 0, 1, 0}};
    const double s2 = std::sqrt(0.5);
    // same region: (a,b)=0.6 (a,d)=s2 (b,d)=1.4*s2; different: (a,c)=0 (b,c)=0.8 (c,d)=s2
    const double expect = 1.0 * (0.0 + 0.8 + s2) - 1.0 * (0.6 + s2 + 1.4 * s2);
    CHECK(std::abs(loss_visual(FeatureGrid(2, 2, g), lab, 1.0, 1.0).value - expect) <= 1e-12);

    CHECK_THROWS_AS(loss_visual(FeatureGrid(2, 2, g), RegionMask{1, 4, {0, 0, 0, 0}}, 1, 1), DataError);
}

TEST_CASE("loss_visual gradient matches finite differences") {
    Rng rng(8);
    for (int trial = 0; trial < 10; ++trial) {
        const Mat f = oracle::random_mat(6, 4, rng);
        const RegionMask m = random_regions(2, 3, 2, rng);
        const auto res = loss_visual(FeatureGrid(2, 3, f), m, 1.3, 0.7, true);
        for (Eigen::Index i = 0; i < f.size(); ++i) {
            const double h = 1e-6;
            Mat p = f, q = f;
            p.data()[i] += h;
            q.data()[i] -= h;
            const double fd = (loss_visual(FeatureGrid(2, 3, p), m, 1.3, 0.7).value -
                               loss_visual(FeatureGrid(2, 3, q), m, 1.3, 0.7).value) /
                              (2 * h);
            CHECK(std::abs(fd - res.d_features.data()[i]) <= 1e-6 * std::max(1.0, std::abs(fd)));
        }
    }
}

TEST_CASE("loss_visual samples pairs beyond 196 patches") {
    Rng rng(2);
    const Mat f = oracle::random_mat(15 * 15, 3, rng);
    const RegionMask m = random_regions(15, 15, 2, rng);
    Rng a(5), b(5);
    const double x = loss_visual(FeatureGrid(15, 15, f), m, 1, 1, false, &a, 500).value;
    const double y = loss_visual(FeatureGrid(15, 15, f), m, 1, 1, false, &b, 500).value;
    CHECK(x == y);
    // mean sampled pair term tracks the exact mean pair term
    const double exact = oracle::loss_visual(f, m.labels, 1, 1) / (225.0 * 224.0 / 2.0);
    Rng c(6);
    const double approx = loss_visual(FeatureGrid(15, 15, f), m, 1, 1, false, &c, 200000).value / 200000.0;
    CHECK(std::abs(approx - exact) < 0.01);
}

TEST_CASE("a small step against the prompt gradient lowers the visual loss") {
    Backbone bb(oracle::toy_config());
    bb.register_words("x");
    Rng rng(13);
    const auto& cfg = bb.config();
    Image img{1, 8, 8, {}};
    for (int i = 0; i < 64; ++i) img.pixels.push_back(rng.uniform());
    const RegionMask m{2, 2, {0, 1, 1, 0}};
    VisualPrompt vp = VisualPrompt::uniform(cfg.n_layers, cfg.visual_prompt_len, cfg.dim, rng);
    const TextPrompt tp = TextPrompt::standard_normal("x", cfg.text_prompt_rows, cfg.text_dim, rng);

    auto tail = [&](const std::vector<FeatureGrid>& layers, const Vec&) {
        const auto lv = loss_visual(layers.back(), m, 1.0, 1.0, true);
        LossTail t;
        t.value = lv.value;
        t.d_layers.resize(layers.size());
        t.d_layers.back() = lv.d_features;
        return t;
    };
    const auto g = prompt_gradients(bb, img, vp, tp, tail);
    double norm2 = 0.0;
    for (const auto& l : g.visual) norm2 += l.squaredNorm();
    REQUIRE(norm2 > 0.0);
    for (std::size_t l = 0; l < vp.layers.size(); ++l) vp.layers[l] -= 1e-4 * g.visual[l];
    const auto after = prompt_gradients(bb, img, vp, tp, tail);
    CHECK(after.loss < g.loss);
}

TEST_CASE("pseudo labels are balanced, interleaved and reproducible") {
    Rng rng(1);
    std::vector<Image> imgs(3, Image{1, 2, 2, {0.1, 0.2, 0.3, 0.4}});
    Rng a(9), b(9);
    const auto p = pseudo_label_batch(imgs, 1.0, a);
    const auto q = pseudo_label_batch(imgs, 1.0, b);
    CHECK(p.labels == std::vector<int>{0, 1, 0, 1, 0, 1});
    CHECK(p.images == q.images);
    for (std::size_t i = 0; i < 6; i += 2) {
        CHECK(p.images[i] == imgs[i / 2]);
        CHECK(p.images[i + 1] != imgs[i / 2]);
    }
    Rng z(3);
    const auto d = pseudo_label_batch(imgs, 0.0, z);
    CHECK(d.images[1] == d.images[0]);
    // conflicting labels on equal inputs: any shared score gives MSE >= 0.25
    for (double s : {0.0, 0.3, 0.5, 0.9})
        CHECK(loss_text(std::vector<double>{s, s}, std::vector<double>{0, 1}) >= 0.25);
    CHECK_THROWS_AS(pseudo_label_batch(imgs, -1.0, rng), ConfigError);
}

TEST_CASE("training log layout") {
    std::ostringstream os;
    write_training_log(os, {{1, 0.5, -3.0, 1.25, 0.75}, {2, 0.25, std::nullopt, 1.0, 0.5}});
    CHECK(os.str() == "epoch\tloss_text\tloss_visual\tb_v\tb_t\n1\t0.5\t-3\t1.25\t0.75\n2\t0.25\tn/a\t1\t0.5\n");
}

TEST_CASE("adapt_task smoke on a single image") {
    Backbone bb(small_config());
    auto task = gen_synthetic(small_spec("tiny", Texture::dots, 1), 3);
    AdaptReport rep;
    const MemoryBank bank = adapt_task(task.train, MemoryBank{}, fast_config(1), bb, &rep);
    REQUIRE(bank.size() == 1);
    const auto& m = bank.at(0);
    m.validate();
    CHECK(m.task_name == "tiny");
    CHECK(m.keys.count() == 16);
    CHECK(m.visual_prompt.n_layers() == 2);
    CHECK(rep.epochs.size() == 1);
    CHECK(rep.validation_count == 0);
    CHECK(bb.knows("tiny"));
    CHECK_THROWS_AS(adapt_task(task.train, bank, fast_config(1), bb), DataError);
}

TEST_CASE("adapt_task is deterministic, leaves weights and prior tasks untouched") {
    Backbone bb(small_config());
    const auto t1 = gen_synthetic(small_spec("first", Texture::stripes), 1);
    const auto t2 = gen_synthetic(small_spec("second", Texture::checker), 2);
    const auto checksum = bb.checksum();

    const MemoryBank one = adapt_task(t1.train, MemoryBank{}, fast_config(), bb);
    const auto before = serialize_task(one.at(0));
    const MemoryBank two = adapt_task(t2.train, one, fast_config(), bb);
    CHECK(bb.checksum() == checksum);
    CHECK(serialize_task(two.at(0)) == before);
    CHECK(serialize_task(one.at(0)) == before);

    Backbone bb2(small_config());
    const MemoryBank again = adapt_task(t1.train, MemoryBank{}, fast_config(), bb2);
    CHECK(serialize_bank(again) == serialize_bank(one));
}

TEST_CASE("text loss trends down on a fixed task") {
    Backbone bb(small_config());
    const auto t = gen_synthetic(small_spec("trend", Texture::weave, 6), 5);
    TrainConfig cfg = fast_config(12);
    cfg.learning_rate = 0.05;
    AdaptReport rep;
    adapt_task(t.train, MemoryBank{}, cfg, bb, &rep);
    REQUIRE(rep.epochs.size() == 12);
    CHECK(rep.epochs.back().loss_text <= rep.epochs.front().loss_text);
    for (const auto& e : rep.epochs) {
        CHECK(std::isfinite(e.loss_text));
        CHECK(e.loss_visual.has_value());
    }
}

TEST_CASE("feature mode skips the visual prompt") {
    Backbone bb(small_config());
    Rng rng(7);
    FeatureDataset d;
    d.task_name = "feat";
    for (int i = 0; i < 5; ++i) d.grids.emplace_back(3, 3, oracle::random_mat(9, 6, rng));
    AdaptReport rep;
    const MemoryBank bank = adapt_task_features(d, MemoryBank{}, fast_config(), bb, &rep);
    CHECK(bank.at(0).visual_prompt.empty());
    CHECK(bank.at(0).keys.channels() == 6);
    CHECK_FALSE(rep.epochs.front().loss_visual.has_value());
}

TEST_CASE("invalid configuration is rejected") {
    TrainConfig c;
    c.epochs = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = TrainConfig{};
    c.alpha_fusion = 1.5;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = TrainConfig{};
    c.learning_rate = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}
