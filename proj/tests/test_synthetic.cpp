#include "doctest.h"

#include <algorithm>

#include "mpcad/synthetic.hpp"

using namespace mpcad;

namespace {

SyntheticTaskSpec quick(Texture t) {
    SyntheticTaskSpec s;
    s.name = to_string(t);
    s.texture = t;
    s.train_images = 4;
    s.test_normal = 3;
    s.test_anomalous = 3;
    return s;
}

Vec mean_feature(const Backbone& bb, const Image& img) {
    return bb.key_features(img).values().colwise().mean().transpose();
}

double cos(const Vec& a, const Vec& b) { return a.dot(b) / (a.norm() * b.norm()); }

}  // namespace

TEST_CASE("same seed gives identical data") {
    const auto a = gen_synthetic(quick(Texture::weave), 11);
    const auto b = gen_synthetic(quick(Texture::weave), 11);
    CHECK(a.train.images == b.train.images);
    CHECK(a.train.region_masks == b.train.region_masks);
    CHECK(a.test_images == b.test_images);
    CHECK(a.test_masks == b.test_masks);
    const auto c = gen_synthetic(quick(Texture::weave), 12);
    CHECK(a.train.images != c.train.images);
}

TEST_CASE("test split layout and masks") {
    for (const auto& spec : default_synthetic_suite()) {
        auto s = spec;
        s.train_images = 2;
        const auto t = gen_synthetic(s, 42);
        CHECK(t.train.task_name == s.name);
        CHECK(t.train.images.size() == 2);
        CHECK(t.test_images.size() == s.test_normal + s.test_anomalous);
        for (std::size_t i = 0; i < t.test_images.size(); ++i) {
            const auto defect = std::count(t.test_masks[i].begin(), t.test_masks[i].end(), 1);
            if (t.test_labels[i] == 1)
                CHECK(defect > 0);
            else
                CHECK(defect == 0);
        }
        for (double v : t.train.images[0].pixels) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
            CHECK(v * 255.0 == std::round(v * 255.0));
        }
        for (const auto& m : t.train.region_masks) {
            CHECK(m.height == 14);
            CHECK(*std::max_element(m.labels.begin(), m.labels.end()) < 4);
        }
    }
}

TEST_CASE("synthetic task settings are validated") {
    auto s = quick(Texture::dots);
    s.defect_area = 0.0;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s.defect_area = 0.6;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    CHECK_THROWS_AS(texture_from_string("marble"), ConfigError);
    CHECK(texture_from_string("grain") == Texture::grain);
}

TEST_CASE("texture families are separable by mean feature") {
    const Backbone bb{BackboneConfig{}};
    std::vector<std::vector<Vec>> feats;
    for (const auto& spec : default_synthetic_suite()) {
        auto s = spec;
        s.train_images = 3;
        s.test_normal = 0;
        s.test_anomalous = 1;
        const auto t = gen_synthetic(s, 42);
        std::vector<Vec> f;
        for (const auto& img : t.train.images) f.push_back(mean_feature(bb, img));
        feats.push_back(f);
    }
    auto mean_cos = [&](std::size_t a, std::size_t b) {
        double s = 0.0;
        int n = 0;
        for (std::size_t i = 0; i < feats[a].size(); ++i)
            for (std::size_t j = 0; j < feats[b].size(); ++j) {
                if (a == b && j <= i) continue;
                s += cos(feats[a][i], feats[b][j]);
                ++n;
            }
        return s / n;
    };
    for (std::size_t a = 0; a < feats.size(); ++a)
        for (std::size_t b = a + 1; b < feats.size(); ++b) {
            CAPTURE(a);
            CAPTURE(b);
            CHECK(mean_cos(a, b) < std::min(mean_cos(a, a), mean_cos(b, b)));
        }
}
