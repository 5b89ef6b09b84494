#include "doctest.h"

#include <cmath>
#include <cstring>
#include <limits>

#include "mpcad/features.hpp"
#include "oracles.hpp"

using namespace mpcad;

namespace {

FeatureFile sample(bool regions, Rng& rng) {
    FeatureFile f;
    for (int i = 0; i < 3; ++i) f.grids.emplace_back(2, 3, oracle::random_mat(6, 4, rng));
    if (regions)
        for (int i = 0; i < 3; ++i) f.region_masks.push_back({2, 3, {0, 1, 2, 65535, 1, 0}});
    return f;
}

FeatureFile rounded(FeatureFile f) {
    for (auto& g : f.grids) {
        Mat v = g.values();
        for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = to_f32(v.data()[i]);
        g = FeatureGrid(g.grid_h(), g.grid_w(), v);
    }
    return f;
}

FormatErrorKind kind_of(const std::vector<std::uint8_t>& bytes) {
    try {
        parse_features(bytes);
    } catch (const FormatError& e) {
        return e.format_kind();
    }
    FAIL("expected a format error");
    return FormatErrorKind::invalid;
}

void put_f32(std::vector<std::uint8_t>& b, std::size_t offset, float v) {
    std::uint32_t u;
    std::memcpy(&u, &v, 4);
    for (int i = 0; i < 4; ++i) b[offset + i] = static_cast<std::uint8_t>(u >> (8 * i));
}

}  // namespace

TEST_CASE("header layout is bit exact") {
    Rng rng(1);
    const auto bytes = serialize_features(sample(false, rng));
    CHECK(bytes.size() == 24 + 3 * 6 * 4 * 4);
    CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "CADF");
    const std::vector<std::uint8_t> header{1, 0, 0, 0, 3, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0, 4, 0, 0, 0};
    CHECK(std::vector<std::uint8_t>(bytes.begin() + 4, bytes.begin() + 24) == header);

    Rng rng2(1);
    const auto with = serialize_features(sample(true, rng2));
    CHECK(with.size() == bytes.size() + 4 + 8 + 3 * 6 * 2);
    CHECK(std::string(with.begin() + bytes.size(), with.begin() + bytes.size() + 4) == "RGNS");
}

TEST_CASE("round trip is exact at single precision") {
    Rng rng(2);
    for (bool regions : {false, true}) {
        const FeatureFile f = sample(regions, rng);
        const FeatureFile back = parse_features(serialize_features(f));
        CHECK(back == rounded(f));
        CHECK(serialize_features(back) == serialize_features(f));
    }
}

TEST_CASE("malformed files raise distinct errors") {
    Rng rng(3);
    const auto good = serialize_features(sample(true, rng));

    auto bad_magic = good;
    bad_magic[0] = 'X';
    CHECK(kind_of(bad_magic) == FormatErrorKind::bad_magic);
    CHECK(kind_of({'C', 'A'}) == FormatErrorKind::bad_magic);

    auto bad_version = good;
    bad_version[4] = 2;
    CHECK(kind_of(bad_version) == FormatErrorKind::version_mismatch);

    auto zero_dim = good;
    zero_dim[12] = 0;
    CHECK(kind_of(zero_dim) == FormatErrorKind::dimension_mismatch);

    const std::vector<std::uint8_t> cut(good.begin(), good.begin() + 60);
    CHECK(kind_of(cut) == FormatErrorKind::truncated);
    CHECK_THROWS_WITH(parse_features(cut), "truncated");

    const std::vector<std::uint8_t> cut_regions(good.begin(), good.end() - 3);
    CHECK(kind_of(cut_regions) == FormatErrorKind::truncated);

    auto region_dims = good;
    region_dims[24 + 3 * 6 * 4 * 4 + 4] = 7;
    CHECK(kind_of(region_dims) == FormatErrorKind::dimension_mismatch);

    auto trailing = good;
    trailing.push_back(0);
    CHECK(kind_of(trailing) == FormatErrorKind::invalid);

    auto junk = serialize_features(sample(false, rng));
    junk.insert(junk.end(), {'N', 'O', 'P', 'E'});
    CHECK(kind_of(junk) == FormatErrorKind::invalid);
}

TEST_CASE("non-finite payload values are located") {
    Rng rng(4);
    auto bytes = serialize_features(sample(false, rng));
    // image 1, patch row 1, col 2, channel 3 -> flat index ((1*2+1)*3+2)*4+3
    const std::size_t flat = ((1 * 2 + 1) * 3 + 2) * 4 + 3;
    put_f32(bytes, 24 + 4 * flat, std::numeric_limits<float>::quiet_NaN());
    CHECK_THROWS_WITH(parse_features(bytes), "non-finite value at (1,1,2,3)");
    CHECK(kind_of(bytes) == FormatErrorKind::non_finite);

    auto inf = serialize_features(sample(false, rng));
    put_f32(inf, 24, std::numeric_limits<float>::infinity());
    CHECK_THROWS_WITH(parse_features(inf), "non-finite value at (0,0,0,0)");
}

TEST_CASE("writer rejects inconsistent input") {
    Rng rng(5);
    FeatureFile f = sample(true, rng);
    f.grids.emplace_back(3, 2, oracle::random_mat(6, 4, rng));
    f.region_masks.push_back({3, 2, std::vector<int>(6, 0)});
    CHECK_THROWS_AS(serialize_features(f), FormatError);
    FeatureFile g = sample(true, rng);
    g.region_masks[0].labels[0] = 70000;
    CHECK_THROWS_AS(serialize_features(g), DataError);
    CHECK_THROWS_AS(serialize_features(FeatureFile{}), DataError);
}
