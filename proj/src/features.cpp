#include "mpcad/features.hpp"

#include <cmath>
#include <limits>

namespace mpcad {

namespace {

std::uint32_t dim32(std::size_t v, const char* what) {
    if (v == 0 || v > std::numeric_limits<std::uint32_t>::max())
        throw FormatError(FormatErrorKind::dimension_mismatch, std::string("features: bad ") + what);
    return static_cast<std::uint32_t>(v);
}

}  // namespace

std::vector<std::uint8_t> serialize_features(const FeatureFile& file) {
    if (file.grids.empty()) throw DataError("features: no grids");
    const auto& first = file.grids.front();
    for (const auto& g : file.grids)
        if (g.grid_h() != first.grid_h() || g.grid_w() != first.grid_w() || g.channels() != first.channels())
            throw FormatError(FormatErrorKind::dimension_mismatch, "features: grids differ in shape");
    if (!file.region_masks.empty() && file.region_masks.size() != file.grids.size())
        throw FormatError(FormatErrorKind::dimension_mismatch, "features: one region mask per grid");

    ByteWriter w;
    w.raw("CADF");
    w.u32(kFeatureVersion);
    w.u32(dim32(file.grids.size(), "image count"));
    w.u32(dim32(first.grid_h(), "grid height"));
    w.u32(dim32(first.grid_w(), "grid width"));
    w.u32(dim32(first.channels(), "channel count"));
    for (const auto& g : file.grids) {
        const Mat& v = g.values();
        for (Eigen::Index i = 0; i < v.size(); ++i) w.f32(v.data()[i]);
    }
    if (!file.region_masks.empty()) {
        w.raw("RGNS");
        w.u32(static_cast<std::uint32_t>(first.grid_h()));
        w.u32(static_cast<std::uint32_t>(first.grid_w()));
        for (const auto& m : file.region_masks) {
            if (m.height != first.grid_h() || m.width != first.grid_w() || m.labels.size() != m.height * m.width)
                throw FormatError(FormatErrorKind::dimension_mismatch, "features: region mask does not match the grid");
            for (int l : m.labels) {
                if (l < 0 || l > 0xffff) throw DataError("features: region label outside u16");
                w.u16(static_cast<std::uint16_t>(l));
            }
        }
    }
    return w.take();
}

FeatureFile parse_features(const std::vector<std::uint8_t>& bytes) {
    ByteReader r(bytes);
    if (bytes.size() < 4 || r.raw(4) != "CADF") throw FormatError(FormatErrorKind::bad_magic, "features: bad magic");
    const std::uint32_t version = r.u32();
    if (version != kFeatureVersion)
        throw FormatError(FormatErrorKind::version_mismatch, "features: unsupported version " + std::to_string(version));
    const std::uint64_t n = r.u32(), gh = r.u32(), gw = r.u32(), c = r.u32();
    if (n == 0 || gh == 0 || gw == 0 || c == 0)
        throw FormatError(FormatErrorKind::dimension_mismatch, "features: zero dimension in header");
    const std::uint64_t per_image = gh * gw * c;
    if (per_image * n > r.remaining() / 4) throw FormatError(FormatErrorKind::truncated, "truncated");

    FeatureFile out;
    out.grids.reserve(n);
    for (std::uint64_t img = 0; img < n; ++img) {
        Mat v(static_cast<Eigen::Index>(gh * gw), static_cast<Eigen::Index>(c));
        for (std::uint64_t i = 0; i < per_image; ++i) {
            const double x = r.f32();
            if (!std::isfinite(x)) {
                const std::uint64_t ch = i % c, cell = i / c;
                throw FormatError(FormatErrorKind::non_finite,
                                  "non-finite value at (" + std::to_string(img) + "," + std::to_string(cell / gw) + "," +
                                      std::to_string(cell % gw) + "," + std::to_string(ch) + ")");
            }
            v.data()[i] = x;
        }
        out.grids.emplace_back(gh, gw, std::move(v));
    }
    if (r.remaining() == 0) return out;

    if (r.remaining() < 4 || r.raw(4) != "RGNS")
        throw FormatError(FormatErrorKind::invalid, "features: unexpected trailing bytes");
    const std::uint64_t rh = r.u32(), rw = r.u32();
    if (rh != gh || rw != gw)
        throw FormatError(FormatErrorKind::dimension_mismatch, "features: region grid differs from the feature grid");
    if (n * gh * gw > r.remaining() / 2) throw FormatError(FormatErrorKind::truncated, "truncated");
    for (std::uint64_t img = 0; img < n; ++img) {
        RegionMask m{gh, gw, {}};
        m.labels.reserve(gh * gw);
        for (std::uint64_t i = 0; i < gh * gw; ++i) m.labels.push_back(r.u16());
        out.region_masks.push_back(std::move(m));
    }
    if (r.remaining() != 0) throw FormatError(FormatErrorKind::invalid, "features: unexpected trailing bytes");
    return out;
}

void write_features(const FeatureFile& file, const std::filesystem::path& path) {
    write_file(path, serialize_features(file));
}

FeatureFile ingest_features(const std::filesystem::path& path) { return parse_features(read_file(path)); }

}  // namespace mpcad
