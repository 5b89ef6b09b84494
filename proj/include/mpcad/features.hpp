#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "mpcad/binary_io.hpp"
#include "mpcad/tuning.hpp"

namespace mpcad {

inline constexpr std::uint32_t kFeatureVersion = 1;

/// Contents of a "CADF" feature file: per-image patch grids sharing one shape and,
/// when the "RGNS" section is present, one region mask per image.
struct FeatureFile {
    std::vector<FeatureGrid> grids;
    std::vector<RegionMask> region_masks;  // empty when the file has no region section

    bool operator==(const FeatureFile&) const = default;
};

/// Values are stored as f32; region labels must fit in u16.
std::vector<std::uint8_t> serialize_features(const FeatureFile& file);

/// Errors carry a FormatErrorKind: bad_magic, version_mismatch, dimension_mismatch,
/// truncated, non_finite ("non-finite value at (image,row,col,ch)") or invalid.
FeatureFile parse_features(const std::vector<std::uint8_t>& bytes);

void write_features(const FeatureFile& file, const std::filesystem::path& path);
FeatureFile ingest_features(const std::filesystem::path& path);

}  // namespace mpcad
