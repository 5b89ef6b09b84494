#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mpcad/backbone.hpp"
#include "mpcad/tuning.hpp"

namespace mpcad {

enum class Texture { stripes, checker, dots, weave, grain };
enum class Defect { patch_swap, intensity_blob, stripe };

std::string to_string(Texture t);
Texture texture_from_string(const std::string& name);

struct SyntheticTaskSpec {
    std::string name;
    Texture texture = Texture::stripes;
    std::vector<Defect> defects{Defect::patch_swap, Defect::intensity_blob, Defect::stripe};
    double defect_area = 0.04;  // fraction of the image, in (0, 0.5]
    std::size_t train_images = 10;
    std::size_t test_normal = 8;
    std::size_t test_anomalous = 8;
    std::size_t region_levels = 4;  // luminance bins for the region masks
    std::size_t image_hw = 224;
    std::size_t patch_size = 16;

    void validate() const;
};

/// Normal training data plus a labeled test split with pixel-exact defect masks.
struct SyntheticTask {
    TaskDataset train;
    std::vector<Image> test_images;
    std::vector<int> test_labels;                    // 1 = anomalous
    std::vector<std::vector<std::uint8_t>> test_masks;  // image_hw^2 each, 1 = defect pixel
};

/// Deterministic in (spec, seed). Pixel values are multiples of 1/255 so that 8-bit
/// image files hold them exactly.
SyntheticTask gen_synthetic(const SyntheticTaskSpec& spec, std::uint64_t seed);

/// Patch-grid regions from binned mean patch luminance.
RegionMask luminance_regions(const Image& image, std::size_t patch_size, std::size_t levels);

/// One spec per texture family, named after it.
std::vector<SyntheticTaskSpec> default_synthetic_suite();

}  // namespace mpcad
