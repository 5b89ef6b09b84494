#include "mpcad/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

namespace mpcad {

namespace {

using Rgb = std::array<double, 3>;

struct Palette {
    Rgb a, b;
};

// Distinct hue pairs per family keep the tasks apart for task identification.
Palette palette(Texture t) {
    switch (t) {
        case Texture::stripes: return {{0.85, 0.75, 0.20}, {0.35, 0.25, 0.05}};
        case Texture::checker: return {{0.20, 0.35, 0.80}, {0.90, 0.90, 0.95}};
        case Texture::dots: return {{0.15, 0.55, 0.20}, {0.80, 0.90, 0.60}};
        case Texture::weave: return {{0.90, 0.40, 0.85}, {0.20, 0.05, 0.25}};
        case Texture::grain: return {{0.35, 0.22, 0.12}, {0.95, 0.80, 0.60}};
    }
    return {};
}

/// Per-image random parameters of a texture family (phase and small jitter).
struct TextureParams {
    double phase_x, phase_y, angle, scale;
    std::vector<std::array<double, 4>> waves;  // grain: (fx, fy, phase, amplitude)
};

TextureParams draw_params(Texture t, Rng& rng) {
    TextureParams p;
    p.phase_x = rng.uniform(0, 64);
    p.phase_y = rng.uniform(0, 64);
    p.angle = rng.uniform(-0.05, 0.05);
    p.scale = rng.uniform(0.95, 1.05);
    if (t == Texture::grain) {
        // The wave set belongs to the family; images differ by translation and jitter only.
        Rng family(0x67a1);
        for (int i = 0; i < 6; ++i)
            p.waves.push_back({family.uniform(-0.12, 0.12), family.uniform(-0.12, 0.12), family.uniform(0, 6.3),
                               family.uniform(0.3, 1.0)});
    }
    return p;
}

/// Mixing weight in [0, 1] between the two palette colors at (x, y).
double texture_weight(Texture t, const TextureParams& p, double x, double y) {
    const double c = std::cos(p.angle), s = std::sin(p.angle);
    const double u = (c * x - s * y) / p.scale + p.phase_x, v = (s * x + c * y) / p.scale + p.phase_y;
    constexpr double tau = 2.0 * std::numbers::pi;
    switch (t) {
        case Texture::stripes: return 0.5 + 0.5 * std::sin(tau * u / 12.0);
        case Texture::checker: {
            const int cx = static_cast<int>(std::floor(u / 20.0)), cy = static_cast<int>(std::floor(v / 20.0));
            return ((cx + cy) & 1) ? 1.0 : 0.0;
        }
        case Texture::dots: {
            const double fx = std::fmod(u, 18.0) - 9.0, fy = std::fmod(v, 18.0) - 9.0;
            const double gx = fx < -9.0 ? fx + 18.0 : fx, gy = fy < -9.0 ? fy + 18.0 : fy;
            return std::hypot(gx, gy) < 5.0 ? 0.0 : 1.0;
        }
        case Texture::weave: {
            const double a = std::sin(tau * u / 16.0), b = std::sin(tau * v / 16.0);
            return 0.5 + 0.5 * (std::abs(a) > std::abs(b) ? a : -b);
        }
        case Texture::grain: {
            double acc = 0.0, norm = 0.0;
            for (const auto& w : p.waves) {
                acc += w[3] * std::sin(tau * (w[0] * u + w[1] * v) + w[2]);
                norm += w[3];
            }
            return 0.5 + 0.5 * std::tanh(3.0 * acc / norm);
        }
    }
    return 0.0;
}

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

Image render(Texture t, const TextureParams& p, std::size_t hw, Rng& rng) {
    const Palette pal = palette(t);
    Image img{3, hw, hw, std::vector<double>(3 * hw * hw)};
    for (std::size_t y = 0; y < hw; ++y)
        for (std::size_t x = 0; x < hw; ++x) {
            const double w = texture_weight(t, p, static_cast<double>(x), static_cast<double>(y));
            for (std::size_t ch = 0; ch < 3; ++ch)
                img.at(ch, y, x) = w * pal.a[ch] + (1.0 - w) * pal.b[ch] + 0.02 * rng.normal();
        }
    for (auto& v : img.pixels) v = quantize(v);
    return img;
}

struct Box {
    std::size_t y0, x0, h, w;
};

Box random_box(std::size_t hw, double area, double aspect, Rng& rng) {
    const double px = area * static_cast<double>(hw * hw);
    auto h = static_cast<std::size_t>(std::max(2.0, std::round(std::sqrt(px / aspect))));
    auto w = static_cast<std::size_t>(std::max(2.0, std::round(std::sqrt(px * aspect))));
    h = std::min(h, hw - 2);
    w = std::min(w, hw - 2);
    const std::size_t y0 = 1 + rng.below(hw - h - 1), x0 = 1 + rng.below(hw - w - 1);
    return {y0, x0, h, w};
}

/// Writes the defect into `img` and `mask`; every changed pixel is marked.
void inject(Image& img, std::vector<std::uint8_t>& mask, Defect d, double area, Texture t,
            const TextureParams& params, Rng& rng) {
    const std::size_t hw = img.height;
    auto set = [&](std::size_t y, std::size_t x, const Rgb& c) {
        for (std::size_t ch = 0; ch < 3; ++ch) img.at(ch, y, x) = quantize(c[ch]);
        mask[y * hw + x] = 1;
    };
    switch (d) {
        case Defect::patch_swap: {
            // Texture patch at the wrong orientation and a finer scale: same colors, broken structure.
            const Box b = random_box(hw, area, 1.0, rng);
            TextureParams q = params;
            q.angle += std::numbers::pi / 4.0;
            q.scale *= 0.45;
            q.phase_x += rng.uniform(0, 32);
            const Palette pal = palette(t);
            for (std::size_t y = b.y0; y < b.y0 + b.h; ++y)
                for (std::size_t x = b.x0; x < b.x0 + b.w; ++x) {
                    const double w = texture_weight(t, q, static_cast<double>(x), static_cast<double>(y));
                    set(y, x, {w * pal.a[0] + (1 - w) * pal.b[0], w * pal.a[1] + (1 - w) * pal.b[1],
                               w * pal.a[2] + (1 - w) * pal.b[2]});
                }
            break;
        }
        case Defect::intensity_blob: {
            const Box b = random_box(hw, area * 4.0 / std::numbers::pi, rng.uniform(0.6, 1.6), rng);
            const double cy = static_cast<double>(b.y0) + 0.5 * static_cast<double>(b.h);
            const double cx = static_cast<double>(b.x0) + 0.5 * static_cast<double>(b.w);
            const double shift = rng.uniform() < 0.5 ? -0.35 : 0.35;
            for (std::size_t y = b.y0; y < b.y0 + b.h; ++y)
                for (std::size_t x = b.x0; x < b.x0 + b.w; ++x) {
                    const double dy = (static_cast<double>(y) + 0.5 - cy) / (0.5 * static_cast<double>(b.h));
                    const double dx = (static_cast<double>(x) + 0.5 - cx) / (0.5 * static_cast<double>(b.w));
                    if (dy * dy + dx * dx > 1.0) continue;
                    set(y, x, {img.at(0, y, x) + shift, img.at(1, y, x) + shift, img.at(2, y, x) + shift});
                }
            break;
        }
        case Defect::stripe: {
            // A long thin scratch in a color foreign to the palette.
            const bool horizontal = rng.uniform() < 0.5;
            const double len_frac = rng.uniform(0.4, 0.7);
            const auto len = static_cast<std::size_t>(len_frac * static_cast<double>(hw));
            const auto thick = static_cast<std::size_t>(
                std::max(3.0, std::round(area * static_cast<double>(hw * hw) / static_cast<double>(len))));
            const Box b = horizontal ? Box{1 + rng.below(hw - thick - 1), 1 + rng.below(hw - len - 1), thick, len}
                                     : Box{1 + rng.below(hw - len - 1), 1 + rng.below(hw - thick - 1), len, thick};
            const Palette pal = palette(t);
            const Rgb c{1.0 - pal.a[0], 1.0 - pal.a[1], 1.0 - pal.a[2]};
            for (std::size_t y = b.y0; y < b.y0 + b.h; ++y)
                for (std::size_t x = b.x0; x < b.x0 + b.w; ++x) set(y, x, c);
            break;
        }
    }
    // Pixels that happened to keep their value are still part of the defect region.
}

}  // namespace

std::string to_string(Texture t) {
    switch (t) {
        case Texture::stripes: return "stripes";
        case Texture::checker: return "checker";
        case Texture::dots: return "dots";
        case Texture::weave: return "weave";
        case Texture::grain: return "grain";
    }
    return "?";
}

Texture texture_from_string(const std::string& name) {
    for (Texture t : {Texture::stripes, Texture::checker, Texture::dots, Texture::weave, Texture::grain})
        if (to_string(t) == name) return t;
    throw ConfigError("unknown texture family '" + name + "'");
}

void SyntheticTaskSpec::validate() const {
    if (name.empty()) throw ConfigError("synthetic task needs a name");
    if (!(defect_area > 0.0 && defect_area <= 0.5)) throw ConfigError("defect_area must lie in (0, 0.5]");
    if (defects.empty() && test_anomalous > 0) throw ConfigError("anomalous test images need defect types");
    if (train_images < 1) throw ConfigError("synthetic task needs at least one training image");
    if (region_levels < 1) throw ConfigError("region_levels must be positive");
    if (patch_size == 0 || image_hw % patch_size != 0) throw ConfigError("image size must be a multiple of patch size");
    if (image_hw < 16) throw ConfigError("synthetic images must be at least 16 pixels wide");
}

RegionMask luminance_regions(const Image& image, std::size_t patch_size, std::size_t levels) {
    const std::size_t gh = image.height / patch_size, gw = image.width / patch_size;
    std::vector<double> lum(gh * gw, 0.0);
    for (std::size_t gy = 0; gy < gh; ++gy)
        for (std::size_t gx = 0; gx < gw; ++gx) {
            double s = 0.0;
            for (std::size_t ch = 0; ch < image.channels; ++ch)
                for (std::size_t y = 0; y < patch_size; ++y)
                    for (std::size_t x = 0; x < patch_size; ++x)
                        s += image.at(ch, gy * patch_size + y, gx * patch_size + x);
            lum[gy * gw + gx] = s / static_cast<double>(image.channels * patch_size * patch_size);
        }
    const auto [lo, hi] = std::minmax_element(lum.begin(), lum.end());
    RegionMask m{gh, gw, std::vector<int>(gh * gw, 0)};
    const double span = *hi - *lo;
    if (span > 0)
        for (std::size_t i = 0; i < lum.size(); ++i)
            m.labels[i] = std::min(static_cast<int>(levels) - 1,
                                   static_cast<int>((lum[i] - *lo) / span * static_cast<double>(levels)));
    return m;
}

SyntheticTask gen_synthetic(const SyntheticTaskSpec& spec, std::uint64_t seed) {
    spec.validate();
    const Rng root = Rng(seed).split(static_cast<std::uint64_t>(spec.texture) + 1);
    Rng train_rng = root.split(1), test_rng = root.split(2), defect_rng = root.split(3);

    SyntheticTask task;
    task.train.task_name = spec.name;
    for (std::size_t i = 0; i < spec.train_images; ++i) {
        const auto p = draw_params(spec.texture, train_rng);
        task.train.images.push_back(render(spec.texture, p, spec.image_hw, train_rng));
        task.train.region_masks.push_back(
            luminance_regions(task.train.images.back(), spec.patch_size, spec.region_levels));
    }
    const std::size_t n_test = spec.test_normal + spec.test_anomalous;
    for (std::size_t i = 0; i < n_test; ++i) {
        const auto p = draw_params(spec.texture, test_rng);
        Image img = render(spec.texture, p, spec.image_hw, test_rng);
        std::vector<std::uint8_t> mask(spec.image_hw * spec.image_hw, 0);
        const bool anomalous = i >= spec.test_normal;
        if (anomalous) {
            const Defect d = spec.defects[(i - spec.test_normal) % spec.defects.size()];
            inject(img, mask, d, spec.defect_area, spec.texture, p, defect_rng);
        }
        task.test_images.push_back(std::move(img));
        task.test_labels.push_back(anomalous ? 1 : 0);
        task.test_masks.push_back(std::move(mask));
    }
    return task;
}

std::vector<SyntheticTaskSpec> default_synthetic_suite() {
    std::vector<SyntheticTaskSpec> out;
    for (Texture t : {Texture::stripes, Texture::checker, Texture::dots, Texture::weave, Texture::grain}) {
        SyntheticTaskSpec s;
        s.name = to_string(t);
        s.texture = t;
        out.push_back(s);
    }
    return out;
}

}  // namespace mpcad
