#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mscg/data.hpp"

namespace mscg {

// Deterministic synthetic farmland scenes: per-class rectangular regions on a
// background field, NIR derived from class identity, optional overlapping
// annotations, rectangular boundary inset and mask holes. The same seed
// yields byte-identical files.
struct SynthConfig {
    std::uint64_t seed = 0;
    std::int64_t count = 8;
    std::int64_t size = 64; // divisible by 16
    std::int64_t num_classes = 7;
    std::vector<double> class_mix;      // length C, sums to <= 1; empty = default imbalanced mix
    std::int64_t classes_per_image = 0; // 0 = every foreground class in every image
    double overlap_prob = 0.0;          // chance a region also carries a second label
    std::int64_t snap = 8;              // region corners/extents snap to this grid
    std::int64_t min_region = 16;
    std::int64_t max_region = 32;
    double boundary_margin_frac = 0.0; // max inset of the farmland boundary
    double mask_hole_prob = 0.0;
    double noise = 0.02;
};

namespace detail {

struct ClassAppearance {
    float r, g, b, nir;
};

inline const std::array<ClassAppearance, 7>& class_palette() {
    static const std::array<ClassAppearance, 7> p = {{
        {0.35f, 0.30f, 0.18f, 0.50f}, // Background: bare field
        {0.20f, 0.20f, 0.25f, 0.15f}, // Cloud shadow
        {0.20f, 0.70f, 0.25f, 0.90f}, // Double plant
        {0.75f, 0.65f, 0.40f, 0.35f}, // Planter skip
        {0.15f, 0.30f, 0.70f, 0.05f}, // Standing water
        {0.20f, 0.55f, 0.60f, 0.20f}, // Waterway
        {0.10f, 0.45f, 0.15f, 0.75f}, // Weed cluster
    }};
    return p;
}

inline std::int64_t snap_down(std::int64_t v, std::int64_t snap) { return (v / snap) * snap; }

} // namespace detail

inline std::vector<double> default_class_mix(std::int64_t num_classes) {
    std::vector<double> mix(static_cast<std::size_t>(num_classes), 0.0);
    mix[0] = 0.82;
    for (std::size_t c = 1; c < mix.size(); ++c) mix[c] = 0.18 / static_cast<double>(num_classes - 1);
    return mix;
}

inline DatasetManifest synth_generate(const SynthConfig& cfg, const std::string& out_dir) {
    if (cfg.size % 16 != 0) throw contract_violation("synth size must be divisible by 16");
    const std::int64_t C = cfg.num_classes;
    const std::int64_t S = cfg.size;
    const std::int64_t N = S * S;
    std::vector<double> mix = cfg.class_mix.empty() ? default_class_mix(C) : cfg.class_mix;
    if (static_cast<std::int64_t>(mix.size()) != C) {
        throw contract_violation("class_mix must have one entry per class");
    }
    const auto& palette = detail::class_palette();

    std::filesystem::create_directories(out_dir);
    DatasetManifest manifest;
    manifest.root = out_dir;
    manifest.num_classes = C;

    for (std::int64_t img = 0; img < cfg.count; ++img) {
        CounterRng rng = CounterRng(cfg.seed).fork(0x53594E54ull ^ static_cast<std::uint64_t>(img));

        // which foreground classes this image hosts
        std::vector<std::int64_t> hosted;
        if (cfg.classes_per_image <= 0 || cfg.classes_per_image >= C - 1) {
            for (std::int64_t c = 1; c < C; ++c) hosted.push_back(c);
        } else {
            for (std::int64_t k = 0; k < cfg.classes_per_image; ++k) {
                hosted.push_back(1 + (img * cfg.classes_per_image + k) % (C - 1));
            }
        }

        std::vector<std::int8_t> assign(static_cast<std::size_t>(N), 0);
        Tensor<float> labels({C, S, S});
        for (std::int64_t cls : hosted) {
            const auto budget = static_cast<std::int64_t>(std::llround(mix[static_cast<std::size_t>(cls)] * N));
            std::int64_t painted = 0;
            for (int attempt = 0; attempt < 200 && painted < budget; ++attempt) {
                const std::int64_t span = std::max<std::int64_t>(1, cfg.max_region - cfg.min_region + 1);
                std::int64_t rw = cfg.min_region + static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(span)));
                std::int64_t rh = cfg.min_region + static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(span)));
                rw = std::max(cfg.snap, detail::snap_down(std::min(rw, S), cfg.snap));
                rh = std::max(cfg.snap, detail::snap_down(std::min(rh, S), cfg.snap));
                const auto top = detail::snap_down(
                    static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(S - rh + 1))), cfg.snap);
                const auto left = detail::snap_down(
                    static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(S - rw + 1))), cfg.snap);

                std::vector<std::int64_t> region_pixels;
                for (std::int64_t r = top; r < top + rh && painted < budget; ++r) {
                    for (std::int64_t c = left; c < left + rw && painted < budget; ++c) {
                        const std::int64_t p = r * S + c;
                        if (assign[static_cast<std::size_t>(p)] == 0) {
                            assign[static_cast<std::size_t>(p)] = static_cast<std::int8_t>(cls);
                            labels.at(cls * N + p) = 1.f;
                            region_pixels.push_back(p);
                            ++painted;
                        }
                    }
                }
                // overlapping annotation: the same region also carries a second label
                if (!region_pixels.empty() && cfg.overlap_prob > 0.0 && rng.next_uniform() < cfg.overlap_prob) {
                    const std::int64_t other = 1 + static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(C - 1)));
                    if (other != cls) {
                        for (auto p : region_pixels) labels.at(other * N + p) = 1.f;
                    }
                }
            }
            // deterministic fallback when the scene is too crowded for rectangles
            for (std::int64_t p = 0; p < N && painted < budget; ++p) {
                if (assign[static_cast<std::size_t>(p)] == 0) {
                    assign[static_cast<std::size_t>(p)] = static_cast<std::int8_t>(cls);
                    labels.at(cls * N + p) = 1.f;
                    ++painted;
                }
            }
        }
        for (std::int64_t p = 0; p < N; ++p) {
            bool any = false;
            for (std::int64_t c = 1; c < C; ++c) {
                if (labels.at(c * N + p) != 0.f) any = true;
            }
            labels.at(p) = any ? 0.f : 1.f;
        }

        // image: NIR,R,G,B from the class palette plus seeded noise
        Tensor<float> image({4, S, S});
        for (std::int64_t p = 0; p < N; ++p) {
            const auto& ap = palette[static_cast<std::size_t>(assign[static_cast<std::size_t>(p)]) %
                                     palette.size()];
            const float ch[4] = {ap.nir, ap.r, ap.g, ap.b};
            for (std::int64_t k = 0; k < 4; ++k) {
                const float v =
                    ch[k] + static_cast<float>((rng.next_uniform() * 2.0 - 1.0) * cfg.noise);
                image.at(k * N + p) = std::min(1.f, std::max(0.f, v));
            }
        }

        Tensor<float> boundary({1, S, S});
        const auto max_margin = static_cast<std::int64_t>(cfg.boundary_margin_frac * static_cast<double>(S));
        std::int64_t m[4] = {0, 0, 0, 0};
        for (auto& v : m) {
            v = max_margin > 0 ? static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(max_margin + 1)))
                               : 0;
        }
        for (std::int64_t r = 0; r < S; ++r)
            for (std::int64_t c = 0; c < S; ++c) {
                const bool inside = r >= m[0] && r < S - m[1] && c >= m[2] && c < S - m[3];
                boundary.at(r * S + c) = inside ? 1.f : 0.f;
            }

        Tensor<float> mask = Tensor<float>::full({1, S, S}, 1.f);
        if (cfg.mask_hole_prob > 0.0 && rng.next_uniform() < cfg.mask_hole_prob) {
            const std::int64_t hole = std::max<std::int64_t>(2, S / 8);
            const auto top = static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(S - hole)));
            const auto left = static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(S - hole)));
            for (std::int64_t r = top; r < top + hole; ++r)
                for (std::int64_t c = left; c < left + hole; ++c) mask.at(r * S + c) = 0.f;
        }

        char name[32];
        std::snprintf(name, sizeof(name), "sample_%04lld", static_cast<long long>(img));
        const std::string dir = out_dir + "/" + name;
        std::filesystem::create_directories(dir);
        mten::save(dir + "/image.mten", image);
        mten::save_u8(dir + "/labels.mten", labels);
        mten::save_u8(dir + "/boundary.mten", boundary);
        mten::save_u8(dir + "/mask.mten", mask);
        manifest.sample_dirs.push_back(name);
    }

    save_manifest(manifest, out_dir + "/manifest.txt");
    return manifest;
}

} // namespace mscg
