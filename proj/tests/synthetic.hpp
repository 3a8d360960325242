#pragma once

// Small in-memory datasets at quarter scale (48 px target, 32 px source).

#include <cstdio>
#include <vector>

#include "visirnet/datagen.hpp"

namespace testing_support {

inline visirnet::DatagenConfig quarter_scale_datagen(double jitter = 8.0) {
    visirnet::DatagenConfig c;
    c.target_size = 48;
    c.source_size = 32;
    c.jitter_radius = jitter;
    return c;
}

/// `images` registered scenes, `per_image` pairs each.
inline std::vector<visirnet::AlignmentPair> synthetic_pairs(int images, int per_image, std::uint64_t seed) {
    using namespace visirnet;
    const DatagenConfig cfg = quarter_scale_datagen();
    std::vector<AlignmentPair> out;
    for (int i = 0; i < images; ++i) {
        Rng rng(substream_seed(seed, static_cast<std::uint64_t>(i)));
        auto [rgb, ir] = synthesize_registered_pair(cfg.target_size, rng);
        for (int k = 0; k < per_image; ++k) {
            char id[32];
            std::snprintf(id, sizeof id, "s%02d_%03d", i, k);
            out.push_back(make_pair(rgb, ir, cfg, rng, id));
        }
    }
    return out;
}

}  // namespace testing_support
