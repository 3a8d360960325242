#include <gtest/gtest.h>

#include "support.hpp"
#include "synthetic.hpp"
#include "visirnet/trainer.hpp"

using namespace visirnet;

// Slow: memorization runs on 32 quarter-scale pairs. Data and hyperparameters
// are the README's overfit recipe, i.e. what `visirnet generate --synthetic 4
// --target-size 48 --source-size 32 --jitter 8 --pairs-per-image 8
// --test-fraction 0 --seed 7` writes.

namespace {

const std::vector<AlignmentPair>& pairs32() {
    static const auto p = [] {
        testing_support::TempDir dir("overfit");
        DatagenConfig cfg = testing_support::quarter_scale_datagen();
        cfg.pairs_per_image = 8;
        cfg.test_fraction = 0;
        cfg.rng_seed = 7;
        write_synthetic_registered(dir / "registered", 4, cfg.target_size, cfg.rng_seed);
        const DatasetSummary s = build_dataset(dir / "registered", dir / "data", cfg);
        return load_pairs(s.manifest, Split::train);
    }();
    return p;
}

TrainConfig overfit_config(int epochs, double lr, Head head = Head::corners) {
    TrainConfig c;
    c.epochs = epochs;
    c.learning_rate = lr;
    c.scale = 0.25;
    c.head = head;
    c.rng_seed = 1;
    return c;
}

}  // namespace

TEST(Overfit, BackboneSimilarityLossCollapses) {
    const TrainResult r = train_backbone(pairs32(), overfit_config(200, 1e-3));
    ASSERT_EQ(r.report.epochs.size(), 200u);
    const double first = r.report.epochs.front().loss, last = r.report.epochs.back().loss;
    EXPECT_LT(last, 0.1 * first) << "first " << first << " last " << last;
}

TEST(Overfit, HomographyLossFallsWindowByWindow) {
    const TrainResult bb = train_backbone(pairs32(), overfit_config(10, 1e-3));
    const TrainResult r = train_head(pairs32(), overfit_config(300, 3e-5, Head::homography), bb.checkpoint);
    ASSERT_EQ(r.report.epochs.size(), 300u);
    double prev = std::numeric_limits<double>::infinity();
    for (int w = 0; w < 30; ++w) {
        double mean = 0;
        for (int e = 10 * w; e < 10 * w + 10; ++e) mean += r.report.epochs[e].h2 / 10;
        EXPECT_LT(mean, prev) << "window " << w;
        prev = mean;
    }
}
