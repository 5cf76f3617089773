#pragma once

// Shared trained-model fixture for the attack/detector/recovery suites.
// Trains a small blob classifier once per test binary (about half a minute)
// and hands out clones.

#include "cfdr/contrastive.hpp"
#include "cfdr/dataset.hpp"
#include "cfdr/detector.hpp"
#include "cfdr/model.hpp"

namespace fixture {

struct Trained {
  cfdr::Model model;
  cfdr::Dataset train;         // 512 labeled blobs
  cfdr::Dataset test;          // 512 labeled blobs
  cfdr::Dataset recover_pool;  // 512 labeled blobs, disjoint from both
  cfdr::Dataset attack_batch;  // 64 labeled blobs from the test pool
  cfdr::DetectorConfig det;
  cfdr::ReferenceProfile profile;
  double clean_acc = 0.0;
};

inline const Trained& trained() {
  static Trained t = [] {
    Trained f;
    cfdr::Dataset all = cfdr::make_synthetic_blobs(512 + 512 + 512, 10, /*seed=*/41);
    std::vector<int64_t> idx(all.size());
    for (int64_t i = 0; i < all.size(); ++i) idx[i] = i;
    f.train = all.subset({idx.begin(), idx.begin() + 512});
    f.test = all.subset({idx.begin() + 512, idx.begin() + 1024});
    f.test.split = "test";
    f.recover_pool = all.subset({idx.begin() + 1024, idx.end()});

    cfdr::ModelConfig mc;
    mc.seed = 17;
    f.model = cfdr::build_model(mc);

    cfdr::AugmentationConfig aug;
    aug.seed = 1001;
    cfdr::LossConfig loss;
    cfdr::OptimizerConfig opt_a;
    opt_a.lr = 1e-3f;
    cfdr::OptimizerConfig opt_b;
    opt_b.lr = 5e-3f;
    cfdr::train_phase_a(f.model, f.train.without_labels(), 12, 64, aug, loss, opt_a, 2001);
    cfdr::train_phase_b(f.model, f.train, 8, 64, opt_b, 2002);

    f.det.aug.seed = 3001;
    f.profile = cfdr::build_reference(f.model, f.test.without_labels(), 60, f.det, 4001);
    f.clean_acc = cfdr::evaluate_accuracy(f.model, f.test);

    std::vector<int64_t> batch_idx(64);
    for (int64_t i = 0; i < 64; ++i) batch_idx[i] = i;
    f.attack_batch = f.test.subset(batch_idx);
    return f;
  }();
  return t;
}

}  // namespace fixture
