#pragma once

#include <cstdint>
#include <string>

#include "cfdr/contrastive.hpp"
#include "cfdr/dataset.hpp"
#include "cfdr/model.hpp"

namespace cfdr {

struct DetectorConfig {
  int batch = 64;
  AugmentationConfig aug;
  LossConfig loss;
};

// Clean-model loss statistics used as the detection baseline.
struct ReferenceProfile {
  double l_c = 0.0;      // mean contrastive loss of the clean model
  double sigma_c = 0.0;  // std over sampled batches
  int n_samples = 0;
  uint64_t aug_hash = 0;
  uint64_t loss_hash = 0;

  std::string to_json() const;
  static ReferenceProfile from_json(const std::string& js);
};

struct DetectionVerdict {
  double l_d = 0.0;
  double l_c = 0.0;
  double delta = 0.0;
  bool attacked = false;
  int batches_used = 0;

  std::string to_json() const;
};

// Single-batch measurement. The classification logits come from the same
// encoder pass as the loss, so detection rides alongside normal inference
// instead of blocking it. Forward-only: no gradients, no parameter changes.
struct SampleResult {
  double loss = 0.0;
  Tensor logits;  // [B, num_classes] for view_a of the sampled pair
};
SampleResult sample_loss(const Model& model, const Tensor& batch_images, const DetectorConfig& cfg,
                         int64_t batch_index = 0);

// One profile/detection sample: draws a batch from `data`, augments it with
// the stream labeled by (stream, sample_index), and measures the loss.
double draw_and_sample(const Model& model, const Dataset& data, const DetectorConfig& cfg,
                       uint64_t seed, const char* stream, int64_t sample_index);

ReferenceProfile build_reference(const Model& model, const Dataset& unlabeled_data,
                                 int n_samples, const DetectorConfig& cfg, uint64_t seed,
                                 std::vector<double>* samples_out = nullptr);

// max(3 sigma_c, 0.05 l_c)
double default_delta(const ReferenceProfile& profile);

DetectionVerdict detect(const ReferenceProfile& profile, const Model& model, const Dataset& data,
                        double delta, int n_batches, const DetectorConfig& cfg, uint64_t seed);

}  // namespace cfdr
