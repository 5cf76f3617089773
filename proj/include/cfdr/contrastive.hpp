#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cfdr/dataset.hpp"
#include "cfdr/model.hpp"
#include "cfdr/optim.hpp"
#include "cfdr/tensor.hpp"

namespace cfdr {

struct AugmentationConfig {
  float crop_lo = 0.6f;  // area fraction range for random resized crop
  float crop_hi = 1.0f;
  float flip_prob = 0.5f;
  float jitter_strength = 0.4f;  // brightness/contrast
  float grayscale_prob = 0.1f;
  uint64_t seed = 0;

  void validate() const;
  uint64_t hash() const;
};

// paired augmented views; row n of each view derives from the same source image
struct ContrastiveBatch {
  Tensor view_a;
  Tensor view_b;
  int64_t n = 0;
};

enum class Reduction { sum, mean };

struct LossConfig {
  float temperature = 0.5f;
  Reduction reduction = Reduction::sum;
  // true: the positive pair is excluded from the denominator (the default
  // formulation here); false: standard NT-Xent over 2N anchors
  bool exclude_positive_in_denominator = true;

  uint64_t hash() const;
};

// Two independently sampled augmentations per image. Deterministic given
// (cfg.seed, batch_index); augmentation of distinct batches can therefore run
// in parallel without changing results.
ContrastiveBatch augment_pair(const Tensor& images, const AugmentationConfig& cfg,
                              int64_t batch_index = 0);

// cosine similarity; defined as 0 when either vector is zero
float cosine_sim(std::span<const float> u, std::span<const float> v);

// Temperature-scaled contrastive loss over N positive pairs. Rows are
// l2-normalized internally. Differentiable end-to-end; N >= 2 required.
Tensor contrastive_loss(const Tensor& z_a, const Tensor& z_b, const LossConfig& cfg);

// Forward-only loss value at full double precision (the scalar the detector
// monitors; the Tensor path above rounds the same value to float32 once).
double contrastive_loss_value(const Tensor& z_a, const Tensor& z_b, const LossConfig& cfg);

struct TrainLogEntry {
  int epoch = 0;
  double mean_loss = 0.0;
  double wall_ms = 0.0;
};

struct TrainLog {
  std::vector<TrainLogEntry> entries;
  std::string to_csv(bool include_wall_ms = true) const;
};

// Phase (a): contrastive training of encoder + projection head on unlabeled
// data. The classifier is untouched; labels are ignored even if present.
TrainLog train_phase_a(Model& model, const Dataset& data, int epochs, int batch,
                       const AugmentationConfig& aug, const LossConfig& loss,
                       const OptimizerConfig& opt, uint64_t seed);

// Phase (b): cross-entropy fine-tuning of the classifier only; encoder and
// projection head are frozen (their embeddings are computed once).
TrainLog train_phase_b(Model& model, const Dataset& labeled_data, int epochs, int batch,
                       const OptimizerConfig& opt, uint64_t seed);

}  // namespace cfdr
