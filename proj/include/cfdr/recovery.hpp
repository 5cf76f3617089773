#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cfdr/contrastive.hpp"
#include "cfdr/dataset.hpp"
#include "cfdr/detector.hpp"
#include "cfdr/model.hpp"

namespace cfdr {

enum class StopReason { reference_reached, plateau, epoch_cap };
std::string to_string(StopReason r);

struct RecoveryConfig {
  bool labeled = false;
  int64_t data_budget = 512;
  int batch = 64;
  int epoch_cap = 30;  // applies to each phase separately
  int patience = 3;
  double min_rel_improve = 1e-3;
  // stop targets: the clean model's loss counterparts
  double ref_contrastive = 0.0;
  double ref_cross_entropy = 0.0;

  AugmentationConfig aug;
  LossConfig loss;
  OptimizerConfig opt_a;  // phase (a); defaults set in recover()
  OptimizerConfig opt_b;
  uint64_t seed = 0;
};

struct RecoveryReport {
  double acc_before = 0.0;
  double acc_after = 0.0;
  int epochs_used = 0;  // phase (a) + phase (b)
  int epochs_a = 0;
  int epochs_b = 0;
  StopReason stop_reason = StopReason::epoch_cap;  // phase (a)
  std::optional<StopReason> stop_reason_b;
  bool phase_b_run = false;
  std::vector<double> loss_trajectory_a;
  std::vector<double> loss_trajectory_b;

  std::string to_json() const;
  std::string trajectory_csv() const;  // phase,epoch,loss
};

// Post-detection repair: contrastive retraining on the recovery budget, then
// cross-entropy fine-tuning of the classifier when labels are available.
// Each phase stops at the first satisfied criterion: loss at or below the
// clean reference, a plateau, or the epoch cap. The unlabeled path never
// reads labels.
RecoveryReport recover(Model& model, const Dataset& recovery_data, const Dataset& eval_data,
                       const RecoveryConfig& cfg);

// Runs detection; on an attacked verdict runs recovery and returns both.
std::pair<DetectionVerdict, std::optional<RecoveryReport>> detect_and_recover(
    Model& model, const Dataset& detect_data, const Dataset& recover_data,
    const Dataset& eval_data, const ReferenceProfile& profile, double delta,
    const DetectorConfig& det_cfg, const RecoveryConfig& rec_cfg);

}  // namespace cfdr
