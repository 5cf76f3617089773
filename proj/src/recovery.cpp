#include "cfdr/recovery.hpp"

#include <cmath>
#include <stdexcept>

#include "cfdr/rng.hpp"
#include "json.hpp"

namespace cfdr {

using nlohmann::json;

std::string to_string(StopReason r) {
  switch (r) {
    case StopReason::reference_reached: return "reference_reached";
    case StopReason::plateau: return "plateau";
    case StopReason::epoch_cap: return "epoch_cap";
  }
  return "unknown";
}

std::string RecoveryReport::to_json() const {
  json j;
  j["acc_before"] = acc_before;
  j["acc_after"] = acc_after;
  j["epochs_used"] = epochs_used;
  j["epochs_a"] = epochs_a;
  j["epochs_b"] = epochs_b;
  j["stop_reason"] = to_string(stop_reason);
  if (stop_reason_b) j["stop_reason_b"] = to_string(*stop_reason_b);
  j["phase_b_run"] = phase_b_run;
  j["loss_trajectory_a"] = loss_trajectory_a;
  j["loss_trajectory_b"] = loss_trajectory_b;
  return j.dump();
}

std::string RecoveryReport::trajectory_csv() const {
  std::string out = "phase,epoch,loss\n";
  char buf[64];
  for (size_t i = 0; i < loss_trajectory_a.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "a,%zu,%.9g\n", i + 1, loss_trajectory_a[i]);
    out += buf;
  }
  for (size_t i = 0; i < loss_trajectory_b.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "b,%zu,%.9g\n", i + 1, loss_trajectory_b[i]);
    out += buf;
  }
  return out;
}

namespace {

// epoch runner returning the epoch's mean loss; stops at the first satisfied
// criterion, in the order: reference reached, plateau, epoch cap
template <typename EpochFn>
StopReason run_phase(int epoch_cap, int patience, double min_rel_improve, double reference,
                     EpochFn&& run_epoch, std::vector<double>& trajectory) {
  int plateau_streak = 0;
  double prev = 0.0;
  for (int epoch = 0; epoch < epoch_cap; ++epoch) {
    double loss = run_epoch(epoch);
    trajectory.push_back(loss);
    if (loss <= reference) return StopReason::reference_reached;
    if (epoch > 0) {
      double denom = std::max(std::abs(prev), 1e-12);
      double rel_improve = (prev - loss) / denom;
      if (rel_improve < min_rel_improve) {
        if (++plateau_streak >= patience) return StopReason::plateau;
      } else {
        plateau_streak = 0;
      }
    }
    prev = loss;
  }
  return StopReason::epoch_cap;
}

}  // namespace

RecoveryReport recover(Model& model, const Dataset& recovery_data, const Dataset& eval_data,
                       const RecoveryConfig& cfg) {
  if (cfg.epoch_cap < 1) throw std::invalid_argument("recover: epoch_cap must be >= 1");
  if (cfg.labeled && !recovery_data.labeled())
    throw std::invalid_argument("recover: labeled recovery requested but data has no labels");
  if (recovery_data.size() < cfg.batch)
    throw std::invalid_argument("recover: " + std::to_string(recovery_data.size()) +
                                " images is smaller than one batch of " + std::to_string(cfg.batch));

  // cap the data at the configured budget
  Dataset budget_data = recovery_data;
  if (recovery_data.size() > cfg.data_budget) {
    std::vector<int64_t> head(cfg.data_budget);
    for (int64_t i = 0; i < cfg.data_budget; ++i) head[i] = i;
    budget_data = recovery_data.subset(head);
  }
  // the unlabeled path must not even see labels
  Dataset phase_a_data = budget_data.without_labels();

  RecoveryReport report;
  report.acc_before = evaluate_accuracy(model, eval_data);

  report.stop_reason = run_phase(
      cfg.epoch_cap, cfg.patience, cfg.min_rel_improve, cfg.ref_contrastive,
      [&](int epoch) {
        // fresh augmentation and shuffle streams each epoch
        AugmentationConfig aug = cfg.aug;
        aug.seed = substream(cfg.aug.seed, "recover_a_epoch", epoch).next_u64();
        uint64_t order_seed = substream(cfg.seed, "recover_a_order", epoch).next_u64();
        TrainLog log = train_phase_a(model, phase_a_data, 1, cfg.batch, aug, cfg.loss, cfg.opt_a,
                                     order_seed);
        return log.entries.back().mean_loss;
      },
      report.loss_trajectory_a);
  report.epochs_a = static_cast<int>(report.loss_trajectory_a.size());

  if (cfg.labeled) {
    report.phase_b_run = true;
    report.stop_reason_b = run_phase(
        cfg.epoch_cap, cfg.patience, cfg.min_rel_improve, cfg.ref_cross_entropy,
        [&](int epoch) {
          uint64_t order_seed = substream(cfg.seed, "recover_b_order", epoch).next_u64();
          TrainLog log = train_phase_b(model, budget_data, 1, cfg.batch, cfg.opt_b, order_seed);
          return log.entries.back().mean_loss;
        },
        report.loss_trajectory_b);
    report.epochs_b = static_cast<int>(report.loss_trajectory_b.size());
  }

  report.epochs_used = report.epochs_a + report.epochs_b;
  report.acc_after = evaluate_accuracy(model, eval_data);
  return report;
}

std::pair<DetectionVerdict, std::optional<RecoveryReport>> detect_and_recover(
    Model& model, const Dataset& detect_data, const Dataset& recover_data,
    const Dataset& eval_data, const ReferenceProfile& profile, double delta,
    const DetectorConfig& det_cfg, const RecoveryConfig& rec_cfg) {
  DetectionVerdict verdict = detect(profile, model, detect_data, delta, 1, det_cfg, rec_cfg.seed);
  if (!verdict.attacked) return {verdict, std::nullopt};
  return {verdict, recover(model, recover_data, eval_data, rec_cfg)};
}

}  // namespace cfdr
