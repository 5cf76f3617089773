#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cfdr/attacks.hpp"
#include "cfdr/contrastive.hpp"
#include "cfdr/dataset.hpp"
#include "cfdr/detector.hpp"
#include "cfdr/model.hpp"
#include "cfdr/recovery.hpp"

namespace cfdr {

class ExperimentError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// One JSON document drives a full run: train, profile, attack, detect,
// recover, report. All randomness derives from `seed` through named
// substreams, so a rerun with the same config reproduces every artifact
// byte for byte (wall-clock timings live in a separate file).
struct ExperimentConfig {
  uint64_t seed = 0;
  std::string out_dir = "out";
  std::string dataset = "synthetic-blobs";  // synthetic-blobs | cifar10-binary
  std::string data_dir;                     // cifar10 binary directory
  std::string preset = "tiny";
  std::string scale = "desk";  // desk | full (the original-setting epoch preset)

  int64_t train_size = 2000;
  int64_t test_size = 1000;
  int64_t recover_size = 512;  // recovery data budget
  int batch = 64;
  int phase_a_epochs = 50;
  int phase_b_epochs = 20;

  int detect_samples = 1000;         // reference profile sample count
  int attack_detect_samples = 1000;  // per-attacked-model loss samples
  std::vector<std::string> attacks = {"pbs", "fsa_l0", "fsa_l2", "gda"};

  float temperature = 0.5f;
  float lr_phase_a = 1e-3f;
  float lr_phase_b = 5e-3f;

  int recovery_epoch_cap = 30;
  int recovery_patience = 3;
  double recovery_min_rel_improve = 1e-3;

  int pbs_max_flips = 50;
  int fsa_max_iters = 120;
  int gda_max_iters = 300;
  std::string gda_layer = "classifier.fc.weight";

  std::string to_json() const;
  static ExperimentConfig from_json(const std::string& js);
  static ExperimentConfig from_json_file(const std::string& path);
  void apply_scale_preset();  // "full" switches to the 1000/100-epoch setting
};

struct ExperimentResult {
  double clean_acc = 0.0;
  ReferenceProfile profile;
  std::vector<std::string> artifacts;  // file names relative to out_dir
};

// Runs the whole pipeline and writes: clean/attacked checkpoints, profile
// and verdict JSON, train logs, a detection sample CSV (one row per sampled
// batch per model), a recovery table CSV, a manifest with SHA-256 digests,
// and a separate timing file.
ExperimentResult run_experiment(const ExperimentConfig& cfg);

}  // namespace cfdr
