#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cfdr/dataset.hpp"
#include "cfdr/model.hpp"

namespace cfdr {

struct AttackReport {
  std::string attack_kind;  // pbs | fsa_l0 | fsa_l2 | gda | random_bit_flip
  std::vector<std::pair<std::string, int64_t>> layers_touched;  // (layer, total param count)
  int64_t params_modified = 0;
  int64_t bits_flipped = 0;  // pbs / random_bit_flip only
  double acc_before = 0.0;
  double acc_after = 0.0;
  int64_t iterations = 0;
  bool success = false;
  // fsa constraint audit, from direct forward passes
  std::optional<bool> targets_hit;
  std::optional<bool> keepers_kept;
  std::vector<double> trajectory;  // gda: mean target logit per accepted step
  std::string note;

  std::string to_json() const;
};

struct PbsConfig {
  double target_acc = 0.11;
  int trial_k = 10;       // trial flips per layer per iteration
  int max_flips = 50;
  int eval_batch = 64;
};

// Progressive bit search over the quantized weight layers: per layer, rank
// (index,bit) candidates by |dL/dw| * (bit value * scale) and trial-flip the
// top trial_k; across layers commit the single flip with the largest measured
// loss increase. Repeats until held-out accuracy < target_acc or the flip cap.
// Every weight layer must be quantized first. Each committed flip strictly
// increases the attack-batch loss.
AttackReport pbs_attack(Model& model, const Dataset& attack_batch, const Dataset& heldout,
                        const PbsConfig& cfg = {});

struct FsaConfig {
  int S = 5;  // images forced to target labels
  int R = 20; // total constrained images (first S are targets, rest keep predictions)
  std::vector<int> target_labels;
  std::string norm = "l2";  // "l0" | "l2"
  double rho = 1e-3;        // modification-norm penalty weight
  int max_iters = 60;
  std::string layer = "classifier.fc.weight";
  // solver knobs
  double admm_coupling = 1.0;
  int inner_steps = 6;
  double step_lr = 0.5;
  double target_weight = 4.0;  // per-image CE weight on the S forced images
  int64_t l0_keep = -1;        // l0: surviving modifications; default 10% of the layer
};

// ADMM-style alternating minimization on one layer: gradient steps on the
// classification constraints, a proximal step on the modification vector
// (shrinkage for l2, top-m projection for l0), then a dual update. The final
// installed weights are theta0 + z, so an infinite penalty leaves the model
// untouched. Constraint flags come from direct forward-pass audits.
AttackReport fsa_attack(Model& model, const Dataset& constrained, const Dataset& eval,
                        const FsaConfig& cfg);

// Picks a workable constrained set from a labeled pool: S correctly-predicted
// targets with pairwise-distinct classes, R-S keepers from classes disjoint
// from the target classes, and target labels rotated among the target
// classes. Keeps the last-layer constraints mutually satisfiable even when
// same-class embeddings are nearly identical.
Dataset select_fsa_constrained(const Dataset& pool, const Model& model, int S, int R,
                               uint64_t seed, std::vector<int>& target_labels_out);

struct GdaConfig {
  int target_class = 0;
  double lr = 1e-2;
  double l2_coef = 1e-3;
  int max_iters = 500;
  std::string layer = "classifier.fc.weight";
};

// Gradient ascent on the target-class mean logit over the source images,
// restrained by l2_coef * ||theta - theta0||^2. Steps are accepted only when
// both the penalized objective and the mean logit strictly increase, so the
// logged trajectory is strictly increasing by construction. No modification
// compression. Stops when every source image classifies as the target.
AttackReport gda_attack(Model& model, const Dataset& source_images, const Dataset& eval,
                        const GdaConfig& cfg);

// Baseline fault model: n_bits uniformly selected distinct (index,bit) flips
// on one quantized layer; msb_only restricts flips to the sign bit.
AttackReport random_bit_flip(Model& model, const std::string& layer, int64_t n_bits,
                             uint64_t seed, const Dataset& eval, bool msb_only = false);

}  // namespace cfdr
