#include "cfdr/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <set>
#include <stdexcept>

#include "cfdr/rng.hpp"
#include "json.hpp"

namespace cfdr {

using nlohmann::json;

std::string AttackReport::to_json() const {
  json j;
  j["attack_kind"] = attack_kind;
  json layers = json::array();
  for (const auto& [name, count] : layers_touched)
    layers.push_back({{"layer_name", name}, {"param_count", count}});
  j["layers_touched"] = layers;
  j["params_modified"] = params_modified;
  j["bits_flipped"] = bits_flipped;
  j["acc_before"] = acc_before;
  j["acc_after"] = acc_after;
  j["iterations"] = iterations;
  j["success"] = success;
  if (targets_hit) j["targets_hit"] = *targets_hit;
  if (keepers_kept) j["keepers_kept"] = *keepers_kept;
  if (!trajectory.empty()) j["trajectory"] = trajectory;
  if (!note.empty()) j["note"] = note;
  return j.dump();
}

namespace {

double attack_batch_loss(const Model& model, const Tensor& images, const std::vector<int>& labels) {
  NoGradGuard ng;
  Tensor logits = model.classify(model.encode(images));
  return static_cast<double>(cross_entropy(logits, labels).item());
}

}  // namespace

// ---------------------------------------------------------------------------
// PBS

AttackReport pbs_attack(Model& model, const Dataset& attack_batch, const Dataset& heldout,
                        const PbsConfig& cfg) {
  if (!attack_batch.labeled()) throw std::invalid_argument("pbs: attack batch must be labeled");
  // the quantized set is the attack surface; quantize_all_weight_layers gives
  // the canonical full-model search
  if (model.quantized.empty())
    throw std::runtime_error("pbs: no quantized layers (quantize the attack surface first)");

  AttackReport report;
  report.attack_kind = "pbs";
  report.acc_before = evaluate_accuracy(model, heldout, cfg.eval_batch);

  Tensor images = attack_batch.to_tensor();
  std::vector<int> labels(attack_batch.labels.begin(), attack_batch.labels.end());

  std::set<std::pair<std::string, int64_t>> touched;  // (layer, index)
  std::set<std::string> touched_layers;

  double current_loss = attack_batch_loss(model, images, labels);
  double acc = report.acc_before;

  struct Candidate {
    double score = 0.0;
    int64_t index = -1;
    int bit = -1;
  };

  while (report.iterations < cfg.max_flips && acc >= cfg.target_acc) {
    // one gradient pass over the attack batch gives the per-weight
    // sensitivities for every quantized layer at once
    for (auto* p : model.parameters()) p->tensor.zero_grad();
    Tensor loss = cross_entropy(model.classify(model.encode(images)), labels);
    backward(loss);

    std::string best_layer;
    int64_t best_index = -1;
    int best_bit = -1;
    double best_loss = current_loss;

    for (auto& [layer_name, view] : model.quantized) {
      // layers off the classification path (the projection head) get no
      // gradient and can never move the attack loss
      if (!view.param->tensor.has_grad()) continue;
      const auto& grad = view.param->tensor.grad();

      // rank by |g| * |delta w| = |g| * scale * bit value (sign bit: 128)
      std::vector<Candidate> top;
      top.reserve(cfg.trial_k + 1);
      for (int64_t i = 0; i < view.param_count(); ++i) {
        double g = std::abs(static_cast<double>(grad[i]));
        if (g == 0.0) continue;
        for (int bit = 7; bit >= 0; --bit) {
          double score = g * view.scale * static_cast<double>(bit == 7 ? 128 : (1 << bit));
          if (static_cast<int>(top.size()) == cfg.trial_k && score <= top.back().score) break;
          Candidate c{score, i, bit};
          auto pos = std::lower_bound(top.begin(), top.end(), c, [](const Candidate& a, const Candidate& b) {
            return a.score > b.score;
          });
          top.insert(pos, c);
          if (static_cast<int>(top.size()) > cfg.trial_k) top.pop_back();
        }
      }

      // in-layer search: measure the real loss for each trial flip
      for (const auto& c : top) {
        view.flip_bit(c.index, c.bit);
        double trial = attack_batch_loss(model, images, labels);
        view.flip_bit(c.index, c.bit);  // undo
        if (trial > best_loss) {
          best_loss = trial;
          best_layer = layer_name;
          best_index = c.index;
          best_bit = c.bit;
        }
      }
    }

    if (best_index < 0) {
      report.note = "no loss-increasing flip found";
      break;
    }

    // cross-layer search winner: commit
    model.quantized.at(best_layer).flip_bit(best_index, best_bit);
    current_loss = best_loss;
    report.iterations += 1;
    report.bits_flipped += 1;
    touched.insert({best_layer, best_index});
    touched_layers.insert(best_layer);

    acc = evaluate_accuracy(model, heldout, cfg.eval_batch);
    if (std::getenv("CFDR_PBS_DEBUG"))
      std::fprintf(stderr, "pbs[%lld] %s idx=%lld bit=%d loss=%.3f acc=%.3f\n",
                   static_cast<long long>(report.iterations), best_layer.c_str(),
                   static_cast<long long>(best_index), best_bit, current_loss, acc);
  }

  report.params_modified = static_cast<int64_t>(touched.size());
  for (const auto& name : touched_layers)
    report.layers_touched.emplace_back(name, model.quantized.at(name).param_count());
  report.acc_after = acc;
  report.success = acc < cfg.target_acc;
  if (!report.success && report.note.empty()) report.note = "flip cap reached above target accuracy";
  return report;
}

// ---------------------------------------------------------------------------
// FSA

AttackReport fsa_attack(Model& model, const Dataset& constrained, const Dataset& eval,
                        const FsaConfig& cfg) {
  if (cfg.norm != "l0" && cfg.norm != "l2")
    throw std::invalid_argument("fsa: norm must be l0 or l2");
  if (cfg.S <= 0 || cfg.S > cfg.R) throw std::invalid_argument("fsa: need 0 < S <= R");
  if (constrained.size() != cfg.R)
    throw std::invalid_argument("fsa: constrained set has " + std::to_string(constrained.size()) +
                                " images, config says R=" + std::to_string(cfg.R));
  if (!constrained.labeled()) throw std::invalid_argument("fsa: constrained set must be labeled");
  if (static_cast<int>(cfg.target_labels.size()) != cfg.S)
    throw std::invalid_argument("fsa: need exactly S target labels");
  for (int i = 0; i < cfg.S; ++i)
    if (cfg.target_labels[i] == constrained.labels[i])
      throw std::invalid_argument("fsa: target label for image " + std::to_string(i) +
                                  " equals its true label");

  Parameter* param = model.find_parameter(cfg.layer);
  if (!param) throw std::invalid_argument("fsa: unknown layer '" + cfg.layer + "'");

  AttackReport report;
  report.attack_kind = cfg.norm == "l0" ? "fsa_l0" : "fsa_l2";
  report.acc_before = evaluate_accuracy(model, eval);

  const std::vector<float> theta0 = param->tensor.data();
  const int64_t n = static_cast<int64_t>(theta0.size());
  std::vector<float> z(n, 0.0f), u(n, 0.0f);

  // keepers must retain the clean model's own predictions, not the labels
  std::vector<int> original_pred = predict_labels(model, constrained);
  std::vector<int64_t> target_idx(cfg.S), keeper_idx(cfg.R - cfg.S);
  for (int i = 0; i < cfg.S; ++i) target_idx[i] = i;
  for (int i = cfg.S; i < cfg.R; ++i) keeper_idx[i - cfg.S] = i;
  Tensor target_images = constrained.to_tensor(target_idx);
  Tensor keeper_images = constrained.to_tensor(keeper_idx);
  std::vector<int> keeper_labels(original_pred.begin() + cfg.S, original_pred.end());

  const double c = cfg.admm_coupling;
  int64_t keep = cfg.l0_keep > 0 ? cfg.l0_keep : std::max<int64_t>(1, n / 10);

  auto audit = [&]() -> std::pair<bool, bool> {
    std::vector<int> pred = predict_labels(model, constrained);
    bool targets_ok = true, keepers_ok = true;
    for (int i = 0; i < cfg.S; ++i) targets_ok = targets_ok && pred[i] == cfg.target_labels[i];
    for (int i = cfg.S; i < cfg.R; ++i) keepers_ok = keepers_ok && pred[i] == original_pred[i];
    return {targets_ok, keepers_ok};
  };

  const bool debug = std::getenv("CFDR_FSA_DEBUG") != nullptr;
  std::vector<float> theta = theta0;
  bool satisfied = false;
  for (int outer = 0; outer < cfg.max_iters && !satisfied; ++outer) {
    report.iterations = outer + 1;

    // theta step: descend the constraint loss plus the ADMM quadratic.
    // target_weight is per image, so keepers are not drowned out by the
    // much smaller target set.
    const float tw = static_cast<float>(cfg.target_weight * cfg.S) / static_cast<float>(cfg.R);
    const float kw = static_cast<float>(cfg.R - cfg.S) / static_cast<float>(cfg.R);
    for (int inner = 0; inner < cfg.inner_steps; ++inner) {
      param->tensor.data() = theta;
      for (auto* p : model.parameters()) p->tensor.zero_grad();
      Tensor ce_t = cross_entropy(model.classify(model.encode(target_images)), cfg.target_labels);
      Tensor ce_k = cross_entropy(model.classify(model.encode(keeper_images)), keeper_labels);
      Tensor loss = add(scale(ce_t, tw), scale(ce_k, kw));
      backward(loss);
      const auto& g = param->tensor.grad();
      for (int64_t i = 0; i < n; ++i) {
        double quad = c * (static_cast<double>(theta[i]) - theta0[i] - z[i] + u[i]);
        theta[i] -= static_cast<float>(cfg.step_lr * (static_cast<double>(g[i]) + quad));
      }
    }

    // z step: proximal operator of the modification penalty
    std::vector<float> v(n);
    for (int64_t i = 0; i < n; ++i) v[i] = theta[i] - theta0[i] + u[i];
    if (cfg.norm == "l2") {
      float shrink = static_cast<float>(c / (c + 2.0 * cfg.rho));
      for (int64_t i = 0; i < n; ++i) z[i] = shrink * v[i];
    } else {
      std::vector<int64_t> order(n);
      for (int64_t i = 0; i < n; ++i) order[i] = i;
      std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
        return std::abs(v[a]) > std::abs(v[b]);
      });
      std::fill(z.begin(), z.end(), 0.0f);
      for (int64_t i = 0; i < std::min(keep, n); ++i) z[order[i]] = v[order[i]];
    }

    // dual update
    for (int64_t i = 0; i < n; ++i) u[i] += theta[i] - theta0[i] - z[i];

    // audit the candidate solution theta0 + z
    for (int64_t i = 0; i < n; ++i) param->tensor.data()[i] = theta0[i] + z[i];
    auto [targets_ok, keepers_ok] = audit();
    satisfied = targets_ok && keepers_ok;

    if (debug && (outer % 10 == 0 || satisfied)) {
      NoGradGuard ng;
      double ce_t = cross_entropy(model.classify(model.encode(target_images)), cfg.target_labels).item();
      double ce_k = cross_entropy(model.classify(model.encode(keeper_images)), keeper_labels).item();
      double dz = 0.0, du = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        dz = std::max(dz, std::abs(static_cast<double>(z[i])));
        du = std::max(du, std::abs(static_cast<double>(u[i])));
      }
      std::fprintf(stderr, "fsa[%d] ce_t=%.3f ce_k=%.3f max|z|=%.3f max|u|=%.3f t=%d k=%d\n",
                   outer, ce_t, ce_k, dz, du, (int)targets_ok, (int)keepers_ok);
    }
  }

  // install the proximal solution; the working iterate is discarded
  for (int64_t i = 0; i < n; ++i) param->tensor.data()[i] = theta0[i] + z[i];
  auto [targets_ok, keepers_ok] = audit();
  report.targets_hit = targets_ok;
  report.keepers_kept = keepers_ok;
  report.success = targets_ok && keepers_ok;

  report.params_modified = 0;
  for (int64_t i = 0; i < n; ++i)
    if (param->tensor.data()[i] != theta0[i]) ++report.params_modified;
  report.layers_touched.emplace_back(cfg.layer, n);
  report.acc_after = evaluate_accuracy(model, eval);
  if (!report.success) report.note = "constraints not satisfied after max_iters";
  return report;
}

Dataset select_fsa_constrained(const Dataset& pool, const Model& model, int S, int R,
                               uint64_t seed, std::vector<int>& target_labels_out) {
  if (!pool.labeled()) throw std::invalid_argument("select_fsa_constrained: pool must be labeled");
  if (S <= 0 || S > R) throw std::invalid_argument("select_fsa_constrained: need 0 < S <= R");

  std::vector<int> pred = predict_labels(model, pool);
  Rng rng = substream(seed, "fsa_select");
  std::vector<int64_t> order(pool.size());
  for (int64_t i = 0; i < pool.size(); ++i) order[i] = i;
  rng.shuffle(order);

  // S correctly-predicted images of distinct classes
  std::vector<int64_t> targets;
  std::set<int> target_classes;
  for (int64_t i : order) {
    if (static_cast<int>(targets.size()) == S) break;
    int cls = pool.labels[i];
    if (pred[i] != cls || target_classes.count(cls)) continue;
    targets.push_back(i);
    target_classes.insert(cls);
  }
  if (static_cast<int>(targets.size()) < S)
    throw std::runtime_error("select_fsa_constrained: not enough distinct-class images");

  // keepers drawn from the remaining classes only
  std::vector<int64_t> keepers;
  for (int64_t i : order) {
    if (static_cast<int>(keepers.size()) == R - S) break;
    if (target_classes.count(pool.labels[i])) continue;
    keepers.push_back(i);
  }
  if (static_cast<int>(keepers.size()) < R - S)
    throw std::runtime_error("select_fsa_constrained: not enough keeper images");

  // rotate each target's label to another target class
  std::vector<int> classes(target_classes.begin(), target_classes.end());
  target_labels_out.clear();
  for (int64_t idx : targets) {
    int cls = pool.labels[idx];
    size_t pos = std::find(classes.begin(), classes.end(), cls) - classes.begin();
    target_labels_out.push_back(classes[(pos + 1) % classes.size()]);
  }

  std::vector<int64_t> all = targets;
  all.insert(all.end(), keepers.begin(), keepers.end());
  return pool.subset(all);
}

// ---------------------------------------------------------------------------
// GDA

AttackReport gda_attack(Model& model, const Dataset& source_images, const Dataset& eval,
                        const GdaConfig& cfg) {
  if (cfg.target_class < 0 || cfg.target_class >= model.config.num_classes)
    throw std::invalid_argument("gda: target class " + std::to_string(cfg.target_class) +
                                " out of range [0," + std::to_string(model.config.num_classes) + ")");
  Parameter* param = model.find_parameter(cfg.layer);
  if (!param) throw std::invalid_argument("gda: unknown layer '" + cfg.layer + "'");
  if (source_images.size() == 0) throw std::invalid_argument("gda: empty source set");

  AttackReport report;
  report.attack_kind = "gda";
  report.acc_before = evaluate_accuracy(model, eval);

  Tensor images = source_images.to_tensor();
  const int64_t b = source_images.size();
  const int64_t classes = model.config.num_classes;
  std::vector<float> mask(static_cast<size_t>(b * classes), 0.0f);
  for (int64_t i = 0; i < b; ++i)
    mask[i * classes + cfg.target_class] = 1.0f / static_cast<float>(b);
  Tensor mask_t = Tensor::from_data({b, classes}, std::move(mask));

  const std::vector<float> theta0 = param->tensor.data();
  const int64_t n = static_cast<int64_t>(theta0.size());

  auto penalty = [&](const std::vector<float>& w) {
    double s = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      double d = static_cast<double>(w[i]) - theta0[i];
      s += d * d;
    }
    return cfg.l2_coef * s;
  };
  auto mean_target_logit = [&]() {
    NoGradGuard ng;
    Tensor logits = model.classify(model.encode(images));
    double s = 0.0;
    for (int64_t i = 0; i < b; ++i)
      s += static_cast<double>(logits.data()[i * classes + cfg.target_class]);
    return s / static_cast<double>(b);
  };
  auto all_target = [&]() {
    std::vector<int> pred = predict_labels(model, source_images);
    for (int p : pred)
      if (p != cfg.target_class) return false;
    return true;
  };

  double logit = mean_target_logit();
  double objective = logit - penalty(param->tensor.data());
  double lr_work = cfg.lr;
  const double lr_floor = cfg.lr * 0x1.0p-24;

  for (int iter = 0; iter < cfg.max_iters; ++iter) {
    if (all_target()) break;

    for (auto* p : model.parameters()) p->tensor.zero_grad();
    Tensor obj_t = sum_all(mul(model.classify(model.encode(images)), mask_t));
    backward(obj_t);
    const auto& g = param->tensor.grad();

    std::vector<float> saved = param->tensor.data();
    bool accepted = false;
    while (lr_work >= lr_floor) {
      auto& w = param->tensor.data();
      for (int64_t i = 0; i < n; ++i) {
        double ascent = static_cast<double>(g[i]) -
                        2.0 * cfg.l2_coef * (static_cast<double>(saved[i]) - theta0[i]);
        w[i] = saved[i] + static_cast<float>(lr_work * ascent);
      }
      double new_logit = mean_target_logit();
      double new_objective = new_logit - penalty(w);
      if (new_objective > objective && new_logit > logit) {
        objective = new_objective;
        logit = new_logit;
        report.trajectory.push_back(logit);
        report.iterations += 1;
        accepted = true;
        break;
      }
      param->tensor.data() = saved;
      lr_work *= 0.5;
    }
    if (!accepted) {
      report.note = "step size exhausted";
      break;
    }
  }

  report.success = all_target();
  report.params_modified = 0;
  for (int64_t i = 0; i < n; ++i)
    if (param->tensor.data()[i] != theta0[i]) ++report.params_modified;
  report.layers_touched.emplace_back(cfg.layer, n);
  report.acc_after = evaluate_accuracy(model, eval);
  return report;
}

// ---------------------------------------------------------------------------
// random bit flips

AttackReport random_bit_flip(Model& model, const std::string& layer, int64_t n_bits, uint64_t seed,
                             const Dataset& eval, bool msb_only) {
  auto it = model.quantized.find(layer);
  if (it == model.quantized.end())
    throw std::invalid_argument("random_bit_flip: layer '" + layer + "' is not quantized");
  QuantizedLayerView& view = it->second;
  int64_t available = msb_only ? view.param_count() : view.param_count() * 8;
  if (n_bits < 0 || n_bits > available)
    throw std::invalid_argument("random_bit_flip: n_bits " + std::to_string(n_bits) +
                                " exceeds available " + std::to_string(available));

  AttackReport report;
  report.attack_kind = "random_bit_flip";
  report.acc_before = evaluate_accuracy(model, eval);

  Rng rng = substream(seed, "random_flip");
  std::set<std::pair<int64_t, int>> chosen;
  std::set<int64_t> indices;
  while (static_cast<int64_t>(chosen.size()) < n_bits) {
    int64_t idx = static_cast<int64_t>(rng.below(static_cast<uint64_t>(view.param_count())));
    int bit = msb_only ? 7 : static_cast<int>(rng.below(8));
    if (chosen.insert({idx, bit}).second) {
      view.flip_bit(idx, bit);
      indices.insert(idx);
    }
  }

  report.bits_flipped = n_bits;
  report.iterations = n_bits;
  report.params_modified = static_cast<int64_t>(indices.size());
  report.layers_touched.emplace_back(layer, view.param_count());
  report.acc_after = evaluate_accuracy(model, eval);
  report.success = true;
  return report;
}

}  // namespace cfdr
