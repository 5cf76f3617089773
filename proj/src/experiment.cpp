#include "cfdr/experiment.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include "cfdr/rng.hpp"
#include "cfdr/sha256.hpp"
#include "json.hpp"

namespace cfdr {

namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

std::string ExperimentConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["out_dir"] = out_dir;
  j["dataset"] = dataset;
  j["data_dir"] = data_dir;
  j["preset"] = preset;
  j["scale"] = scale;
  j["train_size"] = train_size;
  j["test_size"] = test_size;
  j["recover_size"] = recover_size;
  j["batch"] = batch;
  j["phase_a_epochs"] = phase_a_epochs;
  j["phase_b_epochs"] = phase_b_epochs;
  j["detect_samples"] = detect_samples;
  j["attack_detect_samples"] = attack_detect_samples;
  j["attacks"] = attacks;
  j["temperature"] = temperature;
  j["lr_phase_a"] = lr_phase_a;
  j["lr_phase_b"] = lr_phase_b;
  j["recovery_epoch_cap"] = recovery_epoch_cap;
  j["recovery_patience"] = recovery_patience;
  j["recovery_min_rel_improve"] = recovery_min_rel_improve;
  j["pbs_max_flips"] = pbs_max_flips;
  j["fsa_max_iters"] = fsa_max_iters;
  j["gda_max_iters"] = gda_max_iters;
  j["gda_layer"] = gda_layer;
  return j.dump(2);
}

ExperimentConfig ExperimentConfig::from_json(const std::string& js) {
  json j;
  try {
    j = json::parse(js);
  } catch (const json::parse_error& e) {
    throw ExperimentError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  c.seed = j.value("seed", c.seed);
  c.out_dir = j.value("out_dir", c.out_dir);
  c.dataset = j.value("dataset", c.dataset);
  c.data_dir = j.value("data_dir", c.data_dir);
  c.preset = j.value("preset", c.preset);
  c.scale = j.value("scale", c.scale);
  c.train_size = j.value("train_size", c.train_size);
  c.test_size = j.value("test_size", c.test_size);
  c.recover_size = j.value("recover_size", c.recover_size);
  c.batch = j.value("batch", c.batch);
  c.phase_a_epochs = j.value("phase_a_epochs", c.phase_a_epochs);
  c.phase_b_epochs = j.value("phase_b_epochs", c.phase_b_epochs);
  c.detect_samples = j.value("detect_samples", c.detect_samples);
  c.attack_detect_samples = j.value("attack_detect_samples", c.attack_detect_samples);
  c.attacks = j.value("attacks", c.attacks);
  c.temperature = j.value("temperature", c.temperature);
  c.lr_phase_a = j.value("lr_phase_a", c.lr_phase_a);
  c.lr_phase_b = j.value("lr_phase_b", c.lr_phase_b);
  c.recovery_epoch_cap = j.value("recovery_epoch_cap", c.recovery_epoch_cap);
  c.recovery_patience = j.value("recovery_patience", c.recovery_patience);
  c.recovery_min_rel_improve = j.value("recovery_min_rel_improve", c.recovery_min_rel_improve);
  c.pbs_max_flips = j.value("pbs_max_flips", c.pbs_max_flips);
  c.fsa_max_iters = j.value("fsa_max_iters", c.fsa_max_iters);
  c.gda_max_iters = j.value("gda_max_iters", c.gda_max_iters);
  c.gda_layer = j.value("gda_layer", c.gda_layer);
  c.apply_scale_preset();
  return c;
}

ExperimentConfig ExperimentConfig::from_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ExperimentError("cannot open config file " + path);
  std::string body((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return from_json(body);
}

void ExperimentConfig::apply_scale_preset() {
  if (scale == "full") {
    // the original setting: phase (a) 1000 epochs, phase (b) 100 epochs;
    // kept as a named preset for anyone with the compute budget
    phase_a_epochs = 1000;
    phase_b_epochs = 100;
  } else if (scale != "desk") {
    throw ExperimentError("unknown scale preset '" + scale + "' (expected desk or full)");
  }
}

namespace {

struct ArtifactWriter {
  fs::path dir;
  std::map<std::string, std::string> digests;  // name -> sha256

  explicit ArtifactWriter(const std::string& out_dir) : dir(out_dir) {
    fs::create_directories(dir);
  }

  void write(const std::string& name, const std::string& content) {
    fs::path p = dir / name;
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw ExperimentError("cannot write artifact " + p.string());
    f.write(content.data(), static_cast<std::streamsize>(content.size()));
    digests[name] = sha256_hex(content);
  }

  void write(const std::string& name, const std::vector<uint8_t>& content) {
    write(name, std::string(content.begin(), content.end()));
  }

  void finish_manifest() {
    json j;
    for (const auto& [name, digest] : digests) j[name] = digest;
    fs::path p = dir / "manifest.json";
    std::ofstream f(p, std::ios::trunc);
    f << j.dump(2) << "\n";
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [name, digest] : digests) out.push_back(name);
    return out;
  }
};

std::string format_double(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

struct Splits {
  Dataset train, test, recover_set;
};

Splits prepare_data(const ExperimentConfig& cfg) {
  Splits s;
  if (cfg.dataset == "synthetic-blobs") {
    uint64_t data_seed = substream(cfg.seed, "data").next_u64();
    Dataset all =
        make_synthetic_blobs(cfg.train_size + cfg.test_size + cfg.recover_size, 10, data_seed);
    std::vector<int64_t> idx(all.size());
    for (int64_t i = 0; i < all.size(); ++i) idx[i] = i;
    s.train = all.subset({idx.begin(), idx.begin() + cfg.train_size});
    s.test = all.subset({idx.begin() + cfg.train_size, idx.begin() + cfg.train_size + cfg.test_size});
    s.recover_set = all.subset({idx.begin() + cfg.train_size + cfg.test_size, idx.end()});
  } else if (cfg.dataset == "cifar10-binary") {
    Dataset train_full = load_cifar10(cfg.data_dir, "train");
    Dataset test_full = load_cifar10(cfg.data_dir, "test");
    if (train_full.size() < cfg.train_size)
      throw ExperimentError("cifar10 train split smaller than train_size");
    // recovery images default to the test split, disjoint from the
    // detection/evaluation subset
    if (test_full.size() < cfg.test_size + cfg.recover_size)
      throw ExperimentError("cifar10 test split smaller than test_size + recover_size");
    Rng rng = substream(cfg.seed, "data");
    std::vector<int64_t> tr(train_full.size());
    for (int64_t i = 0; i < train_full.size(); ++i) tr[i] = i;
    rng.shuffle(tr);
    s.train = train_full.subset({tr.begin(), tr.begin() + cfg.train_size});
    std::vector<int64_t> te(test_full.size());
    for (int64_t i = 0; i < test_full.size(); ++i) te[i] = i;
    rng.shuffle(te);
    s.test = test_full.subset({te.begin(), te.begin() + cfg.test_size});
    s.recover_set = test_full.subset({te.begin() + cfg.test_size,
                                      te.begin() + cfg.test_size + cfg.recover_size});
  } else {
    throw ExperimentError("unknown dataset '" + cfg.dataset + "'");
  }
  s.test.split = "test";
  s.recover_set.split = "test";
  return s;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  ArtifactWriter out(cfg.out_dir);
  std::vector<std::pair<std::string, double>> timings;
  auto timed = [&timings](const std::string& name, auto&& fn) {
    auto t0 = Clock::now();
    fn();
    timings.emplace_back(name, std::chrono::duration<double, std::milli>(Clock::now() - t0).count());
  };

  out.write("config.json", cfg.to_json() + "\n");

  Splits data;
  timed("data", [&] { data = prepare_data(cfg); });

  // train
  ModelConfig mc;
  mc.preset = cfg.preset;
  mc.seed = substream(cfg.seed, "init").next_u64();
  Model model = build_model(mc);

  AugmentationConfig aug;
  aug.seed = substream(cfg.seed, "augment").next_u64();
  LossConfig loss_cfg;
  loss_cfg.temperature = cfg.temperature;
  OptimizerConfig opt_a;
  opt_a.lr = cfg.lr_phase_a;
  OptimizerConfig opt_b;
  opt_b.lr = cfg.lr_phase_b;

  TrainLog log_a, log_b;
  timed("phase_a", [&] {
    log_a = train_phase_a(model, data.train.without_labels(), cfg.phase_a_epochs, cfg.batch, aug,
                          loss_cfg, opt_a, substream(cfg.seed, "phase_a").next_u64());
  });
  timed("phase_b", [&] {
    log_b = train_phase_b(model, data.train, cfg.phase_b_epochs, cfg.batch, opt_b,
                          substream(cfg.seed, "phase_b").next_u64());
  });
  out.write("train_log_a.csv", log_a.to_csv(/*include_wall_ms=*/false));
  out.write("train_log_b.csv", log_b.to_csv(/*include_wall_ms=*/false));

  ExperimentResult result;
  result.clean_acc = evaluate_accuracy(model, data.test, cfg.batch);

  // reference profile + clean detection samples
  DetectorConfig det;
  det.batch = cfg.batch;
  det.aug = aug;
  det.aug.seed = substream(cfg.seed, "detect_aug").next_u64();
  det.loss = loss_cfg;

  std::vector<double> clean_samples;
  timed("reference", [&] {
    result.profile = build_reference(model, data.test.without_labels(), cfg.detect_samples, det,
                                     substream(cfg.seed, "reference").next_u64(), &clean_samples);
  });
  out.write("profile.json", result.profile.to_json() + "\n");
  out.write("clean.ckpt", save_checkpoint(model, result.profile.to_json()));

  std::string detect_csv = "model,sample_index,loss\n";
  for (size_t i = 0; i < clean_samples.size(); ++i)
    detect_csv += "clean," + std::to_string(i) + "," + format_double(clean_samples[i]) + "\n";

  // attacks, each on its own clone of the clean model
  double ce_c = evaluate_cross_entropy(model, data.train, cfg.batch);
  std::string recovery_csv =
      "attack,param_count,acc_after_attack,unlabeled_acc,unlabeled_epochs,labeled_acc,"
      "labeled_epochs\n";

  for (const auto& kind : cfg.attacks) {
    Model attacked = model.clone();
    AttackReport report;
    uint64_t attack_seed = substream(cfg.seed, "attack_" + kind).next_u64();

    timed("attack_" + kind, [&] {
      if (kind == "pbs") {
        attacked.quantize_all_weight_layers();
        std::vector<int64_t> bidx(cfg.batch);
        for (int i = 0; i < cfg.batch; ++i) bidx[i] = i;
        PbsConfig pc;
        pc.max_flips = cfg.pbs_max_flips;
        report = pbs_attack(attacked, data.test.subset(bidx), data.test, pc);
      } else if (kind == "fsa_l0" || kind == "fsa_l2") {
        FsaConfig fc;
        fc.norm = kind == "fsa_l0" ? "l0" : "l2";
        fc.max_iters = cfg.fsa_max_iters;
        Dataset constrained =
            select_fsa_constrained(data.test, attacked, fc.S, fc.R, attack_seed, fc.target_labels);
        report = fsa_attack(attacked, constrained, data.test, fc);
      } else if (kind == "gda") {
        GdaConfig gc;
        gc.layer = cfg.gda_layer;
        gc.max_iters = cfg.gda_max_iters;
        gc.lr = 5e-2;
        gc.l2_coef = 1e-4;
        Rng rng = substream(cfg.seed, "gda_target");
        gc.target_class = static_cast<int>(rng.below(10));
        std::vector<int64_t> sidx;
        for (int64_t i = 0; i < data.test.size() && sidx.size() < 32; ++i)
          if (data.test.labels[i] != gc.target_class) sidx.push_back(i);
        report = gda_attack(attacked, data.test.subset(sidx), data.test, gc);
      } else {
        throw ExperimentError("unknown attack kind '" + kind + "'");
      }
    });

    out.write("attacked_" + kind + ".ckpt", save_checkpoint(attacked));
    out.write("attack_report_" + kind + ".json", report.to_json() + "\n");

    timed("detect_samples_" + kind, [&] {
      for (int i = 0; i < cfg.attack_detect_samples; ++i) {
        double l_d = draw_and_sample(attacked, data.test.without_labels(), det,
                                     substream(cfg.seed, "detect_csv_" + kind).next_u64(),
                                     "detect", i);
        detect_csv += kind + "," + std::to_string(i) + "," + format_double(l_d) + "\n";
      }
    });

    // detection verdict for the record
    DetectionVerdict verdict =
        detect(result.profile, attacked, data.test.without_labels(), default_delta(result.profile),
               1, det, substream(cfg.seed, "verdict_" + kind).next_u64());
    out.write("verdict_" + kind + ".json", verdict.to_json() + "\n");

    // recovery, unlabeled then labeled, each from the attacked state
    RecoveryConfig rc;
    rc.data_budget = cfg.recover_size;
    rc.batch = cfg.batch;
    rc.epoch_cap = cfg.recovery_epoch_cap;
    rc.patience = cfg.recovery_patience;
    rc.min_rel_improve = cfg.recovery_min_rel_improve;
    rc.aug = det.aug;
    rc.loss = loss_cfg;
    rc.opt_a.lr = cfg.lr_phase_a / 10.0f;
    rc.opt_b.lr = cfg.lr_phase_b / 10.0f;
    rc.ref_contrastive = result.profile.l_c + 2.0 * result.profile.sigma_c;
    rc.ref_cross_entropy = ce_c;
    rc.seed = substream(cfg.seed, "recover_" + kind).next_u64();

    RecoveryReport unlabeled_rep, labeled_rep;
    timed("recover_unlabeled_" + kind, [&] {
      Model victim = attacked.clone();
      unlabeled_rep = recover(victim, data.recover_set.without_labels(), data.test, rc);
    });
    timed("recover_labeled_" + kind, [&] {
      Model victim = attacked.clone();
      RecoveryConfig lrc = rc;
      lrc.labeled = true;
      labeled_rep = recover(victim, data.recover_set, data.test, lrc);
    });
    out.write("recovery_report_" + kind + "_unlabeled.json", unlabeled_rep.to_json() + "\n");
    out.write("recovery_report_" + kind + "_labeled.json", labeled_rep.to_json() + "\n");

    int64_t param_count = 0;
    for (const auto& [name, count] : report.layers_touched) param_count += count;
    recovery_csv += kind + "," + std::to_string(param_count) + "," +
                    format_double(report.acc_after) + "," + format_double(unlabeled_rep.acc_after) +
                    "," + std::to_string(unlabeled_rep.epochs_used) + "," +
                    format_double(labeled_rep.acc_after) + "," +
                    std::to_string(labeled_rep.epochs_used) + "\n";
  }

  out.write("detection_samples.csv", detect_csv);
  out.write("recovery.csv", recovery_csv);

  json summary;
  summary["clean_acc"] = result.clean_acc;
  summary["l_c"] = result.profile.l_c;
  summary["sigma_c"] = result.profile.sigma_c;
  summary["default_delta"] = default_delta(result.profile);
  out.write("summary.json", summary.dump(2) + "\n");

  // timings go to a separate file so the manifest-covered artifacts stay
  // byte-identical across reruns
  std::string timing_csv = "stage,wall_ms\n";
  for (const auto& [name, ms] : timings) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3f", ms);
    timing_csv += name + "," + buf + "\n";
  }
  {
    std::ofstream f(fs::path(cfg.out_dir) / "timing.csv", std::ios::trunc);
    f << timing_csv;
  }

  out.finish_manifest();
  result.artifacts = out.names();
  return result;
}

}  // namespace cfdr
