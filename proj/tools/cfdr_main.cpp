// cfdr: train / attack / detect / recover / experiment / report
//
// exit codes: 0 ok, 1 usage, 2 data error, 3 experiment failure

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "cfdr/attacks.hpp"
#include "cfdr/contrastive.hpp"
#include "cfdr/dataset.hpp"
#include "cfdr/detector.hpp"
#include "cfdr/experiment.hpp"
#include "cfdr/model.hpp"
#include "cfdr/recovery.hpp"
#include "cfdr/rng.hpp"
#include "cfdr/sha256.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace cfdr;

namespace {

struct CommonOpts {
  uint64_t seed = 0;
  std::string data_dir;
  std::string out = "out";
  std::string config_path;
  std::string dataset = "synthetic-blobs";
};

ExperimentConfig resolve_config(const CommonOpts& common, CLI::App* sub) {
  ExperimentConfig cfg;
  if (!common.config_path.empty()) cfg = ExperimentConfig::from_json_file(common.config_path);
  if (sub->count("--seed") || common.config_path.empty()) cfg.seed = common.seed;
  if (sub->count("--data-dir")) cfg.data_dir = common.data_dir;
  if (sub->count("--out") || common.config_path.empty()) cfg.out_dir = common.out;
  if (sub->count("--dataset")) cfg.dataset = common.dataset;
  return cfg;
}

void add_common(CLI::App* sub, CommonOpts& common) {
  sub->add_option("--seed", common.seed, "root seed for all randomness");
  sub->add_option("--data-dir", common.data_dir, "cifar10 binary directory");
  sub->add_option("--out", common.out, "output directory");
  sub->add_option("--config", common.config_path, "JSON experiment config file");
  sub->add_option("--dataset", common.dataset, "synthetic-blobs | cifar10-binary");
}

Dataset make_eval_data(const ExperimentConfig& cfg) {
  if (cfg.dataset == "synthetic-blobs") {
    uint64_t data_seed = substream(cfg.seed, "data").next_u64();
    Dataset all =
        make_synthetic_blobs(cfg.train_size + cfg.test_size + cfg.recover_size, 10, data_seed);
    std::vector<int64_t> idx;
    for (int64_t i = cfg.train_size; i < cfg.train_size + cfg.test_size; ++i) idx.push_back(i);
    Dataset test = all.subset(idx);
    test.split = "test";
    return test;
  }
  return load_cifar10(cfg.data_dir, "test");
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << content;
}

int cmd_train(const CommonOpts& common, CLI::App* sub, int epochs_a, int epochs_b,
              const std::string& preset) {
  ExperimentConfig cfg = resolve_config(common, sub);
  if (sub->count("--epochs-a")) cfg.phase_a_epochs = epochs_a;
  if (sub->count("--epochs-b")) cfg.phase_b_epochs = epochs_b;
  if (sub->count("--preset")) cfg.preset = preset;

  fs::create_directories(cfg.out_dir);
  Dataset train, test;
  if (cfg.dataset == "synthetic-blobs") {
    uint64_t data_seed = substream(cfg.seed, "data").next_u64();
    Dataset all =
        make_synthetic_blobs(cfg.train_size + cfg.test_size + cfg.recover_size, 10, data_seed);
    std::vector<int64_t> idx(cfg.train_size);
    for (int64_t i = 0; i < cfg.train_size; ++i) idx[i] = i;
    train = all.subset(idx);
    test = make_eval_data(cfg);
  } else {
    train = load_cifar10(cfg.data_dir, "train");
    if (train.size() > cfg.train_size) {
      std::vector<int64_t> idx(cfg.train_size);
      for (int64_t i = 0; i < cfg.train_size; ++i) idx[i] = i;
      train = train.subset(idx);
    }
    test = load_cifar10(cfg.data_dir, "test");
  }

  ModelConfig mc;
  mc.preset = cfg.preset;
  mc.seed = substream(cfg.seed, "init").next_u64();
  Model model = build_model(mc);

  AugmentationConfig aug;
  aug.seed = substream(cfg.seed, "augment").next_u64();
  LossConfig loss;
  loss.temperature = cfg.temperature;
  OptimizerConfig opt_a;
  opt_a.lr = cfg.lr_phase_a;
  OptimizerConfig opt_b;
  opt_b.lr = cfg.lr_phase_b;

  TrainLog log_a = train_phase_a(model, train.without_labels(), cfg.phase_a_epochs, cfg.batch, aug,
                                 loss, opt_a, substream(cfg.seed, "phase_a").next_u64());
  TrainLog log_b = train_phase_b(model, train, cfg.phase_b_epochs, cfg.batch, opt_b,
                                 substream(cfg.seed, "phase_b").next_u64());

  DetectorConfig det;
  det.batch = cfg.batch;
  det.aug = aug;
  det.aug.seed = substream(cfg.seed, "detect_aug").next_u64();
  det.loss = loss;
  ReferenceProfile profile = build_reference(model, test.without_labels(), cfg.detect_samples, det,
                                             substream(cfg.seed, "reference").next_u64());

  fs::path out(cfg.out_dir);
  save_checkpoint_file(model, (out / "clean.ckpt").string(), profile.to_json());
  write_file((out / "train_log_a.csv").string(), log_a.to_csv());
  write_file((out / "train_log_b.csv").string(), log_b.to_csv());
  write_file((out / "profile.json").string(), profile.to_json() + "\n");

  double acc = evaluate_accuracy(model, test, cfg.batch);
  std::printf("trained %s: test accuracy %.4f, l_c %.4f, sigma_c %.4f\n", cfg.preset.c_str(), acc,
              profile.l_c, profile.sigma_c);
  std::printf("checkpoint: %s\n", (out / "clean.ckpt").string().c_str());
  return 0;
}

int cmd_attack(const CommonOpts& common, CLI::App* sub, const std::string& ckpt,
               const std::string& kind, const std::string& layer, int64_t n_bits) {
  ExperimentConfig cfg = resolve_config(common, sub);
  Model model = load_checkpoint_file(ckpt);
  Dataset test = make_eval_data(cfg);
  uint64_t attack_seed = substream(cfg.seed, "attack_" + kind).next_u64();

  AttackReport report;
  if (kind == "pbs") {
    model.quantize_all_weight_layers();
    std::vector<int64_t> bidx(cfg.batch);
    for (int i = 0; i < cfg.batch; ++i) bidx[i] = i;
    PbsConfig pc;
    pc.max_flips = cfg.pbs_max_flips;
    report = pbs_attack(model, test.subset(bidx), test, pc);
  } else if (kind == "fsa_l0" || kind == "fsa_l2") {
    FsaConfig fc;
    fc.norm = kind == "fsa_l0" ? "l0" : "l2";
    fc.max_iters = cfg.fsa_max_iters;
    if (sub->count("--layer")) fc.layer = layer;
    Dataset constrained = select_fsa_constrained(test, model, fc.S, fc.R, attack_seed,
                                                 fc.target_labels);
    report = fsa_attack(model, constrained, test, fc);
  } else if (kind == "gda") {
    GdaConfig gc;
    gc.layer = sub->count("--layer") ? layer : cfg.gda_layer;
    gc.max_iters = cfg.gda_max_iters;
    gc.lr = 5e-2;
    gc.l2_coef = 1e-4;
    gc.target_class = static_cast<int>(substream(cfg.seed, "gda_target").below(10));
    std::vector<int64_t> sidx;
    for (int64_t i = 0; i < test.size() && sidx.size() < 32; ++i)
      if (test.labels[i] != gc.target_class) sidx.push_back(i);
    report = gda_attack(model, test.subset(sidx), test, gc);
  } else if (kind == "random_flip") {
    std::string target_layer = sub->count("--layer") ? layer : "encoder.conv1.weight";
    model.quantize_layer(target_layer);
    report = random_bit_flip(model, target_layer, n_bits, attack_seed, test, /*msb_only=*/true);
  } else {
    throw ExperimentError("unknown attack kind '" + kind + "'");
  }

  fs::create_directories(cfg.out_dir);
  fs::path out(cfg.out_dir);
  save_checkpoint_file(model, (out / ("attacked_" + kind + ".ckpt")).string());
  write_file((out / ("attack_report_" + kind + ".json")).string(), report.to_json() + "\n");
  std::printf("%s\n", report.to_json().c_str());
  return 0;
}

int cmd_detect(const CommonOpts& common, CLI::App* sub, const std::string& clean_ckpt,
               const std::string& target_ckpt, double delta, int n_batches) {
  ExperimentConfig cfg = resolve_config(common, sub);
  std::string profile_json;
  load_checkpoint_file(clean_ckpt, &profile_json);
  if (profile_json.empty())
    throw ExperimentError("clean checkpoint carries no reference profile (run `cfdr train`)");
  ReferenceProfile profile = ReferenceProfile::from_json(profile_json);

  Model target = load_checkpoint_file(target_ckpt);
  Dataset test = make_eval_data(cfg);

  DetectorConfig det;
  det.batch = cfg.batch;
  det.aug.seed = substream(cfg.seed, "detect_aug").next_u64();
  det.loss.temperature = cfg.temperature;

  double d = sub->count("--delta") ? delta : default_delta(profile);
  DetectionVerdict verdict = detect(profile, target, test.without_labels(), d, n_batches, det,
                                    substream(cfg.seed, "detect").next_u64());
  std::printf("%s\n", verdict.to_json().c_str());
  return 0;
}

int cmd_recover(const CommonOpts& common, CLI::App* sub, const std::string& clean_ckpt,
                const std::string& target_ckpt, bool labeled) {
  ExperimentConfig cfg = resolve_config(common, sub);
  std::string profile_json;
  Model clean = load_checkpoint_file(clean_ckpt, &profile_json);
  if (profile_json.empty())
    throw ExperimentError("clean checkpoint carries no reference profile (run `cfdr train`)");
  ReferenceProfile profile = ReferenceProfile::from_json(profile_json);

  Model target = load_checkpoint_file(target_ckpt);
  Dataset test = make_eval_data(cfg);

  // recovery pool disjoint from the eval subset, same provenance
  Dataset recover_pool;
  if (cfg.dataset == "synthetic-blobs") {
    uint64_t data_seed = substream(cfg.seed, "data").next_u64();
    Dataset all =
        make_synthetic_blobs(cfg.train_size + cfg.test_size + cfg.recover_size, 10, data_seed);
    std::vector<int64_t> idx;
    for (int64_t i = cfg.train_size + cfg.test_size; i < all.size(); ++i) idx.push_back(i);
    recover_pool = all.subset(idx);
  } else {
    Dataset test_full = load_cifar10(cfg.data_dir, "test");
    std::vector<int64_t> idx;
    for (int64_t i = cfg.test_size;
         i < std::min<int64_t>(test_full.size(), cfg.test_size + cfg.recover_size); ++i)
      idx.push_back(i);
    recover_pool = test_full.subset(idx);
  }

  RecoveryConfig rc;
  rc.labeled = labeled;
  rc.data_budget = cfg.recover_size;
  rc.batch = cfg.batch;
  rc.epoch_cap = cfg.recovery_epoch_cap;
  rc.patience = cfg.recovery_patience;
  rc.min_rel_improve = cfg.recovery_min_rel_improve;
  rc.aug.seed = substream(cfg.seed, "detect_aug").next_u64();
  rc.loss.temperature = cfg.temperature;
  rc.opt_a.lr = cfg.lr_phase_a / 10.0f;
  rc.opt_b.lr = cfg.lr_phase_b / 10.0f;
  rc.ref_contrastive = profile.l_c + 2.0 * profile.sigma_c;
  rc.ref_cross_entropy = evaluate_cross_entropy(clean, test, cfg.batch);
  rc.seed = substream(cfg.seed, "recover").next_u64();

  RecoveryReport report =
      recover(target, labeled ? recover_pool : recover_pool.without_labels(), test, rc);

  fs::create_directories(cfg.out_dir);
  fs::path out(cfg.out_dir);
  save_checkpoint_file(target, (out / "recovered.ckpt").string());
  write_file((out / "recovery_report.json").string(), report.to_json() + "\n");
  write_file((out / "recovery_trajectory.csv").string(), report.trajectory_csv());
  std::printf("%s\n", report.to_json().c_str());
  return 0;
}

int cmd_experiment(const CommonOpts& common, CLI::App* sub) {
  ExperimentConfig cfg = resolve_config(common, sub);
  ExperimentResult res = run_experiment(cfg);
  std::printf("experiment complete: clean accuracy %.4f, l_c %.4f, sigma_c %.4f\n", res.clean_acc,
              res.profile.l_c, res.profile.sigma_c);
  std::printf("artifacts in %s (%zu files, see manifest.json)\n", cfg.out_dir.c_str(),
              res.artifacts.size());
  return 0;
}

int cmd_report(const std::string& dir) {
  fs::path out(dir);
  std::ifstream mf(out / "manifest.json");
  if (!mf) throw ExperimentError("no manifest.json under " + dir + " (run `cfdr experiment`)");
  nlohmann::json manifest = nlohmann::json::parse(mf);

  std::ifstream sf(out / "summary.json");
  if (sf) {
    nlohmann::json summary = nlohmann::json::parse(sf);
    std::printf("clean accuracy: %.4f\n", summary.value("clean_acc", 0.0));
    std::printf("reference loss l_c: %.4f (sigma_c %.4f, delta %.4f)\n", summary.value("l_c", 0.0),
                summary.value("sigma_c", 0.0), summary.value("default_delta", 0.0));
  }

  std::ifstream rf(out / "recovery.csv");
  if (rf) {
    std::printf("\nrecovery table (%s):\n", (out / "recovery.csv").string().c_str());
    std::string line;
    while (std::getline(rf, line)) std::printf("  %s\n", line.c_str());
  }

  std::printf("\n%zu artifacts verified in manifest\n", manifest.size());
  for (auto it = manifest.begin(); it != manifest.end(); ++it) {
    std::ifstream f(out / it.key(), std::ios::binary);
    std::string body((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    bool ok = f && sha256_hex(body) == it.value().get<std::string>();
    if (!ok) {
      std::printf("  DIGEST MISMATCH: %s\n", it.key().c_str());
      return 3;
    }
  }
  std::printf("all digests match\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"contrastive-loss based fault-injection detection and recovery testbed"};
  app.require_subcommand(1);

  CommonOpts common;

  auto* train = app.add_subcommand("train", "train the two-phase model and build its profile");
  int epochs_a = 50, epochs_b = 20;
  std::string preset = "tiny";
  add_common(train, common);
  train->add_option("--epochs-a", epochs_a, "contrastive epochs");
  train->add_option("--epochs-b", epochs_b, "fine-tuning epochs");
  train->add_option("--preset", preset, "tiny | resnet-lite");

  auto* attack = app.add_subcommand("attack", "tamper with a checkpoint's parameters");
  std::string ckpt, kind = "pbs", layer;
  int64_t n_bits = 64;
  add_common(attack, common);
  attack->add_option("--ckpt", ckpt, "input checkpoint")->required();
  attack->add_option("--kind", kind, "pbs | fsa_l0 | fsa_l2 | gda | random_flip");
  attack->add_option("--layer", layer, "layer to attack (fsa/gda/random_flip)");
  attack->add_option("--n-bits", n_bits, "bits to flip (random_flip)");

  auto* det = app.add_subcommand("detect", "compare a model's loss against the clean profile");
  std::string clean_ckpt, target_ckpt;
  double delta = 0.0;
  int n_batches = 1;
  add_common(det, common);
  det->add_option("--clean", clean_ckpt, "clean checkpoint with embedded profile")->required();
  det->add_option("--target", target_ckpt, "checkpoint to test")->required();
  det->add_option("--delta", delta, "fault tolerance (default: max(3 sigma, 0.05 l_c))");
  det->add_option("--n-batches", n_batches, "batches to average");

  auto* rec = app.add_subcommand("recover", "retrain a flagged model on the recovery budget");
  bool labeled = false;
  add_common(rec, common);
  rec->add_option("--clean", clean_ckpt, "clean checkpoint with embedded profile")->required();
  rec->add_option("--target", target_ckpt, "attacked checkpoint")->required();
  rec->add_flag("--labeled", labeled, "use labels (runs the fine-tuning phase too)");

  auto* exp = app.add_subcommand("experiment", "full pipeline with artifacts and manifest");
  add_common(exp, common);

  auto* rep = app.add_subcommand("report", "summarize and verify an experiment directory");
  std::string report_dir = "out";
  rep->add_option("--dir", report_dir, "experiment output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (train->parsed()) return cmd_train(common, train, epochs_a, epochs_b, preset);
    if (attack->parsed()) return cmd_attack(common, attack, ckpt, kind, layer, n_bits);
    if (det->parsed()) return cmd_detect(common, det, clean_ckpt, target_ckpt, delta, n_batches);
    if (rec->parsed()) return cmd_recover(common, rec, clean_ckpt, target_ckpt, labeled);
    if (exp->parsed()) return cmd_experiment(common, exp);
    if (rep->parsed()) return cmd_report(report_dir);
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
  return 1;
}
