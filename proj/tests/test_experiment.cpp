#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "cfdr/experiment.hpp"
#include "cfdr/sha256.hpp"
#include "json.hpp"

using namespace cfdr;
namespace fs = std::filesystem;

namespace {

ExperimentConfig small_config(const std::string& out_dir) {
  ExperimentConfig cfg;
  cfg.seed = 7;
  cfg.out_dir = out_dir;
  cfg.train_size = 192;
  cfg.test_size = 128;
  cfg.recover_size = 128;
  cfg.batch = 32;
  cfg.phase_a_epochs = 3;
  cfg.phase_b_epochs = 2;
  cfg.detect_samples = 12;
  cfg.attack_detect_samples = 4;
  cfg.attacks = {"gda"};
  cfg.gda_max_iters = 40;
  cfg.recovery_epoch_cap = 3;
  return cfg;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(bool(f));
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("run_experiment emits the full artifact set with a valid manifest") {
  fs::path dir = fs::temp_directory_path() / "cfdr_exp_unit";
  fs::remove_all(dir);
  ExperimentConfig cfg = small_config(dir.string());
  ExperimentResult res = run_experiment(cfg);

  for (const char* name :
       {"config.json", "clean.ckpt", "profile.json", "train_log_a.csv", "train_log_b.csv",
        "detection_samples.csv", "recovery.csv", "attacked_gda.ckpt", "attack_report_gda.json",
        "verdict_gda.json", "recovery_report_gda_unlabeled.json",
        "recovery_report_gda_labeled.json", "summary.json"}) {
    INFO("missing artifact: ", name);
    CHECK(fs::exists(dir / name));
  }
  CHECK(fs::exists(dir / "manifest.json"));
  CHECK(fs::exists(dir / "timing.csv"));

  // every manifest entry matches the bytes on disk
  auto manifest = nlohmann::json::parse(slurp(dir / "manifest.json"));
  CHECK(manifest.size() >= 12);
  for (auto it = manifest.begin(); it != manifest.end(); ++it)
    CHECK(sha256_hex(slurp(dir / it.key())) == it.value().get<std::string>());

  // detection CSV rows: header + clean samples + per-attack samples
  std::string det_csv = slurp(dir / "detection_samples.csv");
  size_t rows = std::count(det_csv.begin(), det_csv.end(), '\n');
  CHECK(rows == 1u + 12u + 4u);

  // recovery CSV mirrors the table layout
  std::string rec_csv = slurp(dir / "recovery.csv");
  CHECK(rec_csv.starts_with(
      "attack,param_count,acc_after_attack,unlabeled_acc,unlabeled_epochs,labeled_acc,labeled_epochs\n"));

  CHECK(res.clean_acc > 0.2);  // better than chance even at this tiny scale
  fs::remove_all(dir);
}

TEST_CASE("run_experiment twice with one seed produces byte-identical artifacts") {
  fs::path dir1 = fs::temp_directory_path() / "cfdr_exp_a";
  fs::path dir2 = fs::temp_directory_path() / "cfdr_exp_b";
  fs::remove_all(dir1);
  fs::remove_all(dir2);

  run_experiment(small_config(dir1.string()));
  run_experiment(small_config(dir2.string()));

  auto m1 = nlohmann::json::parse(slurp(dir1 / "manifest.json"));
  auto m2 = nlohmann::json::parse(slurp(dir2 / "manifest.json"));
  // out_dir differs inside config.json; every other artifact must be identical
  for (auto it = m1.begin(); it != m1.end(); ++it) {
    if (it.key() == "config.json" || it.key() == "manifest.json") continue;
    INFO("artifact differs: ", it.key());
    CHECK(it.value() == m2[it.key()]);
  }
  fs::remove_all(dir1);
  fs::remove_all(dir2);
}

TEST_CASE("config json round trip and scale preset") {
  ExperimentConfig cfg = small_config("x");
  ExperimentConfig back = ExperimentConfig::from_json(cfg.to_json());
  CHECK(back.to_json() == cfg.to_json());

  ExperimentConfig full = ExperimentConfig::from_json("{\"scale\":\"full\"}");
  CHECK(full.phase_a_epochs == 1000);
  CHECK(full.phase_b_epochs == 100);

  CHECK_THROWS_AS(ExperimentConfig::from_json("{\"scale\":\"galactic\"}"), ExperimentError);
  CHECK_THROWS_AS(ExperimentConfig::from_json("not json"), ExperimentError);
}

TEST_CASE("unknown dataset or attack kind fails cleanly") {
  ExperimentConfig cfg = small_config((fs::temp_directory_path() / "cfdr_exp_bad").string());
  cfg.dataset = "imagenet";
  CHECK_THROWS_AS(run_experiment(cfg), ExperimentError);
  cfg.dataset = "synthetic-blobs";
  cfg.attacks = {"meteor"};
  CHECK_THROWS_AS(run_experiment(cfg), ExperimentError);
  fs::remove_all(fs::temp_directory_path() / "cfdr_exp_bad");
}
