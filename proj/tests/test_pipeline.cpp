#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "lpcr/errors.hpp"
#include "lpcr/pipeline.hpp"

using namespace lpcr;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* name) {
  fs::path p = fs::temp_directory_path() / "lpcr_pipe" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

RunConfig micro_config() {
  RunConfig cfg = parse_run_config_json(R"({
    "seed": 5,
    "dataset": {"per_class_count": 3, "height": 48, "width": 32},
    "train": {"epochs": 1, "batch_size": 16, "fc1_width": 32, "fc2_width": 16,
              "width_multiplier": 0.25},
    "attack": {"per_class_cap": 1, "circular_stride": 2}
  })");
  return cfg;
}

}  // namespace

TEST_CASE("unknown config keys are rejected everywhere") {
  CHECK_THROWS_AS(parse_run_config_json(R"({"sneed": 1})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config_json(R"({"dataset": {"per_class": 3}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config_json(R"({"train": {"lr": 0.1}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config_json(R"({"attack": {"stride": 2}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config_json(R"({"advtrain": {"fraction": 0.5}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config_json(R"({"analysis": {"model": "x"}})"), ConfigError);
}

TEST_CASE("invalid config values are rejected") {
  CHECK_THROWS_AS(parse_run_config_json(R"({"attack": {"subset": "everything"}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config_json(R"({"attack": {"shapes": []}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config_json(R"({"attack": {"circular_stride": 0}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config_json(R"({"advtrain": {"clean_fraction": 0.0}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config_json(R"({"dataset": {"height": 50}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config_json("not json"), ConfigError);
}

TEST_CASE("the resolved config round-trips through its own serialization") {
  RunConfig cfg = micro_config();
  std::string text = run_config_to_json(cfg);
  RunConfig back = parse_run_config_json(text);
  CHECK(run_config_to_json(back) == text);
  CHECK(back.seed == cfg.seed);
  CHECK(back.attack_per_class_cap == cfg.attack_per_class_cap);
  CHECK(back.dataset.per_class_count == cfg.dataset.per_class_count);
}

TEST_CASE("gen-data writes the dataset with its resolved config") {
  RunConfig cfg = micro_config();
  fs::path dir = temp_dir("gen");
  run_gen_data(cfg, dir.string());
  CHECK(fs::exists(dir / "manifest.json"));
  CHECK(fs::exists(dir / "resolved_config.json"));
  CHECK(fs::exists(dir / "run_meta.json"));
  Dataset ds = load_dataset(dir.string());
  CHECK(ds.images.size() == 13 * 3);
}

TEST_CASE("the attack subset honors split choice and per-class caps") {
  RunConfig cfg = micro_config();
  cfg.dataset.per_class_count = 5;
  Dataset ds = generate_dataset(cfg.dataset);
  cfg.attack_subset = "val";
  cfg.attack_per_class_cap = 0;
  auto val = select_attack_subset(cfg, ds.images);
  CHECK(val.size() == 13);  // 20% of 5 per class = 1
  cfg.attack_subset = "train";
  auto train_side = select_attack_subset(cfg, ds.images);
  CHECK(train_side.size() == 52);
  cfg.attack_subset = "all";
  cfg.attack_per_class_cap = 2;
  auto capped = select_attack_subset(cfg, ds.images);
  CHECK(capped.size() == 26);
}

TEST_CASE("gradcheck writes a report and the sabotage hook trips it") {
  fs::path dir = temp_dir("gradcheck");
  GradCheckReport r = run_gradcheck(dir.string(), false);
  CHECK(r.worst_effective < 1e-3);
  CHECK(fs::exists(dir / "gradcheck.txt"));
  CHECK_THROWS_AS(run_gradcheck("", true), NumericError);
}

TEST_CASE("the full micro pipeline runs end to end and reports") {
  RunConfig cfg = micro_config();
  fs::path root = temp_dir("e2e");

  run_gen_data(cfg, (root / "data").string());
  TrainOutputs tr = run_train(cfg, (root / "data").string(), (root / "train").string());
  CHECK(fs::exists(tr.model_file));
  CHECK(fs::exists(root / "train" / "history.csv"));
  CHECK(fs::exists(root / "train" / "metrics.json"));

  AttackOutputs atk =
      run_attack(cfg, tr.model_file, (root / "data").string(), (root / "attack").string());
  CHECK(fs::exists(atk.records_file));
  CHECK(fs::exists(root / "attack" / "summary.csv"));
  CHECK(fs::exists(fs::path(atk.hard_set_dir) / "hard_manifest.json"));
  CHECK(atk.summaries.size() == 3);
  for (const auto& s : atk.summaries) CHECK(s.attempts == 13);

  Metrics m = run_eval(cfg, tr.model_file, (root / "data").string(),
                       (root / "eval.json").string());
  CHECK(m.accuracy >= 0.0);
  CHECK(fs::exists(root / "eval.json"));

  // hard-set eval path (if the attack produced anything)
  HardSet hs = load_hard_set(atk.hard_set_dir);
  if (!hs.images.empty()) {
    Metrics hm = run_eval(cfg, tr.model_file, atk.hard_set_dir, (root / "eval_hard.json").string());
    CHECK(hm.accuracy == doctest::Approx(0.0));  // every member fooled this model
  }

  ReportInputs ri;
  ri.baseline_records = atk.records_file;
  run_report(cfg, ri, (root / "report").string());
  CHECK(fs::exists(root / "report" / "bundle_index.json"));
  CHECK(fs::exists(root / "report" / "distribution_baseline.csv"));
}

TEST_CASE("report with zero records is an empty but valid bundle") {
  RunConfig cfg = micro_config();
  fs::path root = temp_dir("empty_report");
  fs::path records = root / "records.jsonl";
  std::ofstream(records).close();
  ReportInputs ri;
  ri.baseline_records = records.string();
  run_report(cfg, ri, (root / "report").string());
  CHECK(fs::exists(root / "report" / "bundle_index.json"));
  std::ifstream in(root / "report" / "bundle_index.json");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CHECK(text.find("\"files\": []") != std::string::npos);
}

TEST_CASE("missing inputs surface as data errors") {
  RunConfig cfg = micro_config();
  fs::path root = temp_dir("missing");
  CHECK_THROWS_AS(run_train(cfg, (root / "nope").string(), (root / "out").string()), DataError);
  CHECK_THROWS_AS(load_run_config((root / "absent.json").string()), ConfigError);
  ReportInputs ri;
  ri.baseline_records = (root / "absent.jsonl").string();
  CHECK_THROWS_AS(run_report(cfg, ri, (root / "report").string()), DataError);
}
