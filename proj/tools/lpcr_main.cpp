#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "lpcr/errors.hpp"
#include "lpcr/pipeline.hpp"

namespace {

struct CommonOpts {
  std::string config_file;
  std::string out_dir = "out";
  std::uint64_t seed = 0;
  int threads = 0;
  bool have_seed = false;
};

lpcr::RunConfig resolve_config(const CommonOpts& opts) {
  lpcr::RunConfig cfg =
      opts.config_file.empty() ? lpcr::desk_profile() : lpcr::load_run_config(opts.config_file);
  if (opts.have_seed) {
    // Re-derive every sub-seed from the override.
    std::string text = lpcr::run_config_to_json(cfg);
    cfg = lpcr::parse_run_config_json(text);
    cfg.seed = opts.seed;
    cfg.dataset.seed = opts.seed;
    cfg.train.seed = opts.seed;
    cfg.advmix.seed = lpcr::Rng(opts.seed).split(0xADF0).next_u64();
  }
  if (opts.threads > 0) cfg.threads = opts.threads;
  return cfg;
}

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_file, "JSON run config (defaults: desk profile)");
  cmd->add_option("--out", opts.out_dir, "output directory");
  cmd->add_option("--seed", opts.seed, "override the config seed")
      ->each([&opts](const std::string&) { opts.have_seed = true; });
  cmd->add_option("--threads", opts.threads, "worker thread cap");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"license plate character recognition: training, geometric-mask attacks, "
               "adversarial training, analysis"};
  app.require_subcommand(1);

  CommonOpts opts;
  std::string dataset_dir, model_file, data_dir, out_file;
  lpcr::ReportInputs report_inputs;
  bool sabotage = false;

  CLI::App* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  add_common(gen, opts);

  CLI::App* train = app.add_subcommand("train", "train the baseline classifier");
  add_common(train, opts);
  train->add_option("--dataset", dataset_dir, "dataset directory")->required();

  CLI::App* attack = app.add_subcommand("attack", "run the exhaustive geometric-mask attack");
  add_common(attack, opts);
  attack->add_option("--dataset", dataset_dir, "dataset directory")->required();
  attack->add_option("--model", model_file, "model file")->required();

  CLI::App* advtrain = app.add_subcommand("adv-train", "train the attack-aware classifier");
  add_common(advtrain, opts);
  advtrain->add_option("--dataset", dataset_dir, "dataset directory")->required();

  CLI::App* eval = app.add_subcommand("eval", "evaluate a model on a dataset or hard set");
  add_common(eval, opts);
  eval->add_option("--model", model_file, "model file")->required();
  eval->add_option("--data", data_dir, "dataset or hard-set directory")->required();
  eval->add_option("--out-file", out_file, "metrics JSON path (default <out>/metrics.json)");

  CLI::App* report = app.add_subcommand("report", "write the analysis bundle");
  add_common(report, opts);
  report->add_option("--records", report_inputs.baseline_records, "baseline records.jsonl")
      ->required();
  report->add_option("--aa-records", report_inputs.aa_records, "attack-aware records.jsonl");
  report->add_option("--hard-set", report_inputs.hard_set_dir, "hard-set directory");
  report->add_option("--transfer-model", report_inputs.transfer_model_file,
                     "independently trained model for the transferability table");

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient check");
  add_common(gradcheck, opts);
  gradcheck->add_flag("--sabotage-gradient", sabotage,
                      "corrupt one analytic gradient (verifies the check fails)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;  // usage error
  }

  try {
    lpcr::RunConfig cfg = resolve_config(opts);
    if (gen->parsed()) {
      lpcr::run_gen_data(cfg, opts.out_dir);
      std::printf("dataset written to %s\n", opts.out_dir.c_str());
    } else if (train->parsed()) {
      lpcr::TrainOutputs out = lpcr::run_train(cfg, dataset_dir, opts.out_dir);
      std::printf("model %s  val_accuracy %.4f\n", out.model_file.c_str(), out.val_accuracy);
    } else if (attack->parsed()) {
      lpcr::AttackOutputs out = lpcr::run_attack(cfg, model_file, dataset_dir, opts.out_dir);
      for (const auto& s : out.summaries)
        std::printf("%-10s attempts %d successes %d rate %.3f\n", lpcr::shape_name(s.shape),
                    s.attempts, s.successes, s.rate);
    } else if (advtrain->parsed()) {
      lpcr::TrainOutputs out = lpcr::run_adv_train(cfg, dataset_dir, opts.out_dir);
      std::printf("model %s  val_accuracy %.4f\n", out.model_file.c_str(), out.val_accuracy);
    } else if (eval->parsed()) {
      if (out_file.empty()) out_file = opts.out_dir + "/metrics.json";
      lpcr::Metrics m = lpcr::run_eval(cfg, model_file, data_dir, out_file);
      std::printf("accuracy %.4f mean_loss %.4f\n", m.accuracy, m.mean_loss);
    } else if (report->parsed()) {
      lpcr::run_report(cfg, report_inputs, opts.out_dir);
      std::printf("report written to %s\n", opts.out_dir.c_str());
    } else if (gradcheck->parsed()) {
      lpcr::GradCheckReport r = lpcr::run_gradcheck(opts.out_dir, sabotage);
      std::printf("gradient check passed, worst effective rel err %.3e\n", r.worst_effective);
    }
  } catch (const lpcr::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const lpcr::DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  } catch (const lpcr::NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
