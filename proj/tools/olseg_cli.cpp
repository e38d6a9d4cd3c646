// Command-line front end: olseg <command> [--config PATH] [--seed N] [--out DIR]

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "olseg/error.hpp"
#include "olseg/feature_store.hpp"
#include "olseg/runner.hpp"
#include "olseg/synthetic.hpp"

namespace {

struct RunFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_run_flags(CLI::App* cmd, RunFlags& flags) {
  cmd->add_option("--config", flags.config, "Run configuration (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", flags.seed, "Override the run seed");
  cmd->add_option("--out", flags.out, "Override the output directory");
}

olseg::RunConfig load_config(const RunFlags& flags) {
  auto config = olseg::RunConfig::load(flags.config);
  if (flags.seed) config.seed = *flags.seed;
  if (!flags.out.empty()) config.output_dir = flags.out;
  return config;
}

void print_timing(const olseg::TimingReport& t) {
  std::printf("feature loading        %8.3f s\n", t.feature_loading);
  if (t.model_selection > 0) std::printf("model selection        %8.3f s\n", t.model_selection);
  std::printf("detection training     %8.3f s\n", t.detection_training);
  std::printf("segmentation training  %8.3f s\n", t.segmentation_training);
  std::printf("writing                %8.3f s\n", t.writing);
  std::printf("total                  %8.3f s\n", t.total);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"On-line instance segmentation with Nystrom kernel classifiers over pre-extracted features"};
  app.require_subcommand(1);

  RunFlags train_flags, predict_flags, eval_flags, sweep_flags, gt_flags;
  auto* train = app.add_subcommand("train", "Train detection and mask banks");
  add_run_flags(train, train_flags);
  auto* predict = app.add_subcommand("predict", "Write detections.jsonl and masks.jsonl for the test split");
  add_run_flags(predict, predict_flags);
  auto* eval = app.add_subcommand("eval", "Evaluate predictions against the test split");
  add_run_flags(eval, eval_flags);
  std::string predictions;
  eval->add_option("--predictions", predictions, "Prediction dump (default: <out>/masks.jsonl)")
      ->check(CLI::ExistingFile);
  auto* sweep = app.add_subcommand("sweep-r", "Retrain masks over the sampling-factor sweep");
  add_run_flags(sweep, sweep_flags);
  auto* gt = app.add_subcommand("gt-mask-eval", "Evaluate masks predicted on ground-truth boxes");
  add_run_flags(gt, gt_flags);

  auto* gen = app.add_subcommand("gen-synthetic", "Generate a synthetic feature-store dataset");
  std::string gen_config, gen_out;
  std::optional<std::uint64_t> gen_seed;
  olseg::SyntheticConfig syn;
  gen->add_option("--config", gen_config, "Generator settings (JSON)")->check(CLI::ExistingFile);
  gen->add_option("--seed", gen_seed, "Generator seed");
  gen->add_option("--out", gen_out, "Output dataset directory")->required();
  std::optional<std::uint32_t> train_images, val_images, test_images;
  gen->add_option("--train-images", train_images);
  gen->add_option("--val-images", val_images);
  gen->add_option("--test-images", test_images);

  auto* validate = app.add_subcommand("validate-dataset", "Check a feature-store directory against the format");
  std::string dataset;
  validate->add_option("dataset", dataset, "Dataset directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      const auto result = olseg::cmd_train(load_config(train_flags));
      for (const auto& w : result.detection_report.warnings) std::cerr << "warning: " << w << '\n';
      for (const auto& w : result.mask_report.warnings) std::cerr << "warning: " << w << '\n';
      print_timing(result.timing);
    } else if (*predict) {
      const auto result = olseg::cmd_predict(load_config(predict_flags));
      std::printf("%zu detections, %zu masks\n", result.detections.size(), result.masks.size());
    } else if (*eval) {
      const auto report =
          olseg::cmd_eval(load_config(eval_flags), predictions.empty() ? std::nullopt : std::optional(std::filesystem::path(predictions)));
      std::cout << report.to_table();
      for (const auto& n : report.notes) std::cout << "note: " << n << '\n';
    } else if (*sweep) {
      const auto rows = olseg::cmd_sweep_r(load_config(sweep_flags));
      std::printf("%8s %12s %12s %12s %10s %10s\n", "r", "kept_pos", "kept_neg", "train_s", "mAP50", "mAP70");
      for (const auto& r : rows) {
        std::printf("%8.3f %12zu %12zu %12.4f %10.4f %10.4f\n", r.r, r.kept_positives, r.kept_negatives,
                    r.median_train_seconds, r.segm_map50, r.segm_map70);
      }
    } else if (*gt) {
      const auto report = olseg::cmd_gt_mask_eval(load_config(gt_flags));
      std::cout << report.to_table();
    } else if (*gen) {
      if (!gen_config.empty()) {
        std::ifstream in(gen_config);
        syn = olseg::SyntheticConfig::from_json(nlohmann::json::parse(in));
      }
      if (gen_seed) syn.seed = *gen_seed;
      if (train_images) syn.train_images = *train_images;
      if (val_images) syn.val_images = *val_images;
      if (test_images) syn.test_images = *test_images;
      const auto index = olseg::generate_synthetic(syn, gen_out);
      std::printf("wrote %zu images to %s\n", index.images.size(), gen_out.c_str());
    } else if (*validate) {
      const auto report = olseg::validate_dataset(std::filesystem::path(dataset));
      for (const auto& s : report.splits) {
        std::printf("%-6s images %6zu  rois %8zu  grids %7zu  instances %6zu\n", s.split.c_str(), s.images, s.rois,
                    s.grids, s.instances);
      }
      for (const auto& e : report.errors) std::cerr << "error: " << e << '\n';
      if (!report.ok()) return 1;
      std::printf("ok\n");
    }
  } catch (const olseg::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
