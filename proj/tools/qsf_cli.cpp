// SPDX-License-Identifier: Apache-2.0
//
// qsf synth-data | train | pseudo-gt | predict | eval
#include <fmt/format.h>

#include <CLI11.hpp>
#include <exception>
#include <iostream>
#include <optional>

#include "qsf/config.hpp"
#include "qsf/datamodel.hpp"
#include "qsf/errors.hpp"
#include "qsf/metrics.hpp"
#include "qsf/model.hpp"
#include "qsf/trainer.hpp"

namespace fs = std::filesystem;

namespace {

int run_synth(const fs::path& config, const fs::path& out) {
  const auto cfg = qsf::SynthConfig::from_config(qsf::FlatConfig::load(config));
  const auto manifest = qsf::synthesize_dataset(cfg, out);
  fmt::print("wrote {} samples to {}\n", manifest.entries.size(), (out / qsf::to_string(cfg.split)).string());
  return 0;
}

int run_train(const fs::path& config, int stage, const std::string& ablation) {
  auto flat = qsf::FlatConfig::load(config);
  flat.set("stage", std::to_string(stage));
  if (!ablation.empty()) flat.set("ablation", ablation);
  const auto cfg = qsf::TrainConfig::from_config(flat);
  const auto result = qsf::train_stage(cfg);
  fmt::print("stage {} ({}): {} steps, total loss {:.6f} -> {:.6f}\n", cfg.stage, qsf::to_string(cfg.ablation),
             result.totals.size(), result.totals.front(), result.totals.back());
  if (!cfg.checkpoint_out.empty()) fmt::print("checkpoint: {}\n", cfg.checkpoint_out.string());
  if (!cfg.loss_log.empty()) fmt::print("loss log: {}\n", cfg.loss_log.string());
  return 0;
}

int run_pseudo_gt(const fs::path& config, const fs::path& out, const std::string& checkpoint) {
  auto flat = qsf::FlatConfig::load(config);
  if (!checkpoint.empty()) flat.set("checkpoint_in", checkpoint);
  const auto cfg = qsf::TrainConfig::from_config(flat);
  const auto written = qsf::export_pseudo_gt(cfg, out);
  fmt::print("wrote {} maps to {}\n", written.size(), out.string());
  return 0;
}

int run_predict(const fs::path& checkpoint, const fs::path& in, const fs::path& out) {
  const auto written = qsf::predict(checkpoint, in, out);
  fmt::print("wrote {} maps to {}\n", written.size(), out.string());
  return 0;
}

int run_eval(const fs::path& pred, const fs::path& gt, const std::string& tags, const fs::path& report_path) {
  std::optional<fs::path> tag_file;
  if (!tags.empty()) tag_file = tags;
  const auto report = qsf::evaluate_directory(pred, gt, tag_file);
  const auto csv = qsf::write_report(report, report_path);
  const auto& a = report.overall;
  fmt::print("{} samples  S {:.4f}  MAE {:.4f}  maxF {:.4f}  maxE {:.4f}\n", a.count, a.s, a.mae, a.f_max, a.e_max);
  fmt::print("report: {}\ncurves: {}\n", report_path.string(), csv.string());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Quality-aware selective fusion for visible-depth-thermal saliency"};
  app.require_subcommand(1);

  std::string config, out, checkpoint, in, pred, gt, tags, report, ablation;
  int stage = 1;

  auto* synth = app.add_subcommand("synth-data", "render a synthetic triple-modal dataset");
  synth->add_option("--config", config, "flat key = value file")->required();
  synth->add_option("--out", out, "dataset root")->required();

  auto* train = app.add_subcommand("train", "run one training stage");
  train->add_option("--stage", stage, "1, 2 or 3")->required()->check(CLI::Range(1, 3));
  train->add_option("--config", config, "flat key = value file")->required();
  train->add_option("--ablation", ablation, "full, base, no_qa, no_lq, no_hq, no_iia or no_er");

  auto* pgt = app.add_subcommand("pseudo-gt", "export pseudo ground truth and quality maps");
  pgt->add_option("--config", config, "flat key = value file")->required();
  pgt->add_option("--out", out, "output directory")->required();
  pgt->add_option("--checkpoint", checkpoint, "overrides checkpoint_in");

  auto* predict = app.add_subcommand("predict", "write saliency maps from a stage-3 checkpoint");
  predict->add_option("--checkpoint", checkpoint)->required();
  predict->add_option("--in", in, "directory with V, D, T subdirectories")->required();
  predict->add_option("--out", out, "output directory")->required();

  auto* eval = app.add_subcommand("eval", "score predictions against ground truth");
  eval->add_option("--pred", pred)->required();
  eval->add_option("--gt", gt)->required();
  eval->add_option("--tags", tags, "id<TAB>tag,tag file");
  eval->add_option("--report", report, "JSON report path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(qsf::ExitCode::kConfig);
  }

  try {
    if (*synth) return run_synth(config, out);
    if (*train) return run_train(config, stage, ablation);
    if (*pgt) return run_pseudo_gt(config, out, checkpoint);
    if (*predict) return run_predict(checkpoint, in, out);
    if (*eval) return run_eval(pred, gt, tags, report);
  } catch (const qsf::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(qsf::ExitCode::kFailure);
  }
  return static_cast<int>(qsf::ExitCode::kFailure);
}
