// SPDX-License-Identifier: Apache-2.0
//
// Three-stage training, freezing, prediction export and pseudo-GT export.
#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "qsf/checkpoint.hpp"
#include "qsf/config.hpp"
#include "qsf/datamodel.hpp"
#include "qsf/losses.hpp"
#include "qsf/model.hpp"

namespace qsf {

struct TrainConfig {
  int stage = 1;
  int resolution = 64;
  int batch_size = 4;
  double learning_rate = 1e-3;
  int steps = 150;
  std::uint64_t seed = 0;
  ScalePreset preset = ScalePreset::kToy;
  Ablation ablation = Ablation::kFull;
  CascadeOrder order = CascadeOrder::kDescending;
  std::filesystem::path data_root;
  Split split = Split::kTrain;
  std::filesystem::path checkpoint_in;   // required for stages 2 and 3
  std::filesystem::path checkpoint_out;  // optional
  std::filesystem::path loss_log;        // optional CSV
  bool augment = false;
  int threads = 1;

  /// Preset defaults (toy: lr 1e-3, 64 px; paper: lr 1e-4, 384 px) then the
  /// flat keys stage, resolution, batch_size, learning_rate, steps, seed,
  /// scale_preset, ablation, cascade_order, data_root, split,
  /// checkpoint_in, checkpoint_out, loss_log, augment, threads. A key
  /// written as `stage<N>.<key>` applies only when training stage N.
  static TrainConfig from_config(const FlatConfig& cfg);
  void validate() const;

  /// Canonical text of the training-relevant fields and its FNV-1a hash.
  std::string canonical() const;
  std::uint64_t fingerprint() const;
};

struct LossLogRow {
  int step = 0;
  std::string component;
  double value = 0.0;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<LossLogRow> log;
  std::vector<double> totals;  // total loss per step
  // Trainable parameters whose gradient stayed exactly zero on every step.
  std::vector<std::string> dead_parameters;
};

/// Marks parameters under each path prefix as frozen (no gradient) and puts
/// matching submodules in eval mode. Throws UnknownScope for a prefix that
/// matches no parameter.
void freeze_scope(QsfNet& net, const std::set<std::string>& scope);

/// Runs one training stage. Writes cfg.checkpoint_out and cfg.loss_log when
/// set. Throws MissingPrerequisiteCheckpoint and NonFiniteLoss.
TrainResult train_stage(const TrainConfig& cfg);

/// Builds a network matching the checkpoint and loads its blobs.
QsfNet model_from_checkpoint(const Checkpoint& ckpt);

/// Writes sigmoid(P_f^0) (or the variant's deployed map) for every sample in
/// `input_dir`/{V,D,T} as `<out_dir>/<id>.png` at native resolution.
std::vector<std::filesystem::path> predict(const std::filesystem::path& checkpoint,
                                           const std::filesystem::path& input_dir,
                                           const std::filesystem::path& out_dir);

/// Writes PGT_d, PGT_t (from the extraction subnet) and, when the checkpoint
/// holds the quality subnet, QA_d and QA_t maps under `out_dir`.
std::vector<std::filesystem::path> export_pseudo_gt(const TrainConfig& cfg, const std::filesystem::path& out_dir);

void write_loss_log(const std::vector<LossLogRow>& rows, const std::filesystem::path& path);

}  // namespace qsf
