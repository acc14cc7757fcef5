// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container: stage provenance, step counter, config fingerprint,
// named parameter/buffer blobs and optimizer state.
//
// File layout (little endian):
//   "QSFCKPT1" | u64 meta_len | meta JSON | u64 blob_count | blobs...
// Each blob: u32 name_len | name | i8 dtype | u8 ndim | i64 dims[ndim] |
// u64 byte_len | raw bytes. Blobs are written in name order.
#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>

#include "qsf/model.hpp"

namespace qsf {

struct CheckpointMeta {
  std::set<int> provenance;  // training stages whose parameters are included
  std::int64_t step = 0;
  std::uint64_t config_fingerprint = 0;
  ScalePreset preset = ScalePreset::kToy;
  Ablation ablation = Ablation::kFull;
  CascadeOrder order = CascadeOrder::kDescending;
  int resolution = 64;
};

struct Checkpoint {
  CheckpointMeta meta;
  std::map<std::string, torch::Tensor> blobs;      // module path -> tensor
  std::map<std::string, torch::Tensor> optimizer;  // "optim/<path>/<field>"

  bool has_stage(int stage) const { return meta.provenance.count(stage) != 0; }
};

/// Top-level module paths covered by a provenance set.
std::set<std::string> scopes_for(const std::set<int>& provenance);

/// Copies parameters and buffers under `scopes` (detached, contiguous CPU).
std::map<std::string, torch::Tensor> capture_blobs(QsfNet& net, const std::set<std::string>& scopes);

/// Loads every blob whose top-level path is in `scopes`. Throws ShapeMismatch
/// on shape disagreement and ConfigError when a model path has no blob.
void restore_blobs(QsfNet& net, const std::map<std::string, torch::Tensor>& blobs,
                   const std::set<std::string>& scopes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Serialized bytes of one blob, for byte-level comparisons.
std::string blob_bytes(const torch::Tensor& t);

/// 64-bit FNV-1a.
std::uint64_t fnv1a(const std::string& text);

}  // namespace qsf
