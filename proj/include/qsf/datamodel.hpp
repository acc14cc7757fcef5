// SPDX-License-Identifier: Apache-2.0
//
// Triple-modal (visible / depth / thermal) samples, dataset discovery and
// loading, augmentation, edge-mask derivation and a synthetic generator.
//
// On-disk layout: <root>/<split>/{V,D,T,GT}/<id>.png (8-bit PNG). Depth and
// thermal may be stored single-channel; they are replicated to 3 channels
// on load so a single encoder sees a uniform input arity.
#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "qsf/config.hpp"

namespace qsf {

enum class Split { kTrain, kTest };

std::string to_string(Split split);
Split parse_split(const std::string& name);

/// One aligned scene. Images are [3, H, W] float in [0, 1]; masks are
/// [1, H, W] float holding only {0, 1}.
struct TripleModalSample {
  std::string id;
  torch::Tensor visible;
  torch::Tensor depth;
  torch::Tensor thermal;
  torch::Tensor gt;
  torch::Tensor edge_gt;

  std::int64_t height() const { return gt.size(-2); }
  std::int64_t width() const { return gt.size(-1); }
};

struct ManifestEntry {
  std::string id;
  std::filesystem::path visible;
  std::filesystem::path depth;
  std::filesystem::path thermal;
  std::filesystem::path gt;  // empty when ground truth is not required
};

struct DatasetManifest {
  std::filesystem::path root;
  Split split = Split::kTrain;
  std::vector<ManifestEntry> entries;  // sorted by id
  std::map<std::string, std::vector<std::string>> challenge_tags;
};

struct ModalityDegradation {
  double drop_object_prob = 0.0;
  double contrast_scale = 1.0;
  double noise_sigma = 0.0;
  double background_hotspot_prob = 0.0;
};

struct SynthConfig {
  int num_samples = 8;
  int resolution = 64;
  int min_objects = 1;
  int max_objects = 2;
  ModalityDegradation visible{};
  ModalityDegradation depth{};
  ModalityDegradation thermal{};
  // Probability that a sample's visible object is rendered at low contrast
  // (scaled by visible.contrast_scale); 1 applies it to every sample.
  double visible_low_contrast_prob = 1.0;
  std::uint64_t seed = 0;
  Split split = Split::kTrain;

  /// Throws ConfigError when the invariants do not hold.
  void validate() const;

  /// Reads `synth.*`-free flat keys, e.g. `num_samples`, `resolution`,
  /// `depth.drop_object_prob`, `thermal.background_hotspot_prob`.
  static SynthConfig from_config(const FlatConfig& cfg);
};

/// Pairs files of <root>/<split>/{V,D,T,GT} by stem. Reads the optional
/// <root>/<split>/manifest.tsv for challenge tags.
DatasetManifest discover_dataset(const std::filesystem::path& root, Split split);

/// Same pairing rule applied directly to `dir`/{V,D,T[,GT]}.
DatasetManifest discover_directory(const std::filesystem::path& dir, bool require_gt);

/// Loads and resizes one sample. `target_resolution` of 0 keeps the native
/// size; otherwise it must be a positive multiple of 32. A missing gt path
/// yields zero masks.
TripleModalSample load_sample(const ManifestEntry& entry, int target_resolution);

/// Native (height, width) of the entry's ground truth, or of the visible
/// image when the entry has no ground truth.
std::pair<int, int> native_size(const ManifestEntry& entry);

/// 3x3 morphological gradient (dilation minus erosion, replicate border),
/// binarized. Accepts [H, W] or [1, H, W]; returns the same shape.
torch::Tensor derive_edge_gt(const torch::Tensor& gt);

struct AugmentParams {
  bool flip = false;
  int quarter_turns = 0;  // counter-clockwise, 0..3
  // Crop window applied after flip/rotation, then resized back.
  int crop_top = 0;
  int crop_left = 0;
  int crop_height = 0;  // 0 means the full extent
  int crop_width = 0;

  bool is_identity() const;
};

AugmentParams draw_augment(std::mt19937_64& rng, std::int64_t height, std::int64_t width);
TripleModalSample apply_augment(const TripleModalSample& sample, const AugmentParams& params);
TripleModalSample augment_sample(const TripleModalSample& sample, std::mt19937_64& rng);

/// Renders cfg.num_samples scenes into <out_root>/<split>/{V,D,T,GT} plus
/// manifest.tsv (id, comma-separated tags). Byte-identical for equal configs.
DatasetManifest synthesize_dataset(const SynthConfig& cfg, const std::filesystem::path& out_root);

/// Writes a [1, H, W] or [H, W] map in [0, 1] as an 8-bit grayscale PNG.
void write_map_png(const torch::Tensor& map, const std::filesystem::path& path);

/// Reads a PNG as a [H, W] float map scaled to [0, 1].
torch::Tensor read_map_png(const std::filesystem::path& path);

}  // namespace qsf
