// SPDX-License-Identifier: Apache-2.0
#include "qsf/trainer.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "qsf/errors.hpp"

namespace fs = std::filesystem;

namespace qsf {
namespace {

struct Batch {
  torch::Tensor v, d, t, gt, edge;
};

Batch collate(const std::vector<TripleModalSample>& samples) {
  std::vector<torch::Tensor> v, d, t, gt, edge;
  for (const auto& s : samples) {
    v.push_back(s.visible);
    d.push_back(s.depth);
    t.push_back(s.thermal);
    gt.push_back(s.gt);
    edge.push_back(s.edge_gt);
  }
  return {torch::stack(v), torch::stack(d), torch::stack(t), torch::stack(gt), torch::stack(edge)};
}

Batch single(const TripleModalSample& s) { return collate({s}); }

/// Deterministic epoch-shuffled index stream.
class BatchOrder {
 public:
  BatchOrder(std::size_t count, std::mt19937_64& rng) : rng_(rng), order_(count) {}

  std::vector<std::size_t> next(std::size_t batch) {
    std::vector<std::size_t> out;
    while (out.size() < batch) {
      if (pos_ == 0) {
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        std::shuffle(order_.begin(), order_.end(), rng_);
      }
      out.push_back(order_[pos_]);
      pos_ = (pos_ + 1) % order_.size();
    }
    return out;
  }

 private:
  std::mt19937_64& rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

std::set<int> required_stages(int stage, const ModelConfig& mc) {
  if (stage == 2) return {1};
  if (stage == 3) return mc.has_quality() ? std::set<int>{1, 2} : std::set<int>{1};
  return {};
}

void check_compatible(const Checkpoint& ckpt, const TrainConfig& cfg) {
  if (ckpt.meta.preset != cfg.preset) {
    throw ConfigError("checkpoint preset " + to_string(ckpt.meta.preset) + " differs from " + to_string(cfg.preset));
  }
  const bool ckpt_base = ckpt.meta.ablation == Ablation::kBase;
  const bool cfg_base = cfg.ablation == Ablation::kBase;
  if (ckpt_base != cfg_base) throw ConfigError("checkpoint decoder differs from the configured ablation");
  if (ckpt.has_stage(2) && cfg.stage == 3 && ckpt.meta.ablation != cfg.ablation) {
    throw ConfigError("stage-2 checkpoint was trained for ablation " + to_string(ckpt.meta.ablation));
  }
}

std::map<std::string, torch::Tensor> optimizer_blobs(QsfNet& net, torch::optim::Adam& optim) {
  std::map<std::string, torch::Tensor> out;
  auto& state = optim.state();
  for (const auto& p : net->named_parameters()) {
    const auto it = state.find(p.value().unsafeGetTensorImpl());
    if (it == state.end()) continue;
    const auto& s = static_cast<const torch::optim::AdamParamState&>(*it->second);
    out["optim/" + p.key() + "/exp_avg"] = s.exp_avg().detach().clone();
    out["optim/" + p.key() + "/exp_avg_sq"] = s.exp_avg_sq().detach().clone();
    out["optim/" + p.key() + "/step"] = torch::tensor({s.step()}, torch::kInt64);
  }
  return out;
}

std::vector<TripleModalSample> load_all(const DatasetManifest& manifest, int resolution) {
  std::vector<TripleModalSample> samples;
  samples.reserve(manifest.entries.size());
  for (const auto& e : manifest.entries) samples.push_back(load_sample(e, resolution));
  return samples;
}

std::string format_value(double v) { return fmt::format("{:.9g}", v); }

}  // namespace

TrainConfig TrainConfig::from_config(const FlatConfig& flat) {
  TrainConfig c;
  c.stage = static_cast<int>(flat.get_int("stage", c.stage));
  // "stage<N>.<key>" overrides "<key>" when training stage N.
  FlatConfig cfg = flat;
  const std::string prefix = "stage" + std::to_string(c.stage) + ".";
  for (const auto& [key, value] : flat.values()) {
    if (key.rfind(prefix, 0) == 0) cfg.set(key.substr(prefix.size()), value);
  }
  c.preset = parse_scale_preset(cfg.get_string("scale_preset", "toy"));
  if (c.preset == ScalePreset::kPaper) {
    c.learning_rate = 1e-4;
    c.resolution = 384;
  }
  c.resolution = static_cast<int>(cfg.get_int("resolution", c.resolution));
  c.batch_size = static_cast<int>(cfg.get_int("batch_size", c.batch_size));
  c.learning_rate = cfg.get_double("learning_rate", c.learning_rate);
  c.steps = static_cast<int>(cfg.get_int("steps", c.steps));
  c.seed = static_cast<std::uint64_t>(cfg.get_int("seed", 0));
  c.ablation = parse_ablation(cfg.get_string("ablation", "full"));
  c.order = parse_cascade_order(cfg.get_string("cascade_order", "descending"));
  c.data_root = cfg.get_string("data_root", "");
  c.split = parse_split(cfg.get_string("split", "train"));
  c.checkpoint_in = cfg.get_string("checkpoint_in", "");
  c.checkpoint_out = cfg.get_string("checkpoint_out", "");
  c.loss_log = cfg.get_string("loss_log", "");
  c.augment = cfg.get_bool("augment", c.augment);
  c.threads = static_cast<int>(cfg.get_int("threads", c.threads));
  return c;
}

void TrainConfig::validate() const {
  if (stage < 1 || stage > 3) throw ConfigError("stage must be 1, 2 or 3");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (steps < 1) throw ConfigError("steps must be positive");
  if (threads < 1) throw ConfigError("threads must be positive");
  if (resolution < 32 || resolution % 32 != 0) throw ConfigError("resolution must be a positive multiple of 32");
  if (data_root.empty()) throw ConfigError("data_root is required");
  if (stage == 2 && ablation == Ablation::kNoQa) throw ConfigError("the no_qa variant has no stage 2");
}

std::string TrainConfig::canonical() const {
  return fmt::format(
      "stage={};resolution={};batch_size={};learning_rate={:.17g};steps={};seed={};scale_preset={};ablation={};"
      "cascade_order={};split={};augment={}",
      stage, resolution, batch_size, learning_rate, steps, seed, to_string(preset), to_string(ablation),
      to_string(order), to_string(split), augment ? 1 : 0);
}

std::uint64_t TrainConfig::fingerprint() const { return fnv1a(canonical()); }

void freeze_scope(QsfNet& net, const std::set<std::string>& scope) {
  for (const auto& prefix : scope) {
    bool matched = false;
    for (auto& p : net->named_parameters()) {
      const auto& name = p.key();
      if (name == prefix || name.rfind(prefix + ".", 0) == 0) {
        p.value().set_requires_grad(false);
        matched = true;
      }
    }
    if (!matched) throw UnknownScope("no parameters under '" + prefix + "'");
    for (auto& m : net->named_modules("", false)) {
      if (m.key() == prefix) m.value()->eval();
    }
  }
}

void write_loss_log(const std::vector<LossLogRow>& rows, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write loss log " + path.string());
  out << "step,component,value\n";
  for (const auto& r : rows) out << r.step << ',' << r.component << ',' << format_value(r.value) << '\n';
}

TrainResult train_stage(const TrainConfig& cfg) {
  cfg.validate();
  torch::set_num_threads(cfg.threads);
  torch::manual_seed(cfg.seed);

  const auto mc = ModelConfig::make(cfg.preset, cfg.ablation, cfg.order);
  mc.encoder.check_resolution(cfg.resolution, cfg.resolution);
  QsfNet net(mc);

  const auto required = required_stages(cfg.stage, mc);
  if (!required.empty()) {
    if (cfg.checkpoint_in.empty() || !fs::exists(cfg.checkpoint_in)) {
      throw MissingPrerequisiteCheckpoint(fmt::format("stage {} needs a checkpoint from stage(s) {}", cfg.stage,
                                                      cfg.stage == 2 || !mc.has_quality() ? "1" : "1 and 2"));
    }
    const auto ckpt = load_checkpoint(cfg.checkpoint_in);
    for (const int s : required) {
      if (!ckpt.has_stage(s)) {
        throw MissingPrerequisiteCheckpoint(
            fmt::format("{} does not contain stage-{} parameters", cfg.checkpoint_in.string(), s));
      }
    }
    check_compatible(ckpt, cfg);
    restore_blobs(net, ckpt.blobs, scopes_for(required));
  }

  std::set<std::string> frozen;
  if (cfg.stage == 1) {
    frozen = {"fusion"};
    if (mc.has_quality()) frozen.insert("quality");
  } else if (cfg.stage == 2) {
    frozen = {"extraction", "fusion"};
  } else if (mc.has_quality()) {
    frozen = {"quality"};
  }
  net->train();
  freeze_scope(net, frozen);

  std::vector<std::string> names;
  std::vector<torch::Tensor> params;
  for (const auto& p : net->named_parameters()) {
    if (!p.value().requires_grad()) continue;
    names.push_back(p.key());
    params.push_back(p.value());
  }
  torch::optim::Adam optim(params, torch::optim::AdamOptions(cfg.learning_rate));

  const auto manifest = discover_dataset(cfg.data_root, cfg.split);
  if (manifest.entries.empty()) throw EmptyDataset("no samples under " + cfg.data_root.string());
  const auto samples = load_all(manifest, cfg.resolution);
  const auto loss_cfg = LossConfig::for_resolution(cfg.resolution);
  const auto batch_size = std::min<std::size_t>(cfg.batch_size, samples.size());

  std::mt19937_64 rng(cfg.seed);
  BatchOrder order(samples.size(), rng);
  std::vector<bool> alive(params.size(), false);
  TrainResult result;

  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<TripleModalSample> picked;
    for (const auto i : order.next(batch_size)) {
      picked.push_back(cfg.augment ? augment_sample(samples[i], rng) : samples[i]);
    }
    const Batch b = collate(picked);
    optim.zero_grad();

    LossReport report;
    if (cfg.stage == 1) {
      report = stage1_loss(net->extract(b.v, b.d, b.t), b.gt, loss_cfg);
    } else if (cfg.stage == 2) {
      std::array<InitialBranchOutput, 3> initial;
      {
        torch::NoGradGuard no_grad;
        initial = net->extract(b.v, b.d, b.t);
      }
      const auto targets = build_pseudo_gt(initial, b.gt, mc.pseudo_gt_terms());
      report = stage2_loss(net->assess(b.v, b.d, b.t), targets);
    } else {
      const auto initial = net->extract(b.v, b.d, b.t);
      std::optional<QualityAwareMaps> qa;
      if (mc.has_quality()) {
        torch::NoGradGuard no_grad;
        qa = net->assess(b.v, b.d, b.t);
      }
      const auto fused = net->fuse(initial, qa ? &*qa : nullptr, b.v.size(2), b.v.size(3));
      report = stage3_loss(initial, fused, b.gt, b.edge, loss_cfg);
    }

    const double total = report.total_value();
    for (const auto& [name, value] : report.components) result.log.push_back({step, name, value.item<double>()});
    result.log.push_back({step, "total", total});
    result.totals.push_back(total);
    if (!std::isfinite(total)) {
      if (!cfg.loss_log.empty()) write_loss_log(result.log, cfg.loss_log);
      std::string detail;
      for (const auto& [name, value] : report.components) {
        detail += fmt::format(" {}={}", name, value.item<double>());
      }
      throw NonFiniteLoss(fmt::format("non-finite loss at stage {} step {}:{}", cfg.stage, step, detail));
    }

    report.total.backward();
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (alive[i]) continue;
      const auto& g = params[i].grad();
      if (g.defined() && g.ne(0).any().item<bool>()) alive[i] = true;
    }
    optim.step();
  }

  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!alive[i]) result.dead_parameters.push_back(names[i]);
  }

  auto& ckpt = result.checkpoint;
  ckpt.meta.provenance = required;
  ckpt.meta.provenance.insert(cfg.stage);
  ckpt.meta.step = cfg.steps;
  ckpt.meta.config_fingerprint = cfg.fingerprint();
  ckpt.meta.preset = cfg.preset;
  ckpt.meta.ablation = cfg.ablation;
  ckpt.meta.order = cfg.order;
  ckpt.meta.resolution = cfg.resolution;
  ckpt.blobs = capture_blobs(net, scopes_for(ckpt.meta.provenance));
  ckpt.optimizer = optimizer_blobs(net, optim);

  if (!cfg.loss_log.empty()) write_loss_log(result.log, cfg.loss_log);
  if (!cfg.checkpoint_out.empty()) save_checkpoint(ckpt, cfg.checkpoint_out);
  return result;
}

QsfNet model_from_checkpoint(const Checkpoint& ckpt) {
  QsfNet net(ModelConfig::make(ckpt.meta.preset, ckpt.meta.ablation, ckpt.meta.order));
  auto scopes = scopes_for(ckpt.meta.provenance);
  if (!net->quality) scopes.erase("quality");
  restore_blobs(net, ckpt.blobs, scopes);
  net->eval();
  return net;
}

std::vector<fs::path> predict(const fs::path& checkpoint, const fs::path& input_dir, const fs::path& out_dir) {
  const auto ckpt = load_checkpoint(checkpoint);
  if (!ckpt.has_stage(3)) throw MissingPrerequisiteCheckpoint(checkpoint.string() + " is not a stage-3 checkpoint");
  auto net = model_from_checkpoint(ckpt);
  torch::NoGradGuard no_grad;

  const auto manifest = discover_directory(input_dir, false);
  if (manifest.entries.empty()) throw EmptyDataset("no samples under " + input_dir.string());
  fs::create_directories(out_dir);
  std::vector<fs::path> written;
  for (const auto& entry : manifest.entries) {
    const auto sample = load_sample(entry, ckpt.meta.resolution);
    const auto b = single(sample);
    const auto out = net->forward(b.v, b.d, b.t);
    const auto [h, w] = native_size(entry);
    auto map = out.fusion.saliency;
    if (map.size(2) != h || map.size(3) != w) map = upsample_to(map, h, w).clamp(0.0, 1.0);
    const auto path = out_dir / (entry.id + ".png");
    write_map_png(map[0], path);
    written.push_back(path);
  }
  return written;
}

std::vector<fs::path> export_pseudo_gt(const TrainConfig& cfg, const fs::path& out_dir) {
  if (cfg.checkpoint_in.empty() || !fs::exists(cfg.checkpoint_in)) {
    throw MissingPrerequisiteCheckpoint("pseudo-GT export needs a stage-1 checkpoint (checkpoint_in)");
  }
  const auto ckpt = load_checkpoint(cfg.checkpoint_in);
  if (!ckpt.has_stage(1)) throw MissingPrerequisiteCheckpoint(cfg.checkpoint_in.string() + " lacks stage-1 parameters");
  auto net = model_from_checkpoint(ckpt);
  const bool with_qa = ckpt.has_stage(2) && net->quality;
  torch::NoGradGuard no_grad;

  const auto manifest = discover_dataset(cfg.data_root, cfg.split);
  if (manifest.entries.empty()) throw EmptyDataset("no samples under " + cfg.data_root.string());
  const int resolution = cfg.resolution;
  std::vector<fs::path> written;
  auto emit = [&](const std::string& dir, const std::string& id, const torch::Tensor& map) {
    const auto path = out_dir / dir / (id + ".png");
    fs::create_directories(path.parent_path());
    write_map_png(map[0], path);
    written.push_back(path);
  };
  for (const auto& entry : manifest.entries) {
    const auto b = single(load_sample(entry, resolution));
    const auto initial = net->extract(b.v, b.d, b.t);
    const auto targets = build_pseudo_gt(initial, b.gt, net->config().pseudo_gt_terms());
    emit("PGT_d", entry.id, targets[0].combined);
    emit("PGT_t", entry.id, targets[1].combined);
    if (with_qa) {
      const auto qa = net->assess(b.v, b.d, b.t);
      emit("QA_d", entry.id, qa.depth);
      emit("QA_t", entry.id, qa.thermal);
    }
  }
  return written;
}

}  // namespace qsf
