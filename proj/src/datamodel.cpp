// SPDX-License-Identifier: Apache-2.0
#include "qsf/datamodel.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <numbers>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <set>
#include <sstream>

#include "qsf/errors.hpp"
#include "qsf/kernels.hpp"

namespace fs = std::filesystem;

namespace qsf {
namespace {

constexpr const char* kModalityDirs[] = {"V", "D", "T", "GT"};

// Portable draws: the standard distributions are implementation-defined, so
// generated datasets would differ across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  int uniform_int(int lo, int hi) {  // inclusive
    return lo + static_cast<int>(engine_() % static_cast<std::uint64_t>(hi - lo + 1));
  }
  bool bernoulli(double p) { return uniform() < p; }
  double normal() {
    const double u1 = std::max(uniform(), 1e-300);
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::map<std::string, fs::path> list_pngs(const fs::path& dir) {
  std::map<std::string, fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    auto ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
    if (ext != ".png") continue;
    out[e.path().stem().string()] = e.path();
  }
  return out;
}

std::map<std::string, std::vector<std::string>> read_tags(const fs::path& path) {
  std::map<std::string, std::vector<std::string>> tags;
  std::ifstream in(path);
  if (!in) return tags;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    const std::string id = line.substr(0, tab);
    auto& list = tags[id];
    if (tab == std::string::npos) continue;
    std::stringstream rest(line.substr(tab + 1));
    std::string tag;
    while (std::getline(rest, tag, ',')) {
      if (!tag.empty()) list.push_back(tag);
    }
  }
  return tags;
}

cv::Mat read_image(const fs::path& path) {
  cv::Mat img = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (img.empty()) throw DecodeError("cannot decode image " + path.string());
  return img;
}

// Converts to float in [0, 1] with 1 or 3 channels (RGB order).
cv::Mat to_unit_float(const cv::Mat& img) {
  cv::Mat src = img;
  if (src.channels() == 4) {
    cv::cvtColor(src, src, cv::COLOR_BGRA2BGR);
  } else if (src.channels() == 2) {
    throw DecodeError("unsupported 2-channel image");
  }
  if (src.channels() == 3) cv::cvtColor(src, src, cv::COLOR_BGR2RGB);
  double scale = 1.0;
  switch (src.depth()) {
    case CV_8U: scale = 1.0 / 255.0; break;
    case CV_16U: scale = 1.0 / 65535.0; break;
    case CV_32F: scale = 1.0; break;
    default: throw DecodeError("unsupported image bit depth");
  }
  cv::Mat out;
  src.convertTo(out, CV_32F, scale);
  return out;
}

torch::Tensor mat_to_chw(const cv::Mat& m) {
  CV_Assert(m.type() == CV_32FC1 || m.type() == CV_32FC3);
  const cv::Mat cont = m.isContinuous() ? m : m.clone();
  auto t = torch::from_blob(const_cast<float*>(cont.ptr<float>()), {cont.rows, cont.cols, cont.channels()},
                            torch::kFloat32)
               .clone();
  return t.permute({2, 0, 1}).contiguous().clamp(0.0, 1.0);
}

torch::Tensor load_image_tensor(const fs::path& path, int target, bool replicate_gray) {
  cv::Mat img = to_unit_float(read_image(path));
  if (target > 0 && (img.rows != target || img.cols != target)) {
    cv::resize(img, img, cv::Size(target, target), 0, 0, cv::INTER_LINEAR);
  }
  auto t = mat_to_chw(img);
  if (t.size(0) == 1 && replicate_gray) t = t.repeat({3, 1, 1});
  return t;
}

torch::Tensor load_mask_tensor(const fs::path& path, int target) {
  cv::Mat img = to_unit_float(read_image(path));
  if (img.channels() == 3) cv::cvtColor(img, img, cv::COLOR_RGB2GRAY);
  if (target > 0 && (img.rows != target || img.cols != target)) {
    cv::resize(img, img, cv::Size(target, target), 0, 0, cv::INTER_NEAREST);
  }
  auto t = mat_to_chw(img);
  return (t >= 0.5f).to(torch::kFloat32);
}

void write_png(const cv::Mat& img, const fs::path& path) {
  const std::vector<int> params{cv::IMWRITE_PNG_COMPRESSION, 6};
  bool ok = false;
  try {
    ok = cv::imwrite(path.string(), img, params);
  } catch (const cv::Exception& e) {
    throw IoError("cannot write " + path.string() + ": " + e.what());
  }
  if (!ok) throw IoError("cannot write " + path.string());
}

cv::Mat float_to_u8(const cv::Mat& f) {
  cv::Mat out;
  f.convertTo(out, CV_8U, 255.0);  // saturating, rounds to nearest
  return out;
}

// Smooth random texture in [0, 1]: a coarse random grid upsampled bilinearly.
cv::Mat smooth_texture(Rng& rng, int res, int cells) {
  cv::Mat grid(cells, cells, CV_32F);
  for (int y = 0; y < cells; ++y) {
    for (int x = 0; x < cells; ++x) grid.at<float>(y, x) = static_cast<float>(rng.uniform());
  }
  cv::Mat out;
  cv::resize(grid, out, cv::Size(res, res), 0, 0, cv::INTER_LINEAR);
  return out;
}

void add_noise(cv::Mat& img, Rng& rng, double sigma) {
  if (sigma <= 0.0) return;
  auto* p = img.ptr<float>();
  const auto n = static_cast<std::size_t>(img.total()) * img.channels();
  for (std::size_t i = 0; i < n; ++i) p[i] += static_cast<float>(sigma * rng.normal());
}

void clamp_unit(cv::Mat& img) {
  cv::max(img, 0.0, img);
  cv::min(img, 1.0, img);
}

struct Shape {
  int kind = 0;  // 0 ellipse, 1 rectangle, 2 triangle
  cv::Point center;
  cv::Size axes;
  double angle = 0.0;
  cv::Vec3f color;
  float depth = 0.0f;
  float heat = 0.0f;
};

void draw_shape(cv::Mat& canvas, const Shape& s, const cv::Scalar& value) {
  switch (s.kind) {
    case 0:
      cv::ellipse(canvas, s.center, s.axes, s.angle, 0, 360, value, cv::FILLED, cv::LINE_8);
      break;
    case 1: {
      const cv::RotatedRect rr(s.center, cv::Size2f(2.0f * s.axes.width, 2.0f * s.axes.height),
                               static_cast<float>(s.angle));
      cv::Point2f corners[4];
      rr.points(corners);
      std::vector<cv::Point> poly;
      for (const auto& c : corners) poly.emplace_back(cvRound(c.x), cvRound(c.y));
      cv::fillConvexPoly(canvas, poly, value, cv::LINE_8);
      break;
    }
    default: {
      std::vector<cv::Point> poly;
      for (int k = 0; k < 3; ++k) {
        const double a = s.angle * std::numbers::pi / 180.0 + k * 2.0 * std::numbers::pi / 3.0;
        poly.emplace_back(s.center.x + cvRound(s.axes.width * 1.3 * std::cos(a)),
                          s.center.y + cvRound(s.axes.height * 1.3 * std::sin(a)));
      }
      cv::fillConvexPoly(canvas, poly, value, cv::LINE_8);
      break;
    }
  }
}

cv::Mat shape_mask(int res, const Shape& s) {
  cv::Mat m = cv::Mat::zeros(res, res, CV_8U);
  draw_shape(m, s, cv::Scalar(255));
  return m;
}

// Renders one scene; returns tags.
std::vector<std::string> render_scene(const SynthConfig& cfg, std::uint64_t seed, cv::Mat& visible,
                                      cv::Mat& depth, cv::Mat& thermal, cv::Mat& gt) {
  Rng rng(seed);
  const int res = cfg.resolution;
  std::vector<std::string> tags;

  const int count = rng.uniform_int(cfg.min_objects, cfg.max_objects);
  std::vector<Shape> shapes;
  for (int i = 0; i < count; ++i) {
    Shape s;
    s.kind = rng.uniform_int(0, 2);
    s.center = cv::Point(rng.uniform_int(res / 4, 3 * res / 4), rng.uniform_int(res / 4, 3 * res / 4));
    s.axes = cv::Size(std::max(2, static_cast<int>(res * rng.uniform(0.1, 0.22))),
                      std::max(2, static_cast<int>(res * rng.uniform(0.1, 0.22))));
    s.angle = rng.uniform(0.0, 180.0);
    s.color = cv::Vec3f(static_cast<float>(rng.uniform(0.5, 1.0)), static_cast<float>(rng.uniform(0.0, 0.6)),
                        static_cast<float>(rng.uniform(0.0, 1.0)));
    s.depth = static_cast<float>(rng.uniform(0.7, 1.0));
    s.heat = static_cast<float>(rng.uniform(0.75, 1.0));
    shapes.push_back(s);
  }

  gt = cv::Mat::zeros(res, res, CV_8U);
  std::vector<cv::Mat> masks;
  for (const auto& s : shapes) {
    masks.push_back(shape_mask(res, s));
    gt |= masks.back();
  }

  // Visible: textured colored background, colored objects.
  {
    const cv::Vec3f base(static_cast<float>(rng.uniform(0.1, 0.5)), static_cast<float>(rng.uniform(0.2, 0.6)),
                         static_cast<float>(rng.uniform(0.1, 0.5)));
    cv::Mat tex = smooth_texture(rng, res, 6);
    visible = cv::Mat(res, res, CV_32FC3);
    for (int y = 0; y < res; ++y) {
      for (int x = 0; x < res; ++x) {
        const float t = 0.6f + 0.8f * tex.at<float>(y, x);
        visible.at<cv::Vec3f>(y, x) = base * t;
      }
    }
    const bool dropped = rng.bernoulli(cfg.visible.drop_object_prob);
    const bool low_contrast =
        cfg.visible.contrast_scale < 1.0 && rng.bernoulli(cfg.visible_low_contrast_prob);
    const double contrast = low_contrast ? cfg.visible.contrast_scale : 1.0;
    if (dropped) tags.push_back("V-NO");
    if (low_contrast) tags.push_back("V-LC");
    if (!dropped) {
      for (std::size_t i = 0; i < shapes.size(); ++i) {
        const cv::Vec3f target = base + static_cast<float>(contrast) * (shapes[i].color - base);
        visible.setTo(cv::Scalar(target[0], target[1], target[2]), masks[i]);
      }
    }
    if (rng.bernoulli(cfg.visible.background_hotspot_prob)) {
      tags.push_back("V-BI");
      Shape h;
      h.kind = 0;
      h.center = cv::Point(rng.uniform_int(0, res - 1), rng.uniform_int(0, res - 1));
      h.axes = cv::Size(res / 10 + 1, res / 10 + 1);
      cv::ellipse(visible, h.center, h.axes, 0, 0, 360, cv::Scalar(0.95, 0.9, 0.2), cv::FILLED, cv::LINE_8);
    }
    add_noise(visible, rng, cfg.visible.noise_sigma);
    clamp_unit(visible);
  }

  // Depth and thermal share the single-channel rendering path.
  auto render_single = [&](const ModalityDegradation& deg, const char* prefix, bool thermal_like) {
    cv::Mat tex = smooth_texture(rng, res, 4);
    cv::Mat img(res, res, CV_32F);
    const float lo = thermal_like ? 0.15f : 0.1f;
    const float span = thermal_like ? 0.2f : 0.3f;
    for (int y = 0; y < res; ++y) {
      for (int x = 0; x < res; ++x) {
        const float ramp = thermal_like ? 0.0f : 0.15f * static_cast<float>(y) / static_cast<float>(res);
        img.at<float>(y, x) = lo + span * tex.at<float>(y, x) + ramp;
      }
    }
    const bool dropped = rng.bernoulli(deg.drop_object_prob);
    if (dropped) tags.push_back(std::string(prefix) + "-NO");
    if (deg.contrast_scale < 1.0) tags.push_back(std::string(prefix) + "-LC");
    if (!dropped) {
      const float bg = lo + 0.5f * span;
      for (std::size_t i = 0; i < shapes.size(); ++i) {
        const float v = thermal_like ? shapes[i].heat : shapes[i].depth;
        const float target = bg + static_cast<float>(deg.contrast_scale) * (v - bg);
        img.setTo(cv::Scalar(target), masks[i]);
      }
    }
    if (rng.bernoulli(deg.background_hotspot_prob)) {
      tags.push_back(std::string(prefix) + "-BI");
      const int spots = rng.uniform_int(1, 2);
      for (int k = 0; k < spots; ++k) {
        const cv::Point c(rng.uniform_int(0, res - 1), rng.uniform_int(0, res - 1));
        const cv::Size axes(static_cast<int>(res * rng.uniform(0.08, 0.16)) + 1,
                            static_cast<int>(res * rng.uniform(0.08, 0.16)) + 1);
        cv::ellipse(img, c, axes, rng.uniform(0.0, 180.0), 0, 360, cv::Scalar(rng.uniform(0.75, 1.0)),
                    cv::FILLED, cv::LINE_8);
      }
    }
    add_noise(img, rng, deg.noise_sigma);
    clamp_unit(img);
    return img;
  };
  depth = render_single(cfg.depth, "D", false);
  thermal = render_single(cfg.thermal, "T", true);
  return tags;
}

void check_prob(double p, const char* name) {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string(name) + " must lie in [0, 1]");
}

ModalityDegradation read_degradation(const FlatConfig& cfg, const std::string& prefix) {
  ModalityDegradation d;
  d.drop_object_prob = cfg.get_double(prefix + ".drop_object_prob", d.drop_object_prob);
  d.contrast_scale = cfg.get_double(prefix + ".contrast_scale", d.contrast_scale);
  d.noise_sigma = cfg.get_double(prefix + ".noise_sigma", d.noise_sigma);
  d.background_hotspot_prob = cfg.get_double(prefix + ".background_hotspot_prob", d.background_hotspot_prob);
  return d;
}

torch::Tensor resize_image(const torch::Tensor& img, std::int64_t h, std::int64_t w) {
  namespace F = torch::nn::functional;
  return F::interpolate(img.unsqueeze(0), F::InterpolateFuncOptions()
                                              .size(std::vector<std::int64_t>{h, w})
                                              .mode(torch::kBilinear)
                                              .align_corners(false))
      .squeeze(0);
}

torch::Tensor resize_mask(const torch::Tensor& mask, std::int64_t h, std::int64_t w) {
  namespace F = torch::nn::functional;
  return F::interpolate(mask.unsqueeze(0),
                        F::InterpolateFuncOptions().size(std::vector<std::int64_t>{h, w}).mode(torch::kNearest))
      .squeeze(0);
}

}  // namespace

std::string to_string(Split split) { return split == Split::kTrain ? "train" : "test"; }

Split parse_split(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "test") return Split::kTest;
  throw ConfigError("unknown split '" + name + "' (expected train or test)");
}

void SynthConfig::validate() const {
  if (num_samples <= 0) throw ConfigError("num_samples must be positive");
  if (resolution < 32 || resolution % 32 != 0) {
    throw ConfigError("resolution must be >= 32 and divisible by 32");
  }
  if (min_objects < 1 || max_objects < min_objects) throw ConfigError("object count range is invalid");
  for (const auto* d : {&visible, &depth, &thermal}) {
    check_prob(d->drop_object_prob, "drop_object_prob");
    check_prob(d->background_hotspot_prob, "background_hotspot_prob");
    if (d->contrast_scale < 0.0 || d->noise_sigma < 0.0) {
      throw ConfigError("contrast_scale and noise_sigma must be non-negative");
    }
  }
  check_prob(visible_low_contrast_prob, "visible_low_contrast_prob");
}

SynthConfig SynthConfig::from_config(const FlatConfig& cfg) {
  SynthConfig s;
  s.num_samples = static_cast<int>(cfg.get_int("num_samples", s.num_samples));
  s.resolution = static_cast<int>(cfg.get_int("resolution", s.resolution));
  s.min_objects = static_cast<int>(cfg.get_int("min_objects", s.min_objects));
  s.max_objects = static_cast<int>(cfg.get_int("max_objects", s.max_objects));
  s.visible = read_degradation(cfg, "visible");
  s.depth = read_degradation(cfg, "depth");
  s.thermal = read_degradation(cfg, "thermal");
  s.visible_low_contrast_prob = cfg.get_double("visible.low_contrast_prob", s.visible_low_contrast_prob);
  s.seed = static_cast<std::uint64_t>(cfg.get_int("seed", 0));
  s.split = parse_split(cfg.get_string("split", "train"));
  s.validate();
  return s;
}

DatasetManifest discover_directory(const fs::path& dir, bool require_gt) {
  const auto v = list_pngs(dir / "V");
  const auto d = list_pngs(dir / "D");
  const auto t = list_pngs(dir / "T");
  const auto g = list_pngs(dir / "GT");

  std::set<std::string> stems;
  for (const auto* m : {&v, &d, &t}) {
    for (const auto& [stem, _] : *m) stems.insert(stem);
  }
  if (require_gt) {
    for (const auto& [stem, _] : g) stems.insert(stem);
  }
  if (stems.empty()) throw EmptyDataset("no samples found under " + dir.string());

  DatasetManifest manifest;
  manifest.root = dir;
  for (const auto& stem : stems) {
    ManifestEntry e;
    e.id = stem;
    auto pick = [&](const std::map<std::string, fs::path>& m, const char* modality) {
      const auto it = m.find(stem);
      if (it == m.end()) {
        throw MissingModality("sample '" + stem + "' has no " + modality + " image under " + dir.string());
      }
      return it->second;
    };
    e.visible = pick(v, "V");
    e.depth = pick(d, "D");
    e.thermal = pick(t, "T");
    if (require_gt) {
      e.gt = pick(g, "GT");
    } else if (const auto it = g.find(stem); it != g.end()) {
      e.gt = it->second;
    }
    manifest.entries.push_back(std::move(e));
  }
  manifest.challenge_tags = read_tags(dir / "manifest.tsv");
  return manifest;
}

DatasetManifest discover_dataset(const fs::path& root, Split split) {
  const fs::path dir = root / to_string(split);
  for (const char* sub : kModalityDirs) {
    if (!fs::is_directory(dir / sub)) {
      throw MissingModality("dataset split directory " + dir.string() + " lacks " + sub + "/");
    }
  }
  auto manifest = discover_directory(dir, true);
  manifest.root = root;
  manifest.split = split;
  return manifest;
}

TripleModalSample load_sample(const ManifestEntry& entry, int target_resolution) {
  if (target_resolution < 0 || target_resolution % 32 != 0) {
    throw ResolutionError("target resolution " + std::to_string(target_resolution) +
                          " is not a multiple of 32");
  }
  TripleModalSample s;
  s.id = entry.id;
  s.visible = load_image_tensor(entry.visible, target_resolution, true);
  s.depth = load_image_tensor(entry.depth, target_resolution, true);
  s.thermal = load_image_tensor(entry.thermal, target_resolution, true);
  if (target_resolution == 0) {
    // Native size: modalities must already agree.
    const auto h = s.visible.size(1);
    const auto w = s.visible.size(2);
    auto match = [&](torch::Tensor& t) {
      if (t.size(1) != h || t.size(2) != w) t = resize_image(t, h, w);
    };
    match(s.depth);
    match(s.thermal);
  }
  if (!entry.gt.empty()) {
    s.gt = load_mask_tensor(entry.gt, target_resolution);
    if (s.gt.size(1) != s.visible.size(1) || s.gt.size(2) != s.visible.size(2)) {
      s.gt = resize_mask(s.gt, s.visible.size(1), s.visible.size(2));
    }
  } else {
    s.gt = torch::zeros({1, s.visible.size(1), s.visible.size(2)});
  }
  for (auto* t : {&s.visible, &s.depth, &s.thermal}) {
    if (t->size(0) != 3) throw DecodeError("sample '" + entry.id + "' has an image with unsupported channels");
  }
  s.edge_gt = derive_edge_gt(s.gt);
  return s;
}

std::pair<int, int> native_size(const ManifestEntry& entry) {
  const fs::path& p = entry.gt.empty() ? entry.visible : entry.gt;
  const cv::Mat img = read_image(p);
  return {img.rows, img.cols};
}

torch::Tensor derive_edge_gt(const torch::Tensor& gt) {
  TORCH_CHECK(gt.dim() == 2 || (gt.dim() == 3 && gt.size(0) == 1), "derive_edge_gt expects [H,W] or [1,H,W]");
  const auto h = gt.size(-2);
  const auto w = gt.size(-1);
  auto src = gt.to(torch::kFloat32).contiguous();
  auto out = torch::empty_like(src);
  kernels::parallel::edge_gt(
      std::span<const float>(src.data_ptr<float>(), static_cast<std::size_t>(src.numel())),
      static_cast<int>(h), static_cast<int>(w),
      std::span<float>(out.data_ptr<float>(), static_cast<std::size_t>(out.numel())));
  return out;
}

bool AugmentParams::is_identity() const {
  return !flip && quarter_turns % 4 == 0 && crop_top == 0 && crop_left == 0 && crop_height == 0 &&
         crop_width == 0;
}

AugmentParams draw_augment(std::mt19937_64& engine, std::int64_t height, std::int64_t width) {
  Rng rng(engine());
  AugmentParams p;
  p.flip = rng.bernoulli(0.5);
  p.quarter_turns = rng.uniform_int(0, 3);
  // Rotation by an odd number of quarter turns swaps the axes.
  const auto h = static_cast<int>(p.quarter_turns % 2 ? width : height);
  const auto w = static_cast<int>(p.quarter_turns % 2 ? height : width);
  const int max_dh = h / 10;
  const int max_dw = w / 10;
  const int dh = max_dh > 0 ? rng.uniform_int(0, max_dh) : 0;
  const int dw = max_dw > 0 ? rng.uniform_int(0, max_dw) : 0;
  if (dh > 0 || dw > 0) {
    p.crop_height = h - dh;
    p.crop_width = w - dw;
    p.crop_top = dh > 0 ? rng.uniform_int(0, dh) : 0;
    p.crop_left = dw > 0 ? rng.uniform_int(0, dw) : 0;
  }
  return p;
}

TripleModalSample apply_augment(const TripleModalSample& sample, const AugmentParams& params) {
  if (params.is_identity()) return sample;
  auto geometric = [&](const torch::Tensor& t, bool is_mask) {
    torch::Tensor out = t;
    if (params.flip) out = out.flip({2});
    if (params.quarter_turns % 4 != 0) out = torch::rot90(out, params.quarter_turns % 4, {1, 2});
    if (params.crop_height > 0 && params.crop_width > 0) {
      const auto h = out.size(1);
      const auto w = out.size(2);
      out = out.slice(1, params.crop_top, params.crop_top + params.crop_height)
                .slice(2, params.crop_left, params.crop_left + params.crop_width);
      out = is_mask ? resize_mask(out, h, w) : resize_image(out, h, w).clamp(0.0, 1.0);
    }
    return out.contiguous();
  };
  TripleModalSample out;
  out.id = sample.id;
  out.visible = geometric(sample.visible, false);
  out.depth = geometric(sample.depth, false);
  out.thermal = geometric(sample.thermal, false);
  out.gt = geometric(sample.gt, true);
  out.edge_gt = derive_edge_gt(out.gt);
  return out;
}

TripleModalSample augment_sample(const TripleModalSample& sample, std::mt19937_64& rng) {
  return apply_augment(sample, draw_augment(rng, sample.height(), sample.width()));
}

DatasetManifest synthesize_dataset(const SynthConfig& cfg, const fs::path& out_root) {
  cfg.validate();
  const fs::path dir = out_root / to_string(cfg.split);
  try {
    for (const char* sub : kModalityDirs) fs::create_directories(dir / sub);
  } catch (const fs::filesystem_error& e) {
    throw IoError(std::string("cannot create dataset directories: ") + e.what());
  }

  const int n = cfg.num_samples;
  std::vector<std::string> ids(static_cast<std::size_t>(n));
  std::vector<std::vector<std::string>> tags(static_cast<std::size_t>(n));
  std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    try {
      char name[32];
      std::snprintf(name, sizeof(name), "synth_%05d", i);
      ids[i] = name;
      cv::Mat visible, depth, thermal, gt;
      tags[i] = render_scene(cfg, splitmix64(cfg.seed ^ splitmix64(static_cast<std::uint64_t>(i))), visible,
                             depth, thermal, gt);
      cv::Mat bgr;
      cv::cvtColor(float_to_u8(visible), bgr, cv::COLOR_RGB2BGR);
      const std::string file = ids[i] + ".png";
      write_png(bgr, dir / "V" / file);
      write_png(float_to_u8(depth), dir / "D" / file);
      write_png(float_to_u8(thermal), dir / "T" / file);
      write_png(gt, dir / "GT" / file);
    } catch (...) {
#pragma omp critical(qsf_synth_failure)
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);

  {
    std::ofstream tsv(dir / "manifest.tsv", std::ios::binary);
    if (!tsv) throw IoError("cannot write " + (dir / "manifest.tsv").string());
    for (int i = 0; i < n; ++i) {
      tsv << ids[i] << '\t';
      for (std::size_t k = 0; k < tags[i].size(); ++k) tsv << (k ? "," : "") << tags[i][k];
      tsv << '\n';
    }
  }
  return discover_dataset(out_root, cfg.split);
}

void write_map_png(const torch::Tensor& map, const fs::path& path) {
  auto m = map.detach().to(torch::kCPU, torch::kFloat32).squeeze().contiguous();
  TORCH_CHECK(m.dim() == 2, "write_map_png expects a single-channel map");
  auto u8 = m.clamp(0.0, 1.0).mul(255.0).round().to(torch::kUInt8).contiguous();
  cv::Mat img(static_cast<int>(u8.size(0)), static_cast<int>(u8.size(1)), CV_8U, u8.data_ptr<std::uint8_t>());
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_png(img, path);
}

torch::Tensor read_map_png(const fs::path& path) {
  cv::Mat img = to_unit_float(read_image(path));
  if (img.channels() == 3) cv::cvtColor(img, img, cv::COLOR_RGB2GRAY);
  return mat_to_chw(img).squeeze(0);
}

}  // namespace qsf
