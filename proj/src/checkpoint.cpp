// SPDX-License-Identifier: Apache-2.0
#include "qsf/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <json.hpp>

#include "qsf/errors.hpp"

namespace qsf {
namespace {

constexpr char kMagic[8] = {'Q', 'S', 'F', 'C', 'K', 'P', 'T', '1'};

std::string top_level(const std::string& name) { return name.substr(0, name.find('.')); }

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  Reader(std::string data, std::string origin) : data_(std::move(data)), origin_(std::move(origin)) {}

  template <typename T>
  T get() {
    T value;
    std::memcpy(&value, take(sizeof(T)), sizeof(T));
    return value;
  }

  std::string get_string(std::size_t n) { return std::string(take(n), n); }

  const char* take(std::size_t n) {
    if (pos_ + n > data_.size()) throw DecodeError("truncated checkpoint " + origin_);
    const char* p = data_.data() + pos_;
    pos_ += n;
    return p;
  }

  bool done() const { return pos_ == data_.size(); }

 private:
  std::string data_;
  std::string origin_;
  std::size_t pos_ = 0;
};

void append_blob(std::string& out, const std::string& name, const torch::Tensor& t) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  out += blob_bytes(t);
}

torch::Tensor read_blob(Reader& in) {
  const auto dtype = static_cast<torch::ScalarType>(in.get<std::int8_t>());
  const auto ndim = in.get<std::uint8_t>();
  std::vector<std::int64_t> dims(ndim);
  for (auto& d : dims) d = in.get<std::int64_t>();
  const auto bytes = in.get<std::uint64_t>();
  auto t = torch::empty(dims, torch::TensorOptions().dtype(dtype));
  if (static_cast<std::uint64_t>(t.nbytes()) != bytes) throw DecodeError("checkpoint blob size disagrees with shape");
  std::memcpy(t.data_ptr(), in.take(bytes), bytes);
  return t;
}

}  // namespace

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 14695981039346656037ULL;
  for (const unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string blob_bytes(const torch::Tensor& tensor) {
  const auto t = tensor.detach().to(torch::kCPU).contiguous();
  std::string out;
  put<std::int8_t>(out, static_cast<std::int8_t>(t.scalar_type()));
  put<std::uint8_t>(out, static_cast<std::uint8_t>(t.dim()));
  for (const auto d : t.sizes()) put<std::int64_t>(out, d);
  put<std::uint64_t>(out, static_cast<std::uint64_t>(t.nbytes()));
  out.append(static_cast<const char*>(t.data_ptr()), t.nbytes());
  return out;
}

std::set<std::string> scopes_for(const std::set<int>& provenance) {
  std::set<std::string> scopes;
  if (provenance.count(1)) scopes.insert("extraction");
  if (provenance.count(2)) scopes.insert("quality");
  if (provenance.count(3)) scopes.insert("fusion");
  return scopes;
}

std::map<std::string, torch::Tensor> capture_blobs(QsfNet& net, const std::set<std::string>& scopes) {
  std::map<std::string, torch::Tensor> blobs;
  for (const auto& p : net->named_parameters()) {
    if (scopes.count(top_level(p.key()))) blobs[p.key()] = p.value().detach().clone().contiguous();
  }
  for (const auto& b : net->named_buffers()) {
    if (scopes.count(top_level(b.key()))) blobs[b.key()] = b.value().detach().clone().contiguous();
  }
  return blobs;
}

void restore_blobs(QsfNet& net, const std::map<std::string, torch::Tensor>& blobs,
                   const std::set<std::string>& scopes) {
  torch::NoGradGuard no_grad;
  auto load = [&](const std::string& name, torch::Tensor target) {
    if (!scopes.count(top_level(name))) return;
    const auto it = blobs.find(name);
    if (it == blobs.end()) throw ConfigError("checkpoint has no blob for '" + name + "'");
    if (!it->second.sizes().equals(target.sizes())) {
      throw ShapeMismatch("checkpoint blob '" + name + "' has a different shape than the model");
    }
    target.copy_(it->second);
  };
  for (const auto& p : net->named_parameters()) load(p.key(), p.value());
  for (const auto& b : net->named_buffers()) load(b.key(), b.value());
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  nlohmann::ordered_json meta;
  meta["provenance"] = std::vector<int>(ckpt.meta.provenance.begin(), ckpt.meta.provenance.end());
  meta["step"] = ckpt.meta.step;
  meta["config_fingerprint"] = ckpt.meta.config_fingerprint;
  meta["scale_preset"] = to_string(ckpt.meta.preset);
  meta["ablation"] = to_string(ckpt.meta.ablation);
  meta["cascade_order"] = to_string(ckpt.meta.order);
  meta["resolution"] = ckpt.meta.resolution;
  const std::string meta_text = meta.dump();

  std::string out(kMagic, sizeof(kMagic));
  put<std::uint64_t>(out, meta_text.size());
  out += meta_text;
  put<std::uint64_t>(out, ckpt.blobs.size() + ckpt.optimizer.size());
  for (const auto& [name, t] : ckpt.blobs) append_blob(out, name, t);
  for (const auto& [name, t] : ckpt.optimizer) append_blob(out, name, t);

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingPrerequisiteCheckpoint("cannot open checkpoint " + path.string());
  std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader in(std::move(data), path.string());
  if (std::memcmp(in.take(sizeof(kMagic)), kMagic, sizeof(kMagic)) != 0) {
    throw DecodeError(path.string() + " is not a checkpoint");
  }
  Checkpoint ckpt;
  try {
    const auto meta = nlohmann::json::parse(in.get_string(in.get<std::uint64_t>()));
    for (const int s : meta.at("provenance")) ckpt.meta.provenance.insert(s);
    ckpt.meta.step = meta.at("step").get<std::int64_t>();
    ckpt.meta.config_fingerprint = meta.at("config_fingerprint").get<std::uint64_t>();
    ckpt.meta.preset = parse_scale_preset(meta.at("scale_preset").get<std::string>());
    ckpt.meta.ablation = parse_ablation(meta.at("ablation").get<std::string>());
    ckpt.meta.order = parse_cascade_order(meta.at("cascade_order").get<std::string>());
    ckpt.meta.resolution = meta.at("resolution").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw DecodeError("bad checkpoint metadata in " + path.string() + ": " + e.what());
  }
  const auto count = in.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name = in.get_string(in.get<std::uint32_t>());
    auto t = read_blob(in);
    if (name.rfind("optim/", 0) == 0) {
      ckpt.optimizer.emplace(name, std::move(t));
    } else {
      ckpt.blobs.emplace(name, std::move(t));
    }
  }
  if (!in.done()) throw DecodeError("trailing bytes in checkpoint " + path.string());
  return ckpt;
}

}  // namespace qsf
