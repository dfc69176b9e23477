#include "condense/checkpoint.h"

#include <algorithm>

#include <nlohmann/json.hpp>

#include "condense/errors.h"
#include "condense/io_util.h"

namespace condense {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'C', 'N', 'D', 'S', 'C', 'K', 'P', 'T'};

json spec_to_json(const BackboneSpec& s) {
  return {{"arch", arch_name(s.arch)},       {"input_resolution", s.input_resolution},
          {"num_classes", s.num_classes},     {"small_input_mode", s.small_input_mode},
          {"channels", s.channels},           {"width", s.width},
          {"depth", s.depth}};
}

BackboneSpec spec_from_json(const json& j) {
  BackboneSpec s;
  s.arch = parse_arch(j.at("arch").get<std::string>());
  s.input_resolution = j.at("input_resolution").get<int>();
  s.num_classes = j.at("num_classes").get<int>();
  s.small_input_mode = j.at("small_input_mode").get<bool>();
  s.channels = j.at("channels").get<int>();
  s.width = j.at("width").get<int>();
  s.depth = j.at("depth").get<int>();
  return s;
}

}  // namespace

template <typename T>
Checkpoint make_checkpoint(Model<T>& model, const BackboneSpec& spec, CheckpointMeta meta) {
  Checkpoint ck;
  ck.spec = spec;
  ck.meta = std::move(meta);
  for (const auto& p : model.params()) {
    ck.param_layout.push_back({p.name, p.value->shape()});
    for (T v : p.value->values()) ck.parameters.push_back(static_cast<float>(v));
  }
  ck.bn_stats = extract_bn_stats(model);
  return ck;
}

template <typename T>
Model<T> instantiate(const Checkpoint& checkpoint) {
  Model<T> model = build_backbone<T>(checkpoint.spec, 0);
  auto params = model.params();
  if (params.size() != checkpoint.param_layout.size()) {
    throw StructuralError("checkpoint has " + std::to_string(checkpoint.param_layout.size()) +
                          " parameter tensors, architecture expects " +
                          std::to_string(params.size()));
  }
  std::size_t offset = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& entry = checkpoint.param_layout[i];
    if (entry.name != params[i].name || entry.shape != params[i].value->shape()) {
      throw StructuralError("checkpoint parameter " + entry.name + " " + shape_str(entry.shape) +
                            " does not match " + params[i].name + " " +
                            shape_str(params[i].value->shape()));
    }
    if (offset + params[i].value->size() > checkpoint.parameters.size()) {
      throw StructuralError("checkpoint parameter blob too short");
    }
    for (auto& v : params[i].value->values()) v = static_cast<T>(checkpoint.parameters[offset++]);
  }
  auto bns = model.bn_layers();
  if (bns.size() != checkpoint.bn_stats.size()) {
    throw StructuralError("checkpoint has " + std::to_string(checkpoint.bn_stats.size()) +
                          " BN layers, architecture expects " + std::to_string(bns.size()));
  }
  for (std::size_t l = 0; l < bns.size(); ++l) {
    const auto& s = checkpoint.bn_stats[l];
    if (static_cast<int>(s.running_mean.size()) != bns[l]->channels()) {
      throw StructuralError("BN layer " + std::to_string(l) + " channel mismatch");
    }
    std::transform(s.running_mean.begin(), s.running_mean.end(), bns[l]->running_mean().begin(),
                   [](float v) { return static_cast<T>(v); });
    std::transform(s.running_var.begin(), s.running_var.end(), bns[l]->running_var().begin(),
                   [](float v) { return static_cast<T>(v); });
  }
  return model;
}

std::vector<BNLayerStats> extract_bn_stats(const Checkpoint& checkpoint) {
  if (checkpoint.bn_stats.empty()) {
    throw StructuralError("checkpoint has no batch-normalization layers; unusable for recovery");
  }
  return checkpoint.bn_stats;
}

std::string checkpoint_id(const Checkpoint& checkpoint) {
  ByteWriter w;
  w.put_bytes(arch_name(checkpoint.spec.arch));
  w.put_array<float>(checkpoint.parameters);
  for (const auto& s : checkpoint.bn_stats) {
    w.put_array<float>(s.running_mean);
    w.put_array<float>(s.running_var);
  }
  return sha256_hex(w.bytes()).substr(0, 16);
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  json header;
  header["spec"] = spec_to_json(ck.spec);
  header["meta"] = {{"epochs_trained", ck.meta.epochs_trained},
                    {"augmentations_used", ck.meta.augmentations_used},
                    {"val_top1", ck.meta.val_top1},
                    {"seed", ck.meta.seed},
                    {"dataset", ck.meta.dataset}};
  json params = json::array();
  for (const auto& p : ck.param_layout) params.push_back({{"name", p.name}, {"shape", p.shape}});
  header["params"] = params;
  json bns = json::array();
  for (const auto& s : ck.bn_stats) {
    bns.push_back({{"index", s.layer_index}, {"channels", s.running_mean.size()}});
  }
  header["bn_layers"] = bns;
  const std::string text = header.dump();

  ByteWriter w;
  w.put_bytes(std::string_view(kMagic, sizeof(kMagic)));
  w.put(kCheckpointFormatVersion);
  w.put(static_cast<std::uint64_t>(text.size()));
  w.put_bytes(text);
  w.put(static_cast<std::uint64_t>(ck.parameters.size()));
  w.put_array<float>(ck.parameters);
  std::uint64_t bn_count = 0;
  for (const auto& s : ck.bn_stats) bn_count += s.running_mean.size() + s.running_var.size();
  w.put(bn_count);
  for (const auto& s : ck.bn_stats) {
    w.put_array<float>(s.running_mean);
    w.put_array<float>(s.running_var);
  }
  w.put(crc32_of(w.bytes()));
  write_file_atomic(path, w.bytes());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  const std::string what = "checkpoint " + path.string();
  if (bytes.size() < sizeof(kMagic) + 4 ||
      std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CorruptionError(what + ": not a checkpoint file (bad magic)");
  }
  ByteReader r(bytes, what);
  r.get_string(sizeof(kMagic));
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointFormatVersion) {
    throw CorruptionError(what + ": format version " + std::to_string(version) +
                          " unsupported (expected " + std::to_string(kCheckpointFormatVersion) +
                          ")");
  }
  const auto header_len = r.get<std::uint64_t>();
  const std::string text = r.get_string(header_len);
  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    throw CorruptionError(what + ": malformed header: " + e.what());
  }

  Checkpoint ck;
  try {
    ck.spec = spec_from_json(header.at("spec"));
    const auto& m = header.at("meta");
    ck.meta.epochs_trained = m.at("epochs_trained").get<int>();
    ck.meta.augmentations_used = m.at("augmentations_used").get<std::vector<std::string>>();
    ck.meta.val_top1 = m.at("val_top1").get<double>();
    ck.meta.seed = m.at("seed").get<std::uint64_t>();
    ck.meta.dataset = m.at("dataset").get<std::string>();
    for (const auto& p : header.at("params")) {
      ck.param_layout.push_back({p.at("name").get<std::string>(), p.at("shape").get<Shape>()});
    }
  } catch (const json::exception& e) {
    throw CorruptionError(what + ": header missing fields: " + e.what());
  }

  const auto n_params = r.get<std::uint64_t>();
  std::size_t expected = 0;
  for (const auto& p : ck.param_layout) expected += shape_numel(p.shape);
  if (n_params != expected) {
    throw CorruptionError(what + ": parameter blob holds " + std::to_string(n_params) +
                          " values, layout declares " + std::to_string(expected));
  }
  ck.parameters.resize(n_params);
  r.get_array<float>(ck.parameters);
  const auto n_bn = r.get<std::uint64_t>();
  std::uint64_t declared = 0;
  for (const auto& b : header.at("bn_layers")) declared += 2 * b.at("channels").get<std::uint64_t>();
  if (n_bn != declared) throw CorruptionError(what + ": BN blob size disagrees with header");
  for (const auto& b : header.at("bn_layers")) {
    BNLayerStats s;
    s.layer_index = b.at("index").get<int>();
    const auto c = b.at("channels").get<std::size_t>();
    s.running_mean.resize(c);
    s.running_var.resize(c);
    r.get_array<float>(s.running_mean);
    r.get_array<float>(s.running_var);
    ck.bn_stats.push_back(std::move(s));
  }
  const std::size_t body_len = r.position();
  const auto stored_crc = r.get<std::uint32_t>();
  if (r.remaining() != 0) throw CorruptionError(what + ": trailing bytes after checksum");
  if (crc32_of(std::span(bytes.data(), body_len)) != stored_crc) {
    throw CorruptionError(what + ": checksum mismatch");
  }
  return ck;
}

template Checkpoint make_checkpoint<float>(Model<float>&, const BackboneSpec&, CheckpointMeta);
template Checkpoint make_checkpoint<double>(Model<double>&, const BackboneSpec&, CheckpointMeta);
template Model<float> instantiate<float>(const Checkpoint&);
template Model<double> instantiate<double>(const Checkpoint&);

}  // namespace condense
