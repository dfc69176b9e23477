#include "condense/data.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>

#include "condense/errors.h"
#include "condense/io_util.h"
#include "condense/png_io.h"

namespace condense {

namespace fs = std::filesystem;
using nlohmann::json;

std::string split_name(Split split) { return split == Split::kTrain ? "train" : "val"; }

Split parse_split(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  throw ConfigError("unknown split '" + name + "' (expected train or val)");
}

namespace {

const std::map<std::string, Normalization>& registry() {
  static const std::map<std::string, Normalization> table = {
      {"cifar10", {{0.4914f, 0.4822f, 0.4465f}, {0.2470f, 0.2435f, 0.2616f}}},
      {"cifar100", {{0.5071f, 0.4865f, 0.4409f}, {0.2673f, 0.2564f, 0.2762f}}},
      {"tiny-imagenet", {{0.485f, 0.456f, 0.406f}, {0.229f, 0.224f, 0.225f}}},
      {"imagenet", {{0.485f, 0.456f, 0.406f}, {0.229f, 0.224f, 0.225f}}},
      {"toy10", {{0.5f, 0.5f, 0.5f}, {0.25f, 0.25f, 0.25f}}},
  };
  return table;
}

}  // namespace

Normalization normalization_for(const std::string& dataset_name) {
  const auto it = registry().find(dataset_name);
  if (it == registry().end()) {
    std::string known;
    for (const auto& [k, v] : registry()) known += (known.empty() ? "" : ", ") + k;
    throw ConfigError("no normalization constants registered for dataset '" + dataset_name +
                      "' (known: " + known + ")");
  }
  return it->second;
}

std::vector<std::string> registered_datasets() {
  std::vector<std::string> out;
  for (const auto& [k, v] : registry()) out.push_back(k);
  return out;
}

std::vector<int> LabeledDataset::indices_of(const std::vector<int>& classes) const {
  std::vector<bool> keep(num_classes, false);
  for (int c : classes) keep.at(c) = true;
  std::vector<int> out;
  for (int i = 0; i < size(); ++i) {
    if (keep[labels[i]]) out.push_back(i);
  }
  return out;
}

namespace {

LabeledDataset load_folder_tree(const fs::path& split_dir, LabeledDataset ds) {
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(split_dir)) {
    if (e.is_directory()) class_dirs.push_back(e.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) throw IngestError(split_dir.string() + ": no class folders");

  std::vector<std::string> empty_classes, bad_files;
  std::vector<std::vector<fs::path>> files(class_dirs.size());
  for (std::size_t c = 0; c < class_dirs.size(); ++c) {
    for (const auto& e : fs::directory_iterator(class_dirs[c])) {
      if (e.is_regular_file() && e.path().extension() == ".png") files[c].push_back(e.path());
    }
    std::sort(files[c].begin(), files[c].end());
    if (files[c].empty()) empty_classes.push_back(class_dirs[c].filename().string());
  }
  if (!empty_classes.empty()) {
    std::string msg = split_dir.string() + ": empty class folder(s):";
    for (const auto& c : empty_classes) msg += " " + c;
    throw IngestError(msg);
  }

  ds.num_classes = static_cast<int>(class_dirs.size());
  for (const auto& d : class_dirs) ds.class_names.push_back(d.filename().string());
  const int channels = static_cast<int>(ds.normalization.mean.size());
  std::vector<float> pixels;
  int res = 0;
  for (std::size_t c = 0; c < files.size(); ++c) {
    for (const auto& f : files[c]) {
      Image8 img;
      try {
        img = read_png(f, channels);
      } catch (const std::exception& e) {
        bad_files.push_back(f.string() + " (" + e.what() + ")");
        continue;
      }
      if (res == 0) res = img.height;
      if (img.height != res || img.width != res) {
        bad_files.push_back(f.string() + " (size " + std::to_string(img.width) + "x" +
                            std::to_string(img.height) + ", expected " + std::to_string(res) +
                            "x" + std::to_string(res) + ")");
        continue;
      }
      const std::size_t hw = static_cast<std::size_t>(res) * res;
      const std::size_t base = pixels.size();
      pixels.resize(base + hw * channels);
      for (int ch = 0; ch < channels; ++ch) {
        for (std::size_t p = 0; p < hw; ++p) {
          pixels[base + ch * hw + p] =
              ds.normalization.normalize(ch, img.pixels[p * channels + ch] / 255.0f);
        }
      }
      ds.labels.push_back(static_cast<int>(c));
    }
  }
  if (!bad_files.empty()) {
    std::string msg = "unreadable or inconsistent images:";
    for (const auto& b : bad_files) msg += "\n  " + b;
    throw IngestError(msg);
  }
  ds.resolution = res;
  ds.channels = channels;
  ds.images = Tensor<float>({ds.size(), channels, res, res}, std::move(pixels));
  return ds;
}

LabeledDataset load_cifar_binary(const std::vector<fs::path>& files, bool fine_label,
                                 int num_classes, LabeledDataset ds) {
  constexpr int kRes = 32, kChannels = 3, kPixels = kRes * kRes * kChannels;
  const int header = fine_label ? 2 : 1;
  std::vector<float> pixels;
  for (const auto& f : files) {
    if (!fs::exists(f)) throw IngestError("missing CIFAR batch file " + f.string());
    const auto bytes = read_file_bytes(f);
    if (bytes.size() % (header + kPixels) != 0) {
      throw IngestError(f.string() + ": size is not a multiple of the record length");
    }
    const std::size_t records = bytes.size() / (header + kPixels);
    for (std::size_t r = 0; r < records; ++r) {
      const std::uint8_t* rec = bytes.data() + r * (header + kPixels);
      const int label = rec[header - 1];
      if (label >= num_classes) throw IngestError(f.string() + ": label out of range");
      ds.labels.push_back(label);
      for (int ch = 0; ch < kChannels; ++ch) {
        for (int p = 0; p < kRes * kRes; ++p) {
          pixels.push_back(ds.normalization.normalize(ch, rec[header + ch * kRes * kRes + p] / 255.0f));
        }
      }
    }
  }
  ds.num_classes = num_classes;
  for (int c = 0; c < num_classes; ++c) ds.class_names.push_back(std::to_string(c));
  ds.resolution = kRes;
  ds.channels = kChannels;
  ds.images = Tensor<float>({ds.size(), kChannels, kRes, kRes}, std::move(pixels));
  return ds;
}

}  // namespace

LabeledDataset load_dataset(const fs::path& root, const std::string& name, Split split) {
  LabeledDataset ds;
  ds.name = name;
  ds.split = split;
  ds.normalization = normalization_for(name);
  if (!fs::is_directory(root)) throw IngestError("dataset root " + root.string() + " not found");

  if (fs::exists(root / "data_batch_1.bin") || fs::exists(root / "test_batch.bin")) {
    std::vector<fs::path> files;
    if (split == Split::kTrain) {
      for (int i = 1; i <= 5; ++i) files.push_back(root / ("data_batch_" + std::to_string(i) + ".bin"));
    } else {
      files.push_back(root / "test_batch.bin");
    }
    return load_cifar_binary(files, false, 10, std::move(ds));
  }
  if (fs::exists(root / "train.bin") || fs::exists(root / "test.bin")) {
    return load_cifar_binary({root / (split == Split::kTrain ? "train.bin" : "test.bin")}, true,
                             100, std::move(ds));
  }
  const fs::path split_dir = root / split_name(split);
  if (!fs::is_directory(split_dir)) {
    throw IngestError("expected class folders under " + split_dir.string());
  }
  return load_folder_tree(split_dir, std::move(ds));
}

std::string dataset_checksum(const LabeledDataset& ds) {
  ByteWriter w;
  w.put_array<float>(ds.images.values());
  w.put_array<int>(ds.labels);
  return sha256_hex(w.bytes());
}

std::vector<int> layout_labels(const std::vector<int>& class_ids, int ipc) {
  std::vector<int> out;
  out.reserve(class_ids.size() * ipc);
  for (int c : class_ids) out.insert(out.end(), ipc, c);
  return out;
}

void validate_condensed(const CondensedDataset& cd) {
  if (cd.ipc < 1) throw IntegrityError("condensed set has ipc < 1");
  const int n = static_cast<int>(cd.class_ids.size()) * cd.ipc;
  if (cd.hard_labels != layout_labels(cd.class_ids, cd.ipc)) {
    throw IntegrityError("hard labels inconsistent with class-major layout (" +
                         std::to_string(cd.class_ids.size()) + " classes x ipc " +
                         std::to_string(cd.ipc) + ")");
  }
  const Shape expected{n, cd.channels, cd.resolution, cd.resolution};
  if (cd.images.shape() != expected) {
    throw IntegrityError("condensed image tensor " + shape_str(cd.images.shape()) +
                         " does not match manifest " + shape_str(expected));
  }
  for (int c : cd.class_ids) {
    if (c < 0 || c >= cd.num_classes) throw IntegrityError("class id outside label space");
  }
  if (!all_finite(cd.images.values())) throw IntegrityError("condensed images contain non-finite values");
}

void save_condensed(const CondensedDataset& cd, const fs::path& dir, bool write_previews) {
  validate_condensed(cd);
  fs::create_directories(dir);
  ByteWriter w;
  w.put_array<float>(cd.images.values());
  write_file_atomic(dir / "images.bin", w.bytes());

  json manifest = {
      {"format", "condensed-v1"},
      {"dataset", cd.dataset},
      {"ipc", cd.ipc},
      {"num_classes", cd.num_classes},
      {"class_ids", cd.class_ids},
      {"hard_labels", cd.hard_labels},
      {"channels", cd.channels},
      {"resolution", cd.resolution},
      {"dtype", "float32-le"},
      {"order", "NCHW, index = class_slot * ipc + k"},
      {"images_sha256", sha256_hex(w.bytes())},
      {"normalization", {{"mean", cd.normalization.mean}, {"std", cd.normalization.std}}},
      {"provenance",
       {{"checkpoint_id", cd.provenance.checkpoint_id},
        {"config_hash", cd.provenance.config_hash},
        {"iterations", cd.provenance.iterations},
        {"complete", cd.provenance.complete}}},
  };
  write_text_atomic(dir / "manifest.json", manifest.dump(2));

  if (!write_previews) return;
  const std::size_t hw = static_cast<std::size_t>(cd.resolution) * cd.resolution;
  for (int i = 0; i < cd.size(); ++i) {
    Image8 img{cd.resolution, cd.resolution, cd.channels, {}};
    img.pixels.resize(hw * cd.channels);
    const float* src = cd.images.data() + static_cast<std::size_t>(i) * cd.channels * hw;
    for (int ch = 0; ch < cd.channels; ++ch) {
      for (std::size_t p = 0; p < hw; ++p) {
        const float raw = cd.normalization.denormalize(ch, src[ch * hw + p]);
        img.pixels[p * cd.channels + ch] =
            static_cast<std::uint8_t>(std::lround(std::clamp(raw, 0.0f, 1.0f) * 255.0f));
      }
    }
    write_png(dir / "previews" / std::to_string(cd.hard_labels[i]) /
                  (std::to_string(i % cd.ipc) + ".png"),
              img);
  }
}

CondensedDataset load_condensed(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) throw IntegrityError(dir.string() + ": missing manifest.json");
  json m;
  try {
    m = json::parse(read_text_file(manifest_path));
  } catch (const json::exception& e) {
    throw IntegrityError(manifest_path.string() + ": " + e.what());
  }
  CondensedDataset cd;
  std::string images_sha;
  try {
    cd.dataset = m.at("dataset").get<std::string>();
    cd.ipc = m.at("ipc").get<int>();
    cd.num_classes = m.at("num_classes").get<int>();
    cd.class_ids = m.at("class_ids").get<std::vector<int>>();
    cd.hard_labels = m.at("hard_labels").get<std::vector<int>>();
    cd.channels = m.at("channels").get<int>();
    cd.resolution = m.at("resolution").get<int>();
    images_sha = m.at("images_sha256").get<std::string>();
    cd.normalization.mean = m.at("normalization").at("mean").get<std::vector<float>>();
    cd.normalization.std = m.at("normalization").at("std").get<std::vector<float>>();
    const auto& p = m.at("provenance");
    cd.provenance.checkpoint_id = p.at("checkpoint_id").get<std::string>();
    cd.provenance.config_hash = p.at("config_hash").get<std::string>();
    cd.provenance.iterations = p.at("iterations").get<int>();
    cd.provenance.complete = p.at("complete").get<bool>();
  } catch (const json::exception& e) {
    throw IntegrityError(manifest_path.string() + ": " + e.what());
  }
  if (cd.ipc < 1) throw IntegrityError("manifest ipc must be >= 1");
  const auto bytes = read_file_bytes(dir / "images.bin");
  const std::size_t n = cd.class_ids.size() * static_cast<std::size_t>(cd.ipc);
  const std::size_t expected =
      n * cd.channels * static_cast<std::size_t>(cd.resolution) * cd.resolution;
  if (bytes.size() != expected * sizeof(float)) {
    throw IntegrityError("images.bin holds " + std::to_string(bytes.size() / sizeof(float)) +
                         " floats; manifest (" + std::to_string(cd.class_ids.size()) +
                         " classes x ipc " + std::to_string(cd.ipc) + ") implies " +
                         std::to_string(expected));
  }
  if (sha256_hex(bytes) != images_sha) throw IntegrityError("images.bin checksum mismatch");
  std::vector<float> values(expected);
  std::memcpy(values.data(), bytes.data(), bytes.size());
  cd.images = Tensor<float>({static_cast<int>(n), cd.channels, cd.resolution, cd.resolution},
                            std::move(values));
  validate_condensed(cd);
  return cd;
}

}  // namespace condense
