#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <random>

#include "condense/checkpoint.h"
#include "condense/data.h"
#include "condense/errors.h"
#include "condense/io_util.h"
#include "condense/png_io.h"
#include "condense/toy_dataset.h"
#include "support/temp_dir.h"

namespace condense {
namespace {

namespace fs = std::filesystem;
using testing::TempDir;

Checkpoint small_checkpoint(std::uint64_t seed) {
  BackboneSpec spec;
  spec.arch = Arch::kConvNet4;
  spec.width = 8;
  spec.num_classes = 4;
  Model<float> m = build_backbone<float>(spec, seed);
  // Non-trivial running statistics.
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.5f, 1.5f);
  for (auto* bn : m.bn_layers()) {
    for (auto& v : bn->running_mean()) v = u(rng) - 1.0f;
    for (auto& v : bn->running_var()) v = u(rng);
  }
  return make_checkpoint(m, spec, {3, {"mixup"}, 0.5, seed, "toy10"});
}

void flip_byte(const fs::path& p, std::size_t offset) {
  auto bytes = read_file_bytes(p);
  bytes.at(offset) ^= 0x5a;
  write_file_atomic(p, bytes);
}

TEST(Checkpoint, RoundTripPreservesEverything) {
  TempDir tmp;
  const Checkpoint ck = small_checkpoint(1);
  save_checkpoint(ck, tmp / "a.ckpt");
  const Checkpoint back = load_checkpoint(tmp / "a.ckpt");
  EXPECT_EQ(back.spec, ck.spec);
  EXPECT_EQ(back.param_layout, ck.param_layout);
  EXPECT_EQ(back.parameters, ck.parameters);
  EXPECT_EQ(back.bn_stats, ck.bn_stats);
  EXPECT_EQ(back.meta, ck.meta);
  EXPECT_EQ(checkpoint_id(back), checkpoint_id(ck));

  Model<float> a = instantiate<float>(ck);
  Model<float> b = instantiate<float>(back);
  Tensor<float> x({2, 3, 32, 32}, 0.25f);
  EXPECT_EQ(a.forward(x, nn::Mode::kEval).storage(), b.forward(x, nn::Mode::kEval).storage());
  EXPECT_EQ(extract_bn_stats(a), ck.bn_stats);
}

TEST(Checkpoint, DetectsCorruptionAndTruncation) {
  TempDir tmp;
  const Checkpoint ck = small_checkpoint(2);
  save_checkpoint(ck, tmp / "a.ckpt");
  const auto size = fs::file_size(tmp / "a.ckpt");

  fs::copy_file(tmp / "a.ckpt", tmp / "flip.ckpt");
  flip_byte(tmp / "flip.ckpt", size / 2);
  EXPECT_THROW(load_checkpoint(tmp / "flip.ckpt"), CorruptionError);

  auto bytes = read_file_bytes(tmp / "a.ckpt");
  bytes.resize(bytes.size() - 9);
  write_file_atomic(tmp / "short.ckpt", bytes);
  EXPECT_THROW(load_checkpoint(tmp / "short.ckpt"), CorruptionError);

  write_text_atomic(tmp / "junk.ckpt", "definitely not a checkpoint");
  EXPECT_THROW(load_checkpoint(tmp / "junk.ckpt"), CorruptionError);
}

TEST(Checkpoint, IdIgnoresMetadataButNotWeights) {
  Checkpoint a = small_checkpoint(3);
  Checkpoint b = a;
  b.meta.val_top1 = 0.9;
  EXPECT_EQ(checkpoint_id(a), checkpoint_id(b));
  b.parameters[0] += 1.0f;
  EXPECT_NE(checkpoint_id(a), checkpoint_id(b));
}

TEST(Checkpoint, MissingBnStatsIsStructuralError) {
  Checkpoint ck = small_checkpoint(4);
  ck.bn_stats.clear();
  EXPECT_THROW(extract_bn_stats(ck), StructuralError);
}

void write_solid_png(const fs::path& p, int res, std::uint8_t value) {
  Image8 img{res, res, 3, std::vector<std::uint8_t>(res * res * 3, value)};
  write_png(p, img);
}

TEST(Dataset, FolderTreeLoadsSortedClassesAndNormalizes) {
  TempDir tmp;
  for (const char* cls : {"b_dog", "a_cat"}) {
    for (int i = 0; i < 3; ++i) {
      write_solid_png(tmp / "train" / cls / (std::to_string(i) + ".png"), 32,
                      cls[0] == 'a' ? 255 : 0);
    }
  }
  const LabeledDataset ds = load_dataset(tmp.path(), "cifar10", Split::kTrain);
  ASSERT_EQ(ds.size(), 6);
  EXPECT_EQ(ds.num_classes, 2);
  EXPECT_EQ(ds.class_names, (std::vector<std::string>{"a_cat", "b_dog"}));
  EXPECT_EQ(ds.labels, (std::vector<int>{0, 0, 0, 1, 1, 1}));
  EXPECT_EQ(ds.images.shape(), (Shape{6, 3, 32, 32}));
  EXPECT_NEAR(ds.images.at(0, 0, 5, 5), (1.0f - 0.4914f) / 0.2470f, 1e-5);
  EXPECT_NEAR(ds.images.at(3, 2, 0, 0), (0.0f - 0.4465f) / 0.2616f, 1e-5);
  EXPECT_EQ(dataset_checksum(ds), dataset_checksum(load_dataset(tmp.path(), "cifar10", Split::kTrain)));
  EXPECT_EQ(ds.indices_of({1}), (std::vector<int>{3, 4, 5}));
}

TEST(Dataset, IngestErrorsNameTheOffender) {
  TempDir tmp;
  write_solid_png(tmp / "train" / "full" / "0.png", 32, 10);
  fs::create_directories(tmp / "train" / "hollow");
  try {
    load_dataset(tmp.path(), "cifar10", Split::kTrain);
    FAIL() << "expected IngestError";
  } catch (const IngestError& e) {
    EXPECT_NE(std::string(e.what()).find("hollow"), std::string::npos) << e.what();
  }
  write_solid_png(tmp / "train" / "hollow" / "0.png", 16, 10);
  try {
    load_dataset(tmp.path(), "cifar10", Split::kTrain);
    FAIL() << "expected IngestError";
  } catch (const IngestError& e) {
    EXPECT_NE(std::string(e.what()).find("hollow"), std::string::npos) << e.what();
  }
  EXPECT_THROW(load_dataset(tmp / "nowhere", "cifar10", Split::kTrain), IngestError);
  EXPECT_THROW(load_dataset(tmp.path(), "mnist", Split::kTrain), ConfigError);
}

TEST(Dataset, CifarBinaryBatches) {
  TempDir tmp;
  for (int b = 1; b <= 5; ++b) {
    std::vector<std::uint8_t> rec(1 + 3072, 0);
    rec[0] = static_cast<std::uint8_t>(b);
    rec[1 + 1024 + 7] = 255;  // green plane, pixel (0, 7)
    write_file_atomic(tmp / ("data_batch_" + std::to_string(b) + ".bin"), rec);
  }
  const LabeledDataset ds = load_dataset(tmp.path(), "cifar10", Split::kTrain);
  ASSERT_EQ(ds.size(), 5);
  EXPECT_EQ(ds.labels, (std::vector<int>{1, 2, 3, 4, 5}));
  EXPECT_NEAR(ds.images.at(0, 1, 0, 7), (1.0f - 0.4822f) / 0.2435f, 1e-5);
  EXPECT_NEAR(ds.images.at(0, 1, 0, 6), (0.0f - 0.4822f) / 0.2435f, 1e-5);
  EXPECT_THROW(load_dataset(tmp.path(), "cifar10", Split::kVal), IngestError);
}

CondensedDataset small_condensed() {
  CondensedDataset cd;
  cd.dataset = "toy10";
  cd.ipc = 2;
  cd.num_classes = 10;
  cd.class_ids = {3, 7};
  cd.channels = 3;
  cd.resolution = 32;
  cd.images = Tensor<float>({4, 3, 32, 32});
  std::mt19937_64 rng(5);
  std::normal_distribution<float> n(0, 1);
  for (auto& v : cd.images.storage()) v = n(rng);
  cd.hard_labels = layout_labels(cd.class_ids, cd.ipc);
  cd.normalization = normalization_for("toy10");
  cd.provenance = {"abc", "def", 10, true};
  return cd;
}

TEST(Condensed, LayoutLabelsAreClassMajor) {
  EXPECT_EQ(layout_labels({3, 7}, 2), (std::vector<int>{3, 3, 7, 7}));
}

TEST(Condensed, RoundTripWithPreviews) {
  TempDir tmp;
  const CondensedDataset cd = small_condensed();
  save_condensed(cd, tmp / "cd");
  EXPECT_TRUE(fs::exists(tmp / "cd" / "previews" / "7" / "1.png"));
  const CondensedDataset back = load_condensed(tmp / "cd");
  EXPECT_EQ(back.images.storage(), cd.images.storage());
  EXPECT_EQ(back.hard_labels, cd.hard_labels);
  EXPECT_EQ(back.class_ids, cd.class_ids);
  EXPECT_EQ(back.provenance, cd.provenance);
  EXPECT_EQ(back.normalization, cd.normalization);
  EXPECT_EQ(fs::file_size(tmp / "cd" / "images.bin"), 4u * 3 * 32 * 32 * sizeof(float));
}

TEST(Condensed, TamperingIsAnIntegrityError) {
  TempDir tmp;
  save_condensed(small_condensed(), tmp / "cd", false);

  fs::copy(tmp / "cd", tmp / "ipc", fs::copy_options::recursive);
  auto m = nlohmann::json::parse(read_text_file(tmp / "ipc" / "manifest.json"));
  m["ipc"] = 1;
  write_text_atomic(tmp / "ipc" / "manifest.json", m.dump());
  EXPECT_THROW(load_condensed(tmp / "ipc"), IntegrityError);

  fs::copy(tmp / "cd", tmp / "px", fs::copy_options::recursive);
  flip_byte(tmp / "px" / "images.bin", 100);
  EXPECT_THROW(load_condensed(tmp / "px"), IntegrityError);

  fs::copy(tmp / "cd", tmp / "short", fs::copy_options::recursive);
  auto bytes = read_file_bytes(tmp / "short" / "images.bin");
  bytes.resize(bytes.size() - 4);
  write_file_atomic(tmp / "short" / "images.bin", bytes);
  EXPECT_THROW(load_condensed(tmp / "short"), IntegrityError);

  EXPECT_THROW(load_condensed(tmp / "missing"), IntegrityError);
}

TEST(Condensed, ValidationRejectsInconsistentSets) {
  CondensedDataset cd = small_condensed();
  EXPECT_NO_THROW(validate_condensed(cd));
  cd.hard_labels[1] = 7;
  EXPECT_THROW(validate_condensed(cd), IntegrityError);
  cd = small_condensed();
  cd.images[10] = std::nanf("");
  EXPECT_THROW(validate_condensed(cd), IntegrityError);
  cd = small_condensed();
  cd.class_ids = {3, 12};
  cd.hard_labels = layout_labels(cd.class_ids, cd.ipc);
  EXPECT_THROW(validate_condensed(cd), IntegrityError);
}

TEST(Png, RoundTrip) {
  TempDir tmp;
  Image8 img{5, 4, 3, {}};
  for (int i = 0; i < 5 * 4 * 3; ++i) img.pixels.push_back(static_cast<std::uint8_t>(i * 7));
  write_png(tmp / "x.png", img);
  const Image8 back = read_png(tmp / "x.png", 3);
  EXPECT_EQ(back.height, 5);
  EXPECT_EQ(back.width, 4);
  EXPECT_EQ(back.pixels, img.pixels);
}

TEST(IoUtil, KnownDigests) {
  EXPECT_EQ(sha256_hex(std::string_view("abc")),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  const std::string s = "123456789";
  EXPECT_EQ(crc32_of({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()}), 0xCBF43926u);
}

TEST(ToyDataset, DeterministicAndLoadable) {
  TempDir tmp;
  ToyDatasetSpec spec{3, 2, 32, 11};
  write_toy_dataset(spec, tmp / "a");
  write_toy_dataset(spec, tmp / "b");
  const LabeledDataset a = load_dataset(tmp / "a", "toy10", Split::kTrain);
  const LabeledDataset b = load_dataset(tmp / "b", "toy10", Split::kTrain);
  EXPECT_EQ(a.size(), 30);
  EXPECT_EQ(a.num_classes, kToyClasses);
  EXPECT_EQ(dataset_checksum(a), dataset_checksum(b));
  EXPECT_EQ(load_dataset(tmp / "a", "toy10", Split::kVal).size(), 20);
}

}  // namespace
}  // namespace condense
