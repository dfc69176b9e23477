#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <cstdlib>

#include "condense/errors.h"
#include "condense/io_util.h"
#include "condense/pipeline.h"
#include "condense/toy_dataset.h"
#include "support/temp_dir.h"

namespace condense {
namespace {

namespace fs = std::filesystem;
using testing::TempDir;

class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    data_root_ = new fs::path(fs::temp_directory_path() /
                              ("condense_pipeline_data_" + std::to_string(::getpid())));
    ToyDatasetSpec spec;
    spec.train_per_class = 4;
    spec.val_per_class = 2;
    spec.seed = 3;
    write_toy_dataset(spec, *data_root_);
  }
  static void TearDownTestSuite() {
    fs::remove_all(*data_root_);
    delete data_root_;
  }

  ExperimentConfig tiny(const std::string& name) const {
    ExperimentConfig cfg = default_experiment("toy10", 32, 5);
    cfg.name = name;
    cfg.data_root = *data_root_;
    cfg.output_root = tmp_.path();
    cfg.squeeze_spec.arch = Arch::kConvNet4;
    cfg.squeeze_spec.width = 8;
    cfg.squeeze.epochs = 1;
    cfg.squeeze.batch_size = 8;
    cfg.squeeze.augmentations.clear();
    cfg.class_ids = {0, 1};
    cfg.recover.ipc = 1;
    cfg.recover.iterations = 3;
    cfg.relabel.epochs = 2;
    cfg.eval.student = cfg.squeeze_spec;
    cfg.eval.epochs = 2;
    cfg.eval.batch_size = 2;
    return cfg;
  }

  static nlohmann::json manifest(const fs::path& dir) {
    return nlohmann::json::parse(read_text_file(dir / "run_manifest.json"));
  }

  static fs::path* data_root_;
  TempDir tmp_;
};

fs::path* Pipeline::data_root_ = nullptr;

TEST(ExperimentConfigIni, DefaultsUnknownKeysAndBadNumbers) {
  const ExperimentConfig cfg = parse_experiment_config("[experiment]\ndataset = toy10\nseed = 7\n");
  EXPECT_EQ(experiment_config_hash(cfg), experiment_config_hash(default_experiment("toy10", 32, 7)));
  EXPECT_EQ(cfg.relabel.temperature, 20.0);
  EXPECT_EQ(default_experiment("cifar10", 32).relabel.temperature, 30.0);
  EXPECT_THROW(parse_experiment_config("[eval]\nepochz = 3\n"), ConfigError);
  EXPECT_THROW(parse_experiment_config("[eval]\nepochs = three\n"), ConfigError);
  EXPECT_THROW(parse_experiment_config("[bogus]\nx = 1\n"), ConfigError);
}

TEST(ExperimentConfigIni, RoundTripPreservesHash) {
  ExperimentConfig cfg = default_experiment("toy10", 32, 2);
  cfg.recover.iterations = 17;
  cfg.relabel.precision = LabelPrecision::kTopK;
  cfg.relabel.top_k = 3;
  cfg.class_ids = {1, 4};
  cfg.continual_enabled = true;
  cfg.continual.steps = 2;
  const ExperimentConfig back = parse_experiment_config(experiment_config_ini(cfg));
  EXPECT_EQ(experiment_config_hash(back), experiment_config_hash(cfg));
  EXPECT_EQ(experiment_config_ini(back), experiment_config_ini(cfg));
}

TEST(ExperimentConfigIni, HashTracksOutputsNotLocations) {
  const ExperimentConfig base = default_experiment("toy10", 32, 2);
  ExperimentConfig moved = base;
  moved.name = "other";
  moved.output_root = "/elsewhere";
  moved.data_root = "/data";
  EXPECT_EQ(experiment_config_hash(moved), experiment_config_hash(base));
  ExperimentConfig changed = base;
  changed.relabel.temperature = 4;
  EXPECT_NE(experiment_config_hash(changed), experiment_config_hash(base));
  changed = base;
  changed.eval.seed = 99;
  EXPECT_NE(experiment_config_hash(changed), experiment_config_hash(base));
}

TEST(ExperimentConfigIni, ValidationErrors) {
  ExperimentConfig cfg = default_experiment("toy10", 32);
  cfg.eval.epochs = cfg.relabel.epochs + 1;
  EXPECT_THROW(validate_experiment(cfg), ConfigError);
  cfg = default_experiment("toy10", 32);
  cfg.class_ids = {1, 1};
  EXPECT_THROW(validate_experiment(cfg), ConfigError);
  cfg.class_ids = {12};
  EXPECT_THROW(validate_experiment(cfg), ConfigError);
  cfg = default_experiment("toy10", 32);
  cfg.name = "../escape";
  EXPECT_THROW(validate_experiment(cfg), ConfigError);
  EXPECT_THROW(parse_stage("distill"), ConfigError);
}

TEST(ExperimentConfigIni, ShippedConfigIsValid) {
  const fs::path path = fs::path(CONDENSE_SOURCE_DIR) / "config" / "toy10_desk.ini";
  const ExperimentConfig cfg = load_experiment_config(path);
  EXPECT_NO_THROW(validate_experiment(cfg));
  EXPECT_EQ(cfg.squeeze_spec.width, 32);
  EXPECT_EQ(cfg.recover.iterations, 500);
  EXPECT_EQ(cfg.eval.batch_size, 32);
  EXPECT_TRUE(cfg.continual_enabled);
  EXPECT_EQ(cfg.data_root, fs::path(CONDENSE_SOURCE_DIR) / "config" / ".." / "data" / "toy10");
}

TEST_F(Pipeline, FullRunIsDeterministicAcrossNames) {
  const fs::path a = run_pipeline(tiny("a"));
  const fs::path b = run_pipeline(tiny("b"));
  const auto ma = manifest(a), mb = manifest(b);
  EXPECT_EQ(ma["format"], "run-manifest-v1");
  EXPECT_EQ(ma["config_hash"], mb["config_hash"]);
  for (const char* s : {"squeeze", "recover", "relabel", "eval"}) {
    EXPECT_EQ(ma["stages"][s]["status"], "complete") << s;
    EXPECT_EQ(ma["stages"][s]["artifacts"], mb["stages"][s]["artifacts"]) << s;
  }
  EXPECT_EQ(read_text_file(a / "eval" / "report.csv"), read_text_file(b / "eval" / "report.csv"));
  EXPECT_TRUE(fs::exists(a / "recover" / "loss.csv"));
  EXPECT_TRUE(ma["stages"]["recover"]["metrics"].contains("ms_per_image"));
}

TEST_F(Pipeline, ResumeRunsOnlyMissingStagesThenIsNoOp) {
  RunOptions first;
  first.stages = {Stage::kSqueeze, Stage::kRecover};
  const fs::path dir = run_pipeline(tiny("r"), first);
  EXPECT_FALSE(manifest(dir)["stages"].contains("relabel"));
  const std::string ckpt_sha = sha256_file(dir / "squeeze" / "checkpoint.bin");
  resume(dir);
  const auto m = manifest(dir);
  EXPECT_EQ(m["stages"]["relabel"]["status"], "complete");
  EXPECT_EQ(m["stages"]["eval"]["status"], "complete");
  EXPECT_EQ(sha256_file(dir / "squeeze" / "checkpoint.bin"), ckpt_sha);
  // Same result as an uninterrupted run.
  const fs::path full = run_pipeline(tiny("full"));
  EXPECT_EQ(read_text_file(dir / "eval" / "report.csv"), read_text_file(full / "eval" / "report.csv"));

  const std::string bytes = read_text_file(dir / "run_manifest.json");
  resume(dir);
  EXPECT_EQ(read_text_file(dir / "run_manifest.json"), bytes);
}

TEST_F(Pipeline, CorruptManifestOrArtifactIsIntegrityError) {
  const fs::path dir = run_pipeline(tiny("c"));
  const std::string good = read_text_file(dir / "run_manifest.json");
  write_text_atomic(dir / "run_manifest.json", good.substr(0, good.size() / 2));
  EXPECT_THROW(resume(dir), IntegrityError);
  write_text_atomic(dir / "run_manifest.json", good);
  auto bytes = read_file_bytes(dir / "relabel" / "labels.bin");
  bytes[bytes.size() / 2] ^= 1;
  write_file_atomic(dir / "relabel" / "labels.bin", bytes);
  EXPECT_THROW(resume(dir), IntegrityError);
  EXPECT_THROW(resume(tmp_ / "missing"), IntegrityError);
}

TEST_F(Pipeline, DifferentConfigInSameDirectoryIsConfigError) {
  RunOptions opts;
  opts.stages = {Stage::kSqueeze};
  run_pipeline(tiny("m"), opts);
  ExperimentConfig other = tiny("m");
  other.squeeze.seed = 77;
  EXPECT_THROW(run_pipeline(other, opts), ConfigError);
}

TEST_F(Pipeline, ProvidedCheckpointSkipsSqueeze) {
  RunOptions opts;
  opts.stages = {Stage::kSqueeze};
  const fs::path src = run_pipeline(tiny("src"), opts);
  RunOptions provided;
  provided.checkpoint = src / "squeeze" / "checkpoint.bin";
  const fs::path dir = run_pipeline(tiny("dst"), provided);
  const auto m = manifest(dir);
  EXPECT_EQ(m["stages"]["squeeze"]["status"], "provided");
  EXPECT_EQ(m["stages"]["eval"]["status"], "complete");
  EXPECT_EQ(sha256_file(dir / "squeeze" / "checkpoint.bin"),
            sha256_file(src / "squeeze" / "checkpoint.bin"));
}

TEST_F(Pipeline, InspectReportsStagesAndSizes) {
  EXPECT_NE(inspect(tmp_ / "nothing").find("no experiment at"), std::string::npos);
  RunOptions opts;
  opts.stages = {Stage::kSqueeze, Stage::kRecover, Stage::kRelabel};
  const fs::path dir = run_pipeline(tiny("i"), opts);
  const std::string text = inspect(dir);
  EXPECT_NE(text.find("squeeze     complete"), std::string::npos) << text;
  EXPECT_NE(text.find("eval        pending"), std::string::npos) << text;
  EXPECT_NE(text.find("condensed set size"), std::string::npos) << text;
  EXPECT_NE(text.find("soft-label archive"), std::string::npos) << text;
}

TEST_F(Pipeline, OutputRootEnvironmentOverridesConfig) {
  const fs::path root = tmp_ / "env_root";
  ::setenv(kOutputRootEnv, root.c_str(), 1);
  write_text_atomic(tmp_ / "exp.ini", "[experiment]\nname = e\noutput_root = ignored\n");
  const ExperimentConfig cfg = load_experiment_config(tmp_ / "exp.ini");
  ::unsetenv(kOutputRootEnv);
  EXPECT_EQ(cfg.output_root, root);
  EXPECT_EQ(load_experiment_config(tmp_ / "exp.ini").output_root, tmp_ / "ignored");
}

}  // namespace
}  // namespace condense
