#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "condense/continual.h"
#include "condense/evaluate.h"
#include "condense/recover.h"
#include "condense/relabel.h"
#include "condense/squeeze.h"

namespace condense {

inline constexpr const char* kOutputRootEnv = "CONDENSE_OUTPUT_ROOT";

struct ExperimentConfig {
  std::string name = "experiment";
  std::string dataset = "toy10";
  std::filesystem::path data_root;
  int resolution = 32;
  std::uint64_t seed = 0;
  std::filesystem::path output_root = "runs";

  BackboneSpec squeeze_spec;
  SqueezeConfig squeeze;
  RecoverConfig recover;
  std::vector<int> class_ids;  // empty: every class of the dataset
  RelabelConfig relabel;
  EvalConfig eval;
  bool continual_enabled = false;
  ContinualConfig continual;
};

// Recipe defaults for a dataset: CIFAR-style SGD squeeze/eval below 224 px,
// recovery defaults per resolution, temperature 30 for CIFAR and 20
// otherwise, CutMix only at 224 px. Every stage seed equals `seed`.
ExperimentConfig default_experiment(const std::string& dataset, int resolution,
                                    std::uint64_t seed = 0);

// Flat INI document with sections [experiment], [squeeze], [recover],
// [relabel], [eval], [continual]. Unset keys take default_experiment values;
// unknown keys raise ConfigError. Relative data_root / output_root resolve
// against the file's directory. The output-root environment variable, when
// set, replaces output_root.
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
ExperimentConfig parse_experiment_config(const std::string& ini_text,
                                         const std::filesystem::path& base_dir = {});
std::string experiment_config_ini(const ExperimentConfig& cfg);

// Canonical JSON over every output-affecting field, and its SHA-256.
std::string experiment_config_json(const ExperimentConfig& cfg);
std::string experiment_config_hash(const ExperimentConfig& cfg);

// Cross-stage checks that need no data (resolutions, epochs vs archive,
// partition sizes when the class list is explicit). Throws ConfigError.
void validate_experiment(const ExperimentConfig& cfg);

enum class Stage { kSqueeze, kRecover, kRelabel, kEval, kContinual };
std::string stage_name(Stage s);
Stage parse_stage(const std::string& name);

struct RunOptions {
  // Stages to execute, in canonical order; empty means every enabled stage.
  std::vector<Stage> stages;
  // Artifacts standing in for skipped earlier stages.
  std::optional<std::filesystem::path> checkpoint;
  std::optional<std::filesystem::path> condensed;
  std::optional<std::filesystem::path> archive;
};

// Runs the requested stages into <output_root>/<name>. Completed stages are
// never rewritten: a stage already recorded as complete with matching
// artifact checksums is skipped. Writes run_manifest.json after every stage.
std::filesystem::path run_pipeline(const ExperimentConfig& cfg, const RunOptions& options = {});

// Continues an experiment directory from its stored config, running only
// the stages not yet complete. Throws IntegrityError for a missing or
// corrupted manifest.
std::filesystem::path resume(const std::filesystem::path& experiment_dir);

// Human-readable status: stages, metrics, wall times, artifact sizes.
std::string inspect(const std::filesystem::path& experiment_dir);

}  // namespace condense
