#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "condense/checkpoint.h"
#include "condense/data.h"
#include "condense/losses.h"
#include "condense/optim.h"
#include "condense/relabel.h"
#include "condense/train_util.h"

namespace condense {

enum class TargetMode {
  kSoft,        // archived soft labels (KD)
  kArgmax,      // one-hot at the archived label's argmax (hard-label CE on the same crops)
  kClassLabel,  // one-hot at the image's class
};

std::string target_mode_name(TargetMode m);
TargetMode parse_target_mode(const std::string& name);

struct EvalConfig {
  BackboneSpec student;  // resolution and class count are taken from the condensed set
  int epochs = 100;
  OptimizerConfig optimizer;
  int batch_size = 32;
  bool cutmix = false;
  double cutmix_p = 1.0;
  double cutmix_beta = 1.0;
  TargetMode targets = TargetMode::kSoft;
  int eval_every = 0;  // 0: validate after the last epoch only
  std::uint64_t seed = 0;

  bool operator==(const EvalConfig&) const = default;
};

void validate_eval_config(const EvalConfig& cfg);  // throws ConfigError
std::string eval_config_json(const EvalConfig& cfg);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0;
  double val_top1 = -1;  // -1 when not evaluated this epoch
};

struct StudentResult {
  Checkpoint student;
  std::vector<EpochRecord> history;
  std::vector<double> step_losses;
  double final_top1 = 0;
};

// Optional restriction of a student run to part of the condensed set.
struct StudentSubset {
  std::vector<int> images;   // condensed-set indices; empty means all
  std::vector<int> classes;  // label space used for softmax and validation; empty means all
};

// Trains a fresh student: at epoch e every image is cropped, flipped and
// labelled by its epoch-e archive record. With CutMix, crops and their
// labels are mixed with lambda ~ Beta(beta, beta). Validates on `val` (which
// may be empty). Throws ConfigError when cfg.epochs exceeds the archive.
StudentResult train_student(const CondensedDataset& cd, const CropLabelArchive& archive,
                            const EvalConfig& cfg, const LabeledDataset& val,
                            const StudentSubset& subset = {});

}  // namespace condense
