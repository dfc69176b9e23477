#pragma once

#include <string>
#include <vector>

#include "condense/nn/layers.h"

namespace condense {

enum class OptimizerKind { kSgd, kAdamW };

std::string optimizer_name(OptimizerKind kind);
OptimizerKind parse_optimizer(const std::string& name);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kSgd;
  double lr = 0.1;
  double momentum = 0.9;  // SGD
  double beta1 = 0.9;     // AdamW
  double beta2 = 0.999;
  double weight_decay = 5e-4;
  double eps = 1e-8;

  bool operator==(const OptimizerConfig&) const = default;
};

// Half-cosine decay from `base` at step 0 to 0 at step `total`.
double cosine_lr(double base, long step, long total);

// SGD with heavy-ball momentum and coupled weight decay, or AdamW with
// decoupled decay. Decay only touches params flagged `decay` (conv and
// linear weights).
template <typename T>
class Optimizer {
 public:
  Optimizer(const OptimizerConfig& config, std::vector<nn::Param<T>> params);
  void step(double lr);
  void zero_grad();

 private:
  OptimizerConfig config_;
  std::vector<nn::Param<T>> params_;
  std::vector<std::vector<T>> first_, second_;
  long steps_ = 0;
};

}  // namespace condense
