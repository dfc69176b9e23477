// Writes the procedural toy10 dataset as a PNG class-folder tree.
#include <spdlog/spdlog.h>

#include <CLI11.hpp>

#include "condense/toy_dataset.h"

int main(int argc, char** argv) {
  CLI::App app{"Generate the procedural 10-class toy dataset"};
  condense::ToyDatasetSpec spec;
  std::string out;
  app.add_option("--out", out, "Output root")->required();
  app.add_option("--train-per-class", spec.train_per_class)->check(CLI::PositiveNumber);
  app.add_option("--val-per-class", spec.val_per_class)->check(CLI::PositiveNumber);
  app.add_option("--resolution", spec.resolution)->check(CLI::IsMember({32, 64, 224}));
  app.add_option("--seed", spec.seed);
  CLI11_PARSE(app, argc, argv);
  try {
    condense::write_toy_dataset(spec, out);
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 2;
  }
  spdlog::info("wrote toy10 ({} train / {} val per class) to {}", spec.train_per_class,
               spec.val_per_class, out);
  return 0;
}
