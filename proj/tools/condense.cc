// Command-line front end: one subcommand per stage plus run/resume/inspect.
// Exit codes: 0 success, 1 invalid configuration, 2 runtime failure.
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <boost/algorithm/string.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "condense/analysis.h"
#include "condense/continual.h"
#include "condense/errors.h"
#include "condense/evaluate.h"
#include "condense/io_util.h"
#include "condense/pipeline.h"
#include "condense/recover.h"
#include "condense/relabel.h"
#include "condense/squeeze.h"

namespace fs = std::filesystem;
using namespace condense;

namespace {

std::string f6(double v) { return fmt::format("{:.6f}", v); }

fs::path under_output_root(const std::string& p) {
  const fs::path path(p);
  if (path.is_absolute()) return path;
  if (const char* root = std::getenv(kOutputRootEnv); root && *root) return fs::path(root) / path;
  return path;
}

void write_eval_csv(const StudentResult& res, const fs::path& path) {
  std::string csv = "epoch,train_loss,val_top1\n";
  for (const auto& h : res.history) {
    csv += fmt::format("{},{},{}\n", h.epoch, f6(h.train_loss),
                       h.val_top1 < 0 ? std::string() : f6(h.val_top1));
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_text_atomic(path, csv);
}

std::vector<std::vector<double>> read_matrix_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestError("cannot open " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    boost::trim(line);
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    boost::split(cells, line, boost::is_any_of(",\t "), boost::token_compress_on);
    std::vector<double> row;
    for (const auto& c : cells) {
      try {
        row.push_back(std::stod(c));
      } catch (const std::exception&) {
        throw IngestError(path.string() + ": non-numeric cell '" + c + "'");
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

struct SqueezeArgs {
  std::string data, dataset = "toy10", arch = "convnet4", aug = "none", out;
  int width = 0, epochs = 0, batch_size = 0, resolution = 0;
  double lr = 0;
  bool rrc = false;
  std::uint64_t seed = 0;
};

int cmd_squeeze(const SqueezeArgs& a) {
  const LabeledDataset train = load_dataset(a.data, a.dataset, Split::kTrain);
  const LabeledDataset val = load_dataset(a.data, a.dataset, Split::kVal);
  ExperimentConfig d = default_experiment(a.dataset, train.resolution, a.seed);
  BackboneSpec spec = d.squeeze_spec;
  spec.arch = parse_arch(a.arch);
  spec.width = a.width;
  spec.num_classes = train.num_classes;
  spec.channels = train.channels;
  SqueezeConfig cfg = d.squeeze;
  cfg.augmentations.clear();
  if (a.rrc) cfg.augmentations.push_back("random_resized_crop");
  if (a.aug != "none") cfg.augmentations.push_back(a.aug);
  if (a.epochs > 0) cfg.epochs = a.epochs;
  if (a.batch_size > 0) cfg.batch_size = a.batch_size;
  if (a.lr > 0) cfg.optimizer.lr = a.lr;
  SqueezeOptions opts;
  opts.on_epoch = [](int e, double loss, double acc) {
    spdlog::info("epoch {} loss {:.4f} train top-1 {:.4f}", e, loss, acc);
  };
  Checkpoint ck = squeeze_train(train, val, spec, cfg, opts);
  ck.meta.dataset = a.dataset;
  const fs::path out = under_output_root(a.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_checkpoint(ck, out);
  spdlog::info("checkpoint {} val top-1 {:.4f}", out.string(), ck.meta.val_top1);
  return 0;
}

struct RecoverArgs {
  std::string ckpt, out, dataset, loss_csv;
  int ipc = 10, iters = 0, batch_size = 0;
  double alpha_bn = -1, alpha_tv = 0, alpha_l2 = 0, lr = 0;
  bool clamp = false;
  std::vector<int> classes;
  std::uint64_t seed = 0;
};

int cmd_recover(const RecoverArgs& a) {
  const Checkpoint ck = load_checkpoint(a.ckpt);
  const std::string dataset = a.dataset.empty() ? ck.meta.dataset : a.dataset;
  if (dataset.empty()) throw ConfigError("recover: --dataset is required (checkpoint names none)");
  RecoverConfig cfg = default_experiment(dataset, ck.spec.input_resolution, a.seed).recover;
  cfg.ipc = a.ipc;
  if (a.iters > 0) cfg.iterations = a.iters;
  if (a.batch_size > 0) cfg.batch_size = a.batch_size;
  if (a.alpha_bn >= 0) cfg.alpha_bn = a.alpha_bn;
  if (a.lr > 0) cfg.lr = a.lr;
  cfg.alpha_tv = a.alpha_tv;
  cfg.alpha_l2 = a.alpha_l2;
  cfg.clamp = a.clamp;
  std::vector<int> classes = a.classes;
  if (classes.empty()) {
    for (int c = 0; c < ck.spec.num_classes; ++c) classes.push_back(c);
  }
  const fs::path out = under_output_root(a.out);
  const fs::path loss_csv = a.loss_csv.empty() ? fs::path(out.string() + "_loss.csv")
                                               : under_output_root(a.loss_csv);
  std::string log = "batch,iter,ce,r_bn,r_tv,r_l2,total\n";
  RecoverOptions opts;
  opts.on_step = [&](int b, int it, const RecoveryLossBreakdown& l) {
    log += fmt::format("{},{},{},{},{},{},{}\n", b, it, f6(l.ce), f6(l.r_bn), f6(l.r_tv),
                       f6(l.r_l2), f6(l.total));
    if (it + 1 == cfg.iterations || it % 100 == 0) {
      spdlog::info("batch {} iter {} total {:.4f} (ce {:.4f} bn {:.4f})", b, it, l.total, l.ce,
                   l.r_bn);
    }
  };
  opts.partial_dir = fs::path(out.string() + "_partial");
  if (loss_csv.has_parent_path()) fs::create_directories(loss_csv.parent_path());
  CondensedDataset cd;
  try {
    cd = recover(ck, cfg, classes, normalization_for(dataset), opts);
  } catch (...) {
    write_text_atomic(loss_csv, log);
    throw;
  }
  cd.dataset = dataset;
  save_condensed(cd, out);
  write_text_atomic(loss_csv, log);
  spdlog::info("wrote {} images to {}, losses to {}", cd.size(), out.string(), loss_csv.string());
  return 0;
}

struct RelabelArgs {
  std::string condensed, teacher, out, precision = "float16";
  double tau = 0;
  int epochs = 100, top_k = 10;
  std::uint64_t seed = 0;
};

int cmd_relabel(const RelabelArgs& a) {
  const CondensedDataset cd = load_condensed(a.condensed);
  const Checkpoint teacher = load_checkpoint(a.teacher);
  RelabelConfig cfg = default_experiment(cd.dataset, cd.resolution, a.seed).relabel;
  if (a.tau > 0) cfg.temperature = a.tau;
  cfg.epochs = a.epochs;
  cfg.precision = parse_precision(a.precision);
  cfg.top_k = a.top_k;
  const CropLabelArchive archive = relabel(cd, teacher, cfg);
  const fs::path out = under_output_root(a.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  const auto bytes = save_archive(archive, out);
  spdlog::info("wrote {} crop records ({} bytes) to {}", cd.size() * cfg.epochs, bytes,
               out.string());
  return 0;
}

struct EvalArgs {
  std::string condensed, archive, student = "resnet18_adapted", data, report, out_student, targets,
      optimizer;
  int width = 0, epochs = 0, batch_size = 0, eval_every = 0;
  double lr = 0;
  bool cutmix = false;
  std::uint64_t seed = 0;
};

EvalConfig eval_config_from(const EvalArgs& a, const CondensedDataset& cd,
                            const CropLabelArchive& archive) {
  EvalConfig cfg = default_experiment(cd.dataset, cd.resolution, a.seed).eval;
  cfg.student.arch = parse_arch(a.student);
  cfg.student.width = a.width;
  cfg.student.num_classes = cd.num_classes;
  cfg.student.channels = cd.channels;
  cfg.epochs = a.epochs > 0 ? a.epochs : archive.meta.epochs;
  if (a.batch_size > 0) cfg.batch_size = a.batch_size;
  if (a.lr > 0) cfg.optimizer.lr = a.lr;
  if (!a.optimizer.empty()) cfg.optimizer.kind = parse_optimizer(a.optimizer);
  if (a.cutmix) cfg.cutmix = true;
  if (!a.targets.empty()) cfg.targets = parse_target_mode(a.targets);
  cfg.eval_every = a.eval_every;
  return cfg;
}

int cmd_eval(const EvalArgs& a) {
  const CondensedDataset cd = load_condensed(a.condensed);
  const CropLabelArchive archive = load_archive(a.archive);
  const EvalConfig cfg = eval_config_from(a, cd, archive);
  const LabeledDataset val = load_dataset(a.data, cd.dataset, Split::kVal);
  const StudentResult res = train_student(cd, archive, cfg, val);
  write_eval_csv(res, under_output_root(a.report));
  if (!a.out_student.empty()) save_checkpoint(res.student, under_output_root(a.out_student));
  std::cout << fmt::format("val_top1 {:.4f}\n", res.final_top1);
  return 0;
}

int cmd_continual(const EvalArgs& a, int steps, int memory) {
  const CondensedDataset cd = load_condensed(a.condensed);
  const CropLabelArchive archive = load_archive(a.archive);
  const EvalConfig cfg = eval_config_from(a, cd, archive);
  const LabeledDataset val = load_dataset(a.data, cd.dataset, Split::kVal);
  ContinualConfig cc{steps, memory, a.seed};
  const auto result = class_incremental_run(cd, archive, cfg, val, cc);
  std::string csv = "step,classes_seen,train_images,top1\n";
  for (const auto& s : result) {
    std::vector<std::string> names;
    for (int c : s.classes_seen) names.push_back(std::to_string(c));
    csv += fmt::format("{},{},{},{}\n", s.step, boost::join(names, " "), s.train_images, f6(s.top1));
    std::cout << fmt::format("step {} classes {} top1 {:.4f}\n", s.step, s.classes_seen.size(),
                             s.top1);
  }
  const fs::path report = under_output_root(a.report);
  if (report.has_parent_path()) fs::create_directories(report.parent_path());
  write_text_atomic(report, csv);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dataset condensation toolkit: squeeze, recover, relabel, evaluate"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Only log warnings and errors");

  SqueezeArgs sq;
  auto* squeeze = app.add_subcommand("squeeze", "Train the teacher on the original data");
  squeeze->add_option("--data", sq.data, "Dataset root")->required();
  squeeze->add_option("--dataset", sq.dataset, "Registered dataset name");
  squeeze->add_option("--arch", sq.arch, "convnet4, resnet18_adapted, resnet50_adapted, bnvit_tiny");
  squeeze->add_option("--width", sq.width, "Backbone width (0: architecture default)");
  squeeze->add_option("--epochs", sq.epochs, "Training epochs");
  squeeze->add_option("--batch-size", sq.batch_size);
  squeeze->add_option("--lr", sq.lr);
  squeeze->add_option("--aug", sq.aug, "Label-mixing augmentation")
      ->check(CLI::IsMember({"none", "mixup", "cutmix"}));
  squeeze->add_flag("--rrc", sq.rrc, "Enable RandomResizedCrop with horizontal flip");
  squeeze->add_option("--seed", sq.seed);
  squeeze->add_option("--out", sq.out, "Checkpoint path")->required();

  RecoverArgs rc;
  auto* rec = app.add_subcommand("recover", "Synthesize images from a checkpoint");
  rec->add_option("--ckpt", rc.ckpt, "Teacher checkpoint")->required();
  rec->add_option("--ipc", rc.ipc, "Images per class")->check(CLI::PositiveNumber);
  rec->add_option("--iters", rc.iters, "Optimization iterations per batch");
  rec->add_option("--alpha-bn", rc.alpha_bn);
  rec->add_option("--tv", rc.alpha_tv, "Total-variation weight");
  rec->add_option("--l2", rc.alpha_l2, "L2 prior weight");
  rec->add_option("--lr", rc.lr);
  rec->add_option("--batch-size", rc.batch_size);
  rec->add_flag("--clamp", rc.clamp, "Clamp pixels to the valid image range");
  rec->add_option("--classes", rc.classes, "Class subset")->delimiter(',');
  rec->add_option("--dataset", rc.dataset, "Normalization source (default: from checkpoint)");
  rec->add_option("--seed", rc.seed);
  rec->add_option("--loss-csv", rc.loss_csv, "Per-step loss CSV (default: <out>_loss.csv)");
  rec->add_option("--out", rc.out, "Condensed dataset directory")->required();

  RelabelArgs rl;
  auto* rel = app.add_subcommand("relabel", "Generate per-crop soft labels");
  rel->add_option("--condensed", rl.condensed)->required();
  rel->add_option("--teacher", rl.teacher)->required();
  rel->add_option("--tau", rl.tau, "Temperature (default: recipe value)");
  rel->add_option("--epochs", rl.epochs)->check(CLI::PositiveNumber);
  rel->add_option("--precision", rl.precision)
      ->check(CLI::IsMember({"float32", "float16", "topk"}));
  rel->add_option("--top-k", rl.top_k);
  rel->add_option("--seed", rl.seed);
  rel->add_option("--out", rl.out, "Archive path")->required();

  auto add_eval_options = [](CLI::App* c, EvalArgs& e) {
    c->add_option("--condensed", e.condensed)->required();
    c->add_option("--archive", e.archive)->required();
    c->add_option("--data", e.data, "Dataset root holding the validation split")->required();
    c->add_option("--student", e.student, "Student architecture");
    c->add_option("--width", e.width);
    c->add_option("--epochs", e.epochs, "Training epochs (default: archive epochs)");
    c->add_option("--batch-size", e.batch_size);
    c->add_option("--lr", e.lr);
    c->add_option("--optimizer", e.optimizer)->check(CLI::IsMember({"sgd", "adamw"}));
    c->add_flag("--cutmix", e.cutmix);
    c->add_option("--targets", e.targets)->check(CLI::IsMember({"soft", "argmax", "class"}));
    c->add_option("--eval-every", e.eval_every);
    c->add_option("--seed", e.seed);
    c->add_option("--report", e.report, "Report CSV")->required();
  };
  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "Train a student on condensed data");
  add_eval_options(eval, ev);
  eval->add_option("--save-student", ev.out_student, "Student checkpoint path");

  EvalArgs ct;
  int steps = 5, memory = 0;
  auto* cont = app.add_subcommand("continual", "Class-incremental evaluation");
  add_eval_options(cont, ct);
  cont->add_option("--steps", steps)->check(CLI::PositiveNumber);
  cont->add_option("--memory-per-class", memory);

  auto* analyze = app.add_subcommand("analyze", "Embeddings, information bounds, reports");
  analyze->require_subcommand(1);
  std::string emb_ckpt, emb_condensed, emb_data, emb_dataset, emb_split = "val", emb_out;
  bool emb_tsv = false;
  auto* emb = analyze->add_subcommand("embeddings", "Export penultimate features");
  emb->add_option("--ckpt", emb_ckpt)->required();
  auto* emb_src = emb->add_option("--condensed", emb_condensed);
  emb->add_option("--data", emb_data)->excludes(emb_src);
  emb->add_option("--dataset", emb_dataset);
  emb->add_option("--split", emb_split)->check(CLI::IsMember({"train", "val"}));
  emb->add_flag("--tsv", emb_tsv, "Write TSV instead of binary");
  emb->add_option("--out", emb_out)->required();

  std::string mi_matrix, mi_base = "e";
  auto* mi = analyze->add_subcommand("mi", "Mutual-information upper bound from p(d_i|x_j)");
  mi->add_option("--matrix", mi_matrix, "CSV, row i holds p(d_i|x_j) over j")->required();
  mi->add_option("--base", mi_base)->check(CLI::IsMember({"e", "2"}));

  double icb_info = 0, icb_delta = 0.05;
  long icb_n = 0;
  double icb_info_base = 2.0;
  auto* icb = analyze->add_subcommand("icb", "Information-based generalization bound");
  icb->add_option("--info", icb_info, "Mutual information, in units of --info-base")->required();
  icb->add_option("--delta", icb_delta);
  icb->add_option("--n", icb_n, "Training-set size")->required();
  icb->add_option("--info-base", icb_info_base);

  std::vector<std::string> report_csvs;
  std::string report_out;
  auto* report = analyze->add_subcommand("report", "Merge stage CSVs");
  report->add_option("--out", report_out)->required();
  report->add_option("csvs", report_csvs)->required();

  std::string config_path, stages_arg, prov_ckpt, prov_condensed, prov_archive;
  auto* run = app.add_subcommand("run", "Run the pipeline from a config file");
  run->add_option("--config", config_path)->required();
  run->add_option("--stages", stages_arg, "Comma-separated subset of stages");
  run->add_option("--checkpoint", prov_ckpt, "Provided teacher checkpoint");
  run->add_option("--condensed", prov_condensed, "Provided condensed set");
  run->add_option("--archive", prov_archive, "Provided label archive");

  std::string dir;
  auto* res = app.add_subcommand("resume", "Continue an experiment directory");
  res->add_option("--dir", dir)->required();
  auto* ins = app.add_subcommand("inspect", "Summarize an experiment directory");
  ins->add_option("--dir", dir)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }
  if (quiet) spdlog::set_level(spdlog::level::warn);

  try {
    if (*squeeze) return cmd_squeeze(sq);
    if (*rec) return cmd_recover(rc);
    if (*rel) return cmd_relabel(rl);
    if (*eval) return cmd_eval(ev);
    if (*cont) return cmd_continual(ct, steps, memory);
    if (*emb) {
      const Checkpoint ck = load_checkpoint(emb_ckpt);
      Tensor<float> images;
      if (!emb_condensed.empty()) {
        images = load_condensed(emb_condensed).images;
      } else if (!emb_data.empty()) {
        const std::string ds = emb_dataset.empty() ? ck.meta.dataset : emb_dataset;
        images = load_dataset(emb_data, ds, parse_split(emb_split)).images;
      } else {
        throw ConfigError("analyze embeddings: pass --condensed or --data");
      }
      const Embeddings e = extract_embeddings(ck, images);
      const fs::path out = under_output_root(emb_out);
      if (out.has_parent_path()) fs::create_directories(out.parent_path());
      emb_tsv ? save_embeddings_tsv(e, out) : save_embeddings(e, out);
      spdlog::info("wrote {} x {} embeddings to {}", e.rows, e.dim, out.string());
      return 0;
    }
    if (*mi) {
      const double base = mi_base == "2" ? 2.0 : M_E;
      std::cout << fmt::format("{:.6f}\n",
                               mutual_info_upper_bound(read_matrix_csv(mi_matrix), base));
      return 0;
    }
    if (*icb) {
      std::cout << fmt::format("{:.6f}\n",
                               generalization_bound_icb(icb_info, icb_delta, icb_n, icb_info_base));
      return 0;
    }
    if (*report) {
      std::vector<fs::path> paths(report_csvs.begin(), report_csvs.end());
      emit_report(paths, under_output_root(report_out));
      return 0;
    }
    if (*run) {
      const ExperimentConfig cfg = load_experiment_config(config_path);
      RunOptions opts;
      if (!stages_arg.empty()) {
        std::vector<std::string> names;
        boost::split(names, stages_arg, boost::is_any_of(","));
        for (auto& n : names) opts.stages.push_back(parse_stage(boost::trim_copy(n)));
      }
      if (!prov_ckpt.empty()) opts.checkpoint = prov_ckpt;
      if (!prov_condensed.empty()) opts.condensed = prov_condensed;
      if (!prov_archive.empty()) opts.archive = prov_archive;
      const fs::path out = run_pipeline(cfg, opts);
      std::cout << inspect(out);
      return 0;
    }
    if (*res) {
      std::cout << inspect(resume(dir));
      return 0;
    }
    if (*ins) {
      std::cout << inspect(dir);
      return 0;
    }
  } catch (const ConfigError& e) {
    spdlog::error("{}", e.what());
    return 1;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 2;
  }
  return 1;
}
