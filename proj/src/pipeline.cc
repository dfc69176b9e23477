#include "condense/pipeline.h"

#include <sys/resource.h>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include <boost/algorithm/string.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "condense/analysis.h"
#include "condense/errors.h"
#include "condense/io_util.h"

namespace condense {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kManifestName = "run_manifest.json";
constexpr const char* kConfigName = "config.ini";
constexpr const char* kManifestFormat = "run-manifest-v1";

int dataset_resolution(const std::string& dataset) {
  if (dataset == "tiny-imagenet") return 64;
  if (dataset == "imagenet") return 224;
  return 32;
}

int dataset_classes(const std::string& dataset) {
  if (dataset == "cifar100") return 100;
  if (dataset == "tiny-imagenet") return 200;
  if (dataset == "imagenet") return 1000;
  return 10;
}

bool is_cifar(const std::string& dataset) { return dataset == "cifar10" || dataset == "cifar100"; }

// --- INI access -----------------------------------------------------------

class IniReader {
 public:
  explicit IniReader(boost::property_tree::ptree tree) : tree_(std::move(tree)) {}

  std::optional<std::string> raw(const std::string& key) {
    auto v = tree_.get_optional<std::string>(boost::property_tree::ptree::path_type(key, '.'));
    if (!v) return std::nullopt;
    used_.insert(key);
    std::string s = *v;
    boost::trim(s);
    return s;
  }

  void get(const std::string& key, std::string& out) {
    if (auto v = raw(key)) out = *v;
  }
  void get(const std::string& key, fs::path& out) {
    if (auto v = raw(key)) out = *v;
  }
  void get(const std::string& key, bool& out) {
    auto v = raw(key);
    if (!v) return;
    const std::string s = boost::to_lower_copy(*v);
    if (s == "true" || s == "1" || s == "yes" || s == "on") {
      out = true;
    } else if (s == "false" || s == "0" || s == "no" || s == "off") {
      out = false;
    } else {
      throw ConfigError("config: " + key + " = '" + *v + "' is not a boolean");
    }
  }
  template <typename N>
    requires std::is_arithmetic_v<N>
  void get(const std::string& key, N& out) {
    auto v = raw(key);
    if (!v) return;
    N parsed{};
    const char* end = v->data() + v->size();
    auto [ptr, ec] = std::from_chars(v->data(), end, parsed);
    if (ec != std::errc() || ptr != end) {
      throw ConfigError("config: " + key + " = '" + *v + "' is not a valid number");
    }
    out = parsed;
  }
  void get_list(const std::string& key, std::vector<std::string>& out) {
    auto v = raw(key);
    if (!v) return;
    out.clear();
    if (v->empty() || *v == "none") return;
    std::vector<std::string> parts;
    boost::split(parts, *v, boost::is_any_of(","));
    for (auto& p : parts) {
      boost::trim(p);
      if (!p.empty()) out.push_back(p);
    }
  }
  void get_ints(const std::string& key, std::vector<int>& out) {
    std::vector<std::string> parts;
    auto before = used_.size();
    get_list(key, parts);
    if (used_.size() == before && !used_.contains(key)) return;
    out.clear();
    for (const auto& p : parts) {
      int x = 0;
      auto [ptr, ec] = std::from_chars(p.data(), p.data() + p.size(), x);
      if (ec != std::errc() || ptr != p.data() + p.size()) {
        throw ConfigError("config: " + key + " has non-integer entry '" + p + "'");
      }
      out.push_back(x);
    }
  }

  void reject_unknown() const {
    std::vector<std::string> unknown;
    for (const auto& [section, body] : tree_) {
      if (body.empty() && !body.data().empty()) {
        unknown.push_back(section + " (outside any section)");
        continue;
      }
      for (const auto& [key, value] : body) {
        const std::string full = section + "." + key;
        if (!used_.contains(full)) unknown.push_back(full);
      }
    }
    if (!unknown.empty()) {
      throw ConfigError("config: unknown keys: " + boost::join(unknown, ", "));
    }
  }

 private:
  boost::property_tree::ptree tree_;
  std::set<std::string> used_;
};

void read_optimizer(IniReader& ini, const std::string& s, OptimizerConfig& o) {
  std::string kind = optimizer_name(o.kind);
  ini.get(s + ".optimizer", kind);
  o.kind = parse_optimizer(kind);
  ini.get(s + ".lr", o.lr);
  ini.get(s + ".momentum", o.momentum);
  ini.get(s + ".beta1", o.beta1);
  ini.get(s + ".beta2", o.beta2);
  ini.get(s + ".weight_decay", o.weight_decay);
}

void read_crop(IniReader& ini, const std::string& s, CropParams& c) {
  ini.get(s + ".crop_scale_lo", c.scale_lo);
  ini.get(s + ".crop_scale_hi", c.scale_hi);
  ini.get(s + ".crop_ratio_lo", c.ratio_lo);
  ini.get(s + ".crop_ratio_hi", c.ratio_hi);
}

void read_spec(IniReader& ini, const std::string& s, BackboneSpec& spec) {
  std::string arch = arch_name(spec.arch);
  ini.get(s + ".arch", arch);
  spec.arch = parse_arch(arch);
  ini.get(s + ".width", spec.width);
  ini.get(s + ".depth", spec.depth);
  ini.get(s + ".small_input_mode", spec.small_input_mode);
}

// --- INI writing ------------------------------------------------------------

std::string num(double v) { return fmt::format("{}", v); }

void write_optimizer(std::ostream& o, const OptimizerConfig& c) {
  o << "optimizer = " << optimizer_name(c.kind) << "\n"
    << "lr = " << num(c.lr) << "\n"
    << "momentum = " << num(c.momentum) << "\n"
    << "beta1 = " << num(c.beta1) << "\n"
    << "beta2 = " << num(c.beta2) << "\n"
    << "weight_decay = " << num(c.weight_decay) << "\n";
}

void write_crop(std::ostream& o, const CropParams& c) {
  o << "crop_scale_lo = " << num(c.scale_lo) << "\n"
    << "crop_scale_hi = " << num(c.scale_hi) << "\n"
    << "crop_ratio_lo = " << num(c.ratio_lo) << "\n"
    << "crop_ratio_hi = " << num(c.ratio_hi) << "\n";
}

void write_spec(std::ostream& o, const BackboneSpec& s) {
  o << "arch = " << arch_name(s.arch) << "\n"
    << "width = " << s.width << "\n"
    << "depth = " << s.depth << "\n"
    << "small_input_mode = " << (s.small_input_mode ? "true" : "false") << "\n";
}

std::string join_ints(const std::vector<int>& v) {
  std::vector<std::string> s;
  for (int x : v) s.push_back(std::to_string(x));
  return boost::join(s, ",");
}

// --- Manifest helpers -------------------------------------------------------

std::string stage_key(Stage s) { return stage_name(s); }

long peak_rss_kb() {
  rusage usage{};
  if (getrusage(RUSAGE_SELF, &usage) != 0) return -1;
  return usage.ru_maxrss;
}

json read_manifest(const fs::path& dir) {
  const fs::path path = dir / kManifestName;
  if (!fs::exists(path)) {
    throw IntegrityError("no experiment at " + dir.string() + ": " + kManifestName + " not found");
  }
  json m;
  try {
    m = json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw IntegrityError("corrupted run manifest " + path.string() + ": " + e.what());
  }
  if (!m.is_object() || m.value("format", "") != kManifestFormat || !m.contains("config_hash") ||
      !m["config_hash"].is_string() || !m.contains("stages") || !m["stages"].is_object()) {
    throw IntegrityError("corrupted run manifest " + path.string() +
                         ": missing format, config_hash or stages");
  }
  return m;
}

void write_manifest(const fs::path& dir, json& m) {
  m["peak_rss_kb"] = std::max<long>(m.value("peak_rss_kb", 0L), peak_rss_kb());
  write_text_atomic(dir / kManifestName, m.dump(2) + "\n");
}

std::uintmax_t path_bytes(const fs::path& p) {
  if (!fs::exists(p)) return 0;
  if (fs::is_regular_file(p)) return fs::file_size(p);
  std::uintmax_t total = 0;
  for (const auto& e : fs::recursive_directory_iterator(p)) {
    if (e.is_regular_file()) total += e.file_size();
  }
  return total;
}

// Artifacts are checksummed file by file, keyed by path relative to the
// experiment directory.
json checksum_files(const fs::path& dir, const std::vector<fs::path>& rel) {
  json out = json::object();
  for (const auto& r : rel) out[r.generic_string()] = sha256_file(dir / r);
  return out;
}

void verify_artifacts(const fs::path& dir, const std::string& stage, const json& record) {
  for (const auto& [rel, sha] : record.at("artifacts").items()) {
    const fs::path p = dir / rel;
    if (!fs::exists(p)) {
      throw IntegrityError("stage " + stage + ": artifact " + rel + " is missing");
    }
    if (sha256_file(p) != sha.get<std::string>()) {
      throw IntegrityError("stage " + stage + ": artifact " + rel +
                           " changed since the stage completed");
    }
  }
}

bool stage_done(const json& m, Stage s) {
  const auto& st = m["stages"];
  const std::string key = stage_key(s);
  if (!st.contains(key)) return false;
  const std::string status = st[key].value("status", "");
  return status == "complete" || status == "provided";
}

std::string fmt_double(double v) { return fmt::format("{:.6f}", v); }

// Copies a provided artifact (file or directory) into the experiment.
void import_artifact(const fs::path& src, const fs::path& dst) {
  if (!fs::exists(src)) throw ConfigError("provided artifact " + src.string() + " does not exist");
  fs::create_directories(dst.parent_path());
  if (fs::exists(dst)) fs::remove_all(dst);
  fs::copy(src, dst, fs::copy_options::recursive);
}

std::vector<int> all_classes(int n) {
  std::vector<int> ids(n);
  for (int i = 0; i < n; ++i) ids[i] = i;
  return ids;
}

}  // namespace

// --- Defaults and parsing -----------------------------------------------------

ExperimentConfig default_experiment(const std::string& dataset, int resolution, std::uint64_t seed) {
  ExperimentConfig cfg;
  cfg.dataset = dataset;
  cfg.resolution = resolution;
  cfg.seed = seed;
  if (const char* root = std::getenv(kOutputRootEnv); root && *root) cfg.output_root = root;

  cfg.squeeze_spec.arch = Arch::kResNet18Adapted;
  cfg.squeeze_spec.input_resolution = resolution;
  cfg.squeeze_spec.num_classes = dataset_classes(dataset);
  cfg.squeeze_spec.small_input_mode = resolution < 224;

  OptimizerConfig sgd;
  if (is_cifar(dataset)) {
    sgd = {OptimizerKind::kSgd, 0.1, 0.9, 0.9, 0.999, 5e-4, 1e-8};
    cfg.squeeze.batch_size = 128;
    cfg.squeeze.epochs = 200;
  } else {
    sgd = {OptimizerKind::kSgd, 0.2, 0.9, 0.9, 0.999, 1e-4, 1e-8};
    cfg.squeeze.batch_size = 256;
    cfg.squeeze.epochs = 100;
    cfg.squeeze.augmentations = {"random_resized_crop"};
  }
  cfg.squeeze.optimizer = sgd;
  cfg.squeeze.seed = seed;

  cfg.recover = recover_defaults(resolution);
  if (is_cifar(dataset)) {
    cfg.recover.alpha_bn = 0.01;
    cfg.recover.lr = 0.25;
    cfg.recover.iterations = 1000;
  }
  cfg.recover.seed = seed;

  cfg.relabel.temperature = is_cifar(dataset) ? 30.0 : 20.0;
  cfg.relabel.seed = seed;

  cfg.eval.student = cfg.squeeze_spec;
  cfg.eval.seed = seed;
  if (resolution >= 224) {
    cfg.eval.optimizer = {OptimizerKind::kAdamW, 0.001, 0.9, 0.9, 0.999, 0.01, 1e-8};
    cfg.eval.batch_size = 1024;
    cfg.eval.epochs = 300;
    cfg.eval.cutmix = true;
    cfg.eval.cutmix_p = 1.0;
    cfg.eval.cutmix_beta = 1.0;
  } else {
    cfg.eval.optimizer = sgd;
    cfg.eval.batch_size = cfg.squeeze.batch_size;
    cfg.eval.epochs = is_cifar(dataset) ? 400 : 100;
  }
  cfg.relabel.epochs = cfg.eval.epochs;

  cfg.continual.seed = seed;
  return cfg;
}

ExperimentConfig parse_experiment_config(const std::string& ini_text, const fs::path& base_dir) {
  boost::property_tree::ptree tree;
  try {
    std::istringstream in(ini_text);
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  IniReader ini(std::move(tree));

  std::string dataset = "toy10";
  ini.get("experiment.dataset", dataset);
  normalization_for(dataset);  // rejects unknown datasets
  int resolution = dataset_resolution(dataset);
  ini.get("experiment.resolution", resolution);
  std::uint64_t seed = 0;
  ini.get("experiment.seed", seed);

  ExperimentConfig cfg = default_experiment(dataset, resolution, seed);
  ini.get("experiment.name", cfg.name);
  ini.get("experiment.data_root", cfg.data_root);
  ini.get("experiment.output_root", cfg.output_root);
  ini.get_ints("experiment.classes", cfg.class_ids);

  read_spec(ini, "squeeze", cfg.squeeze_spec);
  cfg.eval.student = cfg.squeeze_spec;
  read_optimizer(ini, "squeeze", cfg.squeeze.optimizer);
  ini.get("squeeze.batch_size", cfg.squeeze.batch_size);
  ini.get("squeeze.epochs", cfg.squeeze.epochs);
  ini.get_list("squeeze.augmentations", cfg.squeeze.augmentations);
  ini.get("squeeze.mixup_alpha", cfg.squeeze.mixup_alpha);
  ini.get("squeeze.cutmix_beta", cfg.squeeze.cutmix_beta);
  read_crop(ini, "squeeze", cfg.squeeze.crop);
  ini.get("squeeze.seed", cfg.squeeze.seed);

  auto& r = cfg.recover;
  ini.get("recover.alpha_ce", r.alpha_ce);
  ini.get("recover.alpha_bn", r.alpha_bn);
  ini.get("recover.alpha_tv", r.alpha_tv);
  ini.get("recover.alpha_l2", r.alpha_l2);
  ini.get("recover.tv_beta", r.tv_beta);
  ini.get("recover.lr", r.lr);
  ini.get("recover.beta1", r.beta1);
  ini.get("recover.beta2", r.beta2);
  ini.get("recover.adam_eps", r.adam_eps);
  ini.get("recover.batch_size", r.batch_size);
  ini.get("recover.iterations", r.iterations);
  read_crop(ini, "recover", r.crop);
  ini.get("recover.init_mean", r.init_mean);
  ini.get("recover.init_std", r.init_std);
  ini.get("recover.clamp", r.clamp);
  ini.get("recover.ipc", r.ipc);
  ini.get("recover.seed", r.seed);

  auto& l = cfg.relabel;
  ini.get("relabel.temperature", l.temperature);
  ini.get("relabel.epochs", l.epochs);
  std::string precision = precision_name(l.precision);
  ini.get("relabel.precision", precision);
  l.precision = parse_precision(precision);
  ini.get("relabel.top_k", l.top_k);
  read_crop(ini, "relabel", l.crop);
  ini.get("relabel.seed", l.seed);

  auto& e = cfg.eval;
  read_spec(ini, "eval", e.student);
  ini.get("eval.epochs", e.epochs);
  read_optimizer(ini, "eval", e.optimizer);
  ini.get("eval.batch_size", e.batch_size);
  ini.get("eval.cutmix", e.cutmix);
  ini.get("eval.cutmix_p", e.cutmix_p);
  ini.get("eval.cutmix_beta", e.cutmix_beta);
  std::string targets = target_mode_name(e.targets);
  ini.get("eval.targets", targets);
  e.targets = parse_target_mode(targets);
  ini.get("eval.eval_every", e.eval_every);
  ini.get("eval.seed", e.seed);

  ini.get("continual.enabled", cfg.continual_enabled);
  ini.get("continual.steps", cfg.continual.steps);
  ini.get("continual.memory_per_class", cfg.continual.memory_per_class);
  ini.get("continual.seed", cfg.continual.seed);

  ini.reject_unknown();

  if (!base_dir.empty()) {
    if (!cfg.data_root.empty() && cfg.data_root.is_relative()) cfg.data_root = base_dir / cfg.data_root;
    if (cfg.output_root.is_relative()) cfg.output_root = base_dir / cfg.output_root;
  }
  if (const char* root = std::getenv(kOutputRootEnv); root && *root) cfg.output_root = root;
  cfg.squeeze_spec.input_resolution = cfg.resolution;
  cfg.eval.student.input_resolution = cfg.resolution;
  cfg.eval.student.num_classes = cfg.squeeze_spec.num_classes;
  return cfg;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file " + path.string() + " does not exist");
  return parse_experiment_config(read_text_file(path), fs::absolute(path).parent_path());
}

std::string experiment_config_ini(const ExperimentConfig& cfg) {
  std::ostringstream o;
  o << "[experiment]\n"
    << "name = " << cfg.name << "\n"
    << "dataset = " << cfg.dataset << "\n"
    << "data_root = " << cfg.data_root.string() << "\n"
    << "resolution = " << cfg.resolution << "\n"
    << "seed = " << cfg.seed << "\n"
    << "output_root = " << cfg.output_root.string() << "\n"
    << "classes = " << join_ints(cfg.class_ids) << "\n";

  o << "\n[squeeze]\n";
  write_spec(o, cfg.squeeze_spec);
  write_optimizer(o, cfg.squeeze.optimizer);
  o << "batch_size = " << cfg.squeeze.batch_size << "\n"
    << "epochs = " << cfg.squeeze.epochs << "\n"
    << "augmentations = "
    << (cfg.squeeze.augmentations.empty() ? "none" : boost::join(cfg.squeeze.augmentations, ","))
    << "\n"
    << "mixup_alpha = " << num(cfg.squeeze.mixup_alpha) << "\n"
    << "cutmix_beta = " << num(cfg.squeeze.cutmix_beta) << "\n";
  write_crop(o, cfg.squeeze.crop);
  o << "seed = " << cfg.squeeze.seed << "\n";

  const auto& r = cfg.recover;
  o << "\n[recover]\n"
    << "alpha_ce = " << num(r.alpha_ce) << "\n"
    << "alpha_bn = " << num(r.alpha_bn) << "\n"
    << "alpha_tv = " << num(r.alpha_tv) << "\n"
    << "alpha_l2 = " << num(r.alpha_l2) << "\n"
    << "tv_beta = " << num(r.tv_beta) << "\n"
    << "lr = " << num(r.lr) << "\n"
    << "beta1 = " << num(r.beta1) << "\n"
    << "beta2 = " << num(r.beta2) << "\n"
    << "adam_eps = " << num(r.adam_eps) << "\n"
    << "batch_size = " << r.batch_size << "\n"
    << "iterations = " << r.iterations << "\n";
  write_crop(o, r.crop);
  o << "init_mean = " << num(r.init_mean) << "\n"
    << "init_std = " << num(r.init_std) << "\n"
    << "clamp = " << (r.clamp ? "true" : "false") << "\n"
    << "ipc = " << r.ipc << "\n"
    << "seed = " << r.seed << "\n";

  const auto& l = cfg.relabel;
  o << "\n[relabel]\n"
    << "temperature = " << num(l.temperature) << "\n"
    << "epochs = " << l.epochs << "\n"
    << "precision = " << precision_name(l.precision) << "\n"
    << "top_k = " << l.top_k << "\n";
  write_crop(o, l.crop);
  o << "seed = " << l.seed << "\n";

  const auto& e = cfg.eval;
  o << "\n[eval]\n";
  write_spec(o, e.student);
  o << "epochs = " << e.epochs << "\n";
  write_optimizer(o, e.optimizer);
  o << "batch_size = " << e.batch_size << "\n"
    << "cutmix = " << (e.cutmix ? "true" : "false") << "\n"
    << "cutmix_p = " << num(e.cutmix_p) << "\n"
    << "cutmix_beta = " << num(e.cutmix_beta) << "\n"
    << "targets = " << target_mode_name(e.targets) << "\n"
    << "eval_every = " << e.eval_every << "\n"
    << "seed = " << e.seed << "\n";

  o << "\n[continual]\n"
    << "enabled = " << (cfg.continual_enabled ? "true" : "false") << "\n"
    << "steps = " << cfg.continual.steps << "\n"
    << "memory_per_class = " << cfg.continual.memory_per_class << "\n"
    << "seed = " << cfg.continual.seed << "\n";
  return o.str();
}

std::string experiment_config_json(const ExperimentConfig& cfg) {
  json spec = {{"arch", arch_name(cfg.squeeze_spec.arch)},
               {"width", cfg.squeeze_spec.width},
               {"depth", cfg.squeeze_spec.depth},
               {"small_input_mode", cfg.squeeze_spec.small_input_mode},
               {"num_classes", cfg.squeeze_spec.num_classes}};
  json j = {
      {"dataset", cfg.dataset},
      {"resolution", cfg.resolution},
      {"seed", cfg.seed},
      {"classes", cfg.class_ids},
      {"squeeze_spec", spec},
      {"squeeze", json::parse(squeeze_config_json(cfg.squeeze))},
      {"recover", json::parse(recover_config_json(cfg.recover))},
      {"relabel", json::parse(relabel_config_json(cfg.relabel))},
      {"eval", json::parse(eval_config_json(cfg.eval))},
      {"eval_small_input_mode", cfg.eval.student.small_input_mode},
      {"continual",
       {{"enabled", cfg.continual_enabled},
        {"steps", cfg.continual.steps},
        {"memory_per_class", cfg.continual.memory_per_class},
        {"seed", cfg.continual.seed}}},
  };
  return j.dump();
}

std::string experiment_config_hash(const ExperimentConfig& cfg) {
  return sha256_hex(experiment_config_json(cfg));
}

void validate_experiment(const ExperimentConfig& cfg) {
  if (cfg.name.empty() || cfg.name.find('/') != std::string::npos || cfg.name == "." ||
      cfg.name == "..") {
    throw ConfigError("experiment: name must be a plain directory name");
  }
  normalization_for(cfg.dataset);
  if (cfg.squeeze_spec.input_resolution != cfg.resolution) {
    throw ConfigError("experiment: squeeze backbone resolution differs from the dataset resolution");
  }
  if (cfg.eval.student.input_resolution != cfg.resolution) {
    throw ConfigError("experiment: student resolution differs from the dataset resolution");
  }
  if (cfg.eval.student.num_classes != cfg.squeeze_spec.num_classes) {
    throw ConfigError("experiment: student and teacher class counts differ");
  }
  validate_spec(cfg.squeeze_spec);
  validate_spec(cfg.eval.student);
  validate_squeeze_config(cfg.squeeze);
  validate_recover_config(cfg.recover);
  validate_relabel_config(cfg.relabel);
  validate_eval_config(cfg.eval);
  if (cfg.eval.epochs > cfg.relabel.epochs) {
    throw ConfigError(fmt::format("experiment: eval.epochs ({}) exceeds relabel.epochs ({})",
                                  cfg.eval.epochs, cfg.relabel.epochs));
  }
  std::set<int> seen;
  for (int c : cfg.class_ids) {
    if (c < 0 || c >= cfg.squeeze_spec.num_classes) {
      throw ConfigError(fmt::format("experiment: class {} outside [0, {})", c,
                                    cfg.squeeze_spec.num_classes));
    }
    if (!seen.insert(c).second) throw ConfigError(fmt::format("experiment: class {} repeated", c));
  }
  if (cfg.continual_enabled) {
    const int n = cfg.class_ids.empty() ? cfg.squeeze_spec.num_classes
                                        : static_cast<int>(cfg.class_ids.size());
    partition_classes(all_classes(n), cfg.continual.steps, cfg.continual.seed);
    if (cfg.continual.memory_per_class < 0 || cfg.continual.memory_per_class > cfg.recover.ipc) {
      throw ConfigError("experiment: continual.memory_per_class must be in [0, recover.ipc]");
    }
  }
}

std::string stage_name(Stage s) {
  switch (s) {
    case Stage::kSqueeze: return "squeeze";
    case Stage::kRecover: return "recover";
    case Stage::kRelabel: return "relabel";
    case Stage::kEval: return "eval";
    case Stage::kContinual: return "continual";
  }
  return "unknown";
}

Stage parse_stage(const std::string& name) {
  for (Stage s : {Stage::kSqueeze, Stage::kRecover, Stage::kRelabel, Stage::kEval,
                  Stage::kContinual}) {
    if (stage_name(s) == name) return s;
  }
  throw ConfigError("unknown stage '" + name +
                    "' (expected squeeze, recover, relabel, eval or continual)");
}

// --- Pipeline -------------------------------------------------------------------

namespace {

class PipelineRun {
 public:
  PipelineRun(const ExperimentConfig& cfg, const RunOptions& options)
      : cfg_(cfg), options_(options), dir_(cfg.output_root / cfg.name) {}

  fs::path execute() {
    validate_experiment(cfg_);
    const std::vector<Stage> stages = planned_stages();
    validate_provided();

    fs::create_directories(dir_);
    const std::string hash = experiment_config_hash(cfg_);
    if (fs::exists(dir_ / kManifestName)) {
      manifest_ = read_manifest(dir_);
      if (manifest_["config_hash"] != hash) {
        throw ConfigError("experiment directory " + dir_.string() +
                          " holds a run with a different configuration");
      }
    } else {
      manifest_ = {{"format", kManifestFormat},
                   {"name", cfg_.name},
                   {"config_hash", hash},
                   {"config", json::parse(experiment_config_json(cfg_))},
                   {"seeds",
                    {{"global", cfg_.seed},
                     {"squeeze", cfg_.squeeze.seed},
                     {"recover", cfg_.recover.seed},
                     {"relabel", cfg_.relabel.seed},
                     {"eval", cfg_.eval.seed},
                     {"continual", cfg_.continual.seed}}},
                   {"stages", json::object()}};
      write_text_atomic(dir_ / kConfigName, experiment_config_ini(cfg_));
      write_manifest(dir_, manifest_);
    }

    for (Stage s : stages) run_stage(s);
    emit_stage_report();
    return dir_;
  }

 private:
  std::vector<Stage> planned_stages() const {
    std::vector<Stage> stages = options_.stages;
    if (stages.empty()) {
      if (!options_.checkpoint) stages.push_back(Stage::kSqueeze);
      if (!options_.condensed) stages.push_back(Stage::kRecover);
      if (!options_.archive) stages.push_back(Stage::kRelabel);
      stages.push_back(Stage::kEval);
      if (cfg_.continual_enabled) stages.push_back(Stage::kContinual);
    }
    std::sort(stages.begin(), stages.end());
    stages.erase(std::unique(stages.begin(), stages.end()), stages.end());
    return stages;
  }

  void validate_provided() {
    const BackboneSpec& spec = cfg_.squeeze_spec;
    if (options_.checkpoint) {
      provided_ckpt_ = load_checkpoint(*options_.checkpoint);
      if (provided_ckpt_->spec.input_resolution != cfg_.resolution ||
          provided_ckpt_->spec.num_classes != spec.num_classes) {
        throw ConfigError(fmt::format(
            "provided checkpoint is {} px / {} classes, experiment expects {} px / {} classes",
            provided_ckpt_->spec.input_resolution, provided_ckpt_->spec.num_classes,
            cfg_.resolution, spec.num_classes));
      }
    }
    if (options_.condensed) {
      provided_cd_ = load_condensed(*options_.condensed);
      if (provided_cd_->resolution != cfg_.resolution ||
          provided_cd_->num_classes != spec.num_classes) {
        throw ConfigError(fmt::format(
            "provided condensed set is {} px / {} classes, experiment expects {} px / {} classes",
            provided_cd_->resolution, provided_cd_->num_classes, cfg_.resolution,
            spec.num_classes));
      }
    }
    if (options_.archive) {
      provided_archive_ = load_archive(*options_.archive);
      const auto& meta = provided_archive_->meta;
      if (meta.epochs < cfg_.eval.epochs) {
        throw ConfigError(fmt::format("provided archive holds {} epochs, eval needs {}",
                                      meta.epochs, cfg_.eval.epochs));
      }
      if (meta.num_classes != spec.num_classes || meta.resolution != cfg_.resolution) {
        throw ConfigError("provided archive does not match the experiment's classes or resolution");
      }
      if (provided_cd_ && meta.num_images != provided_cd_->size()) {
        throw ConfigError(fmt::format("provided archive covers {} images, condensed set has {}",
                                      meta.num_images, provided_cd_->size()));
      }
    }
    if (options_.archive && !options_.condensed && options_.stages.empty()) {
      throw ConfigError("a provided archive needs the condensed set it labels (--condensed)");
    }
  }

  fs::path ckpt_path() const { return dir_ / "squeeze" / "checkpoint.bin"; }
  fs::path condensed_path() const { return dir_ / "recover" / "condensed"; }
  fs::path archive_path() const { return dir_ / "relabel" / "labels.bin"; }

  const LabeledDataset& train_set() {
    if (!train_) {
      if (cfg_.data_root.empty()) throw ConfigError("experiment: data_root is not set");
      train_ = load_dataset(cfg_.data_root, cfg_.dataset, Split::kTrain);
      manifest_["datasets"]["train_checksum"] = dataset_checksum(*train_);
    }
    return *train_;
  }
  const LabeledDataset& val_set() {
    if (!val_) {
      if (cfg_.data_root.empty()) throw ConfigError("experiment: data_root is not set");
      val_ = load_dataset(cfg_.data_root, cfg_.dataset, Split::kVal);
      manifest_["datasets"]["val_checksum"] = dataset_checksum(*val_);
    }
    return *val_;
  }

  // Resolves a stage input: completed stage output, else provided artifact
  // (imported and recorded as "provided").
  void require(Stage producer, const std::optional<fs::path>& provided, const fs::path& dst,
               const std::string& what) {
    if (stage_done(manifest_, producer)) return;
    if (!provided) {
      throw ConfigError("stage input " + what + " unavailable: run " + stage_name(producer) +
                        " first or supply the artifact");
    }
    import_artifact(*provided, dst);
    std::vector<fs::path> files;
    if (fs::is_directory(dst)) {
      files = {fs::relative(dst / "manifest.json", dir_), fs::relative(dst / "images.bin", dir_)};
    } else {
      files = {fs::relative(dst, dir_)};
    }
    manifest_["stages"][stage_name(producer)] = {{"status", "provided"},
                                                 {"source", fs::absolute(*provided).string()},
                                                 {"artifacts", checksum_files(dir_, files)}};
    write_manifest(dir_, manifest_);
  }

  void run_stage(Stage s) {
    const std::string key = stage_name(s);
    if (stage_done(manifest_, s)) {
      verify_artifacts(dir_, key, manifest_["stages"][key]);
      spdlog::info("stage {} already complete, skipping", key);
      return;
    }
    const fs::path stage_dir = dir_ / key;
    // Leftovers of an interrupted attempt are not a completed artifact.
    if (fs::exists(stage_dir)) fs::remove_all(stage_dir);
    fs::create_directories(stage_dir);

    json record = {{"status", "running"}};
    manifest_["stages"][key] = record;
    write_manifest(dir_, manifest_);

    spdlog::info("stage {} starting", key);
    const auto t0 = std::chrono::steady_clock::now();
    json metrics = json::object();
    std::vector<fs::path> artifacts;
    try {
      switch (s) {
        case Stage::kSqueeze: artifacts = do_squeeze(stage_dir, metrics); break;
        case Stage::kRecover: artifacts = do_recover(stage_dir, metrics); break;
        case Stage::kRelabel: artifacts = do_relabel(stage_dir, metrics); break;
        case Stage::kEval: artifacts = do_eval(stage_dir, metrics); break;
        case Stage::kContinual: artifacts = do_continual(stage_dir, metrics); break;
      }
    } catch (const std::exception& e) {
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      manifest_["stages"][key] = {{"status", "failed"}, {"error", e.what()}, {"wall_seconds", secs}};
      write_manifest(dir_, manifest_);
      throw;
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::vector<fs::path> rel;
    for (const auto& a : artifacts) rel.push_back(fs::relative(a, dir_));
    if (s == Stage::kRecover) metrics["ms_per_image"] = 1000.0 * secs / std::max(1, recovered_);
    if (s == Stage::kRecover) {
      metrics["ms_per_image_iteration"] =
          1000.0 * secs / std::max(1L, static_cast<long>(recovered_) * cfg_.recover.iterations);
    }
    manifest_["stages"][key] = {{"status", "complete"},
                                {"wall_seconds", secs},
                                {"metrics", metrics},
                                {"artifacts", checksum_files(dir_, rel)}};
    write_manifest(dir_, manifest_);
    spdlog::info("stage {} complete in {:.1f} s", key, secs);
  }

  std::vector<fs::path> do_squeeze(const fs::path& sd, json& metrics) {
    const LabeledDataset& train = train_set();
    const LabeledDataset& val = val_set();
    if (train.num_classes != cfg_.squeeze_spec.num_classes || train.resolution != cfg_.resolution) {
      throw ConfigError(fmt::format("dataset has {} classes at {} px, experiment expects {} at {}",
                                    train.num_classes, train.resolution,
                                    cfg_.squeeze_spec.num_classes, cfg_.resolution));
    }
    std::string log = "epoch,train_loss,train_top1\n";
    SqueezeOptions opts;
    opts.on_epoch = [&](int epoch, double loss, double acc) {
      log += fmt::format("{},{},{}\n", epoch, fmt_double(loss), fmt_double(acc));
      spdlog::info("squeeze epoch {} loss {:.4f} train top-1 {:.4f}", epoch, loss, acc);
    };
    Checkpoint ck = squeeze_train(train, val, cfg_.squeeze_spec, cfg_.squeeze, opts);
    ck.meta.dataset = cfg_.dataset;
    save_checkpoint(ck, sd / "checkpoint.bin");
    write_text_atomic(sd / "train_log.csv", log);
    metrics["val_top1"] = ck.meta.val_top1;
    metrics["checkpoint_id"] = checkpoint_id(ck);
    return {sd / "checkpoint.bin", sd / "train_log.csv"};
  }

  std::vector<fs::path> do_recover(const fs::path& sd, json& metrics) {
    require(Stage::kSqueeze, options_.checkpoint, ckpt_path(), "checkpoint");
    const Checkpoint ck = load_checkpoint(ckpt_path());
    const std::vector<int> classes =
        cfg_.class_ids.empty() ? all_classes(ck.spec.num_classes) : cfg_.class_ids;
    std::string log = "batch,iter,ce,r_bn,r_tv,r_l2,total\n";
    RecoverOptions opts;
    opts.on_step = [&](int batch, int it, const RecoveryLossBreakdown& b) {
      log += fmt::format("{},{},{},{},{},{},{}\n", batch, it, fmt_double(b.ce), fmt_double(b.r_bn),
                         fmt_double(b.r_tv), fmt_double(b.r_l2), fmt_double(b.total));
    };
    opts.partial_dir = sd / "partial";
    CondensedDataset cd;
    try {
      cd = recover(ck, cfg_.recover, classes, normalization_for(cfg_.dataset), opts);
    } catch (...) {
      write_text_atomic(sd / "loss.csv", log);
      throw;
    }
    cd.dataset = cfg_.dataset;
    save_condensed(cd, sd / "condensed");
    write_text_atomic(sd / "loss.csv", log);
    recovered_ = cd.size();
    metrics["images"] = cd.size();
    metrics["condensed_bytes"] = path_bytes(sd / "condensed");
    return {sd / "condensed" / "manifest.json", sd / "condensed" / "images.bin",
            sd / "loss.csv"};
  }

  std::vector<fs::path> do_relabel(const fs::path& sd, json& metrics) {
    require(Stage::kSqueeze, options_.checkpoint, ckpt_path(), "checkpoint");
    require(Stage::kRecover, options_.condensed, condensed_path(), "condensed set");
    const Checkpoint ck = load_checkpoint(ckpt_path());
    const CondensedDataset cd = load_condensed(condensed_path());
    const CropLabelArchive archive = relabel(cd, ck, cfg_.relabel);
    metrics["soft_label_bytes"] = save_archive(archive, sd / "labels.bin");
    return {sd / "labels.bin"};
  }

  std::vector<fs::path> do_eval(const fs::path& sd, json& metrics) {
    require(Stage::kRecover, options_.condensed, condensed_path(), "condensed set");
    require(Stage::kRelabel, options_.archive, archive_path(), "label archive");
    const CondensedDataset cd = load_condensed(condensed_path());
    const CropLabelArchive archive = load_archive(archive_path());
    if (archive.meta.num_images != cd.size()) {
      throw ConfigError(fmt::format("label archive covers {} images, condensed set has {}",
                                    archive.meta.num_images, cd.size()));
    }
    const StudentResult res = train_student(cd, archive, cfg_.eval, val_set());
    std::string csv = "epoch,train_loss,val_top1\n";
    for (const auto& h : res.history) {
      csv += fmt::format("{},{},{}\n", h.epoch, fmt_double(h.train_loss),
                         h.val_top1 < 0 ? std::string() : fmt_double(h.val_top1));
    }
    write_text_atomic(sd / "report.csv", csv);
    save_checkpoint(res.student, sd / "student.bin");
    metrics["final_top1"] = res.final_top1;
    return {sd / "report.csv", sd / "student.bin"};
  }

  std::vector<fs::path> do_continual(const fs::path& sd, json& metrics) {
    require(Stage::kRecover, options_.condensed, condensed_path(), "condensed set");
    require(Stage::kRelabel, options_.archive, archive_path(), "label archive");
    const CondensedDataset cd = load_condensed(condensed_path());
    const CropLabelArchive archive = load_archive(archive_path());
    const auto steps = class_incremental_run(cd, archive, cfg_.eval, val_set(), cfg_.continual);
    std::string csv = "step,classes_seen,train_images,top1\n";
    for (const auto& st : steps) {
      std::vector<std::string> names;
      for (int c : st.classes_seen) names.push_back(std::to_string(c));
      csv += fmt::format("{},{},{},{}\n", st.step, boost::join(names, " "), st.train_images,
                         fmt_double(st.top1));
    }
    write_text_atomic(sd / "report.csv", csv);
    metrics["final_top1"] = steps.empty() ? 0.0 : steps.back().top1;
    return {sd / "report.csv"};
  }

  void emit_stage_report() {
    std::vector<fs::path> csvs;
    for (const char* rel : {"squeeze/train_log.csv", "recover/loss.csv", "eval/report.csv",
                            "continual/report.csv"}) {
      if (fs::exists(dir_ / rel)) csvs.push_back(dir_ / rel);
    }
    if (!csvs.empty()) emit_report(csvs, dir_ / "report");
  }

  ExperimentConfig cfg_;
  RunOptions options_;
  fs::path dir_;
  json manifest_;
  std::optional<Checkpoint> provided_ckpt_;
  std::optional<CondensedDataset> provided_cd_;
  std::optional<CropLabelArchive> provided_archive_;
  std::optional<LabeledDataset> train_, val_;
  int recovered_ = 0;
};

}  // namespace

fs::path run_pipeline(const ExperimentConfig& cfg, const RunOptions& options) {
  return PipelineRun(cfg, options).execute();
}

fs::path resume(const fs::path& experiment_dir) {
  const json manifest = read_manifest(experiment_dir);
  const fs::path cfg_path = experiment_dir / kConfigName;
  if (!fs::exists(cfg_path)) {
    throw IntegrityError("experiment " + experiment_dir.string() + " has no " + kConfigName);
  }
  ExperimentConfig cfg = parse_experiment_config(read_text_file(cfg_path),
                                                 fs::absolute(experiment_dir).parent_path());
  const fs::path abs = fs::absolute(experiment_dir).lexically_normal();
  cfg.output_root = (abs.has_filename() ? abs : abs.parent_path()).parent_path();
  cfg.name = (abs.has_filename() ? abs : abs.parent_path()).filename().string();
  if (experiment_config_hash(cfg) != manifest["config_hash"].get<std::string>()) {
    throw IntegrityError("stored config in " + experiment_dir.string() +
                         " does not match the run manifest's config hash");
  }
  // Stages before the last recorded one that were never recorded were
  // skipped by supplying later artifacts; they stay skipped.
  const std::vector<Stage> all = {Stage::kSqueeze, Stage::kRecover, Stage::kRelabel, Stage::kEval,
                                  Stage::kContinual};
  int last_recorded = -1;
  for (int i = 0; i < static_cast<int>(all.size()); ++i) {
    if (manifest["stages"].contains(stage_name(all[i]))) last_recorded = i;
  }
  RunOptions options;
  for (int i = 0; i < static_cast<int>(all.size()); ++i) {
    if (all[i] == Stage::kContinual && !cfg.continual_enabled) continue;
    if (i < last_recorded && !manifest["stages"].contains(stage_name(all[i]))) continue;
    options.stages.push_back(all[i]);
  }
  return run_pipeline(cfg, options);
}

std::string inspect(const fs::path& experiment_dir) {
  if (!fs::exists(experiment_dir / kManifestName)) {
    return "no experiment at " + experiment_dir.string() + "\n";
  }
  const json m = read_manifest(experiment_dir);
  std::ostringstream o;
  o << "experiment  " << m.value("name", experiment_dir.filename().string()) << "\n"
    << "config      " << m["config_hash"].get<std::string>() << "\n";
  if (m.contains("peak_rss_kb")) {
    o << fmt::format("peak rss    {:.1f} MiB\n", m["peak_rss_kb"].get<double>() / 1024.0);
  }
  for (Stage s : {Stage::kSqueeze, Stage::kRecover, Stage::kRelabel, Stage::kEval,
                  Stage::kContinual}) {
    const std::string key = stage_name(s);
    if (!m["stages"].contains(key)) {
      o << fmt::format("{:<10}  pending\n", key);
      continue;
    }
    const json& r = m["stages"][key];
    o << fmt::format("{:<10}  {}", key, r.value("status", "?"));
    if (r.contains("wall_seconds")) o << fmt::format("  {:.1f} s", r["wall_seconds"].get<double>());
    o << "\n";
    if (r.contains("error")) o << "    error: " << r["error"].get<std::string>() << "\n";
    if (r.contains("metrics")) {
      for (const auto& [k, v] : r["metrics"].items()) o << "    " << k << ": " << v.dump() << "\n";
    }
    if (r.contains("artifacts")) {
      for (const auto& [rel, sha] : r["artifacts"].items()) {
        o << fmt::format("    {}  {} bytes  sha256 {}\n", rel, path_bytes(experiment_dir / rel),
                         sha.get<std::string>().substr(0, 16));
      }
    }
  }
  const fs::path cd = experiment_dir / "recover" / "condensed";
  if (fs::exists(cd)) o << fmt::format("condensed set size   {} bytes\n", path_bytes(cd));
  const fs::path ar = experiment_dir / "relabel" / "labels.bin";
  if (fs::exists(ar)) o << fmt::format("soft-label archive   {} bytes\n", path_bytes(ar));
  return o.str();
}

}  // namespace condense
