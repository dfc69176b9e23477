#include "condense/analysis.h"

#include <boost/algorithm/string.hpp>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "condense/errors.h"
#include "condense/io_util.h"

namespace condense {

namespace fs = std::filesystem;

namespace {
constexpr char kEmbMagic[8] = {'C', 'N', 'D', 'S', 'E', 'M', 'B', '1'};
}

Embeddings extract_embeddings(const Checkpoint& checkpoint, const Tensor<float>& images) {
  if (images.rank() != 4 || images.dim(1) != checkpoint.spec.channels ||
      images.dim(2) != checkpoint.spec.input_resolution ||
      images.dim(3) != checkpoint.spec.input_resolution) {
    throw ConfigError("embeddings: images " + shape_str(images.shape()) +
                      " do not match the checkpoint input geometry");
  }
  Model<float> model = instantiate<float>(checkpoint);
  Embeddings e;
  e.rows = images.dim(0);
  e.dim = model.feature_dim();
  e.checkpoint_id = checkpoint_id(checkpoint);
  e.values.reserve(static_cast<std::size_t>(e.rows) * e.dim);
  constexpr int kChunk = 250;
  for (int b = 0; b < e.rows; b += kChunk) {
    const Tensor<float> f = model.features(images.slice(b, std::min(e.rows, b + kChunk)),
                                           nn::Mode::kEval);
    e.values.insert(e.values.end(), f.storage().begin(), f.storage().end());
  }
  return e;
}

void save_embeddings(const Embeddings& e, const fs::path& path) {
  ByteWriter w;
  w.put_bytes(std::string_view(kEmbMagic, 8));
  w.put(static_cast<std::uint32_t>(e.rows));
  w.put(static_cast<std::uint32_t>(e.dim));
  w.put(static_cast<std::uint32_t>(e.checkpoint_id.size()));
  w.put_bytes(e.checkpoint_id);
  w.put_array<float>(e.values);
  write_file_atomic(path, w.bytes());
}

Embeddings load_embeddings(const fs::path& path) {
  const auto bytes = read_file_bytes(path);
  const std::string what = "embeddings " + path.string();
  if (bytes.size() < 8 || !std::equal(kEmbMagic, kEmbMagic + 8, bytes.begin())) {
    throw CorruptionError(what + ": bad magic");
  }
  ByteReader r(bytes, what);
  r.get_string(8);
  Embeddings e;
  e.rows = static_cast<int>(r.get<std::uint32_t>());
  e.dim = static_cast<int>(r.get<std::uint32_t>());
  e.checkpoint_id = r.get_string(r.get<std::uint32_t>());
  e.values.resize(static_cast<std::size_t>(e.rows) * e.dim);
  r.get_array<float>(e.values);
  if (r.remaining() != 0) throw CorruptionError(what + ": trailing bytes");
  return e;
}

void save_embeddings_tsv(const Embeddings& e, const fs::path& path) {
  std::ostringstream os;
  os.precision(9);
  for (int i = 0; i < e.rows; ++i) {
    for (int j = 0; j < e.dim; ++j) {
      os << (j ? "\t" : "") << e.values[static_cast<std::size_t>(i) * e.dim + j];
    }
    os << '\n';
  }
  write_text_atomic(path, os.str());
}

double mutual_info_upper_bound(const std::vector<std::vector<double>>& cond, double log_base) {
  const std::size_t n = cond.size();
  if (n < 2) throw DomainError("mutual_info_upper_bound: need N >= 2");
  if (!(log_base > 0) || log_base == 1) throw DomainError("mutual_info_upper_bound: bad log base");
  for (const auto& row : cond) {
    if (row.size() != n) throw DomainError("mutual_info_upper_bound: matrix is not N x N");
    for (double v : row) {
      if (!(v > 0) || !std::isfinite(v)) {
        throw DomainError("mutual_info_upper_bound: densities must be positive and finite");
      }
    }
  }
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double off = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) off += cond[i][j];
    }
    total += std::log(cond[i][i] / (off / static_cast<double>(n - 1)));
  }
  return total / static_cast<double>(n) / std::log(log_base);
}

double generalization_bound_icb(double info, double delta, long n_train, double info_base,
                                double conf_log_base) {
  if (!(delta > 0) || delta > 1) throw DomainError("icb: delta must lie in (0, 1]");
  if (n_train < 1) throw DomainError("icb: n_train must be >= 1");
  if (!(info_base > 0) || !(conf_log_base > 0) || conf_log_base == 1) {
    throw DomainError("icb: bad log base");
  }
  const double conf = std::log(1.0 / delta) / std::log(conf_log_base);
  return std::sqrt((std::pow(info_base, info) + conf) / (2.0 * static_cast<double>(n_train)));
}

void emit_report(const std::vector<fs::path>& csvs, const fs::path& out_dir) {
  struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
  };
  std::vector<Table> tables;
  std::vector<std::string> columns;
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& p : csvs) {
    if (!fs::exists(p)) throw IngestError("report input " + p.string() + " does not exist");
    std::istringstream in(read_text_file(p));
    Table t;
    std::string line;
    if (!std::getline(in, line) || line.empty()) {
      throw IngestError("report input " + p.string() + " has no header");
    }
    boost::split(t.header, line, boost::is_any_of(","));
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::vector<std::string> cells;
      boost::split(cells, line, boost::is_any_of(","));
      if (cells.size() != t.header.size()) {
        throw IngestError("report input " + p.string() + ": row width differs from header");
      }
      t.rows.push_back(std::move(cells));
    }
    for (const auto& h : t.header) {
      if (std::find(columns.begin(), columns.end(), h) == columns.end()) columns.push_back(h);
    }
    manifest.push_back(
        {{"path", p.string()}, {"sha256", sha256_file(p)}, {"rows", t.rows.size()}});
    tables.push_back(std::move(t));
  }

  std::ostringstream os;
  os << "source";
  for (const auto& c : columns) os << ',' << c;
  os << '\n';
  for (std::size_t s = 0; s < tables.size(); ++s) {
    const Table& t = tables[s];
    const std::string source = csvs[s].stem().string();
    for (const auto& row : t.rows) {
      os << source;
      for (const auto& c : columns) {
        const auto it = std::find(t.header.begin(), t.header.end(), c);
        os << ',' << (it == t.header.end() ? "" : row[it - t.header.begin()]);
      }
      os << '\n';
    }
  }
  fs::create_directories(out_dir);
  write_text_atomic(out_dir / "report.csv", os.str());
  write_text_atomic(out_dir / "report_manifest.json",
                    nlohmann::json{{"sources", manifest}, {"columns", columns}}.dump(2));
}

}  // namespace condense
