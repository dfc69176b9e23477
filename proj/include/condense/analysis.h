#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "condense/checkpoint.h"

namespace condense {

struct Embeddings {
  int rows = 0;
  int dim = 0;
  std::string checkpoint_id;
  std::vector<float> values;  // rows x dim, row-major

  bool operator==(const Embeddings&) const = default;
};

// Penultimate-layer features of `images` (N x C x H x W, normalized) in
// inference mode, one row per image in input order.
Embeddings extract_embeddings(const Checkpoint& checkpoint, const Tensor<float>& images);

// Binary layout: "CNDSEMB1" | u32 rows | u32 dim | u32 n | n bytes checkpoint
// id | f32[rows * dim]. The TSV variant writes one row per line.
void save_embeddings(const Embeddings& e, const std::filesystem::path& path);
Embeddings load_embeddings(const std::filesystem::path& path);
void save_embeddings_tsv(const Embeddings& e, const std::filesystem::path& path);

// Leave-one-out upper bound on I(X; D) from cond[i][j] = p(d_i | x_j):
//   (1/N) sum_i log( cond[i][i] / ((1/(N-1)) sum_{j != i} cond[i][j]) )
// in units of log base `log_base` (e gives nats). Throws DomainError for
// N < 2, a non-square matrix or a non-positive entry.
double mutual_info_upper_bound(const std::vector<std::vector<double>>& cond,
                               double log_base = M_E);

// sqrt((info_base^I + log_{conf_base}(1/delta)) / (2 n_train)); I in units of
// info_base (bits by default), the confidence term in nats by default.
// Throws DomainError for delta outside (0, 1] or n_train < 1.
double generalization_bound_icb(double info, double delta, long n_train, double info_base = 2.0,
                                double conf_log_base = M_E);

// Merges CSV files into <out_dir>/report.csv (a leading `source` column plus
// the union of all headers, first-seen order) and <out_dir>/report_manifest.json
// (per source: path, SHA-256, row count). Throws IngestError when an input
// is missing or has a malformed header. Re-running on the same inputs
// rewrites identical files.
void emit_report(const std::vector<std::filesystem::path>& csvs,
                 const std::filesystem::path& out_dir);

}  // namespace condense
