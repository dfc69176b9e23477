#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "condense/analysis.h"
#include "condense/errors.h"
#include "condense/io_util.h"
#include "support/fixtures.h"
#include "support/temp_dir.h"

namespace condense {
namespace {

using testing::random_teacher;
using testing::TempDir;

TEST(MutualInfo, SymmetricTwoByTwoIsLogNine) {
  const std::vector<std::vector<double>> cond = {{0.9, 0.1}, {0.1, 0.9}};
  EXPECT_NEAR(mutual_info_upper_bound(cond), std::log(9.0), 1e-12);
  EXPECT_NEAR(mutual_info_upper_bound(cond), 2.1972245773, 1e-9);
  EXPECT_NEAR(mutual_info_upper_bound(cond, 2.0), std::log2(9.0), 1e-12);
}

TEST(MutualInfo, MatchesBruteForceOnRandomMatrix) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.05, 2.0);
  std::vector<std::vector<double>> cond(3, std::vector<double>(3));
  for (auto& row : cond) {
    for (auto& v : row) v = u(rng);
  }
  double oracle = 0;
  for (int i = 0; i < 3; ++i) {
    double others = 0;
    for (int j = 0; j < 3; ++j) {
      if (j != i) others += cond[i][j];
    }
    oracle += std::log(cond[i][i] / (others / 2.0));
  }
  oracle /= 3.0;
  EXPECT_NEAR(mutual_info_upper_bound(cond), oracle, 1e-12);
}

TEST(MutualInfo, IdenticalColumnsGiveZero) {
  const std::vector<std::vector<double>> cond = {{0.3, 0.3, 0.3}, {0.5, 0.5, 0.5}, {0.2, 0.2, 0.2}};
  EXPECT_NEAR(mutual_info_upper_bound(cond), 0.0, 1e-12);
}

TEST(MutualInfo, DomainErrors) {
  EXPECT_THROW(mutual_info_upper_bound({{1.0}}), DomainError);
  EXPECT_THROW(mutual_info_upper_bound({{0.5, 0.5}, {0.5}}), DomainError);
  EXPECT_THROW(mutual_info_upper_bound({{0.5, 0.0}, {0.5, 0.5}}), DomainError);
  EXPECT_THROW(mutual_info_upper_bound({{0.5, -0.1}, {0.5, 0.5}}), DomainError);
  EXPECT_THROW(mutual_info_upper_bound({{0.5, 0.5}, {0.5, 0.5}}, 1.0), DomainError);
}

TEST(Icb, HandValues) {
  EXPECT_NEAR(generalization_bound_icb(0.0, 1.0, 50), 0.1, 1e-12);
  // 2^3 = 8, ln(1/0.5) = ln 2.
  EXPECT_NEAR(generalization_bound_icb(3.0, 0.5, 10), std::sqrt((8.0 + std::log(2.0)) / 20.0),
              1e-12);
  // Natural-base information: e^1 + log2(1/0.25) = e + 2.
  EXPECT_NEAR(generalization_bound_icb(1.0, 0.25, 4, M_E, 2.0), std::sqrt((M_E + 2.0) / 8.0),
              1e-12);
}

TEST(Icb, MonotoneInInformationConfidenceAndSampleSize) {
  double prev = 0;
  for (double info : {0.0, 0.5, 1.0, 4.0, 10.0}) {
    const double b = generalization_bound_icb(info, 0.05, 1000);
    EXPECT_GT(b, prev);
    prev = b;
  }
  EXPECT_GT(generalization_bound_icb(1.0, 0.01, 100), generalization_bound_icb(1.0, 0.1, 100));
  EXPECT_GT(generalization_bound_icb(1.0, 0.05, 100), generalization_bound_icb(1.0, 0.05, 1000));
}

TEST(Icb, DomainErrors) {
  EXPECT_THROW(generalization_bound_icb(1.0, 0.0, 10), DomainError);
  EXPECT_THROW(generalization_bound_icb(1.0, 1.5, 10), DomainError);
  EXPECT_THROW(generalization_bound_icb(1.0, 0.5, 0), DomainError);
  EXPECT_THROW(generalization_bound_icb(1.0, 0.5, 10, 2.0, 1.0), DomainError);
}

TEST(Embeddings, MatchModelFeaturesAndRoundTrip) {
  TempDir tmp;
  const Checkpoint teacher = random_teacher(21, 5);
  std::mt19937_64 rng(2);
  std::normal_distribution<float> d(0, 1);
  Tensor<float> images({3, 3, 32, 32});
  for (auto& v : images.storage()) v = d(rng);
  const Embeddings e = extract_embeddings(teacher, images);
  Model<float> model = instantiate<float>(teacher);
  const Tensor<float> feats = model.features(images, nn::Mode::kEval);
  ASSERT_EQ(e.rows, 3);
  ASSERT_EQ(e.dim, model.feature_dim());
  EXPECT_EQ(e.checkpoint_id, checkpoint_id(teacher));
  ASSERT_EQ(e.values.size(), feats.size());
  for (std::size_t i = 0; i < feats.size(); ++i) EXPECT_FLOAT_EQ(e.values[i], feats[i]);

  save_embeddings(e, tmp / "e.bin");
  EXPECT_EQ(load_embeddings(tmp / "e.bin"), e);
  auto bytes = read_file_bytes(tmp / "e.bin");
  bytes[0] ^= 0xff;
  write_file_atomic(tmp / "bad.bin", bytes);
  EXPECT_THROW(load_embeddings(tmp / "bad.bin"), CorruptionError);

  save_embeddings_tsv(e, tmp / "e.tsv");
  std::ifstream in(tmp / "e.tsv");
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    std::istringstream cells(line);
    std::string cell;
    int n = 0;
    while (std::getline(cells, cell, '\t')) ++n;
    EXPECT_EQ(n, e.dim);
    ++lines;
  }
  EXPECT_EQ(lines, 3);
}

TEST(Report, MergesHeadersAndIsIdempotent) {
  TempDir tmp;
  write_text_atomic(tmp / "a.csv", "epoch,loss\n0,1.5\n1,1.2\n");
  write_text_atomic(tmp / "b.csv", "epoch,top1\n3,0.5\n");
  emit_report({tmp / "a.csv", tmp / "b.csv"}, tmp / "out");
  EXPECT_EQ(read_text_file(tmp / "out" / "report.csv"),
            "source,epoch,loss,top1\na,0,1.5,\na,1,1.2,\nb,3,,0.5\n");
  const std::string manifest = read_text_file(tmp / "out" / "report_manifest.json");
  EXPECT_NE(manifest.find(sha256_file(tmp / "a.csv")), std::string::npos);
  emit_report({tmp / "a.csv", tmp / "b.csv"}, tmp / "out");
  EXPECT_EQ(read_text_file(tmp / "out" / "report_manifest.json"), manifest);
}

TEST(Report, MissingOrMalformedInputIsIngestError) {
  TempDir tmp;
  EXPECT_THROW(emit_report({tmp / "nope.csv"}, tmp / "out"), IngestError);
  write_text_atomic(tmp / "empty.csv", "");
  EXPECT_THROW(emit_report({tmp / "empty.csv"}, tmp / "out"), IngestError);
  write_text_atomic(tmp / "ragged.csv", "a,b\n1\n");
  EXPECT_THROW(emit_report({tmp / "ragged.csv"}, tmp / "out"), IngestError);
}

}  // namespace
}  // namespace condense
