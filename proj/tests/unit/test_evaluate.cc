#include <gtest/gtest.h>

#include <cmath>

#include "condense/errors.h"
#include "condense/evaluate.h"
#include "support/fixtures.h"

namespace condense {
namespace {

using testing::one_hot_archive;
using testing::random_condensed;
using testing::random_teacher;

EvalConfig small_eval(int epochs, std::uint64_t seed = 1) {
  EvalConfig cfg;
  cfg.student.arch = Arch::kConvNet4;
  cfg.student.width = 8;
  cfg.epochs = epochs;
  cfg.batch_size = 4;
  cfg.optimizer.lr = 0.05;
  cfg.seed = seed;
  return cfg;
}

TEST(TrainStudent, OverfitsSingleImageOfOneClass) {
  const CondensedDataset cd = random_condensed(1, 4, {2}, 1);
  const CropLabelArchive archive = one_hot_archive(cd, 50, 3);
  const StudentResult res = train_student(cd, archive, small_eval(50), LabeledDataset{});
  ASSERT_EQ(res.history.size(), 50u);
  Model<float> student = instantiate<float>(res.student);
  const CropRecord& rec = archive.records[0][49];
  Tensor<float> x({1, 3, 32, 32});
  resized_crop(cd.images.data(), 3, 32, 32, rec.rect, rec.hflip, 32, 32, x.data());
  const auto pred = argmax_rows(student.forward(x, nn::Mode::kEval));
  EXPECT_EQ(pred[0], 2);
  EXPECT_LT(res.history.back().train_loss, res.history.front().train_loss);
}

TEST(TrainStudent, NearZeroTemperatureMatchesHardLabelTraining) {
  const Checkpoint teacher = random_teacher(4, 5);
  const CondensedDataset cd = random_condensed(5, 5, {0, 1, 2, 3, 4}, 2);
  RelabelConfig rc;
  rc.temperature = 1e-4;
  rc.epochs = 4;
  rc.precision = LabelPrecision::kFloat32;
  const CropLabelArchive archive = relabel(cd, teacher, rc);
  EvalConfig soft = small_eval(4);
  EvalConfig hard = soft;
  hard.targets = TargetMode::kArgmax;
  const StudentResult a = train_student(cd, archive, soft, LabeledDataset{});
  const StudentResult b = train_student(cd, archive, hard, LabeledDataset{});
  ASSERT_EQ(a.step_losses.size(), b.step_losses.size());
  ASSERT_EQ(a.step_losses.size(), 12u);
  for (std::size_t i = 0; i < a.step_losses.size(); ++i) {
    EXPECT_NEAR(a.step_losses[i], b.step_losses[i], 1e-6) << "step " << i;
  }
}

TEST(TrainStudent, DeterministicForFixedSeed) {
  const CondensedDataset cd = random_condensed(6, 3, {0, 1, 2}, 3);
  const CropLabelArchive archive = one_hot_archive(cd, 3, 1);
  EvalConfig cfg = small_eval(3, 9);
  cfg.cutmix = true;
  const StudentResult a = train_student(cd, archive, cfg, LabeledDataset{});
  const StudentResult b = train_student(cd, archive, cfg, LabeledDataset{});
  EXPECT_EQ(a.step_losses, b.step_losses);
  EXPECT_EQ(a.student.parameters, b.student.parameters);
  cfg.seed = 10;
  EXPECT_NE(train_student(cd, archive, cfg, LabeledDataset{}).step_losses, a.step_losses);
}

TEST(TrainStudent, TrailingSingletonBatchIsMerged) {
  const CondensedDataset cd = random_condensed(7, 3, {0, 1, 2}, 3);  // 9 images
  const CropLabelArchive archive = one_hot_archive(cd, 2, 1);
  const StudentResult res = train_student(cd, archive, small_eval(2), LabeledDataset{});
  EXPECT_EQ(res.step_losses.size(), 4u);  // batches 4, 5 per epoch
}

TEST(TrainStudent, RejectsArchiveOverrunAndMismatch) {
  const CondensedDataset cd = random_condensed(8, 3, {0, 1}, 2);
  const CropLabelArchive archive = one_hot_archive(cd, 2, 1);
  EXPECT_THROW(train_student(cd, archive, small_eval(3), LabeledDataset{}), ConfigError);
  const CondensedDataset other = random_condensed(8, 3, {0, 1, 2}, 2);
  EXPECT_THROW(train_student(other, archive, small_eval(2), LabeledDataset{}), ConfigError);
}

TEST(TrainStudent, ValidationHistoryFollowsSchedule) {
  const CondensedDataset cd = random_condensed(9, 3, {0, 1, 2}, 2);
  const CropLabelArchive archive = one_hot_archive(cd, 4, 1);
  LabeledDataset val;
  val.resolution = 32;
  val.channels = 3;
  val.num_classes = 3;
  val.images = gather_rows(cd.images, {0, 2, 4});
  val.labels = {0, 1, 2};
  EvalConfig cfg = small_eval(4);
  cfg.eval_every = 2;
  const StudentResult res = train_student(cd, archive, cfg, val);
  ASSERT_EQ(res.history.size(), 4u);
  EXPECT_LT(res.history[0].val_top1, 0);
  EXPECT_GE(res.history[1].val_top1, 0);
  EXPECT_LT(res.history[2].val_top1, 0);
  EXPECT_EQ(res.history[3].val_top1, res.final_top1);
}

}  // namespace
}  // namespace condense
