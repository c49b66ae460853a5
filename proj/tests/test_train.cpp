#include <gtest/gtest.h>

#include <cmath>

#include "attnfd/train.hpp"

using namespace attnfd;

namespace {

RunConfig tiny_config() {
  RunConfig cfg;
  cfg.seed = 5;
  cfg.canvas = 16;
  cfg.classes = 3;
  cfg.train_count = 8;
  cfg.val_count = 4;
  cfg.shapes_min = 1;
  cfg.shapes_max = 3;
  cfg.noise = real(0.1);
  cfg.teacher_widths = {4, 8};
  cfg.student_widths = {4, 4};
  cfg.reduction = 4;
  cfg.lr0 = real(0.05);
  cfg.epochs = 2;
  cfg.calib_epochs = 1;
  cfg.distill_epochs = 2;
  cfg.batch_size = 4;
  cfg.eval_every = 2;
  cfg.weight_decay = 0;
  return cfg;
}

std::vector<Sample> make_data(const RunConfig& cfg, int count, int first_index) {
  std::vector<Sample> out;
  ShapesSpec spec = cfg.shapes_spec();
  for (int i = 0; i < count; ++i) out.push_back(generate(spec, first_index + i));
  return out;
}

bool blocks_equal(const Checkpoint& a, const Checkpoint& b, const std::string& prefix) {
  for (const auto& [name, t] : a.blocks) {
    if (name.rfind(prefix, 0) != 0) continue;
    if (!b.has_block(name) || !(b.block(name) == t)) return false;
  }
  return true;
}

}  // namespace

TEST(CosineLr, ExactEndpointsAndMidpoint) {
  EXPECT_EQ(cosine_lr(0, 10, real(0.1), real(0.001)), real(0.1));
  EXPECT_EQ(cosine_lr(10, 10, real(0.1), real(0.001)), real(0.001));
  EXPECT_NEAR(cosine_lr(5, 10, real(0.1), 0), 0.05, 1e-15);
  // quarter point: lr_min + (lr0 - lr_min) (1 + cos(pi/4)) / 2
  const double expect = 0.5 * 0.1 * (1 + std::cos(M_PI / 4));
  EXPECT_NEAR(cosine_lr(25, 100, real(0.1), 0), expect, 1e-15);
}

TEST(CosineLr, MonotoneNonIncreasing) {
  real prev = cosine_lr(0, 50, real(0.1), real(0.001));
  for (int s = 1; s <= 50; ++s) {
    real cur = cosine_lr(s, 50, real(0.1), real(0.001));
    EXPECT_LE(cur, prev);
    prev = cur;
  }
}

TEST(CosineLr, RejectsBadArguments) {
  EXPECT_THROW(cosine_lr(0, 0, 1, 0), ContractError);
  EXPECT_THROW(cosine_lr(-1, 10, 1, 0), ContractError);
  EXPECT_THROW(cosine_lr(11, 10, 1, 0), ContractError);
  EXPECT_THROW(cosine_lr(5, 10, real(0.1), real(0.2)), ContractError);
}

TEST(SgdStep, PlainGradientDescent) {
  Tensor p({2}, {1, 2});
  Tensor g({2}, {1, -1});
  Tensor v({2});
  sgd_step(p, g, v, real(0.1), 0, 0);
  EXPECT_DOUBLE_EQ(p[0], 0.9);
  EXPECT_DOUBLE_EQ(p[1], 2.1);
  sgd_step(p, Tensor({2}), v, real(0.1), 0, 0);  // zero grad: no movement
  EXPECT_DOUBLE_EQ(p[0], 0.9);
  EXPECT_DOUBLE_EQ(p[1], 2.1);
}

TEST(SgdStep, MomentumHandUnrolled) {
  Tensor p({1}, {1});
  Tensor g({1}, {1});
  Tensor v({1});
  const real lr = real(0.1), m = real(0.9);
  sgd_step(p, g, v, lr, m, 0);
  sgd_step(p, g, v, lr, m, 0);
  const real v1 = 1;
  const real p1 = 1 - lr * v1;
  const real v2 = m * v1 + 1;
  const real p2 = p1 - lr * v2;
  EXPECT_DOUBLE_EQ(v[0], v2);
  EXPECT_DOUBLE_EQ(p[0], p2);
}

TEST(SgdStep, WeightDecayEntersVelocity) {
  Tensor p({1}, {2});
  Tensor g({1});
  Tensor v({1});
  sgd_step(p, g, v, real(0.1), 0, real(0.01));
  EXPECT_DOUBLE_EQ(v[0], 0.02);             // wd * p
  EXPECT_DOUBLE_EQ(p[0], 2 - 0.1 * 0.02);
  EXPECT_THROW(sgd_step(p, Tensor({2}), v, 1, 0, 0), ContractError);
}

TEST(SgdOptimizer, SkipsFrozenParams) {
  Param a(Tensor({1}, {1}));
  Param b(Tensor({1}, {1}));
  b.trainable = false;
  a.grad[0] = 1;
  b.grad[0] = 1;
  SgdOptimizer opt({&a, &b}, 0, 0);
  opt.step(real(0.5));
  EXPECT_DOUBLE_EQ(a.value[0], 0.5);
  EXPECT_DOUBLE_EQ(b.value[0], 1.0);
  opt.zero_grad();
  EXPECT_DOUBLE_EQ(a.grad[0], 0.0);
  EXPECT_DOUBLE_EQ(b.grad[0], 0.0);
}

TEST(TrainTeacher, ZeroEpochsKeepsInitialization) {
  RunConfig cfg = tiny_config();
  cfg.epochs = 0;
  cfg.calib_epochs = 0;
  std::vector<Sample> train = make_data(cfg, cfg.train_count, 0);
  std::vector<Sample> val = make_data(cfg, cfg.val_count, cfg.train_count);
  TrainResult r = train_teacher(cfg, train, val);
  EXPECT_TRUE(r.rows.empty());
  Network fresh = Network::build(cfg.teacher_net(), derive_seed(cfg.seed, "net", 0));
  for (auto& [name, p] : fresh.named_params()) EXPECT_EQ(r.checkpoint.block(name), p->value);
}

TEST(TrainTeacher, BeatsUntrainedNetwork) {
  RunConfig cfg = tiny_config();
  cfg.epochs = 6;
  std::vector<Sample> train = make_data(cfg, cfg.train_count, 0);
  std::vector<Sample> val = make_data(cfg, cfg.val_count, cfg.train_count);
  Network fresh = Network::build(cfg.teacher_net(), derive_seed(cfg.seed, "net", 0));
  const double untrained = evaluate(fresh, val, cfg.batch_size).miou;
  TrainResult r = train_teacher(cfg, train, val);
  EXPECT_GT(r.final_eval.miou, untrained);
}

TEST(TrainTeacher, BitwiseDeterministic) {
  RunConfig cfg = tiny_config();
  std::vector<Sample> train = make_data(cfg, cfg.train_count, 0);
  std::vector<Sample> val = make_data(cfg, cfg.val_count, cfg.train_count);
  TrainResult a = train_teacher(cfg, train, val);
  TrainResult b = train_teacher(cfg, train, val);
  ASSERT_EQ(a.rows.size(), b.rows.size());
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    EXPECT_EQ(a.rows[i].lr, b.rows[i].lr);
    EXPECT_EQ(a.rows[i].ce, b.rows[i].ce);
    EXPECT_EQ(a.rows[i].total, b.rows[i].total);
  }
  ASSERT_EQ(a.checkpoint.blocks.size(), b.checkpoint.blocks.size());
  for (std::size_t i = 0; i < a.checkpoint.blocks.size(); ++i)
    EXPECT_EQ(a.checkpoint.blocks[i].second, b.checkpoint.blocks[i].second);
}

TEST(TrainTeacher, LossDecreasesAndRowsAreOrdered) {
  RunConfig cfg = tiny_config();
  cfg.epochs = 4;
  cfg.calib_epochs = 2;
  cfg.eval_every = 2;
  std::vector<Sample> train = make_data(cfg, cfg.train_count, 0);
  std::vector<Sample> val = make_data(cfg, cfg.val_count, cfg.train_count);
  int calls = 0;
  TrainResult r = train_teacher(cfg, train, val,
                                [&](const EpochRow& row) { EXPECT_EQ(row.epoch, calls++); });
  ASSERT_EQ(r.rows.size(), 6u);  // 4 CE epochs + 2 calibration epochs
  EXPECT_EQ(calls, 6);
  EXPECT_LT(r.rows[3].ce, r.rows[0].ce);
  EXPECT_TRUE(r.rows.back().evaled);
  EXPECT_TRUE(std::isfinite(r.rows.back().val_miou));
  EXPECT_FALSE(r.rows[0].evaled);
  EXPECT_TRUE(std::isnan(r.rows[0].val_miou));
  // checkpoint carries calibrated attention blocks for every tap
  for (const char* tap : {"B", "E", "D"})
    EXPECT_TRUE(r.checkpoint.has_block(std::string("cbam.") + tap + ".w0"));
  EXPECT_EQ(*r.checkpoint.metric("val_miou"), r.final_eval.miou);
}

TEST(TrainTeacher, CheckpointRoundTripsThroughLoader) {
  RunConfig cfg = tiny_config();
  std::vector<Sample> train = make_data(cfg, cfg.train_count, 0);
  std::vector<Sample> val = make_data(cfg, cfg.val_count, cfg.train_count);
  TrainResult r = train_teacher(cfg, train, val);
  TeacherModel m = load_teacher(r.checkpoint);
  EXPECT_TRUE(m.net.frozen());
  for (auto& [name, p] : m.net.named_params()) EXPECT_EQ(p->value, r.checkpoint.block(name));
  ASSERT_EQ(m.cbams.size(), 3u);
  EXPECT_EQ(m.cbams[0].w0.value, r.checkpoint.block("cbam.B.w0"));
  EXPECT_FALSE(m.cbams[0].w0.trainable);
  EvalResult ev = evaluate(m.net, val, cfg.batch_size);
  EXPECT_EQ(ev.miou, r.final_eval.miou);
  EXPECT_THROW(load_student(r.checkpoint), ConfigError);
}

TEST(TrainTeacher, DivergenceAborts) {
  RunConfig cfg = tiny_config();
  cfg.lr0 = real(1e28);
  cfg.lr_min = real(1e27);
  cfg.epochs = 3;
  cfg.calib_epochs = 0;
  std::vector<Sample> train = make_data(cfg, cfg.train_count, 0);
  std::vector<Sample> val = make_data(cfg, cfg.val_count, cfg.train_count);
  EXPECT_THROW(train_teacher(cfg, train, val), NumericError);
}

TEST(Distill, TeacherStaysFrozenThroughout) {
  RunConfig cfg = tiny_config();
  std::vector<Sample> train = make_data(cfg, cfg.train_count, 0);
  std::vector<Sample> val = make_data(cfg, cfg.val_count, cfg.train_count);
  TrainResult teacher = train_teacher(cfg, train, val);

  std::vector<Tensor> before;
  int observed = 0;
  TrainResult student = distill_student(
      cfg, teacher.checkpoint, train, val,
      [&](int epoch, Network& tnet, TapSet& taps) {
        EXPECT_TRUE(tnet.frozen());
        auto params = tnet.params();
        if (before.empty())
          for (Param* p : params) before.push_back(p->value);
        for (std::size_t i = 0; i < params.size(); ++i) {
          EXPECT_EQ(params[i]->value, before[i]) << "teacher moved at epoch " << epoch;
          for (int64_t j = 0; j < params[i]->grad.size(); ++j)
            EXPECT_EQ(params[i]->grad[j], 0.0);
        }
        for (TapEntry& t : taps.taps) EXPECT_FALSE(t.teacher_cbam.w0.trainable);
        ++observed;
      });
  EXPECT_EQ(observed, cfg.distill_epochs);
  ASSERT_EQ(student.rows.size(), std::size_t(cfg.distill_epochs));
  for (const EpochRow& row : student.rows) {
    EXPECT_TRUE(std::isfinite(row.attn));
    EXPECT_GT(row.attn, 0.0);
    EXPECT_NEAR(row.total, row.ce + double(cfg.alpha) * row.attn, 1e-9);
  }
}

TEST(Distill, AlphaZeroMatchesMethodNone) {
  RunConfig cfg = tiny_config();
  std::vector<Sample> train = make_data(cfg, cfg.train_count, 0);
  std::vector<Sample> val = make_data(cfg, cfg.val_count, cfg.train_count);
  TrainResult teacher = train_teacher(cfg, train, val);

  RunConfig zero = cfg;
  zero.alpha = 0;
  RunConfig none = cfg;
  none.method = Method::none;
  TrainResult a = distill_student(zero, teacher.checkpoint, train, val);
  TrainResult b = distill_student(none, teacher.checkpoint, train, val);
  EXPECT_TRUE(blocks_equal(a.checkpoint, b.checkpoint, "net."));
  ASSERT_EQ(a.rows.size(), b.rows.size());
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    EXPECT_EQ(a.rows[i].ce, b.rows[i].ce);
    EXPECT_EQ(a.rows[i].total, b.rows[i].total);
    EXPECT_EQ(a.rows[i].attn, 0.0);
  }
}

TEST(Distill, StudentCheckpointRoundTrips) {
  RunConfig cfg = tiny_config();
  std::vector<Sample> train = make_data(cfg, cfg.train_count, 0);
  std::vector<Sample> val = make_data(cfg, cfg.val_count, cfg.train_count);
  TrainResult teacher = train_teacher(cfg, train, val);
  TrainResult student = distill_student(cfg, teacher.checkpoint, train, val);

  EXPECT_EQ(student.checkpoint.kind, Checkpoint::Kind::student);
  StudentModel m = load_student(student.checkpoint);
  EXPECT_TRUE(m.net.frozen());
  ASSERT_EQ(m.taps.count(), 3);
  EXPECT_EQ(m.taps.taps[0].student_cbam.w0.value, student.checkpoint.block("cbam.B.w0"));
  // student widths differ from teacher widths at every tap, so projectors exist
  EXPECT_TRUE(m.taps.taps[0].has_projector());
  EXPECT_EQ(m.taps.taps[0].proj_k.value, student.checkpoint.block("proj.B.k"));
  EvalResult ev = evaluate(m.net, val, cfg.batch_size);
  EXPECT_EQ(ev.miou, student.final_eval.miou);
  EXPECT_THROW(load_teacher(student.checkpoint), ConfigError);
}

TEST(Distill, KdAndAtMethodsRun) {
  RunConfig cfg = tiny_config();
  std::vector<Sample> train = make_data(cfg, cfg.train_count, 0);
  std::vector<Sample> val = make_data(cfg, cfg.val_count, cfg.train_count);
  TrainResult teacher = train_teacher(cfg, train, val);

  for (Method m : {Method::kd, Method::at}) {
    RunConfig mc = cfg;
    mc.method = m;
    TrainResult r = distill_student(mc, teacher.checkpoint, train, val);
    ASSERT_EQ(r.rows.size(), std::size_t(cfg.distill_epochs));
    for (const EpochRow& row : r.rows) EXPECT_TRUE(std::isfinite(row.attn));
    // no attention or projector blocks for the baselines
    EXPECT_FALSE(r.checkpoint.has_block("cbam.B.w0"));
    StudentModel sm = load_student(r.checkpoint);
    EXPECT_EQ(sm.taps.count(), 0);
  }
}

TEST(Distill, MismatchedClassCountRejected) {
  RunConfig cfg = tiny_config();
  std::vector<Sample> train = make_data(cfg, cfg.train_count, 0);
  std::vector<Sample> val = make_data(cfg, cfg.val_count, cfg.train_count);
  TrainResult teacher = train_teacher(cfg, train, val);
  RunConfig other = cfg;
  other.classes = 4;
  std::vector<Sample> train4 = make_data(other, other.train_count, 0);
  EXPECT_THROW(distill_student(other, teacher.checkpoint, train4, val), ConfigError);
}

TEST(EpochLog, HeaderAndRowFormat) {
  EXPECT_EQ(epoch_log_header(), "# epoch\tlr\tce\tattn_loss\ttotal\tval_miou\tval_acc");
  EpochRow row;
  row.epoch = 3;
  row.lr = real(0.05);
  row.ce = 1.5;
  row.attn = 0.25;
  row.total = 2.0;
  std::string line = format_epoch_row(row);
  EXPECT_EQ(line, "3\t0.05\t1.5\t0.25\t2\tnan\tnan");
  row.evaled = true;
  row.val_miou = 0.5;
  row.val_acc = 0.75;
  EXPECT_EQ(format_epoch_row(row), "3\t0.05\t1.5\t0.25\t2\t0.5\t0.75");
}

TEST(Evaluate, PerfectAndEmpty) {
  RunConfig cfg = tiny_config();
  std::vector<Sample> val = make_data(cfg, 2, 100);
  Network net = Network::build(cfg.teacher_net(), 1);
  EvalResult r = evaluate(net, val, 2);
  EXPECT_TRUE(std::isfinite(r.acc));
  EXPECT_GE(r.acc, 0.0);
  EXPECT_LE(r.acc, 1.0);
  EvalResult empty = evaluate(net, {}, 2);
  EXPECT_TRUE(std::isnan(empty.miou));
  EXPECT_TRUE(std::isnan(empty.acc));
}
