#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "dfkd/engine.hpp"
#include "test_util.hpp"

using dfkd::ConvNet;
using dfkd::ConvNetSpec;
using dfkd::DistillState;
using dfkd::GeneratorSpec;
using dfkd::Hyperparams;

namespace {

namespace fs = std::filesystem;

ConvNetSpec tiny_teacher_spec() { return {{8, 12, 16}, 1, 4, 32}; }
ConvNetSpec tiny_student_spec() { return {{6, 8, 10}, 1, 4, 32}; }

GeneratorSpec tiny_gen_spec() {
  GeneratorSpec g;
  g.z_dim = 16;
  g.base_channels = 16;
  g.out_size = 32;
  g.sam_ratio = 2;
  g.lambda = 5e-2;
  return g;
}

Hyperparams tiny_hyper(int epochs = 1, int t = 2, int k = 2) {
  Hyperparams h;
  h.gen_steps = t;
  h.student_steps = k;
  h.batch = 4;
  h.epochs = epochs;
  h.seed = 11;
  return h;
}

std::unique_ptr<DistillState> make_state(const Hyperparams& h) {
  ConvNet<float> teacher(tiny_teacher_spec(), 5);
  return std::make_unique<DistillState>(std::move(teacher), tiny_student_spec(), tiny_gen_spec(), h);
}

struct Checksums {
  std::uint32_t teacher, student, generator, aux;
};

Checksums checksums(DistillState& st) {
  return {dfkd::weights_checksum(st.teacher_registry()), dfkd::weights_checksum(st.student_registry()),
          dfkd::weights_checksum(st.generator_registry()), dfkd::weights_checksum(st.aux_registry())};
}

fs::path test_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "dfkd_engine" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<std::vector<std::string>> read_csv(const std::string& path) {
  std::ifstream f(path);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(f, line)) {
    std::vector<std::string> cells;
    std::istringstream is(line);
    std::string cell;
    while (std::getline(is, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

TEST(GeneratorPhase, FreezesStudentAndTeacherAndMovesGenerator) {
  auto st = make_state(tiny_hyper());
  const Checksums before = checksums(*st);
  auto losses = dfkd::generator_phase(*st);
  const Checksums after = checksums(*st);
  EXPECT_EQ(before.teacher, after.teacher);
  EXPECT_EQ(before.student, after.student);
  EXPECT_EQ(before.aux, after.aux);
  EXPECT_NE(before.generator, after.generator);  // lr_g=1e-3 moves weights on a non-degenerate batch
  EXPECT_EQ(losses.kd.size(), 2u);
  for (double v : losses.obj) EXPECT_TRUE(std::isfinite(v));
}

TEST(GeneratorPhase, ZeroStepsLeavesEverythingIncludingRngUntouched) {
  Hyperparams h = tiny_hyper();
  h.gen_steps = 0;
  auto st = make_state(h);
  const Checksums before = checksums(*st);
  const std::string rng_before = st->rng.serialize();
  auto losses = dfkd::generator_phase(*st);
  EXPECT_TRUE(losses.kd.empty());
  const Checksums after = checksums(*st);
  EXPECT_EQ(before.generator, after.generator);
  EXPECT_EQ(rng_before, st->rng.serialize());
}

TEST(StudentPhase, FreezesGeneratorAndTeacherBackbone) {
  auto st = make_state(tiny_hyper());
  dfkd::generator_phase(*st);
  const Checksums before = checksums(*st);
  auto losses = dfkd::student_phase(*st);
  const Checksums after = checksums(*st);
  EXPECT_EQ(before.teacher, after.teacher);
  EXPECT_EQ(before.generator, after.generator);  // params, BN buffers, and power-iteration vectors
  EXPECT_NE(before.student, after.student);
  EXPECT_NE(before.aux, after.aux);  // adapters, MHA heads, projection heads ride the student optimizer
  EXPECT_EQ(losses.kd.size(), 2u);
}

TEST(StudentPhase, ZeroStepsLeavesStudentUntouched) {
  Hyperparams h = tiny_hyper();
  h.student_steps = 0;
  auto st = make_state(h);
  const Checksums before = checksums(*st);
  auto losses = dfkd::student_phase(*st);
  EXPECT_TRUE(losses.kd.empty());
  EXPECT_EQ(before.student, checksums(*st).student);
}

TEST(StudentPhase, KdOnlyObjectiveEqualsKdEveryStep) {
  Hyperparams h = tiny_hyper(1, 1, 3);
  h.beta = 0.0;
  h.gamma = 0.0;
  auto st = make_state(h);
  auto losses = dfkd::student_phase(*st);
  ASSERT_EQ(losses.kd.size(), 3u);
  for (std::size_t i = 0; i < losses.kd.size(); ++i) {
    EXPECT_DOUBLE_EQ(losses.obj[i], losses.kd[i]);
    EXPECT_DOUBLE_EQ(losses.mhad[i], 0.0);
    EXPECT_DOUBLE_EQ(losses.sfcl[i], 0.0);
  }
}

TEST(Run, SingleEpochBookkeeping) {
  auto dir = test_dir("single_epoch");
  auto data = dfkd::synth_fgvc_dataset(2, 2, 4, 32, 0);
  Hyperparams h = tiny_hyper(1, 1, 1);
  auto st = make_state(h);
  auto report = dfkd::run_distillation(*st, data, dir.string());
  ASSERT_EQ(report.epochs.size(), 1u);
  const auto& rec = report.epochs[0];
  for (double v : {rec.l_kd, rec.l_bn, rec.l_mhad, rec.l_sfcl, rec.gen_obj, rec.stu_obj, rec.accuracy})
    EXPECT_TRUE(std::isfinite(v));
  EXPECT_GE(rec.accuracy, 0.0);
  EXPECT_LE(rec.accuracy, 1.0);
  EXPECT_TRUE(fs::exists(report.metrics_csv));
  EXPECT_TRUE(fs::exists(report.best_student_ckpt));
  EXPECT_TRUE(fs::exists(report.state_ckpt));
  EXPECT_TRUE(fs::exists(report.report_json));
  auto rows = read_csv(report.metrics_csv);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"epoch", "l_kd", "l_bn", "l_mhad", "l_sfcl", "gen_obj", "stu_obj",
                                               "accuracy", "seconds"}));
}

TEST(Run, DeterministicLossSequences) {
  auto data = dfkd::synth_fgvc_dataset(2, 2, 4, 32, 0);
  Hyperparams h = tiny_hyper(2, 2, 2);
  auto a = make_state(h);
  auto b = make_state(h);
  auto dir_a = test_dir("det_a"), dir_b = test_dir("det_b");
  auto ra = dfkd::run_distillation(*a, data, dir_a.string());
  auto rb = dfkd::run_distillation(*b, data, dir_b.string());
  ASSERT_EQ(ra.epochs.size(), rb.epochs.size());
  for (std::size_t i = 0; i < ra.epochs.size(); ++i) {
    EXPECT_EQ(ra.epochs[i].l_kd, rb.epochs[i].l_kd);
    EXPECT_EQ(ra.epochs[i].l_bn, rb.epochs[i].l_bn);
    EXPECT_EQ(ra.epochs[i].l_mhad, rb.epochs[i].l_mhad);
    EXPECT_EQ(ra.epochs[i].l_sfcl, rb.epochs[i].l_sfcl);
    EXPECT_EQ(ra.epochs[i].accuracy, rb.epochs[i].accuracy);
  }
  // metrics CSVs agree column by column except wall-clock seconds
  auto rows_a = read_csv(ra.metrics_csv), rows_b = read_csv(rb.metrics_csv);
  ASSERT_EQ(rows_a.size(), rows_b.size());
  for (std::size_t r = 0; r < rows_a.size(); ++r)
    for (std::size_t c = 0; c + 1 < rows_a[r].size(); ++c) EXPECT_EQ(rows_a[r][c], rows_b[r][c]);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  auto dir = test_dir("ckpt_roundtrip");
  auto st = make_state(tiny_hyper());
  dfkd::generator_phase(*st);
  dfkd::student_phase(*st);
  const std::string p1 = (dir / "a.ckpt").string(), p2 = (dir / "b.ckpt").string();
  dfkd::save_checkpoint(*st, p1);
  auto loaded = dfkd::load_checkpoint(p1);
  dfkd::save_checkpoint(*loaded, p2);
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::vector<char> b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::vector<char> b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  EXPECT_EQ(b1, b2);
}

TEST(Checkpoint, ResumeMatchesContinuousRun) {
  Hyperparams h = tiny_hyper(2, 2, 2);
  auto continuous = make_state(h);
  auto snapshot = make_state(h);

  // epoch 0 on both
  for (auto* st : {continuous.get(), snapshot.get()}) {
    dfkd::generator_phase(*st);
    dfkd::student_phase(*st);
    st->epoch = 1;
  }
  auto dir = test_dir("resume");
  const std::string path = (dir / "state.ckpt").string();
  dfkd::save_checkpoint(*snapshot, path);
  auto resumed = dfkd::load_checkpoint(path);

  auto g1 = dfkd::generator_phase(*continuous);
  auto s1 = dfkd::student_phase(*continuous);
  auto g2 = dfkd::generator_phase(*resumed);
  auto s2 = dfkd::student_phase(*resumed);
  ASSERT_EQ(g1.kd.size(), g2.kd.size());
  for (std::size_t i = 0; i < g1.kd.size(); ++i) {
    EXPECT_NEAR(g1.kd[i], g2.kd[i], 1e-6);
    EXPECT_NEAR(g1.bn[i], g2.bn[i], 1e-6);
  }
  for (std::size_t i = 0; i < s1.obj.size(); ++i) EXPECT_NEAR(s1.obj[i], s2.obj[i], 1e-6);
}

TEST(Checkpoint, CorruptedFileFailsToLoad) {
  auto dir = test_dir("ckpt_corrupt");
  auto st = make_state(tiny_hyper());
  const std::string path = (dir / "state.ckpt").string();
  dfkd::save_checkpoint(*st, path);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(5000);
    f.put('\x42');
  }
  EXPECT_THROW(dfkd::load_checkpoint(path), std::runtime_error);
}

TEST(Run, NonFiniteLossAbortsWithPartialReport) {
  auto dir = test_dir("abort");
  auto data = dfkd::synth_fgvc_dataset(2, 2, 4, 32, 0);
  Hyperparams h = tiny_hyper(3, 1, 1);
  auto st = make_state(h);
  st->generator.fc().weight.value()[0] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(dfkd::run_distillation(*st, data, dir.string()), std::runtime_error);
  EXPECT_TRUE(fs::exists(dir / "report.json"));  // partial report for post-mortem
}

TEST(Run, RejectsClassMismatch) {
  auto dir = test_dir("mismatch");
  auto data = dfkd::synth_fgvc_dataset(2, 5, 2, 32, 0);  // K=10 vs teacher K=4
  auto st = make_state(tiny_hyper());
  EXPECT_THROW(dfkd::run_distillation(*st, data, dir.string()), std::invalid_argument);
}
