#pragma once

#include <array>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "dfkd/attention_generator.hpp"
#include "dfkd/mha.hpp"
#include "dfkd/models.hpp"
#include "dfkd/objectives.hpp"
#include "dfkd/sfcl.hpp"

#include "json.hpp"

// The alternating adversarial distillation loop: per epoch, t generator steps
// against a frozen student and teacher, then k student steps against the
// frozen generator and teacher. The teacher backbone is frozen for the whole
// run; adapters, both MHA heads and both projection heads ride the student
// optimizer.

namespace dfkd {

inline constexpr int kProjectionDim = 128;
inline constexpr int kEngineCkptVersion = 1;

struct EpochRecord {
  int epoch = 0;
  double l_kd = 0, l_bn = 0, l_mhad = 0, l_sfcl = 0, gen_obj = 0, stu_obj = 0;
  double accuracy = 0, seconds = 0;
};

struct PhaseLosses {
  std::vector<double> kd, bn, mhad, sfcl, obj;

  static double mean(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  }
};

struct RunReport {
  std::vector<EpochRecord> epochs;
  double initial_accuracy = 0;  // randomly initialized student, before any training
  double best_accuracy = 0;
  int best_epoch = -1;
  double final_accuracy = 0;
  double wall_seconds = 0;
  std::string metrics_csv, best_student_ckpt, last_student_ckpt, state_ckpt, report_json;
  nlohmann::json config_snapshot;
};

class DistillState {
 public:
  DistillState(ConvNet<float> teacher_model, const ConvNetSpec& student_spec, const GeneratorSpec& gen_spec,
               const Hyperparams& hyper_params)
      : teacher(std::move(teacher_model)),
        student(student_spec, hyper_params.seed + 1),
        generator(gen_spec, hyper_params.seed + 2),
        hyper(hyper_params),
        rng(hyper_params.seed) {
    DFKD_CHECK(gen_spec.out_size == teacher.spec().input_size && gen_spec.out_size == student_spec.input_size,
               "DistillState: generator out_size must match model input_size");
    DFKD_CHECK(teacher.spec().num_classes == student_spec.num_classes,
               "DistillState: teacher and student class counts differ");
    Rng aux_rng(hyper_params.seed + 3);
    for (int i = 0; i < 3; ++i) {
      const int c_s = student_spec.stage_channels[static_cast<std::size_t>(i)];
      const int c_t = teacher.spec().stage_channels[static_cast<std::size_t>(i)];
      adapters[static_cast<std::size_t>(i)] = Adapter<float>(c_s, c_t, aux_rng);
      mha_teacher[static_cast<std::size_t>(i)] = MhaModule<float>(c_t, hyper.order, aux_rng);
      mha_student[static_cast<std::size_t>(i)] = MhaModule<float>(c_t, hyper.order, aux_rng);
    }
    head_teacher = ProjectionHead<float>(teacher.spec().stage_channels[2], kProjectionDim, aux_rng);
    head_student = ProjectionHead<float>(student_spec.stage_channels[2], kProjectionDim, aux_rng);

    teacher_registry_ = teacher.registry();
    set_requires_grad(teacher_registry_.param_ptrs(), false);  // frozen for the run's entirety
    teacher_running_ = collect_bn_running_stats(teacher);

    student_registry_ = student.registry();
    generator_registry_ = generator.registry();
    aux_registry_ = nn::Registry<float>();
    for (int i = 0; i < 3; ++i) {
      adapters[static_cast<std::size_t>(i)].register_into(aux_registry_, "adapter" + std::to_string(i));
      mha_teacher[static_cast<std::size_t>(i)].register_into(aux_registry_, "mha_t" + std::to_string(i));
      mha_student[static_cast<std::size_t>(i)].register_into(aux_registry_, "mha_s" + std::to_string(i));
    }
    head_teacher.register_into(aux_registry_, "head_t");
    head_student.register_into(aux_registry_, "head_s");

    gen_opt = std::make_unique<Adam<float>>(generator_registry_.param_ptrs(), static_cast<float>(hyper.lr_g),
                                            static_cast<float>(hyper.beta1_g), static_cast<float>(hyper.beta2_g));
    std::vector<Variable<float>*> student_side = student_registry_.param_ptrs();
    for (auto* p : aux_registry_.param_ptrs()) student_side.push_back(p);
    student_opt = std::make_unique<Sgd<float>>(student_side, static_cast<float>(hyper.lr_s),
                                               static_cast<float>(hyper.momentum_s),
                                               static_cast<float>(hyper.weight_decay_s));
  }

  DistillState(const DistillState&) = delete;
  DistillState& operator=(const DistillState&) = delete;

  ConvNet<float> teacher;
  ConvNet<float> student;
  Generator<float> generator;
  std::array<Adapter<float>, 3> adapters;
  std::array<MhaModule<float>, 3> mha_teacher, mha_student;
  ProjectionHead<float> head_teacher, head_student;
  std::unique_ptr<Adam<float>> gen_opt;
  std::unique_ptr<Sgd<float>> student_opt;
  Hyperparams hyper;
  Rng rng;
  int epoch = 0;
  double best_accuracy = 0;
  int best_epoch = -1;

  nn::Registry<float>& teacher_registry() { return teacher_registry_; }
  nn::Registry<float>& student_registry() { return student_registry_; }
  nn::Registry<float>& generator_registry() { return generator_registry_; }
  nn::Registry<float>& aux_registry() { return aux_registry_; }
  const std::vector<BNLayerStats<float>>& teacher_running_stats() const { return teacher_running_; }

 private:
  nn::Registry<float> teacher_registry_, student_registry_, generator_registry_, aux_registry_;
  std::vector<BNLayerStats<float>> teacher_running_;
};

namespace detail {

inline void check_finite_loss(double v, const char* what, int epoch, int step) {
  DFKD_REQUIRE(std::isfinite(v),
               "non-finite " << what << " (" << v << ") at epoch " << epoch << ", step " << step
                             << "; aborting run");
}

}  // namespace detail

// t generator steps: fresh noise each step, teacher statistics matched and
// the KD discrepancy maximized. Student and teacher stay bitwise frozen.
inline PhaseLosses generator_phase(DistillState& st) {
  PhaseLosses losses;
  set_requires_grad(st.student_registry().param_ptrs(), false);
  for (int step = 0; step < st.hyper.gen_steps; ++step) {
    auto z = Variable<float>::constant(sample_noise_from<float>(st.rng, st.hyper.batch, st.generator.spec().z_dim));
    Variable<float> images = st.generator.forward(z, nn::Mode::kTrain, /*update_power_iteration=*/true);

    ForwardOptions<float> topt;
    topt.record_bn_stats = true;
    ForwardRecord<float> trec = st.teacher.forward(images, topt);
    ForwardOptions<float> sopt;  // eval: frozen student, running stats untouched
    ForwardRecord<float> srec = st.student.forward(images, sopt);

    Variable<float> l_bn = bn_regularization(trec.bn_batch_stats, st.teacher_running_stats());
    Variable<float> l_kd = kd_loss(srec.logits, trec.logits);
    detail::check_finite_loss(l_bn.value()[0], "L_BN", st.epoch, step);
    detail::check_finite_loss(l_kd.value()[0], "L_KD", st.epoch, step);
    Variable<float> obj = generator_objective(st.hyper, l_bn, l_kd);

    st.gen_opt->zero_grad();
    obj.backward();
    st.gen_opt->step();

    losses.bn.push_back(l_bn.value()[0]);
    losses.kd.push_back(l_kd.value()[0]);
    losses.obj.push_back(obj.value()[0]);
  }
  set_requires_grad(st.student_registry().param_ptrs(), true);
  return losses;
}

// k student steps against the frozen generator: KD plus (when weighted) the
// high-order attention and contrastive terms. Gradients reach the student,
// adapters, both MHA modules and both projection heads.
inline PhaseLosses student_phase(DistillState& st) {
  PhaseLosses losses;
  const bool want_mhad = st.hyper.beta > 0;
  const bool want_sfcl = st.hyper.gamma > 0;
  set_requires_grad(st.generator_registry().param_ptrs(), false);
  st.student_opt->set_lr(static_cast<float>(cosine_lr(st.hyper.lr_s, st.epoch, st.hyper.epochs)));
  for (int step = 0; step < st.hyper.student_steps; ++step) {
    auto z = Variable<float>::constant(sample_noise_from<float>(st.rng, st.hyper.batch, st.generator.spec().z_dim));
    Variable<float> images = st.generator.forward(z, nn::Mode::kEval, false);

    ForwardOptions<float> topt;
    topt.want_taps = want_mhad;
    topt.want_penultimate = want_sfcl;
    ForwardRecord<float> trec = st.teacher.forward(images, topt);
    ForwardOptions<float> sopt;
    sopt.mode = nn::Mode::kTrain;
    sopt.want_taps = want_mhad;
    sopt.want_penultimate = want_sfcl;
    ForwardRecord<float> srec = st.student.forward(images, sopt);

    Variable<float> l_kd = kd_loss(srec.logits, trec.logits);
    Variable<float> l_mhad, l_sfcl;
    if (want_mhad) {
      std::vector<Variable<float>> t_maps, s_maps;
      for (int i = 0; i < 3; ++i) {
        t_maps.push_back(st.mha_teacher[static_cast<std::size_t>(i)].forward(trec.stage_features[static_cast<std::size_t>(i)]));
        Variable<float> lifted = st.adapters[static_cast<std::size_t>(i)].forward(srec.stage_features[static_cast<std::size_t>(i)]);
        s_maps.push_back(st.mha_student[static_cast<std::size_t>(i)].forward(lifted));
      }
      l_mhad = mhad_loss(t_maps, s_maps);
    }
    if (want_sfcl) {
      EmbeddingBatch<float> f_t = st.head_teacher.project(trec.penultimate);
      EmbeddingBatch<float> f_s = st.head_student.project(srec.penultimate);
      l_sfcl = sfcl_loss(f_t, f_s, static_cast<float>(st.hyper.tau));
    }
    detail::check_finite_loss(l_kd.value()[0], "L_KD", st.epoch, step);
    if (want_mhad) detail::check_finite_loss(l_mhad.value()[0], "L_MHAD", st.epoch, step);
    if (want_sfcl) detail::check_finite_loss(l_sfcl.value()[0], "L_SFCL", st.epoch, step);
    Variable<float> obj = student_objective(st.hyper, l_kd, l_mhad, l_sfcl);

    st.student_opt->zero_grad();
    obj.backward();
    st.student_opt->step();

    losses.kd.push_back(l_kd.value()[0]);
    losses.mhad.push_back(want_mhad ? l_mhad.value()[0] : 0.0);
    losses.sfcl.push_back(want_sfcl ? l_sfcl.value()[0] : 0.0);
    losses.obj.push_back(obj.value()[0]);
  }
  set_requires_grad(st.generator_registry().param_ptrs(), true);
  return losses;
}

// ---------------------------------------------------------------------------
// Checkpointing: full engine state, restorable to a bit-identical run
// ---------------------------------------------------------------------------

inline void save_checkpoint(DistillState& st, const std::string& path) {
  BlobWriter w;
  w.add_i64("meta/format_version", kEngineCkptVersion);
  w.add_string("meta/hyper", st.hyper.to_json().dump());
  w.add_string("meta/teacher_spec", st.teacher.spec().to_json().dump());
  w.add_string("meta/student_spec", st.student.spec().to_json().dump());
  w.add_string("meta/gen_spec", st.generator.spec().to_json().dump());
  w.add_i64("meta/epoch", st.epoch);
  w.add_f64("meta/best_accuracy", st.best_accuracy);
  w.add_i64("meta/best_epoch", st.best_epoch);
  w.add_string("meta/rng", st.rng.serialize());

  auto dump_registry = [&w](nn::Registry<float>& reg, const std::string& prefix) {
    for (const auto& [name, p] : reg.params) w.add_tensor(prefix + "/" + name, p->value());
    for (const auto& [name, b] : reg.buffers) w.add_tensor(prefix + "/" + name, *b);
  };
  dump_registry(st.teacher_registry(), "teacher");
  dump_registry(st.student_registry(), "student");
  dump_registry(st.generator_registry(), "generator");
  dump_registry(st.aux_registry(), "aux");

  w.add_i64("opt_g/t", st.gen_opt->step_count());
  for (std::size_t i = 0; i < st.gen_opt->size(); ++i) {
    if (st.gen_opt->m_buffer(i).defined()) {
      w.add_tensor("opt_g/m/" + std::to_string(i), st.gen_opt->m_buffer(i));
      w.add_tensor("opt_g/v/" + std::to_string(i), st.gen_opt->v_buffer(i));
    }
  }
  for (std::size_t i = 0; i < st.student_opt->size(); ++i)
    if (st.student_opt->momentum_buffer(i).defined())
      w.add_tensor("opt_s/mom/" + std::to_string(i), st.student_opt->momentum_buffer(i));
  w.write(path);

  nlohmann::json sidecar{{"format_version", kEngineCkptVersion},
                         {"hyper", st.hyper.to_json()},
                         {"teacher_spec", st.teacher.spec().to_json()},
                         {"student_spec", st.student.spec().to_json()},
                         {"gen_spec", st.generator.spec().to_json()},
                         {"epoch", st.epoch},
                         {"metrics", {{"best_accuracy", st.best_accuracy}, {"best_epoch", st.best_epoch}}}};
  std::ofstream f(path + ".json");
  f << sidecar.dump(2) << "\n";
}

inline std::unique_ptr<DistillState> load_checkpoint(const std::string& path) {
  BlobReader r(path);
  DFKD_REQUIRE(r.i64("meta/format_version") == kEngineCkptVersion,
               "load_checkpoint: unsupported format_version in " << path);
  Hyperparams hyper = Hyperparams::from_json(nlohmann::json::parse(r.str("meta/hyper")));
  ConvNetSpec teacher_spec = ConvNetSpec::from_json(nlohmann::json::parse(r.str("meta/teacher_spec")));
  ConvNetSpec student_spec = ConvNetSpec::from_json(nlohmann::json::parse(r.str("meta/student_spec")));
  GeneratorSpec gen_spec = GeneratorSpec::from_json(nlohmann::json::parse(r.str("meta/gen_spec")));

  auto st = std::make_unique<DistillState>(ConvNet<float>(teacher_spec, 0), student_spec, gen_spec, hyper);
  auto load_registry = [&r](nn::Registry<float>& reg, const std::string& prefix) {
    for (const auto& [name, p] : reg.params) {
      Tensor<float> t = r.tensor(prefix + "/" + name);
      DFKD_REQUIRE(t.same_shape(p->value()), "load_checkpoint: shape mismatch for " << prefix << "/" << name);
      p->value() = std::move(t);
    }
    for (const auto& [name, b] : reg.buffers) {
      Tensor<float> t = r.tensor(prefix + "/" + name);
      DFKD_REQUIRE(t.same_shape(*b), "load_checkpoint: shape mismatch for " << prefix << "/" << name);
      *b = std::move(t);
    }
  };
  load_registry(st->teacher_registry(), "teacher");
  load_registry(st->student_registry(), "student");
  load_registry(st->generator_registry(), "generator");
  load_registry(st->aux_registry(), "aux");

  st->gen_opt->set_step_count(r.i64("opt_g/t"));
  for (std::size_t i = 0; i < st->gen_opt->size(); ++i) {
    const std::string m = "opt_g/m/" + std::to_string(i);
    if (r.has(m)) {
      st->gen_opt->m_buffer(i) = r.tensor(m);
      st->gen_opt->v_buffer(i) = r.tensor("opt_g/v/" + std::to_string(i));
    }
  }
  for (std::size_t i = 0; i < st->student_opt->size(); ++i) {
    const std::string m = "opt_s/mom/" + std::to_string(i);
    if (r.has(m)) st->student_opt->momentum_buffer(i) = r.tensor(m);
  }
  st->epoch = static_cast<int>(r.i64("meta/epoch"));
  st->best_accuracy = r.f64("meta/best_accuracy");
  st->best_epoch = static_cast<int>(r.i64("meta/best_epoch"));
  st->rng.deserialize(r.str("meta/rng"));
  return st;
}

// ---------------------------------------------------------------------------
// Full run
// ---------------------------------------------------------------------------

inline constexpr const char* kMetricsHeader = "epoch,l_kd,l_bn,l_mhad,l_sfcl,gen_obj,stu_obj,accuracy,seconds";

inline RunReport run_distillation(DistillState& st, const LabeledImageSet& eval_set, const std::string& out_dir,
                                  const nlohmann::json& extra_config = {}) {
  namespace fs = std::filesystem;
  DFKD_CHECK(eval_set.num_classes() == st.teacher.spec().num_classes,
             "run: eval set has " << eval_set.num_classes() << " classes, teacher head "
                                  << st.teacher.spec().num_classes);
  fs::create_directories(out_dir);

  RunReport report;
  report.metrics_csv = (fs::path(out_dir) / "metrics.csv").string();
  report.best_student_ckpt = (fs::path(out_dir) / "student_best.ckpt").string();
  report.last_student_ckpt = (fs::path(out_dir) / "student_last.ckpt").string();
  report.state_ckpt = (fs::path(out_dir) / "state.ckpt").string();
  report.report_json = (fs::path(out_dir) / "report.json").string();
  report.config_snapshot = {{"hyper", st.hyper.to_json()},
                            {"teacher_spec", st.teacher.spec().to_json()},
                            {"student_spec", st.student.spec().to_json()},
                            {"gen_spec", st.generator.spec().to_json()}};
  if (!extra_config.is_null() && !extra_config.empty()) report.config_snapshot["cli"] = extra_config;

  std::ofstream csv(report.metrics_csv, st.epoch == 0 ? std::ios::trunc : std::ios::app);
  DFKD_REQUIRE(csv.good(), "run: cannot open " << report.metrics_csv);
  if (st.epoch == 0) csv << kMetricsHeader << "\n";

  report.initial_accuracy = evaluate_accuracy(st.student, eval_set);
  report.best_accuracy = st.best_accuracy;
  report.best_epoch = st.best_epoch;

  const auto run_start = std::chrono::steady_clock::now();
  auto write_report = [&] {
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - run_start).count();
    nlohmann::json j{{"config", report.config_snapshot},
                     {"initial_accuracy", report.initial_accuracy},
                     {"best_accuracy", report.best_accuracy},
                     {"best_epoch", report.best_epoch},
                     {"final_accuracy", report.final_accuracy},
                     {"wall_seconds", report.wall_seconds},
                     {"epochs_completed", report.epochs.size()},
                     {"artifacts",
                      {{"metrics_csv", report.metrics_csv},
                       {"student_best", report.best_student_ckpt},
                       {"student_last", report.last_student_ckpt},
                       {"state", report.state_ckpt}}}};
    std::ofstream f(report.report_json);
    f << j.dump(2) << "\n";
  };

  try {
    for (; st.epoch < st.hyper.epochs; ) {
      const auto t0 = std::chrono::steady_clock::now();
      PhaseLosses gen_losses = generator_phase(st);
      PhaseLosses stu_losses = student_phase(st);
      const double acc = evaluate_accuracy(st.student, eval_set);

      EpochRecord rec;
      rec.epoch = st.epoch;
      rec.l_kd = PhaseLosses::mean(stu_losses.kd);
      rec.l_bn = PhaseLosses::mean(gen_losses.bn);
      rec.l_mhad = PhaseLosses::mean(stu_losses.mhad);
      rec.l_sfcl = PhaseLosses::mean(stu_losses.sfcl);
      rec.gen_obj = PhaseLosses::mean(gen_losses.obj);
      rec.stu_obj = PhaseLosses::mean(stu_losses.obj);
      rec.accuracy = acc;
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      report.epochs.push_back(rec);

      char line[256];
      std::snprintf(line, sizeof(line), "%d,%.8g,%.8g,%.8g,%.8g,%.8g,%.8g,%.8g,%.3f", rec.epoch, rec.l_kd, rec.l_bn,
                    rec.l_mhad, rec.l_sfcl, rec.gen_obj, rec.stu_obj, rec.accuracy, rec.seconds);
      csv << line << "\n";
      csv.flush();

      if (acc > st.best_accuracy || st.best_epoch < 0) {
        st.best_accuracy = acc;
        st.best_epoch = st.epoch;
        save_model_checkpoint(st.student, report.best_student_ckpt, st.hyper.seed, st.epoch,
                              {{"test_accuracy", acc}});
      }
      st.epoch++;
      save_model_checkpoint(st.student, report.last_student_ckpt, st.hyper.seed, st.epoch - 1,
                            {{"test_accuracy", acc}});
      save_checkpoint(st, report.state_ckpt);

      report.best_accuracy = st.best_accuracy;
      report.best_epoch = st.best_epoch;
      report.final_accuracy = acc;
    }
  } catch (...) {
    write_report();  // partial report for post-mortem
    throw;
  }
  write_report();
  return report;
}

// Teacher checkpoint in, trained student artifacts out.
inline RunReport run(const std::string& teacher_ckpt, const ConvNetSpec& student_spec, const GeneratorSpec& gen_spec,
                     const Hyperparams& hyper, const LabeledImageSet& eval_set, const std::string& out_dir,
                     const nlohmann::json& extra_config = {}) {
  hyper.validate();
  ConvNet<float> teacher = load_model_checkpoint(teacher_ckpt);
  DistillState st(std::move(teacher), student_spec, gen_spec, hyper);
  return run_distillation(st, eval_set, out_dir, extra_config);
}

}  // namespace dfkd
