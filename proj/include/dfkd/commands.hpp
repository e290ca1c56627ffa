#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "dfkd/config.hpp"
#include "dfkd/engine.hpp"
#include "dfkd/png.hpp"

// Subcommand implementations. Each one is an ordinary function over a parsed
// Config so tests can drive them in-process; the binary wires them to argv.

namespace dfkd {

namespace detail {

inline std::pair<LabeledImageSet, LabeledImageSet> make_splits(const Config& c) {
  LabeledImageSet data = synth_fgvc_dataset(c.num_super, c.subs_per_super, c.samples_per_class, c.image_size,
                                            c.data_seed);
  return split(data, c.train_frac, c.data_seed);
}

inline void require_file(const std::string& path, const char* what) {
  DFKD_CHECK(!path.empty(), "missing required path: " << what);
  DFKD_REQUIRE(std::filesystem::exists(path), what << " not found: " << path);
}

}  // namespace detail

// Supervised teacher training on the synthetic dataset; writes the teacher
// checkpoint plus a per-epoch history CSV.
inline double cmd_pretrain(const Config& cfg) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out);
  auto [train, test] = detail::make_splits(cfg);
  ConvNet<float> teacher = build_model<float>(cfg.teacher_spec(), cfg.hyper.seed);

  PretrainOptions opt;
  opt.epochs = cfg.pretrain_epochs;
  opt.batch_size = cfg.pretrain_batch;
  opt.lr = cfg.pretrain_lr;
  PretrainHistory hist = pretrain(teacher, train, test, opt, cfg.hyper.seed);

  const std::string ckpt = (fs::path(cfg.out) / "teacher.ckpt").string();
  save_model_checkpoint(teacher, ckpt, cfg.hyper.seed, cfg.pretrain_epochs,
                        {{"final_test_accuracy", hist.final_accuracy()}});
  const std::string csv_path = (fs::path(cfg.out) / "pretrain_history.csv").string();
  std::ofstream csv(csv_path, std::ios::trunc);
  csv << "epoch,train_loss,test_accuracy\n";
  for (std::size_t e = 0; e < hist.train_loss.size(); ++e) {
    char line[96];
    std::snprintf(line, sizeof(line), "%zu,%.8g,%.8g", e, hist.train_loss[e], hist.test_accuracy[e]);
    csv << line << "\n";
  }
  std::cout << "teacher test accuracy " << hist.final_accuracy() << " -> " << ckpt << "\n";
  return hist.final_accuracy();
}

inline RunReport cmd_distill(const Config& cfg) {
  cfg.validate();
  detail::require_file(cfg.teacher_ckpt, "teacher checkpoint (--teacher_ckpt)");
  auto [train, test] = detail::make_splits(cfg);
  RunReport report =
      run(cfg.teacher_ckpt, cfg.student_spec(), cfg.gen_spec(), cfg.hyper, test, cfg.out, cfg.to_json());
  std::cout << "student best accuracy " << report.best_accuracy << " (epoch " << report.best_epoch << "), final "
            << report.final_accuracy << " -> " << report.best_student_ckpt << "\n";
  return report;
}

// Accuracy of a model checkpoint on the test split of the configured dataset.
inline double cmd_evaluate(const Config& cfg) {
  cfg.validate();
  detail::require_file(cfg.ckpt, "model checkpoint (--ckpt)");
  ConvNet<float> model = load_model_checkpoint(cfg.ckpt);
  auto [train, test] = detail::make_splits(cfg);
  const double acc = evaluate_accuracy(model, test);
  char buf[64];
  std::snprintf(buf, sizeof(buf), "accuracy %.8g", acc);
  std::cout << buf << "\n";
  return acc;
}

// PNG grid of generated samples from an engine state checkpoint.
inline std::string cmd_emit_samples(const Config& cfg) {
  namespace fs = std::filesystem;
  detail::require_file(cfg.ckpt, "engine state checkpoint (--ckpt)");
  auto st = load_checkpoint(cfg.ckpt);
  const int n = cfg.grid_n;
  Tensor<float> z = sample_noise(n * n, st->generator.spec().z_dim, cfg.hyper.seed);
  Tensor<float> images = generate(st->generator, z);
  const int s = images.dim(2);

  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(n) * s * n * s * 3);
  for (int idx = 0; idx < n * n; ++idx) {
    const int ty = idx / n, tx = idx % n;
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x)
        for (int ch = 0; ch < 3; ++ch) {
          const float v = images.at(idx, ch, y, x);
          const int byte = static_cast<int>(std::lround((v + 1.0f) * 0.5f * 255.0f));
          rgb[((static_cast<std::size_t>(ty) * s + y) * (static_cast<std::size_t>(n) * s) +
               static_cast<std::size_t>(tx) * s + x) * 3 + static_cast<std::size_t>(ch)] =
              static_cast<std::uint8_t>(std::clamp(byte, 0, 255));
        }
  }
  fs::create_directories(cfg.out);
  const std::string path = (fs::path(cfg.out) / "samples.png").string();
  write_png_rgb8(path, rgb, n * s, n * s);
  std::cout << "wrote " << path << "\n";
  return path;
}

struct AblationRow {
  std::string label;
  Hyperparams hyper;
};

struct AblationResult {
  std::string label;
  double beta, gamma, lambda;
  int order;
  std::vector<double> best_acc, final_acc;

  double mean_best() const {
    double s = 0;
    for (double v : best_acc) s += v;
    return best_acc.empty() ? 0.0 : s / static_cast<double>(best_acc.size());
  }
};

// The component grid {KD-only, +SFCL, +MHAD, +both} under shared seeds, plus
// optional lambda / attention-order sweeps. One teacher checkpoint backs all
// rows, so rows differ only in their loss configuration.
inline std::vector<AblationResult> cmd_ablate(const Config& cfg) {
  cfg.validate();
  detail::require_file(cfg.teacher_ckpt, "teacher checkpoint (--teacher_ckpt)");
  namespace fs = std::filesystem;

  std::vector<AblationRow> rows;
  auto with = [&](const std::string& label, double beta, double gamma) {
    Hyperparams h = cfg.hyper;
    h.beta = beta;
    h.gamma = gamma;
    rows.push_back({label, h});
  };
  with("kd_only", 0.0, 0.0);
  with("sfcl", 0.0, cfg.hyper.gamma);
  with("mhad", cfg.hyper.beta, 0.0);
  with("both", cfg.hyper.beta, cfg.hyper.gamma);

  auto parse_list = [](const std::string& s) {
    std::vector<double> out;
    std::istringstream is(s);
    std::string tok;
    while (std::getline(is, tok, ',')) out.push_back(std::stod(tok));
    return out;
  };
  for (double lv : parse_list(cfg.sweep_lambda)) {
    Hyperparams h = cfg.hyper;
    h.lambda = lv;
    std::ostringstream label;
    label << "lambda_" << lv;
    rows.push_back({label.str(), h});
  }
  for (double ov : parse_list(cfg.sweep_order)) {
    Hyperparams h = cfg.hyper;
    h.order = static_cast<int>(ov);
    rows.push_back({"order_" + std::to_string(static_cast<int>(ov)), h});
  }

  auto [train, test] = detail::make_splits(cfg);
  const fs::path root = fs::path(cfg.out) / "ablate";
  fs::create_directories(root);
  std::ofstream csv((root / "summary.csv").string(), std::ios::trunc);
  csv << "row,beta,gamma,lambda,order,seed,best_accuracy,final_accuracy\n";

  std::vector<AblationResult> results;
  for (const AblationRow& row : rows) {
    AblationResult res;
    res.label = row.label;
    res.beta = row.hyper.beta;
    res.gamma = row.hyper.gamma;
    res.lambda = row.hyper.lambda;
    res.order = row.hyper.order;
    for (int si = 0; si < cfg.ablate_seeds; ++si) {
      Hyperparams h = row.hyper;
      h.seed = cfg.hyper.seed + static_cast<std::uint64_t>(si);  // shared seed set across rows
      GeneratorSpec gen = cfg.gen_spec();
      gen.lambda = h.lambda;
      const std::string out_dir = (root / row.label / ("seed" + std::to_string(si))).string();
      RunReport report = run(cfg.teacher_ckpt, cfg.student_spec(), gen, h, test, out_dir, cfg.to_json());
      res.best_acc.push_back(report.best_accuracy);
      res.final_acc.push_back(report.final_accuracy);
      char line[192];
      std::snprintf(line, sizeof(line), "%s,%.4g,%.4g,%.4g,%d,%llu,%.8g,%.8g", row.label.c_str(), h.beta, h.gamma,
                    h.lambda, h.order, static_cast<unsigned long long>(h.seed), report.best_accuracy,
                    report.final_accuracy);
      csv << line << "\n";
      csv.flush();
    }
    results.push_back(std::move(res));
  }

  std::cout << "row             mean_best_accuracy (over " << cfg.ablate_seeds << " seeds)\n";
  for (const auto& r : results) {
    char line[96];
    std::snprintf(line, sizeof(line), "%-15s %.4f", r.label.c_str(), r.mean_best());
    std::cout << line << "\n";
  }
  return results;
}

}  // namespace dfkd
