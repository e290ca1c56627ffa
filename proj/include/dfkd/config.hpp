#pragma once

#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dfkd/attention_generator.hpp"
#include "dfkd/models.hpp"
#include "dfkd/objectives.hpp"

#include "CLI11.hpp"
#include "json.hpp"

// Layered configuration: built-in defaults <- config file (flat key = value
// lines, '#' comments) <- command-line flags. Every key can also be supplied
// through the environment with the DFKD_ prefix (e.g. DFKD_GAMMA).

namespace dfkd {

struct Config {
  // dataset
  int num_super = 2;
  int subs_per_super = 5;
  int samples_per_class = 100;
  int image_size = 32;
  double train_frac = 0.8;
  std::uint64_t data_seed = 0;
  // models
  std::string teacher_channels = "64,128,256";
  int teacher_blocks = 2;
  std::string student_channels = "32,64,128";
  int student_blocks = 1;
  // generator
  int z_dim = 256;
  int gen_base = 512;
  int sam_ratio = 8;
  // distillation
  Hyperparams hyper;
  // teacher pretraining
  int pretrain_epochs = 60;
  int pretrain_batch = 64;
  double pretrain_lr = 0.02;
  // ablation
  int ablate_seeds = 3;
  std::string sweep_lambda;  // e.g. "0,0.01,0.05,0.07,0.09"
  std::string sweep_order;   // e.g. "1,2,3"
  // artifacts
  std::string out = "runs/out";
  std::string teacher_ckpt;
  std::string ckpt;
  int grid_n = 8;

  int num_classes() const { return num_super * subs_per_super; }

  static std::array<int, 3> parse_channels(const std::string& s) {
    std::array<int, 3> out{};
    std::istringstream is(s);
    std::string tok;
    int i = 0;
    while (std::getline(is, tok, ',')) {
      DFKD_CHECK(i < 3, "channel list '" << s << "' must have exactly 3 entries");
      out[static_cast<std::size_t>(i++)] = std::stoi(tok);
    }
    DFKD_CHECK(i == 3, "channel list '" << s << "' must have exactly 3 entries");
    return out;
  }

  ConvNetSpec teacher_spec() const {
    return {parse_channels(teacher_channels), teacher_blocks, num_classes(), image_size};
  }
  ConvNetSpec student_spec() const {
    return {parse_channels(student_channels), student_blocks, num_classes(), image_size};
  }
  GeneratorSpec gen_spec() const {
    GeneratorSpec g;
    g.z_dim = z_dim;
    g.base_channels = gen_base;
    g.out_size = image_size;
    g.sam_ratio = sam_ratio;
    g.lambda = hyper.lambda;
    return g;
  }

  void validate() const {
    hyper.validate();
    DFKD_CHECK(num_super >= 1 && subs_per_super >= 1 && samples_per_class >= 1, "dataset counts must be >= 1");
    DFKD_CHECK(train_frac > 0.0 && train_frac < 1.0, "train_frac must lie in (0, 1)");
    DFKD_CHECK(pretrain_epochs >= 0 && pretrain_batch >= 2, "pretraining settings out of range");
    DFKD_CHECK(grid_n >= 1, "grid_n must be >= 1");
    DFKD_CHECK(ablate_seeds >= 1, "ablate_seeds must be >= 1");
    teacher_spec().validate();
    student_spec().validate();
    gen_spec().validate();
  }

  nlohmann::json to_json() const {
    return {{"num_super", num_super},
            {"subs_per_super", subs_per_super},
            {"samples_per_class", samples_per_class},
            {"image_size", image_size},
            {"train_frac", train_frac},
            {"data_seed", data_seed},
            {"teacher_channels", teacher_channels},
            {"teacher_blocks", teacher_blocks},
            {"student_channels", student_channels},
            {"student_blocks", student_blocks},
            {"z_dim", z_dim},
            {"gen_base", gen_base},
            {"sam_ratio", sam_ratio},
            {"hyper", hyper.to_json()},
            {"pretrain_epochs", pretrain_epochs},
            {"pretrain_batch", pretrain_batch},
            {"pretrain_lr", pretrain_lr},
            {"out", out}};
  }
};

struct ParsedCli {
  Config cfg;
  std::string command;      // empty when only parsing/help
  int exit_code = -1;       // >= 0 when the parse already resolved (help/version/parse error)
  std::string message;
};

// args excludes argv[0].
inline ParsedCli parse_cli(const std::vector<std::string>& args) {
  ParsedCli result;
  Config& c = result.cfg;

  CLI::App app{"Data-free distillation of fine-grained classifiers at desk scale"};
  app.fallthrough();
  app.set_config("--config", "", "flat key = value configuration file");
  app.allow_config_extras(false);

  auto opt = [&app](const std::string& name, auto& field, const std::string& desc) {
    std::string env = "DFKD_" + name;
    for (auto& ch : env) ch = ch == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    return app.add_option("--" + name, field, desc)->envname(env);
  };

  opt("num_super", c.num_super, "super-classes (distinct silhouettes)");
  opt("subs_per_super", c.subs_per_super, "sub-classes per super-class");
  opt("samples_per_class", c.samples_per_class, "images per class");
  opt("image_size", c.image_size, "square image size (multiple of 8; 16x-multiple for the generator)");
  opt("train_frac", c.train_frac, "train fraction of the stratified split");
  opt("data_seed", c.data_seed, "dataset generation / split seed");
  opt("teacher_channels", c.teacher_channels, "teacher stage channels, e.g. 64,128,256");
  opt("teacher_blocks", c.teacher_blocks, "teacher blocks per stage");
  opt("student_channels", c.student_channels, "student stage channels");
  opt("student_blocks", c.student_blocks, "student blocks per stage");
  opt("z_dim", c.z_dim, "generator noise dimensionality");
  opt("gen_base", c.gen_base, "generator channels at the initial grid");
  opt("sam_ratio", c.sam_ratio, "attention module channel reduction r");
  opt("alpha", c.hyper.alpha, "weight of the BN statistics term (generator objective)");
  opt("beta", c.hyper.beta, "weight of the attention distillation term");
  opt("gamma", c.hyper.gamma, "weight of the contrastive term");
  opt("lambda", c.hyper.lambda, "attention blend weight inside the generator");
  opt("tau", c.hyper.tau, "contrastive temperature");
  opt("order", c.hyper.order, "mixed attention order R (1..3)");
  opt("gen_steps", c.hyper.gen_steps, "generator steps per epoch (t)");
  opt("student_steps", c.hyper.student_steps, "student steps per epoch (k)");
  opt("batch", c.hyper.batch, "batch size (N)");
  opt("lr_g", c.hyper.lr_g, "generator Adam learning rate");
  opt("beta1_g", c.hyper.beta1_g, "generator Adam beta1");
  opt("beta2_g", c.hyper.beta2_g, "generator Adam beta2");
  opt("lr_s", c.hyper.lr_s, "student SGD initial learning rate (cosine annealed)");
  opt("momentum_s", c.hyper.momentum_s, "student SGD momentum");
  opt("weight_decay_s", c.hyper.weight_decay_s, "student SGD weight decay");
  opt("epochs", c.hyper.epochs, "outer iterations (one generator + one student phase each)");
  opt("seed", c.hyper.seed, "run seed");
  opt("pretrain_epochs", c.pretrain_epochs, "teacher pretraining epochs");
  opt("pretrain_batch", c.pretrain_batch, "teacher pretraining batch size");
  opt("pretrain_lr", c.pretrain_lr, "teacher pretraining learning rate");
  opt("ablate_seeds", c.ablate_seeds, "seeds per ablation row");
  opt("sweep_lambda", c.sweep_lambda, "comma list of lambda values to sweep (ablate)");
  opt("sweep_order", c.sweep_order, "comma list of attention orders to sweep (ablate)");
  opt("out", c.out, "output directory");
  opt("teacher_ckpt", c.teacher_ckpt, "teacher checkpoint path");
  opt("ckpt", c.ckpt, "checkpoint path (evaluate: model ckpt; emit-samples: engine state ckpt)");
  opt("grid_n", c.grid_n, "emit-samples grid side length");

  for (const char* name : {"pretrain", "distill", "evaluate", "emit-samples", "ablate"})
    app.add_subcommand(name)->fallthrough();
  app.require_subcommand(0, 1);

  std::vector<std::string> rev(args.rbegin(), args.rend());  // CLI11 consumes reversed
  try {
    app.parse(rev);
  } catch (const CLI::ConfigError& e) {
    const std::string what = e.what();
    const std::string marker = "INI was not able to parse ";
    const auto pos = what.find(marker);
    const std::string key = pos == std::string::npos ? what : what.substr(pos + marker.size());
    throw std::invalid_argument("unknown key: " + key);
  } catch (const CLI::CallForHelp&) {
    result.exit_code = 0;
    result.message = app.help();
    return result;
  } catch (const CLI::ParseError& e) {
    throw std::invalid_argument(std::string("argument error: ") + e.what());
  }

  for (const auto* sub : app.get_subcommands()) result.command = sub->get_name();
  return result;
}

}  // namespace dfkd
