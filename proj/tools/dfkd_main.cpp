#include <iostream>
#include <string>
#include <vector>

#include "dfkd/blas.hpp"
#include "dfkd/commands.hpp"
#include "dfkd/config.hpp"

int main(int argc, char** argv) {
  dfkd::ensure_fast_blas(argv);
  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    dfkd::ParsedCli parsed = dfkd::parse_cli(args);
    if (parsed.exit_code >= 0) {
      std::cout << parsed.message;
      return parsed.exit_code;
    }
    if (parsed.command.empty()) {
      std::cerr << "usage: dfkd {pretrain|distill|evaluate|emit-samples|ablate} [options]\n"
                   "       dfkd --help\n";
      return 2;
    }
    if (parsed.command == "pretrain") {
      dfkd::cmd_pretrain(parsed.cfg);
    } else if (parsed.command == "distill") {
      dfkd::cmd_distill(parsed.cfg);
    } else if (parsed.command == "evaluate") {
      dfkd::cmd_evaluate(parsed.cfg);
    } else if (parsed.command == "emit-samples") {
      dfkd::cmd_emit_samples(parsed.cfg);
    } else if (parsed.command == "ablate") {
      dfkd::cmd_ablate(parsed.cfg);
    }
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
