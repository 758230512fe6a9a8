#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "plvl/commands.hpp"

namespace {

// Leftover arguments must all be --section.key=value overrides.
void apply_overrides(plvl::RunConfig& cfg, const std::vector<std::string>& extras) {
  for (const auto& arg : extras) {
    const auto eq = arg.find('=');
    if (arg.rfind("--", 0) != 0 || eq == std::string::npos || eq <= 2)
      throw plvl::ConfigError("unexpected argument '" + arg + "' (overrides take the form --key=value)");
    cfg.set_from_text(arg.substr(2, eq - 2), arg.substr(eq + 1));
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"plvl: referring expression grounding (boxes and masks) on synthetic or JSONL data"};
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("-c,--config", config_path, "flat JSON config; --key=value flags override it")
      ->check(CLI::ExistingFile);

  std::string split = "train", checkpoint, image, expression;
  std::size_t seeds = 10;
  double corrupt = 0.0;

  auto* gen = app.add_subcommand("gen-data", "render a synthetic dataset (JSONL + PPM images + vocabulary)");
  gen->add_option("--split", split, "train, val or test")->capture_default_str();
  auto* train = app.add_subcommand("train", "train a model and write checkpoints");
  auto* eval = app.add_subcommand("eval", "print {rec_acc@0.5, res_miou, n} for a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--split", split, "train, val or test")->default_val("val");
  auto* predict = app.add_subcommand("predict", "write box.json, mask.pgm, scoremap.pgm and overlay.ppm");
  predict->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  predict->add_option("--image", image, "input PPM/PGM image")->required()->check(CLI::ExistingFile);
  predict->add_option("--expression", expression, "referring expression")->required();
  auto* gradcheck = app.add_subcommand("gradcheck", "compare analytic and finite-difference gradients");
  gradcheck->add_option("--seeds", seeds, "seeds per case")->capture_default_str();
  gradcheck->add_option("--corrupt", corrupt, "test hook: offset added to every analytic gradient");
  for (auto* sub : {gen, train, eval, predict, gradcheck}) sub->allow_extras();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? plvl::kExitOk : plvl::kExitUsage;
  }

  CLI::App* sub = app.get_subcommands().front();
  return plvl::run_guarded(
      [&] {
        plvl::RunConfig cfg;
        if (!config_path.empty()) cfg.merge_file(config_path);
        apply_overrides(cfg, sub->remaining());
        if (sub == gen) return plvl::cmd_gen_data(cfg, split, std::cout, std::cerr);
        if (sub == train) return plvl::cmd_train(cfg, std::cout, std::cerr);
        if (sub == eval) return plvl::cmd_eval(cfg, checkpoint, split, std::cout, std::cerr);
        if (sub == predict) return plvl::cmd_predict(cfg, checkpoint, image, expression, std::cout, std::cerr);
        return plvl::cmd_gradcheck(cfg, seeds, corrupt, std::cout, std::cerr);
      },
      std::cerr);
}
