#include <functional>
#include <iostream>
#include <map>
#include <optional>

#include <CLI11.hpp>

#include "cli.hpp"

namespace {

using fundps::cli::RunConfig;

// One CLI11 subcommand whose flags mirror the config keys.
struct Command {
  CLI::App* app = nullptr;
  RunConfig cfg;
  std::string config_file;
  std::map<std::string, std::string> flags;

  Command(CLI::App& parent, const std::string& name, const std::string& help, std::vector<fundps::cli::KeySpec> keys)
      : cfg(std::move(keys)) {
    app = parent.add_subcommand(name, help);
    app->add_option("--config", config_file, "key = value config file")->check(CLI::ExistingFile);
    for (const auto& k : cfg.schema()) {
      std::string help_text = k.help;
      if (!k.default_value.empty()) help_text += (help_text.empty() ? "" : " ") + std::string("[") + k.default_value + "]";
      if (k.required) help_text += " (required)";
      app->add_option(fundps::cli::flag_name(k.name), flags[k.name], help_text);
    }
  }

  // Defaults < config file < flags.
  const RunConfig& resolve() {
    if (!config_file.empty()) cfg.load_file(config_file);
    for (const auto& k : cfg.schema()) {
      if (app->count(fundps::cli::flag_name(k.name)) > 0) cfg.set(k.name, flags[k.name]);
    }
    return cfg;
  }
};

std::string one_line(std::string s) {
  for (auto& ch : s) {
    if (ch == '\n' || ch == '\r') ch = ' ';
  }
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Function-space diffusion posterior sampling for PDE problems"};
  app.require_subcommand(1);

  Command gen(app, "gen-data", "generate a joint (a, u) dataset", fundps::cli::gen_data_keys());
  Command train(app, "train", "train the denoiser on a dataset", fundps::cli::train_keys());
  Command sample(app, "sample", "guided posterior sampling on held-out problems", fundps::cli::sample_keys());
  Command eval(app, "eval", "score the reconstructions of a sample run", fundps::cli::eval_keys());
  Command verify(app, "verify", "run closed-form oracle checks", fundps::cli::verify_keys());
  std::string oracle = "tweedie";
  verify.app->add_option("oracle", oracle, "tweedie, posterior, renoise or all")->capture_default_str();
  Command image(app, "export-image", "write PGM images of an FGRD file", fundps::cli::export_image_keys());

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << one_line(e.what()) << "\n";
    return 2;
  }

  try {
    std::filesystem::path dir;
    if (*gen.app) dir = fundps::cli::run_gen_data(gen.resolve());
    else if (*train.app) dir = fundps::cli::run_train(train.resolve());
    else if (*sample.app) dir = fundps::cli::run_sample(sample.resolve());
    else if (*eval.app) dir = fundps::cli::run_eval(eval.resolve());
    else if (*verify.app) dir = fundps::cli::run_verify(verify.resolve(), oracle);
    else if (*image.app) dir = fundps::cli::run_export_image(image.resolve());
    std::cout << dir.string() << "\n";
  } catch (const fundps::Error& e) {
    std::cerr << "error: " << e.category() << ": " << one_line(e.what()) << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << one_line(e.what()) << "\n";
    return 3;
  }
  return 0;
}
