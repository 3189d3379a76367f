// Command-line surface. Exit codes: 0 success, 1 usage error, 2 runtime fault.
#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <string>

#include "tardis/eval.hpp"
#include "tardis/io.hpp"
#include "tardis/phantom.hpp"
#include "tardis/trainer.hpp"

namespace fs = std::filesystem;
using namespace tardis;

int main(int argc, char** argv) {
  CLI::App app{"tardis: phantom datasets, disentangled training, and modality-subset evaluation"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::string data_dir;
  std::string model_path;
  uint64_t seed = 0;

  CLI::App* phantom_cmd = app.add_subcommand("phantom", "dataset commands");
  phantom_cmd->require_subcommand(1);
  CLI::App* gen = phantom_cmd->add_subcommand("gen", "generate a synthetic dataset");
  gen->add_option("--config", config_path, "JSON config; omitted keys keep defaults");
  gen->add_option("--seed", seed, "master seed");
  gen->add_option("--out", out_dir, "dataset directory")->required();

  CLI::App* train_cmd = app.add_subcommand("train", "train a model on a generated dataset");
  train_cmd->add_option("--config", config_path, "JSON config; omitted keys keep defaults");
  train_cmd->add_option("--seed", seed, "master seed");
  train_cmd->add_option("--data", data_dir, "dataset directory")->required();
  train_cmd->add_option("--out", out_dir, "artifact directory")->required();

  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluation commands");
  eval_cmd->require_subcommand(1);
  CLI::App* sweep = eval_cmd->add_subcommand(
      "sweep", "modality-subset report over the test split, probes fit on the train split");
  sweep->add_option("--config", config_path, "JSON config; otherwise the checkpoint echo");
  sweep->add_option("--seed", seed, "prior-draw seed, used when eval.mc_samples > 1");
  sweep->add_option("--data", data_dir, "dataset directory")->required();
  sweep->add_option("--model", model_path, "model checkpoint")->required();
  sweep->add_option("--out", out_dir, "report directory")->required();

  CLI::App* latents = app.add_subcommand(
      "export-latents", "pooled representation vectors of the test split, CSV");
  latents->add_option("--data", data_dir, "dataset directory")->required();
  latents->add_option("--model", model_path, "model checkpoint")->required();
  latents->add_option("--out", out_dir, "output directory")->required();

  app.add_subcommand("selftest", "headless invariant checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (gen->parsed()) {
      const Config cfg = load_config(config_path);
      const phantom::DatasetManifest manifest = phantom::gen_dataset(cfg.phantom, seed, out_dir);
      std::cout << "dataset " << manifest.dataset_hash << "\n";
      std::cout << "studies " << manifest.studies.size() << "\n";
      std::cout << "manifest " << out_dir << "/manifest.jsonl\n";
    } else if (train_cmd->parsed()) {
      const Config cfg = load_config(config_path);
      const TrainResult res = train(cfg, seed, data_dir, out_dir);
      std::cout << "checkpoint " << res.checkpoint_file << "\n";
      std::cout << "log " << res.log_file << "\n";
      std::cout << "val_dice " << res.last_val_dice << "\n";
    } else if (sweep->parsed()) {
      LoadedModel lm = load_model(model_path);
      const Config cfg = config_path.empty() ? lm.cfg : load_config(config_path);
      SweepOptions opt;
      opt.eval = cfg.eval;
      opt.seed = seed;
      const SweepReport report = sweep_eval(*lm.model, load_split(data_dir, "test"),
                                            load_split(data_dir, "train"), all_phase_subsets(),
                                            opt);
      fs::create_directories(out_dir);
      write_text_file(out_dir + "/sweep.csv", sweep_csv(report));
      write_text_file(out_dir + "/sweep.txt", sweep_table(report));
      std::cout << sweep_table(report);
    } else if (latents->parsed()) {
      LoadedModel lm = load_model(model_path);
      const LatentExport e = export_latents(*lm.model, load_split(data_dir, "test"));
      fs::create_directories(out_dir);
      write_text_file(out_dir + "/latents.csv", latent_csv(e));
      std::cout << "rows " << e.rows.size() << "\n";
      std::cout << "silhouette " << e.silhouette << "\n";
    } else {
      return selftest(std::cout) == 0 ? 0 : 2;
    }
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 2;
  }
  return 0;
}
