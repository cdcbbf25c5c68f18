// bagel: concept-bias analysis over exported activation bundles.
//
//   bagel all --bundle data/ --out run/
//   bagel graph --out run/ --tau 0.6 --layer layer3
//   bagel serve --out run/ --port 8000

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "bagel/error.hpp"
#include "bagel/run.hpp"
#include "bagel/serve.hpp"

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitMissingArtifact = 3;
constexpr int kExitSchema = 4;

}  // namespace

int main(int argc, char** argv) {
  using bagel::run::RunConfig;
  CLI::App app{"Compare concept biases of a dataset with those encoded in network layers"};
  app.require_subcommand(1);
  app.fallthrough();

  RunConfig cfg;
  std::string bundle, out, mode = "model_f1", ranking_file;
  int port = 8000;
  app.add_option("--bundle", bundle, "Activation bundle directory");
  app.add_option("--out", out, "Run directory");
  app.add_option("--tau", cfg.tau, "Binarization / graph threshold")->capture_default_str();
  app.add_option("--tau-grid", cfg.tau_grid, "Sweep thresholds (comma separated)")->delimiter(',');
  app.add_option("--tau-min", cfg.tau_min, "Smallest threshold kept in the sweep")->capture_default_str();
  app.add_option("--c-grid", cfg.c_grid, "Regularization grid (comma separated)")->delimiter(',');
  app.add_option("--folds", cfg.folds, "Cross-validation folds")->capture_default_str();
  app.add_option("--seed", cfg.seed, "Seed for fold assignment and row sampling")->capture_default_str();
  app.add_option("--top-k", cfg.top_k, "Number of dataset-biased concepts to recover")->capture_default_str();
  app.add_option("--mode", mode, "Model ranking mode")
      ->check(CLI::IsMember({"model_f1", "model_js"}))
      ->capture_default_str();
  app.add_flag("--include-gray", cfg.include_gray, "Emit pairs failing the inclusion rule as gray edges");
  app.add_option("--layer", cfg.layers, "Layer id (repeatable); graph uses single-layer mode");
  app.add_option("--port", port, "Port for 'serve'")->capture_default_str();
  app.add_option("--train-fraction", cfg.train_fraction, "Fraction of images used to train probes")
      ->capture_default_str();
  app.add_option("--ranking-file", ranking_file, "External concept rankings for 'recall'");

  auto* validate = app.add_subcommand("validate", "Load and check a bundle");
  auto* probes = app.add_subcommand("probes", "Train concept probes");
  auto* analyze = app.add_subcommand("analyze", "Dataset/model bias matrices and alignment");
  auto* sweep = app.add_subcommand("sweep", "Threshold sweep of detection scores");
  auto* rank = app.add_subcommand("rank", "Biased-concept rankings");
  auto* recall = app.add_subcommand("recall", "Recall of dataset-biased concepts");
  auto* graph = app.add_subcommand("graph", "Knowledge graph and layer dynamics");
  auto* serve = app.add_subcommand("serve", "Serve a run directory for the explorer UI");
  auto* all = app.add_subcommand("all", "Run every stage");

  CLI11_PARSE(app, argc, argv);

  cfg.bundle_path = bundle;
  cfg.output_dir = out;
  cfg.mode = bagel::ranking_mode_from_string(mode);
  if (!ranking_file.empty()) cfg.ranking_file = ranking_file;

  auto need = [&](bool ok, const char* flag) {
    if (!ok) throw bagel::InvalidArgument(std::string("missing required option ") + flag);
  };

  try {
    const bool uses_bundle = *validate || *probes || *analyze || *all;
    if (uses_bundle) need(!bundle.empty(), "--bundle");
    if (!*validate) need(!out.empty(), "--out");

    if (*validate) {
      std::cout << bagel::run::cmd_validate(cfg).dump(2) << "\n";
    } else if (*probes) {
      auto p = bagel::run::cmd_probes(cfg);
      std::cout << "trained " << p.size() << " probes -> " << (cfg.output_dir / "probes.jsonl").string() << "\n";
    } else if (*analyze) {
      bagel::run::cmd_analyze(cfg);
      std::cout << bagel::detail::read_file(cfg.output_dir / "alignment.json");
    } else if (*sweep) {
      bagel::run::cmd_sweep(cfg);
      std::cout << bagel::detail::read_file(cfg.output_dir / "sweep.txt");
    } else if (*rank) {
      bagel::run::cmd_rank(cfg);
      std::cout << "rankings -> " << (cfg.output_dir / "rankings.json").string() << "\n";
    } else if (*recall) {
      std::cout << bagel::run::cmd_recall(cfg).dump(2) << "\n";
    } else if (*graph) {
      auto g = bagel::run::cmd_graph(cfg);
      std::cout << "graph: " << g.nodes.size() << " nodes, " << g.edges.size() << " edges -> "
                << (cfg.output_dir / "graph.json").string() << "\n";
    } else if (*serve) {
      std::cout << "serving " << cfg.output_dir.string() << " on http://127.0.0.1:" << port << "/\n" << std::flush;
      bagel::run::cmd_serve(cfg.output_dir, port);
    } else if (*all) {
      bagel::run::cmd_all(cfg);
      std::cout << bagel::detail::read_file(cfg.output_dir / "sweep.txt");
      std::cout << "artifacts -> " << cfg.output_dir.string() << "\n";
    }
  } catch (const bagel::MissingArtifact& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitMissingArtifact;
  } catch (const bagel::SchemaError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitSchema;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return 0;
}
