#include <cstdlib>
#include <iostream>

#include "CLI11.hpp"
#include "exitweave/app.hpp"
#include "exitweave/errors.hpp"
#include "exitweave/parallel.hpp"

namespace app = exitweave::app;

int main(int argc, char** argv) {
  CLI::App cli{"exitweave: meta-learned sample weighting for multi-exit classifiers"};
  cli.require_subcommand(1);
  cli.footer(
      "Environment: EXITWEAVE_THREADS caps the number of worker threads (results do not depend on it).\n"
      "Batching: training drops the final short batch of each epoch, evaluation uses every sample.");

  std::string config, checkpoint, out, dataset, q_grid, confidences;
  std::uint64_t seed = 0;
  double q = 0.75;
  std::size_t exits = 0;

  auto* train = cli.add_subcommand("train", "train a model from a JSON run config");
  train->add_option("--config", config, "run config (JSON)")->required();
  train->add_option("--out", out, "output directory (overrides output.dir)");
  train->add_option("--seed", seed, "training seed (overrides train.seed)");

  auto* eval = cli.add_subcommand("eval", "anytime and budgeted evaluation of a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "checkpoint written by train")->required();
  eval->add_option("--dataset", dataset, "dataset container to evaluate instead of the configured test split");
  eval->add_option("--q-grid", q_grid, "budget values: a,b,c or lo:hi:n (default 0.05:2:40)");
  eval->add_option("--out", out, "output directory (default: the checkpoint's directory)");

  auto* grad = cli.add_subcommand("gradcheck", "finite-difference check of every analytic gradient");
  grad->add_option("--config", config, "run config supplying the shapes (default: built-in tiny setup)");
  grad->add_option("--seed", seed, "seed for the random instance");
  grad->add_option("--out", out, "write the report as JSON");

  auto* alloc = cli.add_subcommand("allocate", "show the meta allocation and thresholds for a confidence table");
  alloc->add_option("--confidences", confidences, "CSV, one row per sample, one column per exit")->required();
  alloc->add_option("--q", q, "budget controller (> 0)");
  alloc->add_option("--exits", exits, "expected number of exits (checked against the table)");
  alloc->add_option("--out", out, "write the allocation as JSON");

  CLI11_PARSE(cli, argc, argv);

  exitweave::parallel::apply_thread_cap_from_env();

  try {
    if (train->parsed()) {
      app::TrainOptions opt{config, {}, {}};
      if (!out.empty()) opt.out = out;
      if (train->count("--seed") > 0) opt.seed = seed;
      app::cmd_train(opt, std::cerr);
    } else if (eval->parsed()) {
      app::EvalOptions opt{checkpoint, {}, {}, {}};
      if (!dataset.empty()) opt.dataset = dataset;
      if (!out.empty()) opt.out = out;
      if (!q_grid.empty()) opt.q_grid = app::parse_q_grid(q_grid);
      app::cmd_eval(opt, std::cerr);
    } else if (grad->parsed()) {
      app::GradcheckOptions opt;
      if (!config.empty()) opt.config = config;
      if (grad->count("--seed") > 0) opt.seed = seed;
      if (!out.empty()) opt.out = out;
      return app::cmd_gradcheck(opt, std::cout).passed() ? 0 : 1;
    } else if (alloc->parsed()) {
      app::AllocateOptions opt{confidences, q, {}, {}};
      if (alloc->count("--exits") > 0) opt.exits = exits;
      if (!out.empty()) opt.out = out;
      app::cmd_allocate(opt, std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "exitweave: error: " << e.what() << "\n";
    return app::exit_code_for(e);
  }
  return 0;
}
