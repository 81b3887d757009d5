// SPDX-License-Identifier: Apache-2.0
// Command-line entry point: training runs, sweeps, memory bench, variance
// lab, evaluation and trajectory dumps.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "smd/common/errors.hpp"
#include "smd/harness/config.hpp"
#include "smd/harness/experiment.hpp"
#include "smd/harness/traj_io.hpp"
#include "smd/model/checkpoint.hpp"

namespace {

using namespace smd;

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string mode;
  std::string out;
  std::vector<std::string> overrides;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "Experiment config file");
    app->add_option("--seed", seed, "Run seed");
    app->add_option("--mode", mode, "Learner mode")
        ->check(CLI::IsMember({"smd", "naive", "ir", "ir-reject", "dense"}));
    app->add_option("--out", out, "Output directory");
    app->add_option("--set", overrides, "Override, section.key=value (repeatable)");
  }

  harness::ExperimentConfig resolve() const {
    auto c = config_path.empty() ? harness::default_config() : harness::load_config(config_path);
    for (const auto& o : overrides) harness::apply_override(c, o);
    if (seed) c.seed = *seed;
    if (!mode.empty()) c.learner.mode = learner::parse_mode(mode);
    if (!out.empty()) c.out_dir = out;
    c.normalize();
    c.validate();
    return c;
  }
};

std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

model::Parameters policy_for(const harness::ExperimentConfig& c, const std::string& ckpt) {
  return ckpt.empty() ? harness::initial_policy(c) : model::load_checkpoint(c.model, std::filesystem::path(ckpt));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Shadow-mask distillation lab"};
  app.require_subcommand(1);

  CommonOptions train_opts;
  auto* train = app.add_subcommand("train", "Run one training experiment");
  train_opts.attach(train);

  CommonOptions sweep_opts;
  std::string axis, values;
  auto* sweep = app.add_subcommand("sweep", "One training run per value of an axis");
  sweep_opts.attach(sweep);
  sweep->add_option("--axis", axis, "compression_ratio, lambda or strategy")->required();
  sweep->add_option("--values", values, "Comma-separated values")->required();

  harness::MembenchConfig bench;
  std::string retentions = "0.5,0.8,1.0";
  auto* membench = app.add_subcommand("membench", "Peak-memory ledger: physical slice vs mask simulation");
  membench->add_option("--layers", bench.n_layers);
  membench->add_option("--heads", bench.n_heads);
  membench->add_option("--d-head", bench.d_head);
  membench->add_option("--tokens", bench.tokens);
  membench->add_option("--retentions", retentions, "Comma-separated retained fractions");

  CommonOptions lab_opts;
  harness::VarianceLabConfig lab;
  std::string dist = "two-point";
  auto* vlab_cmd = app.add_subcommand("variance-lab", "Importance-weight product variance vs horizon");
  lab_opts.attach(vlab_cmd);
  vlab_cmd->add_option("--sigma2", lab.weights.sigma2);
  vlab_cmd->add_option("--samples", lab.weights.n_samples);
  vlab_cmd->add_option("--dist", dist)->check(CLI::IsMember({"two-point", "lognormal"}));
  vlab_cmd->add_option("--rollouts", lab.policy_rollouts, "Policy rollouts per length");

  CommonOptions eval_opts;
  std::string eval_ckpt;
  auto* eval = app.add_subcommand("eval", "Greedy-decode reward on held-out instances");
  eval_opts.attach(eval);
  eval->add_option("--ckpt", eval_ckpt, "Checkpoint (default: the initial policy)");

  CommonOptions dump_opts;
  std::string dump_ckpt;
  std::uint64_t dump_step = 0;
  auto* dump = app.add_subcommand("dump-traj", "Write one step's rollouts as JSON lines");
  dump_opts.attach(dump);
  dump->add_option("--ckpt", dump_ckpt, "Checkpoint (default: the initial policy)");
  dump->add_option("--step", dump_step, "Step whose prompts and seeds to use");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      const auto c = train_opts.resolve();
      const auto result = harness::run_train(c, [](const harness::MetricRecord& r) {
        if (r.step % 25 == 0) {
          std::cerr << "step " << r.step << " reward " << r.reward_mean << " ratio_var " << r.ratio_var << "\n";
        }
      });
      std::cout << "final_reward\t" << g17(result.final_reward) << "\n";
      std::cout << "eval_reward\t" << g17(harness::run_eval(c, result.final_params)) << "\n";
    } else if (*sweep) {
      const auto c = sweep_opts.resolve();
      const auto rows = harness::run_sweep(c, harness::parse_sweep_axis(axis), split_commas(values));
      std::cout << axis << "\tfinal_reward\n";
      for (const auto& r : rows) std::cout << r.value << "\t" << g17(r.final_reward) << "\n";
    } else if (*membench) {
      bench.retentions.clear();
      for (const auto& r : split_commas(retentions)) bench.retentions.push_back(std::stod(r));
      std::cout << "retention\tfootprint_bytes\tslice_peak_ratio\tmask_peak_ratio\n";
      for (const auto& r : harness::run_membench(bench)) {
        std::cout << g17(r.retention) << "\t" << r.footprint_bytes << "\t" << g17(r.slice_peak_ratio) << "\t"
                  << g17(r.mask_peak_ratio) << "\n";
      }
    } else if (*vlab_cmd) {
      const auto c = lab_opts.resolve();
      lab.weights.distribution = vlab::parse_weight_distribution(dist);
      const auto report = harness::run_variance_lab(c, lab);
      std::ostringstream out;
      out << "L\tsigma2\tempirical_var\tclosed_form\n";
      for (const auto& r : report.simulated) {
        out << r.horizon << "\t" << g17(r.sigma2) << "\t" << g17(r.empirical) << "\t" << g17(r.closed_form) << "\n";
      }
      out << "# slope " << g17(report.fit.slope) << " r2 " << g17(report.fit.r_squared) << "\n";
      out << "L\tmode\tratio_mean\tratio_var\tevictions\n";
      for (std::size_t i = 0; i < report.ir.size(); ++i) {
        out << report.ir[i].length << "\tir\t" << g17(report.ir[i].mean) << "\t" << g17(report.ir[i].variance) << "\t"
            << report.ir[i].evictions << "\n";
        out << report.smd[i].length << "\tsmd\t" << g17(report.smd[i].mean) << "\t" << g17(report.smd[i].variance)
            << "\t" << report.smd[i].evictions << "\n";
      }
      std::cout << out.str();
      if (!c.out_dir.empty()) {
        std::filesystem::create_directories(c.out_dir);
        std::ofstream(std::filesystem::path(c.out_dir) / "variance.tsv") << out.str();
      }
    } else if (*eval) {
      const auto c = eval_opts.resolve();
      std::cout << "eval_reward\t" << g17(harness::run_eval(c, policy_for(c, eval_ckpt))) << "\n";
    } else if (*dump) {
      const auto c = dump_opts.resolve();
      const auto params = policy_for(c, dump_ckpt);
      const auto prompts = harness::step_prompts(c, dump_step);
      const auto trajs = harness::collect_rollouts(params, c, prompts, dump_step);
      if (c.out_dir.empty()) {
        for (const auto& t : trajs) std::cout << harness::trajectory_to_json(t) << "\n";
      } else {
        std::filesystem::create_directories(c.out_dir);
        harness::write_trajectories(std::filesystem::path(c.out_dir) / "trajectories.jsonl", trajs);
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
