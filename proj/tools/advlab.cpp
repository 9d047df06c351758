#include "advlab/experiment.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

namespace {

struct CommonOpts {
  std::string config;
  std::string seed;
  std::string out;
};

void add_common(CLI::App* sub, CommonOpts& opts) {
  sub->add_option("--config", opts.config, "experiment config file");
  sub->add_option("--seed", opts.seed, "override the base seed");
  sub->add_option("--out", opts.out, "override the output directory");
}

advlab::Config make_config(const CommonOpts& opts) {
  advlab::Config cfg = opts.config.empty()
                           ? advlab::Config{}
                           : advlab::load_config(opts.config);
  if (!opts.seed.empty()) {
    try {
      cfg.seed = std::stoull(opts.seed);
    } catch (const std::exception&) {
      throw advlab::ConfigError("--seed expects an unsigned integer");
    }
  }
  if (!opts.out.empty()) cfg.out = opts.out;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"advlab: adversarial-example generation and transferability lab"};
  app.require_subcommand(1);

  using Stage = void (*)(const advlab::Config&, advlab::OutputSink&);
  const std::vector<std::pair<std::string, Stage>> stage_commands = {
      {"gen-data", advlab::stage_gen_data},
      {"train", advlab::stage_train},
      {"select-testset", advlab::stage_select_testset},
      {"attack", advlab::stage_attack},
      {"attack-ensemble", advlab::stage_attack_ensemble},
      {"evaluate", advlab::stage_evaluate},
      {"min-rmsd", advlab::stage_min_rmsd},
      {"intervals", advlab::stage_intervals},
      {"noise-baseline", advlab::stage_noise_baseline},
      {"cosine", advlab::stage_cosine},
      {"plane", advlab::stage_plane},
      {"logit-profile", advlab::stage_logit_profile},
  };
  const std::vector<std::string> descriptions = {
      "generate the procedural datasets",
      "train the registered models and the black-box stand-in",
      "choose the shared all-correct test set",
      "generate single-model adversarial sets",
      "generate leave-one-out ensemble adversarial sets",
      "build transfer matrices and headline tables",
      "minimal transferable RMSD scan for the pinned model pair",
      "adversarial interval scan along the attack direction",
      "clipped Gaussian-noise accuracy baseline",
      "pairwise gradient cosine matrix",
      "decision-region plane scans",
      "logit profiles along the attack direction",
  };

  std::vector<CommonOpts> opts(stage_commands.size() + 1);

  for (size_t i = 0; i < stage_commands.size(); ++i) {
    CLI::App* sub = app.add_subcommand(stage_commands[i].first, descriptions[i]);
    add_common(sub, opts[i]);
    const Stage stage = stage_commands[i].second;
    const CommonOpts* o = &opts[i];
    sub->callback([stage, o]() {
      const advlab::Config cfg = make_config(*o);
      advlab::OutputSink sink(cfg.out);
      stage(cfg, sink);
    });
  }

  CLI::App* run = app.add_subcommand("run", "full pipeline plus manifest");
  add_common(run, opts.back());
  run->callback([&opts]() {
    const advlab::Config cfg = make_config(opts.back());
    advlab::run_experiment(cfg);
    std::cout << "wrote " << cfg.out << "/manifest.json\n";
  });

  try {
    CLI11_PARSE(app, argc, argv);
  } catch (const advlab::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const advlab::InvariantError& e) {
    std::cerr << "invariant violation: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
