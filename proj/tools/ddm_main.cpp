#include <cstdint>
#include <cstdio>
#include <map>
#include <string>

#include <CLI11.hpp>

#include "ddm/common.hpp"
#include "ddm/pipeline.hpp"

namespace {

struct Args {
  std::string config;
  std::string out;
  bool force = false;
  int workers = 1;
  std::uint64_t seed = 0;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"distilled-datamodel pipeline: cluster, train, distill, attribute, verify"};
  app.require_subcommand(1);

  const std::map<std::string, std::pair<const char*, void (*)(const ddm::PipelineConfig&,
                                                              const ddm::PipelineIO&)>>
      verbs = {
          {"cluster", {"partition the training set into per-class k-means clusters",
                       ddm::cmd_cluster}},
          {"train", {"train the target model and checkpoint its trajectory", ddm::cmd_train}},
          {"distill", {"distill per-part synthetic sets by reversed gradient matching",
                       ddm::cmd_distill}},
          {"evaluate", {"locate influential clusters for test queries via synset fine-tuning",
                        ddm::cmd_evaluate}},
          {"diagnose", {"rank cluster quality and run deletion sweeps", ddm::cmd_diagnose}},
          {"oracle", {"exact leave-cluster-out retraining for verification", ddm::cmd_oracle}},
          {"report", {"assemble distance, sweep, and timing summaries", ddm::cmd_report}},
      };

  Args args;
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, entry] : verbs) {
    CLI::App* sub = app.add_subcommand(name, entry.first);
    sub->add_option("--config", args.config, "pipeline configuration JSON")->required();
    sub->add_option("--out", args.out, "output directory (overrides the config)");
    sub->add_flag("--force", args.force,
                  "replace artifacts written under a different configuration");
    sub->add_option("--workers", args.workers, "worker threads for independent retrains");
    sub->add_option("--seed", args.seed, "override the global seed");
    subs[name] = sub;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;  // --help exits cleanly; bad usage is an input error
  }

  const std::string verb = app.get_subcommands().front()->get_name();
  try {
    ddm::PipelineConfig cfg = ddm::load_config(args.config);
    if (subs[verb]->count("--seed")) cfg.seed = args.seed;
    if (!args.out.empty()) cfg.out = args.out;
    if (args.workers < 1) throw ddm::ConfigError("--workers must be >= 1");
    ddm::PipelineIO io{cfg.out, args.force, args.workers};
    verbs.at(verb).second(cfg, io);
    return 0;
  } catch (const ddm::MissingArtifactError& e) {
    std::fprintf(stderr, "missing artifact: %s\n", e.what());
    return 3;
  } catch (const ddm::NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return 4;
  } catch (const ddm::ConfigError& e) {
    std::fprintf(stderr, "invalid input: %s\n", e.what());
    return 2;
  } catch (const ddm::ParseError& e) {
    std::fprintf(stderr, "invalid input: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
