#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cowlab/experiment.hpp"

namespace {

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const cowlab::ConfigError*>(&e)) return 2;
  if (dynamic_cast<const cowlab::DataError*>(&e)) return 3;
  if (dynamic_cast<const cowlab::NumericError*>(&e)) return 4;
  return 3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Circle-of-Willis bifurcation classification experiments on synthetic phantoms"};
  app.require_subcommand(0, 1);

  std::string config_file;
  std::vector<std::string> overrides;
  int jobs = 0;
  bool quiet = false;
  bool print_config = false;

  app.add_flag("--print-config", print_config, "Print the resolved configuration as JSON and exit");
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_file, "JSON config file");
    sub->add_option("-s,--set", overrides, "Override a config key, e.g. --set cv.folds=5")->take_all();
    sub->add_option("-j,--jobs", jobs, "Worker thread cap")->check(CLI::PositiveNumber);
    sub->add_flag("-q,--quiet", quiet, "Only report errors");
  };
  add_common(&app);

  struct Stage {
    const char* name;
    const char* help;
    cowlab::StageResult (*fn)(const cowlab::ExperimentConfig&, const cowlab::Logger&);
  };
  const Stage stages[] = {
      {"phantom", "Generate the phantom corpus (volumes and ground truth)", cowlab::cmd_phantom},
      {"extract", "Segment, skeletonize and extract bifurcation features and patches", cowlab::cmd_extract},
      {"train-cae", "Train the convolutional autoencoder on extracted patches", cowlab::cmd_train_cae},
      {"run", "Cross-validate every enabled pipeline and emit the report", cowlab::cmd_run},
      {"report", "Re-emit report files from stored cross-validation results", cowlab::cmd_report},
  };
  std::vector<CLI::App*> subs;
  for (const auto& s : stages) {
    auto* sub = app.add_subcommand(s.name, s.help);
    add_common(sub);
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (jobs > 0) overrides.push_back("jobs=" + std::to_string(jobs));
    const cowlab::ExperimentConfig cfg = cowlab::load_config(config_file, overrides);
    if (print_config) {
      std::cout << cfg.to_json().dump(2) << "\n";
      return 0;
    }
    for (std::size_t i = 0; i < subs.size(); ++i) {
      if (!subs[i]->parsed()) continue;
      const std::string name = stages[i].name;
      cowlab::Logger log;
      if (!quiet) log = [&](const std::string& m) { std::clog << "[" << name << "] " << m << "\n"; };
      try {
        stages[i].fn(cfg, log);
      } catch (const std::exception& e) {
        std::cerr << "cowlab " << name << ": " << e.what() << "\n";
        return exit_code_for(e);
      }
      return 0;
    }
    std::cerr << app.help();
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "cowlab: " << e.what() << "\n";
    return exit_code_for(e);
  }
}
