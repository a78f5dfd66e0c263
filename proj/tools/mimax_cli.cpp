// mimax command-line entry point.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mimax/cli.hpp"

namespace {

using namespace mimax;
using namespace mimax::cli;

struct Settings {
  GaussianMixtureSpec data;
  TrainConfig train;
  std::string method = "sdmi";
  std::string schedule = "cosine";
  std::string resample_views = "auto";
  bool no_byol_predictor = false;
  std::string out_dir = ".";
  std::string optional_out;  // estimate/report write files only when set
  std::string dataset, validation;
  std::size_t checkpoint_every = 0;
  std::string suite = "predictor";
  std::string checkpoint_a, checkpoint_b;
  std::vector<std::string> traces, labels;
  std::string trajectory;
  std::string plot_name = "mi.svg";
  std::string config;
};

void add_data_options(CLI::App* sub, Settings& s) {
  sub->add_option("--seed", s.data.seed, "RNG seed; every stream derives from it")
      ->capture_default_str();
  sub->add_option("--sigma", s.data.sigma, "cluster standard deviation")
      ->capture_default_str();
  sub->add_option("--tau", s.data.tau, "view noise standard deviation")
      ->capture_default_str();
  sub->add_option("--n-per-cluster", s.data.n_per_cluster, "samples per cluster")
      ->capture_default_str();
  sub->add_option("--k", s.data.k, "number of clusters")->capture_default_str();
}

void add_train_options(CLI::App* sub, Settings& s, bool with_method) {
  if (with_method) {
    sub->add_option("--method", s.method, "one of: " + valid_method_list())
        ->capture_default_str();
  }
  add_data_options(sub, s);
  sub->add_option("--epochs", s.train.epochs, "training epochs (>= 1)")
      ->capture_default_str();
  sub->add_option("--batch-size", s.train.batch_size, "minibatch size")
      ->capture_default_str();
  sub->add_flag("--full-batch", s.train.full_batch,
                "one deterministic update per pass over the whole set")
      ->default_str("false");
  sub->add_option("--resample-views", s.resample_views,
                  "redraw view noise each epoch: auto (minibatch only), yes, no")
      ->check(CLI::IsMember({"auto", "yes", "no"}))
      ->capture_default_str();
  sub->add_option("--temp", s.train.temp, "critic temperature (> 0)")
      ->capture_default_str();
  sub->add_option("--lr", s.train.lr, "base learning rate")->capture_default_str();
  sub->add_option("--schedule", s.schedule, "learning-rate schedule: cosine, constant")
      ->check(CLI::IsMember({"cosine", "constant"}))
      ->capture_default_str();
  sub->add_option("--weight-decay", s.train.weight_decay, "L2 weight decay")
      ->capture_default_str();
  sub->add_option("--ema-tau", s.train.ema_tau, "BYOL target momentum")
      ->capture_default_str();
  sub->add_option("--bn-momentum", s.train.bn_momentum, "BatchNorm running-stat momentum")
      ->capture_default_str();
  sub->add_option("--predictor-hidden", s.train.predictor_hidden,
                  "predictor hidden width")
      ->capture_default_str();
  sub->add_flag("--no-byol-predictor", s.no_byol_predictor,
                "drop the online predictor from byol")
      ->default_str("false");
  sub->add_option("--out-dir,--out", s.out_dir, "output directory")
      ->capture_default_str();
  sub->add_option("--config", s.config, "flat key=value file; flags override it");
}

std::unique_ptr<CLI::App> build_app(Settings& s) {
  auto app = std::make_unique<CLI::App>(
      "mimax: MI-maximizing self-supervised learning on toy Gaussian mixtures");
  app->require_subcommand(1);
  app->set_version_flag("--version", std::string(kToolVersion));

  auto* gen = app->add_subcommand("gen-data", "write training and validation CSVs");
  add_data_options(gen, s);
  gen->add_option("--out-dir,--out", s.out_dir, "output directory")
      ->capture_default_str();
  gen->add_option("--config", s.config, "flat key=value file; flags override it");

  auto* train = app->add_subcommand("train", "train one method and record its trace");
  add_train_options(train, s, true);
  train->add_option("--dataset", s.dataset, "training CSV (generated when absent)");
  train->add_option("--validation", s.validation,
                    "validation CSV (generated when absent)");
  train->add_option("--checkpoint-every", s.checkpoint_every,
                    "save encoders every N epochs (0: final only)")
      ->capture_default_str();

  auto* ablate = app->add_subcommand("ablate", "run the ablation suite on shared data");
  add_train_options(ablate, s, false);
  ablate->add_option("--suite", s.suite, "predictor (6 runs) or all (8 runs)")
      ->check(CLI::IsMember({"predictor", "all"}))
      ->capture_default_str();

  auto* est = app->add_subcommand("estimate", "MI bounds from saved encoders");
  add_data_options(est, s);
  est->add_option("--checkpoint", s.checkpoint_a, "encoder for the first view")
      ->required();
  est->add_option("--checkpoint-b", s.checkpoint_b,
                  "encoder for the second view (defaults to --checkpoint)");
  est->add_option("--temp", s.train.temp, "critic temperature (> 0)")
      ->capture_default_str();
  est->add_option("--out-dir,--out", s.optional_out, "write estimate.csv here");
  est->add_option("--config", s.config, "flat key=value file; flags override it");

  auto* plot = app->add_subcommand("plot", "render MI traces and trajectories as SVG");
  plot->add_option("--trace", s.traces, "trace CSV (repeatable)");
  plot->add_option("--label", s.labels, "legend label per --trace");
  plot->add_option("--trajectory", s.trajectory, "trajectory CSV to render");
  plot->add_option("--out-dir", s.out_dir, "output directory")->capture_default_str();
  plot->add_option("--out", s.plot_name, "MI plot file name inside --out-dir")
      ->capture_default_str();
  plot->add_option("--config", s.config, "flat key=value file; flags override it");

  auto* report = app->add_subcommand("report", "summarize trace CSVs");
  report->add_option("--trace", s.traces, "trace CSV (repeatable)");
  report->add_option("--out-dir", s.optional_out, "write report.csv here");
  report->add_option("--config", s.config, "flat key=value file; flags override it");
  return app;
}

CLI::App* active_subcommand(CLI::App& app) {
  auto subs = app.get_subcommands();
  return subs.empty() ? nullptr : subs.front();
}

// Keys from the config file for options not given on the command line,
// rendered as extra arguments.
std::vector<std::string> config_arguments(CLI::App& sub, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config file '" + path + "'");
  std::vector<std::string> args;
  for (const auto& item : CLI::ConfigINI().from_config(in)) {
    if (!item.parents.empty() || item.name == "config") {
      throw UsageError("config file '" + path + "': unsupported key '" +
                       item.fullname() + "'");
    }
    std::string name = item.name;
    for (char& c : name)
      if (c == '_') c = '-';
    CLI::Option* opt = sub.get_option_no_throw("--" + name);
    if (opt == nullptr) {
      throw UsageError("config file '" + path + "': unknown key '" + item.name +
                       "' for " + sub.get_name());
    }
    if (opt->count() > 0) continue;
    if (item.inputs.empty()) {
      args.push_back("--" + name);
      continue;
    }
    for (const auto& v : item.inputs) args.push_back("--" + name + "=" + v);
  }
  return args;
}

TrainConfig finish_train_config(const Settings& s, Method method) {
  TrainConfig c = s.train;
  c.method = method;
  c.data = s.data;
  c.seed = s.data.seed;
  c.schedule = s.schedule == "constant" ? LrSchedule::kConstant : LrSchedule::kCosine;
  if (s.resample_views == "yes") c.resample_views = true;
  if (s.resample_views == "no") c.resample_views = false;
  c.byol_predictor = !s.no_byol_predictor;
  return c;
}

int dispatch(const std::string& name, const Settings& s) {
  if (name == "gen-data") {
    run_gen_data({s.data, s.out_dir}, std::cout);
  } else if (name == "train") {
    TrainOptions o;
    o.cfg = finish_train_config(s, method_from_name(s.method));
    o.out_dir = s.out_dir;
    if (!s.dataset.empty()) o.dataset = s.dataset;
    if (!s.validation.empty()) o.validation = s.validation;
    o.checkpoint_every = s.checkpoint_every;
    run_train(o, std::cout);
  } else if (name == "ablate") {
    AblateOptions o;
    o.base = finish_train_config(s, Method::kSdmi);
    o.suite = s.suite;
    o.out_dir = s.out_dir;
    run_ablate(o, std::cout);
  } else if (name == "estimate") {
    EstimateOptions o;
    o.checkpoint_a = s.checkpoint_a;
    if (!s.checkpoint_b.empty()) o.checkpoint_b = s.checkpoint_b;
    o.spec = s.data;
    o.temp = s.train.temp;
    if (!s.optional_out.empty()) o.out_dir = s.optional_out;
    run_estimate(o, std::cout);
  } else if (name == "plot") {
    PlotOptions o;
    o.traces.assign(s.traces.begin(), s.traces.end());
    o.labels = s.labels;
    if (!s.trajectory.empty()) o.trajectory = s.trajectory;
    o.out_dir = s.out_dir;
    o.name = s.plot_name;
    run_plot(o, std::cout);
  } else if (name == "report") {
    ReportOptions o;
    o.traces.assign(s.traces.begin(), s.traces.end());
    if (!s.optional_out.empty()) o.out_dir = s.optional_out;
    run_report(o, std::cout);
  }
  return kExitOk;
}

int run(int argc, char** argv) {
  Settings first;
  auto app = build_app(first);
  try {
    app->parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app->exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }
  CLI::App* sub = active_subcommand(*app);
  if (sub == nullptr) return kExitUsage;
  const std::string name = sub->get_name();

  Settings settings;
  if (!first.config.empty()) {
    // Re-parse with config keys placed before the command-line arguments so
    // explicit flags keep precedence.
    std::vector<std::string> args = config_arguments(*sub, first.config);
    std::vector<std::string> full{argv[0], name};
    full.insert(full.end(), args.begin(), args.end());
    bool seen = false;
    for (int i = 1; i < argc; ++i) {
      if (!seen && name == argv[i]) {
        seen = true;
        continue;
      }
      full.emplace_back(argv[i]);
    }
    std::vector<char*> ptrs;
    for (auto& a : full) ptrs.push_back(a.data());
    auto again = build_app(settings);
    try {
      again->parse(static_cast<int>(ptrs.size()), ptrs.data());
    } catch (const CLI::ParseError& e) {
      const int code = again->exit(e);
      return code == 0 ? kExitOk : kExitUsage;
    }
  } else {
    settings = first;
  }
  return dispatch(name, settings);
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const mimax::ParseError& e) {
    std::cerr << "parse error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid input: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::domain_error& e) {
    std::cerr << "invalid input: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}
