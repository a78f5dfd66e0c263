#pragma once

// Command implementations behind the `mimax` executable. Each command takes
// an options struct, writes only below its output directory and reports
// progress to a caller-supplied stream.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "mimax/hash.hpp"
#include "mimax/io.hpp"
#include "mimax/metrics.hpp"
#include "mimax/svg.hpp"
#include "mimax/trainers.hpp"

namespace mimax::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr std::string_view kToolVersion = "1.0.0";

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 2,       // bad flags, unknown method or subcommand
  kExitValidation = 3,  // rejected values or malformed input files
  kExitRuntime = 4,     // I/O and other failures
};

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// `name` joined under `dir`; rejects absolute names and parent traversal so
/// every write stays inside the output directory.
inline fs::path output_path(const fs::path& dir, const fs::path& name) {
  if (name.empty() || name.is_absolute() || name.has_root_name()) {
    throw UsageError("output name '" + name.string() +
                     "' must be a relative path inside --out-dir");
  }
  for (const auto& part : name) {
    if (part == "..") {
      throw UsageError("output name '" + name.string() + "' leaves --out-dir");
    }
  }
  return dir / name;
}

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) {
    throw std::runtime_error("cannot create directory '" + dir.string() +
                             "': " + ec.message());
  }
}

inline Method method_from_name(std::string_view name) {
  if (auto m = parse_method(name)) return *m;
  throw UsageError("unknown method '" + std::string(name) +
                   "'; valid methods: " + valid_method_list());
}

inline std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

inline json to_json(const GaussianMixtureSpec& s) {
  return {{"k", s.k},
          {"sigma", s.sigma},
          {"tau", s.tau},
          {"n_per_cluster", s.n_per_cluster},
          {"seed", s.seed}};
}

inline json to_json(const TrainConfig& c) {
  json j = {{"method", method_name(c.method)},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"full_batch", c.full_batch},
            {"resample_views", c.views_resampled()},
            {"temp", c.temp},
            {"lr", c.lr},
            {"schedule", c.schedule == LrSchedule::kCosine ? "cosine" : "constant"},
            {"weight_decay", c.weight_decay},
            {"ema_tau", c.ema_tau},
            {"bn_momentum", c.bn_momentum},
            {"predictor_hidden", c.predictor_hidden},
            {"byol_predictor", c.byol_predictor},
            {"seed", c.seed}};
  j["data"] = to_json(c.data_spec());
  return j;
}

inline std::string summary_line(const TrainerOutput& out) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << method_name(out.method)
     << ": epochs=" << out.trace.size();
  const MITraceRow& last = out.trace.back();
  auto put = [&](const char* name, const std::optional<double>& v) {
    os << ' ' << name << '=';
    if (v) os << *v; else os << "NA";
  };
  put("cos_dv", last.mi_cos_dv);
  put("infonce", last.mi_infonce);
  put("jsd", last.mi_jsd);
  os << std::setprecision(2) << " nn_gap=" << last.nn_gap.mean;
  if (!out.centers_second.empty()) {
    os << " nn_gap_second=" << nn_angle_gaps(out.centers_second.back()).mean;
  }
  os << std::setprecision(4) << " mean_pairwise_cos=" << last.mean_pairwise_cos
     << " collapsed=" << (last.mean_pairwise_cos > kCollapseThreshold ? "yes" : "no");
  return os.str();
}

// ---------------------------------------------------------------------------
// gen-data

struct GenDataOptions {
  GaussianMixtureSpec spec;
  fs::path out_dir;
};

struct GenDataResult {
  std::string dataset_hash;
  std::string validation_hash;
  std::vector<fs::path> files;
};

/// Writes dataset.csv, validation.csv and validation_views.csv plus a
/// hashes.txt listing the git blob id of each.
inline GenDataResult run_gen_data(const GenDataOptions& o, std::ostream& log) {
  o.spec.validate();
  ensure_dir(o.out_dir);
  const Dataset train = generate_dataset(o.spec);
  const Dataset val = generate_validation_dataset(o.spec);
  const PairedBatch views = make_paired_views(
      val, o.spec.tau, derive_seed(o.spec.seed, "validation-views"));
  const std::string train_csv = dataset_csv(train);
  const std::string val_csv = dataset_csv(val);
  const std::string views_text = views_csv(views);

  GenDataResult r;
  r.dataset_hash = git_blob_hash(train_csv);
  r.validation_hash = git_blob_hash(val_csv);
  const std::pair<const char*, const std::string*> files[] = {
      {"dataset.csv", &train_csv},
      {"validation.csv", &val_csv},
      {"validation_views.csv", &views_text}};
  std::string hashes;
  for (const auto& [name, text] : files) {
    write_file(output_path(o.out_dir, name), *text);
    r.files.push_back(output_path(o.out_dir, name));
    hashes += git_blob_hash(*text) + "  " + name + '\n';
  }
  write_file(output_path(o.out_dir, "hashes.txt"), hashes);
  r.files.push_back(output_path(o.out_dir, "hashes.txt"));
  log << "dataset: " << train.labels.size() << " rows, hash " << r.dataset_hash
      << '\n';
  return r;
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
  TrainConfig cfg;
  fs::path out_dir;
  std::optional<fs::path> dataset;     // training CSV; generated when absent
  std::optional<fs::path> validation;  // validation CSV; generated when absent
  std::size_t checkpoint_every = 0;    // 0: final checkpoints only
};

struct TrainResult {
  TrainerOutput output;
  json manifest;
};

namespace detail {

inline std::string checkpoint_name(std::size_t epoch, const char* which) {
  std::ostringstream os;
  os << "checkpoints/epoch_" << std::setw(4) << std::setfill('0') << epoch << '_'
     << which << ".ckpt";
  return os.str();
}

class Manifest {
 public:
  Manifest(fs::path dir, json body) : dir_(std::move(dir)), body_(std::move(body)) {
    body_["tool"] = "mimax";
    body_["version"] = std::string(kToolVersion);
    body_["status"] = "running";
    body_["started_utc"] = utc_timestamp();
    body_["wall_clock_seconds"] = nullptr;
    body_["outputs"] = json::array();
    start_ = std::chrono::steady_clock::now();
    flush();
  }

  void add_output(const std::string& rel) { outputs_.push_back(rel); }

  void finish(const std::string& status, const std::string& error = {}) {
    body_["status"] = status;
    if (!error.empty()) body_["error"] = error;
    body_["wall_clock_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_)
            .count();
    json outs = json::array();
    for (const auto& rel : outputs_)
      if (fs::exists(dir_ / rel)) outs.push_back(rel);
    body_["outputs"] = outs;
    flush();
  }

  const json& body() const { return body_; }

 private:
  void flush() const {
    write_file(output_path(dir_, "manifest.json"), body_.dump(2) + '\n');
  }

  fs::path dir_;
  json body_;
  std::vector<std::string> outputs_;
  std::chrono::steady_clock::time_point start_;
};

}  // namespace detail

/// Trains one method. Outputs: manifest.json, trace.csv, trajectory.csv,
/// trajectory_second.csv (two-encoder and EMA methods), summary.txt and
/// checkpoints/.
inline TrainResult run_train(const TrainOptions& o, std::ostream& log) {
  o.cfg.validate();
  ensure_dir(o.out_dir);
  const GaussianMixtureSpec spec = o.cfg.data_spec();

  std::string train_csv;
  Dataset train_data, val_data;
  json dataset_info;
  if (o.dataset) {
    train_csv = read_file(*o.dataset);
    train_data = parse_dataset_csv(train_csv);
    dataset_info["source"] = o.dataset->string();
  } else {
    train_data = generate_dataset(spec);
    train_csv = dataset_csv(train_data);
    dataset_info["source"] = "generated";
  }
  if (o.validation) {
    const std::string text = read_file(*o.validation);
    val_data = parse_dataset_csv(text);
    dataset_info["validation_source"] = o.validation->string();
    dataset_info["validation_hash"] = git_blob_hash(text);
  } else {
    val_data = generate_validation_dataset(spec);
    dataset_info["validation_source"] = "generated";
    dataset_info["validation_hash"] = git_blob_hash(dataset_csv(val_data));
  }
  dataset_info["hash"] = git_blob_hash(train_csv);
  dataset_info["rows"] = train_data.labels.size();

  detail::Manifest manifest(
      o.out_dir,
      {{"command", "train"}, {"config", to_json(o.cfg)}, {"dataset", dataset_info},
       {"checkpoint_every", o.checkpoint_every}});
  try {
    ensure_dir(o.out_dir / "checkpoints");
    auto save = [&](const std::string& rel, const std::string& text) {
      write_file(output_path(o.out_dir, rel), text);
      manifest.add_output(rel);
    };
    EpochHook hook;
    if (o.checkpoint_every > 0) {
      hook = [&](std::size_t epoch, const TrainerOutput& s) {
        if (epoch % o.checkpoint_every != 0) return;
        save(detail::checkpoint_name(epoch, "f"), encoder_checkpoint(s.encoder));
        if (s.second) {
          save(detail::checkpoint_name(epoch, "g"), encoder_checkpoint(*s.second));
        }
      };
    }
    TrainerOutput out = train(o.cfg, train_data, val_data, hook);

    save("trace.csv", trace_csv(out.trace));
    save("trajectory.csv", trajectory_csv(out.centers));
    if (!out.centers_second.empty()) {
      save("trajectory_second.csv", trajectory_csv(out.centers_second));
    }
    save("checkpoints/final_f.ckpt", encoder_checkpoint(out.encoder));
    if (out.second) save("checkpoints/final_g.ckpt", encoder_checkpoint(*out.second));
    if (out.predictor) {
      save("checkpoints/final_predictor.ckpt", predictor_checkpoint(*out.predictor));
    }
    if (out.predictor_g) {
      save("checkpoints/final_predictor_g.ckpt",
           predictor_checkpoint(*out.predictor_g));
    }
    const std::string line = summary_line(out);
    save("summary.txt", line + '\n');
    manifest.finish("complete");
    log << line << '\n';
    return {std::move(out), manifest.body()};
  } catch (const std::exception& e) {
    manifest.finish("failed", e.what());
    throw;
  }
}

// ---------------------------------------------------------------------------
// ablate

struct AblateOptions {
  TrainConfig base;  // method is overwritten per suite member
  std::string suite = "predictor";
  fs::path out_dir;
};

struct AblationRow {
  Method method = Method::kSdmi;
  MITraceRow last;
  std::optional<NNGaps> second_gap;

  bool collapsed() const { return last.mean_pairwise_cos > kCollapseThreshold; }
};

inline std::vector<Method> ablation_suite(std::string_view suite) {
  if (suite == "predictor") {
    return {Method::kSdmi,    Method::kSdmiNoDv,      Method::kSdmiNoDvPred,
            Method::kSimSiam, Method::kSimSiamNoPred, Method::kSimSiamSdmi};
  }
  if (suite == "all") {
    return {Method::kSdmi,    Method::kSdmiNoDv,      Method::kSdmiNoDvPred,
            Method::kSimSiam, Method::kSimSiamNoPred, Method::kSimSiamSdmi,
            Method::kJmi,     Method::kByol};
  }
  throw UsageError("unknown suite '" + std::string(suite) +
                   "'; valid suites: predictor, all");
}

inline constexpr std::string_view kAblationHeader =
    "method,nn_gap_mean,nn_gap_min,nn_gap_max,nn_gap_sd,nn_gap_second_mean,"
    "mean_pairwise_cos,collapsed,mi_cos_dv";

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out(kAblationHeader);
  out += '\n';
  for (const auto& r : rows) {
    out += std::string(method_name(r.method)) + ',' + format_double(r.last.nn_gap.mean) +
           ',' + format_double(r.last.nn_gap.min) + ',' +
           format_double(r.last.nn_gap.max) + ',' + format_double(r.last.nn_gap.sd) +
           ',' + (r.second_gap ? format_double(r.second_gap->mean) : std::string()) +
           ',' + format_double(r.last.mean_pairwise_cos) + ',' +
           (r.collapsed() ? "yes" : "no") + ',' +
           (r.last.mi_cos_dv ? format_double(*r.last.mi_cos_dv) : std::string()) +
           '\n';
  }
  return out;
}

inline std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(16) << "method" << std::right << std::setw(10)
     << "nn_gap" << std::setw(10) << "min" << std::setw(12) << "gap(2nd)"
     << std::setw(12) << "mean_cos" << std::setw(11) << "collapsed" << '\n';
  os << std::fixed;
  for (const auto& r : rows) {
    os << std::left << std::setw(16) << method_name(r.method) << std::right
       << std::setprecision(2) << std::setw(10) << r.last.nn_gap.mean << std::setw(10)
       << r.last.nn_gap.min << std::setw(12);
    if (r.second_gap) os << r.second_gap->mean; else os << "-";
    os << std::setprecision(4) << std::setw(12) << r.last.mean_pairwise_cos
       << std::setw(11) << (r.collapsed() ? "yes" : "no") << '\n';
  }
  return os.str();
}

/// Runs every suite member on shared data and seed; each member's full
/// training outputs go to <out-dir>/<method>/.
inline std::vector<AblationRow> run_ablate(const AblateOptions& o, std::ostream& log) {
  const auto methods = ablation_suite(o.suite);
  ensure_dir(o.out_dir);
  std::vector<AblationRow> rows;
  for (Method m : methods) {
    TrainOptions t;
    t.cfg = o.base;
    t.cfg.method = m;
    t.out_dir = output_path(o.out_dir, std::string(method_name(m)));
    TrainResult r = run_train(t, log);
    AblationRow row;
    row.method = m;
    row.last = r.output.trace.back();
    if (!r.output.centers_second.empty()) {
      row.second_gap = nn_angle_gaps(r.output.centers_second.back());
    }
    rows.push_back(row);
  }
  write_file(output_path(o.out_dir, "ablation.csv"), ablation_csv(rows));
  const std::string table = ablation_table(rows);
  write_file(output_path(o.out_dir, "ablation.txt"), table);
  log << table;
  return rows;
}

// ---------------------------------------------------------------------------
// estimate

struct EstimateOptions {
  fs::path checkpoint_a;
  std::optional<fs::path> checkpoint_b;  // defaults to checkpoint_a
  GaussianMixtureSpec spec;              // validation data: seed + 1
  double temp = 0.1;
  std::optional<fs::path> out_dir;
};

inline constexpr std::string_view kEstimateHeader = "mi_cos_dv,mi_infonce,mi_jsd";

/// MI bounds between two saved encoders on the run's validation views.
inline MIEstimates run_estimate(const EstimateOptions& o, std::ostream& log) {
  o.spec.validate();
  const Temperature temp(o.temp);
  const EncoderParams a = parse_encoder_checkpoint(read_file(o.checkpoint_a));
  const EncoderParams b =
      o.checkpoint_b ? parse_encoder_checkpoint(read_file(*o.checkpoint_b)) : a;
  const Dataset val = generate_validation_dataset(o.spec);
  const PairedBatch views = make_paired_views(
      val, o.spec.tau, derive_seed(o.spec.seed, "validation-views"));
  const MIEstimates e = estimate_mi_epoch(a, b, views, temp);
  const std::string row = format_double(e.cos_dv) + ',' + format_double(e.infonce) +
                          ',' + format_double(e.jsd);
  if (o.out_dir) {
    ensure_dir(*o.out_dir);
    write_file(output_path(*o.out_dir, "estimate.csv"),
               std::string(kEstimateHeader) + '\n' + row + '\n');
  }
  log << kEstimateHeader << '\n' << row << '\n';
  return e;
}

// ---------------------------------------------------------------------------
// plot

struct PlotOptions {
  std::vector<fs::path> traces;
  std::vector<std::string> labels;  // defaults to the parent directory name
  std::optional<fs::path> trajectory;
  fs::path out_dir;
  std::string name = "mi.svg";
};

inline std::vector<fs::path> run_plot(const PlotOptions& o, std::ostream& log) {
  if (o.traces.empty()) throw UsageError("plot needs at least one --trace");
  if (!o.labels.empty() && o.labels.size() != o.traces.size()) {
    throw UsageError("--label must be given once per --trace");
  }
  const fs::path mi_path = output_path(o.out_dir, o.name);
  std::vector<NamedTrace> traces;
  for (std::size_t i = 0; i < o.traces.size(); ++i) {
    NamedTrace t;
    if (!o.labels.empty()) {
      t.name = o.labels[i];
    } else {
      const fs::path parent = o.traces[i].parent_path().filename();
      t.name = parent.empty() ? o.traces[i].stem().string() : parent.string();
    }
    try {
      t.rows = parse_trace_csv(read_file(o.traces[i]));
    } catch (const ParseError& e) {
      throw ParseError(o.traces[i].string() + ": " + e.message(), e.line());
    }
    traces.push_back(std::move(t));
  }
  ensure_dir(o.out_dir);
  std::vector<fs::path> written;
  write_file(mi_path, render_mi_svg(traces));
  written.push_back(mi_path);
  if (o.trajectory) {
    std::vector<Tensor> centers;
    try {
      centers = parse_trajectory_csv(read_file(*o.trajectory));
    } catch (const ParseError& e) {
      throw ParseError(o.trajectory->string() + ": " + e.message(), e.line());
    }
    const fs::path tp = output_path(o.out_dir, "trajectory.svg");
    write_file(tp, render_trajectory_svg(centers, o.trajectory->string()));
    written.push_back(tp);
  }
  for (const auto& p : written) log << "wrote " << p.string() << '\n';
  return written;
}

// ---------------------------------------------------------------------------
// report

struct TraceReport {
  std::string name;
  MITraceRow last;
  MonotonicityStats cos_dv, infonce, jsd;
};

struct ReportOptions {
  std::vector<fs::path> traces;
  std::optional<fs::path> out_dir;
};

inline constexpr std::string_view kReportHeader =
    "trace,epochs,mi_cos_dv,mi_infonce,mi_jsd,nn_gap_mean,mean_pairwise_cos,"
    "collapsed,cos_dv_decreasing,cos_dv_max_drop,infonce_decreasing,"
    "infonce_max_drop,jsd_decreasing,jsd_max_drop";

inline std::vector<TraceReport> run_report(const ReportOptions& o, std::ostream& log) {
  if (o.traces.empty()) throw UsageError("report needs at least one --trace");
  std::vector<TraceReport> out;
  std::string csv(kReportHeader);
  csv += '\n';
  auto opt = [](const std::optional<double>& v) {
    return v ? format_double(*v) : std::string();
  };
  for (const auto& path : o.traces) {
    std::vector<MITraceRow> rows;
    try {
      rows = parse_trace_csv(read_file(path));
    } catch (const ParseError& e) {
      throw ParseError(path.string() + ": " + e.message(), e.line());
    }
    if (rows.empty()) throw ParseError(path.string() + ": trace has no rows", 2);
    TraceReport r;
    r.name = path.string();
    r.last = rows.back();
    r.cos_dv = monotonicity(rows, &MITraceRow::mi_cos_dv);
    r.infonce = monotonicity(rows, &MITraceRow::mi_infonce);
    r.jsd = monotonicity(rows, &MITraceRow::mi_jsd);
    const bool collapsed = r.last.mean_pairwise_cos > kCollapseThreshold;
    log << r.name << ": epochs=" << rows.size() << " nn_gap=" << r.last.nn_gap.mean
        << " mean_pairwise_cos=" << r.last.mean_pairwise_cos
        << " collapsed=" << (collapsed ? "yes" : "no")
        << " decreasing(cos_dv/infonce/jsd)=" << r.cos_dv.decreasing << '/'
        << r.infonce.decreasing << '/' << r.jsd.decreasing << " of "
        << r.cos_dv.pairs << '\n';
    csv += r.name + ',' + std::to_string(rows.size()) + ',' + opt(r.last.mi_cos_dv) +
           ',' + opt(r.last.mi_infonce) + ',' + opt(r.last.mi_jsd) + ',' +
           format_double(r.last.nn_gap.mean) + ',' +
           format_double(r.last.mean_pairwise_cos) + ',' + (collapsed ? "yes" : "no");
    for (const auto* m : {&r.cos_dv, &r.infonce, &r.jsd}) {
      csv += ',' + std::to_string(m->decreasing) + ',' + format_double(m->max_drop);
    }
    csv += '\n';
    out.push_back(std::move(r));
  }
  if (o.out_dir) {
    ensure_dir(*o.out_dir);
    write_file(output_path(*o.out_dir, "report.csv"), csv);
  }
  return out;
}

}  // namespace mimax::cli
