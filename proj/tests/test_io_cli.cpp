// File formats, hashing, SVG output and the command layer.

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <regex>
#include <set>
#include <sstream>

#include "mimax/cli.hpp"
#include "mimax/hash.hpp"
#include "mimax/io.hpp"
#include "mimax/svg.hpp"
#include "test_util.hpp"

using namespace mimax;
using namespace mimax::testing;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("mimax_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

struct RunResult {
  int code = -1;
  std::string output;
};

// Runs the CLI with stdout and stderr captured together.
RunResult run_cli(const std::string& args) {
  const std::string cmd = std::string(MIMAX_CLI_PATH) + " " + args + " 2>&1";
  RunResult r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) r.output.append(buf, n);
  const int status = ::pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::vector<MITraceRow> sample_trace() {
  std::vector<MITraceRow> rows(3);
  for (std::size_t i = 0; i < 3; ++i) {
    rows[i].epoch = i + 1;
    rows[i].mi_cos_dv = 0.1 * static_cast<double>(i) + 1.0 / 3.0;
    rows[i].mi_infonce = -0.25 * static_cast<double>(i);
    rows[i].mi_jsd = 1e-17 * static_cast<double>(i + 1);
    rows[i].mean_pairwise_cos = 0.123456789012345678;
    rows[i].nn_gap = {45.0 + static_cast<double>(i), 10.5, 90.25, 3.0};
  }
  rows[0].mi_infonce.reset();
  return rows;
}

std::size_t count(const std::string& s, const std::string& needle) {
  std::size_t c = 0;
  for (std::size_t p = s.find(needle); p != std::string::npos; p = s.find(needle, p + 1)) ++c;
  return c;
}

cli::TrainOptions small_train(Method m, const fs::path& dir, std::size_t epochs = 2) {
  cli::TrainOptions o;
  o.cfg.method = m;
  o.cfg.epochs = epochs;
  o.cfg.full_batch = true;
  o.cfg.data.n_per_cluster = 15;
  o.out_dir = dir;
  return o;
}

}  // namespace

// ---------------------------------------------------------------------------
// CSV and checkpoints

TEST(TraceCsv, RoundTripsExactly) {
  const auto rows = sample_trace();
  const std::string text = trace_csv(rows);
  EXPECT_EQ(text.substr(0, text.find('\n')),
            "epoch,mi_cos_dv,mi_infonce,mi_jsd,mean_pairwise_cos,nn_gap_mean,nn_gap_min,"
            "nn_gap_max,nn_gap_sd");
  EXPECT_EQ(parse_trace_csv(text), rows);
  EXPECT_EQ(trace_csv(parse_trace_csv(text)), text);
}

TEST(TraceCsv, MalformedInputReportsTheLine) {
  const std::string good = trace_csv(sample_trace());
  auto line_of = [](const std::string& text) -> std::size_t {
    try {
      parse_trace_csv(text);
    } catch (const ParseError& e) {
      return e.line();
    }
    return 0;
  };
  EXPECT_EQ(line_of("epoch,mi\n1,2\n"), 1u);
  std::string bad = good;
  bad.replace(bad.find("\n2,") + 1, 1, "x");
  EXPECT_EQ(line_of(bad), 3u);
  EXPECT_EQ(line_of(good + "3,1,1,1,0,1,1,1,1\n"), 5u);  // epoch not increasing
  EXPECT_EQ(line_of(good + "9,1,1,1,0,200,1,1,1\n"), 5u);
  EXPECT_EQ(line_of(good + "9,1,1\n"), 5u);
  EXPECT_EQ(line_of(""), 1u);
}

TEST(TrajectoryCsv, RoundTripAndValidation) {
  const std::vector<Tensor> c = {Tensor::matrix({{1, 0, 0}, {0, 0.6, 0.8}}),
                                 Tensor::matrix({{0, 1, 0}, {0, 0, -1}})};
  const std::string text = trajectory_csv(c);
  EXPECT_EQ(text.substr(0, text.find('\n')), "epoch,cluster,z0,z1,z2");
  EXPECT_EQ(parse_trajectory_csv(text), c);
  EXPECT_THROW(parse_trajectory_csv("epoch,cluster,z0,z1,z2\n0,0,2,0,0\n"), ParseError);
  EXPECT_THROW(parse_trajectory_csv("epoch,cluster,z0,z1,z2\n0,1,1,0,0\n"), ParseError);
}

TEST(DatasetCsv, RoundTripsBitExactly) {
  GaussianMixtureSpec spec;
  spec.n_per_cluster = 30;
  const Dataset d = generate_dataset(spec);
  const Dataset back = parse_dataset_csv(dataset_csv(d));
  EXPECT_EQ(back.x, d.x);
  EXPECT_EQ(back.labels, d.labels);
  EXPECT_THROW(parse_dataset_csv("x0,x1,label\n1,2\n"), ParseError);
}

TEST(Checkpoint, RoundTripsEncoderAndPredictor) {
  Rng rng(1);
  EncoderParams p = init_encoder(rng);
  p.bn1.running_mean[3] = 1.0 / 3.0;
  p.bn2.momentum = 0.25;
  EXPECT_EQ(parse_encoder_checkpoint(encoder_checkpoint(p)), p);
  const PredictorParams q = init_predictor(rng, 7);
  EXPECT_EQ(parse_predictor_checkpoint(predictor_checkpoint(q)), q);
  EXPECT_THROW(parse_predictor_checkpoint(encoder_checkpoint(p)), ParseError);
  std::string cut = encoder_checkpoint(p);
  cut.resize(cut.size() / 2);
  EXPECT_THROW(parse_encoder_checkpoint(cut), ParseError);
  EXPECT_THROW(parse_encoder_checkpoint("garbage\n"), ParseError);
}

TEST(Files, ErrorsNameThePath) {
  try {
    read_file("/nonexistent/dir/file.csv");
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/dir/file.csv"), std::string::npos);
  }
}

// ---------------------------------------------------------------------------
// Hash

TEST(GitBlobHash, KnownValues) {
  EXPECT_EQ(git_blob_hash(""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
  EXPECT_EQ(git_blob_hash("hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
}

TEST(GitBlobHash, AgreesWithGitHashObject) {
  if (std::system("git --version > /dev/null 2>&1") != 0) GTEST_SKIP() << "git not found";
  TempDir dir;
  GaussianMixtureSpec spec;
  spec.n_per_cluster = 40;
  const std::string text = dataset_csv(generate_dataset(spec));
  write_file(dir / "d.csv", text);
  FILE* pipe = ::popen(("git hash-object " + (dir / "d.csv").string()).c_str(), "r");
  ASSERT_NE(pipe, nullptr);
  char buf[64] = {};
  ASSERT_NE(std::fgets(buf, sizeof buf, pipe), nullptr);
  ::pclose(pipe);
  EXPECT_EQ(std::string(buf).substr(0, 40), git_blob_hash(text));
}

// ---------------------------------------------------------------------------
// SVG

TEST(Svg, OnePolylinePerEstimatorPerTrace) {
  const std::vector<NamedTrace> t = {{"a", sample_trace()}, {"b<&>", sample_trace()}};
  const std::string svg = render_mi_svg(t);
  EXPECT_EQ(count(svg, "<polyline class=\"mi\""), 6u);
  EXPECT_EQ(count(svg, "data-estimator=\"jsd\""), 2u);
  EXPECT_NE(svg.find("b&lt;&amp;&gt;"), std::string::npos);
  EXPECT_EQ(svg, render_mi_svg(t));
  EXPECT_THROW(render_mi_svg({}), ConfigError);
}

TEST(Svg, MissingValuesAreSkipped) {
  const std::string svg = render_mi_svg({{"a", sample_trace()}});
  const std::regex re("data-estimator=\"infonce\"[^>]*points=\"([^\"]*)\"");
  std::smatch m;
  ASSERT_TRUE(std::regex_search(svg, m, re));
  EXPECT_EQ(count(m[1].str(), ","), 2u);
}

TEST(Svg, TrajectoryHasOnePathPerCluster) {
  const std::vector<Tensor> c = {Tensor::matrix({{1, 0, 0}, {0, 1, 0}, {0, 0, -1}}),
                                 Tensor::matrix({{0, 1, 0}, {1, 0, 0}, {0, 0.6, -0.8}})};
  const std::string svg = render_trajectory_svg(c, "run");
  EXPECT_EQ(count(svg, "class=\"trajectory\""), 3u);
  EXPECT_EQ(count(svg, "fill=\"white\" stroke="), 1u);  // one far-side marker
  EXPECT_EQ(svg, render_trajectory_svg(c, "run"));
}

// ---------------------------------------------------------------------------
// Command layer

TEST(OutputPath, StaysInsideTheDirectory) {
  EXPECT_EQ(cli::output_path("out", "a/b.csv"), fs::path("out/a/b.csv"));
  EXPECT_THROW(cli::output_path("out", "../x"), cli::UsageError);
  EXPECT_THROW(cli::output_path("out", "/etc/x"), cli::UsageError);
  EXPECT_THROW(cli::output_path("out", ""), cli::UsageError);
}

TEST(GenData, DeterministicHashesAndDegenerateNoise) {
  TempDir a, b;
  std::ostringstream log;
  const auto ra = cli::run_gen_data({GaussianMixtureSpec{}, a.path()}, log);
  const auto rb = cli::run_gen_data({GaussianMixtureSpec{}, b.path()}, log);
  EXPECT_EQ(ra.dataset_hash, rb.dataset_hash);
  EXPECT_EQ(ra.dataset_hash, git_blob_hash(read_file(a / "dataset.csv")));
  EXPECT_EQ(parse_dataset_csv(read_file(a / "dataset.csv")).labels.size(), 2500u);
  EXPECT_NE(ra.dataset_hash, ra.validation_hash);

  TempDir z;
  GaussianMixtureSpec spec;
  spec.sigma = 0.0;
  spec.tau = 0.0;
  cli::run_gen_data({spec, z.path()}, log);
  const Dataset d = parse_dataset_csv(read_file(z / "dataset.csv"));
  std::set<std::pair<double, double>> distinct;
  for (std::size_t i = 0; i < d.labels.size(); ++i) distinct.insert({d.x.at(i, 0), d.x.at(i, 1)});
  EXPECT_EQ(distinct.size(), 5u);
}

TEST(Train, ManifestNamesExistingOutputs) {
  TempDir dir;
  std::ostringstream log;
  auto o = small_train(Method::kSdmi, dir.path(), 3);
  o.checkpoint_every = 2;
  const cli::TrainResult r = cli::run_train(o, log);
  const auto manifest = nlohmann::json::parse(read_file(dir / "manifest.json"));
  EXPECT_EQ(manifest["status"], "complete");
  EXPECT_EQ(manifest["config"]["method"], "sdmi");
  EXPECT_EQ(manifest["config"]["epochs"], 3);
  EXPECT_EQ(manifest["version"], std::string(cli::kToolVersion));
  EXPECT_GE(manifest["wall_clock_seconds"].get<double>(), 0.0);
  EXPECT_EQ(manifest["dataset"]["hash"].get<std::string>().size(), 40u);
  std::set<std::string> outputs;
  for (const auto& p : manifest["outputs"]) {
    outputs.insert(p.get<std::string>());
    EXPECT_TRUE(fs::exists(dir / p.get<std::string>())) << p;
  }
  for (const char* f : {"trace.csv", "trajectory.csv", "trajectory_second.csv", "summary.txt",
                        "checkpoints/final_f.ckpt", "checkpoints/final_g.ckpt",
                        "checkpoints/epoch_0002_f.ckpt", "checkpoints/epoch_0002_g.ckpt"})
    EXPECT_TRUE(outputs.count(f)) << f;
  EXPECT_FALSE(outputs.count("checkpoints/epoch_0001_f.ckpt"));
  EXPECT_EQ(parse_trace_csv(read_file(dir / "trace.csv")), r.output.trace);
  EXPECT_NE(log.str().find("collapsed="), std::string::npos);
}

TEST(Train, LoadedDatasetMatchesGenerated) {
  TempDir data, a, b;
  std::ostringstream log;
  GaussianMixtureSpec spec;
  spec.n_per_cluster = 15;
  cli::run_gen_data({spec, data.path()}, log);
  auto oa = small_train(Method::kJmi, a.path());
  auto ob = small_train(Method::kJmi, b.path());
  ob.dataset = data / "dataset.csv";
  ob.validation = data / "validation.csv";
  cli::run_train(oa, log);
  cli::run_train(ob, log);
  EXPECT_EQ(read_file(a / "trace.csv"), read_file(b / "trace.csv"));
  const auto ma = nlohmann::json::parse(read_file(a / "manifest.json"));
  const auto mb = nlohmann::json::parse(read_file(b / "manifest.json"));
  EXPECT_EQ(ma["dataset"]["hash"], mb["dataset"]["hash"]);
}

TEST(Train, FailedRunMarksTheManifest) {
  TempDir dir;
  write_file(dir / "bad.csv", "x0,x1,label\n1,2,0\n");
  std::ostringstream log;
  auto o = small_train(Method::kJmi, dir / "run");
  o.dataset = dir / "bad.csv";
  EXPECT_ANY_THROW(cli::run_train(o, log));
  const auto m = nlohmann::json::parse(read_file(dir / "run" / "manifest.json"));
  EXPECT_EQ(m["status"], "failed");
}

TEST(Estimate, ReproducesTheLastTraceRow) {
  TempDir dir;
  std::ostringstream log;
  auto o = small_train(Method::kSdmi, dir.path());
  const auto r = cli::run_train(o, log);
  cli::EstimateOptions e;
  e.checkpoint_a = dir / "checkpoints/final_f.ckpt";
  e.checkpoint_b = dir / "checkpoints/final_g.ckpt";
  e.spec = o.cfg.data_spec();
  e.temp = o.cfg.temp;
  e.out_dir = dir / "est";
  const MIEstimates m = cli::run_estimate(e, log);
  EXPECT_EQ(m.cos_dv, *r.output.trace.back().mi_cos_dv);
  EXPECT_EQ(m.infonce, *r.output.trace.back().mi_infonce);
  EXPECT_EQ(m.jsd, *r.output.trace.back().mi_jsd);
  EXPECT_TRUE(fs::exists(dir / "est" / "estimate.csv"));
}

TEST(Ablate, SuitesAndTable) {
  EXPECT_EQ(cli::ablation_suite("predictor").size(), 6u);
  EXPECT_EQ(cli::ablation_suite("all").size(), 8u);
  EXPECT_THROW(cli::ablation_suite("bogus"), cli::UsageError);
  TempDir dir;
  std::ostringstream log;
  cli::AblateOptions o;
  o.base = small_train(Method::kSdmi, dir.path(), 1).cfg;
  o.out_dir = dir.path();
  const auto rows = cli::run_ablate(o, log);
  ASSERT_EQ(rows.size(), 6u);
  const std::string csv = read_file(dir / "ablation.csv");
  const auto lines = split_lines(csv);
  ASSERT_EQ(lines.size(), 7u);
  EXPECT_EQ(lines[0], cli::kAblationHeader);
  const char* order[] = {"sdmi", "sdmi-nodv", "sdmi-nodv-pred", "simsiam", "simsiam-nopred",
                         "simsiam-sdmi"};
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(lines[i + 1].substr(0, lines[i + 1].find(',')), order[i]);
    EXPECT_TRUE(fs::exists(dir / order[i] / "trace.csv"));
  }
  EXPECT_TRUE(fs::exists(dir / "ablation.txt"));
}

TEST(PlotAndReport, WriteInsideOutDir) {
  TempDir dir;
  write_file(dir / "t.csv", trace_csv(sample_trace()));
  std::ostringstream log;
  cli::PlotOptions p;
  p.traces = {dir / "t.csv"};
  p.out_dir = dir / "plots";
  p.name = "curves.svg";
  const auto written = cli::run_plot(p, log);
  ASSERT_EQ(written.size(), 1u);
  EXPECT_EQ(written[0], dir / "plots" / "curves.svg");
  const std::string first = read_file(written[0]);
  cli::run_plot(p, log);
  EXPECT_EQ(read_file(written[0]), first);

  cli::ReportOptions r;
  r.traces = {dir / "t.csv"};
  r.out_dir = dir / "rep";
  const auto reports = cli::run_report(r, log);
  ASSERT_EQ(reports.size(), 1u);
  EXPECT_EQ(reports[0].cos_dv.decreasing, 0u);
  EXPECT_EQ(reports[0].infonce.pairs, 1u);
  EXPECT_TRUE(fs::exists(dir / "rep" / "report.csv"));
}

// ---------------------------------------------------------------------------
// Executable

TEST(Executable, HelpListsDefaults) {
  const RunResult train = run_cli("train --help");
  EXPECT_EQ(train.code, 0);
  for (const char* d : {"--epochs UINT [100]", "--batch-size UINT [500]", "--temp FLOAT [0.1]",
                        "--ema-tau FLOAT [0.996]", "--lr FLOAT [0.5]", "--sigma FLOAT [0.05]",
                        "--tau FLOAT [0.1]", "--n-per-cluster UINT [500]", "--seed UINT [0]",
                        "--bn-momentum FLOAT [0.1]", "--predictor-hidden UINT [16]",
                        "--method TEXT [sdmi]", "--full-batch [false]"})
    EXPECT_NE(train.output.find(d), std::string::npos) << d;
  for (const char* sub : {"gen-data", "ablate", "estimate", "plot", "report"}) {
    const RunResult r = run_cli(std::string(sub) + " --help");
    EXPECT_EQ(r.code, 0) << sub;
  }
  EXPECT_NE(run_cli("ablate --help").output.find("--suite TEXT:{predictor,all} [predictor]"),
            std::string::npos);
  EXPECT_NE(run_cli("gen-data --help").output.find("--n-per-cluster UINT [500]"),
            std::string::npos);
}

TEST(Executable, ExitCodes) {
  TempDir dir;
  const std::string out = " --out-dir " + dir.path().string();
  const RunResult bad_method = run_cli("train --method moco" + out);
  EXPECT_EQ(bad_method.code, cli::kExitUsage);
  EXPECT_NE(bad_method.output.find("sdmi, jmi, simsiam, byol"), std::string::npos);
  EXPECT_EQ(run_cli("frobnicate").code, cli::kExitUsage);
  EXPECT_EQ(run_cli("train --no-such-flag").code, cli::kExitUsage);
  EXPECT_EQ(run_cli("train --epochs 0" + out).code, cli::kExitValidation);
  EXPECT_EQ(run_cli("gen-data --sigma -1" + out).code, cli::kExitValidation);
  write_file(dir / "bad.csv", "epoch,mi_cos_dv\n1,2\n");
  const RunResult malformed = run_cli("report --trace " + (dir / "bad.csv").string());
  EXPECT_EQ(malformed.code, cli::kExitValidation);
  EXPECT_NE(malformed.output.find("line 1"), std::string::npos);
  EXPECT_EQ(run_cli("plot" + out).code, cli::kExitUsage);
  EXPECT_EQ(run_cli("report --trace " + (dir / "missing.csv").string()).code,
            cli::kExitRuntime);
  EXPECT_EQ(run_cli("plot --trace x.csv --out ../escape.svg" + out).code, cli::kExitUsage);
}

TEST(Executable, ConfigFileLayering) {
  TempDir dir;
  write_file(dir / "run.cfg", "epochs = 1\nfull_batch = true\nn_per_cluster = 12\nlr = 0.3\n");
  const RunResult r = run_cli("train --method jmi --config " + (dir / "run.cfg").string() +
                              " --lr 0.2 --out-dir " + (dir / "out").string());
  ASSERT_EQ(r.code, 0) << r.output;
  const auto m = nlohmann::json::parse(read_file(dir / "out" / "manifest.json"));
  EXPECT_EQ(m["config"]["epochs"], 1);
  EXPECT_EQ(m["config"]["full_batch"], true);
  EXPECT_EQ(m["config"]["data"]["n_per_cluster"], 12);
  EXPECT_EQ(m["config"]["lr"], 0.2);
  write_file(dir / "bad.cfg", "epochz = 1\n");
  EXPECT_EQ(run_cli("train --config " + (dir / "bad.cfg").string()).code, cli::kExitUsage);
}

TEST(Executable, WritesOnlyInsideOutDir) {
  TempDir dir;
  const fs::path out = dir / "out";
  const RunResult r = run_cli("train --method sdmi-nodv --epochs 1 --full-batch "
                              "--n-per-cluster 10 --out-dir " + out.string());
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("sdmi-nodv: epochs=1"), std::string::npos);
  std::vector<fs::path> top;
  for (const auto& e : fs::directory_iterator(dir.path())) top.push_back(e.path());
  EXPECT_EQ(top, std::vector<fs::path>{out});
}
