// Command-line front-end: cost profiles, verification suites, operator
// benchmarks, toy training and kernel heat maps. Exit status 0 means every
// check the command ran passed.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "involution/grad_check.hpp"
#include "involution/harness/bench.hpp"
#include "involution/harness/heatmap.hpp"
#include "involution/harness/profile.hpp"
#include "involution/harness/suites.hpp"
#include "involution/harness/train.hpp"
#include "involution/rednet.hpp"

namespace fs = std::filesystem;
using namespace involution;
using namespace involution::harness;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  std::string out = ".";
  Tolerance tolerance;
};

// Flags shared by every command that builds a network.
struct ArchFlags {
  std::string op = "involution";
  std::string stem;  // empty: inv for involution, conv7 otherwise
  std::size_t kernel = 7;
  std::string group_channels = "16";
  std::size_t reduction = 4;
  std::string form = "bottleneck";
  bool softmax = false;

  void add_to(CLI::App* app) {
    app->add_option("--op", op, "Middle op: involution, conv, depthwise or attention")
        ->check(CLI::IsMember({"involution", "conv", "depthwise", "attention"}));
    app->add_option("--stem", stem, "Stem: inv or conv7")->check(CLI::IsMember({"inv", "conv7"}));
    app->add_option("--kernel", kernel, "Involution / attention window");
    app->add_option("--group-channels", group_channels, "Channels per kernel group, or C for one group");
    app->add_option("--reduction", reduction, "Reduction ratio of the kernel generator");
    app->add_option("--form", form, "Kernel generator: bottleneck (W1 relu(BN(W0 x))) or single (W x)")
        ->check(CLI::IsMember({"bottleneck", "single"}));
    app->add_flag("--softmax", softmax, "Softmax over the taps of every generated kernel or affinity");
  }

  MiddleOpConfig middle() const {
    MiddleOpConfig m;
    m.op = parse_middle_op(op);
    m.kernel = kernel;
    m.group_channels = group_channels == "C" ? 0 : std::stoul(group_channels);
    m.reduction = reduction;
    m.form = form == "single" ? KernelForm::kSingleLinear : KernelForm::kBottleneck;
    m.softmax = softmax;
    return m;
  }

  StemVariant stem_variant() const {
    if (!stem.empty()) return parse_stem(stem);
    return op == "involution" ? StemVariant::kInvolution : StemVariant::kConv7;
  }
};

std::vector<std::size_t> parse_sizes(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) out.push_back(std::stoul(item));
  return out;
}

std::vector<std::string> split(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) out.push_back(item);
  return out;
}

fs::path output_path(const Globals& g, const std::string& name) {
  fs::create_directories(g.out);
  return fs::path(g.out) / name;
}

void write_file(const fs::path& path, const std::string& contents) {
  std::ofstream os(path, std::ios::binary);
  os << contents;
  if (!os) throw std::runtime_error("cannot write " + path.string());
}

template <class F>
std::string render(F&& f) {
  std::ostringstream os;
  f(os);
  return os.str();
}

// ---------------------------------------------------------------------------

struct ProfileFlags {
  ArchFlags arch;
  std::size_t depth = 50;
  std::string convention = "framework";
  std::size_t input = 224;
  bool all = false;
};

int cmd_profile(const Globals& g, const ProfileFlags& f) {
  const MacConvention convention = parse_mac_convention(f.convention);
  std::vector<ProfileCheck> checks;
  if (f.all) {
    for (const ProfileTarget& t : all_targets()) checks.push_back(check_target(t, g.tolerance, convention));
  } else {
    RedNetOptions o;
    o.depth = f.depth;
    o.stem = f.arch.stem_variant();
    o.middle = f.arch.middle();
    const ArchSpec arch = build_rednet(o);
    const CostReport report = cost_report(arch, f.input, convention);
    write_file(output_path(g, "profile.csv"), render([&](std::ostream& os) { write_cost_csv(os, report); }));
    write_file(output_path(g, "arch.txt"), describe(arch));
    std::printf("%s: %.3fM params, %.3fG MACs at %zux%zu (%s)\n", arch.name.c_str(), report.total_params / 1e6,
                report.total_macs / 1e9, f.input, f.input, std::string(to_string(convention)).c_str());
    const auto target = find_target(arch);
    if (!target || f.input != 224) {
      std::printf("no published target for this configuration; nothing to check\n");
      return 0;
    }
    checks.push_back(check_target(*target, g.tolerance, convention));
  }
  write_file(output_path(g, "profile_checks.csv"),
             render([&](std::ostream& os) { write_profile_checks_csv(os, checks); }));
  bool ok = true;
  for (const ProfileCheck& c : checks) {
    std::printf("%-40s params %8.3fM (target %5.1fM, %+6.2f%%)  MACs %7.3fG (target %4.1fG, %+6.2f%%)  %s\n",
                c.label.c_str(), c.params / 1e6, c.params_target_m, c.params_err_pct, c.macs / 1e9, c.macs_target_g,
                c.macs_err_pct, c.pass() ? "PASS" : "FAIL");
    ok = ok && c.pass();
  }
  return ok ? 0 : 1;
}

int cmd_gradcheck(const Globals& g, const GradCheckOptions& opts) {
  const std::vector<GradCheckReport> reports = run_gradcheck_suite(g.seed, opts);
  write_file(output_path(g, "gradcheck.csv"), render([&](std::ostream& os) { write_gradcheck_csv(os, reports); }));
  bool ok = true;
  for (const GradCheckReport& r : reports) {
    std::printf("%-36s max_rel_err %.3e  %s\n", r.op.c_str(), r.max_rel_err, r.pass ? "PASS" : "FAIL");
    ok = ok && r.pass;
  }
  return ok ? 0 : 1;
}

int cmd_oracle(const Globals& g, const OracleOptions& opts) {
  const std::vector<OracleCheck> checks = run_oracle_suite(g.seed, opts);
  write_file(output_path(g, "oracle.csv"), render([&](std::ostream& os) { write_oracle_csv(os, checks); }));
  bool ok = true;
  for (const OracleCheck& c : checks) {
    std::printf("%-40s %4zu cases  %s %.3e (tol %.0e)  %s\n", c.name.c_str(), c.cases, c.metric.c_str(), c.value,
                c.tolerance, c.pass() ? "PASS" : "FAIL");
    ok = ok && c.pass();
  }
  return ok ? 0 : 1;
}

struct BenchFlags {
  std::string ops = "involution,conv3x3";
  std::string sizes = "56";
  BenchConfig config;
  std::string group_channels = "16";
  std::string convention = "framework";
};

int cmd_bench(const Globals& g, const BenchFlags& f) {
  std::vector<BenchResult> results;
  for (const std::string& op : split(f.ops)) {
    for (std::size_t size : parse_sizes(f.sizes)) {
      BenchConfig c = f.config;
      c.op = parse_bench_op(op);
      c.size = size;
      c.group_channels = f.group_channels == "C" ? 0 : std::stoul(f.group_channels);
      c.convention = parse_mac_convention(f.convention);
      results.push_back(run_bench(c, g.seed));
    }
  }
  write_file(output_path(g, "bench.csv"), render([&](std::ostream& os) { write_bench_csv(os, results); }));
  bool ok = true;
  for (const BenchResult& r : results) {
    const BenchConfig& c = r.config;
    if (r.verified) {
      std::printf("%-13s C=%zu H=W=%zu K=%zu G=%zu  median %.3f ms [p10 %.3f, p90 %.3f]  %.3f GMAC/s\n",
                  std::string(to_string(c.op)).c_str(), c.channels, c.size, c.window(), c.groups(), r.median_ms,
                  r.p10_ms, r.p90_ms, r.gmacs_per_s);
    } else {
      std::printf("%-13s C=%zu H=W=%zu: oracle mismatch %.3e, not timed\n", std::string(to_string(c.op)).c_str(),
                  c.channels, c.size, r.oracle_err);
    }
    ok = ok && r.verified;
  }
  return ok ? 0 : 1;
}

struct TrainFlags {
  ToyExperiment experiment;
  ArchFlags arch;
  double min_train_acc = 0.9;
  std::string save_weights;
};

int cmd_train_toy(const Globals& g, TrainFlags f) {
  f.experiment.train.seed = g.seed;
  f.experiment.middle = f.arch.middle();
  ToyOutcome out;
  try {
    out = run_toy_experiment(f.experiment);
  } catch (const TrainingDiverged& e) {
    std::fprintf(stderr, "train-toy: %s\n", e.what());
    return 3;
  }
  write_file(output_path(g, "train_metrics.csv"),
             render([&](std::ostream& os) { write_metrics_csv(os, out.rednet); }));
  if (!out.linear.empty()) {
    write_file(output_path(g, "baseline_metrics.csv"),
               render([&](std::ostream& os) { write_metrics_csv(os, out.linear); }));
  }
  if (!f.save_weights.empty()) {
    write_file(f.save_weights, render([&](std::ostream& os) { out.network->save(os); }));
  }
  const bool train_ok = out.final_train_acc() >= f.min_train_acc;
  std::printf("rednet-toy: train acc %.4f (need >= %.2f)  test acc %.4f\n", out.final_train_acc(), f.min_train_acc,
              out.final_test_acc());
  bool ok = train_ok;
  if (!out.linear.empty()) {
    const bool beats = out.final_test_acc() > out.baseline_test_acc();
    std::printf("linear baseline: train acc %.4f  test acc %.4f  -> rednet-toy %s\n", out.linear.back().train_acc,
                out.baseline_test_acc(), beats ? "ahead" : "NOT ahead");
    ok = ok && beats;
  }
  return ok ? 0 : 1;
}

struct HeatmapFlags {
  std::string layer = "conv2_1";
  std::string weights;
  std::string image;
  std::size_t sample = 0;
  ArchFlags arch;
  std::size_t classes = 4;
  std::optional<double> constant;
};

int cmd_heatmap(const Globals& g, const HeatmapFlags& f) {
  Network net(build_rednet_toy(f.arch.middle(), f.classes), g.seed);
  if (!f.weights.empty()) {
    std::ifstream is(f.weights);
    if (!is) throw std::runtime_error("cannot open " + f.weights);
    net.load(is);
  }
  net.set_mode(BnMode::kEval);
  Tensor image;
  if (!f.image.empty()) {
    std::ifstream is(f.image, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + f.image);
    image = read_ppm(is);
  } else {
    DatasetConfig dc;
    dc.samples = f.sample + 1;
    const SyntheticDataset data(dc, g.seed);
    image = data.gather({f.sample});
  }
  if (f.constant) force_constant_kernel(net, f.layer, *f.constant);
  const Tensor maps = kernel_heat_maps(net, image, f.layer);
  const std::string stem = "heatmap_" + f.layer;
  write_file(output_path(g, stem + ".csv"), render([&](std::ostream& os) { write_heatmap_csv(os, maps); }));
  for (std::size_t gi = 0; gi < maps.dim(0); ++gi) {
    write_file(output_path(g, stem + "_g" + std::to_string(gi) + ".pgm"), encode_pgm(maps, gi));
  }
  std::printf("%s: %zu maps of %zux%zu written to %s\n", f.layer.c_str(), maps.dim(0), maps.dim(1), maps.dim(2),
              g.out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Involution operators, RedNet cost model and verification harness"};
  app.require_subcommand(1);
  app.set_config("--config", "", "INI file with one [section] per subcommand");

  Globals g;
  app.add_option("--seed", g.seed, "Seed for every random stream")->capture_default_str();
  app.add_option("--out", g.out, "Output directory")->capture_default_str();
  app.add_option("--tolerance-params", g.tolerance.params_pct, "Allowed parameter deviation, percent")
      ->capture_default_str();
  app.add_option("--tolerance-macs", g.tolerance.macs_pct, "Allowed MAC deviation, percent")->capture_default_str();

  ProfileFlags pf;
  CLI::App* profile = app.add_subcommand("profile", "Parameter and MAC counts against published totals");
  pf.arch.add_to(profile);
  profile->add_option("--depth", pf.depth, "26, 38, 50, 101 or 152")->capture_default_str();
  profile->add_option("--convention", pf.convention, "MAC convention: framework or strict")
      ->check(CLI::IsMember({"framework", "strict"}));
  profile->add_option("--input", pf.input, "Input side, a multiple of 32")->capture_default_str();
  profile->add_flag("--all", pf.all, "Check every published architecture row");

  GradCheckOptions gco;
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "Central-difference check of every differentiable op");
  gradcheck->add_option("--eps", gco.eps, "Finite-difference step")->capture_default_str();
  gradcheck->add_option("--tol", gco.tol, "Largest allowed relative error")->capture_default_str();

  OracleOptions oo;
  CLI::App* oracle = app.add_subcommand("oracle", "Naive-loop oracles and structural properties");
  oracle->add_option("--configs", oo.random_configs, "Random configs per oracle comparison")->capture_default_str();
  oracle->add_option("--cases", oo.property_cases, "Cases per property test")->capture_default_str();
  oracle->add_option("--tol", oo.tolerance, "Oracle tolerance")->capture_default_str();

  BenchFlags bf;
  CLI::App* bench = app.add_subcommand("bench", "Verified operator timings");
  bench->add_option("--ops", bf.ops, "Comma list of involution, conv3x3, depthwise3x3, attention")
      ->capture_default_str();
  bench->add_option("--sizes", bf.sizes, "Comma list of spatial sides")->capture_default_str();
  bench->add_option("--batch", bf.config.batch)->capture_default_str();
  bench->add_option("--channels", bf.config.channels)->capture_default_str();
  bench->add_option("--kernel", bf.config.kernel, "Involution / attention window")->capture_default_str();
  bench->add_option("--group-channels", bf.group_channels, "Channels per group, or C")->capture_default_str();
  bench->add_option("--reduction", bf.config.reduction)->capture_default_str();
  bench->add_option("--reps", bf.config.reps, "Timed repetitions, at least 20")->capture_default_str();
  bench->add_option("--warmup", bf.config.warmup)->capture_default_str();
  bench->add_option("--convention", bf.convention)->check(CLI::IsMember({"framework", "strict"}));

  TrainFlags tf;
  CLI::App* train_toy = app.add_subcommand("train-toy", "Train RedNet-toy and a linear baseline on synthetic blobs");
  tf.arch.add_to(train_toy);
  TrainConfig& tc = tf.experiment.train;
  DatasetConfig& dc = tf.experiment.data;
  train_toy->add_option("--lr", tc.lr)->capture_default_str();
  train_toy->add_option("--momentum", tc.momentum)->capture_default_str();
  train_toy->add_option("--weight-decay", tc.weight_decay)->capture_default_str();
  train_toy->add_option("--epochs", tc.epochs)->capture_default_str();
  train_toy->add_option("--batch-size", tc.batch_size)->capture_default_str();
  train_toy->add_option("--label-smoothing", tc.label_smoothing)->capture_default_str();
  train_toy->add_option("--samples", dc.samples)->capture_default_str();
  train_toy->add_option("--test-samples", tf.experiment.test_samples)->capture_default_str();
  train_toy->add_option("--classes", dc.classes)->capture_default_str();
  train_toy->add_option("--jitter", dc.jitter, "Pattern offset range, pixels")->capture_default_str();
  train_toy->add_option("--noise", dc.noise, "Pixel noise standard deviation")->capture_default_str();
  train_toy->add_option("--min-train-acc", tf.min_train_acc)->capture_default_str();
  train_toy->add_flag("!--no-baseline", tf.experiment.baseline, "Skip the linear baseline");
  train_toy->add_option("--save-weights", tf.save_weights, "Write the trained network here");

  HeatmapFlags hf;
  CLI::App* heatmap = app.add_subcommand("heatmap", "Per-group kernel heat maps of one involution layer");
  hf.arch.add_to(heatmap);
  heatmap->add_option("--layer", hf.layer, "stem or convS_B")->capture_default_str();
  heatmap->add_option("--weights", hf.weights, "Network saved by train-toy --save-weights");
  heatmap->add_option("--image", hf.image, "Binary PPM input; default is a synthetic sample");
  heatmap->add_option("--sample", hf.sample, "Synthetic sample index")->capture_default_str();
  heatmap->add_option("--classes", hf.classes)->capture_default_str();
  heatmap->add_option("--force-constant", hf.constant, "Replace the layer's kernels by this constant");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*profile) return cmd_profile(g, pf);
    if (*gradcheck) return cmd_gradcheck(g, gco);
    if (*oracle) return cmd_oracle(g, oo);
    if (*bench) return cmd_bench(g, bf);
    if (*train_toy) return cmd_train_toy(g, tf);
    if (*heatmap) return cmd_heatmap(g, hf);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 2;
}
