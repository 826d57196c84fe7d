#include "specprune/cli.hpp"

#include <chrono>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "specprune/bounds.hpp"
#include "specprune/error.hpp"

namespace specprune {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Options {
  std::string command;
  std::string out;
  std::string model;
  std::string compare;
  std::uint64_t seed = 1;

  std::string arch = "784:d300:d1000:d300:d10";
  std::string activation = "relu";
  double slope = 0.01;
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  double learning_rate = 0.05;
  double weight_decay = 0.0;
  std::string loss = "ce";

  std::string data = "mnist";
  std::string images = "data/mnist/train-images-idx3-ubyte";
  std::string labels = "data/mnist/train-labels-idx1-ubyte";
  std::string test_images = "data/mnist/t10k-images-idx3-ubyte";
  std::string test_labels = "data/mnist/t10k-labels-idx1-ubyte";
  std::size_t limit = 0;
  std::size_t test_limit = 0;
  std::size_t synth_n = 2000;
  std::size_t synth_test_n = 1000;
  std::size_t synth_dim = 784;
  double synth_decay = 0.5;
  std::size_t synth_outputs = 10;
  bool synth_classify = false;
  std::uint64_t data_seed = 1;

  std::string layers;
  std::string widths;
  double theta = 0.5;
  double lambda_coef = 1e-6;
  std::string procedure = "backward";
  bool no_budget_constraint = false;
  double tau_scalar = 0.0;
  double t = 1.0;
  double c1 = 1.0;
  double big_c1 = 1.0;
  double truncation = std::numeric_limits<double>::infinity();

  std::size_t profile_points = 20;
  std::string sweep = "theta";
  std::string values;

  bool lambda_given = false;
  bool tau_given = false;
  std::string config_snapshot;
};

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> parts;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, sep)) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) parts.push_back(item.substr(b, e - b + 1));
  }
  return parts;
}

std::size_t parse_count(const std::string& s) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != s.size() || s.empty() || s[0] == '-') throw Error(ErrorCode::InvalidArgument, "expected a count, got '" + s + "'");
  return static_cast<std::size_t>(v);
}

double parse_real(const std::string& s) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != s.size() || s.empty()) throw Error(ErrorCode::InvalidArgument, "expected a number, got '" + s + "'");
  return v;
}

std::vector<std::size_t> parse_layers(const std::string& text) {
  std::vector<std::size_t> out;
  for (const auto& p : split(text, ',')) out.push_back(parse_count(p));
  return out;
}

// "4:150,3:500", or plain widths aligned with `layers`.
std::map<std::size_t, std::size_t> parse_widths(const std::string& text, const std::vector<std::size_t>& layers) {
  std::map<std::size_t, std::size_t> out;
  const auto parts = split(text, ',');
  std::size_t plain = 0;
  for (const auto& p : parts) {
    const auto colon = p.find(':');
    if (colon != std::string::npos) {
      out[parse_count(p.substr(0, colon))] = parse_count(p.substr(colon + 1));
    } else {
      if (plain >= layers.size())
        throw Error(ErrorCode::InvalidArgument, "plain widths need a matching --layers entry; use layer:width");
      out[layers[plain++]] = parse_count(p);
    }
  }
  return out;
}

struct Data {
  Dataset train;
  std::optional<Dataset> test;
};

Data load_data(const Options& o) {
  Data d;
  if (o.data == "mnist") {
    const std::size_t all = std::numeric_limits<std::size_t>::max();
    d.train = load_idx(o.images, o.labels, o.limit ? o.limit : all);
    if (!o.test_images.empty() && fs::exists(o.test_images) && fs::exists(o.test_labels))
      d.test = load_idx(o.test_images, o.test_labels, o.test_limit ? o.test_limit : all);
  } else if (o.data == "synth") {
    SynthConfig sc;
    sc.n = o.synth_n;
    sc.dim = o.synth_dim;
    sc.decay = o.synth_decay;
    sc.seed = o.data_seed;
    sc.outputs = o.synth_outputs;
    sc.classify = o.synth_classify;
    d.train = synth_spectrum(sc);
    if (o.synth_test_n > 0) {
      sc.n = o.synth_test_n;
      sc.draw = 1;
      d.test = synth_spectrum(sc);
    }
  } else {
    throw Error(ErrorCode::InvalidArgument, "unknown data source '" + o.data + "' (mnist or synth)");
  }
  return d;
}

fs::path require_out(const Options& o) {
  if (o.out.empty()) throw Error(ErrorCode::InvalidArgument, "--out is required for " + o.command);
  fs::create_directories(o.out);
  return o.out;
}

Network require_model(const Options& o) {
  if (o.model.empty()) throw Error(ErrorCode::InvalidArgument, "--model is required for " + o.command);
  return load_network(o.model);
}

PruneConfig prune_config(const Options& o) {
  PruneConfig cfg;
  cfg.theta = o.theta;
  cfg.layers = parse_layers(o.layers);
  cfg.widths = parse_widths(o.widths, cfg.layers);
  if (o.lambda_given || cfg.widths.empty()) cfg.lambda_coef = o.lambda_coef;
  cfg.procedure = parse_procedure(o.procedure);
  cfg.budget_constraint = !o.no_budget_constraint;
  if (o.tau_given) cfg.tau = TauPolicy::scalar(o.tau_scalar);
  cfg.validate();
  return cfg;
}

BoundConfig bound_config(const Options& o, const PruneConfig& pc) {
  BoundConfig bc;
  bc.theta = pc.theta;
  bc.procedure = pc.procedure;
  bc.t = o.t;
  bc.c1 = o.c1;
  bc.big_c1 = o.big_c1;
  bc.truncation = o.truncation;
  bc.loss = parse_loss(o.loss);
  return bc;
}

json metrics_for(const Network& net, const Data& d, LossKind loss) {
  json m;
  const Matrix train_out = forward_batch(net, d.train.inputs);
  m["train_loss"] = mean_loss(train_out, d.train.targets, loss);
  m["train_output_norm"] = std::sqrt(train_out.squaredNorm() / static_cast<double>(d.train.size()));
  if (loss == LossKind::SoftmaxCrossEntropy) m["train_accuracy"] = accuracy(train_out, d.train.targets);
  if (d.test) {
    const Matrix test_out = forward_batch(net, d.test->inputs);
    m["test_loss"] = mean_loss(test_out, d.test->targets, loss);
    if (loss == LossKind::SoftmaxCrossEntropy) m["test_accuracy"] = accuracy(test_out, d.test->targets);
  }
  m["parameters"] = net.parameter_count();
  return m;
}

void write_manifest(const Options& o, const fs::path& dir, const json& outputs, double seconds) {
  json run;
  run["command"] = o.command;
  run["config"] = o.config_snapshot;
  run["seeds"] = {{"seed", o.seed}, {"data_seed", o.data_seed}};
  run["inputs"] = {{"model", o.model}, {"data", o.data}, {"images", o.images}, {"labels", o.labels}};
  run["outputs"] = outputs;
  run["tool_version"] = kToolVersion;
  run["wall_clock_seconds"] = seconds;
  write_json(dir / "run.json", run);
}

using Clock = std::chrono::steady_clock;
double since(Clock::time_point start) { return std::chrono::duration<double>(Clock::now() - start).count(); }

int cmd_train(const Options& o, std::ostream& out) {
  const auto start = Clock::now();
  const fs::path dir = require_out(o);
  const Data d = load_data(o);
  const Architecture arch = parse_architecture(o.arch);
  if (arch.input_dim() != static_cast<std::size_t>(d.train.inputs.cols()))
    throw Error(ErrorCode::ShapeMismatch, "architecture input " + std::to_string(arch.input_dim()) + " vs data dim " +
                                              std::to_string(d.train.inputs.cols()));
  const Network init = init_network(arch, Activation::parse(o.activation, o.slope), o.seed);
  TrainConfig tc;
  tc.epochs = o.epochs;
  tc.batch_size = o.batch_size;
  tc.learning_rate = o.learning_rate;
  tc.weight_decay = o.weight_decay;
  tc.seed = o.seed;
  tc.loss = parse_loss(o.loss);
  const TrainResult result = train(init, d.train, tc);
  save_network(result.net, dir);
  json metrics = metrics_for(result.net, d, tc.loss);
  metrics["epoch_losses"] = result.epoch_losses;
  write_json(dir / "metrics.json", metrics);
  write_manifest(o, dir, {{"model", dir.string()}, {"metrics", (dir / "metrics.json").string()}}, since(start));
  out << "trained " << o.arch << " for " << o.epochs << " epochs, loss " << format_double(result.final_loss) << "\n";
  return kExitOk;
}

int cmd_spectrum(const Options& o, std::ostream& out) {
  const auto start = Clock::now();
  const fs::path dir = require_out(o);
  const Network net = require_model(o);
  const Data d = load_data(o);
  std::vector<std::size_t> layers = parse_layers(o.layers);
  if (layers.empty())
    for (std::size_t l = 2; l <= net.depth(); ++l) layers.push_back(l);
  json summary = json::array();
  json files = json::array();
  for (auto l : layers) {
    if (l < 2 || l > net.depth())
      throw Error(ErrorCode::IndexOutOfRange, "layer " + std::to_string(l) + " outside [2, " + std::to_string(net.depth()) + "]");
    const bool channels =
        net.weight_layer(l - 1).kind == LayerKind::Conv2d && net.weight_layer(l).kind == LayerKind::Conv2d;
    const LayerCovariance cov = channels ? channel_cov(net, d.train, l) : layer_cov(net, d.train, l);
    const std::string eig_name = "spectrum_layer" + std::to_string(l) + ".csv";
    const std::string dof_name = "dof_layer" + std::to_string(l) + ".csv";
    eigen_report(cov).save(dir / eig_name);
    dof_profile_csv(dof_profile(cov, o.profile_points)).save(dir / dof_name);
    summary.push_back({{"layer", l},
                       {"dim", cov.dim()},
                       {"trace", cov.trace()},
                       {"rank", numerical_rank(cov)},
                       {"dof_1e-3", dof(cov, 1e-3 * cov.trace())},
                       {"dof_1e-6", dof(cov, 1e-6 * cov.trace())}});
    files.push_back(eig_name);
    files.push_back(dof_name);
    out << "layer " << l << ": rank " << numerical_rank(cov) << " of " << cov.dim() << "\n";
  }
  write_json(dir / "spectrum.json", summary);
  write_manifest(o, dir, {{"files", files}}, since(start));
  return kExitOk;
}

json selections_json(const PruneOutcome& outcome, const PruneConfig& cfg) {
  json sel;
  sel["theta"] = cfg.theta;
  sel["procedure"] = procedure_name(cfg.procedure);
  sel["budget_constraint"] = cfg.budget_constraint;
  sel["infeasible"] = outcome.infeasible;
  json layers = json::array();
  for (const auto& lp : outcome.layers) layers.push_back(to_json(lp.selection));
  sel["layers"] = layers;
  return sel;
}

bool dense_only(const Network& net) {
  for (const auto& layer : net.layers())
    if (layer.kind != LayerKind::Dense) return false;
  return true;
}

int cmd_prune(const Options& o, std::ostream& out) {
  const auto start = Clock::now();
  const fs::path dir = require_out(o);
  const Network net = require_model(o);
  const Data d = load_data(o);
  const PruneConfig cfg = prune_config(o);
  const PruneOutcome outcome = prune(net, d.train, cfg);
  save_network(outcome.compressed, dir);
  write_json(dir / "selection.json", selections_json(outcome, cfg));

  const LossKind loss = parse_loss(o.loss);
  json metrics;
  metrics["original"] = metrics_for(net, d, loss);
  metrics["compressed"] = metrics_for(outcome.compressed, d, loss);
  metrics["compression_error"] = compression_error(net, outcome.compressed, d.train);
  metrics["relative_error"] = relative_compression_error(net, outcome.compressed, d.train);
  write_json(dir / "metrics.json", metrics);

  json outputs = {{"model", dir.string()}, {"selection", (dir / "selection.json").string()}};
  if (dense_only(net)) {
    const BoundReport rep = bound_report(net, outcome, d.train, bound_config(o, cfg));
    write_json(dir / "report.json", to_json(rep));
    bound_csv(rep).save(dir / "report.csv");
    outputs["report"] = (dir / "report.json").string();
    for (auto l : rep.warnings) out << "warning: zeta exceeds 1 at layer " << l << "\n";
  }
  write_manifest(o, dir, outputs, since(start));
  for (const auto& lp : outcome.layers)
    out << "layer " << lp.selection.layer << ": kept " << lp.selection.selected.size() << " of " << lp.selection.width
        << (lp.selection.infeasible ? " (budget constraint infeasible)" : "") << "\n";
  out << "relative error " << format_double(metrics["relative_error"].get<double>()) << "\n";
  return outcome.infeasible ? kExitInfeasible : kExitOk;
}

int cmd_eval(const Options& o, std::ostream& out) {
  const Network net = require_model(o);
  const Data d = load_data(o);
  json metrics = metrics_for(net, d, parse_loss(o.loss));
  if (!o.compare.empty()) {
    const Network other = load_network(o.compare);
    metrics["compression_error"] = compression_error(net, other, d.train);
    metrics["relative_error"] = relative_compression_error(net, other, d.train);
  }
  if (!o.out.empty()) {
    const fs::path dir = require_out(o);
    write_json(dir / "eval.json", metrics);
  }
  out << metrics.dump(2) << "\n";
  return kExitOk;
}

int cmd_sweep(const Options& o, std::ostream& out) {
  const auto start = Clock::now();
  const fs::path dir = require_out(o);
  const Network net = require_model(o);
  const Data d = load_data(o);
  const LossKind loss = parse_loss(o.loss);
  const PruneConfig base = prune_config(o);
  bool infeasible = false;

  CsvWriter csv({"sweep", "value", "layer", "width", "lambda", "theta", "loss_input", "loss_output", "relative_error",
                 "train_accuracy", "test_accuracy"});
  const auto values = split(o.values, ',');
  if (values.empty()) throw Error(ErrorCode::InvalidArgument, "--values is empty");
  for (const auto& v : values) {
    PruneConfig cfg = base;
    if (o.sweep == "theta") {
      cfg.theta = parse_real(v);
    } else if (o.sweep == "width") {
      if (cfg.layers.size() != 1) throw Error(ErrorCode::InvalidArgument, "width sweep needs exactly one --layers entry");
      cfg.widths = {{cfg.layers.front(), parse_count(v)}};
      if (!o.lambda_given) cfg.lambda_coef.reset();
    } else {
      throw Error(ErrorCode::InvalidArgument, "unknown sweep '" + o.sweep + "' (theta or width)");
    }
    const PruneOutcome outcome = prune(net, d.train, cfg);
    infeasible = infeasible || outcome.infeasible;
    const double rel = relative_compression_error(net, outcome.compressed, d.train);
    std::string train_acc, test_acc;
    if (loss == LossKind::SoftmaxCrossEntropy) {
      train_acc = format_double(accuracy(forward_batch(outcome.compressed, d.train.inputs), d.train.targets));
      if (d.test) test_acc = format_double(accuracy(forward_batch(outcome.compressed, d.test->inputs), d.test->targets));
    }
    for (const auto& lp : outcome.layers) {
      const auto& s = lp.selection;
      csv.add_row({o.sweep, v, std::to_string(s.layer), std::to_string(s.selected.size()), format_double(s.lambda),
                   format_double(s.theta), format_double(s.losses.input), format_double(s.losses.output),
                   format_double(rel), train_acc, test_acc});
    }
    out << o.sweep << " " << v << ": relative error " << format_double(rel) << "\n";
  }
  csv.save(dir / "sweep.csv");
  write_manifest(o, dir, {{"sweep", (dir / "sweep.csv").string()}}, since(start));
  return infeasible ? kExitInfeasible : kExitOk;
}

int cmd_report(const Options& o, std::ostream& out) {
  const auto start = Clock::now();
  const fs::path dir = require_out(o);
  const Network net = require_model(o);
  const Data d = load_data(o);
  const PruneConfig cfg = prune_config(o);
  const PruneOutcome outcome = prune(net, d.train, cfg);
  const BoundReport rep = bound_report(net, outcome, d.train, bound_config(o, cfg));
  write_json(dir / "report.json", to_json(rep));
  bound_csv(rep).save(dir / "report.csv");
  write_manifest(o, dir, {{"report", (dir / "report.json").string()}}, since(start));
  out << "delta1 " << format_double(rep.delta1) << ", delta2 " << format_double(rep.delta2) << " (original widths "
      << format_double(rep.delta2_original) << "), bound " << format_double(rep.bound) << "\n";
  for (auto l : rep.warnings) out << "warning: zeta exceeds 1 at layer " << l << "\n";
  return outcome.infeasible ? kExitInfeasible : kExitOk;
}

void add_options(CLI::App& app, Options& o) {
  app.add_option("command", o.command, "train | spectrum | prune | eval | sweep | report")
      ->required()
      ->check(CLI::IsMember({"train", "spectrum", "prune", "eval", "sweep", "report"}));
  app.set_config("--config", "", "Flat key = value file; keys are long option names");
  app.add_option("--out", o.out, "Output directory");
  app.add_option("--model", o.model, "Model directory");
  app.add_option("--compare", o.compare, "Second model directory for eval");
  app.add_option("--seed", o.seed, "Seed for initialisation and shuffling");

  app.add_option("--arch", o.arch, "Architecture, e.g. 784:d300:d1000:d300:d10");
  app.add_option("--activation", o.activation, "relu or leaky_relu");
  app.add_option("--slope", o.slope, "Leaky ReLU slope");
  app.add_option("--epochs", o.epochs);
  app.add_option("--batch-size", o.batch_size);
  app.add_option("--lr", o.learning_rate, "SGD learning rate");
  app.add_option("--weight-decay", o.weight_decay);
  app.add_option("--loss", o.loss, "ce or squared");

  app.add_option("--data", o.data, "mnist or synth");
  app.add_option("--images", o.images);
  app.add_option("--labels", o.labels);
  app.add_option("--test-images", o.test_images);
  app.add_option("--test-labels", o.test_labels);
  app.add_option("--limit", o.limit, "Training samples to load (0 = all)");
  app.add_option("--test-limit", o.test_limit, "Test samples to load (0 = all)");
  app.add_option("--synth-n", o.synth_n);
  app.add_option("--synth-test-n", o.synth_test_n);
  app.add_option("--synth-dim", o.synth_dim);
  app.add_option("--synth-decay", o.synth_decay, "Eigenvalue decay exponent p");
  app.add_option("--synth-outputs", o.synth_outputs);
  app.add_flag("--synth-classify", o.synth_classify, "One-hot teacher labels instead of regression targets");
  app.add_option("--data-seed", o.data_seed);

  app.add_option("--layers", o.layers, "Comma-separated layer indices (2..L)")
      ->delimiter(',')
      ->multi_option_policy(CLI::MultiOptionPolicy::Join);
  app.add_option("--widths", o.widths, "layer:width pairs, or widths aligned with --layers")
      ->delimiter(',')
      ->multi_option_policy(CLI::MultiOptionPolicy::Join);
  app.add_option("--theta", o.theta, "Weight of the input information loss");
  auto* lambda = app.add_option("--lambda-coef", o.lambda_coef, "lambda = coef * trace of the layer covariance");
  app.add_option("--procedure", o.procedure, "backward or simultaneous");
  app.add_flag("--no-budget-constraint", o.no_budget_constraint);
  auto* tau = app.add_option("--tau-scalar", o.tau_scalar, "Use a constant tau instead of the leverage policy");
  app.add_option("--t", o.t, "Confidence parameter of R_{n,t}");
  app.add_option("--c1", o.c1, "Constant scaling R in the bound");
  app.add_option("--big-c1", o.big_c1, "Constant in front of the variance term");
  app.add_option("--truncation", o.truncation, "Output truncation level M");

  app.add_option("--profile-points", o.profile_points);
  app.add_option("--sweep", o.sweep, "theta or width");
  app.add_option("--values", o.values, "Comma-separated sweep values")
      ->delimiter(',')
      ->multi_option_policy(CLI::MultiOptionPolicy::Join);

  app.callback([&o, lambda, tau] {
    o.lambda_given = lambda->count() > 0;
    o.tau_given = tau->count() > 0;
  });
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Spectral pruning of feedforward networks", "specprune"};
  add_options(app, o);
  std::vector<const char*> argv{"specprune"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitError;
  }
  o.config_snapshot = app.config_to_str(true, false);

  try {
    if (o.command == "train") return cmd_train(o, out);
    if (o.command == "spectrum") return cmd_spectrum(o, out);
    if (o.command == "prune") return cmd_prune(o, out);
    if (o.command == "eval") return cmd_eval(o, out);
    if (o.command == "sweep") return cmd_sweep(o, out);
    return cmd_report(o, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
  }
  return kExitError;
}

}  // namespace specprune
