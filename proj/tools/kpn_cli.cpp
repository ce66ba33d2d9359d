// kpn: command-line front end for teacher training, route listing, complexity
// reports, knowledge-projection training, evaluation and export.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "kpn/kpn.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace kpn;

namespace {

// Everything a run needs besides the training hyperparameters. Loaded from
// --config, then overridden by flags.
struct RunConfig {
  TrainConfig train;
  std::string data;
  std::string teacher;
  std::string teacher_arch = "teacher-cnn";
  std::string arch = "26--";
  std::string out;
  std::size_t subset_size = 0;  // 0 keeps the whole training set
  std::size_t repeats = 5;
  std::optional<Route> route;
};

json to_json(const RunConfig& c) {
  return {{"data", c.data},
          {"teacher", c.teacher},
          {"teacher_arch", c.teacher_arch},
          {"arch", c.arch},
          {"out", c.out},
          {"subset_size", c.subset_size},
          {"repeats", c.repeats},
          {"route", c.route ? kpn::to_json(*c.route) : json(nullptr)},
          {"train", kpn::to_json(c.train)}};
}

Route parse_route(const std::string& s) {
  const auto colon = s.find(':');
  try {
    if (colon == std::string::npos) throw std::invalid_argument(s);
    return {std::stoul(s.substr(0, colon)), std::stoul(s.substr(colon + 1))};
  } catch (const std::logic_error&) {
    throw ConfigError("route must look like KNOWLEDGE:INJECTION, got '" + s + "'");
  }
}

RunConfig run_config_from_json(const json& doc) {
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig c;
  const json known = to_json(c);
  for (const auto& [key, value] : doc.items()) {
    if (!known.contains(key)) throw ConfigError("config: unknown key '" + key + "'");
  }
  try {
    const auto get = [&](const char* key, auto& field) {
      if (doc.contains(key)) field = doc.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("data", c.data);
    get("teacher", c.teacher);
    get("teacher_arch", c.teacher_arch);
    get("arch", c.arch);
    get("out", c.out);
    get("subset_size", c.subset_size);
    get("repeats", c.repeats);
    if (doc.contains("route") && !doc.at("route").is_null()) {
      const auto& r = doc.at("route");
      for (const auto& [key, value] : r.items()) {
        if (key != "knowledge" && key != "injection") throw ConfigError("config.route: unknown key '" + key + "'");
      }
      c.route = Route{r.at("knowledge").get<std::size_t>(), r.at("injection").get<std::size_t>()};
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (doc.contains("train")) c.train = train_config_from_json(doc.at("train"));
  return c;
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError(DataError::Kind::io, "cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_file_atomic(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

bool is_checkpoint_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  char magic[4] = {};
  return in.read(magic, 4) && std::string(magic, 4) == "KPNC";
}

// Preset name, architecture JSON file, or the architecture stored in a
// checkpoint.
Architecture load_architecture(const std::string& spec) {
  if (spec.empty()) throw ConfigError("no architecture given");
  if (fs::is_regular_file(spec)) {
    if (is_checkpoint_file(spec)) return checkpoint_arch(load_checkpoint(spec));
    return load_arch(spec);
  }
  return preset(spec);
}

Network<float> load_network(const std::string& path) {
  if (path.empty()) throw ConfigError("no checkpoint given");
  auto c = load_checkpoint(path);
  if (c.metadata.value("kind", "") == "kpn") c = strip_to_student(c);
  return network_from_checkpoint<float>(c);
}

std::pair<Dataset, Dataset> load_data(const RunConfig& rc) {
  if (rc.data.empty()) throw ConfigError("--data is required");
  return load_idx_dir(rc.data);
}

Dataset training_subset(const Dataset& train, const RunConfig& rc) {
  if (rc.subset_size == 0) return train;
  return class_balanced_subset(train, {rc.subset_size, derive_seed(rc.train.seed, 4)}).data;
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

// Flags shared by the training commands; unset flags leave the config alone.
struct Overrides {
  std::string config;
  std::optional<std::string> data, teacher, arch, out, mask_source, prune_direction, route;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> subset_size, prune_period, iterations, batch_size, repeats;
  std::optional<double> beta, eta, lambda0;
  bool print_defaults = false;
  bool json_output = false;

  void attach(CLI::App& cmd) {
    cmd.add_option("--config", config, "JSON run configuration");
    cmd.add_option("--data", data, "IDX directory (train-*/t10k-* files)");
    cmd.add_option("--teacher", teacher, "teacher checkpoint");
    cmd.add_option("--arch", arch, "student preset name or architecture JSON");
    cmd.add_option("--out", out, "output path");
    cmd.add_option("--seed", seed, "master seed");
    cmd.add_option("--subset-size", subset_size, "class-balanced training subset size (0 = all)");
    cmd.add_option("--beta", beta, "receptive-field tolerance");
    cmd.add_option("--eta", eta, "relaxed L1 slope for negative responses");
    cmd.add_option("--lambda0", lambda0, "initial knowledge-projection loss weight");
    cmd.add_option("--prune-period", prune_period, "iterations (or epochs) between pruning rounds");
    cmd.add_option("--mask-source", mask_source, "projected|teacher-mean");
    cmd.add_option("--prune-direction", prune_direction, "worst|paper-literal");
    cmd.add_option("--iterations", iterations, "total training iterations");
    cmd.add_option("--batch-size", batch_size, "minibatch size");
    cmd.add_option("--route", route, "force a single route KNOWLEDGE:INJECTION");
    cmd.add_option("--repeats", repeats, "races to run (prune-stats)");
    cmd.add_flag("--print-defaults", print_defaults, "print the effective configuration and exit");
    cmd.add_flag("--json", json_output, "machine-readable output");
  }

  RunConfig resolve() const {
    RunConfig rc = config.empty() ? RunConfig{} : run_config_from_json(read_json_file(config));
    if (data) rc.data = *data;
    if (teacher) rc.teacher = *teacher;
    if (arch) rc.arch = *arch;
    if (out) rc.out = *out;
    if (seed) rc.train.seed = *seed;
    if (subset_size) rc.subset_size = *subset_size;
    if (beta) rc.train.beta = *beta;
    if (eta) rc.train.eta = *eta;
    if (lambda0) rc.train.lambda0 = *lambda0;
    if (prune_period) rc.train.prune_period = *prune_period;
    if (mask_source) rc.train.mask_source = parse_mask_source(*mask_source);
    if (prune_direction) rc.train.prune_direction = parse_prune_direction(*prune_direction);
    if (iterations) rc.train.total_iterations = *iterations;
    if (batch_size) rc.train.batch_size = *batch_size;
    if (route) rc.route = parse_route(*route);
    if (repeats) rc.repeats = *repeats;
    validate(rc.train);
    return rc;
  }
};

void emit(const json& report, bool as_json, const std::string& human) {
  if (as_json) {
    std::cout << report.dump() << "\n";
  } else {
    std::cout << human;
  }
}

// ---------------------------------------------------------------------------
// Commands

int cmd_teacher_train(const Overrides& o) {
  auto rc = o.resolve();
  if (!o.arch) rc.arch = rc.teacher_arch;
  if (o.print_defaults) {
    std::cout << to_json(rc).dump(2) << "\n";
    return 0;
  }
  if (rc.out.empty()) throw ConfigError("--out is required");
  const auto arch = load_architecture(rc.arch);
  const auto [train_full, test] = load_data(rc);
  const auto train = training_subset(train_full, rc);
  const fs::path out(rc.out);
  std::ofstream log(out.string() + ".log.jsonl");
  auto net = train_teacher<float>(arch, train, rc.train, [&](const LogRecord& r) { log << to_json(r).dump() << "\n"; });
  const double test_acc = accuracy(net, test, rc.train.eval_batch_size);
  const json metrics = {{"command", "teacher-train"},
                        {"arch", arch.name},
                        {"train_size", train.size()},
                        {"test_accuracy", test_acc},
                        {"params", count_complexity(arch).total_params},
                        {"config", to_json(rc)}};
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_checkpoint(out, network_checkpoint(net, {{"role", "teacher"}, {"test_accuracy", test_acc}}));
  write_text(out.string() + ".metrics.json", metrics.dump(2) + "\n");
  emit(metrics, o.json_output, "teacher " + arch.name + ": test accuracy " + fixed(100 * test_acc, 2) + "% -> " + rc.out + "\n");
  return 0;
}

int cmd_routes(const Overrides& o) {
  const auto rc = o.resolve();
  if (o.print_defaults) {
    std::cout << to_json(rc).dump(2) << "\n";
    return 0;
  }
  const auto teacher = load_architecture(rc.teacher.empty() ? rc.teacher_arch : rc.teacher);
  const auto student = load_architecture(rc.arch);
  const auto routes = enumerate_routes(teacher, student, rc.train.beta);
  json rows = json::array();
  std::ostringstream human;
  human << "teacher " << teacher.name << ", student " << student.name << ", beta " << rc.train.beta << ": "
        << routes.size() << " routes\n";
  human << std::setw(6) << "i" << std::setw(6) << "j" << std::setw(8) << "S_i" << std::setw(8) << "S_j"
        << std::setw(10) << "HxW" << "\n";
  for (const auto& r : routes) {
    rows.push_back(kpn::to_json(r));
    human << std::setw(6) << r.route.knowledge << std::setw(6) << r.route.injection << std::setw(8) << r.teacher_field
          << std::setw(8) << r.student_field << std::setw(10)
          << (std::to_string(r.student_shape.height) + "x" + std::to_string(r.student_shape.width)) << "\n";
  }
  emit({{"teacher", teacher.name}, {"student", student.name}, {"beta", rc.train.beta}, {"routes", rows}}, o.json_output,
       human.str());
  return 0;
}

int cmd_complexity(const std::string& arch_spec, bool as_json) {
  const auto arch = load_architecture(arch_spec);
  const auto report = count_complexity(arch);
  const auto resolved = resolve(arch);
  json layers = json::array();
  std::ostringstream human;
  human << arch.name << "\n" << std::setw(5) << "#" << std::setw(14) << "kind" << std::setw(14) << "output"
        << std::setw(12) << "params" << std::setw(14) << "mult-adds" << "\n";
  for (const auto& l : report.layers) {
    const auto& out = resolved[l.index].out;
    const std::string shape = std::to_string(out.channels) + "x" + std::to_string(out.height) + "x" +
                              std::to_string(out.width);
    layers.push_back({{"index", l.index},
                      {"kind", to_string(l.kind)},
                      {"params", l.params},
                      {"multiply_adds", l.multiply_adds},
                      {"output", {out.channels, out.height, out.width}}});
    human << std::setw(5) << l.index << std::setw(14) << to_string(l.kind) << std::setw(14) << shape << std::setw(12)
          << l.params << std::setw(14) << l.multiply_adds << "\n";
  }
  human << "total params " << report.total_params << ", multiply-adds " << report.total_multiply_adds << "\n";
  emit({{"arch", arch.name},
        {"layers", layers},
        {"total_params", report.total_params},
        {"total_multiply_adds", report.total_multiply_adds}},
       as_json, human.str());
  return 0;
}

struct PreparedRun {
  Network<float> teacher;
  Architecture student;
  Dataset train, val, test;
};

PreparedRun prepare_kpn_run(const RunConfig& rc) {
  if (rc.teacher.empty()) throw ConfigError("--teacher is required");
  auto teacher = load_network(rc.teacher);
  teacher.freeze();
  auto student = load_architecture(rc.arch);
  auto [train_full, test] = load_data(rc);
  const auto subset = training_subset(train_full, rc);
  auto [train, val] = train_val_split(subset, rc.train.val_fraction, derive_seed(rc.train.seed, 5));
  return {std::move(teacher), std::move(student), std::move(train.data), std::move(val.data), std::move(test)};
}

int cmd_kpn_train(const Overrides& o) {
  const auto rc = o.resolve();
  if (o.print_defaults) {
    std::cout << to_json(rc).dump(2) << "\n";
    return 0;
  }
  if (rc.out.empty()) throw ConfigError("--out is required");
  auto run_data = prepare_kpn_run(rc);
  const fs::path out(rc.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  std::ofstream log(out.string() + ".log.jsonl");
  KpnOptions options;
  options.route = rc.route;
  auto run = train_kpn(run_data.teacher, run_data.student, run_data.train, run_data.val, rc.train, options,
                       [&](const LogRecord& r) { log << to_json(r).dump() << "\n"; });
  const double test_acc = accuracy(run.survivor.student, run_data.test, rc.train.eval_batch_size);
  json routes = json::array();
  for (const auto& r : run.routes) routes.push_back(kpn::to_json(r));
  const auto& route = run.survivor.route;
  const json metrics = {{"command", "kpn-train"},
                        {"student", run_data.student.name},
                        {"train_size", run_data.train.size()},
                        {"val_size", run_data.val.size()},
                        {"routes", routes},
                        {"race", kpn::to_json(run.race)},
                        {"survivor", kpn::to_json(route)},
                        {"validation_loss", *run.survivor.validation_joint_loss},
                        {"test_accuracy", test_acc},
                        {"config", to_json(rc)}};
  save_checkpoint(out, kpn_checkpoint(run.survivor.student, run.survivor.projection, route.knowledge, route.injection,
                                      {{"test_accuracy", test_acc}}));
  write_text(out.string() + ".metrics.json", metrics.dump(2) + "\n");
  emit(metrics, o.json_output,
       "survivor route " + std::to_string(route.knowledge) + "->" + std::to_string(route.injection) + " of " +
           std::to_string(run.routes.size()) + ", test accuracy " + fixed(100 * test_acc, 2) + "% -> " + rc.out + "\n");
  return 0;
}

int cmd_prune_stats(const Overrides& o) {
  const auto rc = o.resolve();
  if (o.print_defaults) {
    std::cout << to_json(rc).dump(2) << "\n";
    return 0;
  }
  if (rc.repeats == 0) throw ConfigError("--repeats must be positive");
  auto run_data = prepare_kpn_run(rc);
  KpnOptions options;
  options.race_only = true;
  std::map<Route, std::size_t> tally;
  json races = json::array();
  for (std::size_t r = 0; r < rc.repeats; ++r) {
    auto cfg = rc.train;
    cfg.seed = rc.train.seed + r;
    const auto run = train_kpn(run_data.teacher, run_data.student, run_data.train, run_data.val, cfg, options);
    ++tally[run.survivor.route];
    races.push_back({{"seed", cfg.seed}, {"survivor", kpn::to_json(run.survivor.route)}, {"race", kpn::to_json(run.race)}});
  }
  json rows = json::array();
  std::ostringstream human;
  human << "survivor routes over " << rc.repeats << " races\n";
  for (const auto& [route, n] : tally) {
    rows.push_back({{"knowledge", route.knowledge}, {"injection", route.injection}, {"count", n}});
    human << "  R" << route.knowledge << "," << route.injection << ": " << n << "\n";
  }
  const json report = {{"command", "prune-stats"}, {"repeats", rc.repeats}, {"tally", rows}, {"races", races}};
  if (!rc.out.empty()) write_text(rc.out, report.dump(2) + "\n");
  emit(report, o.json_output, human.str());
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data, const std::string& split, bool as_json) {
  auto net = load_network(checkpoint);
  if (data.empty()) throw ConfigError("--data is required");
  const auto [train, test] = load_idx_dir(data);
  if (split != "test" && split != "train") throw ConfigError("--split must be train|test");
  const auto& d = split == "test" ? test : train;
  const double acc = accuracy(net, d);
  emit({{"checkpoint", checkpoint}, {"split", split}, {"samples", d.size()}, {"accuracy", acc}}, as_json,
       split + " accuracy " + fixed(100 * acc, 2) + "% over " + std::to_string(d.size()) + " samples\n");
  return 0;
}

int cmd_export(const std::string& checkpoint, const std::string& out, bool as_json) {
  if (out.empty()) throw ConfigError("--out is required");
  const auto kpn = load_checkpoint(checkpoint);
  auto student = strip_to_student(kpn);
  network_from_checkpoint<float>(student);  // fails here rather than at load time if incomplete
  student.metadata["source"] = checkpoint;
  if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
  save_checkpoint(out, student);
  emit({{"checkpoint", out}, {"tensors", student.tensors.size()}}, as_json,
       "exported " + std::to_string(student.tensors.size()) + " tensors -> " + out + "\n");
  return 0;
}

int cmd_synth(const std::string& out, std::size_t train, std::size_t test, std::uint64_t seed) {
  if (out.empty()) throw ConfigError("--out is required");
  write_synthetic_digits(out, train, test, seed);
  std::cout << "wrote " << train << " training and " << test << " test digits to " << out << "\n";
  return 0;
}

int cmd_show_arch(const std::string& spec, bool list) {
  if (list) {
    for (const auto& name : preset_names()) std::cout << name << "\n";
    return 0;
  }
  std::cout << kpn::to_json(load_architecture(spec)).dump(2) << "\n";
  return 0;
}

int fail(const char* kind, const std::string& message, int code) {
  std::cerr << json{{"error", kind}, {"message", message}, {"exit_code", code}}.dump() << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Knowledge projection training toolkit"};
  app.require_subcommand(1);

  Overrides teacher_o, routes_o, kpn_o, stats_o;
  auto* teacher_cmd = app.add_subcommand("teacher-train", "train a teacher network on an IDX dataset");
  teacher_o.attach(*teacher_cmd);
  auto* routes_cmd = app.add_subcommand("routes", "list admissible knowledge/injection routes");
  routes_o.attach(*routes_cmd);
  auto* kpn_cmd = app.add_subcommand("kpn-train", "route race plus two-stage student training");
  kpn_o.attach(*kpn_cmd);
  auto* stats_cmd = app.add_subcommand("prune-stats", "repeat the route race and tally survivors");
  stats_o.attach(*stats_cmd);

  std::string complexity_arch;
  bool complexity_json = false;
  auto* complexity_cmd = app.add_subcommand("complexity", "per-layer parameter and multiply-add counts");
  complexity_cmd->add_option("--arch", complexity_arch, "preset name, architecture JSON or checkpoint")->required();
  complexity_cmd->add_flag("--json", complexity_json, "machine-readable output");

  std::string eval_ckpt, eval_data, eval_split = "test";
  bool eval_json = false;
  auto* eval_cmd = app.add_subcommand("eval", "accuracy of a checkpoint");
  eval_cmd->add_option("--checkpoint", eval_ckpt, "network or KPN checkpoint")->required();
  eval_cmd->add_option("--data", eval_data, "IDX directory")->required();
  eval_cmd->add_option("--split", eval_split, "train|test");
  eval_cmd->add_flag("--json", eval_json, "machine-readable output");

  std::string export_ckpt, export_out;
  bool export_json = false;
  auto* export_cmd = app.add_subcommand("export", "write the student of a KPN checkpoint as a plain network");
  export_cmd->add_option("--checkpoint", export_ckpt, "KPN checkpoint")->required();
  export_cmd->add_option("--out", export_out, "output checkpoint")->required();
  export_cmd->add_flag("--json", export_json, "machine-readable output");

  std::string synth_out;
  std::size_t synth_train = 10000, synth_test = 2000;
  std::uint64_t synth_seed = 1;
  auto* synth_cmd = app.add_subcommand("synth", "write a synthetic handwritten-digit IDX dataset");
  synth_cmd->add_option("--out", synth_out, "output directory")->required();
  synth_cmd->add_option("--train", synth_train, "training images");
  synth_cmd->add_option("--test", synth_test, "test images");
  synth_cmd->add_option("--seed", synth_seed, "generator seed");

  std::string show_arch;
  bool show_list = false;
  auto* show_cmd = app.add_subcommand("show-arch", "print an architecture as JSON");
  show_cmd->add_option("--arch", show_arch, "preset name, architecture JSON or checkpoint");
  show_cmd->add_flag("--list", show_list, "list preset names");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return fail("usage", e.what(), 2);
  }

  try {
    if (*teacher_cmd) return cmd_teacher_train(teacher_o);
    if (*routes_cmd) return cmd_routes(routes_o);
    if (*kpn_cmd) return cmd_kpn_train(kpn_o);
    if (*stats_cmd) return cmd_prune_stats(stats_o);
    if (*complexity_cmd) return cmd_complexity(complexity_arch, complexity_json);
    if (*eval_cmd) return cmd_eval(eval_ckpt, eval_data, eval_split, eval_json);
    if (*export_cmd) return cmd_export(export_ckpt, export_out, export_json);
    if (*synth_cmd) return cmd_synth(synth_out, synth_train, synth_test, synth_seed);
    if (*show_cmd) return cmd_show_arch(show_arch, show_list);
  } catch (const ConfigError& e) {
    return fail("config", e.what(), 2);
  } catch (const ShapeError& e) {
    return fail("shape", e.what(), 2);
  } catch (const DataError& e) {
    return fail("data", e.what(), 3);
  } catch (const NumericError& e) {
    return fail("numeric", e.what(), 4);
  } catch (const fs::filesystem_error& e) {
    return fail("data", e.what(), 3);
  }
  return 2;
}
