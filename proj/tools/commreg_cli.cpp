// commreg: dataset generation, training, evaluation and flow rendering.
//
//   commreg gen-data --out data [--config scene.json] [--preset desk] [--seed 7]
//   commreg train --data data --out runs [--config train.json] [--flow rf] [--no-bilateral]
//   commreg train --resume runs/20261017-101500-seed0
//   commreg eval --checkpoint ck.pt --data data/test --out eval
//   commreg visualize-flow --field f.field --out f.png

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "commreg/commreg.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace commreg;

namespace {

constexpr const char* kVersion = "commreg 0.1.0";
constexpr const char* kManifestName = "run_manifest.json";

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string timestamp(const char* fmt) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, fmt);
  return os.str();
}

json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot open config file " + path.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw ParseError("config file " + path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  const auto tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << j.dump(2) << '\n';
  }
  fs::rename(tmp, path);
}

/// One directory per invocation holding exactly one manifest.
class Run {
 public:
  Run(const std::string& command, const fs::path& out_root, uint64_t seed) {
    fs::create_directories(out_root);
    const auto base = timestamp("%Y%m%d-%H%M%S") + "-seed" + std::to_string(seed);
    dir_ = out_root / base;
    for (int k = 1; fs::exists(dir_); ++k) dir_ = out_root / (base + "-" + std::to_string(k));
    fs::create_directories(dir_);
    manifest_ = {{"command", command},   {"seed", seed},  {"version", kVersion},
                 {"started", timestamp("%Y-%m-%dT%H:%M:%SZ")}, {"finished", nullptr},
                 {"status", "running"},   {"config", nullptr}, {"outputs", json::object()}};
    flush();
  }

  /// Reopens an interrupted run; a completed manifest is never rewritten.
  explicit Run(const fs::path& existing) : dir_(existing) {
    const auto path = existing / kManifestName;
    if (!fs::exists(path)) throw UsageError("no run manifest in " + existing.string());
    manifest_ = read_json(path);
    if (manifest_.value("status", "") == "completed") {
      throw UsageError("run " + existing.string() + " already completed; refusing to overwrite its manifest");
    }
    manifest_["resumed"].push_back(timestamp("%Y-%m-%dT%H:%M:%SZ"));
    flush();
  }

  const fs::path& dir() const { return dir_; }
  json& manifest() { return manifest_; }

  void set_config(const json& cfg) {
    manifest_["config"] = cfg;
    flush();
  }
  void output(const std::string& key, const fs::path& p) { manifest_["outputs"][key] = p.string(); }

  void finish() {
    manifest_["status"] = "completed";
    manifest_["finished"] = timestamp("%Y-%m-%dT%H:%M:%SZ");
    flush();
  }

  void fail(const std::string& why) {
    manifest_["status"] = "failed";
    manifest_["error"] = why;
    flush();
  }

 private:
  void flush() { write_json(dir_ / kManifestName, manifest_); }

  fs::path dir_;
  json manifest_;
};

// ---------------------------------------------------------------------------
// gen-data

struct GenDataConfig {
  SyntheticSceneConfig scene;
  std::size_t train_count = 500;
  std::size_t test_count = 60;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(GenDataConfig, scene, train_count, test_count)

GenDataConfig gen_data_preset(const std::string& preset) {
  GenDataConfig c;
  if (preset == "full") {
    c.scene.height = c.scene.width = 256;
    c.scene.max_displacement = 32.0;
  }
  return c;
}

struct GenDataArgs {
  std::string config;
  std::string out;
  std::string preset = "desk";
  std::optional<uint64_t> seed;
  std::optional<std::size_t> train_count, test_count;
};

int cmd_gen_data(const GenDataArgs& a) {
  auto cfg = gen_data_preset(a.preset);
  if (!a.config.empty()) {
    json j = cfg;
    j.merge_patch(read_json(a.config));
    cfg = j.get<GenDataConfig>();
  }
  if (a.seed) cfg.scene.seed = *a.seed;
  if (a.train_count) cfg.train_count = *a.train_count;
  if (a.test_count) cfg.test_count = *a.test_count;
  cfg.scene.validate();

  // The dataset itself carries no timestamps so reruns are byte-identical;
  // the run record lives next to it.
  const fs::path root(a.out);
  fs::create_directories(root);
  if (fs::exists(root / kManifestName)) {
    const auto prior = read_json(root / kManifestName);
    if (prior.value("status", "") == "completed") {
      throw UsageError(root.string() + " already holds a completed dataset; choose another --out");
    }
  }
  json manifest = {{"command", "gen-data"},
                   {"seed", cfg.scene.seed},
                   {"version", kVersion},
                   {"started", timestamp("%Y-%m-%dT%H:%M:%SZ")},
                   {"status", "running"},
                   {"config", cfg}};
  write_json(root / kManifestName, manifest);

  generate_dataset(cfg.scene, cfg.train_count, root / "train");
  generate_dataset(cfg.scene, cfg.test_count, root / "test", cfg.train_count);

  manifest["outputs"] = {{"train", (root / "train").string()}, {"test", (root / "test").string()}};
  manifest["status"] = "completed";
  manifest["finished"] = timestamp("%Y-%m-%dT%H:%M:%SZ");
  write_json(root / kManifestName, manifest);
  std::cout << "wrote " << cfg.train_count << " train and " << cfg.test_count << " test pairs to " << root.string()
            << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string config;
  std::string data;
  std::string out = "runs";
  std::string preset = "desk";
  std::string resume;
  std::string flow;
  std::string route_adv;
  std::string route_recon;
  std::string baseline;
  std::optional<uint64_t> seed;
  std::optional<int64_t> epochs;
  bool no_bilateral = false;
  bool quiet = false;
};

/// Parses "R,T", "R", "T" or "none".
std::pair<bool, bool> parse_route(const std::string& s, const char* flag) {
  if (s == "none" || s.empty()) return {false, false};
  bool r = false, t = false;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok == "R") {
      r = true;
    } else if (tok == "T") {
      t = true;
    } else {
      throw UsageError(std::string(flag) + ": expected a subset of R,T or 'none', got '" + s + "'");
    }
  }
  return {r, t};
}

FlowMode parse_flow(const std::string& s) {
  if (s == "both") return FlowMode::Both;
  if (s == "rf") return FlowMode::RegisterFirstOnly;
  if (s == "tf") return FlowMode::TranslateFirstOnly;
  throw UsageError("--flow: expected both, rf or tf, got '" + s + "'");
}

/// Resolves `<data>/train` and `<data>/test` when the directory holds a
/// split dataset; otherwise trains on `data` and skips per-epoch accuracy.
std::pair<fs::path, std::optional<fs::path>> dataset_dirs(const fs::path& data) {
  if (fs::is_directory(data / "train")) {
    std::optional<fs::path> test;
    if (fs::is_directory(data / "test")) test = data / "test";
    return {data / "train", test};
  }
  if (!fs::is_directory(data)) throw UsageError("dataset directory " + data.string() + " does not exist");
  return {data, std::nullopt};
}

TrainConfig resolve_train_config(const TrainArgs& a) {
  auto cfg = a.preset == "full" ? TrainConfig::full() : TrainConfig::desk();
  if (!a.config.empty()) {
    json j = cfg;
    j.merge_patch(read_json(a.config));
    cfg = j.get<TrainConfig>();
  }
  if (a.seed) cfg.seed = *a.seed;
  if (a.epochs) {
    cfg.epochs = *a.epochs;
    cfg.decay_start_epoch = std::min(cfg.decay_start_epoch, cfg.epochs / 2);
  }
  if (!a.flow.empty()) cfg.flow_mode = parse_flow(a.flow);
  if (a.no_bilateral) cfg.smoothness.bilateral_enabled = false;
  if (!a.route_adv.empty()) {
    std::tie(cfg.loss_routing.adversarial_to_R, cfg.loss_routing.adversarial_to_T) =
        parse_route(a.route_adv, "--route-adv");
  }
  if (!a.route_recon.empty()) {
    std::tie(cfg.loss_routing.reconstruction_to_R, cfg.loss_routing.reconstruction_to_T) =
        parse_route(a.route_recon, "--route-recon");
  }
  if (!a.baseline.empty()) {
    try {
      cfg.objective = json(a.baseline).get<Objective>();
    } catch (const json::exception&) {
      throw UsageError("--baseline: expected ncc, ssim_on_edges or ncc_on_edges, got '" + a.baseline + "'");
    }
    if (cfg.objective == Objective::Commutative) {
      throw UsageError("--baseline: expected ncc, ssim_on_edges or ncc_on_edges, got '" + a.baseline + "'");
    }
  }
  cfg.validate();
  return cfg;
}

int cmd_train(const TrainArgs& a) {
  std::optional<Run> run;
  TrainConfig cfg;
  fs::path data;
  if (!a.resume.empty()) {
    run.emplace(fs::path(a.resume));
    cfg = run->manifest().at("config").get<TrainConfig>();
    data = run->manifest().at("dataset").get<std::string>();
  } else {
    if (a.data.empty()) throw UsageError("train: --data is required");
    cfg = resolve_train_config(a);
    data = a.data;
    run.emplace("train", fs::path(a.out), cfg.seed);
    run->manifest()["dataset"] = data.string();
    run->set_config(cfg);
  }
  try {
    const auto [train_dir, test_dir] = dataset_dirs(data);
    const auto train_data = Dataset::load(train_dir);
    std::optional<Dataset> test_data;
    if (test_dir) test_data = Dataset::load(*test_dir);

    RunOptions opts;
    opts.run_dir = run->dir();
    opts.resume = !a.resume.empty();
    opts.verbose = !a.quiet;
    auto result = train_run(cfg, train_data, test_data ? &*test_data : nullptr, opts);

    run->output("metrics", run->dir() / "metrics.csv");
    run->output("checkpoint", run->dir() / "checkpoints" / "latest.pt");
    if (test_data) {
      const auto method = cfg.objective == Objective::Commutative ? std::string("R + T")
                                                                  : "R + " + json(cfg.objective).get<std::string>();
      const auto rep = evaluate_bundle(result.bundle, *test_data, method);
      run->manifest()["final"] = {{"salient_err", rep.mean_salient().value_or(NAN)},
                                  {"full_err", rep.mean_full().value_or(NAN)},
                                  {"epe", rep.mean_epe().value_or(NAN)}};
    }
    run->finish();
  } catch (const std::exception& e) {
    run->fail(e.what());
    throw;
  }
  std::cout << run->dir().string() << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// eval

std::string fmt(const std::optional<double>& v) {
  if (!v) return "";
  std::ostringstream os;
  os << std::setprecision(9) << *v;
  return os.str();
}

/// Alpha-blends the target silhouette (25% opacity, red) onto `source`.
Image overlay(const Image& source, const Image& silhouette) {
  auto rgb = source.channels() == 3 ? source.tensor().clone() : source.tensor().repeat({3, 1, 1});
  const auto m = silhouette.tensor()[0] * 0.25;
  const double tint[3] = {1.0, 0.0, 0.0};
  for (int c = 0; c < 3; ++c) rgb[c] = rgb[c] * (1.0 - m) + tint[c] * m;
  return Image(rgb);
}

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string out = "eval";
  bool images = true;
};

int cmd_eval(const EvalArgs& a) {
  ModelBundle bundle = load_bundle(a.checkpoint);
  const auto data = Dataset::load(dataset_dirs(a.data).second.value_or(fs::path(a.data)));
  Run run("eval", fs::path(a.out), 0);
  run.manifest()["checkpoint"] = a.checkpoint;
  run.manifest()["dataset"] = data.root.string();
  run.set_config(bundle.arch);
  try {
    const auto fields = predict_fields(bundle, data);
    AccuracyReport rep{"R + T", {}};
    AccuracyReport before = evaluate_identity(data);
    for (std::size_t i = 0; i < data.size(); ++i) rep.samples.push_back(evaluate_sample(fields[i], data.samples[i]));

    std::ofstream csv(run.dir() / "report.csv", std::ios::binary);
    csv << "method,salient_err,full_err,epe\n";
    for (const auto& s : rep.samples) {
      csv << rep.method << ',' << fmt(s.salient_error) << ',' << fmt(s.full_error) << ',' << fmt(s.epe) << '\n';
    }
    run.output("report", run.dir() / "report.csv");

    if (a.images) {
      const auto vis = run.dir() / "flow";
      const auto ovl = run.dir() / "overlay";
      fs::create_directories(vis);
      fs::create_directories(ovl);
      for (std::size_t i = 0; i < data.size(); ++i) {
        const auto stem = sample_stem(i);
        write_png(vis / (stem + ".png"), visualize_field(fields[i]));
        const auto& s = data.samples[i];
        if (!s.mask) continue;
        // The mask lives in B's frame; blend it over A before and after warping.
        write_png(ovl / (stem + "_before.png"), overlay(s.i_a, *s.mask));
        write_png(ovl / (stem + "_after.png"), overlay(resample(s.i_a, fields[i]), *s.mask));
      }
      run.output("flow", vis);
      run.output("overlay", ovl);
    }

    std::cout << std::left << std::setw(16) << "method" << std::right << std::setw(14) << "salient (px)"
              << std::setw(14) << "full (px)" << std::setw(12) << "EPE (px)" << '\n';
    for (const auto* r : {&before, &rep}) {
      auto cell = [](const std::optional<double>& v) {
        std::ostringstream os;
        if (v) {
          os << std::fixed << std::setprecision(3) << *v;
        } else {
          os << "-";
        }
        return os.str();
      };
      std::cout << std::left << std::setw(16) << r->method << std::right << std::setw(14) << cell(r->mean_salient())
                << std::setw(14) << cell(r->mean_full()) << std::setw(12) << cell(r->mean_epe()) << '\n';
    }
    run.finish();
  } catch (const std::exception& e) {
    run.fail(e.what());
    throw;
  }
  return 0;
}

// ---------------------------------------------------------------------------
// visualize-flow

struct VisualizeArgs {
  std::string field;
  std::string out;
  double cap = 0.0;
};

int cmd_visualize(const VisualizeArgs& a) {
  const auto field = read_field(a.field);
  write_png(a.out, visualize_field(field, a.cap));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unsupervised multi-modal deformable registration with commutative flows"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic paired dataset with train/ and test/ splits");
  gen_cmd->add_option("--config", gen.config, "JSON scene config (keys: scene, train_count, test_count)");
  gen_cmd->add_option("--out", gen.out, "Output dataset directory")->required();
  gen_cmd->add_option("--preset", gen.preset, "desk or full")->check(CLI::IsMember({"desk", "full"}));
  gen_cmd->add_option("--seed", gen.seed, "Scene seed");
  gen_cmd->add_option("--train-count", gen.train_count, "Number of training pairs");
  gen_cmd->add_option("--test-count", gen.test_count, "Number of test pairs");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train R, T and D (or an R-only baseline)");
  train_cmd->add_option("--config", tr.config, "JSON training config; keys mirror TrainConfig");
  train_cmd->add_option("--data", tr.data, "Dataset directory (with train/ and test/ splits, or a single split)");
  train_cmd->add_option("--out", tr.out, "Parent directory for the run directory");
  train_cmd->add_option("--preset", tr.preset, "desk or full")->check(CLI::IsMember({"desk", "full"}));
  train_cmd->add_option("--resume", tr.resume, "Resume an interrupted run directory");
  train_cmd->add_option("--seed", tr.seed, "Training seed");
  train_cmd->add_option("--epochs", tr.epochs, "Override the epoch count");
  train_cmd->add_option("--flow", tr.flow, "both, rf (register-first only) or tf (translate-first only)");
  train_cmd->add_flag("--no-bilateral", tr.no_bilateral, "Plain (unweighted) smoothness");
  train_cmd->add_option("--route-adv", tr.route_adv, "Modules receiving the adversarial gradient: R,T | R | T | none");
  train_cmd->add_option("--route-recon", tr.route_recon,
                        "Modules receiving the reconstruction gradient: R,T | R | T | none");
  train_cmd->add_option("--baseline", tr.baseline, "Train R alone on ncc, ssim_on_edges or ncc_on_edges");
  train_cmd->add_flag("--quiet", tr.quiet, "No per-epoch progress on stderr");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Landmark accuracy, EPE, flow and overlay images");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--data", ev.data, "Dataset directory (uses test/ when present)")->required();
  eval_cmd->add_option("--out", ev.out, "Parent directory for the run directory");
  eval_cmd->add_flag("!--no-images", ev.images, "Skip flow and overlay images");

  VisualizeArgs vis;
  auto* vis_cmd = app.add_subcommand("visualize-flow", "Render a field file with the Middlebury color wheel");
  vis_cmd->add_option("--field", vis.field, "Field file")->required();
  vis_cmd->add_option("--out", vis.out, "Output PNG")->required();
  vis_cmd->add_option("--cap", vis.cap, "Normalization radius in px (0 = field maximum)");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*gen_cmd) return cmd_gen_data(gen);
    if (*train_cmd) return cmd_train(tr);
    if (*eval_cmd) return cmd_eval(ev);
    if (*vis_cmd) return cmd_visualize(vis);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
