#include "hypercd/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "hypercd/checkpoint.hpp"
#include "hypercd/downstream.hpp"
#include "hypercd/error.hpp"
#include "hypercd/rng.hpp"
#include "hypercd/version.hpp"
#include "manifest.hpp"

namespace hypercd {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using cli::RunManifest;

struct Common {
  std::uint64_t seed = 0;
  bool deterministic = false;
  std::string out = "hypercd_out";
  bool quiet = false;
};

struct ModelOpts {
  std::string backbone = "modified";
  std::size_t n = 0;  // 0: backbone default
};

struct Context {
  Common common;
  std::ostream* out = nullptr;
  std::ostream* err = nullptr;
  std::vector<std::string> command_line;
  std::string snapshot;

  LogFn log() const {
    if (common.quiet) return {};
    std::ostream* e = err;
    return [e](const std::string& line) { *e << "[hypercd] " << line << '\n'; };
  }
  fs::path out_dir() const {
    fs::path dir(common.out);
    std::error_code ec;
    fs::create_directories(dir, ec);
    require(!ec, ErrorKind::kIo, "cannot create output directory " + dir.string() + ": " + ec.message());
    return dir;
  }
  RunManifest manifest(const std::string& sub) const {
    RunManifest m;
    m.command_line = command_line;
    m.subcommand = sub;
    m.config_snapshot = snapshot;
    m.seeds["master"] = common.seed;
    m.config["deterministic"] = common.deterministic;
    return m;
  }
};

std::size_t worker_count(const Common& common, std::size_t jobs) {
  if (common.deterministic) return 1;
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("HYPERCD_THREADS")) {
    char* end = nullptr;
    const unsigned long cap = std::strtoul(env, &end, 10);
    require(end != env && *end == '\0' && cap > 0, ErrorKind::kUsage,
            std::string("HYPERCD_THREADS must be a positive integer, got '") + env + "'");
    n = std::min<std::size_t>(n, cap);
  }
  return std::min(n, std::max<std::size_t>(jobs, 1));
}

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream f(path);
  require(static_cast<bool>(f), ErrorKind::kIo, "cannot write " + path.string());
  return f;
}

HyperCube load_input(const fs::path& path) {
  HyperCube cube = load_cube(path);
  return normalize_cube(cube);
}

std::vector<HyperCube> load_inputs(const std::vector<std::string>& paths) {
  std::vector<HyperCube> cubes;
  std::set<std::string> ids;
  for (const auto& p : paths) {
    cubes.push_back(load_input(p));
    require(ids.insert(cubes.back().domain_id).second, ErrorKind::kUsage,
            "two inputs share the domain id '" + cubes.back().domain_id + "' (ids come from file names; rename one)");
  }
  return cubes;
}

ArchConfig arch_from(const ModelOpts& m) { return ArchConfig::backbone(m.backbone, m.n); }

void add_model_options(CLI::App* cmd, ModelOpts& m) {
  cmd->add_option("--backbone,--arch", m.backbone, "modified | original | no_multiscale | more_res")->capture_default_str();
  cmd->add_option("--n", m.n, "residual modules (0 = backbone default)")->capture_default_str();
}

void add_pretrain_options(CLI::App* cmd, TrainConfig& cfg) {
  cmd->add_option("--p", cfg.contrastive.p, "pseudo-label region side")->capture_default_str();
  cmd->add_option("--tau", cfg.contrastive.tau, "contrastive temperature")->capture_default_str();
  cmd->add_option("--pretrain-iterations", cfg.contrastive.iterations)->capture_default_str();
  cmd->add_option("--pretrain-milestones", cfg.pretrain_milestones)->delimiter(',')->capture_default_str();
  cmd->add_option("--region-augment", cfg.contrastive.augment, "dihedral transform per pretraining region (true|false)")
      ->capture_default_str();
  cmd->add_option("--sup-batch", cfg.sup_batch_per_domain,
                  "supervised pretraining pixels per source per iteration (0 = all labeled)")
      ->capture_default_str();
}

void add_optimizer_options(CLI::App* cmd, TrainConfig& cfg) {
  cmd->add_option("--lr", cfg.optimizer.base_lr)->capture_default_str();
  cmd->add_option("--momentum", cfg.optimizer.momentum)->capture_default_str();
  cmd->add_option("--weight-decay", cfg.optimizer.weight_decay)->capture_default_str();
  cmd->add_option("--gamma", cfg.optimizer.gamma, "step decay factor")->capture_default_str();
  cmd->add_option("--max-grad-norm", cfg.optimizer.max_grad_norm, "0 disables clipping")->capture_default_str();
  cmd->add_option("--init-std", cfg.init_std)->capture_default_str();
  cmd->add_option("--chunk", cfg.chunk, "patches per forward chunk")->capture_default_str();
}

void add_finetune_options(CLI::App* cmd, TrainConfig& cfg) {
  cmd->add_option("--iterations", cfg.finetune.iterations)->capture_default_str();
  cmd->add_option("--milestones", cfg.finetune.milestones)->delimiter(',')->capture_default_str();
  cmd->add_option("--lr-mult", cfg.finetune.lr_multiplier_domain_specific,
                  "learning-rate multiplier of new layers after transfer")
      ->capture_default_str();
  cmd->add_option("--augment", cfg.finetune.augment, "eight-fold augmentation (true|false)")->capture_default_str();
  cmd->add_option("--samples", cfg.finetune.train_per_domain, "training pixels per domain")->capture_default_str();
  cmd->add_option("--runs", cfg.finetune.runs)->capture_default_str();
}

json config_json(const TrainConfig& cfg) {
  json j;
  j["arch"] = {{"channels", cfg.arch.channels},
               {"encoder_kernel", cfg.arch.encoder_kernel},
               {"encoder_pad", cfg.arch.encoder_pad},
               {"n_res_modules", cfg.arch.n_res_modules},
               {"multiscale_encoder", cfg.arch.multiscale_encoder},
               {"residual_only", cfg.arch.residual_only},
               {"describe", cfg.arch.describe()}};
  j["optimizer"] = {{"base_lr", cfg.optimizer.base_lr},
                    {"momentum", cfg.optimizer.momentum},
                    {"weight_decay", cfg.optimizer.weight_decay},
                    {"gamma", cfg.optimizer.gamma},
                    {"max_grad_norm", cfg.optimizer.max_grad_norm}};
  j["pretrain"] = {{"p", cfg.contrastive.p},
                   {"tau", cfg.contrastive.tau},
                   {"iterations", cfg.contrastive.iterations},
                   {"milestones", cfg.pretrain_milestones},
                   {"region_augment", cfg.contrastive.augment},
                   {"sup_batch_per_domain", cfg.sup_batch_per_domain}};
  j["finetune"] = {{"iterations", cfg.finetune.iterations},
                   {"milestones", cfg.finetune.milestones},
                   {"lr_multiplier_domain_specific", cfg.finetune.lr_multiplier_domain_specific},
                   {"augment", cfg.finetune.augment},
                   {"train_per_domain", cfg.finetune.train_per_domain},
                   {"runs", cfg.finetune.runs}};
  j["init_std"] = cfg.init_std;
  j["chunk"] = cfg.chunk;
  return j;
}

json run_seeds(std::uint64_t master, std::size_t runs) {
  json arr = json::array();
  for (std::size_t r = 0; r < runs; ++r) {
    arr.push_back({{"run", r}, {"init", derive_seed(master, "init", r)}, {"split", derive_seed(master, "split", r)}});
  }
  return arr;
}

void write_pretrain_loss(const fs::path& path, const std::vector<PretrainRecord>& history) {
  auto f = open_out(path);
  f << "iteration,lr,loss\n";
  for (const auto& r : history) f << r.iteration << ',' << fmt(r.lr) << ',' << fmt(r.loss) << '\n';
}

void write_metrics(std::ostream& f, const std::vector<EvalReport>& reports, const std::string& label) {
  const std::size_t classes = reports.empty() ? 0 : reports.front().num_classes;
  f << "run,regime,oa,aa";
  for (std::size_t c = 0; c < classes; ++c) f << ",class_" << c + 1;
  f << '\n';
  for (const auto& r : reports) {
    f << r.run_index << ',' << label << ',' << fmt(r.oa) << ',' << fmt(r.aa);
    for (double v : r.per_class) f << ',' << fmt(v);
    f << '\n';
  }
}

json report_json(const EvalReport& r) {
  json per = json::array();
  for (double v : r.per_class) per.push_back(std::isnan(v) ? json(nullptr) : json(v));
  return {{"run", r.run_index}, {"oa", r.oa}, {"aa", r.aa}, {"per_class", per}, {"confusion", r.confusion},
          {"num_classes", r.num_classes}};
}

// --- commands ------------------------------------------------------------------

struct SynthOpts {
  std::size_t domains = 0;
  std::vector<std::size_t> bands;
  std::vector<std::size_t> classes;
  std::size_t size = 64;
  double noise = 0.05;
  double margin = 5.0;
  std::size_t tile = 8;
  std::string prefix = "synth";
};

void cmd_synth(const Context& ctx, const SynthOpts& o) {
  cli::Stopwatch sw;
  require(o.bands.size() == o.domains, ErrorKind::kUsage,
          "--bands lists " + std::to_string(o.bands.size()) + " values but --domains is " + std::to_string(o.domains));
  require(o.classes.size() == o.domains, ErrorKind::kUsage,
          "--classes lists " + std::to_string(o.classes.size()) + " values but --domains is " +
              std::to_string(o.domains));
  SynthConfig sc;
  sc.num_domains = o.domains;
  sc.bands = o.bands;
  sc.classes = o.classes;
  sc.size = o.size;
  sc.seed = ctx.common.seed;
  sc.noise = o.noise;
  sc.margin = o.margin;
  sc.tile = o.tile;
  sc.id_prefix = o.prefix;
  const auto cubes = synth_domains(sc);
  const fs::path dir = ctx.out_dir();
  RunManifest m = ctx.manifest("synth");
  for (const auto& c : cubes) {
    const std::string name = c.domain_id + ".hsc";
    save_cube(c, dir / name);
    m.artifacts.push_back(name);
    *ctx.out << (dir / name).string() << '\n';
  }
  m.config["synth"] = {{"domains", o.domains}, {"bands", o.bands},   {"classes", o.classes}, {"size", o.size},
                       {"noise", o.noise},     {"margin", o.margin}, {"tile", o.tile},       {"prefix", o.prefix}};
  m.timings["total"] = sw.seconds();
  write_manifest(m, dir);
}

struct ImportOpts {
  std::string input;
  std::string id;
};

void cmd_import(const Context& ctx, const ImportOpts& o) {
  cli::Stopwatch sw;
  const std::string id = o.id.empty() ? domain_id_from_path(o.input) : o.id;
  const HyperCube cube = import_csv(o.input, id);
  const fs::path dir = ctx.out_dir();
  const std::string name = id + ".hsc";
  save_cube(cube, dir / name);
  RunManifest m = ctx.manifest("import-csv");
  m.inputs.push_back(o.input);
  m.artifacts.push_back(name);
  m.timings["total"] = sw.seconds();
  write_manifest(m, dir);
  *ctx.out << (dir / name).string() << '\n';
}

struct PretrainOpts {
  std::vector<std::string> sources;
  ModelOpts model;
  TrainConfig cfg;
};

void cmd_pretrain(const Context& ctx, PretrainOpts& o) {
  cli::Stopwatch sw;
  o.cfg.arch = arch_from(o.model);
  o.cfg.validate();
  const auto cubes = load_inputs(o.sources);
  const std::uint64_t stage_seed = derive_seed(ctx.common.seed, "pretrain_stage");
  PretrainResult res = pretrain(cubes, o.cfg.arch, o.cfg.contrastive, o.cfg.pretrain_sgd(), stage_seed,
                                o.cfg.init_std, ctx.log());
  const fs::path dir = ctx.out_dir();
  save_checkpoint(res.params, dir / "pretrain.hcp");
  write_pretrain_loss(dir / "pretrain_loss.csv", res.history);
  RunManifest m = ctx.manifest("pretrain");
  for (const auto& s : o.sources) m.inputs.push_back(s);
  m.artifacts = {"pretrain.hcp", "pretrain_loss.csv"};
  m.config["train"] = config_json(o.cfg);
  m.seeds["pretrain_stage"] = stage_seed;
  m.timings["total"] = sw.seconds();
  write_manifest(m, dir);
  *ctx.out << "pretrain loss " << fmt(res.history.front().loss) << " -> " << fmt(res.history.back().loss) << "\n";
}

struct TrainOpts {
  std::string regime = "self_sup";
  std::string target;
  std::vector<std::string> sources;
  std::string pretrained;
  ModelOpts model;
  TrainConfig cfg;
};

struct Loaded {
  HyperCube target;
  std::vector<HyperCube> sources;
  RegimeInputs inputs() const {
    RegimeInputs in;
    in.target = &target;
    for (const auto& s : sources) in.sources.push_back(&s);
    return in;
  }
};

Loaded load_regime_data(const TrainOpts& o) {
  Loaded d;
  std::vector<std::string> all = o.sources;
  all.insert(all.begin(), o.target);
  auto cubes = load_inputs(all);
  d.target = std::move(cubes.front());
  d.sources.assign(std::make_move_iterator(cubes.begin() + 1), std::make_move_iterator(cubes.end()));
  return d;
}

bool needs_pretraining(Regime r) { return r == Regime::kSelfSup || r == Regime::kSupPretrain; }

void cmd_train(const Context& ctx, TrainOpts& o) {
  cli::Stopwatch sw;
  const Regime regime = parse_regime(o.regime);
  o.cfg.arch = arch_from(o.model);
  o.cfg.validate();
  const Loaded data = load_regime_data(o);
  RegimeInputs inputs = data.inputs();
  const fs::path dir = ctx.out_dir();
  RunManifest m = ctx.manifest("train");
  m.inputs.push_back(o.target);
  for (const auto& s : o.sources) m.inputs.push_back(s);

  CdcnnParams<float> pretrained;
  if (needs_pretraining(regime)) {
    if (!o.pretrained.empty()) {
      pretrained = load_checkpoint<float>(o.pretrained);
      m.inputs.push_back(o.pretrained);
    } else {
      const std::uint64_t stage_seed = derive_seed(ctx.common.seed, "pretrain_stage");
      std::vector<PretrainRecord> self_hist;
      TrainHistory sup_hist;
      pretrained = pretrain_stage(regime, inputs, o.cfg, stage_seed, &self_hist, &sup_hist, ctx.log());
      save_checkpoint(pretrained, dir / "pretrained.hcp");
      m.artifacts.push_back("pretrained.hcp");
      if (regime == Regime::kSelfSup) {
        write_pretrain_loss(dir / "pretrain_loss.csv", self_hist);
        m.artifacts.push_back("pretrain_loss.csv");
      } else {
        auto f = open_out(dir / "sup_pretrain_loss.csv");
        f << "iteration,lr,loss,train_accuracy\n";
        for (const auto& r : sup_hist.records) {
          f << r.iteration << ',' << fmt(r.lr_shared) << ',' << fmt(r.loss) << ',' << fmt(r.train_accuracy) << '\n';
        }
        m.artifacts.push_back("sup_pretrain_loss.csv");
      }
      m.seeds["pretrain_stage"] = stage_seed;
      m.timings["pretrain"] = sw.seconds();
    }
    inputs.pretrained = &pretrained;
  } else {
    require(o.pretrained.empty(), ErrorKind::kUsage, "--pretrained only applies to the sup and self_sup regimes");
  }

  const std::size_t threads = worker_count(ctx.common, o.cfg.finetune.runs);
  const RunAggregate agg = run_experiment(regime, inputs, o.cfg, ctx.common.seed, threads,
                                          ctx.common.deterministic, ctx.log());
  const std::string label = to_string(regime);
  for (std::size_t r = 0; r < agg.models.size(); ++r) {
    const std::string name = label + "_run" + std::to_string(r) + ".hcp";
    save_checkpoint(agg.models[r], dir / name);
    m.artifacts.push_back(name);
  }
  {
    auto f = open_out(dir / "metrics.csv");
    write_metrics(f, agg.runs, label);
  }
  {
    auto f = open_out(dir / "train_loss.csv");
    f << "run,iteration,lr_shared,lr_domain,loss,train_accuracy\n";
    for (std::size_t r = 0; r < agg.histories.size(); ++r) {
      for (const auto& rec : agg.histories[r].records) {
        f << r << ',' << rec.iteration << ',' << fmt(rec.lr_shared) << ',' << fmt(rec.lr_domain) << ','
          << fmt(rec.loss) << ',' << fmt(rec.train_accuracy) << '\n';
      }
    }
  }
  m.artifacts.push_back("metrics.csv");
  m.artifacts.push_back("train_loss.csv");
  if (regime == Regime::kCdScratch) {
    auto f = open_out(dir / "trunk_grads.csv");
    f << "run,iteration,domain,trunk_grad_norm\n";
    for (std::size_t r = 0; r < agg.histories.size(); ++r) {
      for (const auto& rec : agg.histories[r].records) {
        for (std::size_t d = 0; d < rec.trunk_grad_norm.size(); ++d) {
          const std::string id = d < data.sources.size() ? data.sources[d].domain_id : data.target.domain_id;
          f << r << ',' << rec.iteration << ',' << id << ',' << fmt(rec.trunk_grad_norm[d]) << '\n';
        }
      }
    }
    m.artifacts.push_back("trunk_grads.csv");
  }
  json aggregate;
  aggregate["regime"] = label;
  aggregate["mean_oa"] = agg.mean_oa;
  aggregate["mean_aa"] = agg.mean_aa;
  aggregate["runs"] = json::array();
  for (const auto& r : agg.runs) aggregate["runs"].push_back(report_json(r));
  aggregate["config"] = config_json(o.cfg);
  aggregate["master_seed"] = ctx.common.seed;
  aggregate["seeds"] = run_seeds(ctx.common.seed, o.cfg.finetune.runs);
  {
    auto f = open_out(dir / "aggregate.json");
    f << aggregate.dump(2) << '\n';
  }
  m.artifacts.push_back("aggregate.json");
  m.config["regime"] = label;
  m.config["train"] = config_json(o.cfg);
  m.seeds["runs"] = run_seeds(ctx.common.seed, o.cfg.finetune.runs);
  m.timings["total"] = sw.seconds();
  write_manifest(m, dir);
  *ctx.out << label << " mean OA " << std::fixed << std::setprecision(2) << 100 * agg.mean_oa << " AA "
           << 100 * agg.mean_aa << " over " << agg.runs.size() << " runs\n";
  ctx.out->unsetf(std::ios::floatfield);
}

struct EvalOpts {
  std::string checkpoint;
  std::string cube;
  std::size_t samples = 200;
  std::size_t run = 0;
  bool all = false;
  std::size_t chunk = 512;
};

void cmd_eval(const Context& ctx, const EvalOpts& o) {
  cli::Stopwatch sw;
  const CdcnnParams<float> params = load_checkpoint<float>(o.checkpoint);
  const HyperCube cube = load_input(o.cube);
  require(params.domains.count(cube.domain_id) == 1, ErrorKind::kShapeMismatch,
          "checkpoint has no head for domain '" + cube.domain_id +
              "'; pass the cube the model was trained on (domain ids come from file names)");
  std::vector<std::size_t> pixels;
  if (o.all) {
    for (std::size_t i = 0; i < cube.labels.size(); ++i) {
      if (cube.labels[i] != 0) pixels.push_back(i);
    }
  } else {
    pixels = make_split(cube, {ctx.common.seed, o.samples, o.run, false}).test;
  }
  EvalReport rep = evaluate(params, cube, pixels, o.chunk);
  rep.run_index = o.run;
  const fs::path dir = ctx.out_dir();
  {
    auto f = open_out(dir / "eval.csv");
    write_metrics(f, {rep}, fs::path(o.checkpoint).stem().string());
  }
  {
    auto f = open_out(dir / "eval.json");
    f << report_json(rep).dump(2) << '\n';
  }
  RunManifest m = ctx.manifest("eval");
  m.inputs = {o.checkpoint, o.cube};
  m.artifacts = {"eval.csv", "eval.json"};
  m.config["eval"] = {{"samples", o.samples}, {"run", o.run}, {"all", o.all}};
  m.seeds["split"] = derive_seed(ctx.common.seed, "split", o.run);
  m.timings["total"] = sw.seconds();
  write_manifest(m, dir);
  *ctx.out << "OA " << fmt(rep.oa) << " AA " << fmt(rep.aa) << " on " << pixels.size() << " pixels\n";
}

struct SweepOpts {
  std::string axis;
  std::vector<std::string> values;
  TrainOpts train;
};

std::size_t parse_count(const std::string& axis, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long x = 0;
  try {
    x = std::stoull(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  require(pos == v.size() && !v.empty(), ErrorKind::kUsage, "sweep --axis " + axis + ": '" + v + "' is not an integer");
  return static_cast<std::size_t>(x);
}

void cmd_sweep(const Context& ctx, SweepOpts& o) {
  cli::Stopwatch sw;
  const std::set<std::string> axes{"p", "samples", "n", "backbone"};
  require(axes.count(o.axis) == 1, ErrorKind::kUsage, "--axis must be one of p, samples, n, backbone");
  require(!o.values.empty(), ErrorKind::kUsage, "--values is empty");
  const Regime regime = parse_regime(o.train.regime);
  const Loaded data = load_regime_data(o.train);
  const fs::path dir = ctx.out_dir();
  RunManifest m = ctx.manifest("sweep");
  m.inputs.push_back(o.train.target);
  for (const auto& s : o.train.sources) m.inputs.push_back(s);

  struct Row {
    std::string value;
    RunAggregate agg;
  };
  std::vector<Row> rows;
  CdcnnParams<float> shared_pretrained;
  bool have_shared = false;
  if (!o.train.pretrained.empty()) {
    require(o.axis == "samples", ErrorKind::kUsage,
            "--pretrained can only be reused across a samples sweep; other axes change pretraining");
    shared_pretrained = load_checkpoint<float>(o.train.pretrained);
    have_shared = true;
    m.inputs.push_back(o.train.pretrained);
  }
  for (const auto& v : o.values) {
    TrainConfig cfg = o.train.cfg;
    ModelOpts model = o.train.model;
    if (o.axis == "p") cfg.contrastive.p = parse_count(o.axis, v);
    if (o.axis == "samples") cfg.finetune.train_per_domain = parse_count(o.axis, v);
    if (o.axis == "n") model.n = parse_count(o.axis, v);
    if (o.axis == "backbone") model.backbone = v;
    cfg.arch = arch_from(model);
    cfg.validate();
    RegimeInputs inputs = data.inputs();
    CdcnnParams<float> pretrained;
    if (needs_pretraining(regime)) {
      if (!have_shared) {
        pretrained = pretrain_stage(regime, inputs, cfg, derive_seed(ctx.common.seed, "pretrain_stage"), nullptr,
                                    nullptr, ctx.log());
        if (o.axis == "samples") {
          shared_pretrained = pretrained;
          have_shared = true;
        }
      }
      inputs.pretrained = have_shared ? &shared_pretrained : &pretrained;
    }
    const std::size_t threads = worker_count(ctx.common, cfg.finetune.runs);
    Row row{v, run_experiment(regime, inputs, cfg, ctx.common.seed, threads, ctx.common.deterministic, ctx.log())};
    if (ctx.log()) ctx.log()(o.axis + "=" + v + " mean OA " + fmt(row.agg.mean_oa));
    rows.push_back(std::move(row));
  }

  {
    auto f = open_out(dir / "sweep.csv");
    f << "axis,value,regime,mean_oa,mean_aa";
    const std::size_t runs = rows.front().agg.runs.size();
    for (std::size_t r = 0; r < runs; ++r) f << ",oa_run" << r;
    f << '\n';
    for (const auto& row : rows) {
      f << o.axis << ',' << row.value << ',' << to_string(regime) << ',' << fmt(row.agg.mean_oa) << ','
        << fmt(row.agg.mean_aa);
      for (const auto& rep : row.agg.runs) f << ',' << fmt(rep.oa);
      f << '\n';
    }
  }
  m.artifacts.push_back("sweep.csv");
  m.config["sweep"] = {{"axis", o.axis}, {"values", o.values}, {"regime", to_string(regime)}};
  m.config["train"] = config_json(o.train.cfg);
  m.seeds["runs"] = run_seeds(ctx.common.seed, o.train.cfg.finetune.runs);
  m.timings["total"] = sw.seconds();
  write_manifest(m, dir);

  std::ostream& out = *ctx.out;
  out << std::left << std::setw(12) << o.axis << std::right << std::setw(8) << "OA" << std::setw(8) << "AA" << '\n';
  for (const auto& row : rows) {
    out << std::left << std::setw(12) << row.value << std::right << std::fixed << std::setprecision(1)
        << std::setw(8) << 100 * row.agg.mean_oa << std::setw(8) << 100 * row.agg.mean_aa << '\n';
  }
  out.unsetf(std::ios::floatfield);
  out << std::setprecision(6);
}

struct FlopsOpts {
  ModelOpts model;
  std::string image;
  std::size_t height = 145, width = 145, bands = 200, classes = 16;
};

void cmd_flops(const Context& ctx, const FlopsOpts& o) {
  cli::Stopwatch sw;
  const ArchConfig arch = arch_from(o.model);
  DomainSpec domain{"image", o.bands, o.classes};
  std::size_t h = o.height, w = o.width;
  RunManifest m = ctx.manifest("flops");
  if (!o.image.empty()) {
    const HyperCube cube = load_cube(o.image);
    domain = {cube.domain_id, cube.bands, cube.num_classes};
    h = cube.height;
    w = cube.width;
    m.inputs.push_back(o.image);
  }
  const FlopsReport rep = flops(arch, domain, h, w);
  const fs::path dir = ctx.out_dir();
  {
    auto f = open_out(dir / "flops.csv");
    f << "layer,in,out,kernel,flops\n";
    for (const auto& l : rep.layers) f << l.name << ',' << l.in << ',' << l.out << ',' << l.kernel << ',' << l.flops << '\n';
    f << "total,,,," << rep.total << '\n';
  }
  m.artifacts.push_back("flops.csv");
  m.config["flops"] = {{"arch", arch.describe()}, {"height", h}, {"width", w}, {"bands", domain.bands},
                       {"classes", domain.classes}};
  m.timings["total"] = sw.seconds();
  write_manifest(m, dir);

  std::ostream& out = *ctx.out;
  out << arch.describe() << " on " << h << "x" << w << "x" << domain.bands << ", " << domain.classes << " classes\n";
  out << std::left << std::setw(10) << "layer" << std::right << std::setw(6) << "in" << std::setw(6) << "out"
      << std::setw(4) << "k" << std::setw(18) << "FLOPs" << '\n';
  for (const auto& l : rep.layers) {
    out << std::left << std::setw(10) << l.name << std::right << std::setw(6) << l.in << std::setw(6) << l.out
        << std::setw(4) << l.kernel << std::setw(18) << l.flops << '\n';
  }
  out << "total " << rep.total << " (" << std::fixed << std::setprecision(2) << rep.total / 1e9 << " x 10^9)\n";
  out.unsetf(std::ios::floatfield);
  out << std::setprecision(6);
}

struct ReplayOpts {
  std::string manifest;
};

int cmd_replay(const Context& ctx, const ReplayOpts& o) {
  std::ifstream in(o.manifest);
  require(static_cast<bool>(in), ErrorKind::kIo, "cannot open manifest " + o.manifest);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    fail(ErrorKind::kFormat, o.manifest + ": not a manifest (" + e.what() + ")");
  }
  require(j.contains("subcommand") && j.contains("config_snapshot") && j.contains("artifacts"), ErrorKind::kFormat,
          o.manifest + ": missing subcommand, config_snapshot or artifacts");
  const std::string sub = j["subcommand"];
  require(sub != "replay", ErrorKind::kUsage, "cannot replay a replay");
  const fs::path dir = ctx.out_dir();
  const fs::path cfg = dir / "replay_config.toml";
  {
    auto f = open_out(cfg);
    f << j["config_snapshot"].get<std::string>();
  }
  std::vector<std::string> args{"hypercd", "--config", cfg.string(), "--out", dir.string(), "--deterministic"};
  if (ctx.common.quiet) args.push_back("--quiet");
  args.push_back(sub);
  const int code = run_cli(args, *ctx.out, *ctx.err);
  if (code != 0) return code;
  std::size_t mismatches = 0;
  for (const auto& a : j["artifacts"]) {
    const std::string path = a["path"];
    const std::string expected = a["sha256"];
    const std::string actual = fs::exists(dir / path) ? cli::sha256_hex(dir / path) : std::string("missing");
    const bool ok = actual == expected;
    mismatches += ok ? 0 : 1;
    *ctx.out << (ok ? "match    " : "MISMATCH ") << path << '\n';
  }
  if (mismatches != 0) {
    fail(ErrorKind::kState, std::to_string(mismatches) + " artifact(s) differ from " + o.manifest);
  }
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Cross-domain self-supervised hyperspectral toolkit", "hypercd"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "key = value config file; command-line flags take precedence");

  Context ctx;
  ctx.out = &out;
  ctx.err = &err;
  ctx.command_line = args;
  app.add_option("--seed", ctx.common.seed, "64-bit master seed")->capture_default_str();
  app.add_flag("--deterministic", ctx.common.deterministic, "sequential execution for bit-exact reruns");
  app.add_option("--out", ctx.common.out, "output directory")->capture_default_str();
  app.add_flag("--quiet", ctx.common.quiet, "no progress log on stderr");

  SynthOpts synth;
  auto* c_synth = app.add_subcommand("synth", "write synthetic labeled domains");
  c_synth->add_option("--domains", synth.domains)->required();
  c_synth->add_option("--bands", synth.bands)->delimiter(',')->required();
  c_synth->add_option("--classes", synth.classes)->delimiter(',')->required();
  c_synth->add_option("--size", synth.size)->capture_default_str();
  c_synth->add_option("--noise", synth.noise)->capture_default_str();
  c_synth->add_option("--margin", synth.margin, "signature separation in noise units")->capture_default_str();
  c_synth->add_option("--tile", synth.tile)->capture_default_str();
  c_synth->add_option("--prefix", synth.prefix)->capture_default_str();

  ImportOpts import;
  auto* c_import = app.add_subcommand("import-csv", "convert a row,col,label,v1..vB CSV to a cube file");
  c_import->add_option("--input", import.input)->required()->check(CLI::ExistingFile);
  c_import->add_option("--id", import.id, "domain id (default: file stem)");

  PretrainOpts pre;
  auto* c_pre = app.add_subcommand("pretrain", "self-supervised contrastive pretraining");
  c_pre->add_option("--sources", pre.sources)->delimiter(',')->required();
  add_model_options(c_pre, pre.model);
  add_pretrain_options(c_pre, pre.cfg);
  add_optimizer_options(c_pre, pre.cfg);

  TrainOpts train;
  auto* c_train = app.add_subcommand("train", "train one regime over repeated random splits");
  c_train->add_option("--regime", train.regime, "scratch | cd_scratch | sup | self_sup")->capture_default_str();
  c_train->add_option("--target", train.target)->required();
  c_train->add_option("--sources", train.sources)->delimiter(',');
  c_train->add_option("--pretrained", train.pretrained, "reuse a pretrained checkpoint");
  add_model_options(c_train, train.model);
  add_pretrain_options(c_train, train.cfg);
  add_optimizer_options(c_train, train.cfg);
  add_finetune_options(c_train, train.cfg);

  EvalOpts ev;
  auto* c_eval = app.add_subcommand("eval", "evaluate a checkpoint on a test split");
  c_eval->add_option("--checkpoint", ev.checkpoint)->required();
  c_eval->add_option("--cube", ev.cube)->required();
  c_eval->add_option("--samples", ev.samples, "training pixels of the split to exclude")->capture_default_str();
  c_eval->add_option("--run", ev.run, "split run index")->capture_default_str();
  c_eval->add_flag("--all", ev.all, "evaluate every labeled pixel");
  c_eval->add_option("--chunk", ev.chunk)->capture_default_str();

  SweepOpts sweep;
  auto* c_sweep = app.add_subcommand("sweep", "repeat a regime over one axis");
  c_sweep->add_option("--axis", sweep.axis, "p | samples | n | backbone")->required();
  c_sweep->add_option("--values", sweep.values)->delimiter(',')->required();
  c_sweep->add_option("--regime", sweep.train.regime)->capture_default_str();
  c_sweep->add_option("--target", sweep.train.target)->required();
  c_sweep->add_option("--sources", sweep.train.sources)->delimiter(',');
  c_sweep->add_option("--pretrained", sweep.train.pretrained, "reuse a pretrained checkpoint (samples axis only)");
  add_model_options(c_sweep, sweep.train.model);
  add_pretrain_options(c_sweep, sweep.train.cfg);
  add_optimizer_options(c_sweep, sweep.train.cfg);
  add_finetune_options(c_sweep, sweep.train.cfg);

  FlopsOpts fl;
  auto* c_flops = app.add_subcommand("flops", "layer-by-layer FLOPs of a backbone on one image");
  add_model_options(c_flops, fl.model);
  c_flops->add_option("--image", fl.image, "take dimensions from a cube file");
  c_flops->add_option("--height", fl.height)->capture_default_str();
  c_flops->add_option("--width", fl.width)->capture_default_str();
  c_flops->add_option("--bands", fl.bands)->capture_default_str();
  c_flops->add_option("--classes", fl.classes)->capture_default_str();

  ReplayOpts replay;
  auto* c_replay = app.add_subcommand("replay", "re-run a manifest and compare artifact checksums");
  c_replay->add_option("--manifest", replay.manifest)->required();

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return static_cast<int>(ErrorKind::kUsage);
  }

  // The effective option set of the chosen command, minus where outputs go, is what a replay needs.
  {
    const std::string prefix = app.get_subcommands().front()->get_name() + ".";
    std::istringstream snap(app.config_to_str(true, false));
    std::string line;
    while (std::getline(snap, line)) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      const std::string key = line.substr(0, eq);
      const bool top_level = key.find('.') == std::string::npos;
      if (key == "out" || key == "config") continue;
      if (top_level || key.rfind(prefix, 0) == 0) ctx.snapshot += line + '\n';
    }
  }

  try {
    if (*c_synth) cmd_synth(ctx, synth);
    if (*c_import) cmd_import(ctx, import);
    if (*c_pre) cmd_pretrain(ctx, pre);
    if (*c_train) cmd_train(ctx, train);
    if (*c_eval) cmd_eval(ctx, ev);
    if (*c_sweep) cmd_sweep(ctx, sweep);
    if (*c_flops) cmd_flops(ctx, fl);
    if (*c_replay) return cmd_replay(ctx, replay);
  } catch (const Error& e) {
    err << "hypercd: " << e.what() << '\n';
    return e.exit_code();
  } catch (const std::exception& e) {
    err << "hypercd: unexpected error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace hypercd
