#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "lldif/data.hpp"
#include "lldif/degrade.hpp"
#include "lldif/eval.hpp"
#include "lldif/plot.hpp"
#include "lldif/runrecord.hpp"
#include "lldif/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// argument handling: one option table per subcommand, resolved with
// CLI flag > config file > built-in default

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Opt {
  std::string name;  // without leading --
  std::string def;
  bool required = false;
  bool is_flag = false;
  std::string help;
};

class Args {
 public:
  Args(std::string subcommand, std::vector<Opt> opts, const std::vector<std::string>& tokens)
      : sub_(std::move(subcommand)), opts_(std::move(opts)) {
    opts_.push_back({"config", "", false, false, "flat key=value config file"});
    opts_.push_back({"dry-run", "", false, true, "print the resolved config and exit"});
    opts_.push_back({"help", "", false, true, "show this help"});

    for (size_t i = 0; i < tokens.size(); ++i) {
      std::string tok = tokens[i];
      if (tok.rfind("--", 0) != 0) throw UsageError("unexpected argument: " + tok);
      tok = tok.substr(2);
      std::string val;
      bool has_val = false;
      if (auto eq = tok.find('='); eq != std::string::npos) {
        val = tok.substr(eq + 1);
        tok = tok.substr(0, eq);
        has_val = true;
      }
      const Opt& o = spec(tok);
      if (o.is_flag) {
        if (has_val) throw UsageError("flag --" + tok + " takes no value");
        cli_[tok] = "true";
        continue;
      }
      if (!has_val) {
        if (i + 1 >= tokens.size()) throw UsageError("flag --" + tok + " expects a value");
        val = tokens[++i];
      }
      cli_[tok] = val;
    }
    if (cli_.count("config")) read_config_file(cli_.at("config"));
  }

  bool help_requested() const { return cli_.count("help") > 0; }
  bool dry_run() const { return cli_.count("dry-run") > 0; }

  std::string str(const std::string& name) const {
    const Opt& o = spec(name);
    if (auto it = cli_.find(name); it != cli_.end()) return it->second;
    if (auto it = file_.find(name); it != file_.end()) return it->second;
    if (o.required)
      throw UsageError(sub_ + ": missing required flag --" + name);
    return o.def;
  }

  bool flag(const std::string& name) const {
    std::string v = str(name);
    return v == "true" || v == "1" || v == "yes";
  }

  int integer(const std::string& name) const {
    std::string v = str(name);
    try {
      size_t pos = 0;
      int out = std::stoi(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return out;
    } catch (const std::exception&) {
      throw UsageError(sub_ + ": --" + name + " expects an integer, got '" + v + "'");
    }
  }

  double real(const std::string& name) const {
    std::string v = str(name);
    try {
      size_t pos = 0;
      double out = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return out;
    } catch (const std::exception&) {
      throw UsageError(sub_ + ": --" + name + " expects a number, got '" + v + "'");
    }
  }

  unsigned long seed() const { return static_cast<unsigned long>(integer("seed")); }

  /// Every option with its resolved value, for --dry-run and run records.
  json resolved() const {
    json out;
    for (const Opt& o : opts_) {
      if (o.name == "help" || o.name == "dry-run") continue;
      if (o.is_flag) {
        out[o.name] = cli_.count(o.name) > 0 || (file_.count(o.name) && flag(o.name));
      } else if (o.required && !cli_.count(o.name) && !file_.count(o.name)) {
        out[o.name] = nullptr;  // missing; str() would throw
      } else {
        out[o.name] = str(o.name);
      }
    }
    return out;
  }

  std::string usage() const {
    std::ostringstream os;
    os << "usage: lldif " << sub_ << " [flags]\n";
    for (const Opt& o : opts_) {
      os << "  --" << o.name;
      if (!o.is_flag) os << " <v>";
      if (o.required)
        os << "  (required)";
      else if (!o.def.empty())
        os << "  [default: " << o.def << "]";
      os << "  " << o.help << "\n";
    }
    return os.str();
  }

 private:
  const Opt& spec(const std::string& name) const {
    for (const Opt& o : opts_)
      if (o.name == name) return o;
    throw UsageError(sub_ + ": unknown flag --" + name);
  }

  void read_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in.good()) throw UsageError(sub_ + ": cannot read config file " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line = line.substr(0, hash);
      auto trim = [](std::string s) {
        size_t a = s.find_first_not_of(" \t\r");
        if (a == std::string::npos) return std::string();
        size_t b = s.find_last_not_of(" \t\r");
        return s.substr(a, b - a + 1);
      };
      line = trim(line);
      if (line.empty()) continue;
      auto eq = line.find('=');
      if (eq == std::string::npos)
        throw UsageError(sub_ + ": config line " + std::to_string(lineno) +
                         " is not key=value: '" + line + "'");
      std::string key = trim(line.substr(0, eq));
      std::string val = trim(line.substr(eq + 1));
      spec(key);  // unknown keys are usage errors, named
      file_[key] = val;
    }
  }

  std::string sub_;
  std::vector<Opt> opts_;
  std::map<std::string, std::string> cli_, file_;
};

// ---------------------------------------------------------------------------
// output locations and run records

std::string out_root() {
  const char* env = std::getenv("LLDIF_OUT_ROOT");
  return env && *env ? env : ".";
}

std::string resolve_out(const std::string& path) {
  if (path.empty() || fs::path(path).is_absolute()) return path;
  fs::path root(out_root());
  fs::create_directories(root);
  return (root / path).string();
}

/// Content hash of an input: files by bytes, directories by their sorted
/// (relative path, size) listing.
std::string hash_input(const std::string& path) {
  if (fs::is_directory(path)) {
    std::vector<std::string> entries;
    for (const auto& e : fs::recursive_directory_iterator(path))
      if (e.is_regular_file())
        entries.push_back(fs::relative(e.path(), path).string() + ":" +
                          std::to_string(e.file_size()));
    std::sort(entries.begin(), entries.end());
    std::string cat;
    for (const auto& s : entries) cat += s + "\n";
    return lldif::sha256_string(cat);
  }
  return lldif::sha256_file(path);
}

struct RecordScope {
  lldif::RunRecord rec;
  explicit RecordScope(const std::string& sub, const Args& args) {
    rec.subcommand = sub;
    rec.config = args.resolved();
    rec.started_at = lldif::utc_timestamp();
  }
  void input(const std::string& path) { rec.input_hashes[path] = hash_input(path); }
  void output(const std::string& path) { rec.outputs.push_back(path); }
  void commit() {
    rec.finished_at = lldif::utc_timestamp();
    lldif::append_run_record(resolve_out("runs.jsonl"), rec);
  }
};

void log_line(const std::string& msg) { std::fprintf(stderr, "lldif: %s\n", msg.c_str()); }

// ---------------------------------------------------------------------------
// shared pieces

const std::vector<Opt> kTrainOpts = {
    {"epochs", "", false, false, "training epochs (default: profile value)"},
    {"batch", "", false, false, "batch size (default: profile value)"},
    {"lr", "", false, false, "initial learning rate (default: profile value)"},
    {"wd", "", false, false, "weight decay (default: profile value)"},
    {"max-steps", "", false, false, "hard optimizer-step cap (default: profile value)"},
    {"lr-schedule", "constant", false, false, "constant | cosine"},
    {"log", "", false, false, "write the per-step JSONL training log here"},
};

lldif::TrainConfig train_config_from(const Args& args, lldif::TrainConfig base) {
  if (!args.str("epochs").empty()) base.epochs = args.integer("epochs");
  if (!args.str("batch").empty()) base.batch_size = args.integer("batch");
  if (!args.str("lr").empty()) base.lr = args.real("lr");
  if (!args.str("wd").empty()) base.weight_decay = args.real("wd");
  if (!args.str("max-steps").empty()) base.max_steps = args.integer("max-steps");
  base.lr_schedule = args.str("lr-schedule");
  base.seed = args.seed();
  return base;
}

lldif::ModelConfig profile_config(const std::string& name) {
  if (name == "desk") return lldif::ModelConfig::desk();
  if (name == "paper") return lldif::ModelConfig::paper_scale();
  throw UsageError("--profile must be desk or paper, got '" + name + "'");
}

std::vector<const lldif::Sample*> split_or_die(const lldif::Dataset& ds,
                                               const std::string& split) {
  auto out = ds.split(split);
  if (out.empty()) throw lldif::Error("dataset has no '" + split + "' samples");
  return out;
}

struct LoadedModel {
  std::optional<lldif::Stage1Model> s1;
  std::optional<lldif::Stage2Model> s2;
  int stage = 0;

  lldif::PredictFn predict_fn(unsigned long seed) const {
    return stage == 1 ? lldif::make_predict_fn(*s1) : lldif::make_predict_fn(*s2, seed);
  }
  const lldif::ModelConfig& config() const { return stage == 1 ? s1->config() : s2->config(); }
};

LoadedModel load_any_checkpoint(const std::string& path) {
  lldif::Checkpoint ck = lldif::load_checkpoint(path);
  int stage = ck.meta.value("stage", 0);
  LoadedModel m;
  m.stage = stage;
  if (stage == 1)
    m.s1.emplace(lldif::load_stage1(path));
  else if (stage == 2)
    m.s2.emplace(lldif::load_stage2(path));
  else
    throw lldif::Error("checkpoint: unknown stage tag in " + path);
  return m;
}

std::vector<int> parse_int_list(const std::string& csv, const std::string& flag) {
  std::vector<int> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw UsageError("--" + flag + ": bad integer '" + item + "'");
    }
  }
  if (out.empty()) throw UsageError("--" + flag + ": empty list");
  return out;
}

std::vector<std::string> parse_str_list(const std::string& csv) {
  std::vector<std::string> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(item);
  return out;
}

// ---------------------------------------------------------------------------
// subcommands

int cmd_synth_toy(const Args& args) {
  lldif::SynthConfig sc;
  sc.n_classes = args.integer("classes");
  sc.n_per_class = args.integer("per-class");
  sc.test_per_class = args.integer("test-per-class");
  sc.resolution = args.integer("resolution");
  sc.seed = args.seed();
  lldif::Dataset ds = lldif::synth_toy_dataset(sc);

  std::string out = resolve_out(args.str("out"));
  lldif::write_dataset(ds, out);
  log_line("wrote " + std::to_string(ds.samples.size()) + " samples to " + out);

  RecordScope rec("synth-toy", args);
  rec.output(out);
  rec.commit();
  return 0;
}

int cmd_degrade(const Args& args) {
  lldif::DegradeParams p = lldif::DegradeParams::default_lowlight();
  if (!args.str("ev").empty()) p.exposure_ev = args.real("ev");
  if (!args.str("wb").empty()) {
    auto gains = parse_str_list(args.str("wb"));
    if (gains.size() != 3) throw UsageError("--wb expects r,g,b gains");
    for (int i = 0; i < 3; ++i) p.white_balance[static_cast<size_t>(i)] = std::stod(gains[i]);
  }
  if (!args.str("highlights").empty()) p.highlights = args.real("highlights");
  if (!args.str("shadows").empty()) p.shadows = args.real("shadows");
  if (args.flag("neutral")) p = lldif::DegradeParams::neutral();
  p.seed = args.seed();

  std::string in = args.str("in");
  std::string out = resolve_out(args.str("out"));
  RecordScope rec("degrade", args);
  rec.input(in);
  lldif::DegradeManifest m = lldif::degrade_dataset(in, out, p);
  log_line("degraded " + std::to_string(m.ok) + " images (" + std::to_string(m.skipped) +
           " skipped) into " + out);
  rec.output(out);
  rec.commit();
  return 0;
}

int cmd_train_stage1(const Args& args) {
  std::string data = args.str("data");
  std::string out = resolve_out(args.str("out"));
  RecordScope rec("train-stage1", args);
  rec.input(data);

  lldif::Dataset ds = lldif::load_dataset(data);
  auto train = split_or_die(ds, "train");
  lldif::ModelConfig cfg = profile_config(args.str("profile"));
  cfg.resolution = ds.manifest.resolution;
  cfg.validate();
  lldif::TrainConfig tc = train_config_from(args, lldif::TrainConfig::desk_stage1());

  lldif::Stage1Model model(cfg, args.seed());
  log_line("stage 1: " + std::to_string(train.size()) + " samples, " +
           std::to_string(tc.epochs) + " epochs");
  lldif::TrainResult res = lldif::train_stage1(model, train, tc);
  log_line("stage 1 done: " + std::to_string(res.steps) + " steps, final epoch loss " +
           std::to_string(res.epoch_loss_mean.back()));

  json meta = {{"train_config", tc.to_json()}, {"result", res.summary()}};
  lldif::save_stage1(out, model, meta);
  rec.output(out);
  if (!args.str("log").empty()) {
    std::string log_path = resolve_out(args.str("log"));
    res.write_jsonl(log_path);
    rec.output(log_path);
  }
  rec.commit();
  return 0;
}

int cmd_train_stage2(const Args& args) {
  std::string data = args.str("data");
  std::string s1_path = args.str("s1-ckpt");
  std::string out = resolve_out(args.str("out"));
  RecordScope rec("train-stage2", args);
  rec.input(data);
  rec.input(s1_path);

  lldif::Checkpoint s1_ck = lldif::load_checkpoint(s1_path);
  if (s1_ck.meta.value("stage", 0) != 1)
    throw lldif::Error("train-stage2: --s1-ckpt is not a stage-1 checkpoint");
  lldif::ModelConfig cfg = lldif::ModelConfig::from_json(s1_ck.meta.at("config"));
  cfg.T = args.integer("T");
  cfg.variant = args.str("variant");
  if (cfg.variant != "paper" && cfg.variant != "ddpm_bar")
    throw UsageError("--variant must be paper or ddpm_bar, got '" + cfg.variant + "'");
  if (cfg.T < 1) throw UsageError("--T must be >= 1");
  cfg.validate();

  lldif::Stage2Options opt;
  opt.loss = args.str("loss");
  if (opt.loss != "total" && opt.loss != "ce")
    throw UsageError("--loss must be total or ce, got '" + opt.loss + "'");
  opt.use_diffusion = !args.flag("no-diffusion");
  opt.insert_noise = opt.use_diffusion && !args.flag("no-insert-noise");
  opt.validate();

  lldif::Dataset low = lldif::load_dataset(data);
  auto low_train = split_or_die(low, "train");
  std::optional<lldif::Dataset> clear;
  std::vector<const lldif::Sample*> clear_train;
  if (!args.str("clear-data").empty()) {
    rec.input(args.str("clear-data"));
    clear.emplace(lldif::load_dataset(args.str("clear-data")));
    clear_train = split_or_die(*clear, "train");
  }
  auto pairs = lldif::pair_samples(low_train, clear_train);

  lldif::TrainConfig tc = train_config_from(args, lldif::TrainConfig::desk_stage2());
  lldif::Stage2Model model(cfg, args.seed(), opt);
  model.init_from_stage1(s1_ck);
  log_line("stage 2: " + std::to_string(pairs.size()) + " pairs, loss=" + opt.loss +
           (opt.use_diffusion ? ", T=" + std::to_string(cfg.T) : ", no diffusion"));
  lldif::TrainResult res = lldif::train_stage2(model, pairs, tc);
  log_line("stage 2 done: " + std::to_string(res.steps) + " steps, final epoch loss " +
           std::to_string(res.epoch_loss_mean.back()));

  json meta = {{"train_config", tc.to_json()},
               {"result", res.summary()},
               {"s1_checkpoint", s1_path}};
  lldif::save_stage2(out, model, meta);
  rec.output(out);
  if (!args.str("log").empty()) {
    std::string log_path = resolve_out(args.str("log"));
    res.write_jsonl(log_path);
    rec.output(log_path);
  }
  rec.commit();
  return 0;
}

int cmd_eval(const Args& args) {
  std::string ckpt = args.str("ckpt");
  std::string data = args.str("data");
  RecordScope rec("eval", args);
  rec.input(ckpt);
  rec.input(data);

  LoadedModel model = load_any_checkpoint(ckpt);
  lldif::Dataset ds = lldif::load_dataset(data);
  auto samples = split_or_die(ds, args.str("split"));
  if (model.stage == 2 && !args.str("T").empty()) {
    int T = args.integer("T");
    if (T != model.s2->schedule().T()) model.s2->set_schedule(lldif::default_schedule(T));
  }

  lldif::EvalReport report =
      lldif::evaluate(model.predict_fn(args.seed()), samples, model.config().n_classes);
  std::fputs(report.format_table({lldif::kClassNames.begin(), lldif::kClassNames.end()}).c_str(),
             stdout);

  std::string out = resolve_out(args.str("out"));
  json j = report.to_json();
  j["checkpoint"] = ckpt;
  j["stage"] = model.stage;
  j["split"] = args.str("split");
  std::ofstream f(out);
  lldif::check(f.good(), "eval: cannot write " + out);
  f << j.dump(2) << "\n";
  rec.output(out);
  rec.commit();
  return 0;
}

int cmd_ablate(const Args& args) {
  std::string data = args.str("data");
  std::string s1_path = args.str("s1-ckpt");
  RecordScope rec("ablate", args);
  rec.input(data);
  rec.input(s1_path);

  lldif::Stage1Model s1 = lldif::load_stage1(s1_path);
  lldif::Dataset low = lldif::load_dataset(data);
  auto train = split_or_die(low, "train");
  std::vector<const lldif::Sample*> clear_train;
  std::optional<lldif::Dataset> clear;
  if (!args.str("clear-data").empty()) {
    rec.input(args.str("clear-data"));
    clear.emplace(lldif::load_dataset(args.str("clear-data")));
    clear_train = split_or_die(*clear, "train");
  }
  std::string eval_split = args.str("split");
  auto eval_samples = split_or_die(low, eval_split);

  lldif::TrainConfig tc = train_config_from(args, lldif::TrainConfig::desk_stage2());
  log_line("ablation: 4 variants x " + std::to_string(tc.epochs) + " epochs");
  lldif::AblationGrid grid =
      lldif::ablation_run(s1, lldif::pair_samples(train, clear_train), eval_samples, tc);
  std::fputs(grid.format_table().c_str(), stdout);

  std::string out = resolve_out(args.str("out"));
  std::ofstream f(out);
  lldif::check(f.good(), "ablate: cannot write " + out);
  f << grid.to_json().dump(2) << "\n";
  rec.output(out);
  rec.commit();
  return 0;
}

int cmd_sweep_T(const Args& args) {
  std::string ckpt = args.str("ckpt");
  std::string data = args.str("data");
  RecordScope rec("sweep-T", args);
  rec.input(ckpt);
  rec.input(data);

  LoadedModel model = load_any_checkpoint(ckpt);
  if (model.stage != 2) throw lldif::Error("sweep-T: a stage-2 checkpoint is required");
  lldif::Dataset ds = lldif::load_dataset(data);
  auto samples = split_or_die(ds, args.str("split"));
  std::vector<int> T_list = parse_int_list(args.str("T-list"), "T-list");

  auto rows =
      lldif::iteration_sweep(*model.s2, samples, T_list, args.seed(), model.config().n_classes);

  std::string out_dir = resolve_out(args.str("out"));
  fs::create_directories(out_dir);
  json summary = json::array();
  for (const auto& row : rows) {
    std::fprintf(stdout, "T=%-3d accuracy %.4f  (%.2fs)\n", row.T, row.report.accuracy,
                 row.seconds);
    std::string base = out_dir + "/epd_T" + std::to_string(row.T);
    lldif::save_array(base + ".arr", row.epd.embeddings);
    summary.push_back({{"T", row.T},
                       {"accuracy", row.report.accuracy},
                       {"seconds", row.seconds},
                       {"report", row.report.to_json()},
                       {"epd_file", base + ".arr"}});
  }
  lldif::save_array(out_dir + "/labels.arr", rows[0].epd.labels);
  std::string summary_path = out_dir + "/sweep.json";
  std::ofstream f(summary_path);
  lldif::check(f.good(), "sweep-T: cannot write " + summary_path);
  f << json{{"rows", summary}}.dump(2) << "\n";
  rec.output(out_dir);
  rec.commit();
  return 0;
}

int cmd_export_emb(const Args& args) {
  std::string ckpt = args.str("ckpt");
  std::string data = args.str("data");
  RecordScope rec("export-emb", args);
  rec.input(ckpt);
  rec.input(data);

  LoadedModel model = load_any_checkpoint(ckpt);
  lldif::Dataset ds = lldif::load_dataset(data);
  auto samples = split_or_die(ds, args.str("split"));
  lldif::EmbeddingExport ex =
      lldif::export_embeddings(model.predict_fn(args.seed()), samples, args.str("layer"));

  std::string prefix = resolve_out(args.str("out"));
  if (auto parent = fs::path(prefix).parent_path(); !parent.empty())
    fs::create_directories(parent);
  lldif::save_array(prefix + "_emb.arr", ex.embeddings);
  lldif::save_array(prefix + "_labels.arr", ex.labels);
  lldif::save_array(prefix + "_flags.arr", ex.low_flags);
  log_line("exported " + std::to_string(ex.embeddings.dim(0)) + " rows to " + prefix + "_*.arr");
  for (const char* suffix : {"_emb.arr", "_labels.arr", "_flags.arr"})
    rec.output(prefix + suffix);
  rec.commit();
  return 0;
}

int cmd_plot(const Args& args) {
  std::string kind = args.str("kind");
  std::string in = args.str("in");
  std::string out = resolve_out(args.str("out"));
  RecordScope rec("plot", args);
  rec.input(in);

  auto read_rows = [&in]() {
    // accepts either JSON lines or a JSON object with a "rows" array
    std::ifstream f(in);
    lldif::check(f.good(), "plot: cannot read " + in);
    std::vector<json> rows;
    std::string first_line;
    std::getline(f, first_line);
    try {
      json j = json::parse(first_line);
      if (j.is_object() && !j.contains("rows")) rows.push_back(j);
    } catch (const json::exception&) {
      // fall through to whole-file parse
    }
    if (!rows.empty()) {
      std::string line;
      while (std::getline(f, line))
        if (!line.empty()) rows.push_back(json::parse(line));
      return rows;
    }
    f.clear();
    f.seekg(0);
    json whole = json::parse(f);
    if (whole.is_array())
      for (const auto& r : whole) rows.push_back(r);
    else if (whole.contains("rows"))
      for (const auto& r : whole.at("rows")) rows.push_back(r);
    else
      rows.push_back(whole);
    return rows;
  };

  if (kind == "curves") {
    auto rows = read_rows();
    std::string xkey = args.str("x");
    std::vector<lldif::PlotSeries> series;
    for (const std::string& key : parse_str_list(args.str("keys"))) {
      lldif::PlotSeries s;
      for (const auto& r : rows) {
        if (!r.contains(key)) continue;
        if (!xkey.empty() && r.contains(xkey)) s.x.push_back(r.at(xkey).get<double>());
        s.y.push_back(r.at(key).get<double>());
      }
      if (s.x.size() != s.y.size()) s.x.clear();
      if (s.y.empty()) throw lldif::Error("plot: key '" + key + "' not found in " + in);
      series.push_back(std::move(s));
    }
    lldif::plot_curves(out, series);
  } else if (kind == "hist") {
    auto rows = read_rows();
    std::string key = args.str("keys");
    std::vector<double> values;
    for (const auto& r : rows) {
      if (r.is_number()) values.push_back(r.get<double>());
      else if (!key.empty() && r.contains(key)) values.push_back(r.at(key).get<double>());
    }
    if (values.empty()) throw lldif::Error("plot: no numeric values found in " + in);
    lldif::plot_histogram(out, values, args.integer("bins"));
  } else if (kind == "confidence") {
    std::ifstream f(in);
    lldif::check(f.good(), "plot: cannot read " + in);
    json rep = json::parse(f);
    const auto& cc = rep.at("confidence_correct");
    std::vector<double> bars = {cc.at("clear").at("mean").get<double>(),
                                cc.at("low_light").at("mean").get<double>()};
    lldif::plot_bars(out, bars, 1.0);
  } else {
    throw UsageError("--kind must be curves, hist, or confidence, got '" + kind + "'");
  }
  log_line("wrote " + out);
  rec.output(out);
  rec.commit();
  return 0;
}

// ---------------------------------------------------------------------------
// dispatch

struct Subcommand {
  std::string name;
  std::string help;
  std::vector<Opt> opts;
  int (*run)(const Args&);
};

std::vector<Opt> with_train_opts(std::vector<Opt> opts) {
  opts.insert(opts.end(), kTrainOpts.begin(), kTrainOpts.end());
  return opts;
}

const std::vector<Subcommand>& subcommands() {
  static const std::vector<Subcommand> cmds = {
      {"synth-toy",
       "generate a class-separable synthetic dataset",
       {{"out", "", true, false, "output dataset directory"},
        {"classes", "2", false, false, "number of classes (2-7)"},
        {"per-class", "32", false, false, "training images per class"},
        {"test-per-class", "8", false, false, "test images per class"},
        {"resolution", "32", false, false, "square image size"},
        {"seed", "7", false, false, "generator seed"}},
       cmd_synth_toy},
      {"degrade",
       "apply the low-light transform to a dataset tree",
       {{"in", "", true, false, "source dataset directory"},
        {"out", "", true, false, "destination directory"},
        {"ev", "", false, false, "exposure shift in EV (<= 0)"},
        {"wb", "", false, false, "white-balance gains r,g,b"},
        {"highlights", "", false, false, "highlight roll-off in [-1,0]"},
        {"shadows", "", false, false, "shadow crush in [-1,0]"},
        {"neutral", "", false, true, "identity parameters (pass-through copy)"},
        {"seed", "7", false, false, "per-image jitter seed"}},
       cmd_degrade},
      {"train-stage1",
       "train the prior extractor and restorer on labeled images",
       with_train_opts({{"data", "", true, false, "dataset directory"},
                        {"out", "s1.ckpt", false, false, "checkpoint path"},
                        {"profile", "desk", false, false, "model size: desk | paper"},
                        {"seed", "7", false, false, "init/shuffle seed"}}),
       cmd_train_stage1},
      {"train-stage2",
       "train the diffusion-based prior recovery against a stage-1 checkpoint",
       with_train_opts({{"data", "", true, false, "(degraded) dataset directory"},
                        {"s1-ckpt", "", true, false, "stage-1 checkpoint"},
                        {"out", "s2.ckpt", false, false, "checkpoint path"},
                        {"clear-data", "", false, false,
                         "clear counterpart dataset (default: self-paired)"},
                        {"loss", "total", false, false, "total | ce"},
                        {"no-diffusion", "", false, true, "drop the denoising chain"},
                        {"no-insert-noise", "", false, true,
                         "start the training chain from the conditioning vector"},
                        {"T", "4", false, false, "diffusion iterations"},
                        {"variant", "paper", false, false,
                         "reverse-step coefficient: paper | ddpm_bar"},
                        {"seed", "7", false, false, "init/shuffle/noise seed"}}),
       cmd_train_stage2},
      {"eval",
       "score a checkpoint on a dataset split",
       {{"ckpt", "", true, false, "stage-1 or stage-2 checkpoint"},
        {"data", "", true, false, "dataset directory"},
        {"split", "test", false, false, "train | test"},
        {"T", "", false, false, "override diffusion iterations (stage 2)"},
        {"out", "eval_report.json", false, false, "report path"},
        {"seed", "7", false, false, "inference noise seed"}},
       cmd_eval},
      {"ablate",
       "train and score the four component-toggle variants",
       with_train_opts({{"data", "", true, false, "(degraded) dataset directory"},
                        {"s1-ckpt", "", true, false, "stage-1 checkpoint"},
                        {"clear-data", "", false, false, "clear counterpart dataset"},
                        {"split", "test", false, false, "evaluation split"},
                        {"out", "ablation.json", false, false, "grid output path"},
                        {"seed", "7", false, false, "training seed"}}),
       cmd_ablate},
      {"sweep-T",
       "re-run stage-2 inference at several chain lengths",
       {{"ckpt", "", true, false, "stage-2 checkpoint"},
        {"data", "", true, false, "dataset directory"},
        {"T-list", "1,2,4,8", false, false, "comma-separated chain lengths"},
        {"split", "test", false, false, "train | test"},
        {"out", "sweep", false, false, "output directory"},
        {"seed", "7", false, false, "inference noise seed"}},
       cmd_sweep_T},
      {"export-emb",
       "dump per-sample embeddings for external projection",
       {{"ckpt", "", true, false, "stage-1 or stage-2 checkpoint"},
        {"data", "", true, false, "dataset directory"},
        {"layer", "epd", false, false, "epd | penultimate"},
        {"split", "test", false, false, "train | test"},
        {"out", "embeddings", false, false, "output file prefix"},
        {"seed", "7", false, false, "inference noise seed"}},
       cmd_export_emb},
      {"plot",
       "render curves/histogram/confidence figures from emitted JSON",
       {{"kind", "", true, false, "curves | hist | confidence"},
        {"in", "", true, false, "JSON or JSONL input"},
        {"out", "plot.png", false, false, "output image"},
        {"keys", "loss", false, false, "comma-separated keys (curves) or value key (hist)"},
        {"x", "step", false, false, "x-axis key for curves"},
        {"bins", "20", false, false, "histogram bins"},
        {"seed", "7", false, false, "unused; accepted for uniformity"}},
       cmd_plot},
  };
  return cmds;
}

void print_usage(FILE* to) {
  std::fprintf(to, "usage: lldif <subcommand> [flags]\n\nsubcommands:\n");
  for (const auto& c : subcommands()) std::fprintf(to, "  %-13s %s\n", c.name.c_str(), c.help.c_str());
  std::fprintf(to,
               "\nper-subcommand help: lldif <subcommand> --help\n"
               "config files: --config FILE with flat key=value lines "
               "(precedence: flag > file > default)\n"
               "output root: set LLDIF_OUT_ROOT to redirect relative outputs (default: .)\n");
}

int edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::vector<int>> d(a.size() + 1, std::vector<int>(b.size() + 1));
  for (size_t i = 0; i <= a.size(); ++i) d[i][0] = static_cast<int>(i);
  for (size_t j = 0; j <= b.size(); ++j) d[0][j] = static_cast<int>(j);
  for (size_t i = 1; i <= a.size(); ++i)
    for (size_t j = 1; j <= b.size(); ++j)
      d[i][j] = std::min({d[i - 1][j] + 1, d[i][j - 1] + 1,
                          d[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
  return d[a.size()][b.size()];
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> tokens(argv + 1, argv + argc);
  if (tokens.empty()) {
    print_usage(stderr);
    return 2;
  }
  if (tokens[0] == "--help" || tokens[0] == "help") {
    print_usage(stdout);
    return 0;
  }

  const Subcommand* cmd = nullptr;
  for (const auto& c : subcommands())
    if (c.name == tokens[0]) cmd = &c;
  if (!cmd) {
    const Subcommand* best = &subcommands()[0];
    for (const auto& c : subcommands())
      if (edit_distance(tokens[0], c.name) < edit_distance(tokens[0], best->name)) best = &c;
    std::fprintf(stderr, "lldif: unknown subcommand '%s' (did you mean '%s'?)\n",
                 tokens[0].c_str(), best->name.c_str());
    print_usage(stderr);
    return 2;
  }

  try {
    Args args(cmd->name, cmd->opts, {tokens.begin() + 1, tokens.end()});
    if (args.help_requested()) {
      std::fputs(args.usage().c_str(), stdout);
      return 0;
    }
    if (args.dry_run()) {
      std::fputs(args.resolved().dump(2).c_str(), stdout);
      std::fputs("\n", stdout);
      return 0;
    }
    return cmd->run(args);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "lldif: %s\n", e.what());
    std::fprintf(stderr, "try: lldif %s --help\n", cmd->name.c_str());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "lldif: error: %s\n", e.what());
    return 1;
  }
}
