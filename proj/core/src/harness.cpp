#include "cfft/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cstdarg>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <thread>

#include "cfft/parallel.hpp"
#include "cfft/rng.hpp"

namespace fs = std::filesystem;

namespace cfft {

namespace {

std::string fmt(const char* format, ...) {
  char buf[256];
  va_list args;
  va_start(args, format);
  std::vsnprintf(buf, sizeof(buf), format, args);
  va_end(args);
  return buf;
}

Masking masking_from_name(const std::string& s) {
  if (s == "random") return Masking::kRandom;
  if (s == "context") return Masking::kContext;
  if (s == "object") return Masking::kObject;
  throw ConfigError("config: unknown masking '" + s + "'");
}

Refilling refilling_from_name(const std::string& s) {
  if (s == "none") return Refilling::kNone;
  if (s == "single") return Refilling::kSingle;
  if (s == "multi") return Refilling::kMulti;
  throw ConfigError("config: unknown refilling '" + s + "'");
}

Method method_from_name(const std::string& s) {
  if (s == "vanilla") return Method::kVanilla;
  if (s == "no-masking") return Method::kNoMasking;
  if (s == "counterfactual") return Method::kCounterfactual;
  throw ConfigError("config: unknown method '" + s + "'");
}

template <typename T>
T get_or(const nlohmann::json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: bad value for '") + key + "': " + e.what());
  }
}

void apply_preset(ExperimentConfig& c, const std::string& preset) {
  if (preset == "desk") {
    // Defaults already are the desk-scale preset.
  } else if (preset == "paper-constants") {
    c.train.batch_size = 512;
    c.train.epochs = 10;
    c.train.learning_rate = 3e-5;
    c.train.warmup_steps = 500;
    c.train.weight_decay = 0.1;
    c.train.clip_norm = 1.0;
    c.train.beta = 30.0;
    c.train.gamma = 1.0;
    c.train.kd_temperature = 10.0;
  } else {
    throw ConfigError("config: unknown preset '" + preset + "'");
  }
}

StrategyConfig strategy_from_json(const nlohmann::json& j, const StrategyConfig& base) {
  StrategyConfig s = base;
  if (j.contains("masking")) s.masking = masking_from_name(j.at("masking").get<std::string>());
  if (j.contains("refilling"))
    s.refilling = refilling_from_name(j.at("refilling").get<std::string>());
  s.masking_rate = get_or(j, "rate", s.masking_rate);
  s.threshold = get_or(j, "threshold", s.threshold);
  s.use_predicted_class = get_or(j, "use_predicted_class", s.use_predicted_class);
  return s;
}

void train_from_json(const nlohmann::json& j, TrainConfig& t) {
  t.beta = get_or(j, "beta", t.beta);
  t.gamma = get_or(j, "gamma", t.gamma);
  t.kd_temperature = get_or(j, "kd_temperature", t.kd_temperature);
  t.epochs = get_or(j, "epochs", t.epochs);
  t.batch_size = get_or(j, "batch_size", t.batch_size);
  t.learning_rate = get_or(j, "learning_rate", t.learning_rate);
  t.warmup_steps = get_or(j, "warmup_steps", t.warmup_steps);
  t.weight_decay = get_or(j, "weight_decay", t.weight_decay);
  t.clip_norm = get_or(j, "clip_norm", t.clip_norm);
  t.threads = get_or(j, "threads", t.threads);
  t.selection_metric = get_or<std::string>(j, "selection_metric", t.selection_metric);
  t.normalize_features = get_or(j, "normalize_features", t.normalize_features);
  if (j.contains("method")) t.method = method_from_name(j.at("method").get<std::string>());
  if (j.contains("strategy"))
    t.strategy = strategy_from_json(j.at("strategy"), t.strategy.value_or(StrategyConfig{}));
}

nlohmann::json train_to_json(const TrainConfig& t) {
  nlohmann::json j{{"beta", t.beta},
                   {"gamma", t.gamma},
                   {"kd_temperature", t.kd_temperature},
                   {"epochs", t.epochs},
                   {"batch_size", t.batch_size},
                   {"learning_rate", t.learning_rate},
                   {"warmup_steps", t.warmup_steps},
                   {"weight_decay", t.weight_decay},
                   {"clip_norm", t.clip_norm},
                   {"selection_metric", t.selection_metric},
                   {"normalize_features", t.normalize_features},
                   {"method", method_name(t.method)}};
  if (t.strategy) {
    j["strategy"] = {{"masking", masking_name(t.strategy->masking)},
                     {"refilling", refilling_name(t.strategy->refilling)},
                     {"rate", t.strategy->masking_rate},
                     {"threshold", t.strategy->threshold},
                     {"use_predicted_class", t.strategy->use_predicted_class}};
  }
  return j;
}

}  // namespace

ModelConfig ExperimentConfig::model_config() const {
  return ModelConfig::for_spec(scm, model_embed, model_layers, model_heads, model_mlp);
}

void ExperimentConfig::validate() const {
  scm.validate();
  if (data.train <= 0 || data.val <= 0 || data.test <= 0 || data.ood <= 0 ||
      data.diverse_train <= 0 || data.diverse_val <= 0)
    throw ConfigError("config: all dataset counts must be positive");
  if (seeds.empty()) throw ConfigError("config: seeds must not be empty");
  if (jobs < 1) throw ConfigError("config: jobs must be >= 1");
  if (format != "csv" && format != "json")
    throw ConfigError("config: format must be 'csv' or 'json'");
  if (out_dir.empty()) throw ConfigError("config: output directory not set");
  for (double a : alpha_grid)
    if (!(a >= 0.0 && a <= 1.0)) throw ConfigError("config: alpha grid outside [0,1]");
  model_config();  // validates model dims
  train.validate();
  teacher_train.validate();
  if (!(teacher_floor >= 0.0 && teacher_floor <= 1.0))
    throw ConfigError("config: teacher floor must be in [0,1]");
}

ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  // Teacher routine differs from fine-tuning: random init wants a larger
  // rate and no distillation.
  c.teacher_train.method = Method::kVanilla;
  c.teacher_train.learning_rate = 1e-3;
  c.teacher_train.epochs = 20;
  c.teacher_train.weight_decay = 0.05;
  c.teacher_train.seed = 11;

  if (j.contains("preset")) apply_preset(c, j.at("preset").get<std::string>());

  if (j.contains("scm")) {
    const auto& s = j.at("scm");
    c.scm.classes = get_or(s, "classes", c.scm.classes);
    c.scm.domains = get_or(s, "domains", c.scm.domains);
    c.scm.correlation = get_or(s, "correlation", c.scm.correlation);
    c.scm.image_side = get_or(s, "image_side", c.scm.image_side);
    c.scm.patch_side = get_or(s, "patch_side", c.scm.patch_side);
    c.scm.noise_amp = get_or(s, "noise_amp", c.scm.noise_amp);
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    c.data.train = get_or(d, "train", c.data.train);
    c.data.val = get_or(d, "val", c.data.val);
    c.data.test = get_or(d, "test", c.data.test);
    c.data.ood = get_or(d, "ood", c.data.ood);
    c.data.diverse_train = get_or(d, "diverse_train", c.data.diverse_train);
    c.data.diverse_val = get_or(d, "diverse_val", c.data.diverse_val);
    c.data.seed = get_or(d, "seed", c.data.seed);
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    c.model_embed = get_or(m, "embed", c.model_embed);
    c.model_layers = get_or(m, "layers", c.model_layers);
    c.model_heads = get_or(m, "heads", c.model_heads);
    c.model_mlp = get_or(m, "mlp_hidden", c.model_mlp);
  }
  if (j.contains("train")) train_from_json(j.at("train"), c.train);
  if (j.contains("teacher")) {
    train_from_json(j.at("teacher"), c.teacher_train);
    c.teacher_floor = get_or(j.at("teacher"), "floor", c.teacher_floor);
  }
  if (j.contains("sweep")) {
    const auto& s = j.at("sweep");
    if (s.contains("maskings")) {
      c.sweep.maskings.clear();
      for (const auto& m : s.at("maskings"))
        c.sweep.maskings.push_back(masking_from_name(m.get<std::string>()));
    }
    if (s.contains("refillings")) {
      c.sweep.refillings.clear();
      for (const auto& r : s.at("refillings"))
        c.sweep.refillings.push_back(refilling_from_name(r.get<std::string>()));
    }
    c.sweep.rates = get_or(s, "rates", c.sweep.rates);
    c.sweep.thresholds = get_or(s, "thresholds", c.sweep.thresholds);
    c.sweep.include_vanilla = get_or(s, "include_vanilla", c.sweep.include_vanilla);
    c.sweep.include_no_masking = get_or(s, "include_no_masking", c.sweep.include_no_masking);
  }
  if (j.contains("alpha_grid")) {
    if (j.at("alpha_grid").is_number_integer()) {
      int count = j.at("alpha_grid").get<int>();
      if (count < 2) throw ConfigError("config: alpha grid needs at least 2 points");
      for (int i = 0; i < count; ++i)
        c.alpha_grid.push_back(static_cast<double>(i) / static_cast<double>(count - 1));
    } else {
      c.alpha_grid = j.at("alpha_grid").get<std::vector<double>>();
    }
  }
  c.seeds = get_or(j, "seeds", c.seeds);
  c.out_dir = get_or<std::string>(j, "out", c.out_dir);
  c.jobs = get_or(j, "jobs", c.jobs);
  c.format = get_or<std::string>(j, "format", c.format);
  if (c.alpha_grid.empty())
    for (int i = 0; i <= 20; ++i) c.alpha_grid.push_back(static_cast<double>(i) / 20.0);
  return c;
}

ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config file not found: " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file is not valid JSON: " + std::string(e.what()));
  }
  return config_from_json(j);
}

nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["scm"] = {{"classes", c.scm.classes},         {"domains", c.scm.domains},
              {"correlation", c.scm.correlation}, {"image_side", c.scm.image_side},
              {"patch_side", c.scm.patch_side},   {"noise_amp", c.scm.noise_amp}};
  j["data"] = {{"train", c.data.train},
               {"val", c.data.val},
               {"test", c.data.test},
               {"ood", c.data.ood},
               {"diverse_train", c.data.diverse_train},
               {"diverse_val", c.data.diverse_val},
               {"seed", c.data.seed}};
  j["model"] = {{"embed", c.model_embed},
                {"layers", c.model_layers},
                {"heads", c.model_heads},
                {"mlp_hidden", c.model_mlp}};
  j["train"] = train_to_json(c.train);
  j["teacher"] = train_to_json(c.teacher_train);
  j["teacher"]["floor"] = c.teacher_floor;
  nlohmann::json maskings = nlohmann::json::array(), refillings = nlohmann::json::array();
  for (Masking m : c.sweep.maskings) maskings.push_back(masking_name(m));
  for (Refilling r : c.sweep.refillings) refillings.push_back(refilling_name(r));
  j["sweep"] = {{"maskings", maskings},
                {"refillings", refillings},
                {"rates", c.sweep.rates},
                {"thresholds", c.sweep.thresholds},
                {"include_vanilla", c.sweep.include_vanilla},
                {"include_no_masking", c.sweep.include_no_masking}};
  j["alpha_grid"] = c.alpha_grid;
  j["seeds"] = c.seeds;
  return j;
}

std::string config_hash(const ExperimentConfig& config) {
  // nlohmann objects iterate in sorted key order, so dump() is canonical.
  return hex64(fnv1a64(config_to_json(config).dump()));
}

ArtifactPaths artifact_paths(const std::string& out_dir) {
  ArtifactPaths p;
  p.data_dir = out_dir + "/data";
  p.runs_dir = out_dir + "/runs";
  p.id_train = p.data_dir + "/id-train.cfds";
  p.id_val = p.data_dir + "/id-val.cfds";
  p.id_test = p.data_dir + "/id-test.cfds";
  p.ood_test = p.data_dir + "/ood-test.cfds";
  p.diverse_train = p.data_dir + "/diverse-train.cfds";
  p.diverse_val = p.data_dir + "/diverse-val.cfds";
  p.teacher_checkpoint = out_dir + "/teacher.cfck";
  p.teacher_log = out_dir + "/teacher_log.csv";
  p.teacher_summary = out_dir + "/teacher_summary.json";
  p.sweep_csv = out_dir + "/sweep.csv";
  p.sweep_summary_csv = out_dir + "/sweep_summary.csv";
  p.mask_table_csv = out_dir + "/mask_table.csv";
  p.wise_csv = out_dir + "/wise_curve.csv";
  p.wise_svg = out_dir + "/wise_curve.svg";
  p.report_md = out_dir + "/report.md";
  return p;
}

std::string strategy_tag(Method method, const std::optional<StrategyConfig>& strategy) {
  if (method == Method::kVanilla) return "vanilla";
  if (method == Method::kNoMasking) return "no-masking";
  if (!strategy) throw ConfigError("strategy tag: counterfactual without strategy");
  return fmt("%s-%s-p%.2f", masking_name(strategy->masking), refilling_name(strategy->refilling),
             strategy->active_param());
}

// ---------------------------------------------------------------------------
// Commands

namespace {

Dataset load_artifact(const std::string& path) {
  if (!fs::exists(path))
    throw MissingArtifactError("missing artifact: " + path + " (run gen-data / pretrain first)");
  return load_dataset(path);
}

struct LoadedBenchmark {
  Dataset id_train, id_val, id_test, ood_test;
};

LoadedBenchmark load_benchmark(const ArtifactPaths& p) {
  return {load_artifact(p.id_train), load_artifact(p.id_val), load_artifact(p.id_test),
          load_artifact(p.ood_test)};
}

std::pair<ModelConfig, ModelParams> load_teacher(const ArtifactPaths& p) {
  if (!fs::exists(p.teacher_checkpoint))
    throw MissingArtifactError("missing artifact: " + p.teacher_checkpoint +
                               " (run pretrain first)");
  return load_checkpoint(p.teacher_checkpoint);
}

RunResult run_cell(const ExperimentConfig& config, const LoadedBenchmark& bench,
                   const ModelConfig& mc, const ModelParams& teacher, Method method,
                   const std::optional<StrategyConfig>& strategy, uint64_t seed, int threads,
                   const std::string& checkpoint_path) {
  TrainConfig tc = config.train;
  tc.method = method;
  tc.strategy = strategy;
  tc.seed = seed;
  tc.threads = threads;
  FineTuneResult r = fine_tune(mc, tc, bench.id_train, bench.id_val, teacher, teacher, nullptr);
  RunResult out;
  out.method = method;
  out.strategy = strategy;
  out.seed = seed;
  out.selected_epoch = r.log.selected_epoch;
  out.val_accuracy = r.log.selected_val_accuracy;
  std::string id = strategy_tag(method, strategy) + fmt("-seed%llu",
                                                        static_cast<unsigned long long>(seed));
  out.report = evaluate_model(mc, r.params, bench.id_test, {bench.ood_test}, id, threads);
  if (!checkpoint_path.empty()) {
    save_checkpoint(checkpoint_path, mc, r.params);
    out.checkpoint_path = checkpoint_path;
    std::string base = checkpoint_path.substr(0, checkpoint_path.rfind('.'));
    write_train_log_csv(base + "-trainlog.csv", r.log);
    write_train_summary_json(base + "-summary.json", r.log);
  }
  return out;
}

void write_sweep_csv(const std::string& path, const std::vector<RunResult>& rows,
                     const std::string& hash) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw MissingArtifactError("cannot write sweep csv: " + path);
  std::vector<std::string> ood_names;
  if (!rows.empty())
    for (const SplitResult& s : rows.front().report.splits)
      if (s.ood) ood_names.push_back(s.name);
  f << "method,masking,refilling,param,seed,selected_epoch,id_val,id_test";
  for (const auto& n : ood_names) f << "," << n;
  f << ",ood_avg,config_hash\n";
  for (const RunResult& r : rows) {
    const bool cf = r.method == Method::kCounterfactual;
    f << method_name(r.method) << ",";
    f << (cf ? masking_name(r.strategy->masking) : "/") << ",";
    f << (cf ? refilling_name(r.strategy->refilling) : "/") << ",";
    f << (cf ? fmt("%.2f", r.strategy->active_param()) : "/") << ",";
    f << r.seed << "," << r.selected_epoch << "," << fmt("%.6f", r.val_accuracy) << ","
      << fmt("%.6f", r.report.id_top1);
    for (const SplitResult& s : r.report.splits)
      if (s.ood) f << "," << fmt("%.6f", s.top1);
    f << "," << fmt("%.6f", r.report.ood_avg) << "," << hash << "\n";
  }
}

struct SummaryRow {
  std::string method, masking, refilling, param;
  double id_test = 0, ood_avg = 0;
  std::vector<double> ood;
  int seeds = 0;
};

void write_sweep_summary_csv(const std::string& path, const std::vector<RunResult>& rows,
                             const std::string& hash) {
  // Seed-averaged table in the (method, masking, refilling) layout.
  std::vector<std::string> ood_names;
  if (!rows.empty())
    for (const SplitResult& s : rows.front().report.splits)
      if (s.ood) ood_names.push_back(s.name);
  std::vector<std::pair<std::string, SummaryRow>> acc;
  for (const RunResult& r : rows) {
    const bool cf = r.method == Method::kCounterfactual;
    SummaryRow key;
    key.method = method_name(r.method);
    key.masking = cf ? masking_name(r.strategy->masking) : "/";
    key.refilling = cf ? refilling_name(r.strategy->refilling) : "/";
    key.param = cf ? fmt("%.2f", r.strategy->active_param()) : "/";
    std::string tag = key.method + "|" + key.masking + "|" + key.refilling + "|" + key.param;
    auto it = std::find_if(acc.begin(), acc.end(), [&](const auto& kv) { return kv.first == tag; });
    if (it == acc.end()) {
      key.ood.assign(ood_names.size(), 0.0);
      acc.emplace_back(tag, key);
      it = acc.end() - 1;
    }
    SummaryRow& row = it->second;
    row.id_test += r.report.id_top1;
    row.ood_avg += r.report.ood_avg;
    size_t k = 0;
    for (const SplitResult& s : r.report.splits)
      if (s.ood) row.ood[k++] += s.top1;
    row.seeds += 1;
  }
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw MissingArtifactError("cannot write sweep summary: " + path);
  f << "method,masking,refilling,param,seeds,id_test";
  for (const auto& n : ood_names) f << "," << n;
  f << ",ood_avg,config_hash\n";
  for (auto& [tag, row] : acc) {
    const double inv = 1.0 / static_cast<double>(row.seeds);
    f << row.method << "," << row.masking << "," << row.refilling << "," << row.param << ","
      << row.seeds << "," << fmt("%.6f", row.id_test * inv);
    for (double v : row.ood) f << "," << fmt("%.6f", v * inv);
    f << "," << fmt("%.6f", row.ood_avg * inv) << "," << hash << "\n";
  }
}

}  // namespace

void cmd_gen_data(const ExperimentConfig& config, bool json_export) {
  config.validate();
  const ArtifactPaths p = artifact_paths(config.out_dir);
  fs::create_directories(p.data_dir);
  ScmSpec diverse_spec = config.scm;
  diverse_spec.correlation = 0.0;  // the teacher corpus breaks the backdoor path

  struct Job {
    std::string path;
    Dataset ds;
  };
  std::vector<Job> jobs;
  const uint64_t seed = config.data.seed;
  jobs.push_back({p.id_train, generate_dataset(config.scm, Split::kIdTrain, config.data.train, seed)});
  jobs.push_back({p.id_val, generate_dataset(config.scm, Split::kIdVal, config.data.val, seed)});
  jobs.push_back({p.id_test, generate_dataset(config.scm, Split::kIdTest, config.data.test, seed)});
  jobs.push_back({p.ood_test, generate_dataset(config.scm, Split::kOodTest, config.data.ood, seed)});
  jobs.push_back({p.diverse_train,
                  generate_dataset(diverse_spec, Split::kIdTrain, config.data.diverse_train,
                                   seed ^ 0x6469766572736531ull, "diverse-train")});
  jobs.push_back({p.diverse_val,
                  generate_dataset(diverse_spec, Split::kIdVal, config.data.diverse_val,
                                   seed ^ 0x6469766572736531ull, "diverse-val")});
  for (const Job& jb : jobs) {
    save_dataset(jb.path, jb.ds);
    if (json_export) export_dataset_json(jb.path + ".json", jb.ds);
  }
}

void cmd_pretrain(const ExperimentConfig& config) {
  config.validate();
  const ArtifactPaths p = artifact_paths(config.out_dir);
  Dataset diverse_train = load_artifact(p.diverse_train);
  Dataset diverse_val = load_artifact(p.diverse_val);
  const ModelConfig mc = config.model_config();
  TrainLog log;
  ModelParams teacher =
      pretrain_teacher(mc, config.teacher_train, diverse_train, diverse_val, config.teacher_floor,
                       &log);
  save_checkpoint(p.teacher_checkpoint, mc, teacher);
  write_train_log_csv(p.teacher_log, log);
  write_train_summary_json(p.teacher_summary, log);
}

RunResult cmd_finetune(const ExperimentConfig& config) {
  config.validate();
  const ArtifactPaths p = artifact_paths(config.out_dir);
  LoadedBenchmark bench = load_benchmark(p);
  auto [mc, teacher] = load_teacher(p);
  if (!(mc == config.model_config()))
    throw ConfigError("finetune: teacher checkpoint does not match the configured model");
  fs::create_directories(p.runs_dir);
  const uint64_t seed = config.seeds.front();
  std::string tag = strategy_tag(config.train.method, config.train.strategy);
  std::string base = p.runs_dir + "/" + tag + fmt("-seed%llu", (unsigned long long)seed);
  RunResult r = run_cell(config, bench, mc, teacher, config.train.method, config.train.strategy,
                         seed, config.train.threads, base + ".cfck");
  write_eval_report_csv(base + "-eval.csv", {r.report}, seed, config_hash(config));
  return r;
}

std::vector<RunResult> cmd_sweep(const ExperimentConfig& config) {
  config.validate();
  const ArtifactPaths p = artifact_paths(config.out_dir);
  LoadedBenchmark bench = load_benchmark(p);
  auto [mc, teacher] = load_teacher(p);
  if (!(mc == config.model_config()))
    throw ConfigError("sweep: teacher checkpoint does not match the configured model");
  fs::create_directories(p.runs_dir);

  struct Cell {
    Method method;
    std::optional<StrategyConfig> strategy;
    uint64_t seed;
  };
  std::vector<Cell> cells;
  for (uint64_t seed : config.seeds) {
    if (config.sweep.include_vanilla) cells.push_back({Method::kVanilla, std::nullopt, seed});
    if (config.sweep.include_no_masking) cells.push_back({Method::kNoMasking, std::nullopt, seed});
    for (Masking m : config.sweep.maskings) {
      const std::vector<double>& hps =
          m == Masking::kRandom ? config.sweep.rates : config.sweep.thresholds;
      for (Refilling r : config.sweep.refillings) {
        for (double hp : hps) {
          StrategyConfig s = config.train.strategy.value_or(StrategyConfig{});
          s.masking = m;
          s.refilling = r;
          if (m == Masking::kRandom)
            s.masking_rate = hp;
          else
            s.threshold = hp;
          cells.push_back({Method::kCounterfactual, s, seed});
        }
      }
    }
  }

  // Sweep cells are independent jobs; --jobs bounds the parallel cells and
  // each cell gets an equal share of the hardware threads.
  const int jobs = std::max(1, std::min<int>(config.jobs, static_cast<int>(cells.size())));
  const int cell_threads =
      config.train.threads > 0 ? config.train.threads
                               : std::max(1, resolve_workers(0) / jobs);
  std::vector<RunResult> results(cells.size());
  std::atomic<size_t> next{0};
  std::vector<std::thread> threads;
  std::exception_ptr first_error;
  std::mutex err_mutex;
  for (int t = 0; t < jobs; ++t) {
    threads.emplace_back([&] {
      for (;;) {
        size_t k = next.fetch_add(1);
        if (k >= cells.size()) return;
        try {
          const Cell& cell = cells[k];
          std::string path = p.runs_dir + "/sweep-" + strategy_tag(cell.method, cell.strategy) +
                             fmt("-seed%llu.cfck", (unsigned long long)cell.seed);
          results[k] = run_cell(config, bench, mc, teacher, cell.method, cell.strategy, cell.seed,
                                cell_threads, path);
        } catch (...) {
          std::lock_guard<std::mutex> lk(err_mutex);
          if (!first_error) first_error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& t : threads) t.join();
  if (first_error) std::rethrow_exception(first_error);

  const std::string hash = config_hash(config);
  write_sweep_csv(p.sweep_csv, results, hash);
  write_sweep_summary_csv(p.sweep_summary_csv, results, hash);
  return results;
}

void cmd_mask_table(const ExperimentConfig& config, const std::vector<double>& thresholds,
                    const std::string& checkpoint_path, int sample_count) {
  config.validate();
  if (thresholds.empty()) throw ConfigError("mask-table: empty threshold list");
  const ArtifactPaths p = artifact_paths(config.out_dir);
  Dataset train = load_artifact(p.id_train);
  std::string ckpt = checkpoint_path.empty() ? p.teacher_checkpoint : checkpoint_path;
  if (!fs::exists(ckpt)) throw MissingArtifactError("missing checkpoint: " + ckpt);
  auto [mc, params] = load_checkpoint(ckpt);
  const int n = std::min<int>(sample_count, static_cast<int>(train.samples.size()));
  const int side = config.scm.image_side, ps = config.scm.patch_side;

  // Relevance is threshold-independent; score once per sample.
  std::vector<RelevanceMap> maps(static_cast<size_t>(n));
  const int workers = resolve_workers(config.train.threads);
  std::deque<RelevanceScorer> scorers;
  for (int w = 0; w < workers; ++w) {
    scorers.emplace_back(mc);
    scorers.back().set_params(&params);
  }
  parallel_chunks(n, workers, [&](int w, int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) {
      const SampleRecord& rec = train.samples[static_cast<size_t>(i)];
      Tensor<float> patches = rec.image.as_matrix();
      maps[static_cast<size_t>(i)] = scorers[static_cast<size_t>(w)].score(patches, rec.label);
    }
  });

  std::ofstream f(p.mask_table_csv, std::ios::trunc);
  if (!f) throw MissingArtifactError("cannot write mask table: " + p.mask_table_csv);
  f << "threshold,image_mr,object_mr,iou,n,seed,config_hash\n";
  const std::string hash = config_hash(config);
  const unsigned long long seed = static_cast<unsigned long long>(config.seeds.front());
  for (double t : thresholds) {
    double img = 0, obj = 0, iou = 0;
    for (int i = 0; i < n; ++i) {
      PatchPartition part = threshold_partition(maps[static_cast<size_t>(i)], t);
      std::vector<uint8_t> cam = patch_mask_to_pixels(part.object, side, ps);
      MaskMetrics m = mask_metrics(cam, train.samples[static_cast<size_t>(i)].object_mask);
      img += m.image_rate;
      obj += m.object_rate;
      iou += m.iou;
    }
    const double inv = 1.0 / static_cast<double>(n);
    f << fmt("%.2f,%.6f,%.6f,%.6f,%d,%llu,", t, img * inv, obj * inv, iou * inv, n, seed) << hash
      << "\n";
  }
}

std::vector<CurvePoint> cmd_wise(const ExperimentConfig& config, const std::string& theta0_path,
                                 const std::string& theta1_path) {
  config.validate();
  const ArtifactPaths p = artifact_paths(config.out_dir);
  Dataset id_test = load_artifact(p.id_test);
  Dataset ood_test = load_artifact(p.ood_test);
  for (const std::string& path : {theta0_path, theta1_path})
    if (!fs::exists(path)) throw MissingArtifactError("missing checkpoint: " + path);
  auto [c0, theta0] = load_checkpoint(theta0_path);
  auto [c1, theta1] = load_checkpoint(theta1_path);
  if (!(c0 == c1)) throw ConfigError("wise: checkpoints have incompatible model configs");
  std::vector<CurvePoint> curve = wise_curve(c0, theta0, theta1, config.alpha_grid, id_test,
                                             {ood_test}, config.train.threads);
  write_curve_csv(p.wise_csv, curve, config.seeds.front(), config_hash(config));
  std::vector<ScatterPoint> pts;
  for (const CurvePoint& cp : curve)
    pts.push_back({cp.report.id_top1, cp.report.ood_avg, fmt("a=%.2f", cp.alpha)});
  write_svg_scatter(p.wise_svg, pts, "ID top-1", "OOD avg top-1");
  return curve;
}

void cmd_report(const ExperimentConfig& config) {
  config.validate();
  const ArtifactPaths p = artifact_paths(config.out_dir);
  std::ofstream f(p.report_md, std::ios::trunc);
  if (!f) throw MissingArtifactError("cannot write report: " + p.report_md);
  f << "# Experiment report\n\nconfig hash: `" << config_hash(config) << "`\n";
  auto embed_csv = [&f](const std::string& path, const std::string& title) {
    if (!fs::exists(path)) return;
    std::ifstream in(path);
    f << "\n## " << title << "\n\n";
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
      std::string row = "| ";
      for (char ch : line) row += (ch == ',') ? std::string(" | ") : std::string(1, ch);
      row += " |";
      f << row << "\n";
      if (header) {
        size_t cols = std::count(line.begin(), line.end(), ',') + 1;
        f << "|";
        for (size_t i = 0; i < cols; ++i) f << " --- |";
        f << "\n";
        header = false;
      }
    }
  };
  embed_csv(p.sweep_summary_csv, "Strategy sweep (seed averages)");
  embed_csv(p.mask_table_csv, "Mask quality by threshold");
  embed_csv(p.wise_csv, "Weight-space ensemble curve");
}

void write_svg_scatter(const std::string& path, const std::vector<ScatterPoint>& points,
                       const std::string& x_label, const std::string& y_label) {
  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  if (!points.empty()) {
    xmin = xmax = points[0].x;
    ymin = ymax = points[0].y;
    for (const auto& pt : points) {
      xmin = std::min(xmin, pt.x);
      xmax = std::max(xmax, pt.x);
      ymin = std::min(ymin, pt.y);
      ymax = std::max(ymax, pt.y);
    }
  }
  const double pad_x = (xmax - xmin) < 1e-9 ? 0.05 : 0.08 * (xmax - xmin);
  const double pad_y = (ymax - ymin) < 1e-9 ? 0.05 : 0.08 * (ymax - ymin);
  xmin -= pad_x;
  xmax += pad_x;
  ymin -= pad_y;
  ymax += pad_y;
  const int W = 640, H = 480, ML = 60, MB = 50, MT = 20, MR = 20;
  auto sx = [&](double x) { return ML + (x - xmin) / (xmax - xmin) * (W - ML - MR); };
  auto sy = [&](double y) { return H - MB - (y - ymin) / (ymax - ymin) * (H - MT - MB); };
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw MissingArtifactError("cannot write svg: " + path);
  f << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  f << fmt("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%d\" height=\"%d\" "
           "viewBox=\"0 0 %d %d\">\n",
           W, H, W, H);
  f << fmt("<rect x=\"0\" y=\"0\" width=\"%d\" height=\"%d\" fill=\"white\"/>\n", W, H);
  f << fmt("<line x1=\"%d\" y1=\"%d\" x2=\"%d\" y2=\"%d\" stroke=\"black\"/>\n", ML, H - MB,
           W - MR, H - MB);
  f << fmt("<line x1=\"%d\" y1=\"%d\" x2=\"%d\" y2=\"%d\" stroke=\"black\"/>\n", ML, MT, ML,
           H - MB);
  f << fmt("<text x=\"%d\" y=\"%d\" font-size=\"14\">%s</text>\n", W / 2 - 30, H - 12,
           x_label.c_str());
  f << fmt("<text x=\"14\" y=\"%d\" font-size=\"14\" transform=\"rotate(-90 14 %d)\">%s</text>\n",
           H / 2, H / 2, y_label.c_str());
  for (const auto& pt : points) {
    f << fmt("<circle cx=\"%.2f\" cy=\"%.2f\" r=\"4\" fill=\"steelblue\">", sx(pt.x), sy(pt.y));
    f << "<title>" << pt.label << "</title></circle>\n";
  }
  f << "</svg>\n";
}

}  // namespace cfft
