#pragma once

#include <nlohmann/json.hpp>

#include <string>
#include <vector>

#include "cfft/evaluation.hpp"
#include "cfft/training.hpp"

namespace cfft {

struct DataCounts {
  int train = 20000;
  int val = 2000;
  int test = 4000;
  int ood = 4000;
  int diverse_train = 20000;
  int diverse_val = 2000;
  uint64_t seed = 7;
};

struct SweepConfig {
  std::vector<Masking> maskings = {Masking::kRandom, Masking::kContext, Masking::kObject};
  std::vector<Refilling> refillings = {Refilling::kNone, Refilling::kSingle, Refilling::kMulti};
  std::vector<double> rates = {0.25, 0.5, 0.75};
  std::vector<double> thresholds = {0.3, 0.4, 0.5, 0.6};
  bool include_vanilla = true;
  bool include_no_masking = true;
};

struct ExperimentConfig {
  ScmSpec scm;
  DataCounts data;
  int model_embed = 64;
  int model_layers = 2;
  int model_heads = 4;
  int model_mlp = 0;  // 0 = 2 * embed
  TrainConfig train;
  TrainConfig teacher_train;
  double teacher_floor = 0.9;
  SweepConfig sweep;
  std::vector<double> alpha_grid;  // default: 21 evenly spaced points
  std::vector<uint64_t> seeds = {1, 2, 3};
  std::string out_dir;
  int jobs = 1;
  std::string format = "csv";

  ModelConfig model_config() const;
  void validate() const;
};

// JSON config with a "preset" field ("desk" or "paper-constants"); explicit
// fields override the preset's values.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config_file(const std::string& path);
nlohmann::json config_to_json(const ExperimentConfig& config);
// Hash of the result-affecting part of the config (execution knobs like
// jobs/threads/out excluded).
std::string config_hash(const ExperimentConfig& config);

// Artifact layout under out_dir.
struct ArtifactPaths {
  std::string data_dir, runs_dir;
  std::string id_train, id_val, id_test, ood_test, diverse_train, diverse_val;
  std::string teacher_checkpoint, teacher_log, teacher_summary;
  std::string sweep_csv, sweep_summary_csv;
  std::string mask_table_csv;
  std::string wise_csv, wise_svg;
  std::string report_md;
};
ArtifactPaths artifact_paths(const std::string& out_dir);

// One sweep cell result (a fine-tuned run evaluated on ID and OOD splits).
struct RunResult {
  Method method = Method::kVanilla;
  std::optional<StrategyConfig> strategy;
  uint64_t seed = 0;
  int selected_epoch = -1;
  double val_accuracy = 0;
  EvalReport report;
  std::string checkpoint_path;
};

// Commands. Each is a pure function of (config, input artifacts): reruns
// write byte-identical outputs.
void cmd_gen_data(const ExperimentConfig& config, bool json_export = false);
void cmd_pretrain(const ExperimentConfig& config);
RunResult cmd_finetune(const ExperimentConfig& config);
std::vector<RunResult> cmd_sweep(const ExperimentConfig& config);
void cmd_mask_table(const ExperimentConfig& config, const std::vector<double>& thresholds,
                    const std::string& checkpoint_path, int sample_count = 500);
std::vector<CurvePoint> cmd_wise(const ExperimentConfig& config, const std::string& theta0_path,
                                 const std::string& theta1_path);
void cmd_report(const ExperimentConfig& config);

// Minimal SVG scatter (one circle per point); numeric CSVs stay the
// authoritative output.
struct ScatterPoint {
  double x, y;
  std::string label;
};
void write_svg_scatter(const std::string& path, const std::vector<ScatterPoint>& points,
                       const std::string& x_label, const std::string& y_label);

std::string strategy_tag(Method method, const std::optional<StrategyConfig>& strategy);

}  // namespace cfft
