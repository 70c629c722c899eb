#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cfft/counterfactual.hpp"
#include "cfft/model.hpp"
#include "cfft/scm.hpp"

namespace cfft {

// kVanilla: plain cross-entropy fine-tuning (no distillation term).
// kNoMasking: distillation on the raw image (x_cf = x).
// kCounterfactual: distillation on masked-and-refilled images.
enum class Method { kVanilla, kNoMasking, kCounterfactual };
const char* method_name(Method m);

struct TrainConfig {
  double beta = 30.0;
  double gamma = 0.0;
  double kd_temperature = 10.0;
  int epochs = 30;
  int batch_size = 128;
  double learning_rate = 3e-4;
  int warmup_steps = 100;
  double weight_decay = 0.1;
  double clip_norm = 1.0;
  uint64_t seed = 1;
  Method method = Method::kVanilla;
  std::optional<StrategyConfig> strategy;  // required for kCounterfactual
  std::string selection_metric = "id-val-top1";
  // L2-normalize both feature vectors before the MSE term (raw by default).
  bool normalize_features = false;
  int threads = 0;  // 0 = hardware concurrency

  void validate() const;
};

struct StepLog {
  int64_t step;
  double ce, mse, kd;
  double lr;
  double grad_norm;  // pre-clip global l2 norm
};

struct TrainLog {
  std::vector<StepLog> steps;
  std::vector<double> val_accuracy;  // one entry per epoch
  int selected_epoch = -1;
  double selected_val_accuracy = 0.0;
};

struct ObjectiveParts {
  double total = 0, ce = 0, mse = 0, kd = 0;
};

// A frozen (encoder, head) pair used as the WiSE-KD distillation teacher.
struct EnsembleModel {
  ModelConfig config;
  ModelParams params;
};

// The combined objective appended onto one graph: cross-entropy on x, plus
// (optionally) beta * MSE(teacher feature input, student feature on x_cf) and
// gamma * T^2-scaled KL(ensemble logits input || student logits on x).
// Teacher and ensemble outputs enter as inputs, so no gradient reaches them.
struct ObjectiveNodes {
  int x_in = -1, onehot_in = -1, xcf_in = -1, teacher_feature_in = -1, ensemble_logits_in = -1;
  int ce = -1, mse = -1, kd = -1, loss = -1;
};

template <typename S>
ObjectiveNodes build_objective_graph(Graph<S>& g, const ModelConfig& config, bool with_mse,
                                     double beta, bool with_kd, double gamma, double temperature,
                                     bool normalize_features = false);

// Batch mean of the training objective; gradients (if requested) are the
// mean over the batch of per-sample student gradients.
ObjectiveParts objective(const ModelConfig& config, const ModelParams& student,
                         const ModelParams& teacher, const std::vector<PatchImage>& batch,
                         const std::vector<int>& labels, const std::vector<PatchImage>& cf_batch,
                         double beta, ModelParams* grads = nullptr, int threads = 1,
                         bool normalize_features = false);

ObjectiveParts objective_wise_kd(const ModelConfig& config, const ModelParams& student,
                                 const ModelParams& teacher, const EnsembleModel& ensemble,
                                 const std::vector<PatchImage>& batch,
                                 const std::vector<int>& labels,
                                 const std::vector<PatchImage>& cf_batch, double beta, double gamma,
                                 double temperature, ModelParams* grads = nullptr,
                                 int threads = 1);

// Linear warm-up to lr_max over warmup_steps, then cosine annealing to the
// end of training. step is 0-based.
double schedule_lr(double lr_max, int warmup_steps, int64_t step, int64_t total_steps);

// Scales gradients so the global l2 norm is at most max_norm (no-op when
// max_norm <= 0). Returns the pre-clip norm.
double clip_gradients(ModelParams& grads, double max_norm);

struct FineTuneResult {
  ModelParams params;  // checkpoint with the best validation accuracy
  TrainLog log;
};

// AdamW (0.9, 0.999) with decoupled weight decay, cosine schedule with
// linear warm-up, per-step gradient clipping, validation-based selection.
// init is expected to be a copy of the teacher parameters.
FineTuneResult fine_tune(const ModelConfig& config, const TrainConfig& train_config,
                         const Dataset& train, const Dataset& val, const ModelParams& teacher,
                         const ModelParams& init, const EnsembleModel* kd_teacher = nullptr);

// Supervised training from random init on the diverse (rho = 0) corpus.
// Fails (naming the achieved accuracy) if the selected checkpoint does not
// reach floor_accuracy on the held-out diverse split.
ModelParams pretrain_teacher(const ModelConfig& config, const TrainConfig& train_config,
                             const Dataset& diverse_train, const Dataset& diverse_val,
                             double floor_accuracy, TrainLog* log_out = nullptr);

void write_train_log_csv(const std::string& path, const TrainLog& log);
void write_train_summary_json(const std::string& path, const TrainLog& log);

extern template ObjectiveNodes build_objective_graph(Graph<float>&, const ModelConfig&, bool,
                                                     double, bool, double, double, bool);
extern template ObjectiveNodes build_objective_graph(Graph<double>&, const ModelConfig&, bool,
                                                     double, bool, double, double, bool);

}  // namespace cfft
