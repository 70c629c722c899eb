#include "cfft/training.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <fstream>

#include "cfft/evaluation.hpp"
#include "cfft/parallel.hpp"
#include "cfft/rng.hpp"

namespace cfft {

const char* method_name(Method m) {
  switch (m) {
    case Method::kVanilla: return "vanilla";
    case Method::kNoMasking: return "no-masking";
    case Method::kCounterfactual: return "counterfactual";
  }
  return "?";
}

void TrainConfig::validate() const {
  if (beta < 0) throw ConfigError("train: beta must be >= 0");
  if (gamma < 0) throw ConfigError("train: gamma must be >= 0");
  if (!(kd_temperature > 0)) throw ConfigError("train: kd temperature must be > 0");
  if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("train: batch size must be >= 1");
  if (!(learning_rate > 0)) throw ConfigError("train: learning rate must be > 0");
  if (warmup_steps < 0) throw ConfigError("train: warmup steps must be >= 0");
  if (weight_decay < 0) throw ConfigError("train: weight decay must be >= 0");
  if (selection_metric != "id-val-top1")
    throw ConfigError("train: unknown selection metric '" + selection_metric + "'");
  if (method == Method::kCounterfactual) {
    if (!strategy) throw ConfigError("train: counterfactual method needs a strategy");
    strategy->validate();
    if (strategy->refilling != Refilling::kNone && batch_size < 2)
      throw ConfigError("train: refilling needs batch size >= 2");
  }
}

template <typename S>
ObjectiveNodes build_objective_graph(Graph<S>& g, const ModelConfig& config, bool with_mse,
                                     double beta, bool with_kd, double gamma, double temperature,
                                     bool normalize_features) {
  ObjectiveNodes n;
  ModelNodes fwd_x = append_model_forward(g, config, "x");
  n.x_in = fwd_x.patches_input;
  n.onehot_in = g.input("onehot", Shape{1, config.classes});
  n.ce = g.cross_entropy(fwd_x.logits, n.onehot_in);
  int loss = n.ce;
  if (with_mse) {
    ModelNodes fwd_cf = append_model_forward(g, config, "xcf");
    n.xcf_in = fwd_cf.patches_input;
    n.teacher_feature_in = g.input("teacher_feature", Shape{1, config.embed_dim});
    int teacher_side = n.teacher_feature_in;
    int student_side = fwd_cf.feature;
    if (normalize_features) {
      teacher_side = g.l2_normalize_rows(teacher_side);
      student_side = g.l2_normalize_rows(student_side);
    }
    n.mse = g.mse(teacher_side, student_side);
    loss = g.add(loss, g.scale(n.mse, beta));
  }
  if (with_kd) {
    n.ensemble_logits_in = g.input("ensemble_logits", Shape{1, config.classes});
    n.kd = g.kl_div(n.ensemble_logits_in, fwd_x.logits, temperature);
    loss = g.add(loss, g.scale(n.kd, gamma));
  }
  n.loss = loss;
  g.set_loss(loss);
  return n;
}

template ObjectiveNodes build_objective_graph(Graph<float>&, const ModelConfig&, bool, double,
                                              bool, double, double, bool);
template ObjectiveNodes build_objective_graph(Graph<double>&, const ModelConfig&, bool, double,
                                              bool, double, double, bool);

namespace {

// Per-worker workspace for batch objective evaluation. The evaluation binds
// worker-owned buffers, so workers must stay put (deque, no copies).
struct Worker {
  Worker(const Graph<float>& graph, const ModelConfig& config, bool with_mse, bool with_kd)
      : eval(graph),
        onehot(Shape{1, config.classes}),
        x(Shape{config.patch_count, config.patch_dim}),
        xcf(Shape{config.patch_count, config.patch_dim}),
        teacher_feature(Shape{1, config.embed_dim}),
        ensemble_logits(Shape{1, config.classes}) {
    eval.bind_input("x", &x);
    eval.bind_input("onehot", &onehot);
    if (with_mse) {
      eval.bind_input("xcf", &xcf);
      eval.bind_input("teacher_feature", &teacher_feature);
    }
    if (with_kd) eval.bind_input("ensemble_logits", &ensemble_logits);
  }
  Worker(const Worker&) = delete;
  Worker& operator=(const Worker&) = delete;

  Evaluation<float> eval;
  Tensor<float> onehot, x, xcf, teacher_feature, ensemble_logits;
  ModelParams grad_acc;
  double ce = 0, mse = 0, kd = 0;
};

ModelParams zero_like(const ModelParams& params) {
  ModelParams out;
  for (const auto& [name, t] : params) out[name] = Tensor<float>(t.shape);
  return out;
}

struct BatchObjective {
  BatchObjective(const ModelConfig& config, bool with_mse, double beta, bool with_kd, double gamma,
                 double temperature, int workers, bool normalize_features = false)
      : config_(config), with_mse_(with_mse), with_kd_(with_kd), workers_(workers), beta_(beta),
        gamma_(gamma) {
    nodes_ = build_objective_graph(graph_, config, with_mse, beta, with_kd, gamma, temperature,
                                   normalize_features);
    for (int w = 0; w < workers; ++w) slots_.emplace_back(graph_, config, with_mse, with_kd);
    if (with_mse_)
      for (int w = 0; w < workers; ++w) teacher_runners_.emplace_back(config);
    if (with_kd_)
      for (int w = 0; w < workers; ++w) ensemble_runners_.emplace_back(config);
  }

  // Batch-mean loss parts; per-sample gradients accumulate per worker chunk
  // and chunks combine in worker order, so results do not depend on thread
  // scheduling.
  ObjectiveParts run(const ModelParams& student, const ModelParams* teacher,
                     const EnsembleModel* ensemble, const std::vector<Tensor<float>>& x_mats,
                     const std::vector<int>& labels, const std::vector<Tensor<float>>& cf_mats,
                     ModelParams* grads_out) {
    const int64_t B = static_cast<int64_t>(x_mats.size());
    const float inv_b = 1.0f / static_cast<float>(B);
    for (auto& w : slots_) {
      w.eval.bind_params(&student);
      w.ce = w.mse = w.kd = 0;
      if (grads_out) {
        if (w.grad_acc.empty()) w.grad_acc = zero_like(student);
        for (auto& [_, t] : w.grad_acc) std::fill(t.data.begin(), t.data.end(), 0.0f);
      }
    }
    if (with_mse_)
      for (auto& r : teacher_runners_) r.set_params(teacher);
    if (with_kd_)
      for (auto& r : ensemble_runners_) r.set_params(&ensemble->params);

    parallel_chunks(B, workers_, [&](int wi, int64_t lo, int64_t hi) {
      Worker& w = slots_[static_cast<size_t>(wi)];
      for (int64_t i = lo; i < hi; ++i) {
        w.x.data = x_mats[static_cast<size_t>(i)].data;
        std::fill(w.onehot.data.begin(), w.onehot.data.end(), 0.0f);
        w.onehot.data[static_cast<size_t>(labels[static_cast<size_t>(i)])] = 1.0f;
        if (with_mse_) {
          w.xcf.data = cf_mats[static_cast<size_t>(i)].data;
          w.teacher_feature.data =
              teacher_runners_[static_cast<size_t>(wi)].feature_vector(w.xcf);
        }
        if (with_kd_) {
          w.ensemble_logits.data =
              ensemble_runners_[static_cast<size_t>(wi)].logits(w.x).data;
        }
        w.eval.forward();
        w.ce += w.eval.value(nodes_.ce).data[0];
        if (with_mse_) w.mse += w.eval.value(nodes_.mse).data[0];
        if (with_kd_) w.kd += w.eval.value(nodes_.kd).data[0];
        if (grads_out) {
          w.eval.backward();
          w.eval.accumulate_param_grads(w.grad_acc, inv_b);
        }
      }
    });

    ObjectiveParts parts;
    for (auto& w : slots_) {
      parts.ce += w.ce;
      parts.mse += w.mse;
      parts.kd += w.kd;
    }
    parts.ce /= static_cast<double>(B);
    parts.mse /= static_cast<double>(B);
    parts.kd /= static_cast<double>(B);
    parts.total = parts.ce;
    if (with_mse_) parts.total += beta_ * parts.mse;
    if (with_kd_) parts.total += gamma_ * parts.kd;
    if (grads_out) {
      if (grads_out->empty()) *grads_out = zero_like(student);
      for (auto& [name, t] : *grads_out) std::fill(t.data.begin(), t.data.end(), 0.0f);
      for (auto& w : slots_)
        for (auto& [name, t] : *grads_out) {
          const Tensor<float>& g = w.grad_acc.at(name);
          for (size_t k = 0; k < t.data.size(); ++k) t.data[k] += g.data[k];
        }
    }
    return parts;
  }

  const ModelConfig config_;
  const bool with_mse_, with_kd_;
  const int workers_;
  Graph<float> graph_;
  ObjectiveNodes nodes_;
  std::deque<Worker> slots_;
  std::deque<ModelRunner> teacher_runners_;
  std::deque<ModelRunner> ensemble_runners_;
  double beta_ = 0, gamma_ = 0;
};

std::vector<Tensor<float>> to_matrices(const std::vector<PatchImage>& images) {
  std::vector<Tensor<float>> out;
  out.reserve(images.size());
  for (const auto& im : images) out.push_back(im.as_matrix());
  return out;
}

}  // namespace

ObjectiveParts objective(const ModelConfig& config, const ModelParams& student,
                         const ModelParams& teacher, const std::vector<PatchImage>& batch,
                         const std::vector<int>& labels, const std::vector<PatchImage>& cf_batch,
                         double beta, ModelParams* grads, int threads, bool normalize_features) {
  if (batch.size() != labels.size())
    throw std::invalid_argument("objective: batch/label length mismatch");
  const bool with_mse = beta != 0.0;
  if (with_mse && cf_batch.size() != batch.size())
    throw std::invalid_argument("objective: counterfactual batch length mismatch");
  BatchObjective obj(config, with_mse, beta, false, 0.0, 1.0, resolve_workers(threads),
                     normalize_features);
  return obj.run(student, &teacher, nullptr, to_matrices(batch), labels,
                 with_mse ? to_matrices(cf_batch) : std::vector<Tensor<float>>{}, grads);
}

ObjectiveParts objective_wise_kd(const ModelConfig& config, const ModelParams& student,
                                 const ModelParams& teacher, const EnsembleModel& ensemble,
                                 const std::vector<PatchImage>& batch,
                                 const std::vector<int>& labels,
                                 const std::vector<PatchImage>& cf_batch, double beta, double gamma,
                                 double temperature, ModelParams* grads, int threads) {
  if (batch.size() != labels.size())
    throw std::invalid_argument("objective: batch/label length mismatch");
  const bool with_mse = beta != 0.0;
  const bool with_kd = gamma != 0.0;
  if (with_mse && cf_batch.size() != batch.size())
    throw std::invalid_argument("objective: counterfactual batch length mismatch");
  if (with_kd && !(ensemble.config == config))
    throw ConfigError("objective: ensemble model config differs from the student config");
  BatchObjective obj(config, with_mse, beta, with_kd, gamma, temperature,
                     resolve_workers(threads));
  return obj.run(student, &teacher, &ensemble, to_matrices(batch), labels,
                 with_mse ? to_matrices(cf_batch) : std::vector<Tensor<float>>{}, grads);
}

double schedule_lr(double lr_max, int warmup_steps, int64_t step, int64_t total_steps) {
  if (step < warmup_steps)
    return lr_max * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  int64_t denom = total_steps - warmup_steps;
  if (denom <= 0) return lr_max;
  double progress = static_cast<double>(step - warmup_steps) / static_cast<double>(denom);
  return lr_max * 0.5 * (1.0 + std::cos(3.141592653589793 * progress));
}

double clip_gradients(ModelParams& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [_, t] : grads)
    for (float v : t.data) sq += static_cast<double>(v) * static_cast<double>(v);
  double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    float scale = static_cast<float>(max_norm / norm);
    for (auto& [_, t] : grads)
      for (float& v : t.data) v *= scale;
  }
  return norm;
}

namespace {

struct AdamW {
  explicit AdamW(const ModelParams& params) : m(zero_like(params)), v(zero_like(params)) {}

  void step(ModelParams& params, const ModelParams& grads, double lr, double weight_decay) {
    ++t;
    const double bc1 = 1.0 - std::pow(0.9, t);
    const double bc2 = 1.0 - std::pow(0.999, t);
    const float decay = static_cast<float>(1.0 - lr * weight_decay);
    for (auto& [name, p] : params) {
      const Tensor<float>& g = grads.at(name);
      Tensor<float>& mt = m.at(name);
      Tensor<float>& vt = v.at(name);
      for (size_t i = 0; i < p.data.size(); ++i) {
        p.data[i] *= decay;
        mt.data[i] = 0.9f * mt.data[i] + 0.1f * g.data[i];
        vt.data[i] = 0.999f * vt.data[i] + 0.001f * g.data[i] * g.data[i];
        double mhat = mt.data[i] / bc1;
        double vhat = vt.data[i] / bc2;
        p.data[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + 1e-8));
      }
    }
  }

  ModelParams m, v;
  int64_t t = 0;
};

struct EngineSetup {
  const ModelConfig& config;
  const TrainConfig& tc;
  const Dataset& train;
  const Dataset& val;
  const ModelParams* teacher;  // null = plain supervised training
  const EnsembleModel* ensemble;
  const ModelParams& init;
};

FineTuneResult run_training(const EngineSetup& s) {
  s.config.validate();
  s.tc.validate();
  const int n = static_cast<int>(s.train.samples.size());
  if (n == 0) throw ConfigError("training: empty training set");

  const bool with_mse = s.tc.method != Method::kVanilla && s.tc.beta != 0.0 && s.teacher;
  const bool with_kd = s.ensemble != nullptr && s.tc.gamma != 0.0;
  if (with_kd && !(s.ensemble->config == s.config))
    throw ConfigError("training: ensemble model config differs from the student config");
  const int workers = resolve_workers(s.tc.threads);

  FineTuneResult result;
  result.params = s.init;
  if (s.tc.epochs == 0) return result;

  const uint64_t teacher_checksum_before = s.teacher ? params_checksum(*s.teacher) : 0;
  const uint64_t ensemble_checksum_before = s.ensemble ? params_checksum(s.ensemble->params) : 0;

  ModelParams student = s.init;
  BatchObjective obj(s.config, with_mse, s.tc.beta, with_kd, s.tc.gamma, s.tc.kd_temperature,
                     workers, s.tc.normalize_features);
  AdamW opt(student);

  std::vector<Tensor<float>> train_mats;
  train_mats.reserve(static_cast<size_t>(n));
  for (const auto& rec : s.train.samples) train_mats.push_back(rec.image.as_matrix());

  const int batch = std::min(s.tc.batch_size, n);
  const int steps_per_epoch = std::max(1, n / s.tc.batch_size);
  const int64_t total_steps = static_cast<int64_t>(steps_per_epoch) * s.tc.epochs;

  std::deque<RelevanceScorer> scorers;
  const bool needs_scorers = with_mse && s.tc.method == Method::kCounterfactual &&
                             s.tc.strategy && s.tc.strategy->needs_relevance();
  if (needs_scorers)
    for (int w = 0; w < workers; ++w) scorers.emplace_back(s.config);

  std::vector<int> order(static_cast<size_t>(n));
  std::vector<PatchImage> batch_images(static_cast<size_t>(batch));
  std::vector<Tensor<float>> x_mats(static_cast<size_t>(batch));
  std::vector<int> labels(static_cast<size_t>(batch));
  std::vector<Tensor<float>> cf_mats;
  ModelParams grads;

  double best_acc = -1.0;
  for (int epoch = 0; epoch < s.tc.epochs; ++epoch) {
    for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    Pcg32 shuffle_rng = rng_stream(s.tc.seed, "shuffle", static_cast<uint64_t>(epoch));
    for (int i = n - 1; i > 0; --i) {
      uint32_t j = shuffle_rng.uniform_u32(static_cast<uint32_t>(i + 1));
      std::swap(order[static_cast<size_t>(i)], order[j]);
    }

    for (int st = 0; st < steps_per_epoch; ++st) {
      const int64_t step = static_cast<int64_t>(epoch) * steps_per_epoch + st;
      for (int b = 0; b < batch; ++b) {
        int idx = order[static_cast<size_t>(st * batch + b)];
        batch_images[static_cast<size_t>(b)] = s.train.samples[static_cast<size_t>(idx)].image;
        x_mats[static_cast<size_t>(b)] = train_mats[static_cast<size_t>(idx)];
        labels[static_cast<size_t>(b)] = s.train.samples[static_cast<size_t>(idx)].label;
      }

      if (with_mse) {
        if (s.tc.method == Method::kCounterfactual) {
          uint64_t cf_seed = rng_stream(s.tc.seed, "cf-step", static_cast<uint64_t>(step)).next_u64();
          CounterfactualBatch cf =
              make_counterfactual_batch(s.config, batch_images, labels, student, *s.tc.strategy,
                                        cf_seed, workers, needs_scorers ? &scorers : nullptr);
          cf_mats = to_matrices(cf.images);
        } else {  // kNoMasking: x_cf = x
          cf_mats = x_mats;
        }
      }

      ObjectiveParts parts;
      try {
        parts = obj.run(student, s.teacher, s.ensemble, x_mats, labels, cf_mats, &grads);
      } catch (const NumericError& e) {
        throw NumericError("training diverged at step " + std::to_string(step) + ": " + e.what());
      }

      double grad_norm = clip_gradients(grads, s.tc.clip_norm);
      if (s.tc.clip_norm > 0) {
        double post = 0.0;
        for (const auto& [_, t] : grads)
          for (float v : t.data) post += static_cast<double>(v) * static_cast<double>(v);
        if (std::sqrt(post) > s.tc.clip_norm + 1e-6)
          throw NumericError("gradient clipping failed at step " + std::to_string(step));
      }
      const double lr = schedule_lr(s.tc.learning_rate, s.tc.warmup_steps, step, total_steps);
      opt.step(student, grads, lr, s.tc.weight_decay);
      result.log.steps.push_back({step, parts.ce, parts.mse, parts.kd, lr, grad_norm});
    }

    double acc = 0;
    try {
      acc = top1_accuracy(s.config, student, s.val, s.tc.threads);
    } catch (const NumericError& e) {
      throw NumericError("training diverged after step " +
                         std::to_string(result.log.steps.back().step) + ": " + e.what());
    }
    result.log.val_accuracy.push_back(acc);
    if (acc > best_acc) {
      best_acc = acc;
      result.params = student;
      result.log.selected_epoch = epoch;
      result.log.selected_val_accuracy = acc;
    }
  }

  if (s.teacher && params_checksum(*s.teacher) != teacher_checksum_before)
    throw std::logic_error("training mutated the frozen teacher");
  if (s.ensemble && params_checksum(s.ensemble->params) != ensemble_checksum_before)
    throw std::logic_error("training mutated the frozen ensemble");
  return result;
}

}  // namespace

FineTuneResult fine_tune(const ModelConfig& config, const TrainConfig& train_config,
                         const Dataset& train, const Dataset& val, const ModelParams& teacher,
                         const ModelParams& init, const EnsembleModel* kd_teacher) {
  EngineSetup s{config, train_config, train, val, &teacher, kd_teacher, init};
  return run_training(s);
}

ModelParams pretrain_teacher(const ModelConfig& config, const TrainConfig& train_config,
                             const Dataset& diverse_train, const Dataset& diverse_val,
                             double floor_accuracy, TrainLog* log_out) {
  TrainConfig tc = train_config;
  tc.method = Method::kVanilla;
  tc.strategy.reset();
  ModelParams init = init_model_params(config, tc.seed);
  EngineSetup s{config, tc, diverse_train, diverse_val, nullptr, nullptr, init};
  FineTuneResult r = run_training(s);
  if (log_out) *log_out = r.log;
  const double achieved = tc.epochs == 0 ? 0.0 : r.log.selected_val_accuracy;
  if (achieved < floor_accuracy && floor_accuracy > 0.0) {
    char msg[160];
    std::snprintf(msg, sizeof(msg),
                  "teacher pre-training reached validation accuracy %.4f < floor %.4f within %d "
                  "epochs",
                  achieved, floor_accuracy, tc.epochs);
    throw NumericError(msg);
  }
  return std::move(r.params);
}

void write_train_log_csv(const std::string& path, const TrainLog& log) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw MissingArtifactError("cannot write train log: " + path);
  f << "step,ce,mse,kd,lr,grad_norm\n";
  char line[256];
  for (const StepLog& s : log.steps) {
    std::snprintf(line, sizeof(line), "%lld,%.9g,%.9g,%.9g,%.9g,%.9g\n",
                  static_cast<long long>(s.step), s.ce, s.mse, s.kd, s.lr, s.grad_norm);
    f << line;
  }
}

void write_train_summary_json(const std::string& path, const TrainLog& log) {
  nlohmann::json j;
  j["selected_epoch"] = log.selected_epoch;
  j["selected_val_accuracy"] = log.selected_val_accuracy;
  j["val_accuracy"] = log.val_accuracy;
  j["steps"] = log.steps.size();
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw MissingArtifactError("cannot write train summary: " + path);
  f << j.dump(2);
}

}  // namespace cfft
