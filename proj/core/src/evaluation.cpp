#include "cfft/evaluation.hpp"

#include <algorithm>
#include <cstdio>
#include <deque>
#include <fstream>

#include "cfft/parallel.hpp"

namespace cfft {

MaskMetrics mask_metrics(const std::vector<uint8_t>& cam_mask,
                         const std::vector<uint8_t>& seg_mask) {
  if (cam_mask.size() != seg_mask.size())
    throw std::invalid_argument("mask_metrics: mask sizes differ");
  if (cam_mask.empty()) throw std::invalid_argument("mask_metrics: empty masks");
  int64_t n_cam = 0, n_seg = 0, n_inter = 0, n_union = 0;
  for (size_t i = 0; i < cam_mask.size(); ++i) {
    const bool c = cam_mask[i] != 0, s = seg_mask[i] != 0;
    n_cam += c;
    n_seg += s;
    n_inter += c && s;
    n_union += c || s;
  }
  if (n_seg == 0) throw std::invalid_argument("mask_metrics: ground-truth mask is empty");
  MaskMetrics m;
  m.image_rate = static_cast<double>(n_cam) / static_cast<double>(cam_mask.size());
  m.object_rate = static_cast<double>(n_inter) / static_cast<double>(n_seg);
  m.iou = n_union == 0 ? 0.0 : static_cast<double>(n_inter) / static_cast<double>(n_union);
  return m;
}

std::vector<uint8_t> patch_mask_to_pixels(const std::vector<int>& patch_indices, int image_side,
                                          int patch_side) {
  if (image_side <= 0 || patch_side <= 0 || image_side % patch_side != 0)
    throw std::invalid_argument("patch_mask_to_pixels: bad geometry");
  const int grid = image_side / patch_side;
  std::vector<uint8_t> mask(static_cast<size_t>(image_side) * image_side, 0);
  for (int p : patch_indices) {
    if (p < 0 || p >= grid * grid)
      throw std::invalid_argument("patch_mask_to_pixels: patch index out of range");
    const int py = (p / grid) * patch_side;
    const int px = (p % grid) * patch_side;
    for (int y = 0; y < patch_side; ++y)
      for (int x = 0; x < patch_side; ++x)
        mask[static_cast<size_t>((py + y) * image_side + (px + x))] = 1;
  }
  return mask;
}

int restricted_argmax(const std::vector<float>& logits, const std::vector<int>& class_subset) {
  if (class_subset.empty()) throw std::invalid_argument("restricted_argmax: empty class subset");
  int best = -1;
  float best_v = 0;
  for (int c : class_subset) {
    if (c < 0 || c >= static_cast<int>(logits.size()))
      throw std::invalid_argument("restricted_argmax: class outside logit range");
    if (best < 0 || logits[static_cast<size_t>(c)] > best_v ||
        (logits[static_cast<size_t>(c)] == best_v && c < best)) {
      best = c;
      best_v = logits[static_cast<size_t>(c)];
    }
  }
  return best;
}

std::vector<int> predict_dataset(const ModelConfig& config, const ModelParams& params,
                                 const Dataset& dataset, const std::vector<int>& class_subset,
                                 int threads) {
  if (class_subset.empty()) throw std::invalid_argument("predict: empty class subset");
  const int64_t n = static_cast<int64_t>(dataset.samples.size());
  std::vector<int> preds(static_cast<size_t>(n), -1);
  const int workers = resolve_workers(threads);
  std::deque<ModelRunner> runners;
  for (int w = 0; w < workers; ++w) {
    runners.emplace_back(config);
    runners.back().set_params(&params);
  }
  parallel_chunks(n, workers, [&](int w, int64_t lo, int64_t hi) {
    ModelRunner& runner = runners[static_cast<size_t>(w)];
    for (int64_t i = lo; i < hi; ++i) {
      Tensor<float> patches = dataset.samples[static_cast<size_t>(i)].image.as_matrix();
      preds[static_cast<size_t>(i)] = restricted_argmax(runner.logits(patches).data, class_subset);
    }
  });
  return preds;
}

double top1_subset_accuracy(const ModelConfig& config, const ModelParams& params,
                            const Dataset& dataset, const std::vector<int>& class_subset,
                            int threads) {
  if (dataset.samples.empty()) throw std::invalid_argument("top1: empty dataset");
  for (const auto& rec : dataset.samples)
    if (std::find(class_subset.begin(), class_subset.end(), rec.label) == class_subset.end())
      throw std::invalid_argument("top1: dataset label outside class subset");
  std::vector<int> preds = predict_dataset(config, params, dataset, class_subset, threads);
  int64_t correct = 0;
  for (size_t i = 0; i < preds.size(); ++i)
    correct += preds[i] == dataset.samples[i].label;
  return static_cast<double>(correct) / static_cast<double>(preds.size());
}

double top1_accuracy(const ModelConfig& config, const ModelParams& params, const Dataset& dataset,
                     int threads) {
  std::vector<int> all(static_cast<size_t>(config.classes));
  for (int c = 0; c < config.classes; ++c) all[static_cast<size_t>(c)] = c;
  return top1_subset_accuracy(config, params, dataset, all, threads);
}

EvalReport evaluate_model(const ModelConfig& config, const ModelParams& params,
                          const Dataset& id_test, const std::vector<Dataset>& ood_tests,
                          const std::string& model_id, int threads) {
  EvalReport report;
  report.model_id = model_id;
  report.model_checksum = params_checksum(params);
  report.id_top1 = top1_accuracy(config, params, id_test, threads);
  report.splits.push_back(
      {id_test.name, static_cast<int>(id_test.samples.size()), report.id_top1, false});
  double sum = 0;
  for (const Dataset& ood : ood_tests) {
    double acc = top1_accuracy(config, params, ood, threads);
    report.splits.push_back({ood.name, static_cast<int>(ood.samples.size()), acc, true});
    sum += acc;
  }
  report.ood_avg = ood_tests.empty() ? 0.0 : sum / static_cast<double>(ood_tests.size());
  return report;
}

ModelParams wise_ensemble(const ModelParams& theta0, const ModelParams& theta1, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0))
    throw std::invalid_argument("wise_ensemble: alpha must be in [0,1]");
  if (theta0.size() != theta1.size())
    throw std::invalid_argument("wise_ensemble: parameter sets differ");
  ModelParams out;
  const float a = static_cast<float>(alpha);
  const float b = static_cast<float>(1.0 - alpha);
  for (const auto& [name, t0] : theta0) {
    auto it = theta1.find(name);
    if (it == theta1.end() || it->second.shape != t0.shape)
      throw std::invalid_argument("wise_ensemble: parameter '" + name + "' mismatch");
    Tensor<float> t(t0.shape);
    const Tensor<float>& t1 = it->second;
    for (size_t i = 0; i < t.data.size(); ++i) t.data[i] = b * t0.data[i] + a * t1.data[i];
    out[name] = std::move(t);
  }
  return out;
}

std::vector<CurvePoint> wise_curve(const ModelConfig& config, const ModelParams& theta0,
                                   const ModelParams& theta1, const std::vector<double>& alphas,
                                   const Dataset& id_test, const std::vector<Dataset>& ood_tests,
                                   int threads) {
  std::vector<CurvePoint> curve;
  curve.reserve(alphas.size());
  for (double alpha : alphas) {
    ModelParams theta = wise_ensemble(theta0, theta1, alpha);
    char id[48];
    std::snprintf(id, sizeof(id), "wise-alpha-%.4f", alpha);
    curve.push_back({alpha, evaluate_model(config, theta, id_test, ood_tests, id, threads)});
  }
  return curve;
}

void write_eval_report_csv(const std::string& path, const std::vector<EvalReport>& reports,
                           uint64_t seed, const std::string& config_hash) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw MissingArtifactError("cannot write eval csv: " + path);
  f << "model_id,split,n,top1,seed,config_hash\n";
  char line[256];
  for (const EvalReport& r : reports) {
    for (const SplitResult& s : r.splits) {
      std::snprintf(line, sizeof(line), "%s,%s,%d,%.6f,%llu,%s\n", r.model_id.c_str(),
                    s.name.c_str(), s.n, s.top1, static_cast<unsigned long long>(seed),
                    config_hash.c_str());
      f << line;
    }
  }
}

void write_curve_csv(const std::string& path, const std::vector<CurvePoint>& curve, uint64_t seed,
                     const std::string& config_hash) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw MissingArtifactError("cannot write curve csv: " + path);
  f << "alpha,id_acc,ood_avg";
  if (!curve.empty())
    for (const SplitResult& s : curve.front().report.splits)
      if (s.ood) f << "," << s.name;
  f << ",seed,config_hash\n";
  char buf[64];
  for (const CurvePoint& p : curve) {
    std::snprintf(buf, sizeof(buf), "%.6f,%.6f,%.6f", p.alpha, p.report.id_top1,
                  p.report.ood_avg);
    f << buf;
    for (const SplitResult& s : p.report.splits)
      if (s.ood) {
        std::snprintf(buf, sizeof(buf), ",%.6f", s.top1);
        f << buf;
      }
    f << "," << seed << "," << config_hash << "\n";
  }
}

}  // namespace cfft
