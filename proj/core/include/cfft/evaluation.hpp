#pragma once

#include <string>
#include <vector>

#include "cfft/model.hpp"
#include "cfft/scm.hpp"

namespace cfft {

// Pixel-mask agreement between a CAM-derived mask and the ground-truth
// object mask: n(cam)/n(image), n(cam & seg)/n(seg), n(cam & seg)/n(cam | seg).
struct MaskMetrics {
  double image_rate = 0;
  double object_rate = 0;
  double iou = 0;
};

MaskMetrics mask_metrics(const std::vector<uint8_t>& cam_mask, const std::vector<uint8_t>& seg_mask);

// Union of the pixel blocks of the named patches (row-major boolean mask).
std::vector<uint8_t> patch_mask_to_pixels(const std::vector<int>& patch_indices, int image_side,
                                          int patch_side);

// Prediction restricted to class_subset: argmax of the subset's logits, ties
// broken by the lowest class index.
int restricted_argmax(const std::vector<float>& logits, const std::vector<int>& class_subset);

std::vector<int> predict_dataset(const ModelConfig& config, const ModelParams& params,
                                 const Dataset& dataset, const std::vector<int>& class_subset,
                                 int threads = 0);

// Top-1 accuracy with predictions restricted to class_subset; every dataset
// label must belong to the subset.
double top1_subset_accuracy(const ModelConfig& config, const ModelParams& params,
                            const Dataset& dataset, const std::vector<int>& class_subset,
                            int threads = 0);

// Unrestricted top-1 (subset = all classes).
double top1_accuracy(const ModelConfig& config, const ModelParams& params, const Dataset& dataset,
                     int threads = 0);

struct SplitResult {
  std::string name;
  int n = 0;
  double top1 = 0;
  bool ood = false;
};

struct EvalReport {
  std::string model_id;
  uint64_t model_checksum = 0;
  std::vector<SplitResult> splits;
  double id_top1 = 0;
  double ood_avg = 0;  // unweighted mean over OOD splits
};

EvalReport evaluate_model(const ModelConfig& config, const ModelParams& params,
                          const Dataset& id_test, const std::vector<Dataset>& ood_tests,
                          const std::string& model_id, int threads = 0);

// theta_e = (1 - alpha) * theta0 + alpha * theta1, entrywise over every
// named array.
ModelParams wise_ensemble(const ModelParams& theta0, const ModelParams& theta1, double alpha);

struct CurvePoint {
  double alpha;
  EvalReport report;
};

std::vector<CurvePoint> wise_curve(const ModelConfig& config, const ModelParams& theta0,
                                   const ModelParams& theta1, const std::vector<double>& alphas,
                                   const Dataset& id_test, const std::vector<Dataset>& ood_tests,
                                   int threads = 0);

// CSV emission; every row carries the seed and config hash that produced it.
void write_eval_report_csv(const std::string& path, const std::vector<EvalReport>& reports,
                           uint64_t seed, const std::string& config_hash);
void write_curve_csv(const std::string& path, const std::vector<CurvePoint>& curve, uint64_t seed,
                     const std::string& config_hash);

}  // namespace cfft
