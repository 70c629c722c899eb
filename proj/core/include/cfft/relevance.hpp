#pragma once

#include <vector>

#include "cfft/model.hpp"
#include "cfft/scm.hpp"
#include "cfft/tensor.hpp"

namespace cfft {

// Per-patch class-relevance scores, min-max normalized to [0,1]. When every
// raw score is equal the map degenerates to all 0.5.
struct RelevanceMap {
  std::vector<float> scores;  // length P
  int target_class = 0;
  uint64_t model_checksum = 0;
};

struct PatchPartition {
  std::vector<int> object;   // score >= t
  std::vector<int> context;  // score < t
};

// Gradient-weighted attention rollout: per layer, head-average of
// relu(dlogit_target/dA) * A, plus identity, row-normalized; layer matrices
// chained by matrix product; the class-token row over patch columns is the
// raw score vector.
std::vector<float> rollout_scores(const std::vector<std::vector<Tensor<float>>>& attention,
                                  const std::vector<std::vector<Tensor<float>>>& grads);

std::vector<float> normalize_scores(std::vector<float> raw);

class RelevanceScorer {
 public:
  explicit RelevanceScorer(const ModelConfig& config);
  void set_params(const ModelParams* params);
  RelevanceMap score(const Tensor<float>& patches, int target_class);
  // Unrestricted top-1 of the current params (ties to the lowest index).
  int predict(const Tensor<float>& patches);

 private:
  ModelRunner runner_;
  uint64_t checksum_ = 0;
};

RelevanceMap relevance_map(const ModelConfig& config, const ModelParams& params,
                           const PatchImage& image, int target_class);

// object = {i : score_i >= t}; context = the complement.
PatchPartition threshold_partition(const RelevanceMap& map, double t);

// Debug dump: JSON scores plus a PGM grayscale rendering of the patch grid.
void dump_relevance_json(const std::string& path, const RelevanceMap& map);
void dump_relevance_pgm(const std::string& path, const RelevanceMap& map, int grid);

}  // namespace cfft
