#pragma once

#include <deque>
#include <optional>
#include <vector>

#include "cfft/relevance.hpp"
#include "cfft/rng.hpp"
#include "cfft/scm.hpp"

namespace cfft {

enum class Masking { kRandom, kContext, kObject };
enum class Refilling { kNone, kSingle, kMulti };

const char* masking_name(Masking m);
const char* refilling_name(Refilling r);

struct StrategyConfig {
  Masking masking = Masking::kObject;
  Refilling refilling = Refilling::kSingle;
  double masking_rate = 0.5;  // random-mask only
  double threshold = 0.5;     // context/object only
  bool use_predicted_class = false;  // CAM target: ground-truth label unless set

  void validate() const;
  bool needs_relevance() const { return masking != Masking::kRandom; }
  // The strategy hyper-parameter that is actually in play.
  double active_param() const { return masking == Masking::kRandom ? masking_rate : threshold; }
};

struct RefillProvenance {
  std::vector<int> masked;  // masked patch indices, ascending
  std::vector<int> donors;  // donor image index per masked patch; -1 when unfilled
};

struct CounterfactualBatch {
  std::vector<PatchImage> images;
  std::vector<RefillProvenance> provenance;
};

// Patch indices to mask. Random draws exactly round(rate*P) indices without
// replacement (round half up); context/object take the matching side of
// threshold_partition. A relevance map must be given exactly when the
// strategy is content-based.
std::vector<int> select_mask(const PatchImage& image, const StrategyConfig& strategy,
                             const std::optional<RelevanceMap>& relevance, Pcg32& rng);

// Refills the masked patches of batch[anchor]. No-fill zeroes them;
// single-fill copies every masked position from one donor; multi-fill draws
// an independent donor per position. Donors never equal the anchor.
std::pair<PatchImage, RefillProvenance> refill(const std::vector<PatchImage>& batch, int anchor,
                                               const std::vector<int>& masked,
                                               const StrategyConfig& strategy, Pcg32& rng);

// relevance (when needed) -> select_mask -> refill, per image. Deterministic
// given (batch, params, strategy, seed); images are processed on independent
// rng streams split from the seed.
CounterfactualBatch make_counterfactual_batch(const ModelConfig& config,
                                              const std::vector<PatchImage>& batch,
                                              const std::vector<int>& labels,
                                              const ModelParams& student_params,
                                              const StrategyConfig& strategy, uint64_t seed,
                                              int workers = 1,
                                              std::deque<RelevanceScorer>* scorers = nullptr);

// Dump for visual audit: counterfactual images in the dataset container plus
// a JSON provenance sidecar.
void dump_counterfactual_batch(const std::string& image_path, const std::string& sidecar_path,
                               const ScmSpec& spec, const CounterfactualBatch& batch,
                               const std::vector<int>& labels);

}  // namespace cfft
