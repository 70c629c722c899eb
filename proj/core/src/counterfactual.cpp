#include "cfft/counterfactual.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>

#include "cfft/parallel.hpp"

namespace cfft {

const char* masking_name(Masking m) {
  switch (m) {
    case Masking::kRandom: return "random";
    case Masking::kContext: return "context";
    case Masking::kObject: return "object";
  }
  return "?";
}

const char* refilling_name(Refilling r) {
  switch (r) {
    case Refilling::kNone: return "none";
    case Refilling::kSingle: return "single";
    case Refilling::kMulti: return "multi";
  }
  return "?";
}

void StrategyConfig::validate() const {
  if (masking == Masking::kRandom) {
    if (!(masking_rate > 0.0 && masking_rate < 1.0))
      throw ConfigError("strategy: masking rate must be in (0,1)");
  } else {
    if (!(threshold >= 0.0 && threshold <= 1.0))
      throw ConfigError("strategy: threshold must be in [0,1]");
  }
}

std::vector<int> select_mask(const PatchImage& image, const StrategyConfig& strategy,
                             const std::optional<RelevanceMap>& relevance, Pcg32& rng) {
  strategy.validate();
  const int P = image.patch_count();
  if (strategy.needs_relevance()) {
    if (!relevance)
      throw std::invalid_argument("select_mask: content-based masking needs a relevance map");
    if (static_cast<int>(relevance->scores.size()) != P)
      throw std::invalid_argument("select_mask: relevance map does not match patch count");
    PatchPartition part = threshold_partition(*relevance, strategy.threshold);
    return strategy.masking == Masking::kObject ? part.object : part.context;
  }
  if (relevance)
    throw std::invalid_argument("select_mask: random masking must not receive a relevance map");
  // round half up
  int count = static_cast<int>(std::floor(strategy.masking_rate * P + 0.5));
  count = std::min(count, P);
  std::vector<int> pool(static_cast<size_t>(P));
  for (int i = 0; i < P; ++i) pool[static_cast<size_t>(i)] = i;
  for (int i = 0; i < count; ++i) {
    uint32_t j = static_cast<uint32_t>(i) + rng.uniform_u32(static_cast<uint32_t>(P - i));
    std::swap(pool[static_cast<size_t>(i)], pool[j]);
  }
  pool.resize(static_cast<size_t>(count));
  std::sort(pool.begin(), pool.end());
  return pool;
}

std::pair<PatchImage, RefillProvenance> refill(const std::vector<PatchImage>& batch, int anchor,
                                               const std::vector<int>& masked,
                                               const StrategyConfig& strategy, Pcg32& rng) {
  if (anchor < 0 || anchor >= static_cast<int>(batch.size()))
    throw std::invalid_argument("refill: anchor outside batch");
  const int B = static_cast<int>(batch.size());
  if (strategy.refilling != Refilling::kNone && B < 2)
    throw ConfigError("refill: batch must hold at least 2 images for refilling");

  PatchImage out = batch[static_cast<size_t>(anchor)];
  RefillProvenance prov;
  prov.masked = masked;
  prov.donors.assign(masked.size(), -1);

  auto draw_donor = [&]() {
    // Uniform over the batch minus the anchor.
    uint32_t d = rng.uniform_u32(static_cast<uint32_t>(B - 1));
    int donor = static_cast<int>(d);
    if (donor >= anchor) ++donor;
    return donor;
  };

  switch (strategy.refilling) {
    case Refilling::kNone: {
      for (int p : masked) out.zero_patch(p);
      break;
    }
    case Refilling::kSingle: {
      if (!masked.empty()) {
        int donor = draw_donor();
        for (size_t k = 0; k < masked.size(); ++k) {
          out.set_patch(masked[k], batch[static_cast<size_t>(donor)].patch(masked[k]));
          prov.donors[k] = donor;
        }
      }
      break;
    }
    case Refilling::kMulti: {
      for (size_t k = 0; k < masked.size(); ++k) {
        int donor = draw_donor();
        out.set_patch(masked[k], batch[static_cast<size_t>(donor)].patch(masked[k]));
        prov.donors[k] = donor;
      }
      break;
    }
  }
  return {std::move(out), std::move(prov)};
}

CounterfactualBatch make_counterfactual_batch(const ModelConfig& config,
                                              const std::vector<PatchImage>& batch,
                                              const std::vector<int>& labels,
                                              const ModelParams& student_params,
                                              const StrategyConfig& strategy, uint64_t seed,
                                              int workers,
                                              std::deque<RelevanceScorer>* scorers) {
  strategy.validate();
  if (batch.size() != labels.size())
    throw std::invalid_argument("counterfactual batch: batch/label length mismatch");
  const int B = static_cast<int>(batch.size());
  CounterfactualBatch out;
  out.images.resize(batch.size());
  out.provenance.resize(batch.size());

  workers = resolve_workers(workers);
  std::deque<RelevanceScorer> local;
  std::deque<RelevanceScorer>* pool = scorers;
  if (strategy.needs_relevance() && !pool) {
    for (int w = 0; w < workers; ++w) local.emplace_back(config);
    pool = &local;
  }
  if (pool) {
    if (static_cast<int>(pool->size()) < workers)
      throw std::invalid_argument("counterfactual batch: scorer pool smaller than worker count");
    for (auto& s : *pool) s.set_params(&student_params);
  }

  parallel_chunks(B, workers, [&](int w, int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) {
      Pcg32 rng = rng_stream(seed, "cf", static_cast<uint64_t>(i));
      std::optional<RelevanceMap> rel;
      if (strategy.needs_relevance()) {
        RelevanceScorer& scorer = (*pool)[static_cast<size_t>(w)];
        Tensor<float> patches = batch[static_cast<size_t>(i)].as_matrix();
        int target = strategy.use_predicted_class ? scorer.predict(patches)
                                                  : labels[static_cast<size_t>(i)];
        rel = scorer.score(patches, target);
      }
      std::vector<int> masked = select_mask(batch[static_cast<size_t>(i)], strategy, rel, rng);
      auto [img, prov] =
          refill(batch, static_cast<int>(i), masked, strategy, rng);
      out.images[static_cast<size_t>(i)] = std::move(img);
      out.provenance[static_cast<size_t>(i)] = std::move(prov);
    }
  });
  return out;
}

void dump_counterfactual_batch(const std::string& image_path, const std::string& sidecar_path,
                               const ScmSpec& spec, const CounterfactualBatch& batch,
                               const std::vector<int>& labels) {
  Dataset ds;
  ds.spec = spec;
  ds.name = "counterfactual-batch";
  ds.samples.resize(batch.images.size());
  for (size_t i = 0; i < batch.images.size(); ++i) {
    ds.samples[i].label = labels[i];
    ds.samples[i].domain = 0;
    ds.samples[i].image = batch.images[i];
    ds.samples[i].object_mask.assign(
        static_cast<size_t>(spec.image_side) * spec.image_side, 0);
  }
  save_dataset(image_path, ds);

  nlohmann::json j = nlohmann::json::array();
  for (size_t i = 0; i < batch.provenance.size(); ++i) {
    j.push_back({{"index", i},
                 {"masked", batch.provenance[i].masked},
                 {"donors", batch.provenance[i].donors}});
  }
  std::ofstream f(sidecar_path, std::ios::trunc);
  if (!f) throw MissingArtifactError("cannot write provenance sidecar: " + sidecar_path);
  f << j.dump(2);
}

}  // namespace cfft
