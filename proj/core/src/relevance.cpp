#include "cfft/relevance.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>

namespace cfft {

std::vector<float> rollout_scores(const std::vector<std::vector<Tensor<float>>>& attention,
                                  const std::vector<std::vector<Tensor<float>>>& grads) {
  if (attention.empty() || attention.size() != grads.size())
    throw std::invalid_argument("rollout: attention/grad layer mismatch");
  const int64_t T = attention[0][0].rows();
  std::vector<double> chain(static_cast<size_t>(T * T), 0.0);
  for (int64_t i = 0; i < T; ++i) chain[size_t(i * T + i)] = 1.0;  // R starts as identity

  std::vector<double> layer_mat(static_cast<size_t>(T * T));
  std::vector<double> next(static_cast<size_t>(T * T));
  for (size_t l = 0; l < attention.size(); ++l) {
    const auto& heads = attention[l];
    const auto& head_grads = grads[l];
    if (heads.empty() || heads.size() != head_grads.size())
      throw std::invalid_argument("rollout: head count mismatch");
    std::fill(layer_mat.begin(), layer_mat.end(), 0.0);
    for (size_t h = 0; h < heads.size(); ++h) {
      const auto& a = heads[h].data;
      const auto& g = head_grads[h].data;
      for (size_t i = 0; i < a.size(); ++i) {
        double gp = g[i] > 0.0f ? static_cast<double>(g[i]) : 0.0;
        layer_mat[i] += gp * static_cast<double>(a[i]);
      }
    }
    const double inv_heads = 1.0 / static_cast<double>(heads.size());
    for (int64_t i = 0; i < T; ++i) {
      double row_sum = 0.0;
      for (int64_t j = 0; j < T; ++j) {
        double v = layer_mat[size_t(i * T + j)] * inv_heads + (i == j ? 1.0 : 0.0);
        layer_mat[size_t(i * T + j)] = v;
        row_sum += v;
      }
      for (int64_t j = 0; j < T; ++j) layer_mat[size_t(i * T + j)] /= row_sum;
    }
    for (int64_t i = 0; i < T; ++i)
      for (int64_t j = 0; j < T; ++j) {
        double acc = 0.0;
        for (int64_t k = 0; k < T; ++k)
          acc += layer_mat[size_t(i * T + k)] * chain[size_t(k * T + j)];
        next[size_t(i * T + j)] = acc;
      }
    std::swap(chain, next);
  }

  // Class-token row, patch columns only.
  std::vector<float> raw(static_cast<size_t>(T - 1));
  for (int64_t j = 1; j < T; ++j) raw[size_t(j - 1)] = static_cast<float>(chain[size_t(j)]);
  return raw;
}

std::vector<float> normalize_scores(std::vector<float> raw) {
  if (raw.empty()) throw std::invalid_argument("normalize: empty score vector");
  float lo = raw[0], hi = raw[0];
  for (float v : raw) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (hi == lo) {
    std::fill(raw.begin(), raw.end(), 0.5f);
    return raw;
  }
  const float inv = 1.0f / (hi - lo);
  for (float& v : raw) v = (v - lo) * inv;
  return raw;
}

RelevanceScorer::RelevanceScorer(const ModelConfig& config) : runner_(config) {}

void RelevanceScorer::set_params(const ModelParams* params) {
  runner_.set_params(params);
  checksum_ = params_checksum(*params);
}

int RelevanceScorer::predict(const Tensor<float>& patches) {
  const Tensor<float>& lg = runner_.logits(patches);
  int best = 0;
  for (size_t c = 1; c < lg.data.size(); ++c)
    if (lg.data[c] > lg.data[static_cast<size_t>(best)]) best = static_cast<int>(c);
  return best;
}

RelevanceMap RelevanceScorer::score(const Tensor<float>& patches, int target_class) {
  ModelRunner::AttentionGrads ag = runner_.attention_grads(patches, target_class);
  RelevanceMap map;
  map.scores = normalize_scores(rollout_scores(ag.values, ag.grads));
  map.target_class = target_class;
  map.model_checksum = checksum_;
  return map;
}

RelevanceMap relevance_map(const ModelConfig& config, const ModelParams& params,
                           const PatchImage& image, int target_class) {
  RelevanceScorer scorer(config);
  scorer.set_params(&params);
  Tensor<float> patches = image.as_matrix();
  return scorer.score(patches, target_class);
}

PatchPartition threshold_partition(const RelevanceMap& map, double t) {
  PatchPartition part;
  for (size_t i = 0; i < map.scores.size(); ++i) {
    if (static_cast<double>(map.scores[i]) >= t)
      part.object.push_back(static_cast<int>(i));
    else
      part.context.push_back(static_cast<int>(i));
  }
  return part;
}

void dump_relevance_json(const std::string& path, const RelevanceMap& map) {
  nlohmann::json j;
  j["target_class"] = map.target_class;
  j["model_checksum"] = hex64(map.model_checksum);
  j["scores"] = map.scores;
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw MissingArtifactError("cannot write relevance json: " + path);
  f << j.dump(2);
}

void dump_relevance_pgm(const std::string& path, const RelevanceMap& map, int grid) {
  if (grid * grid != static_cast<int>(map.scores.size()))
    throw std::invalid_argument("relevance pgm: grid does not match score count");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw MissingArtifactError("cannot write relevance pgm: " + path);
  f << "P5\n" << grid << " " << grid << "\n255\n";
  for (float v : map.scores) {
    unsigned char b = static_cast<unsigned char>(std::clamp(v, 0.0f, 1.0f) * 255.0f + 0.5f);
    f.write(reinterpret_cast<const char*>(&b), 1);
  }
}

}  // namespace cfft
