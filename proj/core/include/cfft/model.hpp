#pragma once

#include <string>
#include <vector>

#include "cfft/graph.hpp"
#include "cfft/scm.hpp"
#include "cfft/tensor.hpp"

namespace cfft {

// Shared architecture for teacher, student and every ensemble: patch
// embedding + class token + learned positions, pre-norm attention blocks,
// final layer norm; the class-token embedding after the final norm is the
// feature the distillation loss acts on.
struct ModelConfig {
  int embed_dim = 64;
  int layers = 2;
  int heads = 4;
  int patch_count = 64;   // P
  int classes = 8;        // K
  int patch_dim = 48;     // channels * patch_side^2
  int mlp_hidden = 128;

  int tokens() const { return patch_count + 1; }
  int head_dim() const { return embed_dim / heads; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;

  static ModelConfig for_spec(const ScmSpec& spec, int embed = 64, int layers = 2, int heads = 4,
                              int mlp_hidden = 0);
};

using ModelParams = ParamMap<float>;

// Parameter names and shapes are a pure function of the config.
std::map<std::string, Shape> param_shapes(const ModelConfig& config);
ModelParams init_model_params(const ModelConfig& config, uint64_t seed);

template <typename S>
ParamMap<S> cast_params(const ModelParams& params);

// The forward pass appended onto a graph; attention ids index [layer][head]
// post-softmax matrices, used by the relevance module.
struct ModelNodes {
  int patches_input = -1;
  int feature = -1;  // [1, embed_dim]
  int logits = -1;   // [1, classes]
  std::vector<std::vector<int>> attention;
};

template <typename S>
ModelNodes append_model_forward(Graph<S>& g, const ModelConfig& config,
                                const std::string& input_name);

struct FeatureResult {
  std::vector<float> feature;
  std::vector<std::vector<Tensor<float>>> attention;  // [layer][head], each [T,T]
};

// Reusable forward-pass workspace: one graph, preallocated buffers. The
// graph also carries a scalar target node sum(logits * onehot) so relevance
// can back-propagate to the attention matrices.
class ModelRunner {
 public:
  explicit ModelRunner(const ModelConfig& config);
  // The evaluation binds runner-owned buffers; relocation would dangle.
  ModelRunner(const ModelRunner&) = delete;
  ModelRunner& operator=(const ModelRunner&) = delete;

  const ModelConfig& config() const { return config_; }
  void set_params(const ModelParams* params);

  const Tensor<float>& logits(const Tensor<float>& patches);
  FeatureResult features(const Tensor<float>& patches);
  std::vector<float> feature_vector(const Tensor<float>& patches);

  // Gradients of logits[target] w.r.t. each attention matrix, along with the
  // attention values; used by gradient-weighted rollout.
  struct AttentionGrads {
    std::vector<std::vector<Tensor<float>>> values;
    std::vector<std::vector<Tensor<float>>> grads;
  };
  AttentionGrads attention_grads(const Tensor<float>& patches, int target_class);

 private:
  struct RunnerGraph {
    Graph<float> graph;
    ModelNodes nodes;
    int onehot_input = -1;
  };
  static RunnerGraph build_runner_graph(const ModelConfig& config);

  ModelConfig config_;
  RunnerGraph rg_;  // must precede eval_ (evaluation holds a graph pointer)
  Evaluation<float> eval_;
  Tensor<float> onehot_;
  bool params_bound_ = false;
};

// Spec-level convenience entry points (build a runner per call; prefer a
// ModelRunner in loops).
std::pair<std::vector<float>, std::vector<std::vector<Tensor<float>>>> forward_features(
    const ModelConfig& config, const ModelParams& params, const PatchImage& image);
std::vector<float> forward_logits(const ModelConfig& config, const ModelParams& params,
                                  const PatchImage& image);

// Versioned binary checkpoint: config header + named float32 arrays in
// sorted name order.
void save_checkpoint(const std::string& path, const ModelConfig& config,
                     const ModelParams& params);
std::pair<ModelConfig, ModelParams> load_checkpoint(const std::string& path);

extern template ParamMap<float> cast_params<float>(const ModelParams&);
extern template ParamMap<double> cast_params<double>(const ModelParams&);
extern template ModelNodes append_model_forward(Graph<float>&, const ModelConfig&,
                                                const std::string&);
extern template ModelNodes append_model_forward(Graph<double>&, const ModelConfig&,
                                                const std::string&);

}  // namespace cfft
