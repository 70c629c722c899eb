#include "cfft/model.hpp"

#include <cmath>
#include <fstream>

#include "cfft/rng.hpp"

namespace cfft {

void ModelConfig::validate() const {
  if (embed_dim <= 0 || layers <= 0 || heads <= 0 || patch_count <= 0 || classes < 2 ||
      patch_dim <= 0 || mlp_hidden <= 0)
    throw ConfigError("model: all dimensions must be positive (classes >= 2)");
  if (embed_dim % heads != 0) throw ConfigError("model: embed_dim must be divisible by heads");
}

ModelConfig ModelConfig::for_spec(const ScmSpec& spec, int embed, int layers, int heads,
                                  int mlp_hidden) {
  ModelConfig c;
  c.embed_dim = embed;
  c.layers = layers;
  c.heads = heads;
  c.patch_count = spec.patches();
  c.classes = spec.classes;
  c.patch_dim = spec.patch_dim();
  c.mlp_hidden = mlp_hidden > 0 ? mlp_hidden : 2 * embed;
  c.validate();
  return c;
}

std::map<std::string, Shape> param_shapes(const ModelConfig& c) {
  std::map<std::string, Shape> s;
  const int64_t E = c.embed_dim, T = c.tokens(), H = c.mlp_hidden, K = c.classes;
  s["embed.weight"] = {c.patch_dim, E};
  s["embed.bias"] = {E};
  s["cls_token"] = {1, E};
  s["pos_embed"] = {T, E};
  for (int l = 0; l < c.layers; ++l) {
    std::string p = "layers." + std::to_string(l) + ".";
    s[p + "ln1.gain"] = {E};
    s[p + "ln1.bias"] = {E};
    s[p + "attn.qkv.weight"] = {E, 3 * E};
    s[p + "attn.qkv.bias"] = {3 * E};
    s[p + "attn.proj.weight"] = {E, E};
    s[p + "attn.proj.bias"] = {E};
    s[p + "ln2.gain"] = {E};
    s[p + "ln2.bias"] = {E};
    s[p + "mlp.fc1.weight"] = {E, H};
    s[p + "mlp.fc1.bias"] = {H};
    s[p + "mlp.fc2.weight"] = {H, E};
    s[p + "mlp.fc2.bias"] = {E};
  }
  s["final_ln.gain"] = {E};
  s["final_ln.bias"] = {E};
  s["head.weight"] = {E, K};
  s["head.bias"] = {K};
  return s;
}

ModelParams init_model_params(const ModelConfig& config, uint64_t seed) {
  config.validate();
  ModelParams params;
  uint64_t index = 0;
  for (const auto& [name, shape] : param_shapes(config)) {
    Tensor<float> t(shape);
    Pcg32 rng = rng_stream(seed, "init:" + name, index++);
    const bool is_gain = name.ends_with("gain");
    const bool is_bias = name.ends_with("bias");
    if (is_gain) {
      std::fill(t.data.begin(), t.data.end(), 1.0f);
    } else if (is_bias) {
      // zeros
    } else {
      for (float& v : t.data) v = static_cast<float>(0.02 * rng.normal());
    }
    params[name] = std::move(t);
  }
  return params;
}

template <typename S>
ParamMap<S> cast_params(const ModelParams& params) {
  ParamMap<S> out;
  for (const auto& [name, t] : params) {
    Tensor<S> c(t.shape);
    for (size_t i = 0; i < t.data.size(); ++i) c.data[i] = static_cast<S>(t.data[i]);
    out[name] = std::move(c);
  }
  return out;
}

template ParamMap<float> cast_params<float>(const ModelParams&);
template ParamMap<double> cast_params<double>(const ModelParams&);

template <typename S>
ModelNodes append_model_forward(Graph<S>& g, const ModelConfig& c, const std::string& input_name) {
  c.validate();
  const int64_t E = c.embed_dim, T = c.tokens(), P = c.patch_count;
  const int dh = c.head_dim();
  auto param = [&g](const std::string& name, Shape shape) {
    if (auto id = g.find_param(name)) return *id;
    return g.param(name, std::move(shape));
  };

  ModelNodes out;
  out.patches_input = g.input(input_name, Shape{P, c.patch_dim});

  int tok = g.add_row_bias(g.matmul(out.patches_input, param("embed.weight", {c.patch_dim, E})),
                           param("embed.bias", {E}));
  tok = g.concat_rows({param("cls_token", {1, E}), tok});
  tok = g.add(tok, param("pos_embed", {T, E}));

  out.attention.resize(static_cast<size_t>(c.layers));
  for (int l = 0; l < c.layers; ++l) {
    std::string p = "layers." + std::to_string(l) + ".";
    int normed = g.layer_norm_rows(tok, param(p + "ln1.gain", {E}), param(p + "ln1.bias", {E}));
    int qkv = g.add_row_bias(g.matmul(normed, param(p + "attn.qkv.weight", {E, 3 * E})),
                             param(p + "attn.qkv.bias", {3 * E}));
    std::vector<int> head_outputs;
    for (int h = 0; h < c.heads; ++h) {
      int q = g.slice_cols(qkv, int64_t(h) * dh, dh);
      int k = g.slice_cols(qkv, E + int64_t(h) * dh, dh);
      int v = g.slice_cols(qkv, 2 * E + int64_t(h) * dh, dh);
      int scores = g.scale(g.matmul(q, g.transpose(k)), 1.0 / std::sqrt(double(dh)));
      int attn = g.softmax_rows(scores);
      out.attention[static_cast<size_t>(l)].push_back(attn);
      head_outputs.push_back(g.matmul(attn, v));
    }
    int merged = g.add_row_bias(
        g.matmul(g.concat_cols(head_outputs), param(p + "attn.proj.weight", {E, E})),
        param(p + "attn.proj.bias", {E}));
    tok = g.add(tok, merged);

    int normed2 = g.layer_norm_rows(tok, param(p + "ln2.gain", {E}), param(p + "ln2.bias", {E}));
    int hidden = g.gelu(g.add_row_bias(
        g.matmul(normed2, param(p + "mlp.fc1.weight", {E, c.mlp_hidden})),
        param(p + "mlp.fc1.bias", {c.mlp_hidden})));
    int mlp_out = g.add_row_bias(g.matmul(hidden, param(p + "mlp.fc2.weight", {c.mlp_hidden, E})),
                                 param(p + "mlp.fc2.bias", {E}));
    tok = g.add(tok, mlp_out);
  }

  int final_norm =
      g.layer_norm_rows(tok, param("final_ln.gain", {E}), param("final_ln.bias", {E}));
  out.feature = g.slice_rows(final_norm, 0, 1);
  out.logits = g.add_row_bias(g.matmul(out.feature, param("head.weight", {E, c.classes})),
                              param("head.bias", {c.classes}));
  return out;
}

template ModelNodes append_model_forward(Graph<float>&, const ModelConfig&, const std::string&);
template ModelNodes append_model_forward(Graph<double>&, const ModelConfig&, const std::string&);

// ---------------------------------------------------------------------------
// ModelRunner

ModelRunner::RunnerGraph ModelRunner::build_runner_graph(const ModelConfig& config) {
  RunnerGraph rg;
  rg.nodes = append_model_forward(rg.graph, config, "patches");
  rg.onehot_input = rg.graph.input("onehot", Shape{1, config.classes});
  rg.graph.set_loss(rg.graph.sum_all(rg.graph.mul(rg.nodes.logits, rg.onehot_input)));
  return rg;
}

ModelRunner::ModelRunner(const ModelConfig& config)
    : config_(config),
      rg_(build_runner_graph(config)),
      eval_(rg_.graph),
      onehot_(Shape{1, config.classes}) {
  eval_.bind_input("onehot", &onehot_);
}

void ModelRunner::set_params(const ModelParams* params) {
  eval_.bind_params(params);
  params_bound_ = true;
}

const Tensor<float>& ModelRunner::logits(const Tensor<float>& patches) {
  if (!params_bound_) throw std::logic_error("model runner: params not set");
  eval_.bind_input("patches", &patches);
  eval_.forward();
  return eval_.value(rg_.nodes.logits);
}

std::vector<float> ModelRunner::feature_vector(const Tensor<float>& patches) {
  if (!params_bound_) throw std::logic_error("model runner: params not set");
  eval_.bind_input("patches", &patches);
  eval_.forward();
  return eval_.value(rg_.nodes.feature).data;
}

FeatureResult ModelRunner::features(const Tensor<float>& patches) {
  if (!params_bound_) throw std::logic_error("model runner: params not set");
  eval_.bind_input("patches", &patches);
  eval_.forward();
  FeatureResult out;
  out.feature = eval_.value(rg_.nodes.feature).data;
  out.attention.resize(rg_.nodes.attention.size());
  for (size_t l = 0; l < rg_.nodes.attention.size(); ++l)
    for (int id : rg_.nodes.attention[l]) out.attention[l].push_back(eval_.value(id));
  return out;
}

ModelRunner::AttentionGrads ModelRunner::attention_grads(const Tensor<float>& patches,
                                                         int target_class) {
  if (!params_bound_) throw std::logic_error("model runner: params not set");
  if (target_class < 0 || target_class >= config_.classes)
    throw std::invalid_argument("model runner: target class out of range");
  std::fill(onehot_.data.begin(), onehot_.data.end(), 0.0f);
  onehot_.data[static_cast<size_t>(target_class)] = 1.0f;
  eval_.bind_input("patches", &patches);
  eval_.forward();
  eval_.backward();
  AttentionGrads out;
  out.values.resize(rg_.nodes.attention.size());
  out.grads.resize(rg_.nodes.attention.size());
  for (size_t l = 0; l < rg_.nodes.attention.size(); ++l) {
    for (int id : rg_.nodes.attention[l]) {
      out.values[l].push_back(eval_.value(id));
      out.grads[l].push_back(eval_.grad(id));
    }
  }
  std::fill(onehot_.data.begin(), onehot_.data.end(), 0.0f);
  return out;
}

std::pair<std::vector<float>, std::vector<std::vector<Tensor<float>>>> forward_features(
    const ModelConfig& config, const ModelParams& params, const PatchImage& image) {
  ModelRunner runner(config);
  runner.set_params(&params);
  Tensor<float> patches = image.as_matrix();
  FeatureResult r = runner.features(patches);
  return {std::move(r.feature), std::move(r.attention)};
}

std::vector<float> forward_logits(const ModelConfig& config, const ModelParams& params,
                                  const PatchImage& image) {
  ModelRunner runner(config);
  runner.set_params(&params);
  Tensor<float> patches = image.as_matrix();
  return runner.logits(patches).data;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {
constexpr char kCkptMagic[4] = {'C', 'F', 'C', 'K'};
constexpr uint32_t kCkptVersion = 1;

void put_u32(std::string& buf, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  buf.append(reinterpret_cast<const char*>(b), 4);
}
uint32_t get_u32(const std::string& buf, size_t& pos) {
  if (pos + 4 > buf.size()) throw MissingArtifactError("checkpoint file truncated");
  const auto* b = reinterpret_cast<const unsigned char*>(buf.data() + pos);
  pos += 4;
  return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}
}  // namespace

void save_checkpoint(const std::string& path, const ModelConfig& config,
                     const ModelParams& params) {
  const auto expected = param_shapes(config);
  if (params.size() != expected.size())
    throw std::invalid_argument("checkpoint: parameter set does not match config");
  std::string buf;
  buf.append(kCkptMagic, 4);
  put_u32(buf, kCkptVersion);
  for (int v : {config.embed_dim, config.layers, config.heads, config.patch_count, config.classes,
                config.patch_dim, config.mlp_hidden})
    put_u32(buf, static_cast<uint32_t>(v));
  put_u32(buf, static_cast<uint32_t>(params.size()));
  for (const auto& [name, t] : params) {  // std::map: sorted name order
    auto it = expected.find(name);
    if (it == expected.end() || it->second != t.shape)
      throw std::invalid_argument("checkpoint: parameter '" + name + "' does not match config");
    put_u32(buf, static_cast<uint32_t>(name.size()));
    buf.append(name);
    put_u32(buf, static_cast<uint32_t>(t.shape.size()));
    for (int64_t d : t.shape) put_u32(buf, static_cast<uint32_t>(d));
    for (float v : t.data) {
      uint32_t u;
      std::memcpy(&u, &v, 4);
      put_u32(buf, u);
    }
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw MissingArtifactError("cannot write checkpoint: " + path);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw MissingArtifactError("short write to checkpoint: " + path);
}

std::pair<ModelConfig, ModelParams> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingArtifactError("checkpoint not found: " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 8 || std::memcmp(buf.data(), kCkptMagic, 4) != 0)
    throw MissingArtifactError("not a checkpoint file: " + path);
  size_t pos = 4;
  uint32_t version = get_u32(buf, pos);
  if (version != kCkptVersion)
    throw MissingArtifactError("checkpoint version " + std::to_string(version) +
                               " unsupported: " + path);
  ModelConfig config;
  config.embed_dim = static_cast<int>(get_u32(buf, pos));
  config.layers = static_cast<int>(get_u32(buf, pos));
  config.heads = static_cast<int>(get_u32(buf, pos));
  config.patch_count = static_cast<int>(get_u32(buf, pos));
  config.classes = static_cast<int>(get_u32(buf, pos));
  config.patch_dim = static_cast<int>(get_u32(buf, pos));
  config.mlp_hidden = static_cast<int>(get_u32(buf, pos));
  config.validate();
  uint32_t count = get_u32(buf, pos);
  const auto expected = param_shapes(config);
  if (count != expected.size())
    throw MissingArtifactError("checkpoint parameter count mismatch: " + path);
  ModelParams params;
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t name_len = get_u32(buf, pos);
    if (pos + name_len > buf.size()) throw MissingArtifactError("checkpoint file truncated");
    std::string name = buf.substr(pos, name_len);
    pos += name_len;
    uint32_t rank = get_u32(buf, pos);
    Shape shape(rank);
    for (uint32_t d = 0; d < rank; ++d) shape[d] = static_cast<int64_t>(get_u32(buf, pos));
    auto it = expected.find(name);
    if (it == expected.end() || it->second != shape)
      throw MissingArtifactError("checkpoint parameter '" + name + "' does not match config");
    Tensor<float> t(shape);
    for (float& v : t.data) {
      uint32_t u = get_u32(buf, pos);
      std::memcpy(&v, &u, 4);
    }
    params[name] = std::move(t);
  }
  return {config, params};
}

}  // namespace cfft
