#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cfft/tensor.hpp"

namespace cfft {

// Generator spec. Pixels are 3-channel float intensities in [0,1]; the
// background (domain-controlled) band is kept strictly below the glyph
// (semantics-controlled) band so the ground-truth object mask is exact.
struct ScmSpec {
  int classes = 8;        // K
  int domains = 8;        // M
  double correlation = 0.95;  // rho: P(domain follows the confounded assignment)
  int image_side = 32;
  int patch_side = 4;
  float noise_amp = 0.05f;

  static constexpr int kChannels = 3;
  int grid() const { return image_side / patch_side; }
  int patches() const { return grid() * grid(); }
  int patch_dim() const { return kChannels * patch_side * patch_side; }
  void validate() const;
  bool operator==(const ScmSpec&) const = default;
};

// Recorded exogenous valuation: everything random about one sample other than
// (s, d). Re-rendering with the same record and a different domain yields the
// interventional counterfactual.
struct Exogenous {
  int32_t object_x = 0;
  int32_t object_y = 0;
  int32_t object_size = 0;     // glyph box side in pixels
  float stroke_phase = 0.0f;   // dash offset for dashed glyph variants
  float object_color[3] = {0, 0, 0};
  float bg_phase_x = 0.0f;
  float bg_phase_y = 0.0f;
  uint64_t noise_seed = 0;
};

// Image stored as a grid of square patches (the unit masking acts on).
// Pixels are kept planar (channel, row, col); patches are views computed from
// indices, so flat-pixel round trips are lossless by construction.
struct PatchImage {
  int side = 0;
  int patch_side = 0;
  std::vector<float> pixels;  // kChannels * side * side, planar

  static constexpr int kChannels = ScmSpec::kChannels;

  PatchImage() = default;
  PatchImage(int side_, int patch_side_);
  PatchImage(int side_, int patch_side_, std::vector<float> px);

  int grid() const { return side / patch_side; }
  int patch_count() const { return grid() * grid(); }
  int patch_dim() const { return kChannels * patch_side * patch_side; }
  int pixel_count() const { return side * side; }

  float& at(int c, int y, int x) { return pixels[size_t((c * side + y) * side + x)]; }
  float at(int c, int y, int x) const { return pixels[size_t((c * side + y) * side + x)]; }

  std::vector<float> patch(int index) const;
  void set_patch(int index, const std::vector<float>& values);
  void zero_patch(int index);

  // [P, patch_dim] matrix, one row per patch: the model input.
  Tensor<float> as_matrix() const;

  bool operator==(const PatchImage&) const = default;
};

struct SampleRecord {
  int label = 0;   // value of S
  int domain = 0;  // value of D
  Exogenous u;
  PatchImage image;
  std::vector<uint8_t> object_mask;  // side*side entries, 1 = glyph pixel
};

enum class Split { kIdTrain, kIdVal, kIdTest, kOodTest };
const char* split_name(Split s);

struct Dataset {
  ScmSpec spec;
  std::string name;
  std::vector<SampleRecord> samples;
};

// ID splits draw D from the confounded assignment d = s mod M with
// probability rho (uniform otherwise); the OOD split draws D uniformly,
// independent of S. Classes are balanced to within one sample. Every sample's
// randomness derives from (seed, split, index) alone.
std::vector<SampleRecord> generate_split(const ScmSpec& spec, Split split, int n, uint64_t seed);

Dataset generate_dataset(const ScmSpec& spec, Split split, int n, uint64_t seed,
                         const std::string& name = "");

// Re-renders the sample under do(D = new_domain) with the recorded exogenous
// record; the glyph pixels are bit-identical to the original.
PatchImage regenerate_counterfactual(const ScmSpec& spec, const SampleRecord& sample,
                                     int new_domain);

// Domain-only rendering (no glyph); the baseline the object mask is exact
// against. Exposed for tests.
PatchImage render_background(const ScmSpec& spec, int domain, const Exogenous& u);

// Versioned binary container; little-endian, bit-packed masks.
void save_dataset(const std::string& path, const Dataset& ds);
Dataset load_dataset(const std::string& path);
// Debug exporter: same content as structured text.
void export_dataset_json(const std::string& path, const Dataset& ds);

}  // namespace cfft
