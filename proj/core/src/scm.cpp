#include "cfft/scm.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>

#include "cfft/rng.hpp"

namespace cfft {

namespace {

// Intensity bands. Background stays at or below kBgMax, glyph pixels at or
// above kObjMin, so a glyph write always changes the pixel and the recorded
// object mask is exact.
constexpr float kBgMax = 0.60f;
constexpr float kObjMin = 0.70f;
constexpr int kTextureFamilies = 8;
constexpr int kGlyphShapes = 8;

float clampf(float v, float lo, float hi) { return v < lo ? lo : (v > hi ? hi : v); }

// Triangle wave with period 1, range [0,1]. Uses only exactly-rounded float
// ops so datasets are bit-identical across platforms.
float tri(float v) {
  float f = v - std::floor(v);
  return 2.0f * std::fabs(f - 0.5f);
}

struct Rgb {
  float r, g, b;
};

Rgb hue_rgb(float h) {
  h = h - std::floor(h);
  float x = h * 6.0f;
  int k = static_cast<int>(x);
  float f = x - static_cast<float>(k);
  switch (k % 6) {
    case 0: return {1.0f, f, 0.0f};
    case 1: return {1.0f - f, 1.0f, 0.0f};
    case 2: return {0.0f, 1.0f, f};
    case 3: return {0.0f, 1.0f - f, 1.0f};
    case 4: return {f, 0.0f, 1.0f};
    default: return {1.0f, 0.0f, 1.0f - f};
  }
}

Rgb scale_rgb(Rgb c, float lo, float hi) {
  return {lo + (hi - lo) * c.r, lo + (hi - lo) * c.g, lo + (hi - lo) * c.b};
}

// Each domain owns a hue pair; palettes stay inside the background band.
void domain_palette(int domain, int domains, Rgb* a, Rgb* b) {
  float h = static_cast<float>(domain) / static_cast<float>(domains);
  *a = scale_rgb(hue_rgb(h), 0.10f, 0.54f);
  *b = scale_rgb(hue_rgb(h + 0.382f), 0.06f, 0.34f);
}

float pattern_value(int family, float x, float y, float lambda, int side) {
  switch (family % kTextureFamilies) {
    case 0: return tri(y / lambda);
    case 1: return tri(x / lambda);
    case 2: return tri((x + y) / lambda);
    case 3: {
      int k = static_cast<int>(std::floor(x / lambda)) + static_cast<int>(std::floor(y / lambda));
      return (k & 1) ? 1.0f : 0.0f;
    }
    case 4: {
      float dx = x - 0.5f * static_cast<float>(side);
      float dy = y - 0.5f * static_cast<float>(side);
      return tri(std::sqrt(dx * dx + dy * dy) / lambda);
    }
    case 5: {
      float ux = x - lambda * std::floor(x / lambda) - 0.5f * lambda;
      float uy = y - lambda * std::floor(y / lambda) - 0.5f * lambda;
      return (ux * ux + uy * uy <= 0.16f * lambda * lambda) ? 1.0f : 0.0f;
    }
    case 6: {
      float v = (x + 2.0f * y) / (3.0f * static_cast<float>(side));
      return v - std::floor(v);
    }
    default: {
      float dx = std::fabs(x - 0.5f * static_cast<float>(side));
      float dy = std::fabs(y - 0.5f * static_cast<float>(side));
      return tri((dx + dy) / lambda);
    }
  }
}

// Glyph stencil on a G x G box. Class picks the shape; classes beyond the
// shape count repeat the shapes with a dashed stroke. The shape order
// interleaves confusable pairs (disk/ring, plus/saltire) so small-K
// benchmarks stay non-trivial.
bool glyph_stencil(int label, int gx, int gy, int G, float stroke_phase) {
  int shape = label % kGlyphShapes;
  bool dashed = (label / kGlyphShapes) % 2 == 1;
  int th = G > 10 ? 2 : 1;
  float c = 0.5f * static_cast<float>(G - 1);
  float fx = static_cast<float>(gx), fy = static_cast<float>(gy);
  float fr = 0.5f * static_cast<float>(G);
  bool on = false;
  switch (shape) {
    case 0: {  // disk
      float dd = (fx - c) * (fx - c) + (fy - c) * (fy - c);
      on = dd <= (fr - 0.5f) * (fr - 0.5f);
      break;
    }
    case 1: {  // ring: keep a visible hole even at the smallest glyph sizes
      float dd = (fx - c) * (fx - c) + (fy - c) * (fy - c);
      float ro = fr - 0.5f;
      float ri = std::max(0.85f, ro - 1.5f * static_cast<float>(th) - 0.5f);
      on = dd <= ro * ro && dd >= ri * ri;
      break;
    }
    case 2: {  // plus
      on = std::fabs(fx - c) < static_cast<float>(th) || std::fabs(fy - c) < static_cast<float>(th);
      break;
    }
    case 3: {  // saltire
      on = std::abs(gx - gy) <= th || std::abs(gx + gy - (G - 1)) <= th;
      break;
    }
    case 4: {  // square frame
      int m = std::min(std::min(gx, gy), std::min(G - 1 - gx, G - 1 - gy));
      on = m < th;
      break;
    }
    case 5: {  // filled diamond
      on = std::fabs(fx - c) + std::fabs(fy - c) <= fr - 0.5f;
      break;
    }
    case 6: {  // double horizontal bars
      int b1 = static_cast<int>(0.22f * static_cast<float>(G));
      int b2 = static_cast<int>(0.66f * static_cast<float>(G));
      on = (gy >= b1 && gy < b1 + th) || (gy >= b2 && gy < b2 + th);
      break;
    }
    default: {  // filled triangle, point up
      on = 2.0f * std::fabs(fx - c) <= fy + 0.5f;
      break;
    }
  }
  if (on && dashed) {
    int phase = static_cast<int>(stroke_phase);
    if ((gx + 2 * gy + phase) % 4 == 0) on = false;
  }
  return on;
}

float noise_at(uint64_t seed, int c, int y, int x, int side, float amp) {
  uint64_t idx = static_cast<uint64_t>((c * side + y) * side + x);
  return amp * (2.0f * hash_noise(seed, idx) - 1.0f);
}

struct Rendered {
  PatchImage image;
  std::vector<uint8_t> mask;
};

Rendered render_sample(const ScmSpec& spec, int label, int domain, const Exogenous& u) {
  Rendered out;
  out.image = render_background(spec, domain, u);
  out.mask.assign(static_cast<size_t>(spec.image_side * spec.image_side), 0);
  const int side = spec.image_side;
  const int G = u.object_size;
  for (int gy = 0; gy < G; ++gy) {
    for (int gx = 0; gx < G; ++gx) {
      if (!glyph_stencil(label, gx, gy, G, u.stroke_phase)) continue;
      int x = u.object_x + gx;
      int y = u.object_y + gy;
      out.mask[static_cast<size_t>(y * side + x)] = 1;
      for (int c = 0; c < ScmSpec::kChannels; ++c) {
        float v = u.object_color[c] + noise_at(u.noise_seed, c, y, x, side, spec.noise_amp);
        out.image.at(c, y, x) = clampf(v, kObjMin, 1.0f);
      }
    }
  }
  return out;
}

Exogenous sample_exogenous(const ScmSpec& spec, Pcg32& rng) {
  Exogenous u;
  float base = 0.55f * static_cast<float>(spec.image_side);
  float scale = static_cast<float>(rng.uniform(0.72, 1.0));
  u.object_size = std::max(5, static_cast<int>(base * scale + 0.5f));
  u.object_size = std::min(u.object_size, spec.image_side - 2);
  u.object_x = static_cast<int32_t>(rng.uniform_u32(static_cast<uint32_t>(spec.image_side - u.object_size + 1)));
  u.object_y = static_cast<int32_t>(rng.uniform_u32(static_cast<uint32_t>(spec.image_side - u.object_size + 1)));
  u.stroke_phase = static_cast<float>(rng.uniform(0.0, 8.0));
  for (int c = 0; c < 3; ++c) u.object_color[c] = static_cast<float>(rng.uniform(0.76, 0.95));
  u.bg_phase_x = static_cast<float>(rng.uniform(0.0, 16.0));
  u.bg_phase_y = static_cast<float>(rng.uniform(0.0, 16.0));
  u.noise_seed = rng.next_u64();
  return u;
}

}  // namespace

void ScmSpec::validate() const {
  if (classes < 2) throw ConfigError("scm: classes must be >= 2");
  if (domains < 2) throw ConfigError("scm: domains must be >= 2");
  if (!(correlation >= 0.0 && correlation <= 1.0))
    throw ConfigError("scm: correlation must be in [0,1]");
  if (image_side <= 0 || patch_side <= 0 || image_side % patch_side != 0)
    throw ConfigError("scm: image side must be a positive multiple of patch side");
  if (image_side < 12) throw ConfigError("scm: image side must be >= 12");
  if (!(noise_amp >= 0.0f && noise_amp <= 0.08f))
    throw ConfigError("scm: noise amplitude must be in [0, 0.08]");
}

PatchImage::PatchImage(int side_, int patch_side_)
    : side(side_), patch_side(patch_side_),
      pixels(static_cast<size_t>(kChannels * side_ * side_), 0.0f) {}

PatchImage::PatchImage(int side_, int patch_side_, std::vector<float> px)
    : side(side_), patch_side(patch_side_), pixels(std::move(px)) {
  if (pixels.size() != static_cast<size_t>(kChannels * side * side))
    throw std::invalid_argument("patch image: pixel buffer size mismatch");
  if (side % patch_side != 0)
    throw std::invalid_argument("patch image: side not divisible by patch side");
}

std::vector<float> PatchImage::patch(int index) const {
  const int g = grid();
  const int py = (index / g) * patch_side;
  const int px = (index % g) * patch_side;
  std::vector<float> out(static_cast<size_t>(patch_dim()));
  size_t k = 0;
  for (int c = 0; c < kChannels; ++c)
    for (int y = 0; y < patch_side; ++y)
      for (int x = 0; x < patch_side; ++x) out[k++] = at(c, py + y, px + x);
  return out;
}

void PatchImage::set_patch(int index, const std::vector<float>& values) {
  if (values.size() != static_cast<size_t>(patch_dim()))
    throw std::invalid_argument("patch image: patch value size mismatch");
  const int g = grid();
  const int py = (index / g) * patch_side;
  const int px = (index % g) * patch_side;
  size_t k = 0;
  for (int c = 0; c < kChannels; ++c)
    for (int y = 0; y < patch_side; ++y)
      for (int x = 0; x < patch_side; ++x) at(c, py + y, px + x) = values[k++];
}

void PatchImage::zero_patch(int index) {
  set_patch(index, std::vector<float>(static_cast<size_t>(patch_dim()), 0.0f));
}

Tensor<float> PatchImage::as_matrix() const {
  Tensor<float> m(Shape{patch_count(), patch_dim()});
  for (int p = 0; p < patch_count(); ++p) {
    std::vector<float> v = patch(p);
    std::copy(v.begin(), v.end(), m.data.begin() + static_cast<int64_t>(p) * patch_dim());
  }
  return m;
}

const char* split_name(Split s) {
  switch (s) {
    case Split::kIdTrain: return "id-train";
    case Split::kIdVal: return "id-val";
    case Split::kIdTest: return "id-test";
    case Split::kOodTest: return "ood-test";
  }
  return "?";
}

PatchImage render_background(const ScmSpec& spec, int domain, const Exogenous& u) {
  const int side = spec.image_side;
  PatchImage img(side, spec.patch_side);
  Rgb a, b;
  domain_palette(domain, spec.domains, &a, &b);
  const float pal[2][3] = {{a.r, a.g, a.b}, {b.r, b.g, b.b}};
  const int family = domain % kTextureFamilies;
  const float lambda = std::max(3.0f, static_cast<float>(side) / 5.0f);
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      float f = pattern_value(family, static_cast<float>(x) + u.bg_phase_x,
                              static_cast<float>(y) + u.bg_phase_y, lambda, side);
      for (int c = 0; c < ScmSpec::kChannels; ++c) {
        float v = pal[0][c] * f + pal[1][c] * (1.0f - f);
        v += noise_at(u.noise_seed, c, y, x, side, spec.noise_amp);
        img.at(c, y, x) = clampf(v, 0.0f, kBgMax);
      }
    }
  }
  return img;
}

std::vector<SampleRecord> generate_split(const ScmSpec& spec, Split split, int n, uint64_t seed) {
  spec.validate();
  if (n <= 0) throw ConfigError("generate_split: n must be > 0");
  std::vector<SampleRecord> out(static_cast<size_t>(n));
  const char* tag = split_name(split);
  for (int i = 0; i < n; ++i) {
    Pcg32 rng = rng_stream(seed, tag, static_cast<uint64_t>(i));
    SampleRecord& rec = out[static_cast<size_t>(i)];
    rec.label = i % spec.classes;
    if (split == Split::kOodTest) {
      rec.domain = static_cast<int>(rng.uniform_u32(static_cast<uint32_t>(spec.domains)));
    } else {
      // Backdoor path: with probability rho the confounder aligns D with S.
      if (rng.uniform() < spec.correlation)
        rec.domain = rec.label % spec.domains;
      else
        rec.domain = static_cast<int>(rng.uniform_u32(static_cast<uint32_t>(spec.domains)));
    }
    rec.u = sample_exogenous(spec, rng);
    Rendered r = render_sample(spec, rec.label, rec.domain, rec.u);
    rec.image = std::move(r.image);
    rec.object_mask = std::move(r.mask);
  }
  return out;
}

Dataset generate_dataset(const ScmSpec& spec, Split split, int n, uint64_t seed,
                         const std::string& name) {
  Dataset ds;
  ds.spec = spec;
  ds.name = name.empty() ? split_name(split) : name;
  ds.samples = generate_split(spec, split, n, seed);
  return ds;
}

PatchImage regenerate_counterfactual(const ScmSpec& spec, const SampleRecord& sample,
                                     int new_domain) {
  if (new_domain < 0 || new_domain >= spec.domains)
    throw std::invalid_argument("regenerate_counterfactual: domain out of range");
  if (sample.u.object_size <= 0)
    throw std::invalid_argument("regenerate_counterfactual: sample carries no exogenous record");
  return render_sample(spec, sample.label, new_domain, sample.u).image;
}

// ---------------------------------------------------------------------------
// Binary container

namespace {

constexpr char kMagic[4] = {'C', 'F', 'D', 'S'};
constexpr uint32_t kVersion = 1;

void put_bytes(std::string& buf, const void* p, size_t n) {
  buf.append(static_cast<const char*>(p), n);
}
void put_u32(std::string& buf, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  put_bytes(buf, b, 4);
}
void put_u64(std::string& buf, uint64_t v) {
  put_u32(buf, static_cast<uint32_t>(v));
  put_u32(buf, static_cast<uint32_t>(v >> 32));
}
void put_i32(std::string& buf, int32_t v) { put_u32(buf, static_cast<uint32_t>(v)); }
void put_f32(std::string& buf, float v) {
  uint32_t u;
  std::memcpy(&u, &v, 4);
  put_u32(buf, u);
}
void put_f64(std::string& buf, double v) {
  uint64_t u;
  std::memcpy(&u, &v, 8);
  put_u64(buf, u);
}
void put_str(std::string& buf, const std::string& s) {
  put_u32(buf, static_cast<uint32_t>(s.size()));
  buf.append(s);
}

struct Reader {
  const std::string& buf;
  size_t pos = 0;
  explicit Reader(const std::string& b) : buf(b) {}
  void need(size_t n) const {
    if (pos + n > buf.size()) throw MissingArtifactError("dataset file truncated");
  }
  uint32_t u32() {
    need(4);
    const auto* b = reinterpret_cast<const unsigned char*>(buf.data() + pos);
    pos += 4;
    return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
  }
  uint64_t u64() {
    uint64_t lo = u32();
    return lo | (uint64_t(u32()) << 32);
  }
  int32_t i32() { return static_cast<int32_t>(u32()); }
  float f32() {
    uint32_t u = u32();
    float v;
    std::memcpy(&v, &u, 4);
    return v;
  }
  double f64() {
    uint64_t u = u64();
    double v;
    std::memcpy(&v, &u, 8);
    return v;
  }
  std::string str() {
    uint32_t n = u32();
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

void save_dataset(const std::string& path, const Dataset& ds) {
  std::string buf;
  put_bytes(buf, kMagic, 4);
  put_u32(buf, kVersion);
  put_u32(buf, static_cast<uint32_t>(ds.spec.classes));
  put_u32(buf, static_cast<uint32_t>(ds.spec.domains));
  put_f64(buf, ds.spec.correlation);
  put_u32(buf, static_cast<uint32_t>(ds.spec.image_side));
  put_u32(buf, static_cast<uint32_t>(ds.spec.patch_side));
  put_f32(buf, ds.spec.noise_amp);
  put_str(buf, ds.name);
  put_u64(buf, ds.samples.size());
  const size_t mask_bytes = (static_cast<size_t>(ds.spec.image_side) * ds.spec.image_side + 7) / 8;
  for (const SampleRecord& rec : ds.samples) {
    put_u32(buf, static_cast<uint32_t>(rec.label));
    put_u32(buf, static_cast<uint32_t>(rec.domain));
    put_i32(buf, rec.u.object_x);
    put_i32(buf, rec.u.object_y);
    put_i32(buf, rec.u.object_size);
    put_f32(buf, rec.u.stroke_phase);
    for (float c : rec.u.object_color) put_f32(buf, c);
    put_f32(buf, rec.u.bg_phase_x);
    put_f32(buf, rec.u.bg_phase_y);
    put_u64(buf, rec.u.noise_seed);
    for (float v : rec.image.pixels) put_f32(buf, v);
    std::vector<unsigned char> packed(mask_bytes, 0);
    for (size_t i = 0; i < rec.object_mask.size(); ++i)
      if (rec.object_mask[i]) packed[i / 8] |= static_cast<unsigned char>(1u << (i % 8));
    put_bytes(buf, packed.data(), packed.size());
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw MissingArtifactError("cannot write dataset file: " + path);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw MissingArtifactError("short write to dataset file: " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingArtifactError("dataset file not found: " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r(buf);
  r.need(4);
  if (std::memcmp(buf.data(), kMagic, 4) != 0)
    throw MissingArtifactError("not a dataset file: " + path);
  r.pos = 4;
  uint32_t version = r.u32();
  if (version != kVersion)
    throw MissingArtifactError("dataset file version " + std::to_string(version) +
                               " unsupported: " + path);
  Dataset ds;
  ds.spec.classes = static_cast<int>(r.u32());
  ds.spec.domains = static_cast<int>(r.u32());
  ds.spec.correlation = r.f64();
  ds.spec.image_side = static_cast<int>(r.u32());
  ds.spec.patch_side = static_cast<int>(r.u32());
  ds.spec.noise_amp = r.f32();
  ds.name = r.str();
  uint64_t n = r.u64();
  const int side = ds.spec.image_side;
  const size_t pixel_count = static_cast<size_t>(ScmSpec::kChannels) * side * side;
  const size_t mask_bytes = (static_cast<size_t>(side) * side + 7) / 8;
  ds.samples.resize(n);
  for (uint64_t i = 0; i < n; ++i) {
    SampleRecord& rec = ds.samples[i];
    rec.label = static_cast<int>(r.u32());
    rec.domain = static_cast<int>(r.u32());
    rec.u.object_x = r.i32();
    rec.u.object_y = r.i32();
    rec.u.object_size = r.i32();
    rec.u.stroke_phase = r.f32();
    for (float& c : rec.u.object_color) c = r.f32();
    rec.u.bg_phase_x = r.f32();
    rec.u.bg_phase_y = r.f32();
    rec.u.noise_seed = r.u64();
    std::vector<float> px(pixel_count);
    for (float& v : px) v = r.f32();
    rec.image = PatchImage(side, ds.spec.patch_side, std::move(px));
    r.need(mask_bytes);
    rec.object_mask.assign(static_cast<size_t>(side) * side, 0);
    for (size_t k = 0; k < rec.object_mask.size(); ++k) {
      unsigned char byte = static_cast<unsigned char>(buf[r.pos + k / 8]);
      rec.object_mask[k] = (byte >> (k % 8)) & 1u;
    }
    r.pos += mask_bytes;
  }
  return ds;
}

void export_dataset_json(const std::string& path, const Dataset& ds) {
  nlohmann::json j;
  j["spec"] = {{"classes", ds.spec.classes},       {"domains", ds.spec.domains},
               {"correlation", ds.spec.correlation}, {"image_side", ds.spec.image_side},
               {"patch_side", ds.spec.patch_side},  {"noise_amp", ds.spec.noise_amp}};
  j["name"] = ds.name;
  j["n"] = ds.samples.size();
  nlohmann::json samples = nlohmann::json::array();
  for (const SampleRecord& rec : ds.samples) {
    nlohmann::json s;
    s["label"] = rec.label;
    s["domain"] = rec.domain;
    s["u"] = {{"object_x", rec.u.object_x},     {"object_y", rec.u.object_y},
              {"object_size", rec.u.object_size}, {"stroke_phase", rec.u.stroke_phase},
              {"object_color", {rec.u.object_color[0], rec.u.object_color[1], rec.u.object_color[2]}},
              {"bg_phase_x", rec.u.bg_phase_x}, {"bg_phase_y", rec.u.bg_phase_y},
              {"noise_seed", rec.u.noise_seed}};
    s["pixels"] = rec.image.pixels;
    std::string mask(rec.object_mask.size(), '0');
    for (size_t i = 0; i < rec.object_mask.size(); ++i)
      if (rec.object_mask[i]) mask[i] = '1';
    s["object_mask"] = mask;
    samples.push_back(std::move(s));
  }
  j["samples"] = std::move(samples);
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw MissingArtifactError("cannot write json export: " + path);
  f << j.dump();
}

}  // namespace cfft
