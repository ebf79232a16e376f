#include "ppbench/synthdata.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numbers>
#include <set>

#include "json.hpp"
#include "png_io.hpp"
#include "ppbench/errors.hpp"
#include "ppbench/rng.hpp"

namespace ppb::data {

namespace {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

constexpr int kManifestVersion = 1;
constexpr int kHues = 4;

constexpr std::array<std::array<double, 3>, kHues> kPalette{{
    {0.90, 0.15, 0.15},  // red
    {0.15, 0.78, 0.22},  // green
    {0.20, 0.35, 0.95},  // blue
    {0.95, 0.85, 0.10},  // yellow
}};

enum GlyphType { kCircle = 0, kSquare, kTriangle, kBar, kDiamond, kGlyphTypes };

struct Glyph {
  int part_id = 0;
  int type = kCircle;
  bool hollow = false;
  std::array<double, 3> color{};
  double cx = 0, cy = 0;  // continuous image coords; pixel (r, c) covers [c, c+1) x [r, r+1)
  double radius = 0;
  double angle = 0;
  double thickness = 0;
  bool visible = true;
};

struct Scene {
  double body_x = 0, body_y = 0, body_rx = 0, body_ry = 0, body_angle = 0;
  std::vector<Glyph> glyphs;
};

void validate(const GeneratorConfig& c) {
  if (c.num_classes < 2) throw ConfigError("generator: need at least 2 classes");
  if (c.num_parts < 2) throw ConfigError("generator: need at least 2 parts");
  if (c.image_size < 32) throw ConfigError("generator: image_size must be >= 32");
  if (c.train_per_class < 0 || c.test_per_class < 0) throw ConfigError("generator: negative image count");
  if (!(c.occlusion_prob >= 0.0 && c.occlusion_prob < 1.0)) throw ConfigError("generator: occlusion_prob in [0,1)");
  const auto cap = max_classes(c.num_parts);
  if (static_cast<std::uint64_t>(c.num_classes) > cap) {
    throw ConfigError("generator: " + std::to_string(c.num_classes) + " classes requested but at most " +
                      std::to_string(cap) + " are realisable with " + std::to_string(c.num_parts) + " parts");
  }
}

ClassCodes make_codes(const GeneratorConfig& c) {
  // Free digits for parts 0..C-2, last part is their sum mod A: any two codes
  // differ in at least two parts.
  const std::uint64_t space = max_classes(c.num_parts);
  Rng rng = Rng(c.seed).split(1);
  std::set<std::uint64_t> chosen;
  ClassCodes codes;
  while (codes.size() < static_cast<std::size_t>(c.num_classes)) {
    std::uint64_t idx = rng.below(space);
    if (!chosen.insert(idx).second) continue;
    std::vector<int> code(static_cast<std::size_t>(c.num_parts));
    int total = 0;
    for (int i = 0; i + 1 < c.num_parts; ++i) {
      code[static_cast<std::size_t>(i)] = static_cast<int>(idx % kAttributesPerPart);
      idx /= kAttributesPerPart;
      total += code[static_cast<std::size_t>(i)];
    }
    code.back() = total % kAttributesPerPart;
    codes.push_back(std::move(code));
  }
  return codes;
}

Rng image_rng(const GeneratorConfig& c, Split s, int label, int index) {
  return Rng(c.seed).split(s == Split::Train ? 2 : 3).split(static_cast<std::uint64_t>(label)).split(
      static_cast<std::uint64_t>(index));
}

Scene make_scene(const GeneratorConfig& c, const std::vector<int>& code, Rng& rng) {
  const double s = c.image_size / 64.0;
  const double half = c.image_size / 2.0;
  Scene scene;
  const double scale = rng.uniform(0.9, 1.1);
  const double rotation = rng.uniform(-0.3, 0.3);
  scene.body_x = half + rng.uniform(-3.0, 3.0) * s;
  scene.body_y = half + rng.uniform(-3.0, 3.0) * s;
  scene.body_rx = 11.0 * s * scale;
  scene.body_ry = 8.0 * s * scale;
  scene.body_angle = rotation;
  for (int i = 0; i < c.num_parts; ++i) {
    Glyph g;
    g.part_id = i;
    g.type = i % kGlyphTypes;
    const int attr = code[static_cast<std::size_t>(i)];
    g.hollow = attr / kHues == 1;
    const double shade = rng.uniform(0.9, 1.05);
    for (int ch = 0; ch < 3; ++ch) g.color[static_cast<std::size_t>(ch)] = std::min(1.0, kPalette[attr % kHues][static_cast<std::size_t>(ch)] * shade);
    const double theta = -std::numbers::pi / 2 + 2.0 * std::numbers::pi * i / c.num_parts + rotation +
                         rng.uniform(-0.1, 0.1);
    const double ring = (17.0 * scale + rng.uniform(-1.0, 1.0)) * s;
    g.cx = scene.body_x + ring * std::cos(theta);
    g.cy = scene.body_y + ring * std::sin(theta);
    g.radius = 5.5 * s * scale;
    g.angle = theta;
    g.thickness = std::max(2.0, 0.35 * g.radius);
    g.visible = !rng.bernoulli(c.occlusion_prob);
    scene.glyphs.push_back(g);
  }
  return scene;
}

bool inside_shape(int type, double u, double w, double r) {
  if (r <= 0) return false;
  switch (type) {
    case kCircle:
      return u * u + w * w <= r * r;
    case kSquare:
      return std::fabs(u) <= 0.85 * r && std::fabs(w) <= 0.85 * r;
    case kTriangle: {
      // Equilateral, circumradius r, centred on its centroid; inradius r/2.
      constexpr double k = std::numbers::sqrt3 / 2.0;
      return w <= r / 2 && (-k * u - 0.5 * w) <= r / 2 && (k * u - 0.5 * w) <= r / 2;
    }
    case kBar:
      return std::fabs(u) <= r && std::fabs(w) <= 0.5 * r;
    default:
      return std::fabs(u) + std::fabs(w) <= 1.1 * r;
  }
}

bool glyph_covers(const Glyph& g, double px, double py) {
  const double dx = px - g.cx, dy = py - g.cy;
  const double cs = std::cos(g.angle), sn = std::sin(g.angle);
  const double u = dx * cs + dy * sn;
  const double w = -dx * sn + dy * cs;
  if (!inside_shape(g.type, u, w, g.radius)) return false;
  return !g.hollow || !inside_shape(g.type, u, w, g.radius - g.thickness);
}

std::uint8_t quantise(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

RgbImage render(const GeneratorConfig& c, const Scene& scene, Rng& rng) {
  const int S = c.image_size;
  // Value-noise background: coarse random grid, bilinearly interpolated.
  const int cell = 8;
  const int grid = S / cell + 2;
  std::vector<double> coarse(static_cast<std::size_t>(grid * grid));
  for (auto& v : coarse) v = rng.uniform(0.25, 0.6);
  std::array<double, 3> tint{};
  for (auto& t : tint) t = rng.uniform(-0.05, 0.05);

  RgbImage img;
  img.width = img.height = static_cast<std::uint32_t>(S);
  img.rgb.resize(static_cast<std::size_t>(S * S * 3));
  const double bc = std::cos(scene.body_angle), bs = std::sin(scene.body_angle);
  for (int r = 0; r < S; ++r) {
    for (int col = 0; col < S; ++col) {
      const double px = col + 0.5, py = r + 0.5;
      const double gx = px / cell, gy = py / cell;
      const int x0 = static_cast<int>(gx), y0 = static_cast<int>(gy);
      const double tx = gx - x0, ty = gy - y0;
      auto at = [&](int yy, int xx) { return coarse[static_cast<std::size_t>(yy * grid + xx)]; };
      const double base = (1 - ty) * ((1 - tx) * at(y0, x0) + tx * at(y0, x0 + 1)) +
                          ty * ((1 - tx) * at(y0 + 1, x0) + tx * at(y0 + 1, x0 + 1));
      const double grain = rng.uniform(-0.06, 0.06);
      std::array<double, 3> rgb{};
      for (std::size_t ch = 0; ch < 3; ++ch) rgb[ch] = base + tint[ch] + grain;

      const double dx = px - scene.body_x, dy = py - scene.body_y;
      const double u = (dx * bc + dy * bs) / scene.body_rx, w = (-dx * bs + dy * bc) / scene.body_ry;
      if (u * u + w * w <= 1.0) rgb = {0.55 + grain * 0.5, 0.48 + grain * 0.5, 0.40 + grain * 0.5};

      for (const auto& g : scene.glyphs) {
        if (g.visible && glyph_covers(g, px, py)) {
          const double jitter = rng.uniform(-0.03, 0.03);
          for (std::size_t ch = 0; ch < 3; ++ch) rgb[ch] = g.color[ch] + jitter;
        }
      }
      for (std::size_t ch = 0; ch < 3; ++ch) img.rgb[static_cast<std::size_t>((r * S + col) * 3) + ch] = quantise(rgb[ch]);
    }
  }
  return img;
}

Tensor to_tensor(const RgbImage& img) {
  const std::size_t H = img.height, W = img.width;
  std::vector<double> v(3 * H * W);
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c)
      for (std::size_t ch = 0; ch < 3; ++ch) v[(ch * H + r) * W + c] = img.rgb[(r * W + c) * 3 + ch] / 255.0;
  return Tensor::from({3, H, W}, std::move(v));
}

RgbImage to_rgb(const Tensor& t) {
  const std::size_t H = t.dim(1), W = t.dim(2);
  RgbImage img;
  img.width = static_cast<std::uint32_t>(W);
  img.height = static_cast<std::uint32_t>(H);
  img.rgb.resize(3 * H * W);
  const auto d = t.data();
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c)
      for (std::size_t ch = 0; ch < 3; ++ch) img.rgb[(r * W + c) * 3 + ch] = quantise(d[(ch * H + r) * W + c]);
  return img;
}

std::vector<PartAnnotation> annotations(const GeneratorConfig& c, const Scene& scene) {
  std::vector<PartAnnotation> parts;
  for (const auto& g : scene.glyphs) {
    PartAnnotation a;
    a.part_id = g.part_id;
    a.visible = g.visible;
    if (g.visible) {
      a.x = std::clamp(static_cast<int>(std::floor(g.cx)), 0, c.image_size - 1);
      a.y = std::clamp(static_cast<int>(std::floor(g.cy)), 0, c.image_size - 1);
    }
    parts.push_back(a);
  }
  return parts;
}

std::string file_name(Split s, int label, int index) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s/c%03d_%05d.png", split_name(s), label, index);
  return buf;
}

std::string checksum_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open " + p.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::istreambuf_iterator<char> it(in), end; it != end; ++it) {
    h ^= static_cast<unsigned char>(*it);
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

template <typename T>
T field(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw DataError(where + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw DataError(where + ": field '" + key + "': " + e.what());
  }
}

}  // namespace

const char* split_name(Split split) { return split == Split::Train ? "train" : "test"; }

std::uint64_t max_classes(int num_parts) {
  std::uint64_t cap = 1;
  for (int i = 0; i + 1 < num_parts; ++i) {
    if (cap > (std::uint64_t{1} << 40)) break;
    cap *= kAttributesPerPart;
  }
  return cap;
}

GeneratedDataset generate_images(const GeneratorConfig& config) {
  validate(config);
  GeneratedDataset out;
  out.config = config;
  out.codes = make_codes(config);
  for (Split s : {Split::Train, Split::Test}) {
    auto& items = s == Split::Train ? out.train : out.test;
    const int per_class = s == Split::Train ? config.train_per_class : config.test_per_class;
    for (int k = 0; k < config.num_classes; ++k) {
      for (int i = 0; i < per_class; ++i) {
        Rng rng = image_rng(config, s, k, i);
        const Scene scene = make_scene(config, out.codes[static_cast<std::size_t>(k)], rng);
        AnnotatedImage img;
        img.pixels = to_tensor(render(config, scene, rng));
        img.label = k;
        img.parts = annotations(config, scene);
        img.split = s;
        img.file = file_name(s, k, i);
        items.push_back(std::move(img));
      }
    }
  }
  return out;
}

std::vector<double> annotation_centroid_offsets(const GeneratedDataset& dataset, Split s, std::size_t index) {
  const auto& c = dataset.config;
  const auto per_class = static_cast<std::size_t>(s == Split::Train ? c.train_per_class : c.test_per_class);
  const int label = static_cast<int>(index / per_class);
  const int i = static_cast<int>(index % per_class);
  Rng rng = image_rng(c, s, label, i);
  const Scene scene = make_scene(c, dataset.codes[static_cast<std::size_t>(label)], rng);
  const auto& parts = dataset.split_images(s)[index].parts;
  std::vector<double> offsets(parts.size(), 0.0);
  for (const auto& g : scene.glyphs) {
    if (!g.visible) continue;
    double sx = 0, sy = 0, n = 0;
    for (int r = 0; r < c.image_size; ++r)
      for (int col = 0; col < c.image_size; ++col)
        if (glyph_covers(g, col + 0.5, r + 0.5)) {
          sx += col;
          sy += r;
          n += 1;
        }
    const auto& a = parts[static_cast<std::size_t>(g.part_id)];
    offsets[static_cast<std::size_t>(g.part_id)] = n > 0 ? std::hypot(sx / n - a.x, sy / n - a.y) : 1e9;
  }
  return offsets;
}

GeneratorConfig generator_config_from_json(const std::string& text) {
  GeneratorConfig c;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("generator config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("generator config must be a JSON object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "num_classes") c.num_classes = value.get<int>();
      else if (key == "num_parts") c.num_parts = value.get<int>();
      else if (key == "train_per_class") c.train_per_class = value.get<int>();
      else if (key == "test_per_class") c.test_per_class = value.get<int>();
      else if (key == "image_size") c.image_size = value.get<int>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "occlusion_prob") c.occlusion_prob = value.get<double>();
      else throw ConfigError("unknown generator config key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid generator config: ") + e.what());
  }
  validate(c);
  return c;
}

std::string generator_config_to_json(const GeneratorConfig& c) {
  json j;
  j["num_classes"] = c.num_classes;
  j["num_parts"] = c.num_parts;
  j["train_per_class"] = c.train_per_class;
  j["test_per_class"] = c.test_per_class;
  j["image_size"] = c.image_size;
  j["seed"] = c.seed;
  j["occlusion_prob"] = c.occlusion_prob;
  return j.dump();
}

fs::path write_dataset(const GeneratedDataset& dataset, const fs::path& dir) {
  const auto& c = dataset.config;
  fs::create_directories(dir / "train");
  fs::create_directories(dir / "test");
  json manifest;
  manifest["version"] = kManifestVersion;
  manifest["tool_version"] = PPBENCH_VERSION;
  manifest["K"] = c.num_classes;
  manifest["C"] = c.num_parts;
  manifest["image_size"] = c.image_size;
  manifest["seed"] = c.seed;
  manifest["generator"] = {{"train_per_class", c.train_per_class},
                           {"test_per_class", c.test_per_class},
                           {"occlusion_prob", c.occlusion_prob}};
  manifest["class_codes"] = dataset.codes;
  json splits = json::array();
  for (Split s : {Split::Train, Split::Test}) {
    json items = json::array();
    for (const auto& img : s == Split::Train ? dataset.train : dataset.test) {
      write_png(dir / img.file, to_rgb(img.pixels));
      json parts = json::array();
      for (const auto& p : img.parts) {
        json jp{{"id", p.part_id}};
        jp["x"] = p.visible ? json(p.x) : json(nullptr);
        jp["y"] = p.visible ? json(p.y) : json(nullptr);
        jp["visible"] = p.visible;
        parts.push_back(std::move(jp));
      }
      items.push_back({{"file", img.file}, {"label", img.label}, {"checksum", checksum_file(dir / img.file)},
                       {"parts", std::move(parts)}});
    }
    splits.push_back({{"name", split_name(s)}, {"items", std::move(items)}});
  }
  manifest["splits"] = std::move(splits);
  const fs::path path = dir / "manifest.json";
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << manifest.dump(1) << '\n';
  return path;
}

fs::path generate(const GeneratorConfig& config, const fs::path& dir) {
  return write_dataset(generate_images(config), dir);
}

Dataset Dataset::from_generated(GeneratedDataset generated) {
  Dataset d;
  d.config_ = generated.config;
  d.codes_ = std::move(generated.codes);
  d.train_ = std::move(generated.train);
  d.test_ = std::move(generated.test);
  return d;
}

Dataset Dataset::load(const fs::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw DataError("cannot open manifest " + manifest_path.string());
  json m;
  try {
    m = json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("manifest " + manifest_path.string() + " is not valid JSON: " + e.what());
  }
  const std::string where = manifest_path.string();
  if (field<int>(m, "version", where) != kManifestVersion)
    throw DataError(where + ": unsupported manifest version");
  Dataset d;
  d.config_.num_classes = field<int>(m, "K", where);
  d.config_.num_parts = field<int>(m, "C", where);
  d.config_.image_size = field<int>(m, "image_size", where);
  d.config_.seed = field<std::uint64_t>(m, "seed", where);
  if (m.contains("generator")) {
    const auto& g = m["generator"];
    d.config_.train_per_class = field<int>(g, "train_per_class", where);
    d.config_.test_per_class = field<int>(g, "test_per_class", where);
    d.config_.occlusion_prob = field<double>(g, "occlusion_prob", where);
  }
  if (m.contains("class_codes")) d.codes_ = m["class_codes"].get<ClassCodes>();
  if (d.config_.num_classes < 1 || d.config_.num_parts < 1 || d.config_.image_size < 1)
    throw DataError(where + ": K, C and image_size must be positive");

  const fs::path root = manifest_path.parent_path();
  const auto S = static_cast<std::uint32_t>(d.config_.image_size);
  for (const auto& split : field<json>(m, "splits", where)) {
    const auto name = field<std::string>(split, "name", where);
    Split s;
    if (name == "train")
      s = Split::Train;
    else if (name == "test")
      s = Split::Test;
    else
      throw DataError(where + ": unknown split '" + name + "'");
    auto& items = s == Split::Train ? d.train_ : d.test_;
    for (const auto& item : field<json>(split, "items", where)) {
      AnnotatedImage img;
      img.split = s;
      img.file = field<std::string>(item, "file", where);
      const std::string iw = where + ": " + img.file;
      img.label = field<int>(item, "label", iw);
      if (img.label < 0 || img.label >= d.config_.num_classes) throw DataError(iw + ": label out of range");
      const fs::path file = root / img.file;
      if (!fs::exists(file)) throw DataError(iw + ": image file missing");
      if (item.contains("checksum") && checksum_file(file) != item["checksum"].get<std::string>())
        throw DataError(iw + ": checksum mismatch");
      const RgbImage rgb = read_png(file);
      if (rgb.width != S || rgb.height != S)
        throw DataError(iw + ": decoded " + std::to_string(rgb.width) + "x" + std::to_string(rgb.height) +
                        ", manifest declares " + std::to_string(S) + "x" + std::to_string(S));
      img.pixels = to_tensor(rgb);
      std::vector<bool> seen(static_cast<std::size_t>(d.config_.num_parts), false);
      for (const auto& p : field<json>(item, "parts", iw)) {
        PartAnnotation a;
        a.part_id = field<int>(p, "id", iw);
        a.visible = field<bool>(p, "visible", iw);
        if (a.part_id < 0 || a.part_id >= d.config_.num_parts) throw DataError(iw + ": part id out of range");
        if (seen[static_cast<std::size_t>(a.part_id)]) throw DataError(iw + ": duplicate part id");
        seen[static_cast<std::size_t>(a.part_id)] = true;
        if (a.visible) {
          a.x = field<int>(p, "x", iw);
          a.y = field<int>(p, "y", iw);
          if (a.x < 0 || a.y < 0 || a.x >= d.config_.image_size || a.y >= d.config_.image_size)
            throw DataError(iw + ": part annotation outside the image");
        }
        img.parts.push_back(a);
      }
      std::sort(img.parts.begin(), img.parts.end(),
                [](const PartAnnotation& a, const PartAnnotation& b) { return a.part_id < b.part_id; });
      items.push_back(std::move(img));
    }
  }
  return d;
}

std::vector<std::size_t> Dataset::class_indices(Split s, int k) const {
  std::vector<std::size_t> idx;
  const auto& items = split(s);
  for (std::size_t i = 0; i < items.size(); ++i)
    if (items[i].label == k) idx.push_back(i);
  return idx;
}

std::vector<std::size_t> Dataset::shuffled(Split s, std::uint64_t seed) const {
  std::vector<std::size_t> idx(split(s).size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(idx));
  return idx;
}

}  // namespace ppb::data
