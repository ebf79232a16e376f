#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ppbench/tensor.hpp"

namespace ppb::data {

/// A point annotation for one object part. Invisible parts carry no
/// coordinates (x = y = -1) and never fall inside a box.
struct PartAnnotation {
  int part_id = 0;
  int x = -1;  // column, image pixels
  int y = -1;  // row
  bool visible = false;

  friend bool operator==(const PartAnnotation&, const PartAnnotation&) = default;
};

enum class Split { Train, Test };

const char* split_name(Split split);

struct AnnotatedImage {
  Tensor pixels;  // [3,H,W], values in [0,1]
  int label = 0;
  std::vector<PartAnnotation> parts;  // one entry per part id, ordered by id
  Split split = Split::Train;
  std::string file;  // relative to the manifest
};

struct GeneratorConfig {
  int num_classes = 8;
  int num_parts = 5;
  int train_per_class = 100;
  int test_per_class = 30;
  int image_size = 64;
  std::uint64_t seed = 0;
  double occlusion_prob = 0.1;
};

/// Unknown keys and invalid values throw ConfigError; missing keys keep defaults.
GeneratorConfig generator_config_from_json(const std::string& text);
std::string generator_config_to_json(const GeneratorConfig& config);

/// Attribute alphabet per part: 2 fill variants x 4 hues.
inline constexpr int kAttributesPerPart = 8;

/// Largest class count realisable with `num_parts` parts (codes differ in at
/// least two parts, so the last part's attribute is a checksum of the rest).
std::uint64_t max_classes(int num_parts);

/// Per-class attribute code: codes[k][i] is part i's attribute for class k.
using ClassCodes = std::vector<std::vector<int>>;

struct GeneratedDataset {
  GeneratorConfig config;
  ClassCodes codes;
  std::vector<AnnotatedImage> train;
  std::vector<AnnotatedImage> test;

  [[nodiscard]] const std::vector<AnnotatedImage>& split_images(Split s) const {
    return s == Split::Train ? train : test;
  }
};

/// In-memory generation; a pure function of the config. Pixels are already
/// quantised to 8 bits so they equal what a PNG round-trip yields.
GeneratedDataset generate_images(const GeneratorConfig& config);

/// Writes images and manifest.json under `dir`; returns the manifest path.
std::filesystem::path write_dataset(const GeneratedDataset& dataset, const std::filesystem::path& dir);

std::filesystem::path generate(const GeneratorConfig& config, const std::filesystem::path& dir);

/// Distance in pixels between each visible annotation of split(s)[index] and
/// the centroid of its rendered glyph mask, recomputed from the generator
/// geometry. Entries for invisible parts are 0.
std::vector<double> annotation_centroid_offsets(const GeneratedDataset& dataset, Split s, std::size_t index);

class Dataset {
 public:
  /// Loads and validates a manifest; throws DataError on any mismatch.
  static Dataset load(const std::filesystem::path& manifest);
  static Dataset from_generated(GeneratedDataset generated);

  [[nodiscard]] int num_classes() const { return config_.num_classes; }
  [[nodiscard]] int num_parts() const { return config_.num_parts; }
  [[nodiscard]] int image_size() const { return config_.image_size; }
  [[nodiscard]] const GeneratorConfig& config() const { return config_; }
  [[nodiscard]] const ClassCodes& codes() const { return codes_; }

  [[nodiscard]] const std::vector<AnnotatedImage>& split(Split s) const { return s == Split::Train ? train_ : test_; }
  [[nodiscard]] const std::vector<AnnotatedImage>& train() const { return train_; }
  [[nodiscard]] const std::vector<AnnotatedImage>& test() const { return test_; }

  /// Indices into split(s) of the images labelled `k` (I_k for the test split).
  /// Empty for a class without images.
  [[nodiscard]] std::vector<std::size_t> class_indices(Split s, int k) const;

  /// Seeded permutation of the split's indices.
  [[nodiscard]] std::vector<std::size_t> shuffled(Split s, std::uint64_t seed) const;

 private:
  GeneratorConfig config_;
  ClassCodes codes_;
  std::vector<AnnotatedImage> train_, test_;
};

}  // namespace ppb::data
