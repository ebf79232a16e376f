#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ppbench/model.hpp"
#include "ppbench/synthdata.hpp"
#include "ppbench/tensor.hpp"

namespace ppb::metrics {

struct BoxSize {
  int height = 21;
  int width = 21;

  /// round(ratio * side) for a square image; at least 1 pixel.
  static BoxSize from_ratio(double ratio, int image_side);
};

/// Clipped half-open pixel extent [top,bottom) x [left,right) around a center.
struct BoundingBox {
  int center_row = 0, center_col = 0;
  int top = 0, left = 0, bottom = 0, right = 0;

  static BoundingBox around(int row, int col, BoxSize size, int image_h, int image_w);
  [[nodiscard]] bool contains(int x, int y) const { return y >= top && y < bottom && x >= left && x < right; }
};

using PartVector = std::vector<std::uint8_t>;

/// Upsamples one activation map [H_d,W_d] to the image size and returns the
/// box centered on its argmax (lowest row-major index on ties).
BoundingBox locate_box(const Tensor& map, int image_h, int image_w, BoxSize size);
/// o_i = 1 iff part i is visible and its point lies inside the box.
PartVector part_vector(const BoundingBox& box, const data::AnnotatedImage& image);
PartVector corresponding_part(const Tensor& map, const data::AnnotatedImage& image, BoxSize size);

enum class NoiseKind { None, Gaussian, PGD };
const char* noise_name(NoiseKind kind);
NoiseKind parse_noise(const std::string& name);

struct NoiseSpec {
  NoiseKind kind = NoiseKind::Gaussian;
  double sigma = 0.2;
  double eps = 0.1;
  double alpha = 0.025;
  int steps = 10;
  std::uint64_t seed = 0;

  static NoiseSpec gaussian(double sigma, std::uint64_t seed = 0);
  /// alpha defaults to eps/4 when not given.
  static NoiseSpec pgd(double eps, std::optional<double> alpha = {}, int steps = 10, std::uint64_t seed = 0);
  void validate() const;
};

/// x + xi with xi ~ N(0, sigma^2) per entry; no clamping.
Tensor gaussian_perturb(const Tensor& input, double sigma, std::uint64_t seed);

/// Sign-gradient ascent on sum_{j: c(j)=label} ||v_j(x+xi) - v_j(x)||^2,
/// projected onto the L-inf ball of radius eps, xi initialised uniform in
/// [-eps, eps]. Throws NumericError naming the step on a non-finite gradient.
Tensor pgd_perturb(const model::ActivationModel& model, const data::AnnotatedImage& image, const Tensor& input,
                   double eps, double alpha, int steps, std::uint64_t seed);
/// The attack objective for a given perturbed input.
double pgd_objective(const model::ActivationModel& model, const data::AnnotatedImage& image, const Tensor& clean,
                     const Tensor& perturbed);

struct EvalSettings {
  double mu = 0.8;
  BoxSize box;
  int threads = 1;
};

struct ConsistencyResult {
  std::vector<std::vector<double>> a;  // per prototype, length C (empty if undefined)
  std::vector<std::uint8_t> consistent;
  std::vector<std::uint8_t> defined;  // false for prototypes of classes without test images
  int undefined_count = 0;
  double score = 0.0;  // mean of flags over defined prototypes
};

struct StabilityResult {
  NoiseSpec noise;
  std::vector<double> match_rate;  // per prototype (0 when undefined)
  std::vector<std::uint8_t> defined;
  int undefined_count = 0;
  double score = 0.0;
};

ConsistencyResult consistency_score(const model::ActivationModel& model, const std::vector<data::AnnotatedImage>& test,
                                    int num_parts, const EvalSettings& settings);

StabilityResult stability_score(const model::ActivationModel& model, const std::vector<data::AnnotatedImage>& test,
                                const NoiseSpec& noise, const EvalSettings& settings);

/// (1/Z) sum_i exp(-||t_i(a) - t_i(b)||^2) for two [Z,Z] structures.
double structure_similarity(const Tensor& t_a, const Tensor& t_b);
/// Mean structure similarity between shallow and deep features over images.
double sdfa_similarity(const model::PrototypeNet& net, const std::vector<data::AnnotatedImage>& images, int threads = 1);

struct SimilarCount {
  double threshold = 0.6;
  std::vector<int> counts;  // per prototype: other-class prototypes with cosine > threshold
  double mean = 0.0;
};
SimilarCount cross_class_similar_count(const model::PrototypeBank& bank, double threshold = 0.6);

struct ClassRow {
  int label = 0;
  double consistent_ratio = 0.0;
  double accuracy = 0.0;
  int test_images = 0;
};
std::vector<ClassRow> per_class_consistency_vs_accuracy(const ConsistencyResult& consistency,
                                                        const model::PrototypeAllocation& allocation,
                                                        const std::vector<data::AnnotatedImage>& test,
                                                        std::span<const int> predictions);

std::vector<double> consistency_over_checkpoints(const std::vector<std::vector<std::uint8_t>>& checkpoints,
                                                 const data::Dataset& dataset, const EvalSettings& settings);

struct EvalOptions {
  EvalSettings settings;
  double box_ratio = 0.321;
  std::vector<NoiseSpec> noises{NoiseSpec::gaussian(0.2), NoiseSpec::pgd(0.1)};
  double similar_threshold = 0.6;

  /// Keys: mu, box_ratio, threads, similar_threshold, noises (array of
  /// {kind, sigma | eps, alpha, steps, seed}). Missing keys keep defaults;
  /// unknown keys throw ConfigError.
  static EvalOptions from_json(const std::string& text);
  [[nodiscard]] std::string to_json() const;
};

struct MetricsReport {
  std::string model_config;  // JSON
  EvalOptions options;
  std::string dataset_path;
  std::string training_config;  // JSON echo of the training run; empty when unknown
  double test_accuracy = 0.0;
  ConsistencyResult consistency;
  std::vector<StabilityResult> stability;
  std::vector<ClassRow> per_class;
  double sdfa_similarity = 0.0;
  SimilarCount similar;
  std::optional<int> fc_negative_on_class;
  std::optional<double> sa_max_block_deviation;  // max |sum w~ - 1| over class blocks

  [[nodiscard]] std::string to_json() const;
  /// Benchmark row label derived from the training echo: "base", "base+SA",
  /// "base+SDFA" or "base+SA+SDFA"; the bare head name when the echo is absent.
  [[nodiscard]] std::string method() const;
  [[nodiscard]] static std::string csv_header();
  [[nodiscard]] std::string csv_row() const;
};

/// See MetricsReport::method.
std::string method_label(const std::string& model_config_json, const std::string& training_json);

/// Runs every metric on the test split. The box size is derived from
/// options.box_ratio and the dataset's image size.
MetricsReport evaluate(const model::PrototypeNet& net, const data::Dataset& dataset, EvalOptions options);

/// Calls fn(i) for i in [0,n) on up to `threads` workers. Rethrows the
/// exception of the lowest failing index.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

}  // namespace ppb::metrics
