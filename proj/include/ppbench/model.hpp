#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "ppbench/synthdata.hpp"
#include "ppbench/tensor.hpp"

namespace ppb::model {

/// Block layout: prototypes [k*N, (k+1)*N) belong to class k.
struct PrototypeAllocation {
  int num_classes = 0;
  int per_class = 0;

  [[nodiscard]] int size() const { return num_classes * per_class; }
  [[nodiscard]] int class_of(int j) const { return j / per_class; }
  [[nodiscard]] int first_of(int k) const { return k * per_class; }
};

struct PrototypeBank {
  Tensor vectors;  // [M,D]
  PrototypeAllocation allocation;
};

struct SAHead {
  Tensor weights;  // [M] importance logits
};

struct FCHead {
  Tensor weights;  // [K,M]
};

enum class HeadKind { SA, FC };

const char* head_name(HeadKind kind);
HeadKind parse_head(const std::string& name);

struct ModelConfig {
  int image_size = 64;
  int num_classes = 8;
  int protos_per_class = 10;
  int proto_dim = 64;
  std::vector<int> channels{32, 64, 128};  // widths of blocks 1-3; block 4 has width proto_dim
  int shallow_block = 1;                   // z_s is the output of this block (1-based)
  HeadKind head = HeadKind::SA;
  std::uint64_t seed = 0;

  /// Same architecture (seed excluded).
  [[nodiscard]] bool same_architecture(const ModelConfig& other) const;
  [[nodiscard]] std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
};

struct BackboneOutput {
  Tensor shallow;  // z_s [B,D_s,H_s,W_s]
  Tensor deep;     // z_d [B,D,H_d,W_d]
};

/// Activation maps and values of every prototype for a batch.
struct ActivationRecord {
  Tensor maps;    // v: [B,M,H_d,W_d]
  Tensor values;  // g: [B,M]
  std::vector<std::size_t> argmax;  // B*M flat spatial indices, lowest row-major index on ties
  std::size_t width = 0;            // W_d, to decode argmax into (row, col)

  [[nodiscard]] std::pair<std::size_t, std::size_t> location(std::size_t b, std::size_t j, std::size_t m) const {
    const auto flat = argmax[b * m + j];
    return {flat / width, flat % width};
  }
};

/// Inner-product similarity of every unit of z_d [B,D,H,W] (or [D,H,W]) with
/// every prototype, plus the max over space.
ActivationRecord prototype_activations(const Tensor& z_deep, const PrototypeBank& bank);

/// Per-class softmax of the SA logits: w~_j = exp(w_j) / sum_{i in class c(j)} exp(w_i).
Tensor sa_normalized_weights(const SAHead& head, const PrototypeAllocation& allocation);
/// logit_k = sum_{j: c(j)=k} w~_j g_j. g: [B,M] -> [B,K].
Tensor sa_logits(const Tensor& g, const SAHead& head, const PrototypeAllocation& allocation);
/// logits = g * w_h^T. g: [B,M] -> [B,K].
Tensor fc_logits(const Tensor& g, const FCHead& head);

/// Pixels [3,H,W] in [0,1] -> normalised network input [1,3,H,W].
Tensor normalize_pixels(const Tensor& pixels);
/// Stacks several [3,H,W] pixel tensors into one normalised [B,3,H,W] batch.
Tensor normalize_batch(const std::vector<const Tensor*>& pixels);

/// Anything that yields prototype activation maps for an annotated image.
/// The metrics module evaluates through this interface; implementations must
/// allow concurrent calls from several threads.
class ActivationModel {
 public:
  virtual ~ActivationModel() = default;
  [[nodiscard]] virtual const PrototypeAllocation& allocation() const = 0;
  /// Maps [M,H_d,W_d] for one image. `input` is the normalised [1,3,H,W]
  /// tensor (possibly perturbed, possibly tracked for gradient attacks).
  [[nodiscard]] virtual Tensor activation_maps(const data::AnnotatedImage& image, const Tensor& input) const = 0;
};

struct ForwardResult {
  BackboneOutput features;
  ActivationRecord activations;
  Tensor logits;  // [B,K]
};

/// Part-prototype network: conv backbone with a shallow tap, a 1x1 add-on
/// whose units are L2-normalised, inner-product prototype layer and an SA or FC head.
class PrototypeNet final : public ActivationModel {
 public:
  explicit PrototypeNet(ModelConfig config);

  [[nodiscard]] const ModelConfig& config() const { return config_; }
  [[nodiscard]] const PrototypeBank& bank() const { return bank_; }
  [[nodiscard]] const PrototypeAllocation& allocation() const override { return bank_.allocation; }
  [[nodiscard]] HeadKind head_kind() const { return config_.head; }
  [[nodiscard]] const SAHead& sa_head() const;
  [[nodiscard]] const FCHead& fc_head() const;

  /// input: normalised [B,3,H,W].
  [[nodiscard]] BackboneOutput forward_backbone(const Tensor& input) const;
  [[nodiscard]] ForwardResult forward(const Tensor& input) const;
  [[nodiscard]] Tensor head_logits(const Tensor& g) const;
  [[nodiscard]] Tensor activation_maps(const data::AnnotatedImage& image, const Tensor& input) const override;

  [[nodiscard]] std::vector<Tensor> backbone_parameters() const;
  [[nodiscard]] std::vector<Tensor> addon_parameters() const;
  [[nodiscard]] std::vector<Tensor> prototype_parameters() const { return {bank_.vectors}; }
  [[nodiscard]] std::vector<Tensor> head_parameters() const;
  [[nodiscard]] std::vector<std::pair<std::string, Tensor>> named_parameters() const;

  /// Versioned binary checkpoint: magic, version, architecture JSON, then
  /// (name, shape, little-endian float64 data) blobs.
  [[nodiscard]] std::vector<std::uint8_t> checkpoint_bytes() const;
  void save(const std::filesystem::path& path) const;
  static PrototypeNet from_checkpoint_bytes(const std::vector<std::uint8_t>& bytes);
  static PrototypeNet load(const std::filesystem::path& path);
  /// Overwrites this model's parameters; throws DataError on architecture mismatch.
  void load_parameters(const std::vector<std::uint8_t>& bytes);

 private:
  struct Conv {
    Tensor weight, bias;
  };

  ModelConfig config_;
  std::vector<Conv> blocks_;
  std::array<Conv, 2> addon_;  // 1x1 conv, relu, 1x1 conv, then unit-normalised per spatial unit
  PrototypeBank bank_;
  SAHead sa_;
  FCHead fc_;
};

/// Predicted labels (argmax of logits, lowest index on ties) for a list of
/// images, evaluated in batches without recording a graph.
std::vector<int> predict(const PrototypeNet& net, const std::vector<data::AnnotatedImage>& images,
                         std::size_t batch_size = 32);

}  // namespace ppb::model
