#include "ppbench/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "json.hpp"
#include "ppbench/errors.hpp"
#include "ppbench/ops.hpp"
#include "ppbench/rng.hpp"

namespace ppb::model {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

using json = nlohmann::ordered_json;

constexpr char kMagic[8] = {'P', 'P', 'B', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr double kPixelMean = 0.5;
constexpr double kPixelStd = 0.25;

Tensor he_normal(Shape shape, std::size_t fan_in, double gain, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  const double std = std::sqrt(gain / static_cast<double>(fan_in));
  for (auto& x : v) x = rng.normal(0.0, std);
  return Tensor::from(std::move(shape), std::move(v)).mark_parameter();
}

class ByteWriter {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(T));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes.insert(bytes.end(), p, p + n);
  }
  std::vector<std::uint8_t> bytes;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& b) : bytes_(b) {}
  template <typename T>
  T get() {
    T v;
    take(&v, sizeof(T));
    return v;
  }
  void take(void* out, std::size_t n) {
    if (pos_ + n > bytes_.size()) throw DataError("checkpoint truncated");
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  [[nodiscard]] bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

struct CheckpointContents {
  ModelConfig config;
  std::vector<std::pair<std::string, Tensor>> params;
};

CheckpointContents parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  char magic[8];
  r.take(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof magic) != 0) throw DataError("not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  const auto config_len = r.get<std::uint32_t>();
  std::string config_text(config_len, '\0');
  r.take(config_text.data(), config_len);
  CheckpointContents out;
  out.config = ModelConfig::from_json(config_text);
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint32_t>();
    std::string name(name_len, '\0');
    r.take(name.data(), name_len);
    const auto rank = r.get<std::uint32_t>();
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>());
    std::vector<double> data(shape_numel(shape));
    r.take(data.data(), data.size() * sizeof(double));
    out.params.emplace_back(std::move(name), Tensor::from(std::move(shape), std::move(data)));
  }
  if (!r.done()) throw DataError("checkpoint has trailing bytes");
  return out;
}

}  // namespace

const char* head_name(HeadKind kind) { return kind == HeadKind::SA ? "sa" : "fc"; }

HeadKind parse_head(const std::string& name) {
  if (name == "sa") return HeadKind::SA;
  if (name == "fc") return HeadKind::FC;
  throw ConfigError("unknown head '" + name + "' (expected sa or fc)");
}

bool ModelConfig::same_architecture(const ModelConfig& o) const {
  return image_size == o.image_size && num_classes == o.num_classes && protos_per_class == o.protos_per_class &&
         proto_dim == o.proto_dim && channels == o.channels && shallow_block == o.shallow_block && head == o.head;
}

std::string ModelConfig::to_json() const {
  json j;
  j["image_size"] = image_size;
  j["num_classes"] = num_classes;
  j["protos_per_class"] = protos_per_class;
  j["proto_dim"] = proto_dim;
  j["channels"] = channels;
  j["shallow_block"] = shallow_block;
  j["head"] = head_name(head);
  j["seed"] = seed;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    ModelConfig c;
    c.image_size = j.at("image_size").get<int>();
    c.num_classes = j.at("num_classes").get<int>();
    c.protos_per_class = j.at("protos_per_class").get<int>();
    c.proto_dim = j.at("proto_dim").get<int>();
    c.channels = j.at("channels").get<std::vector<int>>();
    c.shallow_block = j.at("shallow_block").get<int>();
    c.head = parse_head(j.at("head").get<std::string>());
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
  } catch (const json::exception& e) {
    throw DataError(std::string("invalid model config: ") + e.what());
  }
}

ActivationRecord prototype_activations(const Tensor& z_deep, const PrototypeBank& bank) {
  Tensor z = z_deep;
  if (z.rank() == 3) z = ops::reshape(z, {1, z.dim(0), z.dim(1), z.dim(2)});
  if (z.rank() != 4) throw ShapeError("prototype_activations: expected [B,D,H,W], got " + shape_str(z_deep.shape()));
  ActivationRecord rec;
  rec.maps = ops::channel_inner_product(z, bank.vectors);
  auto mx = ops::spatial_max(rec.maps);
  rec.values = std::move(mx.values);
  rec.argmax = std::move(mx.argmax);
  rec.width = z.dim(3);
  return rec;
}

Tensor sa_normalized_weights(const SAHead& head, const PrototypeAllocation& allocation) {
  const auto K = static_cast<std::size_t>(allocation.num_classes);
  const auto N = static_cast<std::size_t>(allocation.per_class);
  if (head.weights.numel() != K * N) throw ShapeError("SA head size does not match the prototype allocation");
  return ops::reshape(ops::softmax(ops::reshape(head.weights, {K, N}), 1), {K * N});
}

Tensor sa_logits(const Tensor& g, const SAHead& head, const PrototypeAllocation& allocation) {
  const auto K = static_cast<std::size_t>(allocation.num_classes);
  const auto N = static_cast<std::size_t>(allocation.per_class);
  if (g.rank() != 2 || g.dim(1) != K * N) throw ShapeError("sa_logits: g must be [B,M], got " + shape_str(g.shape()));
  const auto weighted = ops::mul(g, sa_normalized_weights(head, allocation));
  return ops::sum_dim(ops::reshape(weighted, {g.dim(0), K, N}), 2);
}

Tensor fc_logits(const Tensor& g, const FCHead& head) {
  if (g.rank() != 2 || head.weights.rank() != 2 || g.dim(1) != head.weights.dim(1))
    throw ShapeError("fc_logits: g " + shape_str(g.shape()) + " vs weights " + shape_str(head.weights.shape()));
  return ops::matmul(g, ops::transpose(head.weights, 0, 1));
}

Tensor normalize_pixels(const Tensor& pixels) { return normalize_batch({&pixels}); }

Tensor normalize_batch(const std::vector<const Tensor*>& pixels) {
  if (pixels.empty()) throw ShapeError("normalize_batch: empty batch");
  const Shape s = pixels.front()->shape();
  if (s.size() != 3 || s[0] != 3) throw ShapeError("expected [3,H,W] pixels, got " + shape_str(s));
  std::vector<double> v;
  v.reserve(pixels.size() * shape_numel(s));
  for (const Tensor* p : pixels) {
    if (p->shape() != s) throw ShapeError("normalize_batch: images of different shapes");
    for (double x : p->data()) v.push_back((x - kPixelMean) / kPixelStd);
  }
  return Tensor::from({pixels.size(), s[0], s[1], s[2]}, std::move(v));
}

PrototypeNet::PrototypeNet(ModelConfig config) : config_(std::move(config)) {
  const auto& c = config_;
  if (c.channels.size() != 3) throw ConfigError("model: exactly three backbone widths expected before block 4");
  if (c.num_classes < 1 || c.protos_per_class < 1 || c.proto_dim < 1) throw ConfigError("model: sizes must be positive");
  if (c.shallow_block < 1 || c.shallow_block > 4) throw ConfigError("model: shallow_block must be in 1..4");
  if (c.image_size % 8 != 0 || c.image_size < 16) throw ConfigError("model: image_size must be a multiple of 8, >= 16");

  Rng rng = Rng(c.seed).split(0x6d6f64656c);
  std::vector<int> widths{3, c.channels[0], c.channels[1], c.channels[2], c.proto_dim};
  for (std::size_t b = 0; b < 4; ++b) {
    const auto cin = static_cast<std::size_t>(widths[b]), cout = static_cast<std::size_t>(widths[b + 1]);
    Conv conv;
    conv.weight = he_normal({cout, cin, 3, 3}, cin * 9, 2.0, rng);
    conv.bias = Tensor::zeros({cout}).mark_parameter();
    blocks_.push_back(std::move(conv));
  }
  const auto D = static_cast<std::size_t>(c.proto_dim);
  for (auto& layer : addon_) {
    layer.weight = he_normal({D, D, 1, 1}, D, 1.0, rng);
    layer.bias = Tensor::zeros({D}).mark_parameter();
  }

  bank_.allocation = {c.num_classes, c.protos_per_class};
  const auto M = static_cast<std::size_t>(bank_.allocation.size());
  std::vector<double> protos(M * D);
  for (std::size_t j = 0; j < M; ++j) {
    double ss = 0.0;
    for (std::size_t d = 0; d < D; ++d) {
      protos[j * D + d] = rng.uniform();
      ss += protos[j * D + d] * protos[j * D + d];
    }
    const double nrm = std::sqrt(ss);
    for (std::size_t d = 0; d < D; ++d) protos[j * D + d] /= nrm;
  }
  bank_.vectors = Tensor::from({M, D}, std::move(protos)).mark_parameter();

  if (c.head == HeadKind::SA) {
    sa_.weights = Tensor::zeros({M}).mark_parameter();
  } else {
    const auto K = static_cast<std::size_t>(c.num_classes);
    std::vector<double> w(K * M);
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t j = 0; j < M; ++j)
        w[k * M + j] = bank_.allocation.class_of(static_cast<int>(j)) == static_cast<int>(k) ? 1.0 : -0.5;
    fc_.weights = Tensor::from({K, M}, std::move(w)).mark_parameter();
  }
}

const SAHead& PrototypeNet::sa_head() const {
  if (config_.head != HeadKind::SA) throw ConfigError("model has an FC head, not SA");
  return sa_;
}

const FCHead& PrototypeNet::fc_head() const {
  if (config_.head != HeadKind::FC) throw ConfigError("model has an SA head, not FC");
  return fc_;
}

BackboneOutput PrototypeNet::forward_backbone(const Tensor& input) const {
  const auto S = static_cast<std::size_t>(config_.image_size);
  if (input.rank() != 4 || input.dim(1) != 3 || input.dim(2) != S || input.dim(3) != S) {
    throw ShapeError("model expects input [B,3," + std::to_string(S) + "," + std::to_string(S) + "], got " +
                     shape_str(input.shape()));
  }
  BackboneOutput out;
  Tensor h = input;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    h = ops::relu(ops::conv2d(h, blocks_[b].weight, blocks_[b].bias, 1, 1));
    if (b < 3) h = ops::max_pool2d(h, 2, 2);
    if (static_cast<int>(b) + 1 == config_.shallow_block) out.shallow = h;
  }
  h = ops::relu(ops::conv2d(h, addon_[0].weight, addon_[0].bias, 1, 0));
  out.deep = ops::l2_normalize(ops::conv2d(h, addon_[1].weight, addon_[1].bias, 1, 0), 1);
  return out;
}

Tensor PrototypeNet::head_logits(const Tensor& g) const {
  return config_.head == HeadKind::SA ? sa_logits(g, sa_, bank_.allocation) : fc_logits(g, fc_);
}

ForwardResult PrototypeNet::forward(const Tensor& input) const {
  ForwardResult r;
  r.features = forward_backbone(input);
  r.activations = prototype_activations(r.features.deep, bank_);
  r.logits = head_logits(r.activations.values);
  return r;
}

Tensor PrototypeNet::activation_maps(const data::AnnotatedImage&, const Tensor& input) const {
  auto maps = prototype_activations(forward_backbone(input).deep, bank_).maps;
  return ops::reshape(maps, {maps.dim(1), maps.dim(2), maps.dim(3)});
}

std::vector<Tensor> PrototypeNet::backbone_parameters() const {
  std::vector<Tensor> p;
  for (const auto& c : blocks_) {
    p.push_back(c.weight);
    p.push_back(c.bias);
  }
  return p;
}

std::vector<Tensor> PrototypeNet::addon_parameters() const {
  return {addon_[0].weight, addon_[0].bias, addon_[1].weight, addon_[1].bias};
}

std::vector<Tensor> PrototypeNet::head_parameters() const {
  return {config_.head == HeadKind::SA ? sa_.weights : fc_.weights};
}

std::vector<std::pair<std::string, Tensor>> PrototypeNet::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> p;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    p.emplace_back("backbone.block" + std::to_string(b + 1) + ".weight", blocks_[b].weight);
    p.emplace_back("backbone.block" + std::to_string(b + 1) + ".bias", blocks_[b].bias);
  }
  for (std::size_t i = 0; i < addon_.size(); ++i) {
    p.emplace_back("addon." + std::to_string(i) + ".weight", addon_[i].weight);
    p.emplace_back("addon." + std::to_string(i) + ".bias", addon_[i].bias);
  }
  p.emplace_back("prototypes", bank_.vectors);
  p.emplace_back(config_.head == HeadKind::SA ? "head.sa.weights" : "head.fc.weights", head_parameters().front());
  return p;
}

std::vector<std::uint8_t> PrototypeNet::checkpoint_bytes() const {
  ByteWriter w;
  w.put_bytes(kMagic, sizeof kMagic);
  w.put(kCheckpointVersion);
  const std::string cfg = config_.to_json();
  w.put(static_cast<std::uint32_t>(cfg.size()));
  w.put_bytes(cfg.data(), cfg.size());
  const auto params = named_parameters();
  w.put(static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    w.put(static_cast<std::uint32_t>(name.size()));
    w.put_bytes(name.data(), name.size());
    w.put(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.put(static_cast<std::uint64_t>(d));
    w.put_bytes(t.data().data(), t.numel() * sizeof(double));
  }
  return std::move(w.bytes);
}

void PrototypeNet::save(const std::filesystem::path& path) const {
  const auto bytes = checkpoint_bytes();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing checkpoint " + path.string());
}

void PrototypeNet::load_parameters(const std::vector<std::uint8_t>& bytes) {
  auto contents = parse_checkpoint(bytes);
  if (!contents.config.same_architecture(config_)) {
    throw DataError("checkpoint architecture " + contents.config.to_json() + " does not match model " +
                    config_.to_json());
  }
  auto mine = named_parameters();
  if (mine.size() != contents.params.size()) throw DataError("checkpoint parameter count mismatch");
  for (std::size_t i = 0; i < mine.size(); ++i) {
    auto& [name, dst] = mine[i];
    const auto& [src_name, src] = contents.params[i];
    if (name != src_name || dst.shape() != src.shape())
      throw DataError("checkpoint parameter '" + src_name + "' " + shape_str(src.shape()) + " does not match '" +
                      name + "' " + shape_str(dst.shape()));
    std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
  }
  config_.seed = contents.config.seed;
}

PrototypeNet PrototypeNet::from_checkpoint_bytes(const std::vector<std::uint8_t>& bytes) {
  PrototypeNet net(parse_checkpoint(bytes).config);
  net.load_parameters(bytes);
  return net;
}

PrototypeNet PrototypeNet::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return from_checkpoint_bytes(bytes);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

std::vector<int> predict(const PrototypeNet& net, const std::vector<data::AnnotatedImage>& images,
                         std::size_t batch_size) {
  NoGradGuard no_grad;
  FreezeParameters frozen;
  std::vector<int> out;
  out.reserve(images.size());
  for (std::size_t start = 0; start < images.size(); start += batch_size) {
    const std::size_t end = std::min(images.size(), start + batch_size);
    std::vector<const Tensor*> px;
    for (std::size_t i = start; i < end; ++i) px.push_back(&images[i].pixels);
    const auto logits = net.forward(normalize_batch(px)).logits;
    const std::size_t K = logits.dim(1);
    for (std::size_t b = 0; b < end - start; ++b) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < K; ++k)
        if (logits.data()[b * K + k] > logits.data()[b * K + best]) best = k;
      out.push_back(static_cast<int>(best));
    }
  }
  return out;
}

}  // namespace ppb::model
