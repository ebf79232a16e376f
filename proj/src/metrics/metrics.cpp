#include "ppbench/metrics.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <thread>

#include "json.hpp"
#include "ppbench/errors.hpp"
#include "ppbench/losses.hpp"
#include "ppbench/ops.hpp"
#include "ppbench/rng.hpp"

namespace ppb::metrics {

namespace {

using json = nlohmann::ordered_json;

constexpr int kSchemaVersion = 1;

Tensor map_of(const Tensor& maps, std::size_t j) {
  const std::size_t H = maps.dim(1), W = maps.dim(2);
  const auto src = maps.data().subspan(j * H * W, H * W);
  return Tensor::from({H, W}, std::vector<double>(src.begin(), src.end()));
}

Tensor clean_maps(const model::ActivationModel& model, const data::AnnotatedImage& image, const Tensor& input) {
  NoGradGuard ng;
  FreezeParameters frozen;
  return model.activation_maps(image, input);
}

void check_label(const data::AnnotatedImage& image, const model::PrototypeAllocation& a) {
  if (image.label < 0 || image.label >= a.num_classes) throw DataError("test image label outside the model's classes");
}

std::vector<int> class_sizes(const std::vector<data::AnnotatedImage>& test, const model::PrototypeAllocation& a) {
  std::vector<int> n(static_cast<std::size_t>(a.num_classes), 0);
  for (const auto& img : test) {
    check_label(img, a);
    ++n[static_cast<std::size_t>(img.label)];
  }
  return n;
}

std::uint64_t image_seed(std::uint64_t seed, std::size_t index) { return Rng(seed).split(index)(); }

json noise_json(const NoiseSpec& n) {
  json j;
  j["kind"] = noise_name(n.kind);
  if (n.kind == NoiseKind::Gaussian) j["sigma"] = n.sigma;
  if (n.kind == NoiseKind::PGD) {
    j["eps"] = n.eps;
    j["alpha"] = n.alpha;
    j["steps"] = n.steps;
  }
  j["seed"] = n.seed;
  return j;
}

}  // namespace

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const auto workers = static_cast<std::size_t>(std::clamp<std::size_t>(threads < 1 ? 1 : threads, 1, std::max<std::size_t>(n, 1)));
  std::vector<std::exception_ptr> errors(n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
        break;
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n && !failed; i = next++) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
            failed = true;
          }
        }
      });
    }
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

BoxSize BoxSize::from_ratio(double ratio, int image_side) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError("box ratio must lie in (0, 1]");
  const int side = std::max(1, static_cast<int>(std::lround(ratio * image_side)));
  return {side, side};
}

BoundingBox BoundingBox::around(int row, int col, BoxSize size, int image_h, int image_w) {
  if (size.height < 1 || size.width < 1 || size.height > image_h || size.width > image_w)
    throw ConfigError("box must be non-empty and fit inside the image");
  BoundingBox b;
  b.center_row = row;
  b.center_col = col;
  b.top = std::max(0, row - size.height / 2);
  b.left = std::max(0, col - size.width / 2);
  b.bottom = std::min(image_h, row - size.height / 2 + size.height);
  b.right = std::min(image_w, col - size.width / 2 + size.width);
  return b;
}

BoundingBox locate_box(const Tensor& map, int image_h, int image_w, BoxSize size) {
  if (map.rank() != 2) throw ShapeError("locate_box expects a [H,W] map, got " + shape_str(map.shape()));
  const auto up = ops::bilinear_resize(ops::reshape(ops::detach(map), {1, 1, map.dim(0), map.dim(1)}),
                                       static_cast<std::size_t>(image_h), static_cast<std::size_t>(image_w));
  const auto v = up.data();
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  const auto W = static_cast<std::size_t>(image_w);
  return BoundingBox::around(static_cast<int>(best / W), static_cast<int>(best % W), size, image_h, image_w);
}

PartVector part_vector(const BoundingBox& box, const data::AnnotatedImage& image) {
  PartVector o(image.parts.size(), 0);
  for (std::size_t i = 0; i < image.parts.size(); ++i) {
    const auto& p = image.parts[i];
    o[i] = p.visible && box.contains(p.x, p.y);
  }
  return o;
}

PartVector corresponding_part(const Tensor& map, const data::AnnotatedImage& image, BoxSize size) {
  const auto& s = image.pixels.shape();
  return part_vector(locate_box(map, static_cast<int>(s[1]), static_cast<int>(s[2]), size), image);
}

const char* noise_name(NoiseKind kind) {
  switch (kind) {
    case NoiseKind::None: return "none";
    case NoiseKind::Gaussian: return "gauss";
    case NoiseKind::PGD: return "pgd";
  }
  return "?";
}

NoiseKind parse_noise(const std::string& name) {
  if (name == "none") return NoiseKind::None;
  if (name == "gauss") return NoiseKind::Gaussian;
  if (name == "pgd") return NoiseKind::PGD;
  throw ConfigError("unknown noise '" + name + "' (expected gauss or pgd)");
}

NoiseSpec NoiseSpec::gaussian(double sigma, std::uint64_t seed) {
  NoiseSpec n;
  n.kind = NoiseKind::Gaussian;
  n.sigma = sigma;
  n.seed = seed;
  return n;
}

NoiseSpec NoiseSpec::pgd(double eps, std::optional<double> alpha, int steps, std::uint64_t seed) {
  NoiseSpec n;
  n.kind = NoiseKind::PGD;
  n.eps = eps;
  n.alpha = alpha.value_or(eps / 4.0);
  n.steps = steps;
  n.seed = seed;
  return n;
}

void NoiseSpec::validate() const {
  if (kind == NoiseKind::Gaussian && !(sigma >= 0.0)) throw ConfigError("sigma must be >= 0");
  if (kind == NoiseKind::PGD && (!(eps >= 0.0) || !(alpha >= 0.0) || steps < 0))
    throw ConfigError("PGD needs eps >= 0, alpha >= 0 and steps >= 0");
}

Tensor gaussian_perturb(const Tensor& input, double sigma, std::uint64_t seed) {
  if (!(sigma >= 0.0)) throw ConfigError("sigma must be >= 0");
  std::vector<double> v(input.data().begin(), input.data().end());
  if (sigma > 0.0) {
    Rng rng(seed);
    for (auto& x : v) x += rng.normal(0.0, sigma);
  }
  return Tensor::from(input.shape(), std::move(v));
}

double pgd_objective(const model::ActivationModel& model, const data::AnnotatedImage& image, const Tensor& clean,
                     const Tensor& perturbed) {
  const auto& a = model.allocation();
  check_label(image, a);
  const auto first = static_cast<std::size_t>(a.first_of(image.label));
  const auto N = static_cast<std::size_t>(a.per_class);
  const auto v0 = clean_maps(model, image, clean);
  const auto v1 = clean_maps(model, image, perturbed);
  const auto hw = v0.dim(1) * v0.dim(2);
  double total = 0.0;
  for (std::size_t i = first * hw; i < (first + N) * hw; ++i) total += (v1.data()[i] - v0.data()[i]) * (v1.data()[i] - v0.data()[i]);
  return total;
}

Tensor pgd_perturb(const model::ActivationModel& model, const data::AnnotatedImage& image, const Tensor& input,
                   double eps, double alpha, int steps, std::uint64_t seed) {
  if (!(eps >= 0.0) || !(alpha >= 0.0) || steps < 0) throw ConfigError("PGD needs eps >= 0, alpha >= 0, steps >= 0");
  const auto& a = model.allocation();
  check_label(image, a);
  const auto first = static_cast<std::size_t>(a.first_of(image.label));
  const auto N = static_cast<std::size_t>(a.per_class);
  const auto x = input.data();
  const Tensor target = ops::slice(clean_maps(model, image, input), 0, first, N);

  Rng rng(seed);
  std::vector<double> adv(x.begin(), x.end());
  for (auto& v : adv) v += rng.uniform(-eps, eps);

  FreezeParameters frozen;
  for (int t = 0; t < steps; ++t) {
    Tensor xt = Tensor::from(input.shape(), adv, true);
    const auto maps = model.activation_maps(image, xt);
    const auto objective = ops::sum(ops::square(ops::sub(ops::slice(maps, 0, first, N), target)));
    if (!objective.tracked()) break;  // model is not differentiable in its input
    objective.backward();
    const auto g = xt.grad();
    for (std::size_t i = 0; i < adv.size(); ++i) {
      if (!std::isfinite(g[i])) throw NumericError("PGD: non-finite gradient at step " + std::to_string(t));
      const double step = g[i] > 0 ? alpha : (g[i] < 0 ? -alpha : 0.0);
      adv[i] = std::clamp(adv[i] + step, x[i] - eps, x[i] + eps);
    }
  }
  return Tensor::from(input.shape(), std::move(adv));
}

ConsistencyResult consistency_score(const model::ActivationModel& model, const std::vector<data::AnnotatedImage>& test,
                                    int num_parts, const EvalSettings& settings) {
  const auto& alloc = model.allocation();
  const auto M = static_cast<std::size_t>(alloc.size());
  const auto N = static_cast<std::size_t>(alloc.per_class);
  const auto C = static_cast<std::size_t>(num_parts);
  const auto sizes = class_sizes(test, alloc);

  // o-vectors of the own-class prototypes, per image.
  std::vector<std::vector<PartVector>> parts(test.size());
  parallel_for(test.size(), settings.threads, [&](std::size_t i) {
    const auto& img = test[i];
    if (img.parts.size() != C) throw DataError("image has a different number of part annotations than expected");
    const auto maps = clean_maps(model, img, model::normalize_pixels(img.pixels));
    const auto first = static_cast<std::size_t>(alloc.first_of(img.label));
    for (std::size_t n = 0; n < N; ++n) parts[i].push_back(corresponding_part(map_of(maps, first + n), img, settings.box));
  });

  std::vector<std::vector<int>> counts(M, std::vector<int>(C, 0));
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto first = static_cast<std::size_t>(alloc.first_of(test[i].label));
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c) counts[first + n][c] += parts[i][n][c];
  }

  ConsistencyResult r;
  r.a.resize(M);
  r.consistent.assign(M, 0);
  r.defined.assign(M, 0);
  std::size_t defined = 0, consistent = 0;
  for (std::size_t j = 0; j < M; ++j) {
    const int n = sizes[static_cast<std::size_t>(alloc.class_of(static_cast<int>(j)))];
    if (n == 0) {
      ++r.undefined_count;
      continue;
    }
    r.defined[j] = 1;
    ++defined;
    double best = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      r.a[j].push_back(static_cast<double>(counts[j][c]) / n);
      best = std::max(best, r.a[j].back());
    }
    r.consistent[j] = best >= settings.mu;
    consistent += r.consistent[j];
  }
  r.score = defined ? static_cast<double>(consistent) / static_cast<double>(defined) : 0.0;
  return r;
}

StabilityResult stability_score(const model::ActivationModel& model, const std::vector<data::AnnotatedImage>& test,
                                const NoiseSpec& noise, const EvalSettings& settings) {
  noise.validate();
  const auto& alloc = model.allocation();
  const auto M = static_cast<std::size_t>(alloc.size());
  const auto N = static_cast<std::size_t>(alloc.per_class);
  const auto sizes = class_sizes(test, alloc);

  std::vector<std::vector<std::uint8_t>> same(test.size());
  parallel_for(test.size(), settings.threads, [&](std::size_t i) {
    const auto& img = test[i];
    const Tensor x = model::normalize_pixels(img.pixels);
    const std::uint64_t seed = image_seed(noise.seed, i);
    Tensor xn;
    switch (noise.kind) {
      case NoiseKind::None: xn = x; break;
      case NoiseKind::Gaussian: xn = gaussian_perturb(x, noise.sigma, seed); break;
      case NoiseKind::PGD: xn = pgd_perturb(model, img, x, noise.eps, noise.alpha, noise.steps, seed); break;
    }
    const auto m0 = clean_maps(model, img, x);
    const auto m1 = clean_maps(model, img, xn);
    const auto first = static_cast<std::size_t>(alloc.first_of(img.label));
    for (std::size_t n = 0; n < N; ++n) {
      const auto o0 = corresponding_part(map_of(m0, first + n), img, settings.box);
      const auto o1 = corresponding_part(map_of(m1, first + n), img, settings.box);
      same[i].push_back(o0 == o1);
    }
  });

  std::vector<int> matches(M, 0);
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto first = static_cast<std::size_t>(alloc.first_of(test[i].label));
    for (std::size_t n = 0; n < N; ++n) matches[first + n] += same[i][n];
  }
  StabilityResult r;
  r.noise = noise;
  r.match_rate.assign(M, 0.0);
  r.defined.assign(M, 0);
  double sum = 0.0;
  std::size_t defined = 0;
  for (std::size_t j = 0; j < M; ++j) {
    const int n = sizes[static_cast<std::size_t>(alloc.class_of(static_cast<int>(j)))];
    if (n == 0) {
      ++r.undefined_count;
      continue;
    }
    r.defined[j] = 1;
    ++defined;
    r.match_rate[j] = static_cast<double>(matches[j]) / n;
    sum += r.match_rate[j];
  }
  r.score = defined ? sum / static_cast<double>(defined) : 0.0;
  return r;
}

double structure_similarity(const Tensor& t_a, const Tensor& t_b) {
  if (t_a.rank() != 2 || t_a.shape() != t_b.shape() || t_a.dim(0) != t_a.dim(1))
    throw ShapeError("structure_similarity expects two equal [Z,Z] matrices");
  const std::size_t Z = t_a.dim(0);
  double total = 0.0;
  for (std::size_t i = 0; i < Z; ++i) {
    double d2 = 0.0;
    for (std::size_t k = 0; k < Z; ++k) {
      const double d = t_a.data()[i * Z + k] - t_b.data()[i * Z + k];
      d2 += d * d;
    }
    total += std::exp(-d2);
  }
  return total / static_cast<double>(Z);
}

double sdfa_similarity(const model::PrototypeNet& net, const std::vector<data::AnnotatedImage>& images, int threads) {
  if (images.empty()) return 0.0;
  std::vector<double> per_image(images.size());
  parallel_for(images.size(), threads, [&](std::size_t i) {
    NoGradGuard ng;
    FreezeParameters frozen;
    const auto f = net.forward_backbone(model::normalize_pixels(images[i].pixels));
    const std::size_t Hd = f.deep.dim(2), Wd = f.deep.dim(3), Z = Hd * Wd;
    const auto ts = losses::spatial_structure(losses::shallow_patch_units(f.shallow, Hd, Wd));
    const auto td = losses::spatial_structure(losses::deep_units(f.deep));
    per_image[i] = structure_similarity(ops::reshape(ts, {Z, Z}), ops::reshape(td, {Z, Z}));
  });
  double sum = 0.0;
  for (double v : per_image) sum += v;
  return sum / static_cast<double>(images.size());
}

SimilarCount cross_class_similar_count(const model::PrototypeBank& bank, double threshold) {
  const auto& a = bank.allocation;
  const auto M = bank.vectors.dim(0), D = bank.vectors.dim(1);
  const auto unit = ops::l2_normalize(ops::detach(bank.vectors), 1);
  const auto p = unit.data();
  SimilarCount r;
  r.threshold = threshold;
  r.counts.assign(M, 0);
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < M; ++j) {
      if (a.class_of(static_cast<int>(i)) == a.class_of(static_cast<int>(j))) continue;
      double dot = 0.0;
      for (std::size_t d = 0; d < D; ++d) dot += p[i * D + d] * p[j * D + d];
      r.counts[i] += dot > threshold;
    }
  double sum = 0.0;
  for (int c : r.counts) sum += c;
  r.mean = M ? sum / static_cast<double>(M) : 0.0;
  return r;
}

std::vector<ClassRow> per_class_consistency_vs_accuracy(const ConsistencyResult& consistency,
                                                        const model::PrototypeAllocation& allocation,
                                                        const std::vector<data::AnnotatedImage>& test,
                                                        std::span<const int> predictions) {
  if (predictions.size() != test.size()) throw ConfigError("one prediction per test image expected");
  if (consistency.consistent.size() != static_cast<std::size_t>(allocation.size()))
    throw ConfigError("consistency result does not match the allocation");
  std::vector<ClassRow> rows(static_cast<std::size_t>(allocation.num_classes));
  std::vector<int> correct(rows.size(), 0);
  for (std::size_t i = 0; i < test.size(); ++i) {
    check_label(test[i], allocation);
    const auto k = static_cast<std::size_t>(test[i].label);
    ++rows[k].test_images;
    correct[k] += predictions[i] == test[i].label;
  }
  for (std::size_t k = 0; k < rows.size(); ++k) {
    rows[k].label = static_cast<int>(k);
    int flags = 0;
    const auto first = static_cast<std::size_t>(allocation.first_of(static_cast<int>(k)));
    for (std::size_t n = 0; n < static_cast<std::size_t>(allocation.per_class); ++n) flags += consistency.consistent[first + n];
    rows[k].consistent_ratio = static_cast<double>(flags) / allocation.per_class;
    rows[k].accuracy = rows[k].test_images ? static_cast<double>(correct[k]) / rows[k].test_images : 0.0;
  }
  return rows;
}

std::vector<double> consistency_over_checkpoints(const std::vector<std::vector<std::uint8_t>>& checkpoints,
                                                 const data::Dataset& dataset, const EvalSettings& settings) {
  std::vector<double> series;
  for (const auto& bytes : checkpoints) {
    const auto net = model::PrototypeNet::from_checkpoint_bytes(bytes);
    series.push_back(consistency_score(net, dataset.test(), dataset.num_parts(), settings).score);
  }
  return series;
}

EvalOptions EvalOptions::from_json(const std::string& text) {
  EvalOptions o;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("eval options are not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("eval options must be a JSON object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "mu") o.settings.mu = value.get<double>();
      else if (key == "box_ratio") o.box_ratio = value.get<double>();
      else if (key == "threads") o.settings.threads = value.get<int>();
      else if (key == "similar_threshold") o.similar_threshold = value.get<double>();
      else if (key == "noises") {
        o.noises.clear();
        for (const auto& n : value) {
          if (!n.is_object()) throw ConfigError("each noise must be a JSON object");
          NoiseSpec spec;
          spec.kind = parse_noise(n.at("kind").get<std::string>());
          bool alpha_given = false;
          for (const auto& [nk, nv] : n.items()) {
            const bool gauss = spec.kind == NoiseKind::Gaussian, pgd = spec.kind == NoiseKind::PGD;
            if (nk == "kind") continue;
            if (nk == "sigma" && gauss) spec.sigma = nv.get<double>();
            else if (nk == "eps" && pgd) spec.eps = nv.get<double>();
            else if (nk == "alpha" && pgd) spec.alpha = nv.get<double>(), alpha_given = true;
            else if (nk == "steps" && pgd) spec.steps = nv.get<int>();
            else if (nk == "seed") spec.seed = nv.get<std::uint64_t>();
            else throw ConfigError("noise '" + std::string(noise_name(spec.kind)) + "' has no parameter '" + nk + "'");
          }
          if (spec.kind == NoiseKind::PGD && !alpha_given) spec.alpha = spec.eps / 4.0;
          spec.validate();
          o.noises.push_back(spec);
        }
      } else {
        throw ConfigError("unknown eval option '" + key + "'");
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid eval options: ") + e.what());
  }
  if (!(o.settings.mu >= 0.0 && o.settings.mu <= 1.0)) throw ConfigError("mu must lie in [0, 1]");
  if (!(o.box_ratio > 0.0 && o.box_ratio <= 1.0)) throw ConfigError("box_ratio must lie in (0, 1]");
  if (o.settings.threads < 1) throw ConfigError("threads must be >= 1");
  return o;
}

std::string EvalOptions::to_json() const {
  json j;
  j["mu"] = settings.mu;
  j["box_ratio"] = box_ratio;
  j["threads"] = settings.threads;
  j["similar_threshold"] = similar_threshold;
  json n = json::array();
  for (const auto& spec : noises) n.push_back(noise_json(spec));
  j["noises"] = n;
  return j.dump();
}

MetricsReport evaluate(const model::PrototypeNet& net, const data::Dataset& dataset, EvalOptions options) {
  if (net.config().num_classes != dataset.num_classes() || net.config().image_size != dataset.image_size())
    throw DataError("model and dataset disagree on class count or image size");
  if (!(options.settings.mu >= 0.0 && options.settings.mu <= 1.0)) throw ConfigError("mu must lie in [0, 1]");
  options.settings.box = BoxSize::from_ratio(options.box_ratio, dataset.image_size());
  const auto& test = dataset.test();

  MetricsReport r;
  r.model_config = net.config().to_json();
  r.options = options;
  const auto predictions = model::predict(net, test);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) correct += predictions[i] == test[i].label;
  r.test_accuracy = test.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(test.size());
  r.consistency = consistency_score(net, test, dataset.num_parts(), options.settings);
  for (const auto& noise : options.noises) r.stability.push_back(stability_score(net, test, noise, options.settings));
  r.per_class = per_class_consistency_vs_accuracy(r.consistency, net.allocation(), test, predictions);
  r.sdfa_similarity = sdfa_similarity(net, test, options.settings.threads);
  r.similar = cross_class_similar_count(net.bank(), options.similar_threshold);
  if (net.head_kind() == model::HeadKind::FC) {
    const auto& w = net.fc_head().weights;
    const auto& a = net.allocation();
    const auto M = static_cast<std::size_t>(a.size());
    int negative = 0;
    for (std::size_t j = 0; j < M; ++j)
      negative += w.data()[static_cast<std::size_t>(a.class_of(static_cast<int>(j))) * M + j] < 0.0;
    r.fc_negative_on_class = negative;
  } else {
    const auto wt = model::sa_normalized_weights(net.sa_head(), net.allocation());
    const auto N = static_cast<std::size_t>(net.allocation().per_class);
    double worst = 0.0;
    for (std::size_t k = 0; k < static_cast<std::size_t>(net.allocation().num_classes); ++k) {
      double s = 0.0;
      for (std::size_t n = 0; n < N; ++n) s += wt.data()[k * N + n];
      worst = std::max(worst, std::abs(s - 1.0));
    }
    r.sa_max_block_deviation = worst;
  }
  return r;
}

std::string MetricsReport::to_json() const {
  json j;
  j["schema_version"] = kSchemaVersion;
  j["tool_version"] = PPBENCH_VERSION;
  json cfg;
  cfg["model"] = json::parse(model_config);
  cfg["training"] = training_config.empty() ? json(nullptr) : json::parse(training_config);
  cfg["dataset"] = dataset_path;
  cfg["mu"] = options.settings.mu;
  cfg["box_ratio"] = options.box_ratio;
  cfg["box"] = {{"height", options.settings.box.height}, {"width", options.settings.box.width}};
  cfg["similar_threshold"] = options.similar_threshold;
  json noises = json::array();
  for (const auto& n : options.noises) noises.push_back(noise_json(n));
  cfg["noises"] = noises;
  j["config"] = cfg;
  j["test_accuracy"] = test_accuracy;

  json con;
  con["score"] = consistency.score;
  con["undefined_prototypes"] = consistency.undefined_count;
  json protos = json::array();
  for (std::size_t p = 0; p < consistency.consistent.size(); ++p) {
    json row;
    row["prototype"] = p;
    row["defined"] = static_cast<bool>(consistency.defined[p]);
    row["a"] = consistency.a[p];
    row["consistent"] = static_cast<bool>(consistency.consistent[p]);
    protos.push_back(row);
  }
  con["prototypes"] = protos;
  j["consistency"] = con;

  json sta = json::array();
  for (const auto& s : stability) {
    json row;
    row["noise"] = noise_json(s.noise);
    row["score"] = s.score;
    row["undefined_prototypes"] = s.undefined_count;
    row["match_rate"] = s.match_rate;
    sta.push_back(row);
  }
  j["stability"] = sta;

  json classes = json::array();
  for (const auto& c : per_class)
    classes.push_back({{"class", c.label},
                       {"consistent_ratio", c.consistent_ratio},
                       {"accuracy", c.accuracy},
                       {"test_images", c.test_images}});
  j["per_class"] = classes;
  j["sdfa_similarity"] = sdfa_similarity;
  j["cross_class_similar"] = {{"threshold", similar.threshold}, {"mean", similar.mean}, {"counts", similar.counts}};
  j["fc_negative_on_class"] = fc_negative_on_class ? json(*fc_negative_on_class) : json(nullptr);
  j["sa_max_block_deviation"] = sa_max_block_deviation ? json(*sa_max_block_deviation) : json(nullptr);
  return j.dump(2);
}

std::string method_label(const std::string& model_config_json, const std::string& training_json) {
  const auto head = model::ModelConfig::from_json(model_config_json).head;
  if (training_json.empty()) return model::head_name(head);
  const auto t = json::parse(training_json);
  const bool sdfa = t.value("sdfa", false) && t.value("lambda_align", 0.0) > 0.0;
  std::string label = "base";
  if (head == model::HeadKind::SA) label += "+SA";
  if (sdfa) label += "+SDFA";
  return label;
}

std::string MetricsReport::method() const { return method_label(model_config, training_config); }

std::string MetricsReport::csv_header() {
  return "method,head,seed,con,sta_gauss,sta_pgd,acc,sdfa_similarity,cross_class_similar,fc_negative_on_class";
}

std::string MetricsReport::csv_row() const {
  const auto cfg = model::ModelConfig::from_json(model_config);
  auto sta = [&](NoiseKind k) -> std::string {
    for (const auto& s : stability)
      if (s.noise.kind == k) return std::to_string(s.score);
    return "";
  };
  return method() + "," + model::head_name(cfg.head) + "," + std::to_string(cfg.seed) + "," +
         std::to_string(consistency.score) + "," + sta(NoiseKind::Gaussian) + "," + sta(NoiseKind::PGD) + "," +
         std::to_string(test_accuracy) + "," + std::to_string(sdfa_similarity) + "," + std::to_string(similar.mean) +
         "," + (fc_negative_on_class ? std::to_string(*fc_negative_on_class) : "");
}

}  // namespace ppb::metrics
