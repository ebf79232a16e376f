#include "ppbench/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "json.hpp"
#include "ppbench/adam.hpp"
#include "ppbench/errors.hpp"
#include "ppbench/ops.hpp"
#include "ppbench/rng.hpp"

namespace ppb::train {

namespace {

using json = nlohmann::ordered_json;

void set_trainable(const std::vector<Tensor>& params, bool on) {
  for (Tensor p : params) p.set_requires_grad(on);
}

// Prototype rows are kept on the unit sphere; the inner product is otherwise
// unbounded and the cluster term rewards norm growth.
void project_prototypes(Tensor protos) {
  const std::size_t M = protos.dim(0), D = protos.dim(1);
  auto v = protos.mutable_data();
  for (std::size_t j = 0; j < M; ++j) {
    double ss = 0.0;
    for (std::size_t d = 0; d < D; ++d) ss += v[j * D + d] * v[j * D + d];
    const double n = std::sqrt(ss);
    if (n > 0.0)
      for (std::size_t d = 0; d < D; ++d) v[j * D + d] /= n;
  }
}

double accuracy(const model::PrototypeNet& net, const std::vector<data::AnnotatedImage>& images) {
  if (images.empty()) return 0.0;
  const auto pred = model::predict(net, images);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < images.size(); ++i) correct += pred[i] == images[i].label;
  return static_cast<double>(correct) / static_cast<double>(images.size());
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (warmup_epochs < 0 || warmup_epochs > epochs) throw ConfigError("warmup_epochs must lie in [0, epochs]");
  if (!(lr_backbone > 0 && lr_addon > 0 && lr_prototypes > 0 && lr_head > 0))
    throw ConfigError("learning rates must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (fc_finetune_steps < 0) throw ConfigError("fc_finetune_steps must be >= 0");
  weights.validate();
}

std::string TrainConfig::to_json() const {
  json j;
  j["epochs"] = epochs;
  j["warmup_epochs"] = warmup_epochs;
  j["lr_backbone"] = lr_backbone;
  j["lr_addon"] = lr_addon;
  j["lr_prototypes"] = lr_prototypes;
  j["lr_head"] = lr_head;
  j["batch_size"] = batch_size;
  j["seed"] = seed;
  j["lambda_clst"] = weights.clst;
  j["lambda_sep"] = weights.sep;
  j["lambda_ortho"] = weights.ortho;
  j["lambda_align"] = weights.align;
  j["gamma"] = weights.gamma;
  j["head"] = model::head_name(head);
  j["sdfa"] = sdfa;
  j["freeze_backbone_in_warmup"] = freeze_backbone_in_warmup;
  j["fc_finetune_steps"] = fc_finetune_steps;
  j["architecture"] = json::parse(architecture.to_json());
  return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  TrainConfig c;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "epochs") c.epochs = value.get<int>();
      else if (key == "warmup_epochs") c.warmup_epochs = value.get<int>();
      else if (key == "lr_backbone") c.lr_backbone = value.get<double>();
      else if (key == "lr_addon") c.lr_addon = value.get<double>();
      else if (key == "lr_prototypes") c.lr_prototypes = value.get<double>();
      else if (key == "lr_head") c.lr_head = value.get<double>();
      else if (key == "batch_size") c.batch_size = value.get<int>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "lambda_clst") c.weights.clst = value.get<double>();
      else if (key == "lambda_sep") c.weights.sep = value.get<double>();
      else if (key == "lambda_ortho") c.weights.ortho = value.get<double>();
      else if (key == "lambda_align") c.weights.align = value.get<double>();
      else if (key == "gamma") c.weights.gamma = value.get<double>();
      else if (key == "head") c.head = model::parse_head(value.get<std::string>());
      else if (key == "sdfa") c.sdfa = value.get<bool>();
      else if (key == "freeze_backbone_in_warmup") c.freeze_backbone_in_warmup = value.get<bool>();
      else if (key == "fc_finetune_steps") c.fc_finetune_steps = value.get<int>();
      else if (key == "architecture") {
        // Partial objects override the defaults.
        if (!value.is_object()) throw ConfigError("architecture must be a JSON object");
        json merged = json::parse(c.architecture.to_json());
        for (const auto& [k, v] : value.items()) {
          if (!merged.contains(k)) throw ConfigError("unknown architecture key '" + k + "'");
          merged[k] = v;
        }
        c.architecture = model::ModelConfig::from_json(merged.dump());
      }
      else throw ConfigError("unknown train config key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid train config: ") + e.what());
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
  c.validate();
  return c;
}

std::string format_log_row(const EpochLog& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%d,%.10g,%.10g,%.10g,%.10g,%.10g,%.6f", r.epoch, r.loss_ce, r.loss_clst,
                r.loss_sep, r.loss_ortho, r.loss_align, r.test_acc);
  return buf;
}

model::ModelConfig resolve_architecture(const data::Dataset& dataset, const TrainConfig& config) {
  model::ModelConfig m = config.architecture;
  m.image_size = dataset.image_size();
  m.num_classes = dataset.num_classes();
  m.head = config.head;
  m.seed = config.seed;
  return m;
}

TrainResult train(const data::Dataset& dataset, const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  if (dataset.train().empty()) throw DataError("training split is empty");
  TrainResult result{model::PrototypeNet(resolve_architecture(dataset, config)), {}, {}, {}};
  auto& net = result.model;

  const auto backbone = net.backbone_parameters();
  AdamState opt_backbone(backbone, {.lr = config.lr_backbone});
  AdamState opt_addon(net.addon_parameters(), {.lr = config.lr_addon});
  AdamState opt_protos(net.prototype_parameters(), {.lr = config.lr_prototypes});
  AdamState opt_head(net.head_parameters(), {.lr = config.lr_head});
  std::vector<AdamState*> always{&opt_addon, &opt_protos, &opt_head};

  const auto& images = dataset.train();
  const auto B = static_cast<std::size_t>(config.batch_size);
  const Rng shuffle_rng = Rng(config.seed).split(0x747261696e);
  std::uint64_t step = 0;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const bool warmup = epoch <= config.warmup_epochs && config.freeze_backbone_in_warmup;
    set_trainable(backbone, !warmup);

    const auto order = dataset.shuffled(data::Split::Train, shuffle_rng.split(static_cast<std::uint64_t>(epoch))());
    EpochLog row;
    row.epoch = epoch;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += B) {
      const std::size_t end = std::min(order.size(), start + B);
      std::vector<const Tensor*> px;
      std::vector<int> labels;
      for (std::size_t i = start; i < end; ++i) {
        px.push_back(&images[order[i]].pixels);
        labels.push_back(images[order[i]].label);
      }
      const auto fwd = net.forward(model::normalize_batch(px));
      auto terms = losses::total_loss(fwd, labels, net.bank(), config.weights, config.sdfa);
      const double total = terms.total.item();
      if (!std::isfinite(total))
        throw NumericError("training diverged: non-finite loss at step " + std::to_string(step) + " (epoch " +
                           std::to_string(epoch) + ")");
      terms.total.backward();
      for (auto* opt : always) opt->step();
      if (!warmup) opt_backbone.step();
      project_prototypes(net.bank().vectors);
      for (auto* opt : always) opt->zero_grad();
      opt_backbone.zero_grad();

      double align = 0.0;
      if (terms.align.defined()) {
        align = terms.align.item();
      } else {
        NoGradGuard ng;
        align = losses::align_loss(fwd.features.shallow, fwd.features.deep, config.weights.gamma).item();
      }
      row.loss_ce += terms.ce.item();
      row.loss_clst += terms.clst.item();
      row.loss_sep += terms.sep.item();
      row.loss_ortho += terms.ortho.item();
      row.loss_align += align;
      ++batches;
      ++step;
    }
    const double n = static_cast<double>(batches);
    row.loss_ce /= n;
    row.loss_clst /= n;
    row.loss_sep /= n;
    row.loss_ortho /= n;
    row.loss_align /= n;
    row.test_acc = accuracy(net, dataset.test());
    result.checkpoints.push_back(net.checkpoint_bytes());
    result.log.push_back(row);
    if (on_epoch) on_epoch(row);
  }
  set_trainable(backbone, true);
  if (config.head == model::HeadKind::FC && config.fc_finetune_steps > 0)
    result.finetune = finetune_fc_last_layer(net, dataset, config.fc_finetune_steps);
  return result;
}

void write_training_outputs(const TrainResult& result, const TrainConfig& config, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
  for (std::size_t e = 0; e < result.checkpoints.size(); ++e) {
    char name[32];
    std::snprintf(name, sizeof name, "epoch_%02zu.ckpt", e + 1);
    std::ofstream out(dir / name, std::ios::binary);
    out.write(reinterpret_cast<const char*>(result.checkpoints[e].data()),
              static_cast<std::streamsize>(result.checkpoints[e].size()));
    if (!out) throw DataError("failed to write " + (dir / name).string());
  }
  result.model.save(dir / "final.ckpt");
  std::ofstream log(dir / "train_log.csv");
  log << kTrainLogHeader << '\n';
  for (const auto& row : result.log) log << format_log_row(row) << '\n';
  std::ofstream cfg(dir / "train_config.json");
  json echo;
  echo["tool_version"] = PPBENCH_VERSION;
  echo["config"] = json::parse(config.to_json());
  echo["config"]["architecture"] = json::parse(result.model.config().to_json());
  if (result.finetune) {
    const auto& f = *result.finetune;
    echo["fc_finetune"] = {{"objective_before", f.objective.front()},
                           {"objective_after", f.objective.back()},
                           {"negative_on_class", f.negative_on_class}};
  }
  cfg << echo.dump(2) << '\n';
  if (!log || !cfg) throw DataError("failed to write training outputs under " + dir.string());
}

int count_negative_on_class(const model::PrototypeNet& net) {
  const auto& w = net.fc_head().weights;
  const auto& a = net.allocation();
  const auto M = static_cast<std::size_t>(a.size());
  int count = 0;
  for (std::size_t j = 0; j < M; ++j) {
    const auto k = static_cast<std::size_t>(a.class_of(static_cast<int>(j)));
    count += w.data()[k * M + j] < 0.0;
  }
  return count;
}

FinetuneResult finetune_fc_last_layer(model::PrototypeNet& net, const data::Dataset& dataset, int steps,
                                      double initial_step) {
  if (net.head_kind() != model::HeadKind::FC) throw ConfigError("last-layer fine-tuning needs an FC head");
  if (steps < 0) throw ConfigError("steps must be >= 0");
  if (!(initial_step > 0)) throw ConfigError("initial step size must be positive");
  const auto& images = dataset.train();
  if (images.empty()) throw DataError("training split is empty");
  const auto& alloc = net.allocation();

  // Features are fixed: compute g once.
  Tensor g;
  std::vector<int> labels;
  {
    NoGradGuard ng;
    FreezeParameters frozen;
    std::vector<double> rows;
    for (std::size_t start = 0; start < images.size(); start += 32) {
      const std::size_t end = std::min(images.size(), start + 32);
      std::vector<const Tensor*> px;
      for (std::size_t i = start; i < end; ++i) {
        px.push_back(&images[i].pixels);
        labels.push_back(images[i].label);
      }
      const auto v = net.forward(model::normalize_batch(px)).activations.values;
      rows.insert(rows.end(), v.data().begin(), v.data().end());
    }
    g = Tensor::from({images.size(), static_cast<std::size_t>(alloc.size())}, std::move(rows));
  }

  Tensor w_param = net.fc_head().weights;
  const Shape shape = w_param.shape();
  std::vector<double> w(w_param.data().begin(), w_param.data().end());
  const auto M = static_cast<std::size_t>(alloc.size());
  auto off_class = [&](std::size_t idx) { return alloc.class_of(static_cast<int>(idx % M)) != static_cast<int>(idx / M); };

  auto objective = [&](const std::vector<double>& wv, std::vector<double>* grad) {
    const Tensor wt = Tensor::from(shape, wv);
    const auto obj = losses::fc_convex_objective(model::fc_logits(g, {wt}), labels, {wt}, alloc);
    if (grad) {
      // Gradient of the smooth (cross-entropy) part only.
      Tensor ws = Tensor::from(shape, wv, true);
      const auto ce = ops::cross_entropy_logits(model::fc_logits(g, {ws}), labels);
      ce.backward();
      grad->assign(ws.grad().begin(), ws.grad().end());
    }
    return obj.item();
  };

  FinetuneResult result;
  double step_size = initial_step;
  std::vector<double> grad, trial(w.size());
  double current = objective(w, nullptr);
  for (int s = 0; s < steps; ++s) {
    result.objective.push_back(current);
    objective(w, &grad);
    if (!std::isfinite(current)) throw NumericError("fine-tuning diverged at step " + std::to_string(s));
    bool accepted = false;
    for (int tries = 0; tries < 60 && !accepted; ++tries) {
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double z = w[i] - step_size * grad[i];
        trial[i] = off_class(i) ? std::copysign(std::max(std::abs(z) - step_size, 0.0), z) : z;
      }
      const double value = objective(trial, nullptr);
      if (value <= current) {
        w.swap(trial);
        current = value;
        accepted = true;
      } else {
        step_size *= 0.5;
      }
    }
    if (!accepted) break;  // at a stationary point within precision
    step_size = std::min(step_size * 2.0, initial_step);
  }
  result.objective.push_back(current);
  std::copy(w.begin(), w.end(), w_param.mutable_data().begin());
  result.negative_on_class = count_negative_on_class(net);
  return result;
}

}  // namespace ppb::train
