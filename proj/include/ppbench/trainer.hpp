#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ppbench/losses.hpp"
#include "ppbench/model.hpp"
#include "ppbench/synthdata.hpp"

namespace ppb::train {

struct TrainConfig {
  int epochs = 12;
  int warmup_epochs = 5;
  double lr_backbone = 1e-4;
  double lr_addon = 3e-3;
  double lr_prototypes = 3e-3;
  double lr_head = 3e-3;
  int batch_size = 16;
  std::uint64_t seed = 0;
  losses::LossWeights weights;
  model::HeadKind head = model::HeadKind::SA;
  bool sdfa = true;
  bool freeze_backbone_in_warmup = true;
  /// Last-layer fine-tuning steps run after joint training (FC head only).
  int fc_finetune_steps = 100;
  /// Architecture knobs; image_size, num_classes, head and seed are filled in
  /// from the dataset and this config.
  model::ModelConfig architecture;

  void validate() const;
  [[nodiscard]] std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
};

struct EpochLog {
  int epoch = 0;  // 1-based
  double loss_ce = 0, loss_clst = 0, loss_sep = 0, loss_ortho = 0, loss_align = 0;
  double test_acc = 0;
};

inline constexpr const char* kTrainLogHeader = "epoch,loss_ce,loss_clst,loss_sep,loss_ortho,loss_align,test_acc";
std::string format_log_row(const EpochLog& row);

struct FinetuneResult {
  std::vector<double> objective;  // value before each step, plus the final value
  int negative_on_class = 0;      // on-class weights below zero after optimisation
};

struct TrainResult {
  model::PrototypeNet model;
  std::vector<std::vector<std::uint8_t>> checkpoints;  // one per epoch, in order
  std::vector<EpochLog> log;
  std::optional<FinetuneResult> finetune;  // set for an FC head with fc_finetune_steps > 0
};

model::ModelConfig resolve_architecture(const data::Dataset& dataset, const TrainConfig& config);

using EpochCallback = std::function<void(const EpochLog&)>;

/// Warm-up epochs update add-on, prototypes and head (backbone frozen); the
/// remaining epochs update everything with per-group learning rates.
/// Throws NumericError naming the step if the loss becomes non-finite. An FC
/// head is then fine-tuned with finetune_fc_last_layer; the per-epoch
/// checkpoints precede that step, `model` follows it.
TrainResult train(const data::Dataset& dataset, const TrainConfig& config, const EpochCallback& on_epoch = {});

/// Writes epoch_XX.ckpt, final.ckpt, train_log.csv and train_config.json under `dir`.
void write_training_outputs(const TrainResult& result, const TrainConfig& config, const std::filesystem::path& dir);

/// Optimises only w_h of an FC-head model under L_ce + sum |off-class w_h|,
/// with the rest of the network frozen. Full-batch proximal gradient descent
/// with backtracking, so the objective never increases.
FinetuneResult finetune_fc_last_layer(model::PrototypeNet& net, const data::Dataset& dataset, int steps,
                                      double initial_step = 1.0);

int count_negative_on_class(const model::PrototypeNet& net);

}  // namespace ppb::train
