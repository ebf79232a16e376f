#include <filesystem>
#include <fstream>
#include <string>

#include "doctest.h"
#include "ppbench/errors.hpp"
#include "ppbench/losses.hpp"
#include "ppbench/ops.hpp"
#include "ppbench/trainer.hpp"

using namespace ppb;

namespace {

const data::Dataset& tiny_dataset() {
  static const data::Dataset ds = [] {
    data::GeneratorConfig g;
    g.num_classes = 3;
    g.num_parts = 3;
    g.train_per_class = 6;
    g.test_per_class = 3;
    g.image_size = 32;
    g.seed = 5;
    return data::Dataset::from_generated(data::generate_images(g));
  }();
  return ds;
}

train::TrainConfig tiny_config() {
  train::TrainConfig c;
  c.epochs = 2;
  c.warmup_epochs = 1;
  c.batch_size = 6;
  c.seed = 3;
  c.architecture.protos_per_class = 2;
  c.architecture.proto_dim = 8;
  c.architecture.channels = {4, 6, 8};
  c.fc_finetune_steps = 0;
  return c;
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

double off_class_l1(const model::PrototypeNet& net) {
  return losses::off_class_l1(net.fc_head(), net.allocation()).item();
}

}  // namespace

TEST_CASE("zero epochs return the initialised model") {
  auto cfg = tiny_config();
  cfg.epochs = 0;
  cfg.warmup_epochs = 0;
  const auto result = train::train(tiny_dataset(), cfg);
  const model::PrototypeNet fresh(train::resolve_architecture(tiny_dataset(), cfg));
  CHECK(result.model.checkpoint_bytes() == fresh.checkpoint_bytes());
  CHECK(result.checkpoints.empty());
  CHECK(result.log.empty());
}

TEST_CASE("training is deterministic and logs one row per epoch") {
  const auto a = train::train(tiny_dataset(), tiny_config());
  const auto b = train::train(tiny_dataset(), tiny_config());
  CHECK(a.model.checkpoint_bytes() == b.model.checkpoint_bytes());
  REQUIRE(a.checkpoints.size() == 2u);
  CHECK(a.checkpoints.back() == a.model.checkpoint_bytes());
  REQUIRE(a.log.size() == 2u);
  for (std::size_t e = 0; e < a.log.size(); ++e) {
    CHECK(a.log[e].epoch == static_cast<int>(e) + 1);
    CHECK(a.log[e].test_acc >= 0.0);
    CHECK(a.log[e].test_acc <= 1.0);
  }
  auto other = tiny_config();
  other.seed = 4;
  CHECK(train::train(tiny_dataset(), other).model.checkpoint_bytes() != a.model.checkpoint_bytes());
}

TEST_CASE("warm-up leaves the backbone untouched and the joint phase updates it") {
  auto cfg = tiny_config();
  const model::PrototypeNet fresh(train::resolve_architecture(tiny_dataset(), cfg));
  const auto result = train::train(tiny_dataset(), cfg);
  const auto after_warmup = model::PrototypeNet::from_checkpoint_bytes(result.checkpoints[0]);
  const auto after_joint = model::PrototypeNet::from_checkpoint_bytes(result.checkpoints[1]);
  const auto b0 = fresh.backbone_parameters();
  const auto b1 = after_warmup.backbone_parameters();
  const auto b2 = after_joint.backbone_parameters();
  bool joint_changed = false;
  for (std::size_t i = 0; i < b0.size(); ++i) {
    CHECK(values(b0[i]) == values(b1[i]));
    joint_changed = joint_changed || values(b1[i]) != values(b2[i]);
  }
  CHECK(joint_changed);
  CHECK(values(fresh.bank().vectors) != values(after_warmup.bank().vectors));
}

TEST_CASE("divergence is reported with the step index") {
  auto cfg = tiny_config();
  cfg.lr_addon = 1e308;
  cfg.lr_prototypes = 1e308;
  cfg.lr_head = 1e308;
  try {
    (void)train::train(tiny_dataset(), cfg);
    FAIL("expected a NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("step") != std::string::npos);
  }
}

TEST_CASE("train config validation and JSON round trip") {
  auto cfg = tiny_config();
  cfg.warmup_epochs = 3;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.lr_head = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.head = model::HeadKind::FC;
  cfg.sdfa = false;
  const auto back = train::TrainConfig::from_json(cfg.to_json());
  CHECK(back.to_json() == cfg.to_json());
  CHECK_THROWS_AS(train::TrainConfig::from_json(R"({"epochz": 3})"), ConfigError);
  CHECK_THROWS_AS(train::TrainConfig::from_json("[1]"), ConfigError);
}

TEST_CASE("training outputs on disk") {
  const auto dir = std::filesystem::temp_directory_path() / "ppbench_trainer_out";
  std::filesystem::remove_all(dir);
  const auto cfg = tiny_config();
  const auto result = train::train(tiny_dataset(), cfg);
  train::write_training_outputs(result, cfg, dir);
  CHECK(std::filesystem::exists(dir / "epoch_01.ckpt"));
  CHECK(std::filesystem::exists(dir / "epoch_02.ckpt"));
  CHECK(model::PrototypeNet::load(dir / "final.ckpt").checkpoint_bytes() == result.model.checkpoint_bytes());
  std::ifstream log(dir / "train_log.csv");
  std::string header, row;
  std::getline(log, header);
  CHECK(header == "epoch,loss_ce,loss_clst,loss_sep,loss_ortho,loss_align,test_acc");
  std::getline(log, row);
  CHECK(row.rfind("1,", 0) == 0);
  std::filesystem::remove_all(dir);
}

TEST_CASE("FC last-layer fine-tuning") {
  auto cfg = tiny_config();
  cfg.head = model::HeadKind::FC;
  auto result = train::train(tiny_dataset(), cfg);
  auto& net = result.model;
  const auto before = values(net.fc_head().weights);
  const auto none = train::finetune_fc_last_layer(net, tiny_dataset(), 0);
  CHECK(values(net.fc_head().weights) == before);
  CHECK(none.objective.size() == 1u);

  const auto backbone_before = values(net.backbone_parameters()[0]);
  const double l1_before = off_class_l1(net);
  const auto run = train::finetune_fc_last_layer(net, tiny_dataset(), 50);
  for (std::size_t i = 1; i < run.objective.size(); ++i) CHECK(run.objective[i] <= run.objective[i - 1]);
  CHECK(run.objective.back() < run.objective.front());
  CHECK(off_class_l1(net) < l1_before);
  CHECK(values(net.backbone_parameters()[0]) == backbone_before);
  CHECK(run.negative_on_class == train::count_negative_on_class(net));

  auto sa = train::train(tiny_dataset(), tiny_config()).model;
  CHECK_THROWS_AS(train::finetune_fc_last_layer(sa, tiny_dataset(), 1), ConfigError);
}

TEST_CASE("training an FC head runs the fine-tune after the last epoch") {
  auto cfg = tiny_config();
  cfg.head = model::HeadKind::FC;
  cfg.fc_finetune_steps = 5;
  const auto result = train::train(tiny_dataset(), cfg);
  REQUIRE(result.finetune.has_value());
  CHECK(result.finetune->objective.size() == 6u);
  CHECK(result.finetune->negative_on_class == train::count_negative_on_class(result.model));
  CHECK(result.checkpoints.back() != result.model.checkpoint_bytes());

  cfg.fc_finetune_steps = 0;
  CHECK_FALSE(train::train(tiny_dataset(), cfg).finetune.has_value());
  CHECK_FALSE(train::train(tiny_dataset(), tiny_config()).finetune.has_value());
}

TEST_CASE("fine-tuning can flip on-class weights negative on adversarial activations") {
  // Two classes, two prototypes each. Prototype 1 (class 0) fires strongly on class-1
  // images and weakly on class-0 images, so the convex objective prefers a negative
  // on-class weight for it. Reported as an observation of the optimiser.
  const Tensor g = Tensor::from({4, 4}, {1.0, 0.0, 0.1, 0.1,   //
                                         0.9, 0.1, 0.0, 0.2,   //
                                         0.1, 1.0, 1.0, 0.0,   //
                                         0.0, 0.9, 0.8, 0.1});
  const int labels[] = {0, 0, 1, 1};
  Tensor w = Tensor::from({2, 4}, {1, 1, -0.5, -0.5, -0.5, -0.5, 1, 1}, true);
  const model::PrototypeAllocation alloc{2, 2};
  for (int step = 0; step < 300; ++step) {
    w.zero_grad();
    const auto obj = losses::fc_convex_objective(model::fc_logits(g, {w}), labels, {w}, alloc);
    obj.backward();
    auto d = w.mutable_data();
    for (std::size_t i = 0; i < 8; ++i) d[i] -= 0.05 * w.grad()[i];
  }
  MESSAGE("on-class weight of prototype 1 after optimisation: " << w.at({0, 1}));
  CHECK(w.at({0, 1}) < 0.0);
}
