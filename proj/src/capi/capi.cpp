#include "ppbench/ppbench.h"

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <new>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "ppbench/errors.hpp"
#include "ppbench/metrics.hpp"
#include "ppbench/report.hpp"
#include "ppbench/synthdata.hpp"
#include "ppbench/trainer.hpp"

using namespace ppb;
using json = nlohmann::ordered_json;

struct ppb_dataset {
  data::Dataset dataset;
  std::string path;
};

struct ppb_model {
  model::PrototypeNet net;
  std::string training_config;  // JSON, empty when unknown
};

struct ppb_training {
  train::TrainConfig config;
  train::TrainResult result;
};

namespace {

thread_local std::string g_last_error;

template <typename F>
ppb_status guarded(F&& f) {
  g_last_error.clear();
  try {
    f();
    return PPB_OK;
  } catch (const NumericError& e) {
    g_last_error = e.what();
    return PPB_ERR_NUMERIC;
  } catch (const DataError& e) {
    g_last_error = e.what();
    return PPB_ERR_DATA;
  } catch (const ConfigError& e) {
    g_last_error = e.what();
    return PPB_ERR_CONFIG;
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return PPB_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return PPB_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown error";
    return PPB_ERR_INTERNAL;
  }
}

void require(const void* p, const char* what) {
  if (p == nullptr) throw ConfigError(std::string(what) + " must not be NULL");
}

std::string config_text(const char* json_text) {
  return json_text == nullptr || *json_text == '\0' ? std::string("{}") : std::string(json_text);
}

char* dup(const std::string& s) {
  auto* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out == nullptr) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

std::string read_training_echo(const std::filesystem::path& checkpoint) {
  const auto path = checkpoint.parent_path() / "train_config.json";
  std::ifstream in(path);
  if (!in) return {};
  try {
    const auto j = json::parse(in);
    return j.at("config").dump();
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": malformed training echo: " + e.what());
  }
}

}  // namespace

extern "C" {

const char* ppb_version(void) { return PPBENCH_VERSION; }

const char* ppb_last_error(void) { return g_last_error.c_str(); }

void ppb_string_free(char* s) { std::free(s); }

ppb_status ppb_generate_dataset(const char* config_json, const char* dir, char** manifest_path) {
  return guarded([&] {
    require(dir, "dir");
    const auto config = data::generator_config_from_json(config_text(config_json));
    const auto path = data::generate(config, dir);
    if (manifest_path != nullptr) *manifest_path = dup(path.string());
  });
}

ppb_status ppb_dataset_load(const char* manifest_path, ppb_dataset** out) {
  return guarded([&] {
    require(manifest_path, "manifest_path");
    require(out, "out");
    *out = new ppb_dataset{data::Dataset::load(manifest_path), manifest_path};
  });
}

void ppb_dataset_free(ppb_dataset* dataset) { delete dataset; }

ppb_status ppb_dataset_info(const ppb_dataset* dataset, char** info_json) {
  return guarded([&] {
    require(dataset, "dataset");
    require(info_json, "info_json");
    const auto& d = dataset->dataset;
    json j = json::parse(data::generator_config_to_json(d.config()));
    j["train_images"] = d.train().size();
    j["test_images"] = d.test().size();
    j["path"] = dataset->path;
    *info_json = dup(j.dump());
  });
}

const char* ppb_train_log_header(void) { return train::kTrainLogHeader; }

ppb_status ppb_train(const ppb_dataset* dataset, const char* config_json, ppb_progress_fn progress, void* user,
                     ppb_training** out) {
  return guarded([&] {
    require(dataset, "dataset");
    require(out, "out");
    const auto config = train::TrainConfig::from_json(config_text(config_json));
    train::EpochCallback cb;
    if (progress != nullptr)
      cb = [&](const train::EpochLog& row) { progress(train::format_log_row(row).c_str(), user); };
    auto result = train::train(dataset->dataset, config, cb);
    *out = new ppb_training{config, std::move(result)};
  });
}

ppb_status ppb_training_write(const ppb_training* training, const char* dir) {
  return guarded([&] {
    require(training, "training");
    require(dir, "dir");
    train::write_training_outputs(training->result, training->config, dir);
  });
}

ppb_status ppb_training_model(const ppb_training* training, ppb_model** out) {
  return guarded([&] {
    require(training, "training");
    require(out, "out");
    auto net = model::PrototypeNet::from_checkpoint_bytes(training->result.model.checkpoint_bytes());
    *out = new ppb_model{std::move(net), training->config.to_json()};
  });
}

void ppb_training_free(ppb_training* training) { delete training; }

ppb_status ppb_model_load(const char* checkpoint_path, ppb_model** out) {
  return guarded([&] {
    require(checkpoint_path, "checkpoint_path");
    require(out, "out");
    auto net = model::PrototypeNet::load(checkpoint_path);
    *out = new ppb_model{std::move(net), read_training_echo(checkpoint_path)};
  });
}

ppb_status ppb_model_save(const ppb_model* model, const char* checkpoint_path) {
  return guarded([&] {
    require(model, "model");
    require(checkpoint_path, "checkpoint_path");
    model->net.save(checkpoint_path);
  });
}

ppb_status ppb_model_config(const ppb_model* model, char** config_json) {
  return guarded([&] {
    require(model, "model");
    require(config_json, "config_json");
    *config_json = dup(model->net.config().to_json());
  });
}

void ppb_model_free(ppb_model* model) { delete model; }

ppb_status ppb_predict(const ppb_model* model, const ppb_dataset* dataset, int test_split, int* labels,
                       size_t capacity, size_t* count) {
  return guarded([&] {
    require(model, "model");
    require(dataset, "dataset");
    const auto& images = dataset->dataset.split(test_split ? data::Split::Test : data::Split::Train);
    if (count != nullptr) *count = images.size();
    if (labels == nullptr) return;
    if (capacity < images.size())
      throw ConfigError("label buffer holds " + std::to_string(capacity) + " entries, " +
                        std::to_string(images.size()) + " needed");
    const auto pred = model::predict(model->net, images);
    std::copy(pred.begin(), pred.end(), labels);
  });
}

const char* ppb_report_csv_header(void) {
  static const std::string header = metrics::MetricsReport::csv_header();
  return header.c_str();
}

ppb_status ppb_evaluate(const ppb_model* model, const ppb_dataset* dataset, const char* options_json,
                        char** report_json, char** csv_row) {
  return guarded([&] {
    require(model, "model");
    require(dataset, "dataset");
    require(report_json, "report_json");
    const auto options = metrics::EvalOptions::from_json(config_text(options_json));
    auto report = metrics::evaluate(model->net, dataset->dataset, options);
    report.dataset_path = dataset->path;
    report.training_config = model->training_config;
    std::string text = report.to_json();
    std::string row = csv_row != nullptr ? report.csv_row() : std::string();
    *report_json = dup(text);
    if (csv_row != nullptr) *csv_row = dup(row);
  });
}

ppb_status ppb_consistency_series(const char* const* checkpoint_paths, size_t count, const ppb_dataset* dataset,
                                  const char* options_json, char** series_json) {
  return guarded([&] {
    require(dataset, "dataset");
    require(series_json, "series_json");
    if (count > 0) require(checkpoint_paths, "checkpoint_paths");
    auto options = metrics::EvalOptions::from_json(config_text(options_json));
    options.settings.box = metrics::BoxSize::from_ratio(options.box_ratio, dataset->dataset.image_size());
    std::vector<std::vector<std::uint8_t>> checkpoints;
    for (size_t i = 0; i < count; ++i) {
      require(checkpoint_paths[i], "checkpoint path");
      checkpoints.push_back(model::PrototypeNet::load(checkpoint_paths[i]).checkpoint_bytes());
    }
    const auto series = metrics::consistency_over_checkpoints(checkpoints, dataset->dataset, options.settings);
    *series_json = dup(json(series).dump());
  });
}

ppb_status ppb_report_table(const char* const* report_jsons, const char* const* sources, size_t count,
                            char** table_csv, char** table_text) {
  return guarded([&] {
    if (count == 0) throw ConfigError("no reports given");
    require(report_jsons, "report_jsons");
    std::vector<report::RunSummary> runs;
    for (size_t i = 0; i < count; ++i) {
      require(report_jsons[i], "report");
      const std::string source = sources != nullptr && sources[i] != nullptr ? sources[i] : "report " + std::to_string(i);
      runs.push_back(report::summarize(report_jsons[i], source));
    }
    const auto rows = report::aggregate(runs);
    std::string csv = report::table_csv(rows), text = report::table_text(rows);
    if (table_csv != nullptr) *table_csv = dup(csv);
    if (table_text != nullptr) *table_text = dup(text);
  });
}

}  // extern "C"
