// ppbench command-line front end. Talks to the library only through the C API.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "ppbench/ppbench.h"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

// Carries a status code to main; the message is the one-line diagnostic.
struct Failure : std::runtime_error {
  Failure(int code, const std::string& message) : std::runtime_error(message), code(code) {}
  int code;
};

void check(ppb_status s) {
  if (s != PPB_OK) throw Failure(s, ppb_last_error());
}

struct CString {
  char* p = nullptr;
  ~CString() { ppb_string_free(p); }
  [[nodiscard]] std::string str() const { return p ? p : ""; }
};

struct DatasetDeleter {
  void operator()(ppb_dataset* d) const { ppb_dataset_free(d); }
};
struct ModelDeleter {
  void operator()(ppb_model* m) const { ppb_model_free(m); }
};
struct TrainingDeleter {
  void operator()(ppb_training* t) const { ppb_training_free(t); }
};
using Dataset = std::unique_ptr<ppb_dataset, DatasetDeleter>;
using Model = std::unique_ptr<ppb_model, ModelDeleter>;
using Training = std::unique_ptr<ppb_training, TrainingDeleter>;

Dataset load_dataset(const std::string& path) {
  ppb_dataset* d = nullptr;
  check(ppb_dataset_load(path.c_str(), &d));
  return Dataset(d);
}

Model load_model(const std::string& path) {
  ppb_model* m = nullptr;
  check(ppb_model_load(path.c_str(), &m));
  return Model(m);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Failure(PPB_ERR_DATA, "cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
  const fs::path p(path);
  if (p.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(p.parent_path(), ec);
  }
  std::ofstream out(p, std::ios::binary);
  out << text;
  if (!out) throw Failure(PPB_ERR_DATA, "cannot write " + path);
}

json parse_config_file(const std::string& path) {
  try {
    auto j = json::parse(read_file(path));
    if (!j.is_object()) throw Failure(PPB_ERR_CONFIG, path + ": config must be a JSON object");
    return j;
  } catch (const json::exception& e) {
    throw Failure(PPB_ERR_CONFIG, path + ": " + e.what());
  }
}

// ---- gen-data

struct GenArgs {
  std::string out;
  std::uint64_t seed = 0;
  int classes = 8, parts = 5, train_per_class = 100, test_per_class = 30, image_size = 64;
  double occlusion = 0.1;
};

void run_gen(const GenArgs& a) {
  json cfg{{"num_classes", a.classes},         {"num_parts", a.parts},       {"train_per_class", a.train_per_class},
           {"test_per_class", a.test_per_class}, {"image_size", a.image_size}, {"seed", a.seed},
           {"occlusion_prob", a.occlusion}};
  CString manifest;
  check(ppb_generate_dataset(cfg.dump().c_str(), a.out.c_str(), &manifest.p));
  std::cout << manifest.str() << '\n';
}

// ---- train

struct TrainArgs {
  std::string dataset, out, config, head, sdfa;
  std::uint64_t seed = 0;
  bool seed_given = false;
  int epochs = -1, warmup = -1, finetune_steps = -1;
  bool quiet = false;
};

void run_train(const TrainArgs& a) {
  json cfg = a.config.empty() ? json::object() : parse_config_file(a.config);
  if (a.seed_given) cfg["seed"] = a.seed;
  if (!a.head.empty()) cfg["head"] = a.head;
  if (!a.sdfa.empty()) cfg["sdfa"] = a.sdfa == "on";
  if (a.epochs >= 0) cfg["epochs"] = a.epochs;
  if (a.warmup >= 0) cfg["warmup_epochs"] = a.warmup;
  if (a.finetune_steps >= 0) cfg["fc_finetune_steps"] = a.finetune_steps;
  // A shortened run keeps warm-up within the epoch budget unless set explicitly.
  if (a.epochs >= 0 && a.warmup < 0 && !cfg.contains("warmup_epochs"))
    cfg["warmup_epochs"] = std::min(a.epochs, 5);

  const auto dataset = load_dataset(a.dataset);
  if (!a.quiet) std::cout << ppb_train_log_header() << '\n';
  auto progress = [](const char* row, void* user) {
    if (!*static_cast<bool*>(user)) std::cout << row << std::endl;
  };
  bool quiet = a.quiet;
  ppb_training* t = nullptr;
  check(ppb_train(dataset.get(), cfg.dump().c_str(), progress, &quiet, &t));
  Training training(t);
  check(ppb_training_write(training.get(), a.out.c_str()));
  std::cout << (fs::path(a.out) / "final.ckpt").string() << '\n';
}

// ---- eval

struct EvalArgs {
  std::string dataset, checkpoint, out, csv;
  std::vector<std::string> noise;
  double sigma = 0.2, eps = 0.1, mu = 0.8, box_ratio = 0.321;
  double alpha = -1;
  int pgd_steps = 10, threads = 1;
  std::uint64_t seed = 0;
};

std::string eval_options(const EvalArgs& a) {
  json noises = json::array();
  std::vector<std::string> kinds = a.noise.empty() ? std::vector<std::string>{"gauss", "pgd"} : a.noise;
  for (const auto& k : kinds) {
    json n{{"kind", k}, {"seed", a.seed}};
    if (k == "gauss") n["sigma"] = a.sigma;
    else {
      n["eps"] = a.eps;
      if (a.alpha >= 0) n["alpha"] = a.alpha;
      n["steps"] = a.pgd_steps;
    }
    noises.push_back(n);
  }
  return json{{"mu", a.mu}, {"box_ratio", a.box_ratio}, {"threads", a.threads}, {"noises", noises}}.dump();
}

std::string summary_text(const json& r) {
  std::ostringstream o;
  char buf[160];
  const auto& model = r["config"]["model"];
  std::snprintf(buf, sizeof buf, "head %s  seed %s  prototypes %d x %d\n",
                model["head"].get<std::string>().c_str(), model["seed"].dump().c_str(),
                model["num_classes"].get<int>(), model["protos_per_class"].get<int>());
  o << buf;
  std::snprintf(buf, sizeof buf, "accuracy          %6.2f%%\n", 100.0 * r["test_accuracy"].get<double>());
  o << buf;
  std::snprintf(buf, sizeof buf, "consistency       %6.2f%%  (%d undefined prototypes)\n",
                100.0 * r["consistency"]["score"].get<double>(), r["consistency"]["undefined_prototypes"].get<int>());
  o << buf;
  for (const auto& s : r["stability"]) {
    std::snprintf(buf, sizeof buf, "stability (%-5s)  %6.2f%%\n", s["noise"]["kind"].get<std::string>().c_str(),
                  100.0 * s["score"].get<double>());
    o << buf;
  }
  std::snprintf(buf, sizeof buf, "sdfa similarity   %.4f\n", r["sdfa_similarity"].get<double>());
  o << buf;
  std::snprintf(buf, sizeof buf, "similar (>= %.2f)  %.3f per prototype\n",
                r["cross_class_similar"]["threshold"].get<double>(), r["cross_class_similar"]["mean"].get<double>());
  o << buf;
  if (!r["fc_negative_on_class"].is_null())
    o << "negative on-class weights  " << r["fc_negative_on_class"].get<int>() << '\n';
  return o.str();
}

void run_eval(const EvalArgs& a) {
  const auto dataset = load_dataset(a.dataset);
  const auto model = load_model(a.checkpoint);
  CString report, row;
  check(ppb_evaluate(model.get(), dataset.get(), eval_options(a).c_str(), &report.p, &row.p));
  if (!a.out.empty()) write_file(a.out, report.str() + "\n");
  if (!a.csv.empty()) write_file(a.csv, std::string(ppb_report_csv_header()) + "\n" + row.str() + "\n");
  std::cout << summary_text(json::parse(report.str()));
}

// ---- trend

struct TrendArgs {
  std::string dataset, run, out;
  double mu = 0.8, box_ratio = 0.321;
  int threads = 1;
};

void run_trend(const TrendArgs& a) {
  std::vector<std::string> paths;
  std::error_code ec;
  for (const auto& e : fs::directory_iterator(a.run, ec)) {
    const auto name = e.path().filename().string();
    if (name.rfind("epoch_", 0) == 0 && e.path().extension() == ".ckpt") paths.push_back(e.path().string());
  }
  if (ec) throw Failure(PPB_ERR_DATA, "cannot list " + a.run + ": " + ec.message());
  if (paths.empty()) throw Failure(PPB_ERR_DATA, "no epoch_*.ckpt files under " + a.run);
  std::sort(paths.begin(), paths.end());
  std::vector<const char*> c_paths;
  for (const auto& p : paths) c_paths.push_back(p.c_str());
  const auto dataset = load_dataset(a.dataset);
  const json options{{"mu", a.mu}, {"box_ratio", a.box_ratio}, {"threads", a.threads}};
  CString series;
  check(ppb_consistency_series(c_paths.data(), c_paths.size(), dataset.get(), options.dump().c_str(), &series.p));
  std::string csv = "epoch,con\n";
  const auto values = json::parse(series.str());
  for (std::size_t i = 0; i < values.size(); ++i) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%zu,%.6f\n", i + 1, values[i].get<double>());
    csv += buf;
  }
  if (!a.out.empty()) write_file(a.out, csv);
  std::cout << csv;
}

// ---- report

struct ReportArgs {
  std::vector<std::string> reports;
  std::string out;
};

void run_report(const ReportArgs& a) {
  std::vector<std::string> texts;
  for (const auto& p : a.reports) texts.push_back(read_file(p));
  std::vector<const char*> c_texts, c_sources;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    c_texts.push_back(texts[i].c_str());
    c_sources.push_back(a.reports[i].c_str());
  }
  CString csv, text;
  check(ppb_report_table(c_texts.data(), c_sources.data(), c_texts.size(), &csv.p, &text.p));
  if (!a.out.empty()) write_file(a.out, csv.str());
  std::cout << text.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Part-prototype interpretability benchmark"};
  app.set_version_flag("--version", ppb_version());
  app.require_subcommand(1, 1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "Generate the synthetic part-annotated dataset");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--seed", gen.seed, "Generator seed");
  g->add_option("--classes", gen.classes, "Number of classes");
  g->add_option("--parts", gen.parts, "Parts per object");
  g->add_option("--train-per-class", gen.train_per_class, "Training images per class");
  g->add_option("--test-per-class", gen.test_per_class, "Test images per class");
  g->add_option("--image-size", gen.image_size, "Image side in pixels");
  g->add_option("--occlusion", gen.occlusion, "Per-part occlusion probability");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a prototype network");
  t->add_option("--dataset", tr.dataset, "Dataset manifest")->required();
  t->add_option("--out", tr.out, "Run directory")->required();
  t->add_option("--config", tr.config, "Training config JSON; flags override its fields");
  t->add_option("--seed", tr.seed, "Training seed")->each([&](const std::string&) { tr.seed_given = true; });
  t->add_option("--head", tr.head, "Classification head")->check(CLI::IsMember({"sa", "fc"}));
  t->add_option("--sdfa", tr.sdfa, "Shallow-deep feature alignment")->check(CLI::IsMember({"on", "off"}));
  t->add_option("--epochs", tr.epochs, "Total epochs")->check(CLI::NonNegativeNumber);
  t->add_option("--warmup-epochs", tr.warmup, "Warm-up epochs")->check(CLI::NonNegativeNumber);
  t->add_option("--finetune-steps", tr.finetune_steps, "FC last-layer fine-tuning steps")
      ->check(CLI::NonNegativeNumber);
  t->add_flag("--quiet", tr.quiet, "Do not print the per-epoch log");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint");
  e->add_option("--dataset", ev.dataset, "Dataset manifest")->required();
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  e->add_option("--out", ev.out, "Write the JSON report here");
  e->add_option("--csv", ev.csv, "Write the flat CSV row here");
  e->add_option("--noise", ev.noise, "Noise kind; repeat for several (default: gauss and pgd)")
      ->check(CLI::IsMember({"gauss", "pgd"}))
      ->expected(1)
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  e->add_option("--sigma", ev.sigma, "Gaussian noise standard deviation");
  e->add_option("--eps", ev.eps, "PGD radius (L-inf)");
  e->add_option("--alpha", ev.alpha, "PGD step size (default eps/4)");
  e->add_option("--pgd-steps", ev.pgd_steps, "PGD iterations");
  e->add_option("--mu", ev.mu, "Consistency threshold");
  e->add_option("--box-ratio", ev.box_ratio, "Box side as a fraction of the image side");
  e->add_option("--seed", ev.seed, "Noise seed");
  e->add_option("--threads", ev.threads, "Worker threads")->check(CLI::PositiveNumber);

  TrendArgs tn;
  auto* n = app.add_subcommand("trend", "Consistency of every epoch checkpoint of a run");
  n->add_option("--dataset", tn.dataset, "Dataset manifest")->required();
  n->add_option("--run", tn.run, "Run directory written by train")->required();
  n->add_option("--out", tn.out, "Write the CSV here");
  n->add_option("--mu", tn.mu, "Consistency threshold");
  n->add_option("--box-ratio", tn.box_ratio, "Box side as a fraction of the image side");
  n->add_option("--threads", tn.threads, "Worker threads")->check(CLI::PositiveNumber);

  ReportArgs rp;
  auto* r = app.add_subcommand("report", "Benchmark table over evaluation reports");
  r->add_option("reports", rp.reports, "Report JSON files")->required();
  r->add_option("--out", rp.out, "Write the CSV table here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForVersion& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return PPB_ERR_CONFIG;
  }

  try {
    if (*g) run_gen(gen);
    else if (*t) run_train(tr);
    else if (*e) run_eval(ev);
    else if (*n) run_trend(tn);
    else if (*r) run_report(rp);
  } catch (const Failure& f) {
    std::cerr << "error: " << f.what() << '\n';
    return f.code;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return PPB_ERR_INTERNAL;
  }
  return 0;
}
