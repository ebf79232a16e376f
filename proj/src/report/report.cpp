#include "ppbench/report.hpp"

#include <algorithm>
#include <cstdio>
#include <map>

#include "json.hpp"
#include "ppbench/errors.hpp"
#include "ppbench/metrics.hpp"

namespace ppb::report {

using json = nlohmann::ordered_json;

namespace {

constexpr int kSupportedSchema = 1;

int method_rank(const std::string& m) {
  static const char* order[] = {"base", "base+SDFA", "base+SA", "base+SA+SDFA"};
  for (int i = 0; i < 4; ++i)
    if (m == order[i]) return i;
  return 4;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

}  // namespace

RunSummary summarize(const std::string& report_json, const std::string& source) {
  const std::string where = source.empty() ? "report" : source;
  RunSummary r;
  r.source = source;
  try {
    const auto j = json::parse(report_json);
    if (!j.is_object()) throw DataError(where + ": not a JSON object");
    const int schema = j.at("schema_version").get<int>();
    if (schema != kSupportedSchema)
      throw DataError(where + ": unsupported schema_version " + std::to_string(schema));
    const auto& cfg = j.at("config");
    const auto model_cfg = cfg.at("model").dump();
    const auto& training = cfg.at("training");
    r.method = metrics::method_label(model_cfg, training.is_null() ? "" : training.dump());
    r.head = cfg.at("model").at("head").get<std::string>();
    r.seed = cfg.at("model").at("seed").get<std::uint64_t>();
    r.con = j.at("consistency").at("score").get<double>();
    r.acc = j.at("test_accuracy").get<double>();
    for (const auto& s : j.at("stability")) {
      const auto kind = s.at("noise").at("kind").get<std::string>();
      if (kind == "gauss") r.sta_gauss = s.at("score").get<double>();
      else if (kind == "pgd") r.sta_pgd = s.at("score").get<double>();
    }
    r.sdfa_similarity = j.at("sdfa_similarity").get<double>();
    r.cross_class_similar = j.at("cross_class_similar").at("mean").get<double>();
    const auto& neg = j.at("fc_negative_on_class");
    if (!neg.is_null()) r.fc_negative_on_class = neg.get<int>();
  } catch (const json::exception& e) {
    throw DataError(where + ": malformed report: " + e.what());
  } catch (const ConfigError& e) {
    throw DataError(where + ": " + e.what());
  }
  return r;
}

std::vector<TableRow> aggregate(const std::vector<RunSummary>& runs) {
  std::map<std::string, std::vector<const RunSummary*>> groups;
  for (const auto& r : runs) groups[r.method].push_back(&r);
  std::vector<TableRow> rows;
  for (const auto& [method, members] : groups) {
    TableRow t;
    t.method = method;
    t.runs = static_cast<int>(members.size());
    const double n = t.runs;
    bool gauss = true, pgd = true, neg = true;
    double sg = 0, sp = 0, sn = 0;
    for (const auto* r : members) {
      t.con += r->con / n;
      t.acc += r->acc / n;
      t.sdfa_similarity += r->sdfa_similarity / n;
      t.cross_class_similar += r->cross_class_similar / n;
      gauss = gauss && r->sta_gauss.has_value();
      pgd = pgd && r->sta_pgd.has_value();
      neg = neg && r->fc_negative_on_class.has_value();
      if (gauss) sg += *r->sta_gauss / n;
      if (pgd) sp += *r->sta_pgd / n;
      if (neg) sn += *r->fc_negative_on_class / n;
    }
    if (gauss) t.sta_gauss = sg;
    if (pgd) t.sta_pgd = sp;
    if (neg) t.fc_negative_on_class = sn;
    rows.push_back(t);
  }
  std::stable_sort(rows.begin(), rows.end(),
                   [](const TableRow& a, const TableRow& b) { return method_rank(a.method) < method_rank(b.method); });
  return rows;
}

std::string table_csv(const std::vector<TableRow>& rows) {
  auto opt = [](const std::optional<double>& v) { return v ? fmt("%.6f", *v) : std::string(); };
  std::string out = "method,runs,con,sta_gauss,sta_pgd,acc,sdfa_similarity,cross_class_similar,fc_negative_on_class\n";
  for (const auto& r : rows)
    out += r.method + "," + std::to_string(r.runs) + "," + fmt("%.6f", r.con) + "," + opt(r.sta_gauss) + "," +
           opt(r.sta_pgd) + "," + fmt("%.6f", r.acc) + "," + fmt("%.6f", r.sdfa_similarity) + "," +
           fmt("%.6f", r.cross_class_similar) + "," + opt(r.fc_negative_on_class) + "\n";
  return out;
}

std::string table_text(const std::vector<TableRow>& rows) {
  const std::vector<std::string> header{"Method", "Runs", "Con.", "Sta.(gauss)", "Sta.(pgd)", "Acc.", "SDFA sim.",
                                        "Similar", "Neg. on-class"};
  std::vector<std::vector<std::string>> cells{header};
  auto pct = [](const std::optional<double>& v) { return v ? fmt("%.1f", 100.0 * *v) : std::string("-"); };
  for (const auto& r : rows)
    cells.push_back({r.method, std::to_string(r.runs), pct(r.con), pct(r.sta_gauss), pct(r.sta_pgd), pct(r.acc),
                     fmt("%.3f", r.sdfa_similarity), fmt("%.2f", r.cross_class_similar),
                     r.fc_negative_on_class ? fmt("%.2f", *r.fc_negative_on_class) : "-"});
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& row : cells)
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  std::string out;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    for (std::size_t c = 0; c < cells[i].size(); ++c) {
      const auto& v = cells[i][c];
      const std::string pad(width[c] - v.size(), ' ');
      out += c == 0 ? v + pad : "  " + pad + v;
    }
    out += "\n";
    if (i == 0) {
      std::size_t total = 0;
      for (auto w : width) total += w + 2;
      out += std::string(total - 2, '-') + "\n";
    }
  }
  return out;
}

}  // namespace ppb::report
