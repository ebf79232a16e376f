#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace ppb::report {

/// The headline numbers of one serialised MetricsReport.
struct RunSummary {
  std::string source;  // file name or other caller-chosen label
  std::string method;
  std::string head;
  std::uint64_t seed = 0;
  double con = 0, acc = 0;
  std::optional<double> sta_gauss, sta_pgd;
  double sdfa_similarity = 0;
  double cross_class_similar = 0;
  std::optional<int> fc_negative_on_class;
};

/// Parses a report produced by MetricsReport::to_json. Throws DataError on
/// malformed input or an unsupported schema version.
RunSummary summarize(const std::string& report_json, const std::string& source = "");

/// Mean over the runs of one method.
struct TableRow {
  std::string method;
  int runs = 0;
  double con = 0, acc = 0;
  std::optional<double> sta_gauss, sta_pgd;  // absent if any run lacks it
  double sdfa_similarity = 0;
  double cross_class_similar = 0;
  std::optional<double> fc_negative_on_class;
};

/// Groups runs by method; known methods come first in ablation order, others
/// follow alphabetically.
std::vector<TableRow> aggregate(const std::vector<RunSummary>& runs);

std::string table_csv(const std::vector<TableRow>& rows);
/// Aligned text with scores in percent.
std::string table_text(const std::vector<TableRow>& rows);

}  // namespace ppb::report
