#pragma once

#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <vector>

namespace cbnlab {

using CsvRow = std::map<std::string, std::string>;

// Header-keyed rows of a comma-separated file without quoting.
std::vector<CsvRow> read_csv(const std::filesystem::path& path);

struct AggregateCheck {
  std::size_t groups = 0;
  double max_abs_error = 0.0;
};

// Recomputes every mean/std in sweeps.csv and ablation.csv from the per-seed
// rows beside them.
AggregateCheck check_report_aggregates(const std::filesystem::path& dir);

// Plain-text tables for an emitted report directory.
void print_report(const std::filesystem::path& dir, std::ostream& os);

}  // namespace cbnlab
