#include "cbnlab/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "json.hpp"

#include "cbnlab/diagnostics.hpp"
#include "cbnlab/error.hpp"

namespace cbnlab {

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double to_double(const std::string& s) {
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw FormatError("not a number: " + s);
  return v;
}

using GroupKey = std::vector<std::string>;

void check_file(const std::filesystem::path& agg_path,
                const std::filesystem::path& raw_path,
                const std::vector<std::string>& key_cols, AggregateCheck& out) {
  std::map<GroupKey, std::vector<double>> raw;
  for (const auto& row : read_csv(raw_path)) {
    GroupKey k;
    for (const auto& c : key_cols) k.push_back(row.at(c));
    raw[k].push_back(to_double(row.at("accuracy")));
  }
  for (const auto& row : read_csv(agg_path)) {
    GroupKey k;
    for (const auto& c : key_cols) k.push_back(row.at(c));
    auto it = raw.find(k);
    if (it == raw.end()) {
      throw FormatError("no per-seed rows for an aggregate in " +
                        agg_path.filename().string());
    }
    out.max_abs_error = std::max(
        {out.max_abs_error,
         std::abs(mean_of(it->second) - to_double(row.at("mean_accuracy"))),
         std::abs(std_of(it->second) - to_double(row.at("std_accuracy")))});
    ++out.groups;
  }
}

}  // namespace

std::vector<CsvRow> read_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot read " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw FormatError(path.string() + " is empty");
  const auto header = split_line(line);
  std::vector<CsvRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto fields = split_line(line);
    if (fields.size() != header.size()) {
      throw FormatError(path.string() + ": row has " +
                        std::to_string(fields.size()) + " fields, header " +
                        std::to_string(header.size()));
    }
    CsvRow row;
    for (std::size_t i = 0; i < header.size(); ++i) row[header[i]] = fields[i];
    rows.push_back(std::move(row));
  }
  return rows;
}

AggregateCheck check_report_aggregates(const std::filesystem::path& dir) {
  AggregateCheck out;
  check_file(dir / "sweeps.csv", dir / "sweep_runs.csv",
             {"sweep", "fraction_present"}, out);
  check_file(dir / "ablation.csv", dir / "ablation_runs.csv",
             {"regime", "training_model", "testing_model"}, out);
  return out;
}

void print_report(const std::filesystem::path& dir, std::ostream& os) {
  std::ifstream js(dir / "summary.json");
  if (!js) throw Error("cannot read " + (dir / "summary.json").string());
  const auto summary = nlohmann::json::parse(js);
  os << "seeds:";
  for (const auto& s : summary.at("seeds")) os << ' ' << s.get<std::uint64_t>();
  os << '\n';
  for (const auto& [regime, digest] : summary.at("config_digest").items()) {
    os << "config " << regime << ": " << digest.get<std::string>() << '\n';
  }

  const auto pct = [](const std::string& v) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(1) << 100.0 * to_double(v);
    return s.str();
  };
  const auto ablation = read_csv(dir / "ablation.csv");
  if (!ablation.empty()) {
    os << "\nablation (test accuracy %, mean +- std)\n";
    for (const auto& r : ablation) {
      os << "  " << std::left << std::setw(10) << r.at("regime") << std::setw(14)
         << r.at("training_model") << std::setw(22) << r.at("testing_model")
         << pct(r.at("mean_accuracy")) << " +- " << pct(r.at("std_accuracy"))
         << '\n';
    }
  }
  const auto sweeps = read_csv(dir / "sweeps.csv");
  if (!sweeps.empty()) {
    os << "\nsweeps (fraction present -> accuracy %)\n";
    std::string current;
    for (const auto& r : sweeps) {
      if (r.at("sweep") != current) {
        current = r.at("sweep");
        os << "  " << current << " [" << r.at("mask_mode") << "]\n";
      }
      os << "    " << r.at("fraction_present") << "  " << pct(r.at("mean_accuracy"))
         << " +- " << pct(r.at("std_accuracy")) << '\n';
    }
  }
  const auto conv = read_csv(dir / "convergence.csv");
  if (!conv.empty()) {
    os << "\nconvergence (first epoch at 95% of final)\n";
    for (const auto& r : conv) {
      const auto& e = r.at("epochs_to_threshold");
      os << "  " << std::left << std::setw(10) << r.at("regime") << std::setw(18)
         << r.at("model") << (e.empty() ? "never" : e) << '\n';
    }
  }
  const auto sal = read_csv(dir / "saliency.csv");
  if (!sal.empty()) {
    os << "\nlocalization score\n";
    for (const auto& r : sal) {
      os << "  " << std::left << std::setw(10) << r.at("regime") << std::setw(16)
         << r.at("model") << r.at("mean_score") << " (" << r.at("zero_maps")
         << " empty maps of " << r.at("examples") << ")\n";
    }
  }
}

}  // namespace cbnlab
