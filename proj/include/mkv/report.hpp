#pragma once

// Tolerance rows shared by studies, the CLI and the acceptance runner:
// CSV with RFC-4180 quoting and a JSON summary.

#include <cmath>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

namespace mkv {

struct ReportRow {
  std::string estimator;
  std::string params;
  double value = 0.0;
  double stderr_ = 0.0;
  double bound = std::nan("");
  double ratio = std::nan("");
  bool asserted = false;
  bool pass = true;
};

struct Report {
  std::string study;
  std::vector<ReportRow> rows;
  nlohmann::json extra = nlohmann::json::object();

  ReportRow& add(ReportRow r) {
    rows.push_back(std::move(r));
    return rows.back();
  }
  /// Adds an asserted row; pass is decided by the caller's comparison.
  ReportRow& check(std::string estimator, std::string params, double value, double bound, bool pass,
                   double se = 0.0) {
    ReportRow r;
    r.estimator = std::move(estimator);
    r.params = std::move(params);
    r.value = value;
    r.stderr_ = se;
    r.bound = bound;
    r.ratio = bound != 0.0 && std::isfinite(bound) ? value / bound : std::nan("");
    r.asserted = true;
    r.pass = pass;
    return add(std::move(r));
  }
  bool pass() const {
    for (const auto& r : rows)
      if (r.asserted && !r.pass) return false;
    return true;
  }
  std::vector<const ReportRow*> failures() const {
    std::vector<const ReportRow*> out;
    for (const auto& r : rows)
      if (r.asserted && !r.pass) out.push_back(&r);
    return out;
  }
};

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

inline std::string csv_number(double v) {
  if (std::isnan(v)) return "";
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

inline void write_csv(std::ostream& os, const Report& rep) {
  os << "study,estimator,params,value,stderr,bound,ratio,asserted,pass\r\n";
  for (const auto& r : rep.rows)
    os << csv_field(rep.study) << ',' << csv_field(r.estimator) << ',' << csv_field(r.params) << ','
       << csv_number(r.value) << ',' << csv_number(r.stderr_) << ',' << csv_number(r.bound) << ','
       << csv_number(r.ratio) << ',' << (r.asserted ? "true" : "false") << ',' << (r.pass ? "true" : "false")
       << "\r\n";
}

inline nlohmann::json to_json(const Report& rep) {
  nlohmann::json j;
  j["study"] = rep.study;
  j["pass"] = rep.pass();
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  for (const auto& r : rep.rows)
    j["rows"].push_back({{"estimator", r.estimator},
                         {"params", r.params},
                         {"value", num(r.value)},
                         {"stderr", num(r.stderr_)},
                         {"bound", num(r.bound)},
                         {"ratio", num(r.ratio)},
                         {"asserted", r.asserted},
                         {"pass", r.pass}});
  if (!j.contains("rows")) j["rows"] = nlohmann::json::array();
  j["extra"] = rep.extra;
  return j;
}

}  // namespace mkv
