#pragma once

// Configuration trees. Files are a TOML subset (sections, dotted keys, strings,
// numbers, booleans, arrays) or JSON; both become the same nlohmann::json tree,
// which then maps onto a StudyPlan.

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "mkv/error.hpp"
#include "mkv/experiments.hpp"
#include "mkv/io.hpp"

namespace mkv {

namespace toml {

class Parser {
 public:
  explicit Parser(std::string_view text) : s_(text) {}

  nlohmann::json parse() {
    nlohmann::json root = nlohmann::json::object();
    nlohmann::json* table = &root;
    while (true) {
      skip_blank_lines();
      if (eof()) break;
      if (peek() == '[') {
        get();
        if (peek() == '[') fail("arrays of tables are not supported");
        skip_ws();
        const auto path = key_path();
        skip_ws();
        expect(']');
        table = &root;
        for (const auto& k : path) {
          auto& next = (*table)[k];
          if (next.is_null()) next = nlohmann::json::object();
          if (!next.is_object()) fail("key '" + k + "' is not a table");
          table = &next;
        }
      } else {
        const std::size_t kl = line_, kc = col_;
        const auto path = key_path();
        skip_ws();
        expect('=');
        skip_ws();
        auto value = parse_value();
        nlohmann::json* t = table;
        for (std::size_t i = 0; i + 1 < path.size(); ++i) {
          auto& next = (*t)[path[i]];
          if (next.is_null()) next = nlohmann::json::object();
          if (!next.is_object()) throw ParseError("key '" + path[i] + "' is not a table", kl, kc);
          t = &next;
        }
        if (t->contains(path.back())) throw ParseError("duplicate key '" + path.back() + "'", kl, kc);
        (*t)[path.back()] = std::move(value);
      }
      end_of_line();
    }
    return root;
  }

  /// A single value, for --set overrides.
  nlohmann::json parse_single_value() {
    skip_ws();
    auto v = parse_value();
    skip_ws();
    if (!eof()) fail("unexpected trailing characters");
    return v;
  }

 private:
  std::string_view s_;
  std::size_t pos_ = 0, line_ = 1, col_ = 1;

  bool eof() const { return pos_ >= s_.size(); }
  char peek() const { return eof() ? '\0' : s_[pos_]; }
  char get() {
    const char c = s_[pos_++];
    if (c == '\n') {
      ++line_;
      col_ = 1;
    } else {
      ++col_;
    }
    return c;
  }
  [[noreturn]] void fail(const std::string& what) const { throw ParseError(what, line_, col_); }
  void expect(char c) {
    if (peek() != c) fail(std::string("expected '") + c + "'");
    get();
  }
  void skip_ws() {
    while (!eof() && (peek() == ' ' || peek() == '\t')) get();
  }
  void skip_comment() {
    if (peek() == '#')
      while (!eof() && peek() != '\n') get();
  }
  void skip_blank_lines() {
    while (!eof()) {
      skip_ws();
      skip_comment();
      if (peek() == '\r') get();
      if (peek() == '\n') get();
      else break;
    }
  }
  void end_of_line() {
    skip_ws();
    skip_comment();
    if (peek() == '\r') get();
    if (eof()) return;
    if (peek() != '\n') fail("expected end of line");
    get();
  }
  void skip_ws_nl() {
    while (true) {
      skip_ws();
      skip_comment();
      if (peek() == '\r' || peek() == '\n') get();
      else break;
    }
  }

  static bool bare_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-'; }

  std::vector<std::string> key_path() {
    std::vector<std::string> path;
    while (true) {
      skip_ws();
      if (peek() == '"') {
        path.push_back(parse_string());
      } else {
        std::string k;
        while (!eof() && bare_char(peek())) k += get();
        if (k.empty()) fail("expected a key");
        path.push_back(k);
      }
      skip_ws();
      if (peek() != '.') break;
      get();
    }
    return path;
  }

  std::string parse_string() {
    expect('"');
    std::string out;
    while (true) {
      if (eof() || peek() == '\n') fail("unterminated string");
      const char c = get();
      if (c == '"') break;
      if (c == '\\') {
        if (eof()) fail("unterminated escape");
        const char e = get();
        switch (e) {
          case 'n': out += '\n'; break;
          case 't': out += '\t'; break;
          case 'r': out += '\r'; break;
          case '"': out += '"'; break;
          case '\\': out += '\\'; break;
          default: fail(std::string("unknown escape \\") + e);
        }
      } else {
        out += c;
      }
    }
    return out;
  }

  nlohmann::json parse_value() {
    const char c = peek();
    if (c == '"') return parse_string();
    if (c == '[') return parse_array();
    if (s_.substr(pos_, 4) == "true" && (pos_ + 4 >= s_.size() || !bare_char(s_[pos_ + 4]))) {
      for (int k = 0; k < 4; ++k) get();
      return true;
    }
    if (s_.substr(pos_, 5) == "false" && (pos_ + 5 >= s_.size() || !bare_char(s_[pos_ + 5]))) {
      for (int k = 0; k < 5; ++k) get();
      return false;
    }
    return parse_number();
  }

  nlohmann::json parse_array() {
    expect('[');
    nlohmann::json arr = nlohmann::json::array();
    skip_ws_nl();
    if (peek() == ']') {
      get();
      return arr;
    }
    while (true) {
      skip_ws_nl();
      arr.push_back(parse_value());
      skip_ws_nl();
      if (peek() == ',') {
        get();
        skip_ws_nl();
        if (peek() == ']') {
          get();
          return arr;
        }
        continue;
      }
      if (peek() == ']') {
        get();
        return arr;
      }
      fail("expected ',' or ']' in array");
    }
  }

  nlohmann::json parse_number() {
    const std::size_t l = line_, c = col_;
    std::string tok;
    while (!eof() && (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '+' || peek() == '-' ||
                      peek() == '.' || peek() == '_'))
      tok += get();
    if (tok.empty()) throw ParseError("expected a value", l, c);
    std::string clean;
    for (char ch : tok)
      if (ch != '_') clean += ch;
    if (clean == "inf" || clean == "+inf") return std::numeric_limits<double>::infinity();
    const bool integral = clean.find_first_of(".eE") == std::string::npos;
    try {
      std::size_t used = 0;
      if (integral) {
        if (clean[0] == '-') {
          const long long v = std::stoll(clean, &used);
          if (used == clean.size()) return v;
        } else {
          const unsigned long long v = std::stoull(clean[0] == '+' ? clean.substr(1) : clean, &used);
          if (used == clean.size() - (clean[0] == '+' ? 1 : 0)) return v;
        }
      } else {
        const double v = std::stod(clean, &used);
        if (used == clean.size()) return v;
      }
    } catch (const std::exception&) {
    }
    throw ParseError("invalid value '" + tok + "'", l, c);
  }
};

}  // namespace toml

/// Line and column (1-based) of a byte offset.
inline std::pair<std::size_t, std::size_t> line_col(std::string_view text, std::size_t offset) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < offset && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

/// Parses TOML-subset or JSON text (JSON when the first significant character is '{').
inline nlohmann::json parse_config_text(std::string_view text) {
  std::size_t first = 0;
  while (first < text.size() && std::isspace(static_cast<unsigned char>(text[first]))) ++first;
  if (first < text.size() && text[first] == '{') {
    try {
      return nlohmann::json::parse(text.begin(), text.end());
    } catch (const nlohmann::json::parse_error& e) {
      const auto [l, c] = line_col(text, e.byte > 0 ? e.byte - 1 : 0);
      throw ParseError(std::string("invalid JSON: ") + e.what(), l, c);
    }
  }
  return toml::Parser(text).parse();
}

inline nlohmann::json load_config_file(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw ConfigurationError("cannot open config file " + p.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config_text(ss.str());
}

/// Applies key=value with a dotted key; the value uses the config value syntax
/// and falls back to a bare string.
inline void apply_override(nlohmann::json& tree, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) throw ConfigurationError("override must be key=value: " + std::string(assignment));
  const std::string key(assignment.substr(0, eq));
  const std::string raw(assignment.substr(eq + 1));
  nlohmann::json value;
  try {
    value = toml::Parser(raw).parse_single_value();
  } catch (const ParseError&) {
    value = raw;
  }
  nlohmann::json* t = &tree;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigurationError("empty key segment in override " + key);
    if (dot == std::string::npos) {
      (*t)[part] = value;
      break;
    }
    auto& next = (*t)[part];
    if (next.is_null()) next = nlohmann::json::object();
    if (!next.is_object()) throw ConfigurationError("override key " + key + " descends into a non-table");
    t = &next;
    start = dot + 1;
  }
}

namespace detail {

template <class T>
T get_as(const nlohmann::json& j, const std::string& key) {
  try {
    return j.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigurationError("config field '" + key + "' has the wrong type");
  }
}

inline void check_keys(const nlohmann::json& obj, const std::string& section, std::initializer_list<std::string_view> allowed) {
  if (!obj.is_object()) throw ConfigurationError("config section '" + section + "' must be a table");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (auto a : allowed) ok = ok || it.key() == a;
    if (!ok) throw ConfigurationError("unknown config key '" + (section.empty() ? "" : section + ".") + it.key() + "'");
  }
}

inline MollifyMode mode_from_string(const std::string& s) {
  if (s == "closed_form_biot_savart" || s == "closed_form") return MollifyMode::closed_form_biot_savart;
  if (s == "quadrature") return MollifyMode::quadrature;
  if (s == "radial_table") return MollifyMode::radial_table;
  throw ConfigurationError("unknown mollification mode '" + s + "'");
}

inline InitialLaw::Kind kind_from_string(const std::string& s) {
  if (s == "point_mass") return InitialLaw::Kind::point_mass;
  if (s == "gaussian") return InitialLaw::Kind::gaussian;
  if (s == "uniform_ball") return InitialLaw::Kind::uniform_ball;
  if (s == "empirical") return InitialLaw::Kind::empirical;
  throw ConfigurationError("unknown initial law '" + s + "'");
}

}  // namespace detail

/// Maps a config tree onto a plan. Relative sample paths resolve against base_dir.
inline StudyPlan plan_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  using detail::get_as;
  detail::check_keys(j, "", {"study", "simulation", "kernel", "initial", "tree", "sweep", "estimators", "tolerances"});
  StudyPlan plan;
  if (j.contains("study")) plan.id = get_as<std::string>(j["study"], "study");
  SimulationConfig& c = plan.base;
  if (j.contains("simulation")) {
    const auto& s = j["simulation"];
    detail::check_keys(s, "simulation", {"N", "n", "dt", "T", "d", "seed", "stride", "summation", "self_interaction",
                                         "noise_scale", "noise_substeps", "workers"});
    if (s.contains("N")) c.N = get_as<std::size_t>(s["N"], "simulation.N");
    if (s.contains("n")) c.n = get_as<double>(s["n"], "simulation.n");
    if (s.contains("dt")) c.dt = get_as<double>(s["dt"], "simulation.dt");
    if (s.contains("T")) c.T = get_as<double>(s["T"], "simulation.T");
    if (s.contains("d")) c.d = get_as<int>(s["d"], "simulation.d");
    if (s.contains("seed")) c.seed = get_as<std::uint64_t>(s["seed"], "simulation.seed");
    if (s.contains("stride")) c.stride = get_as<std::size_t>(s["stride"], "simulation.stride");
    if (s.contains("summation")) {
      const auto v = get_as<std::string>(s["summation"], "simulation.summation");
      if (v == "direct") c.summation = Summation::direct;
      else if (v == "tree") c.summation = Summation::tree;
      else throw ConfigurationError("simulation.summation must be direct or tree");
    }
    if (s.contains("self_interaction")) {
      const auto v = get_as<std::string>(s["self_interaction"], "simulation.self_interaction");
      if (v == "exclude") c.self_interaction = SelfInteraction::exclude;
      else if (v == "include") c.self_interaction = SelfInteraction::include;
      else throw ConfigurationError("simulation.self_interaction must be exclude or include");
    }
    if (s.contains("noise_scale")) c.noise_scale = get_as<double>(s["noise_scale"], "simulation.noise_scale");
    if (s.contains("noise_substeps")) c.noise_substeps = get_as<unsigned>(s["noise_substeps"], "simulation.noise_substeps");
    if (s.contains("workers")) c.workers = get_as<unsigned>(s["workers"], "simulation.workers");
  }
  if (j.contains("tree")) {
    const auto& t = j["tree"];
    detail::check_keys(t, "tree", {"theta", "leaf_size", "order"});
    if (t.contains("theta")) c.tree.theta = get_as<double>(t["theta"], "tree.theta");
    if (t.contains("leaf_size")) c.tree.leaf_size = get_as<std::size_t>(t["leaf_size"], "tree.leaf_size");
    if (t.contains("order")) c.tree.order = get_as<int>(t["order"], "tree.order");
  }
  if (j.contains("kernel")) {
    const auto& k = j["kernel"];
    detail::check_keys(k, "kernel", {"id", "exponent", "value", "sign", "p", "q", "mollified", "mode", "resolution"});
    if (k.contains("id")) c.kernel.id = get_as<std::string>(k["id"], "kernel.id");
    if (k.contains("exponent")) c.kernel.exponent = get_as<double>(k["exponent"], "kernel.exponent");
    if (k.contains("value")) c.kernel.value = get_as<std::vector<double>>(k["value"], "kernel.value");
    if (k.contains("sign")) c.kernel.sign = get_as<double>(k["sign"], "kernel.sign");
    if (k.contains("p")) c.kernel.exponents.p = get_as<double>(k["p"], "kernel.p");
    if (k.contains("q")) c.kernel.exponents.q = get_as<double>(k["q"], "kernel.q");
    if (k.contains("mollified")) c.kernel.mollified = get_as<bool>(k["mollified"], "kernel.mollified");
    if (k.contains("mode")) {
      const auto m = get_as<std::string>(k["mode"], "kernel.mode");
      if (m != "auto") c.kernel.mode = detail::mode_from_string(m);
    }
    if (k.contains("resolution")) c.kernel.resolution = get_as<std::size_t>(k["resolution"], "kernel.resolution");
  }
  if (j.contains("initial")) {
    const auto& i = j["initial"];
    detail::check_keys(i, "initial", {"kind", "center", "covariance", "radius", "path"});
    if (i.contains("kind")) c.initial.kind = detail::kind_from_string(get_as<std::string>(i["kind"], "initial.kind"));
    if (i.contains("center")) c.initial.center = get_as<std::vector<double>>(i["center"], "initial.center");
    if (i.contains("covariance")) c.initial.covariance = get_as<std::vector<double>>(i["covariance"], "initial.covariance");
    if (i.contains("radius")) c.initial.radius = get_as<double>(i["radius"], "initial.radius");
    if (i.contains("path")) {
      c.initial.path = get_as<std::string>(i["path"], "initial.path");
      std::filesystem::path p(c.initial.path);
      if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
      if (c.initial.kind == InitialLaw::Kind::empirical) c.initial.samples = load_samples(p, c.d);
    }
  }
  if (j.contains("sweep")) {
    const auto& s = j["sweep"];
    detail::check_keys(s, "sweep", {"N", "n", "dt", "seeds"});
    if (s.contains("N")) plan.N_list = get_as<std::vector<std::size_t>>(s["N"], "sweep.N");
    if (s.contains("n")) plan.n_list = get_as<std::vector<double>>(s["n"], "sweep.n");
    if (s.contains("dt")) plan.dt_list = get_as<std::vector<double>>(s["dt"], "sweep.dt");
    if (s.contains("seeds")) plan.seeds = get_as<std::vector<std::uint64_t>>(s["seeds"], "sweep.seeds");
  }
  if (j.contains("estimators")) {
    const auto& e = j["estimators"];
    detail::check_keys(e, "estimators", {"list"});
    if (e.contains("list")) plan.estimators = get_as<std::vector<std::string>>(e["list"], "estimators.list");
  }
  if (j.contains("tolerances")) {
    const auto& t = j["tolerances"];
    if (!t.is_object()) throw ConfigurationError("config section 'tolerances' must be a table");
    for (auto it = t.begin(); it != t.end(); ++it) plan.tolerances[it.key()] = get_as<double>(it.value(), "tolerances." + it.key());
  }
  c.validate();
  return plan;
}

/// Full tree for a plan, every field explicit; plan_from_json(plan_to_json(p)) == p.
inline nlohmann::json plan_to_json(const StudyPlan& plan) {
  const SimulationConfig& c = plan.base;
  nlohmann::json j;
  j["study"] = plan.id;
  j["simulation"] = {{"N", c.N},
                     {"n", c.n},
                     {"dt", c.dt},
                     {"T", c.T},
                     {"d", c.d},
                     {"seed", c.seed},
                     {"stride", c.stride},
                     {"summation", to_string(c.summation)},
                     {"self_interaction", to_string(c.self_interaction)},
                     {"noise_scale", c.noise_scale},
                     {"noise_substeps", c.noise_substeps},
                     {"workers", c.workers}};
  j["tree"] = {{"theta", c.tree.theta}, {"leaf_size", c.tree.leaf_size}, {"order", c.tree.order}};
  j["kernel"] = {{"id", c.kernel.id},
                 {"exponent", c.kernel.exponent},
                 {"value", c.kernel.value},
                 {"sign", c.kernel.sign},
                 {"p", c.kernel.exponents.p},
                 {"q", c.kernel.exponents.q},
                 {"mollified", c.kernel.mollified},
                 {"mode", c.kernel.mode ? to_string(*c.kernel.mode) : std::string("auto")},
                 {"resolution", c.kernel.resolution}};
  j["initial"] = {{"kind", to_string(c.initial.kind)},
                  {"center", c.initial.center},
                  {"covariance", c.initial.covariance},
                  {"radius", c.initial.radius}};
  if (!c.initial.path.empty()) j["initial"]["path"] = c.initial.path;
  j["sweep"] = {{"N", plan.N_list}, {"n", plan.n_list}, {"dt", plan.dt_list}, {"seeds", plan.seeds}};
  j["estimators"] = {{"list", plan.estimators}};
  j["tolerances"] = nlohmann::json::object();
  for (const auto& [k, v] : plan.tolerances) j["tolerances"][k] = v;
  return j;
}

}  // namespace mkv
