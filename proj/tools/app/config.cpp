#include "config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "bdl/error.hpp"
#include "bdl/json_util.hpp"

namespace bdl::app {

namespace {

const std::initializer_list<std::string_view> kPipelineKeys = {
    "views",       "n0",       "n_calibration", "calibrate_on_s0", "duplicate_fraction",
    "schedule",    "calibration", "residual",  "residual_arch",   "train_baseline"};

nlohmann::json scalar_to_json(const YAML::Node& node) {
  const std::string& s = node.Scalar();
  if (node.Tag() == "!") return s;
  if (s.empty() || s == "~" || s == "null" || s == "Null" || s == "NULL") return nullptr;
  if (s == "true" || s == "True" || s == "TRUE") return true;
  if (s == "false" || s == "False" || s == "FALSE") return false;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (s.front() != '+') {
    long long i = 0;
    if (auto [p, ec] = std::from_chars(first, last, i); ec == std::errc() && p == last) return i;
    unsigned long long u = 0;
    if (auto [p, ec] = std::from_chars(first, last, u); ec == std::errc() && p == last) return u;
  }
  if (s == ".inf" || s == "+.inf") return HUGE_VAL;
  if (s == "-.inf") return -HUGE_VAL;
  double d = 0.0;
  const char* start = s.front() == '+' ? first + 1 : first;
  if (auto [p, ec] = std::from_chars(start, last, d); ec == std::errc() && p == last) return d;
  return s;
}

nlohmann::json node_to_json(const YAML::Node& node, const std::string& path, LineMap* lines) {
  if (lines && !path.empty()) lines->emplace(path, node.Mark().line + 1);
  switch (node.Type()) {
    case YAML::NodeType::Null:
    case YAML::NodeType::Undefined:
      return nullptr;
    case YAML::NodeType::Scalar:
      return scalar_to_json(node);
    case YAML::NodeType::Sequence: {
      nlohmann::json arr = nlohmann::json::array();
      std::size_t i = 0;
      for (const auto& item : node) arr.push_back(node_to_json(item, path + "[" + std::to_string(i++) + "]", lines));
      return arr;
    }
    case YAML::NodeType::Map: {
      nlohmann::json obj = nlohmann::json::object();
      for (const auto& kv : node) {
        const std::string key = kv.first.as<std::string>();
        if (obj.contains(key)) throw ConfigError((path.empty() ? key : path + "." + key) + ": duplicate key");
        if (lines) lines->emplace(path.empty() ? key : path + "." + key, kv.first.Mark().line + 1);
        obj[key] = node_to_json(kv.second, path.empty() ? key : path + "." + key, lines);
      }
      return obj;
    }
  }
  return nullptr;
}

std::string strip_indices(const std::string& path) {
  std::string out;
  bool skip = false;
  for (char c : path) {
    if (c == '[') skip = true;
    if (!skip) out += c;
    if (c == ']') skip = false;
  }
  return out;
}

// The key path an error message starts with, e.g. "train.lr" in "train.lr: must be positive".
std::string error_path(const std::string& msg) {
  const auto colon = msg.find(": ");
  if (colon == std::string::npos || colon == 0) return {};
  const std::string head = msg.substr(0, colon);
  if (head.find(' ') != std::string::npos) return {};
  return head;
}

std::optional<int> locate(const LineMap& lines, const std::string& key) {
  if (key.empty()) return std::nullopt;
  std::optional<int> suffix_hit;
  for (const auto& [path, line] : lines) {
    const std::string bare = strip_indices(path);
    if (bare == key) return line;
    if (!suffix_hit && bare.size() > key.size() && bare.compare(bare.size() - key.size(), key.size(), key) == 0 &&
        bare[bare.size() - key.size() - 1] == '.')
      suffix_hit = line;
  }
  if (suffix_hit) return suffix_hit;
  // Unknown keys are absent from the defaults but present in the file under their full path.
  const auto dot = key.rfind('.');
  return dot == std::string::npos ? std::nullopt : locate(lines, key.substr(0, dot));
}

// "[json.exception.type_error.302] (/residual/train/lr) type must be ..." -> "residual.train.lr: type must be ..."
std::string describe_json_error(const std::string& section_name, const std::string& what) {
  std::string msg = what;
  if (const auto close = msg.find("] "); msg.rfind("[json.exception", 0) == 0 && close != std::string::npos)
    msg = msg.substr(close + 2);
  std::string path = section_name;
  if (msg.size() > 2 && msg[0] == '(' && msg[1] == '/') {
    const auto end = msg.find(") ");
    if (end != std::string::npos) {
      path.clear();
      std::string seg;
      for (char c : msg.substr(2, end - 2) + "/") {
        if (c != '/') {
          seg += c;
          continue;
        }
        const bool index = !seg.empty() && seg.find_first_not_of("0123456789") == std::string::npos;
        if (!index) path += (path.empty() ? "" : ".") + seg;
        seg.clear();
      }
      msg = msg.substr(end + 2);
    }
  }
  return path + ": " + msg;
}

template <typename F>
auto section(const char* name, F&& body) {
  try {
    return body();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(describe_json_error(name, e.what()));
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    const std::string what = e.what();
    throw ConfigError(error_path(what).empty() ? std::string(name) + ": " + what : what);
  }
}

std::vector<std::string> split_path(const std::string& path) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : path) {
    if (c == '.') {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  parts.push_back(cur);
  return parts;
}

}  // namespace

void ExperimentConfig::validate() const {
  pipeline.validate();
  eval.validate();
  if (sample.count == 0) throw ConfigError("sample.count: must be >= 1");
  if (sample.steps < 1) throw ConfigError("sample.steps: must be >= 1");
  if (sample.denoiser != "combined" && sample.denoiser != "baseline")
    throw ConfigError("sample.denoiser: expected combined or baseline");
  if (kl.options.n_mc == 0) throw ConfigError("kl.n_mc: must be >= 1");
  if (kl.options.t_quadrature < 2) throw ConfigError("kl.t_quadrature: must be >= 2");
  if (bounds.N.empty() || bounds.K.empty()) throw ConfigError("bounds: N and K lists must be non-empty");
  for (long long n : bounds.N)
    if (n < 1) throw ConfigError("bounds.N: entries must be >= 1");
  for (long long k : bounds.K)
    if (k < 1) throw ConfigError("bounds.K: entries must be >= 1");
  if (output_dir.empty()) throw ConfigError("output_dir: must not be empty");
}

nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json j = to_json(c.pipeline);
  j["spec"] = to_json(c.spec);
  j["eval"] = to_json(c.eval);
  j["kl"] = {{"enabled", c.kl.enabled},
             {"n_mc", c.kl.options.n_mc},
             {"t_quadrature", c.kl.options.t_quadrature},
             {"seed", c.kl.options.seed},
             {"stream", c.kl.options.stream},
             {"refine_tolerance", c.kl.options.refine_tolerance}};
  j["sample"] = {{"count", c.sample.count},
                 {"steps", c.sample.steps},
                 {"stochastic", c.sample.stochastic},
                 {"denoiser", c.sample.denoiser},
                 {"seed", c.sample.seed}};
  j["bounds"] = {{"inputs", to_json(c.bounds.inputs)},
                 {"cover", to_json(c.bounds.cover)},
                 {"N", c.bounds.N},
                 {"K", c.bounds.K},
                 {"context", to_string(c.bounds.context)}};
  j["output_dir"] = c.output_dir;
  return j;
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config: expected a mapping at the top level");
  std::vector<std::string_view> allowed(kPipelineKeys.begin(), kPipelineKeys.end());
  for (std::string_view k : {"seed", "spec", "eval", "kl", "sample", "bounds", "output_dir"}) allowed.push_back(k);
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    for (auto a : allowed) known = known || a == key;
    if (!known) throw ConfigError(key + ": unknown key");
  }

  ExperimentConfig c;
  if (j.contains("spec")) c.spec = section("spec", [&] { return synthetic_spec_params_from_json(j.at("spec")); });
  c.pipeline = section("pipeline", [&] {
    nlohmann::json pj = nlohmann::json::object();
    for (auto k : kPipelineKeys)
      if (j.contains(k)) pj[std::string(k)] = j.at(std::string(k));
    if (j.contains("seed")) pj["seed"] = j.at("seed");
    return pipeline_config_from_json(pj);
  });
  if (j.contains("eval")) c.eval = section("eval", [&] { return eval_options_from_json(j.at("eval")); });
  if (j.contains("kl")) {
    c.kl = section("kl", [&] {
      const auto& jk = j.at("kl");
      require_known_keys(jk, {"enabled", "n_mc", "t_quadrature", "seed", "stream", "refine_tolerance"}, "kl");
      KlSection k;
      k.enabled = jk.value("enabled", k.enabled);
      k.options.n_mc = jk.value("n_mc", k.options.n_mc);
      k.options.t_quadrature = jk.value("t_quadrature", k.options.t_quadrature);
      k.options.seed = jk.value("seed", k.options.seed);
      k.options.stream = jk.value("stream", k.options.stream);
      k.options.refine_tolerance = jk.value("refine_tolerance", k.options.refine_tolerance);
      return k;
    });
  }
  if (j.contains("sample")) {
    c.sample = section("sample", [&] {
      const auto& js = j.at("sample");
      require_known_keys(js, {"count", "steps", "stochastic", "denoiser", "seed"}, "sample");
      SampleSection s;
      s.count = js.value("count", s.count);
      s.steps = js.value("steps", s.steps);
      s.stochastic = js.value("stochastic", s.stochastic);
      s.denoiser = js.value("denoiser", s.denoiser);
      s.seed = js.value("seed", s.seed);
      return s;
    });
  }
  if (j.contains("bounds")) {
    c.bounds = section("bounds", [&] {
      const auto& jb = j.at("bounds");
      require_known_keys(jb, {"inputs", "cover", "N", "K", "context"}, "bounds");
      BoundsSection b;
      if (jb.contains("inputs")) b.inputs = bound_inputs_from_json(jb.at("inputs"));
      if (jb.contains("cover")) b.cover = covering_params_from_json(jb.at("cover"));
      if (jb.contains("N")) b.N = jb.at("N").get<std::vector<long long>>();
      if (jb.contains("K")) b.K = jb.at("K").get<std::vector<long long>>();
      if (jb.contains("context")) b.context = bound_context_from_string(jb.at("context").get<std::string>());
      return b;
    });
  }
  c.output_dir = section("output_dir", [&] { return j.value("output_dir", c.output_dir); });
  c.validate();
  return c;
}

nlohmann::json yaml_to_json(const std::string& text, LineMap* lines) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ConfigError("line " + std::to_string(e.mark.line + 1) + ": " + e.msg);
  }
  return node_to_json(root, "", lines);
}

void apply_overrides(nlohmann::json& j, const std::vector<std::string>& overrides) {
  for (const auto& ov : overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + ov + "': expected key=value");
    const auto parts = split_path(ov.substr(0, eq));
    nlohmann::json value;
    try {
      value = yaml_to_json(ov.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError("override '" + ov + "': " + e.what());
    }
    if (!j.is_object()) j = nlohmann::json::object();
    nlohmann::json* cur = &j;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      const std::string& p = parts[i];
      if (p.empty()) throw ConfigError("override '" + ov + "': empty path segment");
      nlohmann::json* next = nullptr;
      if (cur->is_array()) {
        std::size_t idx = 0;
        auto [ptr, ec] = std::from_chars(p.data(), p.data() + p.size(), idx);
        if (ec != std::errc() || ptr != p.data() + p.size() || idx >= cur->size())
          throw ConfigError("override '" + ov + "': bad list index '" + p + "'");
        next = &(*cur)[idx];
      } else {
        if (cur->is_null()) *cur = nlohmann::json::object();
        if (!cur->is_object()) throw ConfigError("override '" + ov + "': '" + p + "' is not inside a mapping");
        next = &(*cur)[p];
      }
      cur = next;
    }
    *cur = value;
  }
}

ExperimentConfig parse_experiment_config(const std::string& text, const std::string& origin,
                                         const std::vector<std::string>& overrides) {
  LineMap lines;
  nlohmann::json j;
  try {
    j = yaml_to_json(text, &lines);
  } catch (const ConfigError& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  if (j.is_null()) j = nlohmann::json::object();
  apply_overrides(j, overrides);
  try {
    return experiment_config_from_json(j);
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    const auto line = locate(lines, error_path(what));
    throw ConfigError(origin + (line ? ":" + std::to_string(*line) : std::string()) + ": " + what);
  }
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                        const std::vector<std::string>& overrides) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_experiment_config(ss.str(), path.string(), overrides);
}

}  // namespace bdl::app
