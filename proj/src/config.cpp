#include "rml/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "rml/oracle.hpp"

namespace rml {

namespace {

using json = nlohmann::json;

void reject_unknown(const json& j, const std::string& where, const std::set<std::string>& allowed) {
  if (!j.is_object()) throw ConfigError(where, "expected an object");
  for (const auto& item : j.items()) {
    if (!allowed.contains(item.key())) throw ConfigError(where + "." + item.key(), "unknown key");
  }
}

const json& require(const json& j, const std::string& where, const std::string& key) {
  if (!j.contains(key)) throw ConfigError(where + "." + key, "missing");
  return j.at(key);
}

double number(const json& j, const std::string& key) {
  if (!j.is_number()) throw ConfigError(key, "expected a number");
  return j.get<double>();
}

std::uint64_t count(const json& j, const std::string& key) {
  if (!j.is_number_integer() || j.get<std::int64_t>() < 0) throw ConfigError(key, "expected a non-negative integer");
  return j.get<std::uint64_t>();
}

Vector vector(const json& j, const std::string& key) {
  if (!j.is_array()) throw ConfigError(key, "expected an array of numbers");
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Eigen::Index>(i)] = number(j[i], key);
  return v;
}

Box box(const json& j, const std::string& key) {
  if (!j.is_array() || j.empty()) throw ConfigError(key, "expected a non-empty array of [lower, upper] pairs");
  Vector lo(static_cast<Eigen::Index>(j.size()));
  Vector hi(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_array() || j[i].size() != 2) throw ConfigError(key, "each entry must be [lower, upper]");
    lo[static_cast<Eigen::Index>(i)] = number(j[i][0], key);
    hi[static_cast<Eigen::Index>(i)] = number(j[i][1], key);
  }
  try {
    return Box(lo, hi);
  } catch (const Error& e) {
    throw ConfigError(key, e.what());
  }
}

json box_json(const Box& b) {
  json out = json::array();
  for (std::size_t i = 0; i < b.dim(); ++i) {
    out.push_back({b.lower()[static_cast<Eigen::Index>(i)], b.upper()[static_cast<Eigen::Index>(i)]});
  }
  return out;
}

json vector_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

const std::vector<std::string>& family_names(const std::string& family) {
  if (family == "ar1" || family == "grid_ar1") return ar1_parameter_names();
  if (family == "sv") return sv_parameter_names();
  throw ConfigError("model.family", "unknown family '" + family + "' (expected ar1, sv or grid_ar1)");
}

ModelConfig parse_model(const json& j) {
  reject_unknown(j, "model", {"family", "box", "constants", "free", "theta0", "theta_box", "grid"});
  ModelConfig m;
  const json& fam = require(j, "model", "family");
  if (!fam.is_string()) throw ConfigError("model.family", "expected a string");
  m.family = fam.get<std::string>();
  const auto& names = family_names(m.family);

  const json& b = require(j, "model", "box");
  reject_unknown(b, "model.box", {"state", "obs"});
  m.state_box = box(require(b, "model.box", "state"), "model.box.state");
  m.obs_box = box(require(b, "model.box", "obs"), "model.box.obs");
  if (m.state_box.dim() != 1) throw ConfigError("model.box.state", "shipped families have a scalar state");
  if (m.obs_box.dim() != 1) throw ConfigError("model.box.obs", "shipped families have a scalar observation");

  if (j.contains("constants")) {
    const json& c = j.at("constants");
    if (!c.is_object()) throw ConfigError("model.constants", "expected an object");
    for (const auto& item : c.items()) m.constants[item.key()] = number(item.value(), "model.constants." + item.key());
  }
  const json& f = require(j, "model", "free");
  if (!f.is_array() || f.empty()) throw ConfigError("model.free", "expected a non-empty array of parameter names");
  for (const auto& name : f) {
    if (!name.is_string()) throw ConfigError("model.free", "expected parameter names");
    m.free.push_back(name.get<std::string>());
  }
  // Validates names, duplicates and missing constants.
  ParameterLayout layout(names, m.constants, m.free);

  m.theta0 = vector(require(j, "model", "theta0"), "model.theta0");
  m.theta_box = box(require(j, "model", "theta_box"), "model.theta_box");
  if (static_cast<std::size_t>(m.theta0.size()) != m.free.size()) {
    throw ConfigError("model.theta0", "expected " + std::to_string(m.free.size()) + " entries (one per free parameter)");
  }
  if (m.theta_box.dim() != m.free.size()) {
    throw ConfigError("model.theta_box", "expected " + std::to_string(m.free.size()) + " intervals");
  }
  if (!m.theta_box.contains(m.theta0)) throw ConfigError("model.theta0", "initial parameter lies outside theta_box");

  if (m.family == "grid_ar1") {
    const json& g = require(j, "model", "grid");
    reject_unknown(g, "model.grid", {"points", "atom"});
    m.grid_points = vector(require(g, "model.grid", "points"), "model.grid.points");
    if (g.contains("atom")) m.grid_atom = number(g.at("atom"), "model.grid.atom");
  } else if (j.contains("grid")) {
    throw ConfigError("model.grid", "only valid for family grid_ar1");
  }
  return m;
}

RunConfig parse_json(const json& root, const std::filesystem::path& base_dir) {
  reject_unknown(root, "config", {"model", "smc", "schedule", "io", "simulate", "study"});
  RunConfig c;
  c.model = parse_model(require(root, "config", "model"));
  const std::size_t d = c.model.free.size();

  if (root.contains("smc")) {
    const json& s = root.at("smc");
    reject_unknown(s, "smc", {"particles", "seed"});
    if (s.contains("particles")) c.smc.particles = count(s.at("particles"), "smc.particles");
    if (s.contains("seed")) c.smc.seed = count(s.at("seed"), "smc.seed");
    if (c.smc.particles < 1) throw ConfigError("smc.particles", "must be at least 1");
  }
  if (root.contains("schedule")) {
    const json& s = root.at("schedule");
    reject_unknown(s, "schedule", {"a0", "a", "n0"});
    if (s.contains("a0")) c.schedule.a0 = number(s.at("a0"), "schedule.a0");
    if (s.contains("a")) c.schedule.a = number(s.at("a"), "schedule.a");
    if (s.contains("n0")) c.schedule.n0 = count(s.at("n0"), "schedule.n0");
  }
  try {
    (void)c.step_schedule();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError("schedule", e.what());
  }
  if (root.contains("io")) {
    const json& s = root.at("io");
    reject_unknown(s, "io", {"observations", "output"});
    auto path = [&](const char* key) -> std::filesystem::path {
      if (!s.contains(key)) return {};
      if (!s.at(key).is_string()) throw ConfigError(std::string("io.") + key, "expected a path string");
      std::filesystem::path p = s.at(key).get<std::string>();
      return p.is_relative() && !base_dir.empty() ? base_dir / p : p;
    };
    c.io.observations = path("observations");
    c.io.output = path("output");
  }
  auto theta_in_box = [&](const Vector& v, const std::string& key) {
    if (static_cast<std::size_t>(v.size()) != d) throw ConfigError(key, "expected " + std::to_string(d) + " entries");
    if (!c.model.theta_box.contains(v)) throw ConfigError(key, "lies outside model.theta_box");
  };
  if (root.contains("simulate")) {
    const json& s = root.at("simulate");
    reject_unknown(s, "simulate", {"theta", "steps", "seed"});
    if (s.contains("theta")) {
      c.simulate.theta = vector(s.at("theta"), "simulate.theta");
      theta_in_box(*c.simulate.theta, "simulate.theta");
    }
    if (s.contains("steps")) c.simulate.steps = count(s.at("steps"), "simulate.steps");
    if (s.contains("seed")) c.simulate.seed = count(s.at("seed"), "simulate.seed");
  }
  if (root.contains("study")) {
    const json& s = root.at("study");
    reject_unknown(s, "study", {"particles", "seeds", "steps", "window", "tail_fraction", "max_evaluations", "theta",
                                "theta_true", "oracle_length", "oracle_seed"});
    StudyConfig st;
    if (s.contains("particles")) {
      const json& p = s.at("particles");
      if (!p.is_array()) throw ConfigError("study.particles", "expected an array of particle counts");
      for (const auto& n : p) st.particles.push_back(count(n, "study.particles"));
      for (std::size_t k = 0; k < st.particles.size(); ++k) {
        if (st.particles[k] < 1 || (k > 0 && st.particles[k] <= st.particles[k - 1])) {
          throw ConfigError("study.particles", "particle counts must be positive and strictly increasing");
        }
      }
    }
    if (s.contains("seeds")) st.seeds = count(s.at("seeds"), "study.seeds");
    if (s.contains("steps")) st.steps = count(s.at("steps"), "study.steps");
    if (s.contains("window")) st.window = count(s.at("window"), "study.window");
    if (s.contains("tail_fraction")) st.tail_fraction = number(s.at("tail_fraction"), "study.tail_fraction");
    if (s.contains("max_evaluations")) st.max_evaluations = count(s.at("max_evaluations"), "study.max_evaluations");
    if (s.contains("theta")) {
      st.theta = vector(s.at("theta"), "study.theta");
      theta_in_box(*st.theta, "study.theta");
    }
    if (s.contains("theta_true")) {
      st.theta_true = vector(s.at("theta_true"), "study.theta_true");
      theta_in_box(*st.theta_true, "study.theta_true");
    }
    if (s.contains("oracle_length")) st.oracle_length = count(s.at("oracle_length"), "study.oracle_length");
    if (s.contains("oracle_seed")) st.oracle_seed = count(s.at("oracle_seed"), "study.oracle_seed");
    if (st.seeds < 10) throw ConfigError("study.seeds", "at least 10 seeds are required");
    if (!(st.tail_fraction > 0.0 && st.tail_fraction <= 1.0)) {
      throw ConfigError("study.tail_fraction", "must lie in (0, 1]");
    }
    if (st.steps < 1) throw ConfigError("study.steps", "must be at least 1");
    if (st.window > st.steps) throw ConfigError("study.window", "must not exceed study.steps");
    if (st.max_evaluations < 2) throw ConfigError("study.max_evaluations", "must be at least 2");
    if (st.oracle_length < 1) throw ConfigError("study.oracle_length", "must be at least 1");
    c.study = std::move(st);
  }
  // Surfaces grid/box inconsistencies at validation time.
  (void)make_model(c);
  return c;
}

}  // namespace

ParameterLayout RunConfig::layout() const { return ParameterLayout(family_names(model.family), model.constants, model.free); }

RunConfig parse_config(const std::string& text, const std::filesystem::path& base_dir) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("config", std::string("malformed JSON: ") + e.what());
  }
  return parse_json(root, base_dir);
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot read " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), path.parent_path());
}

std::string echo_config(const RunConfig& c) {
  json model = {{"family", c.model.family},
                {"box", {{"state", box_json(c.model.state_box)}, {"obs", box_json(c.model.obs_box)}}},
                {"constants", c.model.constants},
                {"free", c.model.free},
                {"theta0", vector_json(c.model.theta0)},
                {"theta_box", box_json(c.model.theta_box)}};
  if (c.model.family == "grid_ar1") {
    model["grid"] = {{"points", vector_json(c.model.grid_points)}, {"atom", c.model.grid_atom}};
  }
  json root = {{"model", model},
               {"smc", {{"particles", c.smc.particles}, {"seed", c.smc.seed}}},
               {"schedule", {{"a0", c.schedule.a0}, {"a", c.schedule.a}, {"n0", c.schedule.n0}}},
               {"io", {{"observations", c.io.observations.string()}, {"output", c.io.output.string()}}}};
  json sim = {{"steps", c.simulate.steps}, {"seed", c.simulate.seed}};
  if (c.simulate.theta) sim["theta"] = vector_json(*c.simulate.theta);
  root["simulate"] = sim;
  if (c.study) {
    const StudyConfig& s = *c.study;
    json st = {{"particles", s.particles},         {"seeds", s.seeds},
               {"steps", s.steps},                 {"window", s.window},
               {"tail_fraction", s.tail_fraction},
               {"max_evaluations", s.max_evaluations}, {"oracle_length", s.oracle_length},
               {"oracle_seed", s.oracle_seed}};
    if (s.theta) st["theta"] = vector_json(*s.theta);
    if (s.theta_true) st["theta_true"] = vector_json(*s.theta_true);
    root["study"] = st;
  }
  return root.dump(2);
}

std::shared_ptr<StateSpaceModel> make_model(const RunConfig& c) {
  const ParameterLayout layout = c.layout();
  if (c.model.family == "ar1") return make_ar1_model(layout, c.model.state_box, c.model.obs_box);
  if (c.model.family == "sv") return make_sv_model(layout, c.model.state_box, c.model.obs_box);
  std::shared_ptr<const StateSpaceModel> base = make_ar1_model(layout, c.model.state_box, c.model.obs_box);
  try {
    return std::make_shared<oracle::GridModel>(base, c.model.grid_points, c.model.grid_atom);
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError("model.grid", e.what());
  }
}

Matrix read_observations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read observations from " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(cell, &used));
        if (cell.find_first_not_of(" \t\r", used) != std::string::npos) throw std::invalid_argument(cell);
      } catch (const std::exception&) {
        throw Error(path.string() + ":" + std::to_string(line_no) + ": not a number: '" + cell + "'");
      }
    }
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw Error(path.string() + ":" + std::to_string(line_no) + ": expected " + std::to_string(rows.front().size()) +
                  " columns, found " + std::to_string(row.size()));
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw Error(path.string() + ": no observations");
  Matrix out(static_cast<Eigen::Index>(rows.front().size()), static_cast<Eigen::Index>(rows.size()));
  for (std::size_t t = 0; t < rows.size(); ++t) {
    for (std::size_t k = 0; k < rows[t].size(); ++k) out(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(t)) = rows[t][k];
  }
  return out;
}

void write_rows(const std::filesystem::path& path, const Matrix& columns) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  char buf[40];
  for (Eigen::Index t = 0; t < columns.cols(); ++t) {
    for (Eigen::Index k = 0; k < columns.rows(); ++k) {
      std::snprintf(buf, sizeof buf, "%.17g", columns(k, t));
      if (k) out << ',';
      out << buf;
    }
    out << '\n';
  }
  if (!out) throw Error("failed writing " + path.string());
}

}  // namespace rml
