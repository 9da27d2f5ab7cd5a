#pragma once

// Scenario files: INI with one section per module. Numbers accept decimal
// notation, fractions ("1/40") and multiples of pi ("pi/4", "2pi"); lists are
// comma separated. Unknown sections and keys are rejected.

#include "fmpc/csv.hpp"
#include "fmpc/funnel.hpp"
#include "fmpc/ident.hpp"
#include "fmpc/mpc.hpp"
#include "fmpc/plant.hpp"
#include "fmpc/simloop.hpp"
#include "fmpc/stage_cost.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace fmpc {

class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& where, const std::string& what)
      : std::runtime_error(where.empty() ? what : where + ": " + what), where_(where) {}
  const std::string& where() const noexcept { return where_; }

 private:
  std::string where_;
};

enum class ExperimentKind { Continuous, Zoh, Mpc, Ident };

inline const char* to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::Continuous: return "continuous";
    case ExperimentKind::Zoh: return "zoh";
    case ExperimentKind::Mpc: return "mpc";
    default: return "ident";
  }
}

struct IdentSettings {
  std::vector<double> t_bars{0.1, 0.2, 0.5, 1.0};
  double tau = 1e-3;
  double horizon = 100.0;
  int seeds = 5;  // runs per t_bar with seeds seed, seed+1, ...
  IdentOptions options{};
  ParamBox box = ParamBox::standard();
};

struct Scenario {
  std::string name;
  ExperimentKind kind = ExperimentKind::Continuous;
  double t_end = 10.0;
  std::uint64_t seed = 1;
  std::string output;  // directory below the output root
  double performance_delta = 1.0 / 40.0;

  MassOnCarParams plant{};
  Eigen::Vector4d z0 = Eigen::Vector4d::Zero();
  FunnelSpec funnel = FunnelSpec::standard_r2();
  ReferenceSignal reference{};
  StageCost cost{};
  ContinuousOptions continuous{};
  std::vector<double> taus{1.0 / 600.0};
  SampledOptions zoh{};
  MpcConfig mpc{};
  IdentSettings ident{};
};

/// Plant, funnels, reference and initial state agree exactly.
inline bool same_setup(const Scenario& a, const Scenario& b) {
  return a.plant == b.plant && a.z0 == b.z0 && a.funnel == b.funnel && a.reference == b.reference;
}

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, ',')) out.push_back(trim(cur));
  if (!s.empty() && s.back() == ',') out.emplace_back();
  return out;
}

/// [number][pi], e.g. "0.5", "pi", "2pi", "-pi".
inline bool parse_term(std::string_view s, double& v) {
  bool has_pi = false;
  if (s.size() >= 2 && s.substr(s.size() - 2) == "pi") {
    has_pi = true;
    s.remove_suffix(2);
  }
  double factor = 1.0;
  if (s == "-") {
    factor = -1.0;
  } else if (s == "+") {
    factor = 1.0;
  } else if (!s.empty()) {
    if (s.front() == '+') s.remove_prefix(1);
    const auto res = std::from_chars(s.data(), s.data() + s.size(), factor);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) return false;
  } else if (!has_pi) {
    return false;
  }
  v = has_pi ? factor * std::numbers::pi : factor;
  return true;
}

}  // namespace detail

/// Parses "a", "a/b" where a and b are terms as above.
inline double parse_number(const std::string& text, const std::string& where) {
  const std::string s = detail::trim(text);
  const auto slash = s.find('/');
  double num = 0.0;
  double den = 1.0;
  const bool ok = slash == std::string::npos
                      ? detail::parse_term(s, num)
                      : detail::parse_term(detail::trim(s.substr(0, slash)), num) &&
                            detail::parse_term(detail::trim(s.substr(slash + 1)), den);
  if (!ok || !std::isfinite(num) || !std::isfinite(den) || den == 0.0) {
    throw ConfigError(where, "not a number: '" + s + "'");
  }
  return num / den;
}

inline std::vector<double> parse_number_list(const std::string& text, const std::string& where) {
  std::vector<double> v;
  for (const auto& item : detail::split_list(text)) v.push_back(parse_number(item, where));
  if (v.empty()) throw ConfigError(where, "empty list");
  return v;
}

inline long parse_integer(const std::string& text, const std::string& where) {
  const std::string s = detail::trim(text);
  long v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw ConfigError(where, "not an integer: '" + s + "'");
  }
  return v;
}

inline bool parse_bool(const std::string& text, const std::string& where) {
  const std::string s = detail::trim(text);
  if (s == "true" || s == "yes" || s == "1" || s == "on") return true;
  if (s == "false" || s == "no" || s == "0" || s == "off") return false;
  throw ConfigError(where, "not a boolean: '" + s + "'");
}

namespace detail {

using boost::property_tree::ptree;

inline const std::map<std::string, std::set<std::string>>& allowed_keys() {
  static const std::map<std::string, std::set<std::string>> keys{
      {"experiment", {"kind", "name", "t_end", "seed", "output", "performance_delta"}},
      {"plant", {"m1", "m2", "k", "d", "alpha", "z0"}},
      {"funnel", {"sigma", "level0", "level1", "level2", "level3", "level4"}},
      {"reference", {"amplitude", "frequency", "phase", "offset"}},
      {"cost", {"kind", "lambda"}},
      {"continuous", {"dt_out", "rtol", "atol"}},
      {"zoh", {"tau", "samples_per_hold", "rtol", "atol"}},
      {"mpc",
       {"intervals", "delta", "substeps", "integrator", "max_iterations", "fd_step",
        "barrier_weights", "tolerance", "feasibility_constraint", "path_constraints", "theta",
        "rollout_samples"}},
      {"ident",
       {"t_bar", "tau", "horizon", "seeds", "multistart", "local", "lm_evaluations", "alpha", "m1",
        "m2", "k", "d", "z0_1", "z0_2", "z0_3", "z0_4"}},
  };
  return keys;
}

/// Typed access to one section, recording where each value came from.
class Section {
 public:
  Section(const ptree* node, std::string name) : node_(node), name_(std::move(name)) {}

  bool has(const std::string& key) const { return node_ && node_->find(key) != node_->not_found(); }
  std::string where(const std::string& key) const { return "[" + name_ + "] " + key; }
  std::string raw(const std::string& key) const { return node_->get<std::string>(key); }

  void number(const std::string& key, double& v) const {
    if (has(key)) v = parse_number(raw(key), where(key));
  }
  void list(const std::string& key, std::vector<double>& v) const {
    if (has(key)) v = parse_number_list(raw(key), where(key));
  }
  template <class Int>
  void integer(const std::string& key, Int& v) const {
    if (has(key)) v = static_cast<Int>(parse_integer(raw(key), where(key)));
  }
  void boolean(const std::string& key, bool& v) const {
    if (has(key)) v = parse_bool(raw(key), where(key));
  }
  void text(const std::string& key, std::string& v) const {
    if (has(key)) v = trim(raw(key));
  }
  template <class Enum>
  void choice(const std::string& key, Enum& v,
              const std::vector<std::pair<std::string, Enum>>& options) const {
    if (!has(key)) return;
    const std::string s = trim(raw(key));
    std::string names;
    for (const auto& [name, value] : options) {
      if (s == name) {
        v = value;
        return;
      }
      names += (names.empty() ? "" : ", ") + name;
    }
    throw ConfigError(where(key), "unknown value '" + s + "' (expected one of " + names + ")");
  }
  void interval(const std::string& key, double& lo, double& hi) const {
    if (!has(key)) return;
    const auto v = parse_number_list(raw(key), where(key));
    if (v.size() != 2) throw ConfigError(where(key), "expected 'lower, upper'");
    lo = v[0];
    hi = v[1];
  }

 private:
  const ptree* node_;
  std::string name_;
};

inline void check_keys(const ptree& tree) {
  const auto& allowed = allowed_keys();
  for (const auto& [section, node] : tree) {
    const auto it = allowed.find(section);
    if (it == allowed.end()) throw ConfigError("[" + section + "]", "unknown section");
    if (!node.data().empty()) throw ConfigError(section, "key outside of any section");
    for (const auto& [key, value] : node) {
      if (!it->second.count(key)) throw ConfigError("[" + section + "] " + key, "unknown key");
    }
  }
}

template <class Fn>
void validated(const std::string& where, Fn&& fn) {
  try {
    fn();
  } catch (const InvalidParameter& ex) {
    throw ConfigError(where, ex.what());
  }
}

}  // namespace detail

/// Builds and validates a scenario from a parsed tree. `default_name` is used
/// when the file does not name the scenario.
inline Scenario scenario_from_tree(const boost::property_tree::ptree& tree,
                                   const std::string& default_name) {
  using detail::Section;
  detail::check_keys(tree);
  auto section = [&](const std::string& name) {
    const auto it = tree.find(name);
    return Section(it == tree.not_found() ? nullptr : &it->second, name);
  };

  Scenario sc;
  sc.name = default_name;
  const Section ex = section("experiment");
  ex.choice("kind", sc.kind,
            {{"continuous", ExperimentKind::Continuous},
             {"zoh", ExperimentKind::Zoh},
             {"mpc", ExperimentKind::Mpc},
             {"ident", ExperimentKind::Ident}});
  ex.text("name", sc.name);
  ex.number("t_end", sc.t_end);
  ex.integer("seed", sc.seed);
  sc.output = sc.name;
  ex.text("output", sc.output);
  ex.number("performance_delta", sc.performance_delta);
  if (!(sc.t_end > 0.0)) throw ConfigError(ex.where("t_end"), "must be positive");
  if (!(sc.performance_delta > 0.0)) {
    throw ConfigError(ex.where("performance_delta"), "must be positive");
  }
  if (sc.name.empty()) throw ConfigError(ex.where("name"), "must not be empty");
  if (sc.output.empty()) throw ConfigError(ex.where("output"), "must not be empty");
  if (std::filesystem::path(sc.output).is_absolute() ||
      sc.output.find("..") != std::string::npos) {
    throw ConfigError(ex.where("output"), "must be a relative path below the output root");
  }

  const Section pl = section("plant");
  pl.number("m1", sc.plant.m1);
  pl.number("m2", sc.plant.m2);
  pl.number("k", sc.plant.k);
  pl.number("d", sc.plant.d);
  pl.number("alpha", sc.plant.alpha);
  detail::validated("[plant]", [&] { sc.plant.validate(); });
  if (pl.has("z0")) {
    const auto v = parse_number_list(pl.raw("z0"), pl.where("z0"));
    if (v.size() != 4) throw ConfigError(pl.where("z0"), "expected four values");
    sc.z0 << v[0], v[1], v[2], v[3];
  }
  const int r = relative_degree(sc.plant);

  const Section fu = section("funnel");
  sc.funnel = r == 3 ? FunnelSpec::standard_r3() : FunnelSpec::standard_r2();
  bool any_level = false;
  for (int i = 0; i < 5; ++i) any_level = any_level || fu.has("level" + std::to_string(i));
  if (any_level) {
    sc.funnel.levels.clear();
    for (int i = 0; i < 5; ++i) {
      const std::string key = "level" + std::to_string(i);
      if (!fu.has(key)) break;
      const auto v = parse_number_list(fu.raw(key), fu.where(key));
      if (v.size() != 3) throw ConfigError(fu.where(key), "expected 'a, b, c'");
      sc.funnel.levels.push_back({v[0], v[1], v[2]});
    }
  }
  fu.number("sigma", sc.funnel.sigma);
  detail::validated("[funnel]", [&] { sc.funnel.validate(r); });

  const Section re = section("reference");
  re.number("amplitude", sc.reference.amplitude);
  re.number("frequency", sc.reference.frequency);
  re.number("phase", sc.reference.phase);
  re.number("offset", sc.reference.offset);
  for (double v : {sc.reference.amplitude, sc.reference.frequency, sc.reference.phase,
                   sc.reference.offset}) {
    if (!std::isfinite(v)) throw ConfigError("[reference]", "values must be finite");
  }
  {
    const ErrorCascade c = error_cascade_unchecked(MassOnCar(sc.plant), sc.funnel, sc.reference,
                                                   0.0, sc.z0);
    if (!c.valid()) {
      throw ConfigError("[plant] z0", "initial state lies outside the funnel at level " +
                                          std::to_string(c.first_violation));
    }
  }

  const Section co = section("cost");
  co.choice("kind", sc.cost.kind,
            {{"classical", StageCost::Kind::Classical}, {"funnel", StageCost::Kind::Funnel}});
  co.number("lambda", sc.cost.lambda);
  detail::validated("[cost]", [&] { sc.cost.validate(); });

  const Section ct = section("continuous");
  ct.number("dt_out", sc.continuous.dt_out);
  ct.number("rtol", sc.continuous.tol.rtol);
  ct.number("atol", sc.continuous.tol.atol);
  if (!(sc.continuous.dt_out > 0.0)) throw ConfigError(ct.where("dt_out"), "must be positive");
  if (!(sc.continuous.tol.rtol > 0.0) || !(sc.continuous.tol.atol > 0.0)) {
    throw ConfigError("[continuous]", "tolerances must be positive");
  }

  const Section zo = section("zoh");
  zo.list("tau", sc.taus);
  zo.integer("samples_per_hold", sc.zoh.samples_per_hold);
  zo.number("rtol", sc.zoh.flow.rtol);
  zo.number("atol", sc.zoh.flow.atol);
  for (double t : sc.taus) {
    if (!(t > 0.0)) throw ConfigError(zo.where("tau"), "sampling periods must be positive");
  }
  if (sc.zoh.samples_per_hold < 1) throw ConfigError(zo.where("samples_per_hold"), "must be >= 1");
  if (!(sc.zoh.flow.rtol > 0.0) || !(sc.zoh.flow.atol > 0.0)) {
    throw ConfigError("[zoh]", "tolerances must be positive");
  }

  const Section mp = section("mpc");
  mp.integer("intervals", sc.mpc.intervals);
  mp.number("delta", sc.mpc.delta);
  mp.integer("substeps", sc.mpc.substeps);
  mp.choice("integrator", sc.mpc.integrator,
            {{"rk4", StepMethod::RK4}, {"euler", StepMethod::Euler}});
  mp.integer("max_iterations", sc.mpc.max_iterations);
  mp.number("fd_step", sc.mpc.fd_step);
  mp.list("barrier_weights", sc.mpc.barrier_weights);
  mp.number("tolerance", sc.mpc.tolerance);
  mp.boolean("feasibility_constraint", sc.mpc.enforce_feasibility_constraint);
  mp.boolean("path_constraints", sc.mpc.path_constraints);
  mp.choice("theta", sc.mpc.theta_mode,
            {{"min_over_horizon", ThetaMode::MinOverHorizon},
             {"at_initial_time", ThetaMode::AtInitialTime}});
  mp.integer("rollout_samples", sc.mpc.rollout_samples);
  detail::validated("[mpc]", [&] { sc.mpc.validate(); });

  const Section id = section("ident");
  id.list("t_bar", sc.ident.t_bars);
  id.number("tau", sc.ident.tau);
  id.number("horizon", sc.ident.horizon);
  id.integer("seeds", sc.ident.seeds);
  id.integer("multistart", sc.ident.options.multistart);
  id.choice("local", sc.ident.options.local,
            {{"levenberg_marquardt", LocalSearch::LevenbergMarquardt},
             {"nelder_mead", LocalSearch::NelderMead}});
  id.integer("lm_evaluations", sc.ident.options.lm_evaluations);
  const auto& names = ident_coordinate_names();
  for (int i = 0; i < kIdentDim; ++i) id.interval(names[i], sc.ident.box.lower[i], sc.ident.box.upper[i]);
  for (double t : sc.ident.t_bars) {
    if (!(t > 0.0)) throw ConfigError(id.where("t_bar"), "learning horizons must be positive");
  }
  if (!(sc.ident.tau > 0.0)) throw ConfigError(id.where("tau"), "must be positive");
  if (!(sc.ident.horizon > 0.0)) throw ConfigError(id.where("horizon"), "must be positive");
  if (sc.ident.seeds < 1) throw ConfigError(id.where("seeds"), "must be >= 1");
  if (sc.ident.options.multistart < 1) throw ConfigError(id.where("multistart"), "must be >= 1");
  if (sc.ident.options.lm_evaluations < 1) {
    throw ConfigError(id.where("lm_evaluations"), "must be >= 1");
  }
  detail::validated("[ident]", [&] { sc.ident.box.validate(); });
  return sc;
}

/// Reads the INI text; syntax errors carry the line number.
inline boost::property_tree::ptree read_scenario_tree(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(path, "cannot open file");
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& ex) {
    throw ConfigError(path + ":" + std::to_string(ex.line()), ex.message());
  }
  return tree;
}

inline Scenario load_scenario(const std::string& path) {
  return scenario_from_tree(read_scenario_tree(path), std::filesystem::path(path).stem().string());
}

/// Writes every field, so the text parses back to an equal scenario.
inline std::string scenario_to_ini(const Scenario& sc) {
  auto join = [](const auto& values) {
    std::string s;
    for (double v : values) s += (s.empty() ? "" : ", ") + format_number(v);
    return s;
  };
  std::ostringstream o;
  o << "[experiment]\n"
    << "kind = " << to_string(sc.kind) << "\n"
    << "name = " << sc.name << "\n"
    << "t_end = " << format_number(sc.t_end) << "\n"
    << "seed = " << sc.seed << "\n"
    << "output = " << sc.output << "\n"
    << "performance_delta = " << format_number(sc.performance_delta) << "\n\n";
  o << "[plant]\n"
    << "m1 = " << format_number(sc.plant.m1) << "\n"
    << "m2 = " << format_number(sc.plant.m2) << "\n"
    << "k = " << format_number(sc.plant.k) << "\n"
    << "d = " << format_number(sc.plant.d) << "\n"
    << "alpha = " << format_number(sc.plant.alpha) << "\n"
    << "z0 = " << join(std::vector<double>(sc.z0.data(), sc.z0.data() + 4)) << "\n\n";
  o << "[funnel]\n"
    << "sigma = " << format_number(sc.funnel.sigma) << "\n";
  for (std::size_t i = 0; i < sc.funnel.levels.size(); ++i) {
    const auto& l = sc.funnel.levels[i];
    o << "level" << i << " = " << join(std::vector<double>{l.a, l.b, l.c}) << "\n";
  }
  o << "\n[reference]\n"
    << "amplitude = " << format_number(sc.reference.amplitude) << "\n"
    << "frequency = " << format_number(sc.reference.frequency) << "\n"
    << "phase = " << format_number(sc.reference.phase) << "\n"
    << "offset = " << format_number(sc.reference.offset) << "\n\n";
  o << "[cost]\n"
    << "kind = " << to_string(sc.cost.kind) << "\n"
    << "lambda = " << format_number(sc.cost.lambda) << "\n\n";
  o << "[continuous]\n"
    << "dt_out = " << format_number(sc.continuous.dt_out) << "\n"
    << "rtol = " << format_number(sc.continuous.tol.rtol) << "\n"
    << "atol = " << format_number(sc.continuous.tol.atol) << "\n\n";
  o << "[zoh]\n"
    << "tau = " << join(sc.taus) << "\n"
    << "samples_per_hold = " << sc.zoh.samples_per_hold << "\n"
    << "rtol = " << format_number(sc.zoh.flow.rtol) << "\n"
    << "atol = " << format_number(sc.zoh.flow.atol) << "\n\n";
  const MpcConfig& m = sc.mpc;
  o << "[mpc]\n"
    << "intervals = " << m.intervals << "\n"
    << "delta = " << format_number(m.delta) << "\n"
    << "substeps = " << m.substeps << "\n"
    << "integrator = " << (m.integrator == StepMethod::RK4 ? "rk4" : "euler") << "\n"
    << "max_iterations = " << m.max_iterations << "\n"
    << "fd_step = " << format_number(m.fd_step) << "\n"
    << "barrier_weights = " << join(m.barrier_weights) << "\n"
    << "tolerance = " << format_number(m.tolerance) << "\n"
    << "feasibility_constraint = " << (m.enforce_feasibility_constraint ? "true" : "false")
    << "\n"
    << "path_constraints = " << (m.path_constraints ? "true" : "false") << "\n"
    << "theta = " << to_string(m.theta_mode) << "\n"
    << "rollout_samples = " << m.rollout_samples << "\n\n";
  const IdentSettings& id = sc.ident;
  o << "[ident]\n"
    << "t_bar = " << join(id.t_bars) << "\n"
    << "tau = " << format_number(id.tau) << "\n"
    << "horizon = " << format_number(id.horizon) << "\n"
    << "seeds = " << id.seeds << "\n"
    << "multistart = " << id.options.multistart << "\n"
    << "local = " << to_string(id.options.local) << "\n"
    << "lm_evaluations = " << id.options.lm_evaluations << "\n";
  const auto& names = ident_coordinate_names();
  for (int i = 0; i < kIdentDim; ++i) {
    o << names[i] << " = " << format_number(id.box.lower[i]) << ", "
      << format_number(id.box.upper[i]) << "\n";
  }
  return o.str();
}

inline bool operator==(const ParamBox& a, const ParamBox& b) {
  return a.lower == b.lower && a.upper == b.upper;
}

inline bool operator==(const IdentSettings& a, const IdentSettings& b) {
  return a.t_bars == b.t_bars && a.tau == b.tau && a.horizon == b.horizon && a.seeds == b.seeds &&
         a.options.multistart == b.options.multistart && a.options.local == b.options.local &&
         a.options.lm_evaluations == b.options.lm_evaluations && a.box == b.box;
}

inline bool operator==(const Scenario& a, const Scenario& b) {
  return a.name == b.name && a.kind == b.kind && a.t_end == b.t_end && a.seed == b.seed &&
         a.output == b.output && a.performance_delta == b.performance_delta &&
         same_setup(a, b) && a.cost == b.cost && a.continuous == b.continuous &&
         a.taus == b.taus && a.zoh == b.zoh && a.mpc == b.mpc && a.ident == b.ident;
}

}  // namespace fmpc
