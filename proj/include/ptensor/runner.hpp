#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ptensor/expand.hpp"
#include "ptensor/fem.hpp"
#include "ptensor/tensors.hpp"

namespace ptensor {

/// Schema violation; `field` is the dotted path of the offending entry.
struct ConfigError : std::runtime_error {
  std::string field;
  ConfigError(std::string f, const std::string& msg) : std::runtime_error("config field '" + f + "': " + msg), field(std::move(f)) {}
};

struct TaskInfo {
  std::string name;
  std::string summary;
  std::vector<std::string> required;
};

/// Task catalogue in a fixed order.
inline const std::vector<TaskInfo>& list_tasks() {
  static const std::vector<TaskInfo> tasks = {
      {"tensors", "polarization tensor M (and M2 for a variable background) on the reference inclusion",
       {"dimension", "inclusion.profile", "inclusion.mesh", "background"}},
      {"properties", "symmetry, quadratic-form bounds and definiteness of M",
       {"dimension", "inclusion.profile", "inclusion.mesh", "background"}},
      {"vanish_search", "bisection for a sign-changing D1 with vanishing first-order tensor",
       {"dimension", "vanish.positive", "vanish.negative", "inclusion.mesh", "background"}},
      {"equivalence", "diffusion/Helmholtz tensor correspondence and the FEM Bohm-pair identity",
       {"dimension", "inclusion.profile", "inclusion.mesh", "background", "validation"}},
      {"convergence", "boundary-perturbation residual study for the diffusion problem",
       {"dimension", "inclusion.profile", "inclusion.mesh", "background", "validation", "eps"}},
      {"helmholtz_convergence", "boundary-perturbation residual study for the Helmholtz problem",
       {"dimension", "helmholtz.q1", "helmholtz.q0", "helmholtz.eta", "inclusion.mesh", "validation", "eps"}},
  };
  return tasks;
}

inline std::string list_tasks_text() {
  std::ostringstream os;
  for (const auto& t : list_tasks()) {
    os << t.name << "\t" << t.summary << "\n  required:";
    for (const auto& r : t.required) os << " " << r;
    os << "\n";
  }
  return os.str();
}

namespace config {

inline const nlohmann::json& child(const nlohmann::json& j, const std::string& key, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path, "expected an object");
  auto it = j.find(key);
  if (it == j.end()) throw ConfigError(path.empty() ? key : path + "." + key, "missing");
  return *it;
}

inline std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

inline double number(const nlohmann::json& j, const std::string& key, const std::string& path) {
  const auto& v = child(j, key, path);
  if (!v.is_number()) throw ConfigError(join(path, key), "expected a number");
  return v.get<double>();
}

inline double number_or(const nlohmann::json& j, const std::string& key, const std::string& path, double dflt) {
  return j.is_object() && j.contains(key) ? number(j, key, path) : dflt;
}

inline double positive_or(const nlohmann::json& j, const std::string& key, const std::string& path, double dflt) {
  const double v = number_or(j, key, path, dflt);
  if (!(v > 0)) throw ConfigError(join(path, key), "must be positive");
  return v;
}

inline int integer_or(const nlohmann::json& j, const std::string& key, const std::string& path, int dflt) {
  if (!(j.is_object() && j.contains(key))) return dflt;
  const auto& v = j.at(key);
  if (!v.is_number_integer()) throw ConfigError(join(path, key), "expected an integer");
  return v.get<int>();
}

inline std::string string_or(const nlohmann::json& j, const std::string& key, const std::string& path, const std::string& dflt) {
  if (!(j.is_object() && j.contains(key))) return dflt;
  const auto& v = j.at(key);
  if (!v.is_string()) throw ConfigError(join(path, key), "expected a string");
  return v.get<std::string>();
}

inline std::vector<double> numbers_or(const nlohmann::json& j, const std::string& key, const std::string& path,
                                      std::vector<double> dflt) {
  if (!(j.is_object() && j.contains(key))) return dflt;
  const auto& v = j.at(key);
  if (!v.is_array() || v.empty()) throw ConfigError(join(path, key), "expected a non-empty array of numbers");
  std::vector<double> out;
  for (const auto& e : v) {
    if (!e.is_number()) throw ConfigError(join(path, key), "expected numbers");
    out.push_back(e.get<double>());
  }
  return out;
}

template <int Dim>
Vec<Dim> point_or(const nlohmann::json& j, const std::string& key, const std::string& path, const Vec<Dim>& dflt) {
  if (!(j.is_object() && j.contains(key))) return dflt;
  const auto v = numbers_or(j, key, path, {});
  if (static_cast<int>(v.size()) != Dim) throw ConfigError(join(path, key), "expected " + std::to_string(Dim) + " coordinates");
  Vec<Dim> x;
  for (int k = 0; k < Dim; ++k) x[k] = v[k];
  return x;
}

template <int Dim>
InclusionProfile<Dim> profile(const nlohmann::json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path, "expected a profile object");
  const std::string fam = string_or(j, "family", path, "");
  if (fam.empty()) throw ConfigError(join(path, "family"), "missing");
  if (fam == "zero") return profiles::zero<Dim>();
  if (fam == "constant") return profiles::constant<Dim>(number(j, "value", path));
  if (fam == "layered")
    return profiles::layered<Dim>(number(j, "core", path), number(j, "shell", path), number(j, "radius", path));
  if (fam == "bump")
    return profiles::bump<Dim>(number(j, "amplitude", path), integer_or(j, "k", path, 3), number_or(j, "radius", path, 1.0));
  if (fam == "ring_bump")
    return profiles::ring_bump<Dim>(number(j, "amplitude", path), number(j, "r1", path), number(j, "r2", path),
                                    integer_or(j, "k", path, 3));
  if (fam == "random_smooth")
    return profiles::random_smooth<Dim>(static_cast<std::uint64_t>(integer_or(j, "seed", path, 1)), number(j, "upper", path),
                                        number(j, "lower", path));
  if (fam == "mollified_constant")
    return profiles::mollified_constant<Dim>(number(j, "value", path), positive_or(j, "eta", path, 0.05));
  if (fam == "combine")
    return profiles::combine<Dim>(number(j, "a", path), profile<Dim>(child(j, "p", path), join(path, "p")), number(j, "b", path),
                                  profile<Dim>(child(j, "q", path), join(path, "q")));
  throw ConfigError(join(path, "family"), "unknown profile family '" + fam + "'");
}

template <int Dim>
BackgroundModel<Dim> background(const nlohmann::json& j, const std::string& path, const Vec<Dim>& x0) {
  const std::string type = string_or(j, "type", path, "constant");
  if (type == "constant") return BackgroundModel<Dim>::constant(positive_or(j, "D0", path, 1.0), x0);
  if (type == "linear_inverse") {
    const double a0 = positive_or(j, "a0", path, 1.0);
    const Vec<Dim> a = point_or<Dim>(j, "gradient", path, Vec<Dim>::Zero());
    return BackgroundModel<Dim>::linear_inverse(a0, a, x0);
  }
  throw ConfigError(join(path, "type"), "unknown background '" + type + "'");
}

/// Boundary flux g(θ) = Σ c_m cos(mθ) + s_m sin(mθ).
inline std::function<double(const Vec<2>&)> flux(const nlohmann::json& j, const std::string& path) {
  const auto c = numbers_or(j, "cos", path, {0.0, 1.0});
  const auto s = numbers_or(j, "sin", path, {0.0});
  return [c, s](const Vec<2>& y) {
    const double th = std::atan2(y[1], y[0]);
    double v = 0.0;
    for (std::size_t m = 0; m < c.size(); ++m) v += c[m] * std::cos(m * th);
    for (std::size_t m = 0; m < s.size(); ++m) v += s[m] * std::sin(m * th);
    return v;
  };
}

}  // namespace config

/// One thresholded check of a run.
struct Check {
  std::string name;
  double value = 0.0;
  double threshold = 0.0;
  std::string relation;  ///< "<=", ">=", "in", "=="
  double upper = 0.0;    ///< for "in"
  bool pass = false;
};

inline nlohmann::json to_json(const Check& c) {
  nlohmann::json j = {{"name", c.name}, {"value", c.value}, {"relation", c.relation}, {"pass", c.pass}};
  if (c.relation == "in")
    j["range"] = {c.threshold, c.upper};
  else
    j["threshold"] = c.threshold;
  return j;
}

inline Check check_le(const std::string& n, double v, double t) { return {n, v, t, "<=", 0.0, std::isfinite(v) && v <= t}; }
inline Check check_ge(const std::string& n, double v, double t) { return {n, v, t, ">=", 0.0, std::isfinite(v) && v >= t}; }
inline Check check_in(const std::string& n, double v, double lo, double hi) {
  return {n, v, lo, "in", hi, std::isfinite(v) && v >= lo && v <= hi};
}
inline Check check_true(const std::string& n, bool b) { return {n, b ? 1.0 : 0.0, 1.0, "==", 0.0, b}; }

struct RunOptions {
  std::string output_dir;  ///< overrides the config value when non-empty
  int threads = 0;
  long long seed = -1;  ///< overrides the config seed when >= 0
};

struct RunResult {
  int exit_code = 0;
  nlohmann::json report;
  std::string message;
  std::filesystem::path output_dir;
};

namespace detail {

/// Collects artifacts of one task before they are written.
struct TaskOutput {
  nlohmann::json tensors = nlohmann::json::object();
  nlohmann::json results = nlohmann::json::object();
  nlohmann::json tolerances = nlohmann::json::object();
  nlohmann::json diagnostics = nlohmann::json::object();
  std::vector<Check> checks;
  std::map<std::string, std::string> traces;  ///< file name -> CSV text
  std::map<std::string, std::string> dumps;   ///< file name -> mesh/field dump
  std::string rates = "eps,residual_before,residual_after,floor,used_in_after_fit\n";
  std::map<std::string, double> timings;
};

class Stopwatch {
 public:
  explicit Stopwatch(double& slot) : slot_(slot), t0_(std::chrono::steady_clock::now()) {}
  ~Stopwatch() { slot_ += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

 private:
  double& slot_;
  std::chrono::steady_clock::time_point t0_;
};

inline std::string hex64(std::uint64_t h) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

template <int Dim>
std::vector<std::shared_ptr<const VolumeMesh<Dim>>> reference_meshes(const nlohmann::json& cfg) {
  const auto& mj = config::child(config::child(cfg, "inclusion", ""), "mesh", "inclusion");
  std::vector<std::shared_ptr<const VolumeMesh<Dim>>> out;
  if constexpr (Dim == 2) {
    std::vector<double> rings;
    if (mj.contains("rings") && mj.at("rings").is_number_integer())
      rings = {mj.at("rings").get<double>()};
    else
      rings = config::numbers_or(mj, "rings", "inclusion.mesh", {10.0});
    for (double k : rings) {
      if (!(k >= 1) || k != std::floor(k)) throw ConfigError("inclusion.mesh.rings", "rings must be positive integers");
      out.push_back(std::make_shared<const VolumeMesh<2>>(hex_disk_mesh(static_cast<int>(k))));
    }
  } else {
    std::vector<double> hs;
    if (mj.contains("h") && mj.at("h").is_number())
      hs = {mj.at("h").get<double>()};
    else
      hs = config::numbers_or(mj, "h", "inclusion.mesh", {0.25});
    for (double h : hs) {
      if (!(h > 0)) throw ConfigError("inclusion.mesh.h", "must be positive");
      out.push_back(std::make_shared<const VolumeMesh<3>>(ball_mesh(h)));
    }
  }
  if (out.size() > 2) throw ConfigError("inclusion.mesh", "at most two mesh levels are supported");
  return out;
}

template <int Dim>
double mesh_ratio(const std::vector<std::shared_ptr<const VolumeMesh<Dim>>>& ms) {
  auto hmax = [](const VolumeMesh<Dim>& m) {
    double h = 0.0;
    for (double d : m.cell_diameters) h = std::max(h, d);
    return h;
  };
  return hmax(*ms.front()) / hmax(*ms.back());
}

template <int Dim>
CorrectorOptions corrector_options(const nlohmann::json& cfg) {
  CorrectorOptions o;
  const nlohmann::json tol = cfg.contains("tolerances") ? cfg.at("tolerances") : nlohmann::json::object();
  o.solve.tol = config::positive_or(tol, "solver", "tolerances", o.solve.tol);
  o.kernel.tol = config::positive_or(tol, "kernel", "tolerances", o.kernel.tol);
  return o;
}

inline nlohmann::json matrix_json(const Eigen::MatrixXd& A) {
  nlohmann::json a = nlohmann::json::array();
  for (Eigen::Index i = 0; i < A.rows(); ++i) {
    std::vector<double> row(static_cast<std::size_t>(A.cols()));
    for (Eigen::Index k = 0; k < A.cols(); ++k) row[static_cast<std::size_t>(k)] = A(i, k);
    a.push_back(row);
  }
  return a;
}

template <int Dim>
std::string field_dump(const VolumeMesh<Dim>& m, const std::vector<std::pair<std::string, Eigen::VectorXd>>& fields) {
  std::ostringstream os;
  write_mesh(os, m, fields);
  return os.str();
}

inline std::string trace_csv(const BoundaryTrace<2>& t) {
  std::ostringstream os;
  write_trace_csv(os, t);
  return os.str();
}

inline std::string rates_csv(const ResidualStudy<2>& s) {
  std::ostringstream os;
  write_rates_csv(os, s);
  return os.str();
}

inline nlohmann::json study_json(const ResidualStudy<2>& s) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : s.samples)
    rows.push_back({{"eps", r.eps}, {"before", r.before}, {"after", r.after}, {"floor", r.floor}, {"vertices", r.vertices},
                    {"prediction", r.terms}});
  return {{"samples", rows}, {"before_fit", to_json(s.before)}, {"after_fit", to_json(s.after)}};
}

inline void study_traces(const ResidualStudy<2>& s, TaskOutput& out) {
  for (std::size_t k = 0; k < s.samples.size(); ++k) {
    char name[64];
    std::snprintf(name, sizeof name, "eps%02zu_difference.csv", k);
    out.traces[name] = trace_csv(s.samples[k].difference);
    std::snprintf(name, sizeof name, "eps%02zu_prediction.csv", k);
    out.traces[name] = trace_csv(s.samples[k].prediction);
  }
}

template <int Dim>
InclusionProfile<Dim> inclusion_profile(const nlohmann::json& cfg) {
  const auto& inc = config::child(cfg, "inclusion", "");
  return config::profile<Dim>(config::child(inc, "profile", "inclusion"), "inclusion.profile");
}

template <int Dim>
BackgroundModel<Dim> background_model(const nlohmann::json& cfg, const Vec<Dim>& x0) {
  return config::background<Dim>(config::child(cfg, "background", ""), "background", x0);
}

template <int Dim>
Vec<Dim> inclusion_center(const nlohmann::json& cfg) {
  const nlohmann::json v = cfg.contains("validation") ? cfg.at("validation") : nlohmann::json::object();
  return config::point_or<Dim>(v, "x0", "validation", Vec<Dim>::Zero());
}

/// M on every reference level (first level first) and the Richardson combination when two are given.
template <int Dim>
struct LevelTensors {
  std::vector<MTensorResult> levels;
  std::vector<std::unique_ptr<DiffusionCorrectors<Dim>>> correctors;
  PolarizationTensor combined;
  double ratio = 1.0;
};

template <int Dim>
LevelTensors<Dim> level_tensors(const std::vector<std::shared_ptr<const VolumeMesh<Dim>>>& meshes, const InclusionProfile<Dim>& D1,
                                const BackgroundModel<Dim>& model, const CorrectorOptions& opt, int order, TaskOutput& out) {
  LevelTensors<Dim> lt;
  for (const auto& m : meshes) {
    lt.correctors.push_back(std::make_unique<DiffusionCorrectors<Dim>>(m, D1, model, opt));
    lt.levels.push_back(tensor_M(*lt.correctors.back(), order));
  }
  lt.combined = lt.levels.back().canonical;
  if (meshes.size() == 2) {
    lt.ratio = mesh_ratio(meshes);
    lt.combined.entries = richardson(lt.levels[0].canonical.entries, lt.levels[1].canonical.entries, lt.ratio);
    lt.combined.provenance.form = "symmetric+richardson";
  }
  nlohmann::json lv = nlohmann::json::array();
  for (const auto& l : lt.levels) lv.push_back(to_json(l.canonical));
  out.tensors["M_levels"] = lv;
  out.tensors["M"] = to_json(lt.combined);
  out.diagnostics["exterior_tail_bound"] = lt.levels.back().exterior_tail_bound;
  out.diagnostics["max_solver_residual"] = lt.levels.back().max_solver_residual;
  return lt;
}

template <int Dim>
void task_tensors(const nlohmann::json& cfg, TaskOutput& out) {
  const auto x0 = inclusion_center<Dim>(cfg);
  const auto D1 = inclusion_profile<Dim>(cfg);
  const auto model = background_model<Dim>(cfg, x0);
  const nlohmann::json tj = cfg.contains("tensors") ? cfg.at("tensors") : nlohmann::json::object();
  const int order = config::integer_or(tj, "max_order", "tensors", 1);
  if (order < 1 || order > 3) throw ConfigError("tensors.max_order", "must lie in 1..3");
  const auto meshes = reference_meshes<Dim>(cfg);
  LevelTensors<Dim> lt;
  {
    Stopwatch sw(out.timings["tensor_M"]);
    lt = level_tensors<Dim>(meshes, D1, model, corrector_options<Dim>(cfg), order, out);
  }
  const auto& dc = *lt.correctors.back();
  if (!model.is_constant()) {
    Stopwatch sw(out.timings["tensor_M2"]);
    out.tensors["M2"] = to_json(tensor_M2(dc, order));
  }
  const double asym = (lt.combined.entries - lt.combined.entries.transpose()).cwiseAbs().maxCoeff() /
                      std::max(lt.combined.entries.cwiseAbs().maxCoeff(), 1e-300);
  out.tolerances["symmetry_relative"] = 1e-12;
  out.checks.push_back(check_true("entries_finite", lt.combined.all_finite()));
  out.checks.push_back(check_le("canonical_symmetry", asym, 1e-12));
  if (D1.is_zero()) out.checks.push_back(check_le("zero_profile_gives_zero_tensor", lt.combined.entries.cwiseAbs().maxCoeff(), 0.0));
  if (tj.contains("expected_first_order")) {
    const auto& e = tj.at("expected_first_order");
    if (!e.is_array() || static_cast<int>(e.size()) != Dim) throw ConfigError("tensors.expected_first_order", "expected a d x d array");
    const double rel = config::positive_or(tj, "relative_tolerance", "tensors", 1e-2);
    Eigen::MatrixXd E(Dim, Dim);
    for (int a = 0; a < Dim; ++a) {
      if (!e[a].is_array() || static_cast<int>(e[a].size()) != Dim)
        throw ConfigError("tensors.expected_first_order", "expected a d x d array");
      for (int b = 0; b < Dim; ++b) E(a, b) = e[a][b].get<double>();
    }
    const double gap = (lt.combined.first_order_block() - E).cwiseAbs().maxCoeff() / std::max(E.cwiseAbs().maxCoeff(), 1e-300);
    out.tolerances["expected_relative"] = rel;
    out.checks.push_back(check_le("first_order_matches_expected", gap, rel));
  }
  out.results["first_order_block"] = matrix_json(lt.combined.first_order_block());
  out.results["richardson_ratio"] = lt.ratio;
  std::vector<std::pair<std::string, Eigen::VectorXd>> fields;
  for (int a = 0; a < Dim; ++a) {
    auto f = dc.base(MultiIndex::unit(Dim, a), MultiIndex::zero(Dim));
    fields.push_back({f->label(), f->values});
  }
  out.dumps["correctors.txt"] = field_dump(dc.mesh(), fields);
}

template <int Dim>
void task_properties(const nlohmann::json& cfg, std::uint64_t seed, TaskOutput& out) {
  const auto x0 = inclusion_center<Dim>(cfg);
  const auto D1 = inclusion_profile<Dim>(cfg);
  const auto model = background_model<Dim>(cfg, x0);
  const nlohmann::json pj = cfg.contains("properties") ? cfg.at("properties") : nlohmann::json::object();
  const int order = config::integer_or(pj, "max_order", "properties", 1);
  const int samples = config::integer_or(pj, "samples", "properties", 10);
  if (samples < 1) throw ConfigError("properties.samples", "must be positive");
  const double sym_tol = config::positive_or(pj, "symmetry_tolerance", "properties", 1e-4);
  const double slack = config::positive_or(pj, "bound_slack", "properties", 1e-6);
  const double factor = config::positive_or(pj, "collocation_factor", "properties", 10.0);
  const auto meshes = reference_meshes<Dim>(cfg);
  DiffusionCorrectors<Dim> dc(meshes.back(), D1, model, corrector_options<Dim>(cfg));
  MTensorResult M;
  PropertyReport rep;
  double defect = 0.0;
  {
    Stopwatch sw(out.timings["tensor_M"]);
    M = tensor_M(dc, order);
  }
  {
    Stopwatch sw(out.timings["property_report"]);
    rep = property_report(M.canonical, D1, model, dc.mesh(), seed, samples, &M.definition);
    defect = collocation_midpoint_defect(dc, order);
  }
  out.tensors["M"] = to_json(M.canonical);
  out.tensors["M_definition"] = to_json(M.definition);
  out.results["properties"] = to_json(rep);
  out.results["collocation_midpoint_defect"] = defect;
  out.tolerances = {{"symmetry_relative", sym_tol}, {"bound_slack", slack}, {"collocation_factor", factor}};
  out.checks.push_back(check_le("weighted_symmetry", rep.symmetry_residual, sym_tol));
  out.checks.push_back(check_le("collocation_symmetry_vs_defect", rep.collocation_symmetry_residual, factor * defect + 1e-14));
  out.checks.push_back(check_le("quadratic_form_bounds", rep.bound_violation, slack));
  if (rep.expect_positive) out.checks.push_back(check_true("positive_definite", rep.positive_definite));
  if (rep.expect_negative) out.checks.push_back(check_true("negative_definite", rep.negative_definite));
}

inline ResidualStudy<2> run_diffusion_study(const DiskStudySettings<2>& st, const InclusionProfile<2>& D1,
                                            const BackgroundModel<2>& model, const PolarizationTensor& M, const PolarizationTensor* M2,
                                            ExpansionBranch branch, const std::function<PolarizationTensor(double)>& Me,
                                            double before_target, double after_target) {
  auto s = diffusion_residual_study(st, D1, model, M, M2, branch, Me);
  fit_study(s, before_target, after_target);
  return s;
}

inline DiskStudySettings<2> disk_settings(const nlohmann::json& cfg) {
  DiskStudySettings<2> st;
  const auto& v = config::child(cfg, "validation", "");
  st.x0 = config::point_or<2>(v, "x0", "validation", Vec<2>::Zero());
  st.inclusion_rings = config::integer_or(v, "inclusion_rings", "validation", st.inclusion_rings);
  st.boundary_nodes = config::integer_or(v, "boundary_nodes", "validation", st.boundary_nodes);
  if (st.inclusion_rings < 2) throw ConfigError("validation.inclusion_rings", "must be >= 2");
  if (st.boundary_nodes < 12) throw ConfigError("validation.boundary_nodes", "must be >= 12");
  st.flux = config::flux(v.contains("flux") ? v.at("flux") : nlohmann::json::object(), "validation.flux");
  st.eps = config::numbers_or(cfg, "eps", "", default_eps_grid());
  for (double e : st.eps)
    if (!(e > 0) || st.x0.norm() + e >= 0.9) throw ConfigError("eps", "every eps must be positive with |x0| + eps < 0.9");
  const std::string gm = config::string_or(v, "green", "validation", "disk_closed_form");
  if (gm == "disk_closed_form")
    st.green.method = GreenMethod::disk_closed_form;
  else if (gm == "fem_multipole")
    st.green.method = GreenMethod::fem_multipole;
  else
    throw ConfigError("validation.green", "unknown method '" + gm + "'");
  st.prediction.order = config::integer_or(v, "prediction_order", "validation", 1);
  return st;
}

inline void task_vanish(const nlohmann::json& cfg, TaskOutput& out) {
  const auto& vj = config::child(cfg, "vanish", "");
  const auto P = config::profile<2>(config::child(vj, "positive", "vanish"), "vanish.positive");
  const auto N = config::profile<2>(config::child(vj, "negative", "vanish"), "vanish.negative");
  const int axis = config::integer_or(vj, "axis", "vanish", 0);
  if (axis < 0 || axis > 1) throw ConfigError("vanish.axis", "must be 0 or 1");
  const double t_max = config::positive_or(vj, "t_max", "vanish", 0.95);
  const double rel = config::positive_or(vj, "relative_tolerance", "vanish", 1e-6);
  const Vec<2> x0 = inclusion_center<2>(cfg);
  const auto model = background_model<2>(cfg, x0);
  const auto meshes = reference_meshes<2>(cfg);
  const auto opt = corrector_options<2>(cfg);
  VanishingResult vr;
  {
    Stopwatch sw(out.timings["bisection"]);
    vr = find_vanishing_inclusion<2>(P, N, axis, model, meshes.back(), t_max, opt);
  }
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& [t, m] : vr.history) hist.push_back({t, m});
  out.results["vanish"] = {{"t_star", vr.t_star},     {"M_ll", vr.M_ll},          {"integral_abs", vr.integral_abs},
                           {"integral", vr.integral}, {"iterations", vr.iterations}, {"first_order_norm", vr.first_order_norm},
                           {"history", hist}};
  out.tolerances["vanishing_relative"] = rel;
  out.checks.push_back(check_le("M_ll_vanishes", std::abs(vr.M_ll), rel * vr.integral_abs));
  out.checks.push_back(check_ge("integral_nonzero", std::abs(vr.integral), 1e-3 * vr.integral_abs));
  const auto D1 = profiles::combine<2>(1.0, P, -vr.t_star, N);
  DiffusionCorrectors<2> dc(meshes.back(), D1, model, opt);
  const auto M = tensor_M(dc, 1).canonical;
  out.tensors["M"] = to_json(M);
  if (!cfg.contains("validation")) return;
  auto st = disk_settings(cfg);
  const double ratio_tol = config::positive_or(vj, "ratio_tolerance", "vanish", 0.3);
  const double slope_min = config::number_or(vj, "min_before_slope", "vanish", 2.6);
  const double eps_cmp = config::positive_or(vj, "compare_eps", "vanish", 0.1);
  ResidualStudy<2> s;
  {
    Stopwatch sw(out.timings["fem_study"]);
    s = run_diffusion_study(st, D1, model, M, nullptr, ExpansionBranch::diffusion_M_M2, nullptr, 3.0, 3.0);
  }
  // Constant inclusion with the same sup norm at the comparison ε.
  const double sup = sup_difference(D1, profiles::zero<2>(), dc.mesh());
  auto cst = st;
  cst.eps = {eps_cmp};
  cst.estimate_floor = false;
  double vanishing_at = 0.0, constant_at = 0.0;
  {
    Stopwatch sw(out.timings["fem_compare"]);
    auto sv = st;
    sv.eps = {eps_cmp};
    sv.estimate_floor = false;
    vanishing_at = diffusion_residual_study(sv, D1, model, M, nullptr, ExpansionBranch::diffusion_M_M2).samples[0].before;
    constant_at =
        diffusion_residual_study(cst, profiles::constant<2>(sup), model, M, nullptr, ExpansionBranch::diffusion_M_M2).samples[0].before;
  }
  out.results["study"] = study_json(s);
  out.results["comparison"] = {{"eps", eps_cmp}, {"vanishing", vanishing_at}, {"constant", constant_at}, {"sup_norm", sup}};
  out.tolerances["ratio"] = ratio_tol;
  out.tolerances["min_before_slope"] = slope_min;
  out.checks.push_back(check_le("perturbation_ratio_vs_constant", vanishing_at / constant_at, ratio_tol));
  out.checks.push_back(check_ge("before_slope", s.before.slope, slope_min));
  out.rates = rates_csv(s);
  study_traces(s, out);
}

inline void task_equivalence(const nlohmann::json& cfg, TaskOutput& out) {
  const Vec<2> x0 = inclusion_center<2>(cfg);
  const auto D1 = inclusion_profile<2>(cfg);
  const auto model = background_model<2>(cfg, x0);
  if (!model.is_constant()) throw ConfigError("background", "equivalence requires a constant background");
  const nlohmann::json ej = cfg.contains("equivalence") ? cfg.at("equivalence") : nlohmann::json::object();
  const double first_tol = config::positive_or(ej, "first_order_tolerance", "equivalence", 1e-3);
  const double zero_tol = config::positive_or(ej, "zero_order_tolerance", "equivalence", 1e-6);
  const double min_slope = config::number_or(ej, "min_bohm_slope", "equivalence", 1.7);
  const double D0 = model.D0_center();
  const auto q1 = bohm_potential<2>(D0, D1);
  const auto meshes = reference_meshes<2>(cfg);
  const auto opt = corrector_options<2>(cfg);
  std::vector<EquivalenceReport> reps;
  {
    Stopwatch sw(out.timings["tensors"]);
    for (const auto& m : meshes) {
      DiffusionCorrectors<2> dc(m, D1, model, opt);
      HelmholtzCorrectors<2> hc(m, q1, opt);
      reps.push_back(equivalence_report(dc, hc));
    }
  }
  nlohmann::json lv = nlohmann::json::array();
  for (const auto& r : reps) lv.push_back(to_json(r));
  out.results["levels"] = lv;
  double first = reps.back().first_order_rel, zero = reps.back().zero.corrected;
  if (reps.size() == 2) {
    const double ratio = mesh_ratio(meshes);
    const Eigen::MatrixXd M = richardson(reps[0].M, reps[1].M, ratio);
    const Eigen::MatrixXd Q = richardson(reps[0].Q_sum, reps[1].Q_sum, ratio);
    first = (M - Q).cwiseAbs().maxCoeff() / std::max(M.cwiseAbs().maxCoeff(), 1e-300);
    // The corrected functional converges at fourth order.
    zero = richardson(reps[0].zero.corrected, reps[1].zero.corrected, ratio, 4.0);
    out.results["richardson"] = {{"ratio", ratio}, {"M", matrix_json(M)}, {"D0_Q_plus_Q0", matrix_json(Q)}, {"zero_order", zero}};
  }
  const double zero_rel = std::abs(zero) / std::max(std::abs(reps.back().zero.Q00), 1e-300);
  out.tensors["M_first_order"] = matrix_json(reps.back().M);
  out.tensors["D0_Q_plus_Q0_first_order"] = matrix_json(reps.back().Q_sum);
  // FEM Bohm pair on two validation levels.
  const auto& v = config::child(cfg, "validation", "");
  const double eps = config::positive_or(v, "eps", "validation", 0.2);
  const int K = config::integer_or(v, "inclusion_rings", "validation", 8);
  const int nb = config::integer_or(v, "boundary_nodes", "validation", 60);
  const auto g = config::flux(v.contains("flux") ? v.at("flux") : nlohmann::json::object(), "validation.flux");
  std::vector<BohmPairCheck> bp;
  std::vector<double> hs;
  {
    Stopwatch sw(out.timings["bohm_pair"]);
    for (int L : {1, 2}) {
      auto m = std::make_shared<const VolumeMesh<2>>(graded_inclusion_disk_mesh(x0, eps, L * K, L * nb));
      bp.push_back(bohm_pair_check<2>(m, D0, D1, q1, x0, eps, g));
      double h = 0.0;
      for (double d : m->cell_diameters) h = std::max(h, d);
      hs.push_back(h);
      if (L == 2) {
        NeumannProblem<2> p;
        p.mesh = m;
        p.diffusion = perturbed_diffusion<2>([D0](const Vec<2>&) { return D0; }, D1, x0, eps);
        p.flux = g;
        out.traces["bohm_u.csv"] = trace_csv(solve_diffusion(p).trace);
      }
    }
  }
  const double slope = std::log(bp[0].discrepancy / bp[1].discrepancy) / std::log(hs[0] / hs[1]);
  out.results["bohm_pair"] = {{"discrepancy", {bp[0].discrepancy, bp[1].discrepancy}},
                              {"relative", {bp[0].relative(), bp[1].relative()}},
                              {"mesh_size", {hs[0], hs[1]}},
                              {"observed_order", slope}};
  out.tolerances = {{"first_order_relative", first_tol}, {"zero_order_relative", zero_tol}, {"min_bohm_slope", min_slope}};
  out.checks.push_back(check_le("first_order_equivalence", first, first_tol));
  out.checks.push_back(check_le("zero_order_identity", zero_rel, zero_tol));
  out.checks.push_back(check_ge("bohm_pair_refinement_order", slope, min_slope));
}

inline void task_convergence(const nlohmann::json& cfg, TaskOutput& out) {
  const auto st = disk_settings(cfg);
  const auto D1 = inclusion_profile<2>(cfg);
  const auto model = background_model<2>(cfg, st.x0);
  const nlohmann::json cj = cfg.contains("convergence") ? cfg.at("convergence") : nlohmann::json::object();
  const std::string br = config::string_or(cj, "branch", "convergence", "diffusion_M_M2");
  ExpansionBranch branch;
  if (br == "diffusion_M_M2")
    branch = ExpansionBranch::diffusion_M_M2;
  else if (br == "diffusion_M_eps")
    branch = ExpansionBranch::diffusion_M_eps;
  else
    throw ConfigError("convergence.branch", "unknown branch '" + br + "'");
  const double before_target = config::number_or(cj, "before_slope", "convergence", 2.0);
  const double slack = config::positive_or(cj, "before_slack", "convergence", 0.3);
  const double after_min = config::number_or(cj, "min_after_slope", "convergence", 2.6);
  if (!model.is_constant() && st.green.method == GreenMethod::disk_closed_form)
    throw ConfigError("validation.green", "a variable background needs the fem_multipole Green traces");
  const auto meshes = reference_meshes<2>(cfg);
  LevelTensors<2> lt;
  {
    Stopwatch sw(out.timings["tensor_M"]);
    lt = level_tensors<2>(meshes, D1, model, corrector_options<2>(cfg), st.prediction.order, out);
  }
  const auto& dc = *lt.correctors.back();
  PolarizationTensor M2;
  const PolarizationTensor* M2p = nullptr;
  if (!model.is_constant() && branch == ExpansionBranch::diffusion_M_M2) {
    Stopwatch sw(out.timings["tensor_M2"]);
    M2 = tensor_M2(dc, st.prediction.order);
    M2p = &M2;
    out.tensors["M2"] = to_json(M2);
  }
  std::function<PolarizationTensor(double)> Me;
  if (branch == ExpansionBranch::diffusion_M_eps) {
    const int order = st.prediction.order;
    Me = [&dc, order](double eps) { return tensor_M_eps(dc, eps, order); };
  }
  ResidualStudy<2> s;
  {
    Stopwatch sw(out.timings["fem_study"]);
    s = run_diffusion_study(st, D1, model, lt.combined, M2p, branch, Me, before_target, after_min);
  }
  out.results["study"] = study_json(s);
  out.tolerances = {{"before_slope", before_target}, {"before_slack", slack}, {"min_after_slope", after_min}};
  out.checks.push_back(check_in("before_slope", s.before.slope, before_target - slack, before_target + slack));
  out.checks.push_back(check_ge("after_slope", s.after.slope, after_min));
  out.rates = rates_csv(s);
  study_traces(s, out);
}

inline void task_helmholtz(const nlohmann::json& cfg, TaskOutput& out) {
  auto st = HelmholtzStudySettings{};
  st.disk = disk_settings(cfg);
  const auto& hj = config::child(cfg, "helmholtz", "");
  const auto q1 = config::profile<2>(config::child(hj, "q1", "helmholtz"), "helmholtz.q1");
  st.q0 = config::positive_or(hj, "q0", "helmholtz", 1.0);
  st.eta = config::number_or(hj, "eta", "helmholtz", 2.0);
  if (!(st.eta > 0.0 && st.eta <= 2.0)) throw ConfigError("helmholtz.eta", "must lie in (0, 2]");
  st.disk.prediction.order = config::integer_or(cfg.at("validation"), "prediction_order", "validation", 0);
  const double target = config::number_or(hj, "before_slope", "helmholtz", st.eta);
  const double slack = config::positive_or(hj, "before_slack", "helmholtz", 0.3);
  const double after_min = config::number_or(hj, "min_after_slope", "helmholtz", target + 0.6);
  const bool with_eta = config::string_or(hj, "terms", "helmholtz", "Q") == "Q+Q_eta";
  const auto meshes = reference_meshes<2>(cfg);
  const int order = std::max(st.disk.prediction.order, 0);
  PolarizationTensor Q = tensor_Q<2>(q1, *meshes.back(), std::max(order, 1));
  out.tensors["Q"] = to_json(Q);
  std::unique_ptr<HelmholtzCorrectors<2>> hc;
  std::function<PolarizationTensor(double)> Qe;
  if (with_eta) {
    hc = std::make_unique<HelmholtzCorrectors<2>>(meshes.back(), q1, corrector_options<2>(cfg));
    const double eta = st.eta;
    Qe = [&hc, eta](double eps) { return tensor_Q_eta(*hc, eta, eps, 1); };
  }
  ResidualStudy<2> s;
  {
    Stopwatch sw(out.timings["fem_study"]);
    s = helmholtz_residual_study(st, q1, Q, Qe);
    fit_study(s, target, after_min);
  }
  out.results["study"] = study_json(s);
  out.tolerances = {{"before_slope", target}, {"before_slack", slack}, {"min_after_slope", after_min}};
  out.checks.push_back(check_in("before_slope", s.before.slope, target - slack, target + slack));
  out.checks.push_back(check_ge("after_slope", s.after.slope, after_min));
  out.rates = rates_csv(s);
  study_traces(s, out);
}

inline std::string module_of(const std::exception& e) {
  if (dynamic_cast<const SolverError*>(&e) || dynamic_cast<const DependencyError*>(&e)) return "lippmann";
  if (dynamic_cast<const ConditioningError*>(&e) || dynamic_cast<const BracketError*>(&e)) return "tensors";
  if (dynamic_cast<const ConditioningErrorH1*>(&e) || dynamic_cast<const ResolutionError*>(&e)) return "fem";
  return "runtime";
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream os(p);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  os << s;
}

/// Best effort: error reports go to the output directory when it is already known.
inline void write_error_report(const RunResult& rr) {
  if (rr.output_dir.empty()) return;
  std::error_code ec;
  std::filesystem::create_directories(rr.output_dir, ec);
  if (ec) return;
  std::ofstream os(rr.output_dir / "report.json");
  if (os) os << rr.report.dump(2) << "\n";
}

}  // namespace detail

/// Parses, runs and writes all artifacts of one config. Never throws.
inline RunResult run(const nlohmann::json& cfg_in, const RunOptions& ro = {}) {
  RunResult rr;
  nlohmann::json cfg = cfg_in;
  detail::TaskOutput out;
  std::string task;
  if (!ro.output_dir.empty())
    rr.output_dir = ro.output_dir;
  else if (cfg.is_object() && cfg.contains("output_dir") && cfg["output_dir"].is_string())
    rr.output_dir = cfg["output_dir"].get<std::string>();
  try {
    if (!cfg.is_object()) throw ConfigError("", "config must be a JSON object");
    task = config::string_or(cfg, "task", "", "");
    if (task.empty()) throw ConfigError("task", "missing");
    bool known = false;
    for (const auto& t : list_tasks()) known = known || t.name == task;
    if (!known) throw ConfigError("task", "unknown task '" + task + "'");
    const int dim = config::integer_or(cfg, "dimension", "", 2);
    if (dim != 2 && dim != 3) throw ConfigError("dimension", "must be 2 or 3");
    if (dim == 3 && task != "tensors" && task != "properties") throw ConfigError("dimension", "task '" + task + "' supports d = 2 only");
    if (ro.seed >= 0) cfg["seed"] = ro.seed;
    const auto seed = static_cast<std::uint64_t>(config::integer_or(cfg, "seed", "", 20240611));
    std::string dir = ro.output_dir.empty() ? config::string_or(cfg, "output_dir", "", "out") : ro.output_dir;
    rr.output_dir = dir;
    {
      detail::Stopwatch sw(out.timings["total"]);
      if (task == "tensors")
        dim == 2 ? detail::task_tensors<2>(cfg, out) : detail::task_tensors<3>(cfg, out);
      else if (task == "properties")
        dim == 2 ? detail::task_properties<2>(cfg, seed, out) : detail::task_properties<3>(cfg, seed, out);
      else if (task == "vanish_search")
        detail::task_vanish(cfg, out);
      else if (task == "equivalence")
        detail::task_equivalence(cfg, out);
      else if (task == "convergence")
        detail::task_convergence(cfg, out);
      else
        detail::task_helmholtz(cfg, out);
    }
  } catch (const ConfigError& e) {
    rr.exit_code = 2;
    rr.message = e.what();
    rr.report = {{"status", "config_error"}, {"field", e.field}, {"message", e.what()}};
    detail::write_error_report(rr);
    return rr;
  } catch (const std::exception& e) {
    rr.exit_code = 2;
    rr.message = detail::module_of(e) + ": " + e.what();
    rr.report = {{"status", "execution_error"}, {"module", detail::module_of(e)}, {"message", e.what()}};
    detail::write_error_report(rr);
    return rr;
  }
  bool all = true;
  nlohmann::json checks = nlohmann::json::array();
  for (const auto& c : out.checks) {
    all = all && c.pass;
    checks.push_back(to_json(c));
  }
  rr.exit_code = all ? 0 : 1;
  rr.report = {{"task", task},
               {"config", cfg},
               {"config_hash", detail::hex64(fnv1a(cfg.dump()))},
               {"seed", cfg.value("seed", 20240611)},
               {"results", out.results},
               {"tolerances", out.tolerances},
               {"checks", checks},
               {"diagnostics", out.diagnostics},
               {"all_pass", all},
               {"status", all ? "pass" : "threshold_failure"}};
  try {
    namespace fs = std::filesystem;
    fs::create_directories(rr.output_dir / "traces");
    detail::write_text(rr.output_dir / "report.json", rr.report.dump(2) + "\n");
    detail::write_text(rr.output_dir / "tensors.json", out.tensors.dump(2) + "\n");
    detail::write_text(rr.output_dir / "rates.csv", out.rates);
    for (const auto& [n, s] : out.traces) detail::write_text(rr.output_dir / "traces" / n, s);
    for (const auto& [n, s] : out.dumps) detail::write_text(rr.output_dir / n, s);
    nlohmann::json t(out.timings);
    detail::write_text(rr.output_dir / "timings.json", t.dump(2) + "\n");
  } catch (const std::exception& e) {
    rr.exit_code = 2;
    rr.message = std::string("runtime: ") + e.what();
  }
  return rr;
}

inline RunResult run_file(const std::string& path, const RunOptions& ro = {}) {
  std::ifstream is(path);
  if (!is) {
    RunResult rr;
    rr.exit_code = 2;
    rr.message = "cannot read config " + path;
    return rr;
  }
  nlohmann::json cfg;
  try {
    cfg = nlohmann::json::parse(is);
  } catch (const std::exception& e) {
    RunResult rr;
    rr.exit_code = 2;
    rr.message = std::string("config parse error: ") + e.what();
    return rr;
  }
  return run(cfg, ro);
}

}  // namespace ptensor
