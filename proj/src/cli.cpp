#include "flowrecon/cli.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "flowrecon/boosting.hpp"
#include "flowrecon/diffcore.hpp"
#include "flowrecon/error.hpp"
#include "flowrecon/flows.hpp"
#include "flowrecon/parallel.hpp"

namespace flowrecon::cli {

namespace fs = std::filesystem;

namespace {

// Seed streams derived from the run seed.
constexpr std::uint64_t kTrainStream = 1;
constexpr std::uint64_t kMaskStream = 2;
constexpr std::uint64_t kNoiseStream = 3;
constexpr std::uint64_t kUvStream = 4;
constexpr std::uint64_t kSampleStream = 5;
constexpr std::uint64_t kReferenceStream = 6;
constexpr std::uint64_t kClusterStream = 7;
constexpr std::uint64_t kStudyStream = 8;

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config text

ConfigMap parse_config(std::string_view text) {
  ConfigMap out;
  std::string section;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view raw = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (auto hash = raw.find('#'); hash != std::string_view::npos) raw = raw.substr(0, hash);
    std::string line = trim(raw);
    if (line.empty()) {
      if (nl == text.size()) break;
      continue;
    }
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config line " + std::to_string(line_no) + ": unterminated section");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      continue;
    }
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value', got '" + line + "'");
    }
    std::string key = trim(std::string_view(line).substr(0, eq));
    std::string value = trim(std::string_view(line).substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    if (!section.empty()) key = section + "." + key;
    if (!out.emplace(key, value).second) {
      throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    }
    if (nl == text.size()) break;
  }
  return out;
}

std::string format_config(const ConfigMap& cfg) {
  std::string s;
  for (const auto& [k, v] : cfg) s += k + " = " + v + "\n";
  return s;
}

const std::vector<std::pair<std::string, std::string>>& config_keys() {
  static const std::vector<std::pair<std::string, std::string>> keys = {
      {"task", ""},
      {"seed", ""},
      {"output", "flowrecon_out"},
      {"model.steps", "2"},
      {"model.layers_per_step", "2"},
      {"model.coupling", "affine"},
      {"model.hidden", "32"},
      {"model.residual_blocks", "1"},
      {"model.activation", "tanh"},
      {"model.spline_bins", "8"},
      {"model.tail_bound", "3"},
      {"model.scale_bound", "3"},
      {"model.elementwise_output", "true"},
      {"model.output_shift", "auto"},
      {"model.output_log_scale", "auto"},
      {"model.positive_output", "false"},
      {"sampler.scheme", "srs"},
      {"sampler.grouping", "pairs"},
      {"sampler.maximin", "false"},
      {"sampler.candidates", "10"},
      {"fd.weight", "0"},
      {"fd.step", "0.001"},
      {"fd.directions", "1"},
      {"fd.bidirectional", "true"},
      {"boost.stages", "1"},
      {"boost.stage_steps", "0"},
      {"boost.weight_step", "0.1"},
      {"boost.weight_tolerance", "0.0001"},
      {"boost.weight_iters", "50"},
      {"boost.weight_samples", "256"},
      {"optim.steps", "1000"},
      {"optim.batch_size", "32"},
      {"optim.learning_rate", "0.001"},
      {"optim.entropy", "true"},
      {"problem.image", ""},
      {"problem.phantom", "auto"},
      {"problem.size", "auto"},
      {"problem.asymmetry", "0"},
      {"problem.sigma", "auto"},
      {"problem.regularizer", "auto"},
      {"problem.lambda", "0"},
      {"problem.accel", "4"},
      {"problem.center_fraction", "0.08"},
      {"problem.mask", ""},
      {"problem.uv", ""},
      {"problem.uv_count", "64"},
      {"problem.uv_max_freq", "8"},
      {"problem.amplitude_only", "false"},
      {"eval.samples", "1000"},
      {"eval.k", "5"},
      {"eval.reference_samples", "auto"},
      {"eval.modes", "0"},
      {"eval.scheme", "srs"},
      {"study.schemes", "srs,lhs,lpss,sobol"},
      {"study.n", "64"},
      {"study.d", "2"},
      {"study.replicates", "500"},
      {"study.function", "additive"},
  };
  return keys;
}

Task parse_task(std::string_view name) {
  if (name == "density2d") return Task::density2d;
  if (name == "mri") return Task::mri;
  if (name == "interferometry") return Task::interferometry;
  if (name == "design_study") return Task::design_study;
  throw ConfigError("invalid value for 'task': '" + std::string(name) +
                    "' (density2d, mri, interferometry, design_study)");
}

std::string_view task_name(Task t) {
  switch (t) {
    case Task::density2d: return "density2d";
    case Task::mri: return "mri";
    case Task::interferometry: return "interferometry";
    case Task::design_study: return "design_study";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Typed field access with errors that name the key

namespace {

class Fields {
 public:
  explicit Fields(ConfigMap& m) : m_(m) {}

  std::string& str(const std::string& key) { return m_.at(key); }

  [[noreturn]] void bad(const std::string& key, const std::string& expected) const {
    throw ConfigError("invalid value for '" + key + "': expected " + expected + ", got '" + m_.at(key) + "'");
  }

  std::uint64_t u64(const std::string& key) {
    const std::string& v = m_.at(key);
    std::uint64_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) bad(key, "a non-negative integer");
    return out;
  }

  std::size_t count(const std::string& key, std::size_t lo) {
    std::uint64_t v = u64(key);
    if (v < lo) bad(key, "an integer >= " + std::to_string(lo));
    return static_cast<std::size_t>(v);
  }

  double real(const std::string& key, double lo, double hi, bool open_lo = false) {
    const std::string& v = m_.at(key);
    double out = 0.0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out)) bad(key, "a number");
    if (out < lo || out > hi || (open_lo && out == lo)) {
      bad(key, std::string("a number in ") + (open_lo ? "(" : "[") + fmt(lo) + ", " + fmt(hi) + "]");
    }
    return out;
  }

  bool flag(const std::string& key) {
    std::string v = lower(m_.at(key));
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    bad(key, "true or false");
  }

  template <class T, class Parse>
  T named(const std::string& key, Parse parse) {
    try {
      return parse(lower(m_.at(key)));
    } catch (const ConfigError& e) {
      throw ConfigError("invalid value for '" + key + "': " + e.what());
    }
  }

  bool is_auto(const std::string& key) const { return m_.at(key) == "auto"; }
  void set(const std::string& key, std::string v) { m_[key] = std::move(v); }

 private:
  ConfigMap& m_;
};

constexpr double kHuge = 1e300;

std::string resolve_path(const std::string& p, const fs::path& base) {
  if (p.empty()) return p;
  fs::path path(p);
  if (path.is_relative() && !base.empty()) path = base / path;
  return path.lexically_normal().string();
}

void require_file(const std::string& key, const std::string& path) {
  if (!path.empty() && !fs::is_regular_file(path)) {
    throw ConfigError("file for '" + key + "' not found: " + path);
  }
}

PssGrouping grouping_for(const std::string& name, std::size_t d) {
  if (name == "pairs") return PssGrouping::consecutive_pairs(d);
  if (name == "singletons") return PssGrouping::singletons(d);
  if (name == "single") return PssGrouping::single_group(d);
  throw ConfigError("unknown grouping '" + name + "' (pairs, singletons, single)");
}

SamplerConfig sampler_from(const std::string& scheme, const std::string& grouping, bool maximin,
                           std::size_t candidates, std::size_t dim) {
  SamplerConfig s;
  s.scheme = parse_scheme(lower(scheme));
  s.maximin = maximin;
  s.n_candidates = candidates;
  if (dim > 0) s.grouping = grouping_for(grouping, dim);
  return s;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(lower(item));
  }
  return out;
}

Image load_truth(const ProblemSettings& p) {
  if (!p.image_path.empty()) return decode_pgm(read_file(p.image_path));
  return make_phantom(p.phantom, p.size, p.asymmetry);
}

double dc_magnitude_unitary(const Image& img) {
  double s = std::accumulate(img.data.begin(), img.data.end(), 0.0);
  return std::abs(s) / std::sqrt(static_cast<double>(img.rows * img.cols));
}

}  // namespace

RunConfig resolve_config(const ConfigMap& raw, const fs::path& base_dir) {
  ConfigMap m;
  std::set<std::string> known;
  for (const auto& [k, v] : config_keys()) {
    m[k] = v;
    known.insert(k);
  }
  for (const auto& [k, v] : raw) {
    if (!known.count(k)) throw ConfigError("unknown config key '" + k + "'");
    m[k] = v;
  }
  for (const char* req : {"task", "seed"}) {
    if (m[req].empty()) throw ConfigError("missing required config key '" + std::string(req) + "'");
  }

  Fields f(m);
  RunConfig cfg;
  cfg.task = parse_task(lower(f.str("task")));
  f.set("task", std::string(task_name(cfg.task)));
  cfg.seed = f.u64("seed");
  if (f.str("output").empty()) f.bad("output", "a directory");
  cfg.output = f.str("output");

  // Study settings are validated for every task so typos surface early.
  cfg.study.n = f.count("study.n", 1);
  cfg.study.d = f.count("study.d", 1);
  cfg.study.replicates = f.count("study.replicates", 30);
  cfg.study.function = f.named<TestFunction>("study.function", [](const std::string& s) { return parse_test_function(s); });
  auto study_schemes = split_list(f.str("study.schemes"));
  if (study_schemes.empty()) f.bad("study.schemes", "a comma-separated scheme list");

  // Problem
  ProblemSettings& p = cfg.problem;
  const Task t = cfg.task;
  p.image_path = resolve_path(f.str("problem.image"), base_dir);
  require_file("problem.image", p.image_path);
  f.set("problem.image", p.image_path);
  if (f.is_auto("problem.phantom")) f.set("problem.phantom", t == Task::density2d ? "two_blob" : "ring");
  p.phantom = f.named<PhantomKind>("problem.phantom", [](const std::string& s) { return parse_phantom(s); });
  if (f.is_auto("problem.size")) f.set("problem.size", t == Task::density2d ? "16" : (t == Task::mri ? "32" : "16"));
  p.size = f.count("problem.size", 8);
  p.asymmetry = f.real("problem.asymmetry", 0.0, kHuge);
  if (f.is_auto("problem.regularizer")) f.set("problem.regularizer", t == Task::density2d ? "none" : "tv");
  p.regularizer = f.named<Regularizer>("problem.regularizer", [](const std::string& s) { return parse_regularizer(s); });
  p.lambda = f.real("problem.lambda", 0.0, kHuge);
  p.accel = f.real("problem.accel", 1.0, kHuge);
  p.center_fraction = f.real("problem.center_fraction", 0.0, 1.0);
  p.mask_path = resolve_path(f.str("problem.mask"), base_dir);
  require_file("problem.mask", p.mask_path);
  f.set("problem.mask", p.mask_path);
  p.uv_path = resolve_path(f.str("problem.uv"), base_dir);
  require_file("problem.uv", p.uv_path);
  f.set("problem.uv", p.uv_path);
  p.uv_count = f.count("problem.uv_count", 1);
  p.uv_max_freq = f.real("problem.uv_max_freq", 0.0, kHuge, true);
  p.amplitude_only = f.flag("problem.amplitude_only");

  // sigma "auto": 1% of the DC magnitude of the clean measurement for the
  // imaging tasks; per-point sigma for a uv file.
  if (f.is_auto("problem.sigma")) {
    double sigma = 0.0;
    if (t == Task::mri || (t == Task::interferometry && p.uv_path.empty())) {
      Image truth = load_truth(p);
      double dc = t == Task::mri ? dc_magnitude_unitary(truth)
                                 : std::abs(std::accumulate(truth.data.begin(), truth.data.end(), 0.0));
      sigma = 0.01 * dc;
    }
    f.set("problem.sigma", fmt(sigma));
  }
  p.sigma = f.real("problem.sigma", 0.0, kHuge);
  if ((t == Task::mri || (t == Task::interferometry && p.uv_path.empty())) && p.sigma <= 0.0) {
    f.bad("problem.sigma", "a positive noise level");
  }

  // Model
  TrainConfig& tr = cfg.train;
  FlowConfig& fl = tr.flow;
  fl.steps = f.count("model.steps", 1);
  fl.layers_per_step = f.count("model.layers_per_step", 1);
  fl.coupling = f.named<CouplingKind>("model.coupling", [](const std::string& s) { return parse_coupling(s); });
  fl.hidden = f.count("model.hidden", 1);
  fl.residual_blocks = f.count("model.residual_blocks", 0);
  fl.activation = f.named<Activation>("model.activation", [](const std::string& s) { return parse_activation(s); });
  fl.spline_bins = f.count("model.spline_bins", 2);
  fl.tail_bound = f.real("model.tail_bound", 0.0, kHuge, true);
  fl.scale_bound = f.real("model.scale_bound", 0.0, kHuge, true);
  fl.elementwise_output = f.flag("model.elementwise_output");
  fl.positive_output = f.flag("model.positive_output");
  // The density task lives on the unit square; images start near zero with
  // a narrow spread.
  if (f.is_auto("model.output_shift")) f.set("model.output_shift", t == Task::density2d ? "0.5" : "0");
  if (f.is_auto("model.output_log_scale")) {
    f.set("model.output_log_scale", fmt(t == Task::density2d ? std::log(0.25) : std::log(0.1)));
  }
  fl.output_shift = f.real("model.output_shift", -kHuge, kHuge);
  fl.output_log_scale = f.real("model.output_log_scale", -fl.scale_bound, fl.scale_bound);
  if (std::abs(fl.output_log_scale) >= fl.scale_bound) f.bad("model.output_log_scale", "|value| < model.scale_bound");

  // Optimizer and sampler
  tr.steps = f.count("optim.steps", 1);
  tr.batch_size = f.count("optim.batch_size", 2);
  tr.learning_rate = f.real("optim.learning_rate", 0.0, kHuge, true);
  tr.include_entropy = f.flag("optim.entropy");

  std::size_t dim = 0;
  if (t == Task::density2d) {
    dim = 2;
  } else if (t != Task::design_study) {
    if (!p.image_path.empty()) {
      Image img = load_truth(p);
      dim = img.rows * img.cols;
    } else {
      dim = p.size * p.size;
    }
  }
  const std::string grouping = lower(f.str("sampler.grouping"));
  f.set("sampler.grouping", grouping);
  const bool maximin = f.flag("sampler.maximin");
  const std::size_t candidates = f.count("sampler.candidates", 1);
  try {
    tr.sampler = sampler_from(f.str("sampler.scheme"), grouping, maximin, candidates, dim);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("invalid value for 'sampler.scheme' or 'sampler.grouping': ") + e.what());
  }
  f.set("sampler.scheme", std::string(scheme_name(tr.sampler.scheme)));

  // FD penalty
  tr.fd.weight = f.real("fd.weight", 0.0, kHuge);
  tr.fd.step = f.real("fd.step", 0.0, kHuge, true);
  tr.fd.n_directions = f.count("fd.directions", 1);
  tr.fd.bidirectional = f.flag("fd.bidirectional");

  // Boosting
  tr.stages = f.count("boost.stages", 1);
  tr.stage_steps = f.count("boost.stage_steps", 0);
  tr.weights.step = f.real("boost.weight_step", 0.0, kHuge, true);
  tr.weights.tolerance = f.real("boost.weight_tolerance", 0.0, kHuge);
  tr.weights.max_iters = f.count("boost.weight_iters", 1);
  tr.weights.mc_samples = f.count("boost.weight_samples", 2);
  tr.weights.sampler = tr.sampler;
  tr.seed = mix_seed(cfg.seed, kTrainStream);

  // Evaluation
  cfg.eval.samples = f.count("eval.samples", 2);
  cfg.eval.k = f.count("eval.k", 1);
  if (f.is_auto("eval.reference_samples")) f.set("eval.reference_samples", m["eval.samples"]);
  cfg.eval.reference_samples = f.count("eval.reference_samples", 2);
  if (cfg.task == Task::density2d && (cfg.eval.k >= cfg.eval.samples || cfg.eval.k >= cfg.eval.reference_samples)) {
    f.bad("eval.k", "a value below eval.samples and eval.reference_samples");
  }
  cfg.eval.modes = f.count("eval.modes", 0);
  if (cfg.eval.modes > cfg.eval.samples) f.bad("eval.modes", "at most eval.samples");
  try {
    cfg.eval.sampler = sampler_from(f.str("eval.scheme"), grouping, maximin, candidates, dim);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("invalid value for 'eval.scheme': ") + e.what());
  }
  f.set("eval.scheme", std::string(scheme_name(cfg.eval.sampler.scheme)));

  for (const auto& name : study_schemes) {
    try {
      cfg.study.schemes.push_back(sampler_from(name, grouping, maximin, candidates, cfg.study.d));
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("invalid value for 'study.schemes': ") + e.what());
    }
  }

  cfg.resolved = m;
  return cfg;
}

// ---------------------------------------------------------------------------
// Problems

BuiltProblem build_problem(const RunConfig& cfg) {
  const ProblemSettings& p = cfg.problem;
  BuiltProblem out;
  InverseProblem& prob = out.problem;
  prob.reg = p.regularizer;
  prob.reg_weight = p.lambda;
  switch (cfg.task) {
    case Task::density2d: {
      Image img = load_truth(p);
      prob.op = ForwardOperator::image_energy(img);
      prob.sigma = 1.0;
      out.density.emplace(img);
      // Mean of the target: each cell contributes its mass at its center.
      const auto& mass = out.density->cell_masses();
      double mx = 0.0, my = 0.0;
      for (std::size_t r = 0; r < img.rows; ++r) {
        for (std::size_t c = 0; c < img.cols; ++c) {
          double w = mass[r * img.cols + c];
          mx += w * (static_cast<double>(c) + 0.5) / static_cast<double>(img.cols);
          my += w * (static_cast<double>(r) + 0.5) / static_cast<double>(img.rows);
        }
      }
      out.reference_truth = {mx, my};
      break;
    }
    case Task::mri: {
      Image truth = load_truth(p);
      SamplingMask mask = p.mask_path.empty()
                              ? make_cartesian_mask(truth.rows, truth.cols, p.accel, p.center_fraction,
                                                    mix_seed(cfg.seed, kMaskStream))
                              : mask_from_csv(read_file(p.mask_path));
      if (mask.height != truth.rows || mask.width != truth.cols) {
        throw DimensionError("mask is " + std::to_string(mask.height) + "x" + std::to_string(mask.width) +
                             " but the image is " + std::to_string(truth.rows) + "x" + std::to_string(truth.cols));
      }
      prob.op = ForwardOperator::masked_fft(mask);
      prob.sigma = p.sigma;
      prob.y = prob.op.measure(truth, p.sigma, mix_seed(cfg.seed, kNoiseStream));
      Image zf(truth.rows, truth.cols);
      prob.op.adjoint(prob.y, zf.data);
      out.zero_filled = std::move(zf);
      out.reference_truth = truth.data;
      prob.ground_truth = truth;
      out.truth = std::move(truth);
      break;
    }
    case Task::interferometry: {
      Image truth = load_truth(p);
      UvTable uv = p.uv_path.empty() ? random_uv_table(p.uv_count, p.uv_max_freq, p.sigma, mix_seed(cfg.seed, kUvStream))
                                     : uv_from_csv(read_file(p.uv_path));
      prob.op = ForwardOperator::sparse_visibility(truth.rows, truth.cols, uv, p.amplitude_only);
      prob.sigma = p.sigma;
      prob.y = prob.op.measure(truth, p.sigma, mix_seed(cfg.seed, kNoiseStream));
      out.reference_truth = truth.data;
      prob.ground_truth = truth;
      out.truth = std::move(truth);
      break;
    }
    case Task::design_study:
      throw ConfigError("task design_study has no measurement problem");
  }
  prob.validate();
  return out;
}

// ---------------------------------------------------------------------------
// Artifacts

namespace {

void put(const fs::path& dir, const std::string& name, std::string_view bytes) {
  write_file_atomic((dir / name).string(), bytes);
}

nlohmann::ordered_json write_map(const fs::path& dir, const std::string& name, const std::vector<double>& values,
                                 std::size_t h, std::size_t w) {
  Image img(h, w);
  img.data = values;
  auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) hi = lo + 1.0;
  put(dir, name + ".pgm", encode_pgm(img, 16, lo, hi));
  put(dir, name + ".f32", encode_f32(values));
  nlohmann::ordered_json j;
  j["pgm"] = name + ".pgm";
  j["raw"] = name + ".f32";
  j["height"] = h;
  j["width"] = w;
  j["bits"] = 16;
  j["lo"] = lo;
  j["hi"] = hi;
  j["decode"] = "value = lo + pixel / 65535 * (hi - lo)";
  return j;
}

std::string metrics_csv(const std::vector<std::pair<std::string, double>>& rows) {
  std::string s = "metric,value\n";
  for (const auto& [k, v] : rows) s += k + "," + fmt(v) + "\n";
  return s;
}

}  // namespace

std::string variance_study_csv(const std::vector<VarianceRow>& rows) {
  std::string s = "scheme,variance,ratio_to_srs\n";
  for (const auto& r : rows) s += std::string(scheme_name(r.scheme)) + "," + fmt(r.variance) + "," + fmt(r.ratio_to_srs) + "\n";
  return s;
}

RunResult run(const RunConfig& cfg) {
  RunResult res;
  res.directory = cfg.output;
  fs::create_directories(cfg.output);

  if (cfg.task == Task::design_study) {
    auto rows = mc_variance_study(cfg.study.schemes, cfg.study.function, cfg.study.n, cfg.study.d,
                                  cfg.study.replicates, mix_seed(cfg.seed, kStudyStream));
    for (const auto& r : rows) res.metrics.emplace_back("variance_ratio_" + std::string(scheme_name(r.scheme)), r.ratio_to_srs);
    put(cfg.output, "design_study.csv", variance_study_csv(rows));
    put(cfg.output, "metrics.csv", metrics_csv(res.metrics));
    put(cfg.output, "config.resolved", format_config(cfg.resolved));
    return res;
  }

  BuiltProblem built = build_problem(cfg);
  PosteriorFit fit = fit_posterior(built.problem, cfg.train);

  const bool image = cfg.task != Task::density2d;
  const std::size_t h = image ? built.problem.height() : 0;
  const std::size_t w = image ? built.problem.width() : 0;
  PosteriorSamples ps = posterior_sample(fit.model, cfg.eval.samples, cfg.eval.sampler,
                                         mix_seed(cfg.seed, kSampleStream), h, w);
  for (double v : ps.samples.data) {
    if (!std::isfinite(v)) throw NumericError("posterior samples contain non-finite values");
  }
  StatsReport stats = posterior_stats(ps, std::span<const double>(built.reference_truth));

  auto& mt = res.metrics;
  const LossBreakdown& last = fit.history.back();
  mt.emplace_back("final_total_loss", last.total);
  mt.emplace_back("final_negative_elbo", last.negative_elbo);
  mt.emplace_back("components", static_cast<double>(fit.model.size()));
  mt.emplace_back("mean_of_std", stats.mean_of_std);
  mt.emplace_back("mean_abs_error", *stats.mean_abs_error);
  if (cfg.task == Task::density2d) {
    Matrix reference = built.density->sample_grid(cfg.eval.reference_samples, mix_seed(cfg.seed, kReferenceStream));
    PrdcReport pr = prdc(reference, ps.samples, cfg.eval.k);
    mt.emplace_back("precision", pr.precision);
    mt.emplace_back("recall", pr.recall);
    mt.emplace_back("density", pr.density);
    mt.emplace_back("coverage", pr.coverage);
    mt.emplace_back("k", static_cast<double>(pr.k));
  } else {
    mt.emplace_back("psnr_mean", psnr(stats.mean_image, built.reference_truth));
    if (built.zero_filled) mt.emplace_back("psnr_zero_filled", psnr(built.zero_filled->data, built.reference_truth));
  }
  if (cfg.eval.modes >= 2) {
    ModeClusters mc = mode_cluster(ps, cfg.eval.modes, mix_seed(cfg.seed, kClusterStream),
                                   std::span<const double>(built.reference_truth));
    for (std::size_t c = 0; c < mc.modes.size(); ++c) {
      std::string tag = "mode" + std::to_string(c + 1);
      mt.emplace_back(tag + "_fraction", static_cast<double>(mc.sizes[c]) / static_cast<double>(ps.samples.rows));
      mt.emplace_back(tag + "_mean_abs_error", *mc.modes[c].mean_abs_error);
    }
  }

  // Artifacts. Maps are 1 x d rows for the density task.
  const fs::path& dir = cfg.output;
  const std::size_t mh = image ? h : 1;
  const std::size_t mw = image ? w : ps.samples.cols;
  auto bytes = serialize(fit.model);
  put(dir, "model.bin", std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  put(dir, "loss_history.csv", loss_history_csv(fit.history));
  put(dir, "samples.f32", encode_f32(ps.samples.data));
  nlohmann::ordered_json side;
  side["file"] = "samples.f32";
  side["dtype"] = "float32";
  side["byte_order"] = "little";
  side["rows"] = ps.samples.rows;
  side["cols"] = ps.samples.cols;
  side["image_height"] = h;
  side["image_width"] = w;
  put(dir, "samples.json", side.dump(2) + "\n");
  nlohmann::ordered_json maps;
  maps["mean"] = write_map(dir, "mean", stats.mean_image, mh, mw);
  maps["std"] = write_map(dir, "std", stats.std_image, mh, mw);
  maps["abserr"] = write_map(dir, "abserr", stats.abs_error_image, mh, mw);
  put(dir, "maps.json", maps.dump(2) + "\n");
  put(dir, "metrics.csv", metrics_csv(mt));
  put(dir, "config.resolved", format_config(cfg.resolved));
  return res;
}

// ---------------------------------------------------------------------------
// Command line

namespace {

template <class Fn>
int guarded(std::ostream& err, Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DimensionError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const TrainingError& e) {
    err << "error: training diverged at step " << e.step() << ": " << e.what() << "\n";
    return kExitNumeric;
  } catch (const NumericError& e) {
    err << "error: " << e.what() << "\n";
    return kExitNumeric;
  }
}

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"flowrecon: variational posterior estimation with normalizing flows"};
  app.require_subcommand(1);

  // run
  auto* run_cmd = app.add_subcommand("run", "Train, sample and evaluate from a config file");
  std::string config_path, output_dir, scheme, coupling;
  std::size_t stages = 0;
  bool no_fd = false;
  std::vector<std::string> sets;
  run_cmd->add_option("config", config_path, "Config file (key = value)")->required();
  run_cmd->add_option("--output", output_dir, "Override the output directory");
  run_cmd->add_flag("--no-fd-penalty", no_fd, "Set fd.weight = 0");
  run_cmd->add_option("--scheme", scheme, "Latent design: srs, lhs, lpss, sobol, ...");
  run_cmd->add_option("--coupling", coupling, "affine or spline");
  run_cmd->add_option("--stages", stages, "Number of boosting components");
  run_cmd->add_option("--set", sets, "Override any key: --set optim.steps=200");

  // design-study
  auto* study_cmd = app.add_subcommand("design-study", "Variance of design means across replicates");
  std::string schemes = "srs,lhs,lpss,sobol", function = "additive", grouping = "pairs", study_out;
  std::size_t sn = 64, sd = 2, reps = 500;
  std::uint64_t study_seed = 0;
  study_cmd->add_option("--schemes", schemes, "Comma-separated schemes");
  study_cmd->add_option("--n", sn, "Points per design");
  study_cmd->add_option("--d", sd, "Dimension");
  study_cmd->add_option("--replicates", reps, "Replicates (>= 30)");
  study_cmd->add_option("--seed", study_seed, "Seed");
  study_cmd->add_option("--function", function, "additive, constant or interaction");
  study_cmd->add_option("--grouping", grouping, "pss/lpss grouping: pairs, singletons, single");
  study_cmd->add_option("--output", study_out, "Write CSV here instead of stdout");

  // export-design
  auto* export_cmd = app.add_subcommand("export-design", "Write one design as CSV");
  std::string ex_scheme, ex_out, ex_grouping = "pairs";
  std::size_t en = 0, ed = 0;
  std::uint64_t ex_seed = 0;
  export_cmd->add_option("--scheme", ex_scheme, "Sampling scheme")->required();
  export_cmd->add_option("--n", en, "Points")->required();
  export_cmd->add_option("--d", ed, "Dimension")->required();
  export_cmd->add_option("--seed", ex_seed, "Seed (ignored by sobol)");
  export_cmd->add_option("--grouping", ex_grouping, "pss/lpss grouping: pairs, singletons, single");
  export_cmd->add_option("--output", ex_out, "Write CSV here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }

  if (*run_cmd) {
    return guarded(err, [&] {
      if (!fs::is_regular_file(config_path)) throw ConfigError("config file not found: " + config_path);
      ConfigMap raw = parse_config(read_file(config_path));
      for (const auto& s : sets) {
        auto eq = s.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
        raw[trim(std::string_view(s).substr(0, eq))] = trim(std::string_view(s).substr(eq + 1));
      }
      if (!output_dir.empty()) raw["output"] = output_dir;
      if (no_fd) raw["fd.weight"] = "0";
      if (!scheme.empty()) raw["sampler.scheme"] = scheme;
      if (!coupling.empty()) raw["model.coupling"] = coupling;
      if (stages > 0) raw["boost.stages"] = std::to_string(stages);
      RunConfig cfg = resolve_config(raw, fs::path(config_path).parent_path());
      RunResult r = run(cfg);
      out << "wrote " << r.directory.string() << "\n";
      for (const auto& [k, v] : r.metrics) out << k << " = " << fmt(v) << "\n";
      return kExitOk;
    });
  }

  if (*study_cmd) {
    return guarded(err, [&] {
      std::vector<SamplerConfig> list;
      for (const auto& name : split_list(schemes)) {
        list.push_back(sampler_from(name, lower(grouping), false, 10, sd));
      }
      if (list.empty()) throw ConfigError("--schemes is empty");
      auto rows = mc_variance_study(list, parse_test_function(lower(function)), sn, sd, reps, study_seed);
      std::string csv = variance_study_csv(rows);
      if (study_out.empty()) {
        out << csv;
      } else {
        write_file_atomic(study_out, csv);
      }
      return kExitOk;
    });
  }

  if (*export_cmd) {
    return guarded(err, [&] {
      if (en == 0 || ed == 0) throw ConfigError("--n and --d must be positive");
      SamplerConfig s = sampler_from(ex_scheme, lower(ex_grouping), false, 10, ed);
      // Sobol exports the sequence from its start.
      UnitDesign design = s.scheme == Scheme::sobol ? sobol(en, ed) : make_design(s, en, ed, ex_seed);
      std::string csv = design_to_csv(design);
      if (ex_out.empty()) {
        out << csv;
      } else {
        write_file_atomic(ex_out, csv);
      }
      return kExitOk;
    });
  }
  return kExitConfig;
}

}  // namespace flowrecon::cli
