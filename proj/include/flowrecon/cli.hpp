#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "flowrecon/forward_ops.hpp"
#include "flowrecon/metrics.hpp"
#include "flowrecon/variational.hpp"

namespace flowrecon::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;

// Flat "key = value" text. Keys may be written in full (model.steps) or under
// a [model] header. '#' starts a comment.
using ConfigMap = std::map<std::string, std::string>;

ConfigMap parse_config(std::string_view text);
std::string format_config(const ConfigMap& cfg);

/// Every recognized key with its default ("" = required, "auto" = chosen per task).
const std::vector<std::pair<std::string, std::string>>& config_keys();

enum class Task { density2d, mri, interferometry, design_study };
Task parse_task(std::string_view name);
std::string_view task_name(Task t);

struct ProblemSettings {
  std::string image_path;  // PGM; empty means phantom
  PhantomKind phantom = PhantomKind::ring;
  std::size_t size = 32;
  double asymmetry = 0.0;
  double sigma = 0.0;  // <= 0 with a uv file: per-point sigma
  Regularizer regularizer = Regularizer::none;
  double lambda = 0.0;
  double accel = 4.0;
  double center_fraction = 0.08;
  std::string mask_path;
  std::string uv_path;
  std::size_t uv_count = 64;
  double uv_max_freq = 8.0;
  bool amplitude_only = false;
};

struct EvalSettings {
  std::size_t samples = 1000;
  std::size_t k = 5;
  std::size_t reference_samples = 1000;
  std::size_t modes = 0;  // k-means clusters reported when >= 2
  SamplerConfig sampler;  // latent design for the posterior samples
};

struct StudySettings {
  std::vector<SamplerConfig> schemes;
  std::size_t n = 64;
  std::size_t d = 2;
  std::size_t replicates = 500;
  TestFunction function = TestFunction::additive;
};

struct RunConfig {
  Task task = Task::density2d;
  std::uint64_t seed = 0;
  std::filesystem::path output;
  TrainConfig train;
  ProblemSettings problem;
  EvalSettings eval;
  StudySettings study;
  ConfigMap resolved;  // concrete value for every key; rerunning it reproduces the run
};

/// Fills defaults, resolves "auto" values for the task and validates ranges.
/// Relative input paths are taken relative to base_dir. Errors name the key.
RunConfig resolve_config(const ConfigMap& raw, const std::filesystem::path& base_dir = {});

/// Measurement problem for an imaging or density task plus evaluation extras.
struct BuiltProblem {
  InverseProblem problem;
  std::optional<Image> truth;              // image tasks
  std::optional<Image> zero_filled;        // mri: adjoint of the data
  std::optional<ImageDensity> density;     // density2d target
  std::vector<double> reference_truth;     // what abs_error compares against
};

BuiltProblem build_problem(const RunConfig& cfg);

struct RunResult {
  std::filesystem::path directory;
  std::vector<std::pair<std::string, double>> metrics;
};

/// Trains, samples, evaluates and writes all artifacts into cfg.output.
RunResult run(const RunConfig& cfg);

/// scheme,variance,ratio_to_srs with one row per study entry.
std::string variance_study_csv(const std::vector<VarianceRow>& rows);

/// Entry point for the flowrecon executable. Returns the process exit code.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace flowrecon::cli
