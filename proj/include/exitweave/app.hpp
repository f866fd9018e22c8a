#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "exitweave/backbone.hpp"
#include "exitweave/datahub.hpp"
#include "exitweave/exitpolicy.hpp"
#include "exitweave/trainer.hpp"
#include "exitweave/wpn.hpp"
#include "json.hpp"

namespace exitweave::app {

// ---- run configuration -----------------------------------------------------

// Where the three splits come from.
//   synthetic  Gaussian mixture generated from `seed`
//   container  three files in the repo's dataset container format
//   idx        MNIST-style IDX pairs; val is held out from train
//   cifar10, cifar100  CIFAR binary batches; val is held out from train
struct DataConfig {
  std::string source = "synthetic";
  std::size_t num_classes = 8;
  std::size_t dim = 16;
  std::size_t train_per_class = 500;
  std::size_t val_per_class = 125;
  std::size_t test_per_class = 125;
  double spread = 0.35;
  std::uint64_t seed = 0;
  std::string train;  // container paths
  std::string val;
  std::string test;
  std::string train_images;  // idx paths
  std::string train_labels;
  std::string test_images;
  std::string test_labels;
  std::vector<std::string> train_files;  // cifar batches
  std::string test_file;
  std::size_t val_holdout = 5000;
  double longtail_factor = 1.0;  // applied to the training split only
};

struct RunConfig {
  std::vector<std::size_t> trunk_widths{4, 8, 16, 32};
  // Filled from the data when absent; a mismatch with the data is an error.
  std::optional<std::size_t> input_dim;
  std::optional<std::size_t> num_classes;
  wpn::WpnConfig wpn;  // num_exits follows trunk_widths
  trainer::TrainConfig train;
  DataConfig data;
  std::string output_dir = "runs/default";

  backbone::BackboneConfig backbone_config() const;  // needs dims resolved
  void validate() const;
};

// Parses a config document. Unknown keys (at any level) are a ConfigError
// naming the dotted path.
RunConfig parse_run_config(const nlohmann::json& doc);
RunConfig load_run_config(const std::filesystem::path& path);

// Every field, defaults included.
nlohmann::json to_json(const RunConfig& config);

// 16 hex digits of FNV-1a over the compact dump of to_json(config).
std::string config_hash(const RunConfig& config);

std::string run_id(const RunConfig& config);

struct DataSplits {
  datahub::Dataset train;
  datahub::Dataset val;
  datahub::Dataset test;
  std::vector<std::string> warnings;
};

DataSplits load_data(const DataConfig& config);

// Sets input_dim / num_classes from the data, or checks them against it.
void resolve_dims(RunConfig& config, const DataSplits& data);

// ---- metrics ---------------------------------------------------------------

inline constexpr const char* kMetricsSchema = "exitweave.metrics";
inline constexpr int kMetricsVersion = 1;
inline constexpr const char* kHistorySchema = "exitweave.history";
inline constexpr int kHistoryVersion = 1;

struct AnytimeRow {
  std::size_t exit = 0;  // 1-based
  double accuracy = 0.0;
  double mul_adds = 0.0;
};

struct MetricsRecord {
  std::string run_id;
  std::string config_hash;
  nlohmann::json resolved_config;
  std::string eval_split;
  std::size_t num_samples = 0;
  std::vector<AnytimeRow> anytime;
  std::vector<exitpolicy::BudgetPoint> dynamic;
  std::vector<trainer::ScatterPoint> scatter;
};

// Throws NumericError if any number is non-finite.
nlohmann::json to_json(const MetricsRecord& record);
// Throws CompatibilityError on another schema name or version.
MetricsRecord metrics_from_json(const nlohmann::json& doc);

void write_metrics(const std::filesystem::path& dir, const MetricsRecord& record);
MetricsRecord read_metrics(const std::filesystem::path& path);

nlohmann::json history_to_json(const std::vector<trainer::HistoryRecord>& history,
                               const std::string& run_id, const std::string& config_hash);
void write_history(const std::filesystem::path& dir, const std::vector<trainer::HistoryRecord>& history,
                   const std::string& run_id, const std::string& config_hash);

// Shortest text that reads back to the same double.
std::string format_double(double v);

void write_text_file(const std::filesystem::path& path, const std::string& text);

// ---- commands --------------------------------------------------------------

struct TrainOptions {
  std::filesystem::path config;
  std::optional<std::filesystem::path> out;
  std::optional<std::uint64_t> seed;
};

struct TrainOutcome {
  std::filesystem::path out_dir;
  trainer::TrainResult result;
};

TrainOutcome cmd_train(const TrainOptions& options, std::ostream& log);

struct EvalOptions {
  std::filesystem::path checkpoint;
  std::optional<std::filesystem::path> dataset;  // container file replacing the test split
  std::optional<std::filesystem::path> out;      // defaults to the checkpoint's directory
  std::vector<double> q_grid;                    // empty: default grid
};

std::vector<double> default_q_grid();

// "a,b,c" or "lo:hi:n" (inclusive, n points).
std::vector<double> parse_q_grid(const std::string& text);

MetricsRecord cmd_eval(const EvalOptions& options, std::ostream& log);

struct AllocateOptions {
  std::filesystem::path confidences;
  double q = 0.75;
  std::optional<std::size_t> exits;
  std::optional<std::filesystem::path> out;
};

// N x K table, one row per line, comma separated; blank lines and lines
// starting with '#' are skipped. FormatError names the line.
numkit::Matrix read_confidence_csv(const std::filesystem::path& path);

nlohmann::json cmd_allocate(const AllocateOptions& options, std::ostream& out);

// ---- gradient checks -------------------------------------------------------

struct GradcheckSetup {
  backbone::BackboneConfig backbone{4, {6, 5, 4}, 3};
  wpn::WpnConfig wpn{3, 8, 1, 0.8};
  std::size_t half_batch = 6;
  double lr = 0.1;
  double q = 0.75;
  std::uint64_t seed = 7;
  // Coordinates checked per suite; larger parameter vectors are subsampled.
  std::size_t max_coords = 400;
};

inline constexpr std::size_t kGradcheckMaxBackboneParams = 2000;
inline constexpr double kBackboneGradTolerance = 1e-5;
inline constexpr double kMetaGradTolerance = 1e-4;

struct SuiteResult {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  std::size_t checks = 0;   // analytic entries checked
  std::size_t skipped = 0;  // left out because a ReLU switches inside the stencil
  bool passed = false;      // error within tolerance and at most 10% skipped
};

SuiteResult check_backbone_grads(const GradcheckSetup& setup);
SuiteResult check_meta_weight_grad(const GradcheckSetup& setup);
SuiteResult check_wpn_backward(const GradcheckSetup& setup);
SuiteResult check_end_to_end(const GradcheckSetup& setup);

struct GradcheckReport {
  std::vector<SuiteResult> suites;
  bool passed() const;
};

// Throws UsageError when the backbone exceeds kGradcheckMaxBackboneParams.
GradcheckReport run_gradcheck(const GradcheckSetup& setup);

struct GradcheckOptions {
  std::optional<std::filesystem::path> config;  // default: GradcheckSetup{}
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out;
};

GradcheckReport cmd_gradcheck(const GradcheckOptions& options, std::ostream& out);

// Exit code for an exception escaping a command: 2 when the inputs are at
// fault (usage, config, I/O, file format, checkpoint compatibility), 1 for
// failures during the computation itself.
int exit_code_for(const std::exception& e);

}  // namespace exitweave::app
