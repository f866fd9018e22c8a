#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "exitweave/backbone.hpp"
#include "exitweave/checkpoint.hpp"
#include "exitweave/datahub.hpp"
#include "exitweave/exitpolicy.hpp"
#include "exitweave/wpn.hpp"

namespace exitweave::trainer {

using backbone::Batch;
using backbone::BackboneConfig;
using backbone::BackboneParams;
using numkit::Matrix;

enum class VariantKind {
  L2W,
  Baseline,
  FixedWeightsAscending,
  FixedWeightsDescending,
  VanillaSelection,
  FrozenWpn,
  VanillaMetaObjective,
};

std::string_view to_string(VariantKind v);
VariantKind parse_variant(std::string_view name);

enum class LrSchedule { Cosine, Constant };

std::string_view to_string(LrSchedule s);
LrSchedule parse_schedule(std::string_view name);

struct TrainConfig {
  double alpha = 0.05;   // backbone learning rate (schedule start)
  double beta = 1e-4;    // WPN Adam learning rate, constant
  std::size_t interval = 1;
  double q = 0.75;
  std::size_t epochs = 100;
  std::size_t batch_size = 64;
  VariantKind variant = VariantKind::L2W;
  std::string frozen_wpn_path;
  std::uint64_t seed = 0;
  LrSchedule lr_schedule = LrSchedule::Cosine;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  // Weight-loss scatter points kept for the final epoch (0 disables).
  std::size_t scatter_points = 2000;

  void validate() const;
};

struct TrainState {
  BackboneParams backbone;
  backbone::SgdState sgd;
  wpn::WpnParams wpn;
  wpn::AdamState adam;
  std::size_t iteration = 0;  // mini-batches processed
};

// One point of the weight-loss scatter: a training sample's loss and weight
// at one exit, and whether exit 1 would take it under the budget q.
struct ScatterPoint {
  std::size_t exit = 0;
  double loss = 0.0;
  double weight = 0.0;
  bool selected_by_exit1 = false;
};

// Per-epoch aggregates, filled by the step functions when passed in.
struct StepLog {
  explicit StepLog(std::size_t num_exits = 0);

  std::vector<double> loss_sum;
  std::size_t loss_rows = 0;
  std::vector<double> weight_sum;
  std::vector<double> weight_min;
  std::vector<double> weight_max;
  std::size_t weight_rows = 0;
  std::vector<double> allocation_sum;
  std::size_t allocations = 0;
  std::size_t backbone_updates = 0;
  std::size_t wpn_updates = 0;
  double meta_loss_sum = 0.0;
  std::size_t scatter_cap = 0;
  std::vector<ScatterPoint> scatter;

  void add_losses(const Matrix& losses);
  void add_weights(const Matrix& weights);
  void add_allocation(const exitpolicy::AllocationResult& alloc);
};

struct HistoryRecord {
  std::size_t epoch = 0;
  std::size_t iteration = 0;
  double lr = 0.0;
  std::vector<double> train_loss;       // per exit, epoch mean
  std::vector<double> weight_mean;      // per exit
  std::vector<double> weight_min;
  std::vector<double> weight_max;
  std::vector<double> allocation_mean;  // per exit, mean meta subset size
  double meta_loss_mean = 0.0;
  std::size_t backbone_updates = 0;
  std::size_t wpn_updates = 0;
  std::vector<double> val_anytime_accuracy;
  double val_dynamic_accuracy = 0.0;
  double val_expected_cost = 0.0;
  std::vector<ScatterPoint> scatter;
};

// First and second halves of an (already shuffled) batch. Odd B -> ConfigError.
std::pair<Batch, Batch> split_batch(const Batch& batch);

// Whether the WPN is updated on the mini-batch with 0-based index
// `iteration`: every `interval`-th batch, counting from 1.
bool wpn_update_due(std::size_t iteration, std::size_t interval);

double learning_rate(const TrainConfig& config, std::size_t iteration, std::size_t total_iterations);

// Per-exit constant weights from 0.6 to 1.4 (ascending) or reversed.
std::vector<double> fixed_exit_weights(std::size_t num_exits, bool ascending);

struct MetaObjective {
  double value = 0.0;
  Matrix coeffs;  // B x K; coeffs_jk = 1/N_k if j was allocated to k, else 0
};

// sum_k (1/N_k) sum_{j in subset k} l_j^(k); empty subsets contribute 0.
MetaObjective meta_objective(const backbone::ExitOutputs& outputs,
                             const exitpolicy::AllocationResult& allocation);

// Ablation: each exit's mean loss over the whole meta half.
MetaObjective vanilla_meta_objective(const backbone::ExitOutputs& outputs);

enum class MetaKind { Allocated, Vanilla };

// Everything one WPN update needs, computed from the training half's
// per-sample gradients and the meta half.
struct MetaStep {
  wpn::ForwardResult forward;
  wpn::SampleWeights weights;
  BackboneParams pseudo;
  exitpolicy::AllocationResult allocation;
  double meta_loss = 0.0;
  std::vector<double> meta_grad;     // dL_meta/dTheta_f at the pseudo params
  Matrix weight_grad;                // dL_meta/dw, B x K
  std::vector<double> wpn_grad;      // dL_meta/dTheta_g
};

MetaStep compute_meta_step(const BackboneParams& params, const backbone::PerSampleGrads& grads,
                           const Matrix& train_losses, const wpn::WpnParams& wpn_params,
                           const Batch& meta, double lr, double q, MetaKind kind);

// Pseudo update, meta allocation, WPN update (when due), then the real
// backbone update with the refreshed weights. Does not advance the iteration.
void l2w_substep(TrainState& state, const TrainConfig& config, const Batch& train_half,
                 const Batch& meta_half, double lr, StepLog* log = nullptr,
                 MetaKind kind = MetaKind::Allocated);

// split_batch, then substeps (A trains / B meta) and (B trains / A meta).
void train_step_l2w(TrainState& state, const TrainConfig& config, const Batch& batch, double lr,
                    StepLog* log = nullptr, MetaKind kind = MetaKind::Allocated);

// Plain cumulative-loss step on the full batch.
void train_step_baseline(TrainState& state, const TrainConfig& config, const Batch& batch,
                         double lr, StepLog* log = nullptr);

// Dispatches on config.variant. Advances state.iteration by one.
void train_step_variant(TrainState& state, const TrainConfig& config, const Batch& batch,
                        double lr, StepLog* log = nullptr);

TrainState init_state(const BackboneConfig& backbone_config, const wpn::WpnConfig& wpn_config,
                      const TrainConfig& config);

// Checkpoint arrays: backbone.theta, backbone.velocity, wpn.theta, wpn.adam.m,
// wpn.adam.v. The header records iteration, Adam step and both shapes, plus
// whatever the caller passes as `extra_header`.
checkpoint::Checkpoint state_to_checkpoint(const TrainState& state, const nlohmann::json& extra_header);

// Rebuilds a state; throws CompatibilityError if the stored shapes differ
// from the given configurations.
TrainState state_from_checkpoint(const checkpoint::Checkpoint& ckpt,
                                 const BackboneConfig& backbone_config,
                                 const wpn::WpnConfig& wpn_config);

// Loads the WPN parameters stored in a run checkpoint.
wpn::WpnParams load_frozen_wpn(const std::string& path, const wpn::WpnConfig& expected);

struct TrainResult {
  TrainState state;
  std::vector<HistoryRecord> history;
};

using EpochHook = std::function<void(const HistoryRecord&)>;

TrainResult run_training(const TrainConfig& config, const BackboneConfig& backbone_config,
                         const wpn::WpnConfig& wpn_config, const datahub::Dataset& train_set,
                         const datahub::Dataset& val_set, const EpochHook& on_epoch = {});

}  // namespace exitweave::trainer
