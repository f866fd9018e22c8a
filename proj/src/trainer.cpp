#include "exitweave/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <numbers>
#include <string>

#include "exitweave/errors.hpp"

namespace exitweave::trainer {

namespace {

using backbone::ExitOutputs;
using backbone::PerSampleGrads;

struct VariantName {
  VariantKind kind;
  std::string_view name;
};

constexpr VariantName kVariantNames[] = {
    {VariantKind::L2W, "l2w"},
    {VariantKind::Baseline, "baseline"},
    {VariantKind::FixedWeightsAscending, "fixed_ascending"},
    {VariantKind::FixedWeightsDescending, "fixed_descending"},
    {VariantKind::VanillaSelection, "vanilla_selection"},
    {VariantKind::FrozenWpn, "frozen_wpn"},
    {VariantKind::VanillaMetaObjective, "vanilla_meta_objective"},
};

backbone::SgdOptions sgd_options(const TrainConfig& config) {
  return backbone::SgdOptions{config.momentum, config.weight_decay};
}

void require_finite(const Matrix& losses, std::size_t iteration) {
  if (!numkit::all_finite(losses.values())) {
    throw TrainingError("non-finite training loss at iteration " + std::to_string(iteration));
  }
}

void require_finite(const BackboneParams& params, std::size_t iteration) {
  if (!numkit::all_finite(params.values())) {
    throw TrainingError("backbone parameters became non-finite at iteration " + std::to_string(iteration));
  }
}

// Runs `body`, turning numeric failures into training errors that carry the
// iteration number.
template <class F>
void with_iteration_context(std::size_t iteration, F&& body) {
  try {
    body();
  } catch (const NumericError& e) {
    throw TrainingError("numeric failure at iteration " + std::to_string(iteration) + ": " + e.what());
  }
}

void record_scatter(StepLog* log, const ExitOutputs& outputs, const Matrix& weights, double q) {
  if (log == nullptr || log->scatter.size() >= log->scatter_cap) return;
  const auto alloc = exitpolicy::allocate_meta(outputs.confidences, q);
  std::vector<bool> first(outputs.batch, false);
  for (std::size_t j : alloc.subsets.front()) first[j] = true;
  for (std::size_t i = 0; i < outputs.batch; ++i) {
    for (std::size_t k = 0; k < outputs.exits; ++k) {
      if (log->scatter.size() >= log->scatter_cap) return;
      log->scatter.push_back(ScatterPoint{k, outputs.losses(i, k), weights(i, k), first[i]});
    }
  }
}

// Backbone step on sum_k (1/N) sum_i w_ik l_ik for a fixed weight table.
void weighted_backbone_step(TrainState& state, const TrainConfig& config, const Batch& batch,
                            const ExitOutputs& outputs, const Matrix& weights, double lr,
                            StepLog* log) {
  Matrix coeffs = weights;
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (double& c : coeffs.values()) c *= inv_n;
  const auto grad = backbone::grad_exit_losses(state.backbone, batch.x, batch.y, coeffs);
  state.backbone = backbone::sgd_step(state.backbone, grad, lr, sgd_options(config), state.sgd);
  require_finite(state.backbone, state.iteration);
  if (log != nullptr) {
    log->add_losses(outputs.losses);
    log->add_weights(weights);
    log->backbone_updates += 1;
  }
  record_scatter(log, outputs, weights, config.q);
}

// Substep for the variants without a meta update: the weight table comes
// from `make_table` given the training half's outputs.
template <class MakeTable>
void fixed_rule_substep(TrainState& state, const TrainConfig& config, const Batch& train,
                        double lr, StepLog* log, MakeTable&& make_table) {
  with_iteration_context(state.iteration, [&] {
    const auto outputs = backbone::forward_all(state.backbone, train);
    require_finite(outputs.losses, state.iteration);
    const Matrix weights = make_table(outputs);
    weighted_backbone_step(state, config, train, outputs, weights, lr, log);
  });
}

}  // namespace

std::string_view to_string(VariantKind v) {
  for (const auto& entry : kVariantNames) {
    if (entry.kind == v) return entry.name;
  }
  return "unknown";
}

VariantKind parse_variant(std::string_view name) {
  for (const auto& entry : kVariantNames) {
    if (entry.name == name) return entry.kind;
  }
  throw ConfigError("unknown variant '" + std::string(name) + "'");
}

std::string_view to_string(LrSchedule s) { return s == LrSchedule::Cosine ? "cosine" : "constant"; }

LrSchedule parse_schedule(std::string_view name) {
  if (name == "cosine") return LrSchedule::Cosine;
  if (name == "constant") return LrSchedule::Constant;
  throw ConfigError("unknown lr_schedule '" + std::string(name) + "' (cosine|constant)");
}

void TrainConfig::validate() const {
  if (!(alpha > 0.0)) throw ConfigError("alpha must be > 0");
  if (!(beta > 0.0)) throw ConfigError("beta must be > 0");
  if (interval < 1) throw ConfigError("interval must be >= 1");
  if (!(q > 0.0)) throw ConfigError("q must be > 0");
  if (batch_size < 2 || batch_size % 2 != 0) throw ConfigError("batch_size must be even and >= 2");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (variant == VariantKind::FrozenWpn && frozen_wpn_path.empty()) {
    throw ConfigError("variant frozen_wpn needs frozen_wpn_path");
  }
}

StepLog::StepLog(std::size_t num_exits)
    : loss_sum(num_exits, 0.0),
      weight_sum(num_exits, 0.0),
      weight_min(num_exits, std::numeric_limits<double>::infinity()),
      weight_max(num_exits, -std::numeric_limits<double>::infinity()),
      allocation_sum(num_exits, 0.0) {}

void StepLog::add_losses(const Matrix& losses) {
  for (std::size_t i = 0; i < losses.rows(); ++i) {
    for (std::size_t k = 0; k < losses.cols(); ++k) loss_sum[k] += losses(i, k);
  }
  loss_rows += losses.rows();
}

void StepLog::add_weights(const Matrix& weights) {
  for (std::size_t i = 0; i < weights.rows(); ++i) {
    for (std::size_t k = 0; k < weights.cols(); ++k) {
      weight_sum[k] += weights(i, k);
      weight_min[k] = std::min(weight_min[k], weights(i, k));
      weight_max[k] = std::max(weight_max[k], weights(i, k));
    }
  }
  weight_rows += weights.rows();
}

void StepLog::add_allocation(const exitpolicy::AllocationResult& alloc) {
  for (std::size_t k = 0; k < alloc.sizes.size(); ++k) allocation_sum[k] += static_cast<double>(alloc.sizes[k]);
  allocations += 1;
}

std::pair<Batch, Batch> split_batch(const Batch& batch) {
  const std::size_t b = batch.size();
  if (b % 2 != 0 || b == 0) throw ConfigError("split_batch: batch size " + std::to_string(b) + " is not even");
  const std::size_t half = b / 2;
  const std::size_t d = batch.x.cols();
  Batch first{Matrix(half, d), std::vector<int>(batch.y.begin(), batch.y.begin() + static_cast<std::ptrdiff_t>(half))};
  Batch second{Matrix(half, d), std::vector<int>(batch.y.begin() + static_cast<std::ptrdiff_t>(half), batch.y.end())};
  std::copy_n(batch.x.values().begin(), half * d, first.x.values().begin());
  std::copy_n(batch.x.values().begin() + static_cast<std::ptrdiff_t>(half * d), half * d, second.x.values().begin());
  return {std::move(first), std::move(second)};
}

bool wpn_update_due(std::size_t iteration, std::size_t interval) {
  return interval > 0 && (iteration + 1) % interval == 0;
}

double learning_rate(const TrainConfig& config, std::size_t iteration, std::size_t total_iterations) {
  if (config.lr_schedule == LrSchedule::Constant || total_iterations == 0) return config.alpha;
  const double progress = static_cast<double>(iteration) / static_cast<double>(total_iterations);
  return config.alpha * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

std::vector<double> fixed_exit_weights(std::size_t num_exits, bool ascending) {
  auto w = num_exits == 1 ? std::vector<double>{1.0} : numkit::linspace(0.6, 1.4, num_exits);
  if (!ascending) std::reverse(w.begin(), w.end());
  return w;
}

MetaObjective meta_objective(const ExitOutputs& outputs, const exitpolicy::AllocationResult& allocation) {
  if (allocation.subsets.size() != outputs.exits) {
    throw ShapeError("meta_objective: allocation has " + std::to_string(allocation.subsets.size()) +
                     " subsets for " + std::to_string(outputs.exits) + " exits");
  }
  MetaObjective obj{0.0, Matrix(outputs.batch, outputs.exits)};
  std::size_t covered = 0;
  for (std::size_t k = 0; k < outputs.exits; ++k) {
    const auto& subset = allocation.subsets[k];
    covered += subset.size();
    if (subset.empty()) continue;
    const double inv = 1.0 / static_cast<double>(subset.size());
    double s = 0.0;
    for (std::size_t j : subset) {
      if (j >= outputs.batch) throw ShapeError("meta_objective: allocation index beyond the meta batch");
      s += outputs.losses(j, k);
      obj.coeffs(j, k) = inv;
    }
    obj.value += s * inv;
  }
  if (covered != outputs.batch) throw ShapeError("meta_objective: allocation does not cover the meta batch");
  return obj;
}

MetaObjective vanilla_meta_objective(const ExitOutputs& outputs) {
  MetaObjective obj{0.0, Matrix(outputs.batch, outputs.exits, 1.0 / static_cast<double>(outputs.batch))};
  for (std::size_t k = 0; k < outputs.exits; ++k) {
    double s = 0.0;
    for (std::size_t j = 0; j < outputs.batch; ++j) s += outputs.losses(j, k);
    obj.value += s / static_cast<double>(outputs.batch);
  }
  return obj;
}

MetaStep compute_meta_step(const BackboneParams& params, const PerSampleGrads& grads,
                           const Matrix& train_losses, const wpn::WpnParams& wpn_params,
                           const Batch& meta, double lr, double q, MetaKind kind) {
  auto forward = wpn::wpn_forward(wpn_params, train_losses);
  auto weights = wpn::make_weights(forward, wpn_params.config().delta);
  auto pseudo = backbone::pseudo_step(params, grads, weights.weights, lr);
  const auto meta_out = backbone::forward_all(pseudo, meta);
  auto allocation = exitpolicy::allocate_meta(meta_out.confidences, q);
  const auto objective = kind == MetaKind::Allocated ? meta_objective(meta_out, allocation)
                                                     : vanilla_meta_objective(meta_out);
  auto meta_grad = backbone::grad_exit_losses(pseudo, meta.x, meta.y, objective.coeffs);
  auto weight_grad = wpn::meta_weight_grad(grads, meta_grad, lr, grads.batch);
  auto wpn_grad = wpn::wpn_backward(forward.cache, weights.cache, weight_grad);
  return MetaStep{std::move(forward),    std::move(weights),     std::move(pseudo),
                  std::move(allocation), objective.value,        std::move(meta_grad),
                  std::move(weight_grad), std::move(wpn_grad)};
}

void l2w_substep(TrainState& state, const TrainConfig& config, const Batch& train_half,
                 const Batch& meta_half, double lr, StepLog* log, MetaKind kind) {
  with_iteration_context(state.iteration, [&] {
    const auto outputs = backbone::forward_all(state.backbone, train_half);
    require_finite(outputs.losses, state.iteration);
    const auto grads = backbone::per_sample_grads(state.backbone, train_half);

    if (wpn_update_due(state.iteration, config.interval)) {
      const auto step = compute_meta_step(state.backbone, grads, outputs.losses, state.wpn, meta_half,
                                          lr, config.q, kind);
      if (!numkit::all_finite(step.wpn_grad)) {
        throw TrainingError("non-finite WPN gradient at iteration " + std::to_string(state.iteration));
      }
      state.wpn = wpn::adam_step(state.wpn, step.wpn_grad, state.adam, config.beta);
      if (log != nullptr) {
        log->add_allocation(step.allocation);
        log->meta_loss_sum += step.meta_loss;
        log->wpn_updates += 1;
      }
    }

    const auto forward = wpn::wpn_forward(state.wpn, outputs.losses);
    const auto weights = wpn::make_weights(forward, state.wpn.config().delta);
    const auto grad = backbone::grad_weighted_loss(grads, weights.weights);
    state.backbone = backbone::sgd_step(state.backbone, grad, lr, sgd_options(config), state.sgd);
    require_finite(state.backbone, state.iteration);
    if (log != nullptr) {
      log->add_losses(outputs.losses);
      log->add_weights(weights.weights);
      log->backbone_updates += 1;
    }
    record_scatter(log, outputs, weights.weights, config.q);
  });
}

void train_step_l2w(TrainState& state, const TrainConfig& config, const Batch& batch, double lr,
                    StepLog* log, MetaKind kind) {
  const auto [first, second] = split_batch(batch);
  l2w_substep(state, config, first, second, lr, log, kind);
  l2w_substep(state, config, second, first, lr, log, kind);
}

void train_step_baseline(TrainState& state, const TrainConfig& config, const Batch& batch,
                         double lr, StepLog* log) {
  fixed_rule_substep(state, config, batch, lr, log, [](const ExitOutputs& out) {
    return Matrix(out.batch, out.exits, 1.0);
  });
}

void train_step_variant(TrainState& state, const TrainConfig& config, const Batch& batch,
                        double lr, StepLog* log) {
  switch (config.variant) {
    case VariantKind::L2W:
      train_step_l2w(state, config, batch, lr, log, MetaKind::Allocated);
      break;
    case VariantKind::VanillaMetaObjective:
      train_step_l2w(state, config, batch, lr, log, MetaKind::Vanilla);
      break;
    case VariantKind::Baseline:
      train_step_baseline(state, config, batch, lr, log);
      break;
    case VariantKind::FixedWeightsAscending:
    case VariantKind::FixedWeightsDescending: {
      const auto per_exit = fixed_exit_weights(state.backbone.num_exits(),
                                               config.variant == VariantKind::FixedWeightsAscending);
      auto table = [&](const ExitOutputs& out) {
        Matrix w(out.batch, out.exits);
        for (std::size_t i = 0; i < out.batch; ++i) {
          for (std::size_t k = 0; k < out.exits; ++k) w(i, k) = per_exit[k];
        }
        return w;
      };
      const auto [first, second] = split_batch(batch);
      fixed_rule_substep(state, config, first, lr, log, table);
      fixed_rule_substep(state, config, second, lr, log, table);
      break;
    }
    case VariantKind::VanillaSelection: {
      auto table = [&](const ExitOutputs& out) {
        const auto alloc = exitpolicy::allocate_meta(out.confidences, config.q);
        Matrix w(out.batch, out.exits);
        for (std::size_t k = 0; k < out.exits; ++k) {
          for (std::size_t j : alloc.subsets[k]) w(j, k) = 1.0;
        }
        if (log != nullptr) log->add_allocation(alloc);
        return w;
      };
      const auto [first, second] = split_batch(batch);
      fixed_rule_substep(state, config, first, lr, log, table);
      fixed_rule_substep(state, config, second, lr, log, table);
      break;
    }
    case VariantKind::FrozenWpn: {
      auto table = [&](const ExitOutputs& out) {
        const auto forward = wpn::wpn_forward(state.wpn, out.losses);
        return wpn::make_weights(forward, state.wpn.config().delta).weights;
      };
      const auto [first, second] = split_batch(batch);
      fixed_rule_substep(state, config, first, lr, log, table);
      fixed_rule_substep(state, config, second, lr, log, table);
      break;
    }
  }
  state.iteration += 1;
}

TrainState init_state(const BackboneConfig& backbone_config, const wpn::WpnConfig& wpn_config,
                      const TrainConfig& config) {
  backbone_config.validate();
  wpn_config.validate();
  if (wpn_config.num_exits != backbone_config.num_exits()) {
    throw ConfigError("WPN num_exits does not match the backbone's exit count");
  }
  const RngStream root(config.seed);
  RngStream backbone_rng = root.child("init-backbone");
  RngStream wpn_rng = root.child("init-wpn");
  TrainState state{backbone::init_params(backbone_config, backbone_rng), {},
                   wpn::init_wpn(wpn_config, wpn_rng), {}, 0};
  if (config.variant == VariantKind::FrozenWpn) {
    state.wpn = load_frozen_wpn(config.frozen_wpn_path, wpn_config);
  }
  state.adam = wpn::AdamState::zeros(state.wpn.size());
  return state;
}

checkpoint::Checkpoint state_to_checkpoint(const TrainState& state, const nlohmann::json& extra_header) {
  checkpoint::Checkpoint ckpt;
  ckpt.header = extra_header;
  const auto& bc = state.backbone.config();
  const auto& wc = state.wpn.config();
  ckpt.header["iteration"] = state.iteration;
  ckpt.header["adam_step"] = state.adam.step;
  ckpt.header["backbone_shape"] = {{"input_dim", bc.input_dim},
                                   {"trunk_widths", bc.trunk_widths},
                                   {"num_classes", bc.num_classes}};
  ckpt.header["wpn_shape"] = {{"num_exits", wc.num_exits},
                              {"hidden_width", wc.hidden_width},
                              {"hidden_depth", wc.hidden_depth},
                              {"delta", wc.delta}};
  const auto theta = state.backbone.values();
  ckpt.arrays["backbone.theta"].assign(theta.begin(), theta.end());
  ckpt.arrays["backbone.velocity"] = state.sgd.velocity;
  const auto g = state.wpn.values();
  ckpt.arrays["wpn.theta"].assign(g.begin(), g.end());
  ckpt.arrays["wpn.adam.m"] = state.adam.m;
  ckpt.arrays["wpn.adam.v"] = state.adam.v;
  return ckpt;
}

namespace {

void check_wpn_shape(const nlohmann::json& shape, const wpn::WpnConfig& expected) {
  if (shape.at("num_exits").get<std::size_t>() != expected.num_exits ||
      shape.at("hidden_width").get<std::size_t>() != expected.hidden_width ||
      shape.at("hidden_depth").get<std::size_t>() != expected.hidden_depth) {
    throw CompatibilityError("checkpoint WPN shape " + shape.dump() + " does not match the configured WPN");
  }
}

}  // namespace

TrainState state_from_checkpoint(const checkpoint::Checkpoint& ckpt, const BackboneConfig& backbone_config,
                                 const wpn::WpnConfig& wpn_config) {
  try {
    const auto& shape = ckpt.header.at("backbone_shape");
    if (shape.at("input_dim").get<std::size_t>() != backbone_config.input_dim ||
        shape.at("trunk_widths").get<std::vector<std::size_t>>() != backbone_config.trunk_widths ||
        shape.at("num_classes").get<std::size_t>() != backbone_config.num_classes) {
      throw CompatibilityError("checkpoint backbone shape " + shape.dump() +
                               " does not match the configured backbone");
    }
    check_wpn_shape(ckpt.header.at("wpn_shape"), wpn_config);
    TrainState state{BackboneParams(backbone_config, ckpt.array("backbone.theta")),
                     backbone::SgdState{ckpt.array("backbone.velocity")},
                     wpn::WpnParams(wpn_config, ckpt.array("wpn.theta")),
                     wpn::AdamState{ckpt.array("wpn.adam.m"), ckpt.array("wpn.adam.v"),
                                    ckpt.header.at("adam_step").get<std::uint64_t>()},
                     ckpt.header.at("iteration").get<std::size_t>()};
    return state;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header incomplete: ") + e.what());
  } catch (const ShapeError& e) {
    throw CompatibilityError(std::string("checkpoint arrays do not fit the configuration: ") + e.what());
  }
}

wpn::WpnParams load_frozen_wpn(const std::string& path, const wpn::WpnConfig& expected) {
  if (!std::filesystem::exists(path)) throw IoError("frozen WPN checkpoint '" + path + "' not found");
  const auto ckpt = checkpoint::read_checkpoint(path);
  try {
    check_wpn_shape(ckpt.header.at("wpn_shape"), expected);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("frozen WPN checkpoint '" + path + "' lacks a WPN shape: " + e.what());
  }
  return wpn::WpnParams(expected, ckpt.array("wpn.theta"));
}

TrainResult run_training(const TrainConfig& config, const BackboneConfig& backbone_config,
                         const wpn::WpnConfig& wpn_config, const datahub::Dataset& train_set,
                         const datahub::Dataset& val_set, const EpochHook& on_epoch) {
  config.validate();
  train_set.validate();
  val_set.validate();
  if (train_set.dim() != backbone_config.input_dim || val_set.dim() != backbone_config.input_dim) {
    throw ConfigError("dataset feature dimension does not match backbone input_dim");
  }
  TrainResult result{init_state(backbone_config, wpn_config, config), {}};
  if (config.epochs == 0) return result;

  const std::size_t per_epoch = train_set.size() / config.batch_size;
  if (per_epoch == 0) throw ConfigError("batch_size exceeds the training set size");
  const std::size_t total = per_epoch * config.epochs;
  const auto cost = backbone::count_mul_adds(backbone_config);
  const std::size_t k_exits = backbone_config.num_exits();
  const auto val_batch = val_set.all();

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    StepLog log(k_exits);
    log.scatter_cap = epoch + 1 == config.epochs ? config.scatter_points : 0;
    double lr = config.alpha;
    const auto batches = datahub::make_batches(train_set.size(), config.batch_size, epoch, config.seed,
                                               datahub::Remainder::Drop);
    for (const auto& indices : batches) {
      lr = learning_rate(config, result.state.iteration, total);
      const auto batch = train_set.gather(indices);
      train_step_variant(result.state, config, batch, lr, &log);
    }

    HistoryRecord rec;
    rec.epoch = epoch;
    rec.iteration = result.state.iteration;
    rec.lr = lr;
    rec.train_loss.resize(k_exits);
    rec.weight_mean.resize(k_exits);
    rec.allocation_mean.assign(k_exits, 0.0);
    for (std::size_t k = 0; k < k_exits; ++k) {
      rec.train_loss[k] = log.loss_sum[k] / static_cast<double>(std::max<std::size_t>(1, log.loss_rows));
      rec.weight_mean[k] = log.weight_sum[k] / static_cast<double>(std::max<std::size_t>(1, log.weight_rows));
      if (log.allocations > 0) rec.allocation_mean[k] = log.allocation_sum[k] / static_cast<double>(log.allocations);
    }
    rec.weight_min = log.weight_min;
    rec.weight_max = log.weight_max;
    rec.meta_loss_mean = log.wpn_updates > 0 ? log.meta_loss_sum / static_cast<double>(log.wpn_updates) : 0.0;
    rec.backbone_updates = log.backbone_updates;
    rec.wpn_updates = log.wpn_updates;

    const auto val_out = backbone::forward_all(result.state.backbone, val_batch);
    rec.val_anytime_accuracy = exitpolicy::anytime_accuracy(val_out);
    const auto point = exitpolicy::evaluate_budget(val_out, val_out, config.q, cost);
    rec.val_dynamic_accuracy = point.accuracy;
    rec.val_expected_cost = point.expected_cost;
    rec.scatter = std::move(log.scatter);

    if (on_epoch) on_epoch(rec);
    result.history.push_back(std::move(rec));
  }
  return result;
}

}  // namespace exitweave::trainer
