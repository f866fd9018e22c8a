#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <ostream>
#include <sstream>

#include "exitweave/app.hpp"
#include "exitweave/checkpoint.hpp"
#include "exitweave/errors.hpp"

namespace exitweave::app {

namespace {

using nlohmann::json;

bool uses_wpn(trainer::VariantKind v) {
  return v == trainer::VariantKind::L2W || v == trainer::VariantKind::VanillaMetaObjective ||
         v == trainer::VariantKind::FrozenWpn;
}

double parse_number(const std::string& text, const std::string& where) {
  const char* begin = text.c_str();
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(begin, &end);
  while (end != nullptr && (*end == ' ' || *end == '\t' || *end == '\r')) ++end;
  if (end == begin || *end != '\0' || errno == ERANGE) throw FormatError(where + ": '" + text + "' is not a number");
  return v;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string cell;
  std::istringstream in(s);
  while (std::getline(in, cell, sep)) parts.push_back(cell);
  if (!s.empty() && s.back() == sep) parts.emplace_back();
  return parts;
}

void check_compatible(const datahub::Dataset& ds, const backbone::BackboneConfig& bc, const char* name) {
  if (ds.dim() != bc.input_dim || ds.num_classes != bc.num_classes) {
    throw CompatibilityError(std::string(name) + " split has dimension " + std::to_string(ds.dim()) + " and " +
                             std::to_string(ds.num_classes) + " classes; the checkpoint expects " +
                             std::to_string(bc.input_dim) + " and " + std::to_string(bc.num_classes));
  }
}

// WPN weights on training samples, at most `cap` points.
std::vector<trainer::ScatterPoint> weight_scatter(const trainer::TrainState& state, const datahub::Dataset& train,
                                                  double q, std::size_t cap) {
  const std::size_t k_exits = state.backbone.num_exits();
  const std::size_t n = std::min(train.size(), cap / k_exits);
  if (n == 0) return {};
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i * train.size() / n;
  const auto batch = train.gather(idx);
  const auto out = backbone::forward_all(state.backbone, batch);
  const auto weights = wpn::make_weights(wpn::wpn_forward(state.wpn, out.losses), state.wpn.config().delta);
  const auto alloc = exitpolicy::allocate_meta(out.confidences, q);
  std::vector<bool> first(n, false);
  for (std::size_t j : alloc.subsets.front()) first[j] = true;
  std::vector<trainer::ScatterPoint> points;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < k_exits; ++k) {
      points.push_back({k, out.losses(i, k), weights.weights(i, k), first[i]});
    }
  }
  return points;
}

}  // namespace

TrainOutcome cmd_train(const TrainOptions& options, std::ostream& log) {
  RunConfig cfg = load_run_config(options.config);
  if (options.seed) cfg.train.seed = *options.seed;
  if (options.out) cfg.output_dir = options.out->string();
  cfg.validate();

  const auto data = load_data(cfg.data);
  for (const auto& w : data.warnings) log << "warning: " << w << "\n";
  resolve_dims(cfg, data);
  const auto bcfg = cfg.backbone_config();
  const std::string hash = config_hash(cfg);
  const std::string id = run_id(cfg);
  log << "run " << id << ": " << data.train.size() << " train / " << data.val.size() << " val samples, "
      << backbone::make_layout(bcfg).total << " backbone params\n";

  const std::filesystem::path out_dir = cfg.output_dir;
  auto result = trainer::run_training(cfg.train, bcfg, cfg.wpn, data.train, data.val,
                                      [&](const trainer::HistoryRecord& h) {
                                        log << "epoch " << h.epoch + 1 << "/" << cfg.train.epochs
                                            << "  lr " << format_double(h.lr) << "  val exit-"
                                            << h.val_anytime_accuracy.size() << " acc "
                                            << format_double(h.val_anytime_accuracy.back()) << "  dynamic acc "
                                            << format_double(h.val_dynamic_accuracy) << "\n";
                                      });

  json header{{"resolved_config", to_json(cfg)}, {"config_hash", hash}, {"run_id", id}};
  checkpoint::write_checkpoint(out_dir / "checkpoint.bin", trainer::state_to_checkpoint(result.state, header));
  write_text_file(out_dir / "resolved_config.json", to_json(cfg).dump(2) + "\n");
  write_history(out_dir, result.history, id, hash);
  log << "wrote " << (out_dir / "checkpoint.bin").string() << "\n";
  return {out_dir, std::move(result)};
}

std::vector<double> default_q_grid() { return numkit::linspace(0.05, 2.0, 40); }

std::vector<double> parse_q_grid(const std::string& text) {
  const auto parse_number = [](const std::string& cell, const char* where) {
    try {
      return ::exitweave::app::parse_number(cell, where);
    } catch (const FormatError& e) {
      throw UsageError(e.what());
    }
  };
  std::vector<double> grid;
  if (text.find(':') != std::string::npos) {
    const auto parts = split(text, ':');
    if (parts.size() != 3) throw UsageError("--q-grid range must look like lo:hi:n");
    const double lo = parse_number(parts[0], "--q-grid");
    const double hi = parse_number(parts[1], "--q-grid");
    const double n = parse_number(parts[2], "--q-grid");
    if (n < 1 || n != std::floor(n)) throw UsageError("--q-grid point count must be a positive integer");
    grid = numkit::linspace(lo, hi, static_cast<std::size_t>(n));
  } else {
    for (const auto& cell : split(text, ',')) grid.push_back(parse_number(cell, "--q-grid"));
  }
  if (grid.empty()) throw UsageError("--q-grid is empty");
  for (double q : grid) {
    if (!(q > 0.0) || !std::isfinite(q)) throw UsageError("--q-grid values must be positive");
  }
  return grid;
}

MetricsRecord cmd_eval(const EvalOptions& options, std::ostream& log) {
  const auto ckpt = checkpoint::read_checkpoint(options.checkpoint);
  if (!ckpt.header.contains("resolved_config")) {
    throw FormatError("checkpoint '" + options.checkpoint.string() + "' carries no resolved config");
  }
  const RunConfig cfg = parse_run_config(ckpt.header.at("resolved_config"));
  const auto bcfg = cfg.backbone_config();
  auto data = load_data(cfg.data);
  if (options.dataset) {
    data.test = datahub::load_dataset(*options.dataset);
    data.test.split = datahub::Split::Test;
  }
  check_compatible(data.val, bcfg, "val");
  check_compatible(data.test, bcfg, "test");
  const auto state = trainer::state_from_checkpoint(ckpt, bcfg, cfg.wpn);

  const auto val_out = backbone::forward_all(state.backbone, data.val.all());
  const auto test_out = backbone::forward_all(state.backbone, data.test.all());
  const auto cost = backbone::count_mul_adds(bcfg);

  MetricsRecord rec;
  rec.run_id = ckpt.header.value("run_id", run_id(cfg));
  rec.config_hash = config_hash(cfg);
  rec.resolved_config = to_json(cfg);
  rec.resolved_config.erase("output");
  rec.eval_split = options.dataset ? options.dataset->filename().string() : "test";
  rec.num_samples = data.test.size();

  const auto acc = exitpolicy::anytime_accuracy(test_out);
  for (std::size_t k = 0; k < acc.size(); ++k) rec.anytime.push_back({k + 1, acc[k], cost[k]});

  const auto grid = options.q_grid.empty() ? default_q_grid() : options.q_grid;
  for (double q : grid) rec.dynamic.push_back(exitpolicy::evaluate_budget(val_out, test_out, q, cost));

  if (uses_wpn(cfg.train.variant)) {
    rec.scatter = weight_scatter(state, data.train, cfg.train.q, cfg.train.scatter_points);
  }

  const auto out_dir = options.out ? *options.out : options.checkpoint.parent_path();
  write_metrics(out_dir, rec);
  log << "anytime accuracy:";
  for (double a : acc) log << " " << format_double(a);
  log << "\nwrote " << (out_dir / "metrics.json").string() << " (" << grid.size() << " budget points)\n";
  return rec;
}

numkit::Matrix read_confidence_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read confidence table '" + path.string() + "'");
  std::vector<double> values;
  std::size_t cols = 0;
  std::size_t rows = 0;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos || line.front() == '#') continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    const auto cells = split(line, ',');
    if (cols == 0) cols = cells.size();
    if (cells.size() != cols) {
      throw FormatError(where + ": expected " + std::to_string(cols) + " columns, found " +
                        std::to_string(cells.size()));
    }
    for (const auto& cell : cells) {
      const double v = parse_number(cell, where);
      if (!(v >= 0.0 && v <= 1.0)) throw FormatError(where + ": confidence " + cell + " is outside [0, 1]");
      values.push_back(v);
    }
    ++rows;
  }
  if (rows == 0) throw FormatError(path.string() + ": no confidence rows");
  return numkit::Matrix(rows, cols, std::move(values));
}

json cmd_allocate(const AllocateOptions& options, std::ostream& out) {
  const auto conf = read_confidence_csv(options.confidences);
  if (options.exits && *options.exits != conf.cols()) {
    throw FormatError(options.confidences.string() + ": table has " + std::to_string(conf.cols()) +
                      " columns but --exits is " + std::to_string(*options.exits));
  }
  const auto alloc = exitpolicy::allocate_meta(conf, options.q);
  const auto thresholds = exitpolicy::calibrate_thresholds(conf, options.q);

  out << "N " << conf.rows() << "  K " << conf.cols() << "  q " << format_double(options.q) << "\n";
  out << "sizes:";
  for (std::size_t s : alloc.sizes) out << " " << s;
  out << "\nthresholds:";
  for (double e : thresholds.eps) out << " " << format_double(e);
  out << "\n";
  for (std::size_t k = 0; k < alloc.subsets.size(); ++k) {
    out << "exit " << k + 1 << ":";
    for (std::size_t j : alloc.subsets[k]) out << " " << j;
    out << "\n";
  }

  json doc{{"q", options.q},
           {"num_samples", conf.rows()},
           {"num_exits", conf.cols()},
           {"sizes", alloc.sizes},
           {"subsets", alloc.subsets},
           {"thresholds", thresholds.eps}};
  if (options.out) write_text_file(*options.out, doc.dump(2) + "\n");
  return doc;
}

GradcheckReport cmd_gradcheck(const GradcheckOptions& options, std::ostream& out) {
  GradcheckSetup setup;
  if (options.config) {
    RunConfig cfg = load_run_config(*options.config);
    if (!cfg.input_dim || !cfg.num_classes) {
      if (cfg.data.source == "synthetic") {
        if (!cfg.input_dim) cfg.input_dim = cfg.data.dim;
        if (!cfg.num_classes) cfg.num_classes = cfg.data.num_classes;
      } else {
        resolve_dims(cfg, load_data(cfg.data));
      }
    }
    setup.backbone = cfg.backbone_config();
    setup.wpn = cfg.wpn;
    setup.lr = cfg.train.alpha;
    setup.q = cfg.train.q;
    setup.seed = cfg.train.seed;
  }
  if (options.seed) setup.seed = *options.seed;

  const auto report = run_gradcheck(setup);
  out << "gradient check: backbone " << backbone::make_layout(setup.backbone).total << " params, WPN "
      << wpn::WpnParams(setup.wpn).size() << " params, seed " << setup.seed << "\n";
  json suites = json::array();
  for (const auto& s : report.suites) {
    char line[200];
    std::snprintf(line, sizeof(line), "  %-22s max rel err %.3e  tol %.0e  checks %-6zu kinks skipped %-4zu %s\n",
                  s.name.c_str(), s.max_rel_error, s.tolerance, s.checks, s.skipped, s.passed ? "PASS" : "FAIL");
    out << line;
    suites.push_back({{"name", s.name},
                      {"max_rel_error", s.max_rel_error},
                      {"tolerance", s.tolerance},
                      {"checks", s.checks},
                      {"skipped", s.skipped},
                      {"passed", s.passed}});
  }
  out << (report.passed() ? "all suites passed\n" : "gradient check FAILED\n");
  if (options.out) {
    write_text_file(*options.out, json{{"passed", report.passed()}, {"suites", suites}}.dump(2) + "\n");
  }
  return report;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const UsageError*>(&e) != nullptr || dynamic_cast<const ConfigError*>(&e) != nullptr ||
      dynamic_cast<const IoError*>(&e) != nullptr || dynamic_cast<const FormatError*>(&e) != nullptr ||
      dynamic_cast<const CompatibilityError*>(&e) != nullptr) {
    return 2;
  }
  return 1;
}

}  // namespace exitweave::app
