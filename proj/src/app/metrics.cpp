#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "exitweave/app.hpp"
#include "exitweave/errors.hpp"

namespace exitweave::app {

namespace {

using nlohmann::json;

double finite(double v, const char* what) {
  if (!std::isfinite(v)) throw NumericError(std::string("non-finite value in metrics field '") + what + "'");
  return v;
}

std::string join(const std::vector<std::string>& cells) {
  std::string line;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i > 0) line += ',';
    line += cells[i];
  }
  return line + '\n';
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw FormatError("metrics document: " + msg);
}

}  // namespace

std::string format_double(double v) {
  char buf[32];
  for (int precision = 15; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof(buf), "%.*g", precision, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

json to_json(const MetricsRecord& r) {
  json anytime = json::array();
  for (const auto& row : r.anytime) {
    anytime.push_back({{"exit", row.exit},
                       {"accuracy", finite(row.accuracy, "anytime.accuracy")},
                       {"mul_adds", finite(row.mul_adds, "anytime.mul_adds")}});
  }
  json dynamic = json::array();
  for (const auto& p : r.dynamic) {
    for (double e : p.thresholds.eps) finite(e, "dynamic.thresholds");
    dynamic.push_back({{"q", finite(p.q, "dynamic.q")},
                       {"thresholds", p.thresholds.eps},
                       {"exit_counts", p.exit_counts},
                       {"accuracy", finite(p.accuracy, "dynamic.accuracy")},
                       {"expected_mul_adds", finite(p.expected_cost, "dynamic.expected_mul_adds")}});
  }
  json scatter = json::array();
  for (const auto& s : r.scatter) {
    scatter.push_back({{"exit", s.exit + 1},
                       {"loss", finite(s.loss, "scatter.loss")},
                       {"weight", finite(s.weight, "scatter.weight")},
                       {"selected_by_exit1", s.selected_by_exit1}});
  }
  return json{{"schema", kMetricsSchema},
              {"schema_version", kMetricsVersion},
              {"run_id", r.run_id},
              {"config_hash", r.config_hash},
              {"resolved_config", r.resolved_config},
              {"eval_split", r.eval_split},
              {"num_samples", r.num_samples},
              {"anytime", anytime},
              {"dynamic", dynamic},
              {"scatter", scatter}};
}

MetricsRecord metrics_from_json(const json& doc) {
  require(doc.is_object(), "not an object");
  require(doc.contains("schema") && doc["schema"].is_string(), "missing schema name");
  if (doc["schema"].get<std::string>() != kMetricsSchema) {
    throw CompatibilityError("unexpected schema '" + doc["schema"].get<std::string>() + "'");
  }
  require(doc.contains("schema_version") && doc["schema_version"].is_number_integer(), "missing schema_version");
  const int version = doc["schema_version"].get<int>();
  if (version != kMetricsVersion) {
    throw CompatibilityError("metrics schema version " + std::to_string(version) + " is not supported (expected " +
                             std::to_string(kMetricsVersion) + ")");
  }
  try {
    MetricsRecord r;
    r.run_id = doc.at("run_id").get<std::string>();
    r.config_hash = doc.at("config_hash").get<std::string>();
    r.resolved_config = doc.at("resolved_config");
    r.eval_split = doc.at("eval_split").get<std::string>();
    r.num_samples = doc.at("num_samples").get<std::size_t>();
    for (const auto& row : doc.at("anytime")) {
      r.anytime.push_back({row.at("exit").get<std::size_t>(), row.at("accuracy").get<double>(),
                           row.at("mul_adds").get<double>()});
    }
    for (const auto& row : doc.at("dynamic")) {
      exitpolicy::BudgetPoint p;
      p.q = row.at("q").get<double>();
      p.thresholds.eps = row.at("thresholds").get<std::vector<double>>();
      p.exit_counts = row.at("exit_counts").get<std::vector<std::size_t>>();
      p.accuracy = row.at("accuracy").get<double>();
      p.expected_cost = row.at("expected_mul_adds").get<double>();
      r.dynamic.push_back(std::move(p));
    }
    for (const auto& row : doc.at("scatter")) {
      r.scatter.push_back({row.at("exit").get<std::size_t>() - 1, row.at("loss").get<double>(),
                           row.at("weight").get<double>(), row.at("selected_by_exit1").get<bool>()});
    }
    return r;
  } catch (const json::exception& e) {
    throw FormatError(std::string("metrics document: ") + e.what());
  }
}

void write_metrics(const std::filesystem::path& dir, const MetricsRecord& r) {
  write_text_file(dir / "metrics.json", to_json(r).dump(2) + "\n");

  std::string anytime = join({"exit", "accuracy", "mul_adds"});
  for (const auto& row : r.anytime) {
    anytime += join({std::to_string(row.exit), format_double(row.accuracy), format_double(row.mul_adds)});
  }
  write_text_file(dir / "anytime.csv", anytime);

  const std::size_t k_exits = r.anytime.size();
  std::vector<std::string> header{"q", "accuracy", "expected_mul_adds"};
  for (std::size_t k = 1; k <= k_exits; ++k) header.push_back("threshold_" + std::to_string(k));
  for (std::size_t k = 1; k <= k_exits; ++k) header.push_back("count_" + std::to_string(k));
  std::string dynamic = join(header);
  for (const auto& p : r.dynamic) {
    std::vector<std::string> cells{format_double(p.q), format_double(p.accuracy), format_double(p.expected_cost)};
    for (double e : p.thresholds.eps) cells.push_back(format_double(e));
    for (std::size_t c : p.exit_counts) cells.push_back(std::to_string(c));
    dynamic += join(cells);
  }
  write_text_file(dir / "dynamic.csv", dynamic);

  std::string scatter = join({"exit", "loss", "weight", "selected_by_exit1"});
  for (const auto& s : r.scatter) {
    scatter += join({std::to_string(s.exit + 1), format_double(s.loss), format_double(s.weight),
                     s.selected_by_exit1 ? "1" : "0"});
  }
  write_text_file(dir / "scatter.csv", scatter);
}

MetricsRecord read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read metrics file '" + path.string() + "'");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError("metrics file '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return metrics_from_json(doc);
}

json history_to_json(const std::vector<trainer::HistoryRecord>& history, const std::string& run_id,
                     const std::string& config_hash) {
  json epochs = json::array();
  for (const auto& h : history) {
    json scatter = json::array();
    for (const auto& s : h.scatter) {
      scatter.push_back({{"exit", s.exit + 1}, {"loss", s.loss}, {"weight", s.weight},
                         {"selected_by_exit1", s.selected_by_exit1}});
    }
    epochs.push_back({{"epoch", h.epoch},
                      {"iteration", h.iteration},
                      {"lr", h.lr},
                      {"train_loss", h.train_loss},
                      {"weight_mean", h.weight_mean},
                      {"weight_min", h.weight_min},
                      {"weight_max", h.weight_max},
                      {"allocation_mean", h.allocation_mean},
                      {"meta_loss_mean", h.meta_loss_mean},
                      {"backbone_updates", h.backbone_updates},
                      {"wpn_updates", h.wpn_updates},
                      {"val_anytime_accuracy", h.val_anytime_accuracy},
                      {"val_dynamic_accuracy", h.val_dynamic_accuracy},
                      {"val_expected_mul_adds", h.val_expected_cost},
                      {"scatter", scatter}});
  }
  return json{{"schema", kHistorySchema},
              {"schema_version", kHistoryVersion},
              {"run_id", run_id},
              {"config_hash", config_hash},
              {"epochs", epochs}};
}

void write_history(const std::filesystem::path& dir, const std::vector<trainer::HistoryRecord>& history,
                   const std::string& run_id, const std::string& config_hash) {
  write_text_file(dir / "history.json", history_to_json(history, run_id, config_hash).dump(2) + "\n");

  const std::size_t k_exits = history.empty() ? 0 : history.front().train_loss.size();
  std::vector<std::string> header{"epoch", "iteration", "lr"};
  for (const char* prefix : {"train_loss_", "weight_mean_", "val_accuracy_"}) {
    for (std::size_t k = 1; k <= k_exits; ++k) header.push_back(prefix + std::to_string(k));
  }
  for (const char* col : {"val_dynamic_accuracy", "val_expected_mul_adds", "meta_loss_mean", "backbone_updates",
                          "wpn_updates"}) {
    header.emplace_back(col);
  }
  std::string csv = join(header);
  for (const auto& h : history) {
    std::vector<std::string> cells{std::to_string(h.epoch), std::to_string(h.iteration), format_double(h.lr)};
    for (const auto* v : {&h.train_loss, &h.weight_mean, &h.val_anytime_accuracy}) {
      for (double x : *v) cells.push_back(format_double(x));
    }
    cells.push_back(format_double(h.val_dynamic_accuracy));
    cells.push_back(format_double(h.val_expected_cost));
    cells.push_back(format_double(h.meta_loss_mean));
    cells.push_back(std::to_string(h.backbone_updates));
    cells.push_back(std::to_string(h.wpn_updates));
    csv += join(cells);
  }
  write_text_file(dir / "history.csv", csv);
}

}  // namespace exitweave::app
