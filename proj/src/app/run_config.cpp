#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <type_traits>

#include "exitweave/app.hpp"
#include "exitweave/errors.hpp"
#include "exitweave/rng.hpp"

namespace exitweave::app {

namespace {

using nlohmann::json;

// Reads typed members of one JSON object and remembers which keys were used,
// so leftovers can be reported as unknown.
class Section {
 public:
  Section(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError("'" + path_ + "' must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    used_.insert(key);
    const auto it = obj_.find(key);
    if (it == obj_.end() || it->is_null()) return;
    out = convert<T>(*it, where(key));
  }

  template <class T>
  void get(const char* key, std::optional<T>& out) {
    used_.insert(key);
    const auto it = obj_.find(key);
    if (it == obj_.end() || it->is_null()) return;
    out = convert<T>(*it, where(key));
  }

  Section sub(const char* key) {
    used_.insert(key);
    const auto it = obj_.find(key);
    if (it == obj_.end() || it->is_null()) return Section(empty(), where(key));
    return Section(*it, where(key));
  }

  void finish() const {
    for (const auto& [key, value] : obj_.items()) {
      if (!used_.contains(key)) throw ConfigError("unknown config key '" + where(key.c_str()) + "'");
    }
  }

 private:
  static const json& empty() {
    static const json e = json::object();
    return e;
  }

  std::string where(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  template <class T>
  static T convert(const json& v, const std::string& at) {
    if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError("'" + at + "' must be a string");
      return v.get<std::string>();
    } else if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) throw ConfigError("'" + at + "' must be a number");
      return v.get<double>();
    } else if constexpr (std::is_unsigned_v<T>) {
      if (!v.is_number_integer() || v.get<long long>() < 0) {
        throw ConfigError("'" + at + "' must be a non-negative integer");
      }
      return v.get<T>();
    } else if constexpr (std::is_same_v<T, std::vector<std::size_t>>) {
      if (!v.is_array()) throw ConfigError("'" + at + "' must be an array");
      T out;
      for (const auto& e : v) out.push_back(convert<std::size_t>(e, at + "[]"));
      return out;
    } else if constexpr (std::is_same_v<T, std::vector<std::string>>) {
      if (!v.is_array()) throw ConfigError("'" + at + "' must be an array");
      T out;
      for (const auto& e : v) out.push_back(convert<std::string>(e, at + "[]"));
      return out;
    } else {
      static_assert(sizeof(T) == 0, "unsupported config field type");
    }
  }

  const json& obj_;
  std::string path_;
  std::set<std::string, std::less<>> used_;
};

json experiment_json(const RunConfig& config) {
  json doc = to_json(config);
  doc.erase("output");
  return doc;
}

datahub::Dataset concat(const std::vector<datahub::Dataset>& parts) {
  if (parts.empty()) throw ConfigError("no CIFAR training files given");
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.dim() != parts.front().dim()) throw FormatError("CIFAR batches disagree on feature size");
    rows += p.size();
  }
  datahub::Dataset out{numkit::Matrix(rows, parts.front().dim()), {}, parts.front().num_classes, parts.front().split};
  auto dst = out.features.values().begin();
  for (const auto& p : parts) {
    dst = std::copy(p.features.values().begin(), p.features.values().end(), dst);
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
  }
  return out;
}

}  // namespace

backbone::BackboneConfig RunConfig::backbone_config() const {
  if (!input_dim || !num_classes) throw ConfigError("backbone dimensions are not resolved yet");
  return backbone::BackboneConfig{*input_dim, trunk_widths, *num_classes};
}

void RunConfig::validate() const {
  if (trunk_widths.size() < 2) throw ConfigError("backbone.trunk_widths needs at least 2 exits");
  for (std::size_t w : trunk_widths) {
    if (w == 0) throw ConfigError("backbone.trunk_widths entries must be >= 1");
  }
  if (input_dim && *input_dim == 0) throw ConfigError("backbone.input_dim must be >= 1");
  if (num_classes && *num_classes < 2) throw ConfigError("backbone.num_classes must be >= 2");
  try {
    wpn.validate();
  } catch (const Error& e) {
    throw ConfigError(std::string("wpn: ") + e.what());
  }
  train.validate();
  static const std::set<std::string> sources{"synthetic", "container", "idx", "cifar10", "cifar100"};
  if (!sources.contains(data.source)) throw ConfigError("data.source '" + data.source + "' is not recognised");
  if (data.source == "synthetic") {
    if (data.num_classes < 2) throw ConfigError("data.num_classes must be >= 2");
    if (data.dim == 0) throw ConfigError("data.dim must be >= 1");
    if (data.train_per_class == 0 || data.val_per_class == 0 || data.test_per_class == 0) {
      throw ConfigError("data.*_per_class must be >= 1");
    }
    if (!(data.spread >= 0.0)) throw ConfigError("data.spread must be >= 0");
  }
  if (!(data.longtail_factor >= 1.0)) throw ConfigError("data.longtail_factor must be >= 1");
  if (output_dir.empty()) throw ConfigError("output.dir must not be empty");
}

RunConfig parse_run_config(const json& doc) {
  RunConfig c;
  Section root(doc, "");

  Section bb = root.sub("backbone");
  bb.get("trunk_widths", c.trunk_widths);
  bb.get("input_dim", c.input_dim);
  bb.get("num_classes", c.num_classes);
  bb.finish();

  Section w = root.sub("wpn");
  w.get("hidden_width", c.wpn.hidden_width);
  w.get("hidden_depth", c.wpn.hidden_depth);
  w.get("delta", c.wpn.delta);
  w.finish();
  c.wpn.num_exits = c.trunk_widths.size();

  Section t = root.sub("train");
  auto& tc = c.train;
  t.get("alpha", tc.alpha);
  t.get("beta", tc.beta);
  t.get("interval", tc.interval);
  t.get("q", tc.q);
  t.get("epochs", tc.epochs);
  t.get("batch_size", tc.batch_size);
  std::string variant(trainer::to_string(tc.variant));
  t.get("variant", variant);
  tc.variant = trainer::parse_variant(variant);
  t.get("frozen_wpn_path", tc.frozen_wpn_path);
  t.get("seed", tc.seed);
  std::string schedule(trainer::to_string(tc.lr_schedule));
  t.get("lr_schedule", schedule);
  tc.lr_schedule = trainer::parse_schedule(schedule);
  t.get("momentum", tc.momentum);
  t.get("weight_decay", tc.weight_decay);
  t.get("scatter_points", tc.scatter_points);
  t.finish();

  Section d = root.sub("data");
  auto& dc = c.data;
  d.get("source", dc.source);
  d.get("num_classes", dc.num_classes);
  d.get("dim", dc.dim);
  d.get("train_per_class", dc.train_per_class);
  d.get("val_per_class", dc.val_per_class);
  d.get("test_per_class", dc.test_per_class);
  d.get("spread", dc.spread);
  d.get("seed", dc.seed);
  d.get("train", dc.train);
  d.get("val", dc.val);
  d.get("test", dc.test);
  d.get("train_images", dc.train_images);
  d.get("train_labels", dc.train_labels);
  d.get("test_images", dc.test_images);
  d.get("test_labels", dc.test_labels);
  d.get("train_files", dc.train_files);
  d.get("test_file", dc.test_file);
  d.get("val_holdout", dc.val_holdout);
  d.get("longtail_factor", dc.longtail_factor);
  d.finish();

  Section o = root.sub("output");
  o.get("dir", c.output_dir);
  o.finish();

  root.finish();
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file '" + path.string() + "'");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config file '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return parse_run_config(doc);
}

json to_json(const RunConfig& c) {
  const auto opt = [](const std::optional<std::size_t>& v) { return v ? json(*v) : json(nullptr); };
  const auto& t = c.train;
  const auto& d = c.data;
  return json{
      {"backbone", {{"trunk_widths", c.trunk_widths}, {"input_dim", opt(c.input_dim)}, {"num_classes", opt(c.num_classes)}}},
      {"wpn", {{"hidden_width", c.wpn.hidden_width}, {"hidden_depth", c.wpn.hidden_depth}, {"delta", c.wpn.delta}}},
      {"train",
       {{"alpha", t.alpha},
        {"beta", t.beta},
        {"interval", t.interval},
        {"q", t.q},
        {"epochs", t.epochs},
        {"batch_size", t.batch_size},
        {"variant", std::string(trainer::to_string(t.variant))},
        {"frozen_wpn_path", t.frozen_wpn_path},
        {"seed", t.seed},
        {"lr_schedule", std::string(trainer::to_string(t.lr_schedule))},
        {"momentum", t.momentum},
        {"weight_decay", t.weight_decay},
        {"scatter_points", t.scatter_points}}},
      {"data",
       {{"source", d.source},
        {"num_classes", d.num_classes},
        {"dim", d.dim},
        {"train_per_class", d.train_per_class},
        {"val_per_class", d.val_per_class},
        {"test_per_class", d.test_per_class},
        {"spread", d.spread},
        {"seed", d.seed},
        {"train", d.train},
        {"val", d.val},
        {"test", d.test},
        {"train_images", d.train_images},
        {"train_labels", d.train_labels},
        {"test_images", d.test_images},
        {"test_labels", d.test_labels},
        {"train_files", d.train_files},
        {"test_file", d.test_file},
        {"val_holdout", d.val_holdout},
        {"longtail_factor", d.longtail_factor}}},
      {"output", {{"dir", c.output_dir}}},
  };
}

// The output directory is left out so that the same experiment written to
// two places hashes the same.
std::string config_hash(const RunConfig& config) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(experiment_json(config).dump())));
  return buf;
}

std::string run_id(const RunConfig& config) {
  return std::string(trainer::to_string(config.train.variant)) + "-s" + std::to_string(config.train.seed) + "-" +
         config_hash(config).substr(0, 8);
}

DataSplits load_data(const DataConfig& d) {
  using datahub::Split;
  DataSplits out;
  const RngStream root(d.seed);
  if (d.source == "synthetic") {
    RngStream r_train = root.child("train"), r_val = root.child("val"), r_test = root.child("test");
    out.train = datahub::gen_synthetic_gaussians(d.num_classes, d.dim, d.train_per_class, d.spread, r_train, Split::Train);
    out.val = datahub::gen_synthetic_gaussians(d.num_classes, d.dim, d.val_per_class, d.spread, r_val, Split::Val);
    out.test = datahub::gen_synthetic_gaussians(d.num_classes, d.dim, d.test_per_class, d.spread, r_test, Split::Test);
  } else if (d.source == "container") {
    if (d.train.empty() || d.val.empty() || d.test.empty()) {
      throw ConfigError("data.source 'container' needs data.train, data.val and data.test");
    }
    out.train = datahub::load_dataset(d.train);
    out.val = datahub::load_dataset(d.val);
    out.test = datahub::load_dataset(d.test);
    out.train.split = Split::Train;
    out.val.split = Split::Val;
    out.test.split = Split::Test;
  } else {
    datahub::Dataset full;
    if (d.source == "idx") {
      if (d.train_images.empty() || d.train_labels.empty() || d.test_images.empty() || d.test_labels.empty()) {
        throw ConfigError("data.source 'idx' needs train_images, train_labels, test_images and test_labels");
      }
      full = datahub::load_idx(d.train_images, d.train_labels, Split::Train);
      out.test = datahub::load_idx(d.test_images, d.test_labels, Split::Test);
    } else {
      if (d.train_files.empty() || d.test_file.empty()) {
        throw ConfigError("data.source '" + d.source + "' needs train_files and test_file");
      }
      const auto fmt = d.source == "cifar10" ? datahub::CifarFormat::Cifar10 : datahub::CifarFormat::Cifar100;
      std::vector<datahub::Dataset> parts;
      for (const auto& f : d.train_files) parts.push_back(datahub::load_cifar_bin(f, fmt, Split::Train));
      full = concat(parts);
      out.test = datahub::load_cifar_bin(d.test_file, fmt, Split::Test);
    }
    RngStream r_holdout = root.child("holdout");
    auto [rest, held] = datahub::split_holdout(full, d.val_holdout, r_holdout, Split::Val);
    out.train = std::move(rest);
    out.val = std::move(held);
  }
  if (d.longtail_factor > 1.0) {
    RngStream r_lt = root.child("longtail");
    auto lt = datahub::longtail_subsample(out.train, d.longtail_factor, r_lt);
    out.train = std::move(lt.dataset);
    out.warnings = std::move(lt.warnings);
  }
  for (const auto* ds : {&out.train, &out.val, &out.test}) {
    ds->validate();
    if (ds->dim() != out.train.dim() || ds->num_classes != out.train.num_classes) {
      throw ConfigError("data splits disagree on feature dimension or class count");
    }
  }
  return out;
}

void resolve_dims(RunConfig& config, const DataSplits& data) {
  const std::size_t dim = data.train.dim();
  const std::size_t classes = data.train.num_classes;
  if (config.input_dim && *config.input_dim != dim) {
    throw ConfigError("backbone.input_dim " + std::to_string(*config.input_dim) + " but the data has dimension " +
                      std::to_string(dim));
  }
  if (config.num_classes && *config.num_classes != classes) {
    throw ConfigError("backbone.num_classes " + std::to_string(*config.num_classes) + " but the data has " +
                      std::to_string(classes) + " classes");
  }
  config.input_dim = dim;
  config.num_classes = classes;
}

}  // namespace exitweave::app
