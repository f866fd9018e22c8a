#include "exitweave/datahub.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>
#include <sstream>

#include "binary_io.hpp"
#include "exitweave/errors.hpp"

namespace exitweave::binary_io {

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_atomic(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing '" + tmp + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move '" + tmp + "' to '" + path + "': " + ec.message());
}

}  // namespace exitweave::binary_io

namespace exitweave::datahub {

namespace {

constexpr char kContainerMagic[8] = {'E', 'X', 'W', 'V', 'D', 'A', 'T', 'A'};
constexpr std::uint32_t kContainerVersion = 1;
constexpr std::uint8_t kIdxUnsignedByte = 0x08;
constexpr std::size_t kCifarPixels = 3072;

}  // namespace

std::string_view to_string(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "unknown";
}

void Dataset::validate() const {
  if (labels.empty()) throw FormatError("dataset is empty");
  if (features.rows() != labels.size()) throw FormatError("dataset feature rows do not match label count");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
      throw FormatError("dataset label " + std::to_string(y) + " outside [0, " +
                        std::to_string(num_classes) + ")");
    }
  }
  for (double v : features.values()) {
    if (std::isnan(v)) throw FormatError("dataset contains NaN features");
  }
}

Batch Dataset::gather(std::span<const std::size_t> indices) const {
  Batch b{Matrix(indices.size(), dim()), std::vector<int>(indices.size())};
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const std::size_t src = indices[r];
    if (src >= size()) throw IndexError("gather: index " + std::to_string(src) + " out of range");
    std::copy_n(features.row(src).begin(), dim(), b.x.row(r).begin());
    b.y[r] = labels[src];
  }
  return b;
}

Batch Dataset::all() const { return Batch{features, labels}; }

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(num_classes, 0);
  for (int y : labels) counts[static_cast<std::size_t>(y)] += 1;
  return counts;
}

Dataset gen_synthetic_gaussians(std::size_t num_classes, std::size_t dim, std::size_t per_class_n,
                                double spread, RngStream& rng, Split split) {
  if (num_classes < 2) throw ConfigError("synthetic data needs at least 2 classes");
  if (dim == 0) throw ConfigError("synthetic data needs dim >= 1");
  if (dim < 2 && num_classes > 2) throw ConfigError("synthetic data with more than 2 classes needs dim >= 2");
  if (spread < 0.0) throw ConfigError("synthetic spread must be nonnegative");

  Matrix means(num_classes, dim);
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (dim >= num_classes) {
      means(c, c) = 1.0;
    } else if (dim == 1) {
      means(c, 0) = c == 0 ? -1.0 : 1.0;
    } else {
      const double angle = 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(num_classes);
      means(c, 0) = std::cos(angle);
      means(c, 1) = std::sin(angle);
    }
  }

  Dataset ds{Matrix(num_classes * per_class_n, dim), std::vector<int>(num_classes * per_class_n),
             num_classes, split};
  std::size_t r = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    for (std::size_t s = 0; s < per_class_n; ++s, ++r) {
      for (std::size_t d = 0; d < dim; ++d) ds.features(r, d) = means(c, d) + spread * rng.normal();
      ds.labels[r] = static_cast<int>(c);
    }
  }
  return ds;
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 Split split) {
  binary_io::Reader img(binary_io::read_file(images.string()), "IDX images '" + images.string() + "'");
  binary_io::Reader lab(binary_io::read_file(labels.string()), "IDX labels '" + labels.string() + "'");

  auto header = [](binary_io::Reader& rd) {
    if (rd.u8("magic") != 0 || rd.u8("magic") != 0) rd.fail("bad magic (expected two zero bytes)");
    if (rd.u8("type code") != kIdxUnsignedByte) rd.fail("unsupported element type (only unsigned byte)");
    const std::uint8_t rank = rd.u8("rank");
    if (rank == 0) rd.fail("rank must be >= 1");
    std::vector<std::size_t> dims;
    for (std::uint8_t d = 0; d < rank; ++d) dims.push_back(rd.be_u32("dimension"));
    return dims;
  };

  const auto img_dims = header(img);
  const auto lab_dims = header(lab);
  if (lab_dims.size() != 1) lab.fail("label file must have rank 1");
  const std::size_t n = img_dims[0];
  if (lab_dims[0] != n) {
    throw FormatError("IDX item counts differ: " + std::to_string(n) + " images vs " +
                      std::to_string(lab_dims[0]) + " labels");
  }
  std::size_t d = 1;
  for (std::size_t j = 1; j < img_dims.size(); ++j) d *= img_dims[j];

  const auto pixels = img.take(n * d, "pixel data");
  const auto raw_labels = lab.take(n, "label data");

  Dataset ds{Matrix(n, d), std::vector<int>(n), 0, split};
  for (std::size_t j = 0; j < n * d; ++j) ds.features.values()[j] = static_cast<double>(pixels[j]) / 255.0;
  int max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels[i] = raw_labels[i];
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.num_classes = static_cast<std::size_t>(max_label) + 1;
  ds.validate();
  return ds;
}

Dataset load_cifar_bin(const std::filesystem::path& path, CifarFormat format, Split split) {
  const std::size_t label_bytes = format == CifarFormat::Cifar10 ? 1 : 2;
  const std::size_t classes = format == CifarFormat::Cifar10 ? 10 : 100;
  const std::size_t record = label_bytes + kCifarPixels;
  binary_io::Reader rd(binary_io::read_file(path.string()), "CIFAR batch '" + path.string() + "'");
  const std::size_t total = rd.remaining();
  if (total == 0) rd.fail("file is empty");
  if (total % record != 0) {
    throw FormatError("CIFAR batch '" + path.string() + "': truncated record at byte offset " +
                      std::to_string(total - total % record) + " (record size " +
                      std::to_string(record) + ")");
  }
  const std::size_t n = total / record;
  Dataset ds{Matrix(n, kCifarPixels), std::vector<int>(n), classes, split};
  for (std::size_t i = 0; i < n; ++i) {
    std::uint8_t label = rd.u8("label");
    if (label_bytes == 2) label = rd.u8("fine label");
    if (label >= classes) rd.fail("label " + std::to_string(label) + " out of range");
    ds.labels[i] = label;
    const auto px = rd.take(kCifarPixels, "pixels");
    auto row = ds.features.row(i);
    for (std::size_t j = 0; j < kCifarPixels; ++j) row[j] = static_cast<double>(px[j]) / 255.0;
  }
  return ds;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  dataset.validate();
  std::ostringstream os(std::ios::binary);
  os.write(kContainerMagic, sizeof(kContainerMagic));
  binary_io::put_u32(os, kContainerVersion);
  binary_io::put_u8(os, static_cast<std::uint8_t>(dataset.split));
  binary_io::put_u64(os, dataset.size());
  binary_io::put_u64(os, dataset.dim());
  binary_io::put_u64(os, dataset.num_classes);
  binary_io::put_f64_array(os, dataset.features.values());
  for (int y : dataset.labels) binary_io::put_u32(os, static_cast<std::uint32_t>(y));
  binary_io::write_file_atomic(path.string(), os.str());
}

Dataset load_dataset(const std::filesystem::path& path) {
  binary_io::Reader rd(binary_io::read_file(path.string()), "dataset container '" + path.string() + "'");
  const auto magic = rd.take(sizeof(kContainerMagic), "magic");
  if (!std::equal(magic.begin(), magic.end(), kContainerMagic)) rd.fail("bad magic");
  const auto version = rd.le<std::uint32_t>("version");
  if (version != kContainerVersion) rd.fail("unsupported container version " + std::to_string(version));
  const auto split = rd.u8("split");
  if (split > 2) rd.fail("bad split tag");
  const auto n = rd.le<std::uint64_t>("N");
  const auto d = rd.le<std::uint64_t>("D");
  const auto c = rd.le<std::uint64_t>("C");
  if (d != 0 && n > rd.remaining() / (d * 8 + 4)) rd.need(rd.remaining() + 1, "payload");
  rd.need(n * d * 8 + n * 4, "payload");
  Dataset ds{Matrix(n, d), std::vector<int>(n), c, static_cast<Split>(split)};
  for (double& v : ds.features.values()) v = rd.f64("feature");
  for (int& y : ds.labels) y = static_cast<int>(rd.le<std::uint32_t>("label"));
  if (rd.remaining() != 0) rd.fail("trailing bytes after payload");
  ds.validate();
  return ds;
}

double longtail_mu(double imbalance_factor, std::size_t num_classes) {
  if (!(imbalance_factor >= 1.0)) throw ConfigError("imbalance factor must be >= 1");
  if (num_classes <= 1) return 1.0;
  return std::pow(imbalance_factor, -1.0 / static_cast<double>(num_classes - 1));
}

LongTailResult longtail_subsample(const Dataset& dataset, double imbalance_factor, RngStream& rng) {
  const double mu = longtail_mu(imbalance_factor, dataset.num_classes);
  std::vector<std::vector<std::size_t>> members(dataset.num_classes);
  for (std::size_t i = 0; i < dataset.size(); ++i) members[static_cast<std::size_t>(dataset.labels[i])].push_back(i);

  LongTailResult result;
  std::vector<std::size_t> keep;
  for (std::size_t c = 0; c < dataset.num_classes; ++c) {
    auto& idx = members[c];
    if (idx.empty()) throw ConfigError("longtail_subsample: class " + std::to_string(c) + " has no samples");
    const double target = static_cast<double>(idx.size()) * std::pow(mu, static_cast<double>(c));
    auto n_keep = static_cast<std::size_t>(std::llround(target));
    if (n_keep == 0) {
      n_keep = 1;
      result.warnings.push_back("class " + std::to_string(c) + " rounded to 0 samples; kept 1");
    }
    n_keep = std::min(n_keep, idx.size());
    // Partial Fisher-Yates: first n_keep entries become a uniform sample.
    for (std::size_t j = 0; j < n_keep; ++j) {
      const std::size_t pick = j + static_cast<std::size_t>(rng.below(idx.size() - j));
      std::swap(idx[j], idx[pick]);
    }
    keep.insert(keep.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_keep));
    result.class_counts.push_back(n_keep);
  }
  std::sort(keep.begin(), keep.end());
  Batch b = dataset.gather(keep);
  result.dataset = Dataset{std::move(b.x), std::move(b.y), dataset.num_classes, dataset.split};
  return result;
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size,
                                                   std::size_t epoch, std::uint64_t seed,
                                                   Remainder remainder) {
  if (batch_size == 0) throw ConfigError("batch size must be >= 1");
  if (batch_size > n) {
    throw ConfigError("batch size " + std::to_string(batch_size) + " exceeds dataset size " +
                      std::to_string(n));
  }
  RngStream rng = RngStream(seed).child("shuffle", epoch);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(order[i - 1], order[j]);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    if (end - start < batch_size && remainder == Remainder::Drop) break;
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

std::pair<Dataset, Dataset> split_holdout(const Dataset& dataset, std::size_t holdout, RngStream& rng,
                                          Split holdout_split) {
  if (holdout == 0 || holdout >= dataset.size()) {
    throw ConfigError("holdout size must lie in [1, N)");
  }
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[static_cast<std::size_t>(rng.below(i))]);
  }
  std::vector<std::size_t> held(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(holdout));
  std::vector<std::size_t> rest(order.begin() + static_cast<std::ptrdiff_t>(holdout), order.end());
  std::sort(held.begin(), held.end());
  std::sort(rest.begin(), rest.end());
  Batch hb = dataset.gather(held);
  Batch rb = dataset.gather(rest);
  return {Dataset{std::move(rb.x), std::move(rb.y), dataset.num_classes, dataset.split},
          Dataset{std::move(hb.x), std::move(hb.y), dataset.num_classes, holdout_split}};
}

}  // namespace exitweave::datahub
