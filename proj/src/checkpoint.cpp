#include "exitweave/checkpoint.hpp"

#include <algorithm>
#include <filesystem>
#include <sstream>

#include "binary_io.hpp"
#include "exitweave/errors.hpp"

namespace exitweave::checkpoint {

namespace {
constexpr char kMagic[8] = {'E', 'X', 'W', 'V', 'C', 'K', 'P', 'T'};
}

const std::vector<double>& Checkpoint::array(const std::string& name) const {
  const auto it = arrays.find(name);
  if (it == arrays.end()) throw FormatError("checkpoint has no array '" + name + "'");
  return it->second;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json header = ckpt.header;
  header["arrays"] = nlohmann::json::array();
  for (const auto& [name, values] : ckpt.arrays) {
    header["arrays"].push_back({{"name", name}, {"length", values.size()}});
  }
  const std::string text = header.dump();

  std::ostringstream os(std::ios::binary);
  os.write(kMagic, sizeof(kMagic));
  binary_io::put_u32(os, kFormatVersion);
  binary_io::put_u64(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, values] : ckpt.arrays) binary_io::put_f64_array(os, values);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  binary_io::write_file_atomic(path.string(), os.str());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("checkpoint '" + path.string() + "' does not exist");
  binary_io::Reader rd(binary_io::read_file(path.string()), "checkpoint '" + path.string() + "'");
  const auto magic = rd.take(sizeof(kMagic), "magic");
  if (!std::equal(magic.begin(), magic.end(), kMagic)) rd.fail("bad magic");
  const auto version = rd.le<std::uint32_t>("version");
  if (version != kFormatVersion) rd.fail("unsupported checkpoint version " + std::to_string(version));
  const auto header_len = rd.le<std::uint64_t>("header length");
  const auto text = rd.take(header_len, "header");

  Checkpoint ckpt;
  try {
    ckpt.header = nlohmann::json::parse(text.begin(), text.end());
  } catch (const nlohmann::json::exception& e) {
    rd.fail(std::string("malformed header JSON: ") + e.what());
  }
  if (!ckpt.header.contains("arrays") || !ckpt.header["arrays"].is_array()) rd.fail("header lacks an array table");
  for (const auto& entry : ckpt.header["arrays"]) {
    const std::string name = entry.at("name").get<std::string>();
    const auto length = entry.at("length").get<std::uint64_t>();
    if (length > rd.remaining() / 8) rd.need(rd.remaining() + 1, "array payload");
    std::vector<double> values(length);
    for (double& v : values) v = rd.f64("array value");
    ckpt.arrays.emplace(name, std::move(values));
  }
  if (rd.remaining() != 0) rd.fail("trailing bytes after payload");
  ckpt.header.erase("arrays");
  return ckpt;
}

}  // namespace exitweave::checkpoint
