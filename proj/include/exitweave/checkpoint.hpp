#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

namespace exitweave::checkpoint {

inline constexpr std::uint32_t kFormatVersion = 1;

// Run checkpoint: a JSON header (resolved run configuration plus anything
// else the writer wants to record) and named flat float64 arrays.
//
// On disk:
//   bytes 0..7   magic "EXWVCKPT"
//   u32 LE       format version
//   u64 LE       header length H
//   H bytes      UTF-8 JSON header; its "arrays" member lists {name, length}
//                in payload order
//   payload      each array as `length` little-endian IEEE-754 doubles
struct Checkpoint {
  nlohmann::json header = nlohmann::json::object();
  std::map<std::string, std::vector<double>> arrays;

  const std::vector<double>& array(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace exitweave::checkpoint
