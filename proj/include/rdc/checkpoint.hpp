#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "rdc/cifar.hpp"
#include "rdc/model.hpp"

namespace rdc {

// Container layout, all integers little-endian:
//
//   "RDCNET01"  u32 version
//   u32 manifest_bytes  u32 manifest_crc  manifest (UTF-8 JSON)
//   u32 entry_count
//   per entry:  u32 name_bytes, name, u32 rank, u64 dims[rank],
//               u64 payload_bytes, payload (f32 LE), u32 crc
//
// An entry's crc covers every byte of its record before the crc itself.

inline constexpr char kCheckpointMagic[8] = {'R', 'D', 'C', 'N', 'E', 'T', '0', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<std::uint8_t> payload;  // 4 bytes per element

  Tensor tensor() const;
  static CheckpointEntry from_tensor(std::string name, const Tensor& tensor);
  // Serialized record size, crc included.
  std::uint64_t record_bytes() const;
};

struct Checkpoint {
  nlohmann::json manifest;
  std::vector<CheckpointEntry> entries;
};

// Writes to a sibling temp file, then renames over `path`.
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
// Verifies magic, version and every checksum. IoError if unreadable,
// FormatError if malformed, IntegrityError on a checksum mismatch.
Checkpoint read_checkpoint(const std::filesystem::path& path);

struct RunMetadata {
  ChannelStats normalization;
  nlohmann::json config = nlohmann::json::object();  // run config snapshot
};

nlohmann::json describe(const PipelineSet& pipelines, const RunMetadata& meta = {});
void save(const PipelineSet& pipelines, const std::filesystem::path& path, const RunMetadata& meta = {});

// Graphs and pipelines from a manifest, parameters zero-filled.
PipelineSet rebuild(const nlohmann::json& manifest);

struct LoadedModel {
  PipelineSet pipelines;
  RunMetadata meta;
  nlohmann::json manifest;
};

struct LoadOptions {
  bool zero_fill = false;  // topology only, ignore payloads
};

LoadedModel load(const std::filesystem::path& path, const LoadOptions& options = {});

// Drops every head entry and rewrites the manifest to the single shallow
// pipeline. Backbone records are copied byte for byte. ContractError when the
// source has only one pipeline.
void export_shallow(const std::filesystem::path& source, const std::filesystem::path& destination);

}  // namespace rdc
