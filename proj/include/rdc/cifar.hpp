#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rdc/tensor.hpp"

namespace rdc {

enum class CifarVariant { cifar10, cifar100 };
enum class Split { train, test };

std::string to_string(CifarVariant variant);
std::string to_string(Split split);
CifarVariant parse_cifar_variant(const std::string& text);

int class_count(CifarVariant variant);
// Bytes per record: label byte(s) + 3072 pixel bytes.
std::int64_t record_size(CifarVariant variant);
// Archive file names of the binary version, in load order.
std::vector<std::string> archive_files(CifarVariant variant, Split split);

inline constexpr std::int64_t kImageSide = 32;
inline constexpr std::int64_t kImageBytes = 3 * kImageSide * kImageSide;

struct Dataset {
  Tensor images;  // [N,3,32,32]
  std::vector<int> labels;
  int class_count = 10;
  Split split = Split::train;

  std::int64_t size() const noexcept { return static_cast<std::int64_t>(labels.size()); }
  // First n samples.
  Dataset head(std::int64_t n) const;
};

// Reads the standard binary archives from `dir`. Pixels are scaled by 1/255,
// planes stay in R, G, B order. `limit` stops reading after that many
// records. Missing files raise IoError, a trailing partial record raises
// FormatError naming the file and byte offset.
Dataset load_cifar(const std::filesystem::path& dir, CifarVariant variant, Split split,
                   std::optional<std::int64_t> limit = std::nullopt);

struct CifarRecord {
  int label = 0;
  int coarse_label = 0;  // CIFAR-100 only
  std::array<std::uint8_t, kImageBytes> pixels{};
};

// Writes records in the binary-archive layout of `variant`.
void write_cifar_file(const std::filesystem::path& file, CifarVariant variant, std::span<const CifarRecord> records);

struct ChannelStats {
  std::array<double, 3> mean{0, 0, 0};
  std::array<double, 3> stddev{1, 1, 1};
};

// Per-channel mean and population standard deviation, two passes in double.
ChannelStats channel_stats(const Dataset& data);

// (x - mean) / stddev per channel. stddev must be positive.
Dataset normalize(Dataset data, const ChannelStats& stats);

struct BatchPlan {
  std::int64_t batch_size = 1;
  std::uint64_t seed = 0;
  std::uint64_t epoch = 0;
  bool shuffle = true;
};

struct Batch {
  Tensor images;  // [B,3,s,s]
  std::vector<int> labels;
  std::vector<std::int64_t> indices;  // dataset rows
};

// Visiting order for one epoch; a pure function of (n, seed, epoch).
std::vector<std::int64_t> epoch_order(std::int64_t n, std::uint64_t seed, std::uint64_t epoch);

// Deterministic batches over a dataset. The final short batch is kept.
// Images are resized to `target_size` when it differs from 32.
class BatchStream {
 public:
  BatchStream(const Dataset& data, const BatchPlan& plan, std::int64_t target_size);

  std::optional<Batch> next();
  std::int64_t batch_count() const noexcept;

 private:
  const Dataset* data_;
  BatchPlan plan_;
  std::int64_t target_size_;
  std::vector<std::int64_t> order_;
  std::size_t cursor_ = 0;
};

BatchStream batches(const Dataset& data, const BatchPlan& plan, std::int64_t target_size);

}  // namespace rdc
