#include "rdc/cifar.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>

#include "rdc/error.hpp"
#include "rdc/ops.hpp"
#include "rdc/seed.hpp"

namespace rdc {
namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open " + file.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + file.string());
  return bytes;
}

constexpr std::int64_t kPlane = kImageSide * kImageSide;

}  // namespace

std::string to_string(CifarVariant variant) { return variant == CifarVariant::cifar10 ? "cifar10" : "cifar100"; }
std::string to_string(Split split) { return split == Split::train ? "train" : "test"; }

CifarVariant parse_cifar_variant(const std::string& text) {
  if (text == "cifar10") return CifarVariant::cifar10;
  if (text == "cifar100") return CifarVariant::cifar100;
  throw ContractError("unknown dataset variant '" + text + "' (expected cifar10 or cifar100)");
}

int class_count(CifarVariant variant) { return variant == CifarVariant::cifar10 ? 10 : 100; }

std::int64_t record_size(CifarVariant variant) {
  return (variant == CifarVariant::cifar10 ? 1 : 2) + kImageBytes;
}

std::vector<std::string> archive_files(CifarVariant variant, Split split) {
  if (variant == CifarVariant::cifar100) return {split == Split::train ? "train.bin" : "test.bin"};
  if (split == Split::test) return {"test_batch.bin"};
  return {"data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"};
}

Dataset Dataset::head(std::int64_t n) const {
  if (n < 1 || n > size()) throw ContractError("dataset head(" + std::to_string(n) + ") of " + std::to_string(size()));
  Dataset out;
  out.images = Tensor({n, 3, kImageSide, kImageSide},
                      std::vector<real>(images.raw(), images.raw() + n * kImageBytes));
  out.labels.assign(labels.begin(), labels.begin() + n);
  out.class_count = class_count;
  out.split = split;
  return out;
}

Dataset load_cifar(const std::filesystem::path& dir, CifarVariant variant, Split split,
                   std::optional<std::int64_t> limit) {
  if (limit && *limit < 1) throw ContractError("dataset limit must be positive");
  const auto files = archive_files(variant, split);
  for (const auto& name : files)
    if (!std::filesystem::is_regular_file(dir / name)) throw IoError("missing CIFAR archive " + (dir / name).string());

  const std::int64_t stride = record_size(variant);
  const std::int64_t label_offset = variant == CifarVariant::cifar10 ? 0 : 1;
  const int classes = class_count(variant);

  std::vector<real> pixels;
  std::vector<int> labels;
  for (const auto& name : files) {
    if (limit && static_cast<std::int64_t>(labels.size()) >= *limit) break;
    const auto bytes = read_file(dir / name);
    const auto total = static_cast<std::int64_t>(bytes.size());
    for (std::int64_t offset = 0; offset < total; offset += stride) {
      if (limit && static_cast<std::int64_t>(labels.size()) >= *limit) break;
      if (offset + stride > total)
        throw FormatError((dir / name).string() + ": truncated record at byte offset " + std::to_string(offset) +
                          " (" + std::to_string(total - offset) + " of " + std::to_string(stride) + " bytes)");
      const int label = bytes[static_cast<std::size_t>(offset + label_offset)];
      if (label >= classes)
        throw FormatError((dir / name).string() + ": label " + std::to_string(label) + " at byte offset " +
                          std::to_string(offset) + " exceeds " + std::to_string(classes) + " classes");
      labels.push_back(label);
      const std::uint8_t* src = bytes.data() + offset + label_offset + 1;
      for (std::int64_t i = 0; i < kImageBytes; ++i) pixels.push_back(static_cast<real>(src[i]) / real(255));
    }
  }
  if (labels.empty()) throw FormatError("no records in CIFAR archives under " + dir.string());

  Dataset data;
  const auto n = static_cast<std::int64_t>(labels.size());
  data.images = Tensor({n, 3, kImageSide, kImageSide}, std::move(pixels));
  data.labels = std::move(labels);
  data.class_count = classes;
  data.split = split;
  return data;
}

void write_cifar_file(const std::filesystem::path& file, CifarVariant variant, std::span<const CifarRecord> records) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + file.string());
  for (const CifarRecord& r : records) {
    if (variant == CifarVariant::cifar100) out.put(static_cast<char>(r.coarse_label));
    out.put(static_cast<char>(r.label));
    out.write(reinterpret_cast<const char*>(r.pixels.data()), kImageBytes);
  }
  if (!out) throw IoError("write failed: " + file.string());
}

ChannelStats channel_stats(const Dataset& data) {
  ChannelStats stats;
  const std::int64_t n = data.size();
  const double count = static_cast<double>(n * kPlane);
  for (int c = 0; c < 3; ++c) {
    double total = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      const real* plane = data.images.raw() + (i * 3 + c) * kPlane;
      for (std::int64_t p = 0; p < kPlane; ++p) total += plane[p];
    }
    const double mean = total / count;
    double squares = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      const real* plane = data.images.raw() + (i * 3 + c) * kPlane;
      for (std::int64_t p = 0; p < kPlane; ++p) squares += (plane[p] - mean) * (plane[p] - mean);
    }
    stats.mean[c] = mean;
    stats.stddev[c] = std::sqrt(squares / count);
  }
  return stats;
}

Dataset normalize(Dataset data, const ChannelStats& stats) {
  for (int c = 0; c < 3; ++c)
    if (!(stats.stddev[c] > 0)) throw ContractError("normalize: standard deviation of channel " + std::to_string(c) + " is not positive");
  const std::int64_t n = data.images.dim(0);
  for (int c = 0; c < 3; ++c) {
    const auto mean = static_cast<real>(stats.mean[c]);
    const auto stddev = static_cast<real>(stats.stddev[c]);
    for (std::int64_t i = 0; i < n; ++i) {
      real* plane = data.images.raw() + (i * 3 + c) * kPlane;
      for (std::int64_t p = 0; p < kPlane; ++p) plane[p] = (plane[p] - mean) / stddev;
    }
  }
  return data;
}

std::vector<std::int64_t> epoch_order(std::int64_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(mix_seed(seed, fnv1a("epoch") ^ epoch));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

BatchStream::BatchStream(const Dataset& data, const BatchPlan& plan, std::int64_t target_size)
    : data_(&data), plan_(plan), target_size_(target_size) {
  if (plan.batch_size < 1) throw ContractError("batch size must be positive");
  if (plan.batch_size > data.size())
    throw ContractError("batch size " + std::to_string(plan.batch_size) + " exceeds dataset size " +
                        std::to_string(data.size()));
  if (target_size < 1) throw ContractError("target size must be positive");
  if (plan.shuffle) {
    order_ = epoch_order(data.size(), plan.seed, plan.epoch);
  } else {
    order_.resize(static_cast<std::size_t>(data.size()));
    std::iota(order_.begin(), order_.end(), 0);
  }
}

std::int64_t BatchStream::batch_count() const noexcept {
  return (data_->size() + plan_.batch_size - 1) / plan_.batch_size;
}

std::optional<Batch> BatchStream::next() {
  if (cursor_ >= order_.size()) return std::nullopt;
  const std::size_t end = std::min(order_.size(), cursor_ + static_cast<std::size_t>(plan_.batch_size));
  const auto count = static_cast<std::int64_t>(end - cursor_);
  Batch batch;
  batch.images = Tensor({count, 3, kImageSide, kImageSide});
  for (std::int64_t b = 0; b < count; ++b) {
    const std::int64_t row = order_[cursor_ + static_cast<std::size_t>(b)];
    std::memcpy(batch.images.raw() + b * kImageBytes, data_->images.raw() + row * kImageBytes,
                sizeof(real) * kImageBytes);
    batch.labels.push_back(data_->labels[static_cast<std::size_t>(row)]);
    batch.indices.push_back(row);
  }
  cursor_ = end;
  if (target_size_ != kImageSide) batch.images = resize_bilinear(batch.images, target_size_);
  return batch;
}

BatchStream batches(const Dataset& data, const BatchPlan& plan, std::int64_t target_size) {
  return BatchStream(data, plan, target_size);
}

}  // namespace rdc
