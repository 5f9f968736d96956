#pragma once

// Writes CIFAR binary archives filled with class-structured synthetic images:
// each class has its own smooth colour pattern, each record adds uniform
// noise. Labels cycle 0..K-1, so every split is exactly class-balanced when
// its size is a multiple of K.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <vector>

#include "rdc/cifar.hpp"

namespace rdc::testing {

inline CifarRecord synthetic_record(int label, int classes, std::mt19937_64& rng, int noise = 48) {
  CifarRecord r;
  r.label = label;
  r.coarse_label = label % 20;
  std::mt19937_64 pattern(1000003ULL * static_cast<std::uint64_t>(label) + static_cast<std::uint64_t>(classes));
  std::uniform_real_distribution<double> freq(0.05, 0.45), phase(0, 6.283185307179586);
  std::uniform_int_distribution<int> jitter(-noise, noise);
  for (int c = 0; c < 3; ++c) {
    const double fx = freq(pattern), fy = freq(pattern), ph = phase(pattern);
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) {
        const double base = 128 + 80 * std::sin(fx * x + fy * y + ph);
        const int v = static_cast<int>(std::lround(base)) + jitter(rng);
        r.pixels[static_cast<std::size_t>((c * 32 + y) * 32 + x)] = static_cast<std::uint8_t>(std::clamp(v, 0, 255));
      }
  }
  return r;
}

// `train_count` records spread over the train archive files, `test_count`
// in the test archive.
inline void write_synthetic_cifar(const std::filesystem::path& dir, CifarVariant variant, int train_count,
                                  int test_count, std::uint64_t seed = 1) {
  std::filesystem::create_directories(dir);
  const int classes = class_count(variant);
  std::mt19937_64 rng(seed);
  auto make = [&](int count, int first) {
    std::vector<CifarRecord> records;
    for (int i = 0; i < count; ++i) records.push_back(synthetic_record((first + i) % classes, classes, rng));
    return records;
  };
  const auto train_files = archive_files(variant, Split::train);
  const int per_file = train_count / static_cast<int>(train_files.size());
  int written = 0;
  for (std::size_t f = 0; f < train_files.size(); ++f) {
    const int count = f + 1 == train_files.size() ? train_count - written : per_file;
    write_cifar_file(dir / train_files[f], variant, make(count, written));
    written += count;
  }
  write_cifar_file(dir / archive_files(variant, Split::test).front(), variant, make(test_count, 0));
}

// Same images as the archives would hold, built in memory and normalised with
// their own channel statistics.
inline Dataset synthetic_dataset(int count, int classes = 10, std::uint64_t seed = 1, bool standardize = true) {
  std::mt19937_64 rng(seed);
  Dataset d;
  d.class_count = classes;
  std::vector<real> pixels;
  for (int i = 0; i < count; ++i) {
    const CifarRecord r = synthetic_record(i % classes, classes, rng);
    for (std::uint8_t p : r.pixels) pixels.push_back(static_cast<real>(p) / real(255));
    d.labels.push_back(r.label);
  }
  d.images = Tensor({count, 3, 32, 32}, std::move(pixels));
  return standardize ? normalize(d, channel_stats(d)) : d;
}

// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("rdc-" + tag + "-" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace rdc::testing
