#pragma once

#include <cstdint>
#include <exception>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "rdc/cifar.hpp"
#include "rdc/gradcheck.hpp"
#include "rdc/model.hpp"
#include "rdc/trainer.hpp"

namespace rdc {

// Stable process exit codes.
enum ExitCode : int {
  kExitOk = 0,
  kExitIo = 1,
  kExitConfig = 2,
  kExitDiverged = 3,
  kExitVerification = 4,
};

int exit_code_for(const std::exception& error);

struct RunConfig {
  CifarVariant variant = CifarVariant::cifar10;
  std::filesystem::path data_dir;
  std::int64_t pixel_size = 32;
  std::optional<std::int64_t> train_limit;
  std::optional<std::int64_t> test_limit;
  HeadKind head = HeadKind::none;
  std::int64_t classes = 10;
  TrainConfig train;
  std::filesystem::path run_dir;

  std::size_t pipeline_count() const { return head == HeadKind::none ? 1 : 2; }
};

// INI-style text:
//
//   [dataset]  variant, data_dir, pixel_size, train_limit, test_limit
//   [model]    head (none|shallow|deep), classes
//   [train]    epochs, base_lr, schedule, optimizer, momentum, batch_size,
//              pipeline_weights (comma separated), seed
//   [output]   run_dir
//
// '#' and ';' start comments. Relative paths resolve against `base_dir`.
// Every problem found is collected into one ConfigError, one line each.
RunConfig parse_run_config(const std::string& text, const std::string& source = "config",
                           const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);

nlohmann::json to_json(const RunConfig& config);

inline constexpr const char* kMetricsHeader = "epoch,step,pipeline,split,loss,accuracy,lr";

int cmd_train(const RunConfig& config, std::ostream& out, std::ostream& err);
int cmd_eval(const std::filesystem::path& checkpoint, const std::optional<std::filesystem::path>& data_dir,
             const std::string& pipeline, std::ostream& out, std::ostream& err);
int cmd_export(const std::filesystem::path& checkpoint, const std::filesystem::path& destination, std::ostream& out,
               std::ostream& err);
// `cases` defaults to standard_grad_cases(seed).
int cmd_gradcheck(std::uint64_t seed, std::ostream& out, std::ostream& err,
                  std::optional<std::vector<GradCase>> cases = std::nullopt);

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace rdc
