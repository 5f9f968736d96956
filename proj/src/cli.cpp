#include "rdc/cli.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "rdc/checkpoint.hpp"
#include "rdc/error.hpp"

namespace rdc {
namespace {

using nlohmann::json;

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

template <class T>
bool parse_number(const std::string& text, T& value) {
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  return ec == std::errc() && ptr == end;
}

std::string format_g(double v, int digits = 9) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

std::string format_fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

struct Entry {
  std::string value;
  int line = 0;
};

const std::map<std::string, std::set<std::string>>& known_keys() {
  static const std::map<std::string, std::set<std::string>> keys = {
      {"dataset", {"variant", "data_dir", "pixel_size", "train_limit", "test_limit"}},
      {"model", {"head", "classes"}},
      {"train", {"epochs", "base_lr", "schedule", "optimizer", "momentum", "batch_size", "pipeline_weights", "seed"}},
      {"output", {"run_dir"}},
  };
  return keys;
}

// Collects diagnostics while converting fields.
class Fields {
 public:
  Fields(std::map<std::string, Entry> entries, std::string source)
      : entries_(std::move(entries)), source_(std::move(source)) {}

  void error(const std::string& key, const std::string& message) {
    const auto it = entries_.find(key);
    const std::string where = it == entries_.end() ? source_ : source_ + ":" + std::to_string(it->second.line);
    problems_.push_back(where + ": " + key + ": " + message);
  }
  void error(const std::string& message) { problems_.push_back(source_ + ": " + message); }
  void located(const std::string& message) { problems_.push_back(message); }

  const std::string* raw(const std::string& key) const {
    const auto it = entries_.find(key);
    return it == entries_.end() ? nullptr : &it->second.value;
  }

  template <class T>
  std::optional<T> number(const std::string& key) {
    const std::string* text = raw(key);
    if (!text) return std::nullopt;
    T value{};
    if (!parse_number(*text, value)) {
      error(key, "'" + *text + "' is not a valid number");
      return std::nullopt;
    }
    return value;
  }

  template <class T>
  void positive(const std::string& key, T& target) {
    if (auto v = number<T>(key)) {
      if (*v > 0) target = *v;
      else error(key, "must be positive");
    }
  }

  const std::vector<std::string>& problems() const { return problems_; }

 private:
  std::map<std::string, Entry> entries_;
  std::string source_;
  std::vector<std::string> problems_;
};

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& text) {
  const std::filesystem::path p(text);
  return (p.is_absolute() || base.empty() ? p : base / p).lexically_normal();
}

void write_row(std::ostream& out, std::int64_t epoch, const std::string& step, const std::string& pipeline,
               const std::string& split, double loss, const std::string& accuracy, const std::string& lr) {
  out << epoch << ',' << step << ',' << pipeline << ',' << split << ',' << format_g(loss) << ',' << accuracy << ','
      << lr << '\n';
}

}  // namespace

int exit_code_for(const std::exception& error) {
  if (dynamic_cast<const DivergedError*>(&error)) return kExitDiverged;
  if (dynamic_cast<const ConfigError*>(&error) || dynamic_cast<const ContractError*>(&error)) return kExitConfig;
  return kExitIo;
}

RunConfig parse_run_config(const std::string& text, const std::string& source, const std::filesystem::path& base_dir) {
  std::map<std::string, Entry> entries;
  std::vector<std::string> syntax;
  std::string section;
  std::istringstream in(text);
  std::string line;
  for (int number = 1; std::getline(in, line); ++number) {
    const std::string where = source + ":" + std::to_string(number) + ": ";
    const auto comment = line.find_first_of("#;");
    const std::string body = trim(std::string_view(line).substr(0, comment));
    if (body.empty()) continue;
    if (body.front() == '[') {
      if (body.back() != ']') {
        syntax.push_back(where + "malformed section header");
        continue;
      }
      section = trim(std::string_view(body).substr(1, body.size() - 2));
      if (!known_keys().count(section)) syntax.push_back(where + "unknown section [" + section + "]");
      continue;
    }
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      syntax.push_back(where + "expected key = value");
      continue;
    }
    const std::string key = trim(std::string_view(body).substr(0, eq));
    const std::string value = trim(std::string_view(body).substr(eq + 1));
    if (section.empty()) {
      syntax.push_back(where + "key '" + key + "' outside any section");
      continue;
    }
    const auto known = known_keys().find(section);
    if (known == known_keys().end()) continue;
    if (!known->second.count(key)) {
      syntax.push_back(where + "unknown key '" + key + "' in [" + section + "]");
      continue;
    }
    const std::string full = section + "." + key;
    if (entries.count(full)) {
      syntax.push_back(where + "duplicate key " + full);
      continue;
    }
    entries[full] = {value, number};
  }

  Fields f(std::move(entries), source);
  for (const auto& s : syntax) f.located(s);
  RunConfig c;

  if (const std::string* v = f.raw("dataset.variant")) {
    try {
      c.variant = parse_cifar_variant(*v);
    } catch (const Error& e) {
      f.error("dataset.variant", e.what());
    }
  }
  if (const std::string* v = f.raw("dataset.data_dir"); v && !v->empty()) c.data_dir = resolve(base_dir, *v);
  else f.error("dataset.data_dir", "is required");
  f.positive("dataset.pixel_size", c.pixel_size);
  if (c.pixel_size % 4 != 0) f.error("dataset.pixel_size", "must be a multiple of 4");
  std::int64_t limit = 0;
  if (f.raw("dataset.train_limit")) {
    f.positive("dataset.train_limit", limit);
    if (limit > 0) c.train_limit = limit;
  }
  if (f.raw("dataset.test_limit")) {
    limit = 0;
    f.positive("dataset.test_limit", limit);
    if (limit > 0) c.test_limit = limit;
  }

  if (const std::string* v = f.raw("model.head")) {
    try {
      c.head = parse_head_kind(*v);
    } catch (const Error& e) {
      f.error("model.head", e.what());
    }
  }
  c.classes = class_count(c.variant);
  if (auto v = f.number<std::int64_t>("model.classes"); v && *v != c.classes)
    f.error("model.classes", std::to_string(*v) + " does not match " + to_string(c.variant) + " (" +
                                 std::to_string(c.classes) + " classes)");

  TrainConfig& t = c.train;
  f.positive("train.epochs", t.epochs);
  f.positive("train.base_lr", t.base_lr);
  f.positive("train.batch_size", t.batch_size);
  if (auto v = f.number<double>("train.momentum")) {
    if (*v >= 0 && *v < 1) t.momentum = *v;
    else f.error("train.momentum", "must lie in [0, 1)");
  }
  if (auto v = f.number<std::uint64_t>("train.seed")) t.seed = *v;
  if (const std::string* v = f.raw("train.schedule")) {
    try {
      t.schedule = parse_schedule(*v);
    } catch (const Error&) {
      f.error("train.schedule", "expected step or cosine, got '" + *v + "'");
    }
  }
  if (const std::string* v = f.raw("train.optimizer")) {
    try {
      t.optimizer = parse_optimizer(*v);
    } catch (const Error&) {
      f.error("train.optimizer", "expected adam or sgd, got '" + *v + "'");
    }
  }
  if (const std::string* v = f.raw("train.pipeline_weights")) {
    std::istringstream list(*v);
    std::string item;
    bool ok = true;
    while (std::getline(list, item, ',')) {
      double w = 0;
      if (!parse_number(trim(item), w)) {
        f.error("train.pipeline_weights", "'" + trim(item) + "' is not a valid number");
        ok = false;
        break;
      }
      t.pipeline_weights.push_back(w);
    }
    if (ok) {
      try {
        validate(t, c.pipeline_count());
      } catch (const ConfigError& e) {
        f.error("train." + std::string(e.what()));
      }
    }
  }
  if (t.pipeline_weights.empty()) t.pipeline_weights.assign(c.pipeline_count(), 1.0);

  if (const std::string* v = f.raw("output.run_dir"); v && !v->empty()) c.run_dir = resolve(base_dir, *v);
  else f.error("output.run_dir", "is required");

  if (!f.problems().empty()) {
    std::string message = "invalid configuration";
    for (const auto& p : f.problems()) message += "\n  " + p;
    throw ConfigError(message);
  }
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream text;
  text << in.rdbuf();
  return parse_run_config(text.str(), path.string(), std::filesystem::absolute(path).parent_path());
}

json to_json(const RunConfig& c) {
  const auto limit = [](const std::optional<std::int64_t>& v) { return v ? json(*v) : json(nullptr); };
  return {{"dataset",
           {{"variant", to_string(c.variant)},
            {"data_dir", c.data_dir.string()},
            {"pixel_size", c.pixel_size},
            {"train_limit", limit(c.train_limit)},
            {"test_limit", limit(c.test_limit)}}},
          {"model", {{"head", to_string(c.head)}, {"classes", c.classes}}},
          {"train",
           {{"epochs", c.train.epochs},
            {"base_lr", c.train.base_lr},
            {"schedule", to_string(c.train.schedule)},
            {"optimizer", to_string(c.train.optimizer)},
            {"momentum", c.train.momentum},
            {"batch_size", c.train.batch_size},
            {"pipeline_weights", c.train.pipeline_weights},
            {"seed", c.train.seed}}},
          {"output", {{"run_dir", c.run_dir.string()}}}};
}

int cmd_train(const RunConfig& config, std::ostream& out, std::ostream& err) {
  try {
    if (!std::filesystem::is_directory(config.data_dir))
      throw ConfigError("dataset.data_dir: " + config.data_dir.string() + " is not a directory");
    validate(config.train, config.pipeline_count());

    Dataset train_set = load_cifar(config.data_dir, config.variant, Split::train, config.train_limit);
    Dataset test_set = load_cifar(config.data_dir, config.variant, Split::test, config.test_limit);
    const ChannelStats stats = channel_stats(train_set);
    train_set = normalize(std::move(train_set), stats);
    test_set = normalize(std::move(test_set), stats);

    const std::uint64_t seed = config.train.seed;
    std::optional<ModelGraph> head;
    if (config.head == HeadKind::shallow) head = build_shallow_head(seed);
    if (config.head == HeadKind::deep) head = build_deep_head(seed);
    PipelineSet set = assemble_pipelines(build_toy_backbone(config.pixel_size, config.classes, seed), std::move(head),
                                         config.train.pipeline_weights);
    const ParameterReport report = set.parameter_report();
    out << "model: head " << to_string(config.head) << ", backbone " << report.backbone << " parameters, head "
        << report.head << " parameters\n";
    out << "data: " << train_set.size() << " train, " << test_set.size() << " test images ("
        << to_string(config.variant) << ")\n";

    std::filesystem::create_directories(config.run_dir);
    const auto metrics_path = config.run_dir / "metrics.csv";
    std::ofstream metrics(metrics_path, std::ios::trunc);
    if (!metrics) throw IoError("cannot write " + metrics_path.string());
    metrics << kMetricsHeader << '\n';

    const std::size_t count = set.pipeline_count();
    TrainHooks hooks;
    hooks.on_step = [&](const StepMetrics& m) {
      const std::string lr = format_g(m.lr);
      for (std::size_t j = 0; j < count; ++j)
        write_row(metrics, m.epoch, std::to_string(m.step), PipelineSet::pipeline_name(j), "train",
                  m.per_pipeline_loss[j], "", lr);
      write_row(metrics, m.epoch, std::to_string(m.step), "joint", "train", m.joint_loss, "", lr);
    };
    hooks.on_epoch = [&](const EpochMetrics& e) {
      const std::string lr = format_g(e.lr);
      for (std::size_t j = 0; j < count; ++j)
        write_row(metrics, e.epoch, "", PipelineSet::pipeline_name(j), "train", e.mean_loss[j],
                  format_fixed(e.train_accuracy[j], 6), lr);
      write_row(metrics, e.epoch, "", "joint", "train", e.mean_joint_loss, "", lr);
      metrics.flush();
      out << "epoch " << e.epoch + 1 << "/" << config.train.epochs << "  joint loss " << format_fixed(e.mean_joint_loss, 4);
      for (std::size_t j = 0; j < count; ++j)
        out << "  " << PipelineSet::pipeline_name(j) << " train acc " << format_fixed(e.train_accuracy[j], 4);
      out << '\n';
      return true;
    };
    const TrainLog log = train(set, train_set, config.train, hooks);

    const EpochMetrics& last = log.epochs.back();
    for (std::size_t j = 0; j < count; ++j) {
      const EvalResult r = evaluate_split(set, test_set, j);
      write_row(metrics, last.epoch, "", PipelineSet::pipeline_name(j), "test", r.loss, format_fixed(r.accuracy, 6),
                format_g(last.lr));
      out << PipelineSet::pipeline_name(j) << " test accuracy " << format_fixed(r.accuracy, 4) << " (weight "
          << format_g(set.weights()[j], 6) << ")\n";
    }
    metrics.close();
    if (!metrics) throw IoError("write failed: " + metrics_path.string());

    const auto checkpoint = config.run_dir / "checkpoint.rdc";
    save(set, checkpoint, {stats, to_json(config)});
    out << "checkpoint: " << checkpoint.string() << '\n';
    return kExitOk;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
}

int cmd_eval(const std::filesystem::path& checkpoint, const std::optional<std::filesystem::path>& data_dir,
             const std::string& pipeline, std::ostream& out, std::ostream& err) {
  try {
    const LoadedModel model = load(checkpoint);
    const std::size_t index = model.pipelines.pipeline_index(pipeline);
    const json& dataset = model.meta.config.at("dataset");
    const std::filesystem::path dir = data_dir ? *data_dir : std::filesystem::path(dataset.at("data_dir").get<std::string>());
    if (!std::filesystem::is_directory(dir)) throw ConfigError("data directory " + dir.string() + " does not exist");
    std::optional<std::int64_t> limit;
    if (!dataset.at("test_limit").is_null()) limit = dataset.at("test_limit").get<std::int64_t>();
    const CifarVariant variant = parse_cifar_variant(dataset.at("variant"));
    const Dataset test = normalize(load_cifar(dir, variant, Split::test, limit), model.meta.normalization);
    const double accuracy = evaluate(model.pipelines, test, index);
    out << pipeline << " accuracy " << format_fixed(accuracy, 4) << '\n';
    return kExitOk;
  } catch (const json::exception& e) {
    err << "error: " << checkpoint.string() << ": manifest lacks dataset settings: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
}

int cmd_export(const std::filesystem::path& checkpoint, const std::filesystem::path& destination, std::ostream& out,
               std::ostream& err) {
  try {
    export_shallow(checkpoint, destination);
    out << "exported " << destination.string() << ": " << std::filesystem::file_size(destination) << " bytes (from "
        << std::filesystem::file_size(checkpoint) << ")\n";
    return kExitOk;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
}

int cmd_gradcheck(std::uint64_t seed, std::ostream& out, std::ostream& err, std::optional<std::vector<GradCase>> cases) {
  try {
    if (!cases) cases = standard_grad_cases(seed);
    GradCheckOptions options;
    options.seed = seed;
    std::vector<std::string> failed;
    for (const GradCase& c : *cases) {
      const GradCheckResult r = check_gradients(c, options);
      char line[160];
      std::snprintf(line, sizeof line, "%-22s max relative error %.3e over %lld entries  %s\n", r.op.c_str(),
                    r.max_relative_error, static_cast<long long>(r.checked), r.passed ? "ok" : "FAIL");
      out << line;
      if (!r.passed) failed.push_back(r.op);
    }
    if (failed.empty()) {
      out << "gradcheck: all " << cases->size() << " ops within " << format_g(options.tolerance) << '\n';
      return kExitOk;
    }
    std::string names;
    for (const auto& f : failed) names += (names.empty() ? "" : ", ") + f;
    err << "gradcheck: tolerance " << format_g(options.tolerance) << " exceeded by " << names << '\n';
    return kExitVerification;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-pipeline CIFAR classifiers with a droppable convolutional head", "rdcnet"};
  app.require_subcommand(1);

  std::string config_path, data_dir, checkpoint, destination, pipeline = "shallow";
  std::uint64_t seed = 0;

  auto* train_cmd = app.add_subcommand("train", "Train from a config file");
  train_cmd->add_option("--config", config_path, "Run config (INI)")->required();
  auto* train_data = train_cmd->add_option("--data-dir", data_dir, "Override dataset.data_dir");
  auto* train_seed = train_cmd->add_option("--seed", seed, "Override train.seed");

  auto* eval_cmd = app.add_subcommand("eval", "Test accuracy of one pipeline of a checkpoint");
  eval_cmd->add_option("--checkpoint", checkpoint)->required();
  auto* eval_data = eval_cmd->add_option("--data-dir", data_dir, "Defaults to the directory recorded at training");
  eval_cmd->add_option("--pipeline", pipeline, "shallow or deep")->capture_default_str();

  auto* export_cmd = app.add_subcommand("export", "Drop the head, keep the shallow pipeline");
  export_cmd->add_option("--checkpoint", checkpoint)->required();
  export_cmd->add_option("--out", destination)->required();

  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  grad_cmd->add_option("--seed", seed)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitConfig;
  }

  if (train_cmd->parsed()) {
    RunConfig config;
    try {
      config = load_run_config(config_path);
      if (train_data->count()) config.data_dir = std::filesystem::absolute(data_dir).lexically_normal();
      if (train_seed->count()) config.train.seed = seed;
    } catch (const std::exception& e) {
      err << "error: " << e.what() << '\n';
      return exit_code_for(e);
    }
    return cmd_train(config, out, err);
  }
  if (eval_cmd->parsed())
    return cmd_eval(checkpoint, eval_data->count() ? std::optional<std::filesystem::path>(data_dir) : std::nullopt,
                    pipeline, out, err);
  if (export_cmd->parsed()) return cmd_export(checkpoint, destination, out, err);
  return cmd_gradcheck(seed, out, err);
}

}  // namespace rdc
