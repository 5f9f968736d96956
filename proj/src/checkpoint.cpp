#include "rdc/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <set>

#include <unistd.h>

#include "rdc/error.hpp"

namespace rdc {
namespace {

using nlohmann::json;
using Bytes = std::vector<std::uint8_t>;

std::uint32_t crc_of(const std::uint8_t* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

void put_u32(Bytes& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(Bytes& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_bytes(Bytes& out, const void* data, std::size_t n) {
  const auto* p = static_cast<const std::uint8_t*>(data);
  out.insert(out.end(), p, p + n);
}

class Reader {
 public:
  Reader(const Bytes& bytes, std::string file) : bytes_(bytes), file_(std::move(file)) {}

  std::size_t offset() const { return offset_; }
  bool done() const { return offset_ == bytes_.size(); }

  const std::uint8_t* take(std::uint64_t n, const char* what) {
    if (n > bytes_.size() - offset_)
      throw FormatError(file_ + ": truncated " + what + " at byte offset " + std::to_string(offset_));
    const std::uint8_t* p = bytes_.data() + offset_;
    offset_ += static_cast<std::size_t>(n);
    return p;
  }
  std::uint32_t u32(const char* what) {
    const std::uint8_t* p = take(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{p[i]} << (8 * i);
    return v;
  }
  std::uint64_t u64(const char* what) {
    const std::uint8_t* p = take(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{p[i]} << (8 * i);
    return v;
  }

  [[noreturn]] void fail(const std::string& message) const {
    throw FormatError(file_ + ": " + message + " at byte offset " + std::to_string(offset_));
  }

 private:
  const Bytes& bytes_;
  std::string file_;
  std::size_t offset_ = 0;
};

Bytes read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  Bytes bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path.string());
  return bytes;
}

Bytes serialize(const Checkpoint& checkpoint) {
  Bytes out;
  put_bytes(out, kCheckpointMagic, sizeof kCheckpointMagic);
  put_u32(out, kCheckpointVersion);
  const std::string manifest = checkpoint.manifest.dump(2);
  put_u32(out, static_cast<std::uint32_t>(manifest.size()));
  put_u32(out, crc_of(reinterpret_cast<const std::uint8_t*>(manifest.data()), manifest.size()));
  put_bytes(out, manifest.data(), manifest.size());
  put_u32(out, static_cast<std::uint32_t>(checkpoint.entries.size()));
  std::set<std::string> names;
  for (const CheckpointEntry& e : checkpoint.entries) {
    if (!names.insert(e.name).second) throw ContractError("duplicate checkpoint entry '" + e.name + "'");
    if (e.payload.size() != 4 * static_cast<std::uint64_t>(element_count(e.shape)))
      throw ContractError("entry '" + e.name + "' payload does not match shape " + to_string(e.shape));
    const std::size_t start = out.size();
    put_u32(out, static_cast<std::uint32_t>(e.name.size()));
    put_bytes(out, e.name.data(), e.name.size());
    put_u32(out, static_cast<std::uint32_t>(e.shape.size()));
    for (std::int64_t d : e.shape) put_u64(out, static_cast<std::uint64_t>(d));
    put_u64(out, e.payload.size());
    put_bytes(out, e.payload.data(), e.payload.size());
    put_u32(out, crc_of(out.data() + start, out.size() - start));
  }
  return out;
}

// ---- manifest <-> topology ----

json layer_to_json(const Layer& layer) {
  if (const auto* c = std::get_if<ConvLayer>(&layer))
    return {{"type", "conv"},           {"name", c->name},
            {"in", c->spec.in_channels}, {"out", c->spec.out_channels},
            {"kernel", c->spec.kernel_size}, {"stride", c->spec.stride},
            {"padding", c->spec.padding}, {"relu", c->relu},
            {"zero_init", c->zero_init}};
  if (const auto* l = std::get_if<LinearLayer>(&layer))
    return {{"type", "linear"},
            {"name", l->name},
            {"in", l->spec.in_features},
            {"out", l->spec.out_features},
            {"relu", l->relu},
            {"init_stddev", l->init_stddev}};
  if (std::holds_alternative<PoolLayer>(layer)) return {{"type", "pool"}, {"name", layer_name(layer)}};
  if (std::holds_alternative<FlattenLayer>(layer)) return {{"type", "flatten"}, {"name", layer_name(layer)}};
  return {{"type", "add_input"}, {"name", layer_name(layer)}};
}

Layer layer_from_json(const json& j) {
  const std::string type = j.at("type");
  const std::string name = j.at("name");
  if (type == "conv") {
    Conv2dSpec spec{j.at("in"), j.at("out"), j.at("kernel"), j.at("stride"), j.at("padding")};
    return ConvLayer{name, spec, j.at("relu"), j.at("zero_init")};
  }
  if (type == "linear") return LinearLayer{name, {j.at("in"), j.at("out")}, j.at("relu"), j.at("init_stddev")};
  if (type == "pool") return PoolLayer{name};
  if (type == "flatten") return FlattenLayer{name};
  if (type == "add_input") return AddInputLayer{name};
  throw FormatError("manifest: unknown layer type '" + type + "'");
}

json graph_to_json(const ModelGraph& g) {
  json layers = json::array();
  for (const Layer& l : g.layers()) layers.push_back(layer_to_json(l));
  json out = {{"name", g.name()}, {"layers", layers}, {"parameters", g.parameter_count()}};
  out["sample_shape"] = g.sample_shape() ? json(*g.sample_shape()) : json(nullptr);
  return out;
}

ModelGraph graph_from_json(const json& j) {
  std::vector<Layer> layers;
  for (const json& l : j.at("layers")) layers.push_back(layer_from_json(l));
  std::optional<Shape> sample;
  if (!j.at("sample_shape").is_null()) sample = j.at("sample_shape").get<Shape>();
  return ModelGraph(j.at("name"), std::move(layers), sample);
}

json stats_to_json(const ChannelStats& s) { return {{"mean", s.mean}, {"stddev", s.stddev}}; }

ChannelStats stats_from_json(const json& j) {
  ChannelStats s;
  s.mean = j.at("mean").get<std::array<double, 3>>();
  s.stddev = j.at("stddev").get<std::array<double, 3>>();
  return s;
}

std::filesystem::path temp_sibling(const std::filesystem::path& path) {
  return path.parent_path() / (path.filename().string() + ".tmp." + std::to_string(::getpid()));
}

}  // namespace

Tensor CheckpointEntry::tensor() const {
  Tensor t(shape);
  for (std::int64_t i = 0; i < t.size(); ++i) {
    const std::uint8_t* p = payload.data() + 4 * i;
    const std::uint32_t bits = std::uint32_t{p[0]} | std::uint32_t{p[1]} << 8 | std::uint32_t{p[2]} << 16 |
                               std::uint32_t{p[3]} << 24;
    t[i] = static_cast<real>(std::bit_cast<float>(bits));
  }
  return t;
}

CheckpointEntry CheckpointEntry::from_tensor(std::string name, const Tensor& tensor) {
  CheckpointEntry e{std::move(name), tensor.shape(), {}};
  e.payload.reserve(static_cast<std::size_t>(4 * tensor.size()));
  for (real v : tensor.data()) put_u32(e.payload, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  return e;
}

std::uint64_t CheckpointEntry::record_bytes() const { return 4 + name.size() + 4 + 8 * shape.size() + 8 + payload.size() + 4; }

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  const Bytes bytes = serialize(checkpoint);
  const auto temp = temp_sibling(path);
  {
    std::ofstream out(temp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.close();
    if (!out) {
      std::error_code ec;
      std::filesystem::remove(temp, ec);
      throw IoError("write failed: " + path.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(temp, path, ec);
  if (ec) {
    std::filesystem::remove(temp, ec);
    throw IoError("cannot move checkpoint into place at " + path.string());
  }
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  const Bytes bytes = read_all(path);
  Reader in(bytes, path.string());
  if (std::memcmp(in.take(8, "magic"), kCheckpointMagic, 8) != 0) throw FormatError(path.string() + ": not an RDCNET01 checkpoint");
  if (const auto version = in.u32("version"); version != kCheckpointVersion)
    throw FormatError(path.string() + ": unsupported format version " + std::to_string(version));

  Checkpoint cp;
  const std::uint32_t manifest_bytes = in.u32("manifest length");
  const std::uint32_t manifest_crc = in.u32("manifest checksum");
  const std::uint8_t* manifest = in.take(manifest_bytes, "manifest");
  if (crc_of(manifest, manifest_bytes) != manifest_crc) throw IntegrityError(path.string() + ": manifest checksum mismatch");
  try {
    cp.manifest = json::parse(manifest, manifest + manifest_bytes);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": manifest is not valid JSON: " + e.what());
  }

  const std::uint32_t count = in.u32("entry count");
  std::set<std::string> names;
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::size_t start = in.offset();
    CheckpointEntry e;
    const std::uint32_t name_bytes = in.u32("entry name length");
    const std::uint8_t* name = in.take(name_bytes, "entry name");
    e.name.assign(reinterpret_cast<const char*>(name), name_bytes);
    const std::uint32_t rank = in.u32("entry rank");
    if (rank == 0 || rank > 8) in.fail("entry '" + e.name + "' has rank " + std::to_string(rank));
    for (std::uint32_t r = 0; r < rank; ++r) {
      const std::uint64_t d = in.u64("entry shape");
      if (d == 0 || d > (1ULL << 40)) in.fail("entry '" + e.name + "' has a bad dimension");
      e.shape.push_back(static_cast<std::int64_t>(d));
    }
    const std::uint64_t payload = in.u64("payload length");
    if (payload != 4 * static_cast<std::uint64_t>(element_count(e.shape)))
      in.fail("entry '" + e.name + "' payload length does not match its shape");
    const std::uint8_t* data = in.take(payload, "payload");
    e.payload.assign(data, data + payload);
    const std::size_t end = in.offset();
    if (in.u32("entry checksum") != crc_of(bytes.data() + start, end - start))
      throw IntegrityError(path.string() + ": checksum mismatch in entry '" + e.name + "'");
    if (!names.insert(e.name).second) in.fail("duplicate entry '" + e.name + "'");
    cp.entries.push_back(std::move(e));
  }
  if (!in.done()) in.fail("trailing bytes after the last entry");
  return cp;
}

json describe(const PipelineSet& pipelines, const RunMetadata& meta) {
  json graphs = json::array();
  for (const ModelGraph& g : pipelines.graphs()) graphs.push_back(graph_to_json(g));
  json names = json::array();
  for (std::size_t j = 0; j < pipelines.pipeline_count(); ++j) names.push_back(PipelineSet::pipeline_name(j));
  const ParameterReport report = pipelines.parameter_report();
  return {{"format", "RDCNET01"},
          {"head", to_string(pipelines.head_kind())},
          {"graphs", graphs},
          {"pipelines", names},
          {"pipeline_weights", pipelines.weights()},
          {"parameters", {{"backbone", report.backbone}, {"head", report.head}, {"total", report.total()}}},
          {"normalization", stats_to_json(meta.normalization)},
          {"config", meta.config}};
}

void save(const PipelineSet& pipelines, const std::filesystem::path& path, const RunMetadata& meta) {
  Checkpoint cp;
  cp.manifest = describe(pipelines, meta);
  for (const auto& name : pipelines.store().names())
    cp.entries.push_back(CheckpointEntry::from_tensor(name, pipelines.store().at(name)));
  write_checkpoint(path, cp);
}

PipelineSet rebuild(const json& manifest) {
  try {
    const json& graphs = manifest.at("graphs");
    if (graphs.empty() || graphs.size() > 2) throw FormatError("manifest: expected one or two graphs");
    std::optional<ModelGraph> head;
    if (graphs.size() == 2) head = graph_from_json(graphs[1]);
    PipelineSet set =
        assemble_pipelines(graph_from_json(graphs[0]), std::move(head), manifest.at("pipeline_weights").get<std::vector<double>>());
    const json& names = manifest.at("pipelines");
    if (names.size() != set.pipeline_count()) throw FormatError("manifest: pipeline list does not match its graphs");
    const ParameterReport report = set.parameter_report();
    if (manifest.at("parameters").at("backbone") != report.backbone || manifest.at("parameters").at("head") != report.head)
      throw FormatError("manifest: parameter counts disagree with the recorded topology");
    return set;
  } catch (const json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  } catch (const ContractError& e) {
    throw FormatError(std::string("manifest describes an invalid model: ") + e.what());
  }
}

LoadedModel load(const std::filesystem::path& path, const LoadOptions& options) {
  Checkpoint cp = read_checkpoint(path);
  PipelineSet set = rebuild(cp.manifest);
  RunMetadata meta;
  try {
    meta.normalization = stats_from_json(cp.manifest.at("normalization"));
    meta.config = cp.manifest.at("config");
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": manifest: " + e.what());
  }
  if (!options.zero_fill) {
    ParameterStore& store = set.store();
    if (cp.entries.size() != store.names().size())
      throw FormatError(path.string() + ": " + std::to_string(cp.entries.size()) + " entries for " +
                        std::to_string(store.names().size()) + " parameters");
    for (const CheckpointEntry& e : cp.entries) {
      if (!store.contains(e.name)) throw FormatError(path.string() + ": unexpected entry '" + e.name + "'");
      if (store.at(e.name).shape() != e.shape)
        throw FormatError(path.string() + ": entry '" + e.name + "' has shape " + to_string(e.shape) + ", manifest needs " +
                          to_string(store.at(e.name).shape()));
      store.at(e.name) = e.tensor();
    }
  }
  return {std::move(set), std::move(meta), std::move(cp.manifest)};
}

void export_shallow(const std::filesystem::path& source, const std::filesystem::path& destination) {
  Checkpoint cp = read_checkpoint(source);
  const json& graphs = cp.manifest.at("graphs");
  if (graphs.size() != 2 || cp.manifest.at("pipelines").size() != 2)
    throw ContractError(source.string() + " holds a single pipeline; there is no head to drop");
  const std::string head = graphs[1].at("name");
  const std::string prefix = head + ".";

  Checkpoint out;
  out.manifest = cp.manifest;
  out.manifest["graphs"] = json::array({graphs[0]});
  out.manifest["pipelines"] = json::array({cp.manifest.at("pipelines")[0]});
  out.manifest["pipeline_weights"] = json::array({cp.manifest.at("pipeline_weights")[0]});
  out.manifest["parameters"]["head"] = 0;
  out.manifest["parameters"]["total"] = cp.manifest.at("parameters").at("backbone");
  out.manifest["exported_from"] = {{"head", cp.manifest.at("head")}, {"head_parameters", cp.manifest.at("parameters").at("head")}};
  out.manifest["head"] = to_string(HeadKind::none);
  for (CheckpointEntry& e : cp.entries)
    if (e.name.rfind(prefix, 0) != 0) out.entries.push_back(std::move(e));
  write_checkpoint(destination, out);
}

}  // namespace rdc
