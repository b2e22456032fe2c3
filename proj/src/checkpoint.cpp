// Binary container: "EVACNETC", u32 version, u64 header length, JSON header,
// then the tensors listed in the header as little-endian doubles, column-major.

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "evacnet/error.hpp"
#include "evacnet/trainer.hpp"

namespace evacnet::trainer {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'E', 'V', 'A', 'C', 'N', 'E', 'T', 'C'};

struct Entry {
  std::string name;
  Eigen::MatrixXd value;
};

void write_container(const std::filesystem::path& path, nlohmann::json header, const std::vector<Entry>& tensors) {
  nlohmann::json dir = nlohmann::json::array();
  for (const auto& t : tensors) dir.push_back({{"name", t.name}, {"rows", t.value.rows()}, {"cols", t.value.cols()}});
  header["tensors"] = std::move(dir);
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw UserError("cannot write " + path.string());
  const std::uint32_t version = kCheckpointVersion;
  const std::uint64_t length = text.size();
  os.write(kMagic, sizeof kMagic);
  os.write(reinterpret_cast<const char*>(&version), sizeof version);
  os.write(reinterpret_cast<const char*>(&length), sizeof length);
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : tensors) {
    os.write(reinterpret_cast<const char*>(t.value.data()),
             static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(t.value.size())));
  }
  if (!os) throw UserError("failed writing " + path.string());
}

struct Container {
  nlohmann::json header;
  std::map<std::string, Eigen::MatrixXd> tensors;

  const Eigen::MatrixXd& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw UserError("checkpoint is missing tensor '" + name + "'");
    return it->second;
  }
};

Container read_container(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw UserError("cannot open checkpoint " + path.string());
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t length = 0;
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kMagic, sizeof magic) != 0) throw UserError(path.string() + " is not a checkpoint");
  is.read(reinterpret_cast<char*>(&version), sizeof version);
  if (!is || version != kCheckpointVersion) {
    throw UserError("unsupported checkpoint version " + std::to_string(version) + " in " + path.string() +
                    " (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  is.read(reinterpret_cast<char*>(&length), sizeof length);
  if (!is || length > (1ULL << 32)) throw UserError("corrupt checkpoint header in " + path.string());
  std::string text(length, '\0');
  is.read(text.data(), static_cast<std::streamsize>(length));
  if (!is) throw UserError("truncated checkpoint " + path.string());

  Container c;
  try {
    c.header = nlohmann::json::parse(text);
    for (const auto& t : c.header.at("tensors")) {
      const auto rows = t.at("rows").get<Eigen::Index>();
      const auto cols = t.at("cols").get<Eigen::Index>();
      if (rows < 0 || cols < 0) throw UserError("negative tensor shape");
      Eigen::MatrixXd m(rows, cols);
      is.read(reinterpret_cast<char*>(m.data()),
              static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(m.size())));
      if (!is) throw UserError("truncated checkpoint " + path.string());
      c.tensors.emplace(t.at("name").get<std::string>(), std::move(m));
    }
  } catch (const nlohmann::json::exception& e) {
    throw UserError("corrupt checkpoint header in " + path.string() + ": " + e.what());
  }
  return c;
}

const char* scheme_name(data::Scheme s) {
  switch (s) {
    case data::Scheme::zscore: return "zscore";
    case data::Scheme::minmax: return "minmax";
    case data::Scheme::passthrough: return "passthrough";
  }
  return "?";
}

data::Scheme parse_scheme(const std::string& s) {
  if (s == "zscore") return data::Scheme::zscore;
  if (s == "minmax") return data::Scheme::minmax;
  if (s == "passthrough") return data::Scheme::passthrough;
  throw UserError("unknown normalization scheme '" + s + "'");
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model& model) {
  nlohmann::json h;
  h["kind"] = "model";
  // Paths stay out so the file depends only on the model.
  TrainConfig stored = model.config;
  stored.data_dir.clear();
  stored.out_dir.clear();
  h["config"] = stored;
  h["registry"] = {{"names", model.registry.names},
                   {"temporal", model.registry.temporal},
                   {"spatial", model.registry.spatial}};
  h["detector_ids"] = model.detector_ids;
  nlohmann::json schemes = nlohmann::json::array();
  for (auto s : model.normalizer.schemes()) schemes.push_back(scheme_name(s));
  h["schemes"] = schemes;
  if (model.mask_counts) h["mask_counts"] = *model.mask_counts;

  std::vector<Entry> tensors;
  const auto& names = dmf::DmfParameters::names();
  const auto ptrs = model.params.tensors();
  for (std::size_t k = 0; k < names.size(); ++k) tensors.push_back({names[k], *ptrs[k]});
  tensors.push_back({"normalizer.offset", model.normalizer.offset()});
  tensors.push_back({"normalizer.scale", model.normalizer.scale()});
  tensors.push_back({"normalizer.target_mean", model.normalizer.target_mean()});
  tensors.push_back({"normalizer.target_std", model.normalizer.target_std()});
  write_container(path, std::move(h), tensors);
}

Model load_checkpoint(const std::filesystem::path& path) {
  const Container c = read_container(path);
  Model m;
  try {
    if (c.header.at("kind").get<std::string>() != "model") throw UserError(path.string() + " is not a model checkpoint");
    m.config = c.header.at("config").get<TrainConfig>();
    const auto& r = c.header.at("registry");
    m.registry.names = r.at("names").get<std::vector<std::string>>();
    m.registry.temporal = r.at("temporal").get<int>();
    m.registry.spatial = r.at("spatial").get<int>();
    m.detector_ids = c.header.at("detector_ids").get<std::vector<std::string>>();
    std::vector<data::Scheme> schemes;
    for (const auto& s : c.header.at("schemes")) schemes.push_back(parse_scheme(s.get<std::string>()));
    if (c.header.contains("mask_counts")) m.mask_counts = c.header.at("mask_counts").get<std::vector<std::int64_t>>();
    m.normalizer = data::Normalizer::from_parts(std::move(schemes), c.at("normalizer.offset"), c.at("normalizer.scale"),
                                                c.at("normalizer.target_mean"), c.at("normalizer.target_std"));
  } catch (const nlohmann::json::exception& e) {
    throw UserError("corrupt checkpoint header in " + path.string() + ": " + e.what());
  }

  const auto dc = m.dmf_config();
  const auto& names = dmf::DmfParameters::names();
  auto ptrs = m.params.tensors();
  for (std::size_t k = 0; k < names.size(); ++k) *ptrs[k] = c.at(names[k]);
  if (m.params.gcn_distance.rows() != dc.temporal_features + dc.spatial_features ||
      m.params.gcn_distance.cols() != dc.hidden || m.params.out_weight.rows() != dc.horizon) {
    throw UserError("checkpoint tensor shapes do not match its config");
  }
  return m;
}

void save_agent(const std::filesystem::path& path, const rl::QNetworks& nets, const rl::MaskCounter& counter) {
  nlohmann::json h;
  h["kind"] = "agent";
  h["mask_counts"] = counter.counts();
  h["mask_total"] = counter.total();
  std::vector<Entry> tensors;
  const auto& names = rl::QNetwork::names();
  const auto online = nets.online.tensors();
  const auto target = nets.target.tensors();
  for (std::size_t k = 0; k < names.size(); ++k) tensors.push_back({"online." + names[k], *online[k]});
  for (std::size_t k = 0; k < names.size(); ++k) tensors.push_back({"target." + names[k], *target[k]});
  write_container(path, std::move(h), tensors);
}

rl::QNetworks load_agent(const std::filesystem::path& path) {
  const Container c = read_container(path);
  if (c.header.value("kind", std::string()) != "agent") throw UserError(path.string() + " is not an agent checkpoint");
  rl::QNetworks nets;
  const auto& names = rl::QNetwork::names();
  auto online = nets.online.tensors();
  auto target = nets.target.tensors();
  for (std::size_t k = 0; k < names.size(); ++k) {
    *online[k] = c.at("online." + names[k]);
    *target[k] = c.at("target." + names[k]);
  }
  return nets;
}

}  // namespace evacnet::trainer
