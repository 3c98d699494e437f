#include "rhm/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "json.hpp"
#include "rhm/config.hpp"
#include "rhm/error.hpp"

namespace rhm {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'R', 'H', 'M', 'C', 'K', 'P', 'T', '\0'};

static_assert(sizeof(float) == 4 && std::numeric_limits<float>::is_iec559);

template <class U>
void put_le(std::ostream& out, U value) {
  unsigned char b[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>(value >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <class U>
U get_le(std::istream& in) {
  unsigned char b[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(b), sizeof(U))) throw FormatError("checkpoint: truncated header");
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(b[i]) << (8 * i);
  return value;
}

void put_tensor(std::ostream& out, const Tensor<float>& t) {
  for (Eigen::Index i = 0; i < t.size(); ++i) put_le(out, std::bit_cast<std::uint32_t>(t.data()[i]));
}

void get_tensor(std::istream& in, Tensor<float>& t, const std::string& name) {
  std::vector<unsigned char> buf(static_cast<std::size_t>(t.size()) * 4);
  if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()))) {
    throw FormatError("checkpoint: truncated tensor '" + name + "'");
  }
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    const unsigned char* b = buf.data() + 4 * i;
    const std::uint32_t u = b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    t.data()[i] = std::bit_cast<float>(u);
  }
}

// Tensors in file order: parameters, then both moment sets.
template <class F>
void for_each_stored(ModelState& s, F&& f) {
  s.params.for_each([&](const std::string& n, Tensor<float>& t, TensorKind) { f(n, t); });
  s.optim.m.for_each([&](const std::string& n, Tensor<float>& t, TensorKind) { f("adam.m." + n, t); });
  s.optim.v.for_each([&](const std::string& n, Tensor<float>& t, TensorKind) { f("adam.v." + n, t); });
}

}  // namespace

std::string checkpoint_filename(std::uint64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt_%09llu.bin", static_cast<unsigned long long>(step));
  return buf;
}

void write_checkpoint(std::ostream& out, const ModelState& state, const CheckpointMeta& meta) {
  auto& s = const_cast<ModelState&>(state);
  json tensors = json::array();
  for_each_stored(s, [&](const std::string& name, Tensor<float>& t) {
    tensors.push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}});
  });
  const json header = {
      {"model", to_json(state.config)},
      {"step", state.step},
      {"optim_t", state.optim.t},
      {"rng", {{"generator", "philox4x32-10"}, {"seed", meta.train_seed}, {"next_batch_substream", state.step}}},
      {"run_id", meta.run_id},
      {"tensors", tensors},
  };
  const std::string text = header.dump();
  out.write(kMagic, sizeof kMagic);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for_each_stored(s, [&](const std::string&, Tensor<float>& t) { put_tensor(out, t); });
  if (!out) throw Error("checkpoint: write failed");
}

ModelState read_checkpoint(std::istream& in, CheckpointMeta* meta) {
  char magic[sizeof kMagic];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw FormatError("checkpoint: bad magic");
  }
  const auto version = get_le<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto len = get_le<std::uint64_t>(in);
  if (len > (std::uint64_t{1} << 30)) throw FormatError("checkpoint: header too large");
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw FormatError("checkpoint: truncated header");

  json header;
  ModelState s;
  try {
    header = json::parse(text);
    s.config = model_config_from_json(header.at("model"));
    s.step = header.at("step").get<std::uint64_t>();
    s.optim.t = header.at("optim_t").get<std::uint64_t>();
    if (meta) {
      meta->run_id = header.at("run_id").get<std::string>();
      meta->train_seed = header.at("rng").at("seed").get<std::uint64_t>();
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: bad header: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: bad model config: ") + e.what());
  }
  s.config.validate();
  Philox dummy(0, Stream::Init);
  s.params = zeros_like(init_params<float>(s.config, dummy));
  s.optim.m = zeros_like(s.params);
  s.optim.v = zeros_like(s.params);

  const json& listed = header.at("tensors");
  std::size_t i = 0;
  for_each_stored(s, [&](const std::string& name, Tensor<float>& t) {
    if (i >= listed.size()) throw FormatError("checkpoint: missing tensor '" + name + "'");
    const json& e = listed[i++];
    if (e.value("name", std::string()) != name || e.value("rows", -1) != t.rows() ||
        e.value("cols", -1) != t.cols()) {
      throw FormatError("checkpoint: tensor '" + name + "' does not match the model config");
    }
  });
  if (i != listed.size()) throw FormatError("checkpoint: unexpected extra tensors");
  for_each_stored(s, [&](const std::string& name, Tensor<float>& t) { get_tensor(in, t, name); });
  return s;
}

void save_checkpoint(const std::filesystem::path& path, const ModelState& state,
                     const CheckpointMeta& meta) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    write_checkpoint(out, state, meta);
  }
  std::filesystem::rename(tmp, path);
}

ModelState load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("missing checkpoint: " + path.string());
  return read_checkpoint(in, meta);
}

}  // namespace rhm
