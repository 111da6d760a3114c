#include "cflow/checkpoint.hpp"

#include <array>
#include <fstream>
#include <iterator>
#include <sstream>

#include "cflow/tensor_io.hpp"

namespace cflow {

namespace {

constexpr std::array<char, 4> kMagic = {'C', 'F', 'C', 'K'};

std::string shape_value(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

Shape parse_shape(const std::string& key, const std::string& text) {
  Shape s;
  std::istringstream is(text);
  std::string part;
  while (std::getline(is, part, 'x')) {
    try {
      s.push_back(static_cast<std::size_t>(std::stoul(part)));
    } catch (const std::exception&) {
      throw FormatError("checkpoint: bad shape for " + key + ": " + text);
    }
  }
  if (s.empty()) throw FormatError("checkpoint: empty shape for " + key);
  return s;
}

const char* kind_name(Preprocessor::Kind k) {
  switch (k) {
    case Preprocessor::Kind::kIdentity: return "identity";
    case Preprocessor::Kind::kDequantize: return "dequantize";
    case Preprocessor::Kind::kAffine: return "affine";
  }
  return "identity";
}

}  // namespace

KeyValues describe_model(const FlowModel& model) {
  const ModelConfig& c = model.config();
  const Preprocessor& p = model.preprocessor();
  KeyValues kv;
  kv.set("model.L", std::to_string(c.levels));
  kv.set("model.K", std::to_string(c.steps));
  kv.set("model.n_c", std::to_string(c.widths.conv_channels));
  kv.set("model.n_w", std::to_string(c.widths.fc_width));
  kv.set("model.hidden", std::to_string(c.widths.coupling_hidden));
  kv.set("model.features", std::to_string(c.widths.feature_channels));
  kv.set("model.x_shape", shape_value(c.x_shape));
  kv.set("model.y_shape", shape_value(c.y_shape));
  kv.set("pre.kind", kind_name(p.kind));
  kv.set("pre.bins", std::to_string(p.bins));
  kv.set("pre.scale", format_double(p.scale));
  kv.set("pre.shift", format_double(p.shift));
  return kv;
}

FlowModel model_from_description(const KeyValues& kv) {
  ModelConfig c;
  c.levels = static_cast<std::size_t>(kv.get_int("model.L"));
  c.steps = static_cast<std::size_t>(kv.get_int("model.K"));
  c.widths.conv_channels = static_cast<std::size_t>(kv.get_int("model.n_c"));
  c.widths.fc_width = static_cast<std::size_t>(kv.get_int("model.n_w"));
  c.widths.coupling_hidden = static_cast<std::size_t>(kv.get_int("model.hidden"));
  c.widths.feature_channels = static_cast<std::size_t>(kv.get_int("model.features"));
  c.x_shape = parse_shape("model.x_shape", kv.get("model.x_shape"));
  c.y_shape = parse_shape("model.y_shape", kv.get("model.y_shape"));
  Preprocessor p;
  const std::string& kind = kv.get("pre.kind");
  if (kind == "dequantize") {
    p = Preprocessor::dequantize(static_cast<std::size_t>(kv.get_int("pre.bins")));
  } else if (kind == "affine") {
    p = Preprocessor::affine(kv.get_double("pre.scale"), kv.get_double("pre.shift"));
  } else if (kind != "identity") {
    throw FormatError("checkpoint: unknown preprocessing kind " + kind);
  }
  Rng rng(0);
  return FlowModel(c, p, rng);
}

void write_checkpoint(std::ostream& os, const TrainState& state) {
  os.write(kMagic.data(), kMagic.size());
  write_u32(os, kCheckpointVersion);
  KeyValues kv = describe_model(state.model);
  kv.set("adam.t", std::to_string(state.adam.t));
  const std::string block = kv.serialize();
  write_u32(os, static_cast<std::uint32_t>(block.size()));
  os.write(block.data(), static_cast<std::streamsize>(block.size()));

  const ParameterStore& params = state.model.parameters();
  write_u32(os, static_cast<std::uint32_t>(3 * params.size()));
  auto put = [&os](const std::string& name, const Tensor& t) {
    write_u16(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(os, t);
  };
  for (std::size_t i = 0; i < params.size(); ++i) put(params[i].name, params[i].value);
  for (std::size_t i = 0; i < params.size(); ++i) put("adam.m/" + params[i].name, state.adam.m[i]);
  for (std::size_t i = 0; i < params.size(); ++i) put("adam.v/" + params[i].name, state.adam.v[i]);

  write_u64(os, state.iteration);
  const std::string rng_state = state.rng.state();
  os.write(rng_state.data(), static_cast<std::streamsize>(rng_state.size()));
}

TrainState read_checkpoint(std::istream& is) {
  std::array<char, 4> magic{};
  is.read(magic.data(), magic.size());
  if (!is) throw FormatError("checkpoint: truncated header");
  if (magic != kMagic) throw FormatError("checkpoint: bad magic (expected CFCK)");
  const std::uint32_t version = read_u32(is);
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  }
  const std::uint32_t block_len = read_u32(is);
  std::string block(block_len, '\0');
  is.read(block.data(), block_len);
  if (!is) throw FormatError("checkpoint: truncated hyperparameter block");
  const KeyValues kv = KeyValues::parse(block);

  TrainState state(model_from_description(kv), 0);
  state.adam.t = static_cast<std::uint64_t>(kv.get_int("adam.t"));
  ParameterStore& params = state.model.parameters();

  const std::uint32_t count = read_u32(is);
  if (count != 3 * params.size()) {
    throw FormatError("checkpoint: " + std::to_string(count) + " tensors, model defines " +
                      std::to_string(3 * params.size()));
  }
  std::vector<bool> seen(count, false);
  for (std::uint32_t n = 0; n < count; ++n) {
    const std::uint16_t len = read_u16(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    if (!is) throw FormatError("checkpoint: truncated tensor name");
    Tensor t = read_tensor(is);
    std::size_t slot = 0;
    std::string base = name;
    std::vector<Tensor>* moments = nullptr;
    if (name.rfind("adam.m/", 0) == 0) {
      base = name.substr(7);
      moments = &state.adam.m;
      slot = 1;
    } else if (name.rfind("adam.v/", 0) == 0) {
      base = name.substr(7);
      moments = &state.adam.v;
      slot = 2;
    }
    std::size_t idx = params.size();
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].name == base) {
        idx = i;
        break;
      }
    }
    if (idx == params.size()) throw FormatError("checkpoint: unknown tensor " + name);
    if (t.shape() != params[idx].value.shape()) {
      throw FormatError("checkpoint: tensor " + name + " has shape " + shape_str(t.shape()) +
                        ", model expects " + shape_str(params[idx].value.shape()));
    }
    const std::size_t flag = slot * params.size() + idx;
    if (seen[flag]) throw FormatError("checkpoint: duplicate tensor " + name);
    seen[flag] = true;
    if (moments) {
      (*moments)[idx] = std::move(t);
    } else {
      params[idx].value = std::move(t);
    }
  }
  state.iteration = read_u64(is);
  const std::string rng_state((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (rng_state.empty()) throw FormatError("checkpoint: missing RNG state");
  try {
    state.rng.restore(rng_state);
  } catch (const std::exception&) {
    throw FormatError("checkpoint: corrupt RNG state");
  }
  return state;
}

void save_checkpoint(const std::filesystem::path& path, const TrainState& state) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write checkpoint " + tmp.string());
    write_checkpoint(os, state);
    if (!os) throw std::runtime_error("checkpoint write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

TrainState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  return read_checkpoint(is);
}

}  // namespace cflow
