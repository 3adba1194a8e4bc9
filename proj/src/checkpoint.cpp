#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "im2tex/errors.hpp"
#include "im2tex/models.hpp"
#include "json.hpp"

namespace im2tex::models {
namespace {

using nlohmann::json;

constexpr const char* kFormat = "im2tex-checkpoint";
constexpr int kVersion = 1;

json config_json(const ModelConfig& c) {
  return json{{"arch", arch_name(c.arch)},
              {"preset", preset_name(c.preset)},
              {"image_h", c.image_h},
              {"image_w", c.image_w},
              {"patch_h", c.patch_h},
              {"patch_w", c.patch_w},
              {"enc_layers", c.enc_layers},
              {"enc_heads", c.enc_heads},
              {"mlp_hidden", c.mlp_hidden},
              {"mlp_out", c.mlp_out},
              {"d_model", c.d_model},
              {"dec_layers", c.dec_layers},
              {"dec_heads", c.dec_heads},
              {"conv_channels", c.conv_channels},
              {"cnn_dense", c.cnn_dense},
              {"rnn_hidden", c.rnn_hidden},
              {"token_embed_dim", c.token_embed_dim},
              {"vocab_size", c.vocab_size},
              {"max_len", c.max_len}};
}

ModelConfig config_from(const json& j) {
  ModelConfig c;
  try {
    c.arch = parse_arch(j.at("arch").get<std::string>());
    c.preset = parse_preset(j.at("preset").get<std::string>());
    j.at("image_h").get_to(c.image_h);
    j.at("image_w").get_to(c.image_w);
    j.at("patch_h").get_to(c.patch_h);
    j.at("patch_w").get_to(c.patch_w);
    j.at("enc_layers").get_to(c.enc_layers);
    j.at("enc_heads").get_to(c.enc_heads);
    j.at("mlp_hidden").get_to(c.mlp_hidden);
    j.at("mlp_out").get_to(c.mlp_out);
    j.at("d_model").get_to(c.d_model);
    j.at("dec_layers").get_to(c.dec_layers);
    j.at("dec_heads").get_to(c.dec_heads);
    j.at("conv_channels").get_to(c.conv_channels);
    j.at("cnn_dense").get_to(c.cnn_dense);
    j.at("rnn_hidden").get_to(c.rnn_hidden);
    j.at("token_embed_dim").get_to(c.token_embed_dim);
    j.at("vocab_size").get_to(c.vocab_size);
    j.at("max_len").get_to(c.max_len);
  } catch (const json::exception& e) {
    throw FormatError("config", e.what());
  }
  c.validate();
  return c;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out << bytes;
}

// Appends tensors as little-endian binary32 and returns their manifest entries.
json pack(const std::vector<std::pair<std::string, const Tensor*>>& tensors, std::string& blob) {
  json list = json::array();
  for (const auto& [name, t] : tensors) {
    const std::size_t offset = blob.size();
    for (double x : t->values()) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(x));
      for (int b = 0; b < 4; ++b) blob.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
    }
    list.push_back(json{{"name", name},
                        {"shape", t->shape()},
                        {"dtype", "f32le"},
                        {"offset", offset},
                        {"byte_length", blob.size() - offset}});
  }
  return list;
}

Tensor unpack(const json& entry, const std::string& blob, const Shape& expected) {
  const std::string name = entry.at("name").get<std::string>();
  if (entry.at("dtype").get<std::string>() != "f32le") {
    throw FormatError("dtype", name + " is not f32le");
  }
  const Shape shape = entry.at("shape").get<Shape>();
  if (shape != expected) {
    throw FormatError("shape", name + " is " + shape_str(shape) + ", config implies " +
                                   shape_str(expected));
  }
  const std::size_t offset = entry.at("offset").get<std::size_t>();
  const std::size_t length = entry.at("byte_length").get<std::size_t>();
  if (length != shape_size(shape) * 4 || offset + length > blob.size()) {
    throw FormatError("byte_length", name + " does not fit the blob");
  }
  std::vector<double> values(shape_size(shape));
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) {
      bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(blob[offset + 4 * i + b])) << (8 * b);
    }
    values[i] = std::bit_cast<float>(bits);
  }
  return Tensor(shape, std::move(values));
}

ParamSet unpack_all(const json& list, const std::string& blob, const ShapeMap& shapes,
                    const std::string& prefix) {
  ParamSet out;
  for (const json& entry : list) {
    std::string name = entry.at("name").get<std::string>();
    if (name.rfind(prefix, 0) != 0) continue;
    name.erase(0, prefix.size());
    const auto it = shapes.find(name);
    if (it == shapes.end()) throw FormatError("name", "unexpected tensor " + name);
    out.emplace(name, unpack(entry, blob, it->second));
  }
  if (out.size() != shapes.size()) {
    throw FormatError("tensors", "expected " + std::to_string(shapes.size()) + " tensors, found " +
                                     std::to_string(out.size()));
  }
  return out;
}

}  // namespace

std::string config_to_json(const ModelConfig& cfg) { return config_json(cfg).dump(2); }

ModelConfig config_from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError("config", e.what());
  }
  return config_from(j);
}

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt) {
  const ShapeMap shapes = parameter_shapes(ckpt.config);
  std::filesystem::create_directories(dir);
  std::vector<std::pair<std::string, const Tensor*>> tensors;
  for (const auto& [name, t] : ckpt.params) {
    const auto it = shapes.find(name);
    if (it == shapes.end() || it->second != t.shape()) {
      throw ContractError("save_checkpoint: parameter " + name + " does not match the config");
    }
    tensors.emplace_back(name, &t);
  }
  if (tensors.size() != shapes.size()) throw ContractError("save_checkpoint: incomplete parameter set");

  std::string blob;
  json manifest{{"format", kFormat},
                {"version", kVersion},
                {"config", config_json(ckpt.config)},
                {"params", {{"file", "params.bin"}, {"tensors", pack(tensors, blob)}}}};
  write_file(dir / "params.bin", blob);

  if (!ckpt.adam_m.empty()) {
    std::vector<std::pair<std::string, const Tensor*>> moments;
    for (const auto& [name, t] : ckpt.adam_m) moments.emplace_back("m/" + name, &t);
    for (const auto& [name, t] : ckpt.adam_v) moments.emplace_back("v/" + name, &t);
    std::string optim;
    manifest["optimizer"] = {{"file", "optim.bin"},
                             {"step", ckpt.adam_step},
                             {"tensors", pack(moments, optim)}};
    write_file(dir / "optim.bin", optim);
  } else {
    std::filesystem::remove(dir / "optim.bin");
  }
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  json manifest;
  try {
    manifest = json::parse(read_file(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw FormatError("manifest", e.what());
  }
  try {
    if (manifest.at("format") != kFormat) throw FormatError("format", "not an im2tex checkpoint");
    if (manifest.at("version") != kVersion) throw FormatError("version", "unsupported version");
    Checkpoint ckpt;
    ckpt.config = config_from(manifest.at("config"));
    const ShapeMap shapes = parameter_shapes(ckpt.config);
    const json& params = manifest.at("params");
    ckpt.params = unpack_all(params.at("tensors"), read_file(dir / params.at("file").get<std::string>()),
                             shapes, "");
    if (manifest.contains("optimizer")) {
      const json& opt = manifest.at("optimizer");
      const std::string blob = read_file(dir / opt.at("file").get<std::string>());
      ckpt.adam_m = unpack_all(opt.at("tensors"), blob, shapes, "m/");
      ckpt.adam_v = unpack_all(opt.at("tensors"), blob, shapes, "v/");
      ckpt.adam_step = opt.at("step").get<std::uint64_t>();
    }
    return ckpt;
  } catch (const json::exception& e) {
    throw FormatError("manifest", e.what());
  }
}

}  // namespace im2tex::models
