#include "im2tex/models.hpp"

#include <algorithm>
#include <cmath>

#include "im2tex/errors.hpp"
#include "im2tex/ops.hpp"
#include "im2tex/rng.hpp"

namespace im2tex::models {
namespace {

constexpr double kEmbedStddev = 0.02;

struct ArchName {
  Arch arch;
  std::string_view name;
};
constexpr ArchName kArchNames[] = {{Arch::cnn_lstm, "cnn_lstm"},
                                   {Arch::cnn_gru, "cnn_gru"},
                                   {Arch::bigimage_lstm, "bigimage_lstm"},
                                   {Arch::vit_transformer, "vit_transformer"}};

const Tensor& param(const ParamSet& params, const std::string& name) {
  const auto it = params.find(name);
  if (it == params.end()) throw ConfigError("missing parameter " + name);
  return it->second;
}

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t name_seed(std::uint64_t seed, std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : name) h = (h ^ c) * 0x100000001b3ULL;
  return mix(h ^ mix(seed));
}

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

// Spatial extent after the CNN encoder's conv + pool stages.
std::pair<std::size_t, std::size_t> cnn_grid(const ModelConfig& cfg) {
  std::size_t h = cfg.image_h, w = cfg.image_w;
  for (std::size_t i = 0; i < cfg.conv_channels.size(); ++i) {
    h /= 2;
    w /= 2;
  }
  return {h, w};
}

void add_attention_shapes(ShapeMap& m, const std::string& prefix, std::size_t d) {
  for (const char* p : {"q", "k", "v", "o"}) {
    m[prefix + ".w" + p] = {d, d};
    m[prefix + ".b" + p] = {d};
  }
}

void add_norm_shapes(ShapeMap& m, const std::string& prefix, std::size_t d) {
  m[prefix + ".gain"] = {d};
  m[prefix + ".shift"] = {d};
}

void add_mlp_shapes(ShapeMap& m, const std::string& prefix, const ModelConfig& cfg) {
  m[prefix + ".fc1.w"] = {cfg.d_model, cfg.mlp_hidden};
  m[prefix + ".fc1.b"] = {cfg.mlp_hidden};
  m[prefix + ".fc2.w"] = {cfg.mlp_hidden, cfg.mlp_out};
  m[prefix + ".fc2.b"] = {cfg.mlp_out};
}

Tensor linear(const Tensor& x, const ParamSet& params, const std::string& prefix) {
  return add_bias(matmul(x, param(params, prefix + ".w")), param(params, prefix + ".b"));
}

Tensor norm(const Tensor& x, const ParamSet& params, const std::string& prefix) {
  return layernorm(x, param(params, prefix + ".gain"), param(params, prefix + ".shift"));
}

Tensor mlp(const Tensor& x, const ParamSet& params, const std::string& prefix) {
  return linear(gelu(linear(x, params, prefix + ".fc1")), params, prefix + ".fc2");
}

std::string layer(const char* side, std::size_t i) {
  return std::string(side) + ".layer" + std::to_string(i);
}

Tensor row_vector(const Tensor& x) { return reshape(x, {1, x.size()}); }

// One recurrent step on row vectors: x_in [1, e+dense], h and c [1, hid].
std::pair<Tensor, Tensor> cell(const Tensor& x_in, const Tensor& h, const Tensor& c,
                               const ModelConfig& cfg, const ParamSet& params) {
  const std::size_t hid = cfg.rnn_hidden;
  const Tensor parts[] = {x_in, h};
  const Tensor xh = concat(parts, 1);
  if (cfg.arch == Arch::cnn_gru) {
    const Tensor zr = sigmoid(linear(xh, params, "dec.gru.zr"));
    const Tensor z = slice(zr, 1, 0, hid);
    const Tensor r = slice(zr, 1, hid, hid);
    const Tensor gated[] = {x_in, mul(r, h)};
    const Tensor n = tanh(linear(concat(gated, 1), params, "dec.gru.n"));
    // (1 - z) * n + z * h, written as n + z * (h - n)
    const Tensor h2 = add(n, mul(z, sub(h, n)));
    return {h2, c};
  }
  const Tensor gates = linear(xh, params, "dec.lstm");
  const Tensor i = sigmoid(slice(gates, 1, 0, hid));
  const Tensor f = sigmoid(slice(gates, 1, hid, hid));
  const Tensor g = tanh(slice(gates, 1, 2 * hid, hid));
  const Tensor o = sigmoid(slice(gates, 1, 3 * hid, hid));
  const Tensor c2 = add(mul(f, c), mul(i, g));
  const Tensor h2 = mul(o, tanh(c2));
  return {h2, c2};
}

}  // namespace

std::string_view arch_name(Arch arch) {
  for (const auto& a : kArchNames) {
    if (a.arch == arch) return a.name;
  }
  return "?";
}

std::string_view preset_name(Preset preset) { return preset == Preset::paper ? "paper" : "desk"; }

Arch parse_arch(std::string_view name) {
  for (const auto& a : kArchNames) {
    if (a.name == name) return a.arch;
  }
  throw ConfigError("unknown arch '" + std::string(name) +
                    "' (valid: cnn_lstm, cnn_gru, bigimage_lstm, vit_transformer)");
}

Preset parse_preset(std::string_view name) {
  if (name == "paper") return Preset::paper;
  if (name == "desk") return Preset::desk;
  throw ConfigError("unknown preset '" + std::string(name) + "' (valid: paper, desk)");
}

bool is_recurrent(Arch arch) { return arch != Arch::vit_transformer; }

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("invalid model config: " + what); };
  if (vocab_size <= text::kNumSpecials) fail("vocab_size must exceed the special symbols");
  if (max_len < 2) fail("max_len must be at least 2");
  if (image_h == 0 || image_w == 0) fail("empty image");
  if (arch == Arch::vit_transformer) {
    if (patch_h == 0 || patch_w == 0 || image_h % patch_h != 0 || image_w % patch_w != 0) {
      fail("image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
           " not divisible into " + std::to_string(patch_h) + "x" + std::to_string(patch_w) +
           " patches");
    }
    if (enc_layers == 0 || dec_layers == 0) fail("layer counts must be positive");
    if (enc_heads == 0 || dec_heads == 0 || d_model % enc_heads != 0 || d_model % dec_heads != 0) {
      fail("d_model " + std::to_string(d_model) + " not divisible by the head counts");
    }
    if (d_model != mlp_out) fail("d_model must equal mlp_out");
    if (mlp_hidden == 0) fail("mlp_hidden must be positive");
    if (token_embed_dim != d_model) fail("token_embed_dim must equal d_model");
    return;
  }
  const std::size_t stages = arch == Arch::bigimage_lstm ? 4 : 3;
  if (conv_channels.size() != stages) {
    fail(std::string(arch_name(arch)) + " needs " + std::to_string(stages) + " conv stages");
  }
  for (std::size_t c : conv_channels) {
    if (c == 0) fail("conv channels must be positive");
  }
  if (cnn_dense == 0 || rnn_hidden == 0 || token_embed_dim == 0) fail("widths must be positive");
  if (arch != Arch::bigimage_lstm) {
    const auto [h, w] = cnn_grid(*this);
    if (h == 0 || w == 0) fail("image too small for the conv stack");
  }
}

ModelConfig make_config(Arch arch, Preset preset, std::size_t vocab_size) {
  ModelConfig c;
  c.arch = arch;
  c.preset = preset;
  c.vocab_size = vocab_size;
  const bool desk = preset == Preset::desk;
  switch (arch) {
    case Arch::vit_transformer:
      if (desk) {
        c.d_model = c.mlp_out = 64;
        c.mlp_hidden = 128;
        c.enc_layers = 2;
        c.dec_layers = 2;
      }
      c.token_embed_dim = c.d_model;
      c.conv_channels.clear();
      break;
    case Arch::cnn_lstm:
    case Arch::cnn_gru:
      c.conv_channels = desk ? std::vector<std::size_t>{8, 16, 32}
                             : std::vector<std::size_t>{32, 64, 128};
      c.cnn_dense = c.rnn_hidden = desk ? 64 : 256;
      c.token_embed_dim = desk ? 32 : 256;
      break;
    case Arch::bigimage_lstm:
      c.conv_channels = desk ? std::vector<std::size_t>{8, 16, 32, 64}
                             : std::vector<std::size_t>{16, 32, 64, 128};
      c.cnn_dense = c.rnn_hidden = desk ? 64 : 256;
      c.token_embed_dim = desk ? 32 : 256;
      break;
  }
  c.validate();
  return c;
}

ShapeMap parameter_shapes(const ModelConfig& cfg) {
  cfg.validate();
  ShapeMap m;
  const std::size_t v = cfg.vocab_size;
  if (cfg.arch == Arch::vit_transformer) {
    const std::size_t d = cfg.d_model;
    m["enc.patch_embed.w"] = {cfg.patch_size(), d};
    m["enc.patch_embed.b"] = {d};
    m["enc.pos_embed"] = {cfg.num_patches(), d};
    for (std::size_t i = 0; i < cfg.enc_layers; ++i) {
      const std::string p = layer("enc", i);
      add_norm_shapes(m, p + ".ln1", d);
      add_attention_shapes(m, p + ".attn", d);
      add_norm_shapes(m, p + ".ln2", d);
      add_mlp_shapes(m, p + ".mlp", cfg);
    }
    add_norm_shapes(m, "enc.ln_final", d);
    m["dec.tok_embed"] = {v, d};
    m["dec.pos_embed"] = {cfg.max_len, d};
    for (std::size_t i = 0; i < cfg.dec_layers; ++i) {
      const std::string p = layer("dec", i);
      add_norm_shapes(m, p + ".ln1", d);
      add_attention_shapes(m, p + ".self_attn", d);
      add_norm_shapes(m, p + ".ln2", d);
      add_attention_shapes(m, p + ".cross_attn", d);
      add_norm_shapes(m, p + ".ln3", d);
      add_mlp_shapes(m, p + ".mlp", cfg);
    }
    add_norm_shapes(m, "dec.ln_final", d);
    m["dec.out.w"] = {d, v};
    m["dec.out.b"] = {v};
    return m;
  }

  std::size_t cin = cfg.arch == Arch::bigimage_lstm ? 3 : 1;
  for (std::size_t i = 0; i < cfg.conv_channels.size(); ++i) {
    const std::string p = "enc.conv" + std::to_string(i + 1);
    m[p + ".w"] = {3, 3, cin, cfg.conv_channels[i]};
    m[p + ".b"] = {cfg.conv_channels[i]};
    cin = cfg.conv_channels[i];
  }
  std::size_t flat = cin;
  if (cfg.arch != Arch::bigimage_lstm) {
    const auto [h, w] = cnn_grid(cfg);
    flat = h * w * cin;
  }
  m["enc.dense.w"] = {flat, cfg.cnn_dense};
  m["enc.dense.b"] = {cfg.cnn_dense};

  const std::size_t hid = cfg.rnn_hidden;
  const std::size_t in = cfg.token_embed_dim + cfg.cnn_dense;
  m["dec.tok_embed"] = {v, cfg.token_embed_dim};
  if (cfg.arch == Arch::cnn_gru) {
    m["dec.gru.zr.w"] = {in + hid, 2 * hid};
    m["dec.gru.zr.b"] = {2 * hid};
    m["dec.gru.n.w"] = {in + hid, hid};
    m["dec.gru.n.b"] = {hid};
  } else {
    m["dec.lstm.w"] = {in + hid, 4 * hid};
    m["dec.lstm.b"] = {4 * hid};
  }
  m["dec.out.w"] = {hid, v};
  m["dec.out.b"] = {v};
  return m;
}

std::size_t parameter_count(const ModelConfig& cfg) {
  std::size_t n = 0;
  for (const auto& [name, shape] : parameter_shapes(cfg)) n += shape_size(shape);
  return n;
}

std::string parameter_summary(const ModelConfig& cfg) {
  // Group by the first two path components, e.g. "enc.layer3".
  std::vector<std::pair<std::string, std::size_t>> groups;
  std::size_t total = 0;
  for (const auto& [name, shape] : parameter_shapes(cfg)) {
    const auto first = name.find('.');
    const auto second = name.find('.', first + 1);
    const std::string group = second == std::string::npos ? name : name.substr(0, second);
    if (groups.empty() || groups.back().first != group) groups.emplace_back(group, 0);
    groups.back().second += shape_size(shape);
    total += shape_size(shape);
  }
  std::string out;
  for (const auto& [group, n] : groups) out += group + "\t" + std::to_string(n) + "\n";
  out += "total\t" + std::to_string(total) + "\n";
  return out;
}

ParamSet init_params(const ModelConfig& cfg, std::uint64_t seed) {
  ParamSet params;
  for (const auto& [name, shape] : parameter_shapes(cfg)) {
    Rng rng(name_seed(seed, name));
    std::vector<double> values(shape_size(shape), 0.0);
    if (ends_with(name, "_embed")) {
      for (double& x : values) x = rng.normal(0.0, kEmbedStddev);
    } else if (ends_with(name, ".gain")) {
      std::fill(values.begin(), values.end(), 1.0);
    } else if (shape.size() >= 2) {
      // Dense [in,out] or conv [3,3,in,out]: receptive field times channels.
      const std::size_t receptive = shape.size() == 4 ? shape[0] * shape[1] : 1;
      const double fan_in = static_cast<double>(receptive * shape[shape.size() - 2]);
      const double fan_out = static_cast<double>(receptive * shape.back());
      const double limit = std::sqrt(6.0 / (fan_in + fan_out));
      for (double& x : values) x = rng.uniform(-limit, limit);
    }
    for (double& x : values) x = static_cast<float>(x);
    params.emplace(name, Tensor(shape, std::move(values)));
  }
  return params;
}

Model make_model(const ModelConfig& cfg, std::uint64_t seed) {
  return Model{cfg, init_params(cfg, seed)};
}

Tensor patchify(const Tensor& pixels, std::size_t patch_h, std::size_t patch_w) {
  if (pixels.rank() != 2) throw DimensionError("patchify: expected [H,W], got " + shape_str(pixels.shape()));
  const std::size_t h = pixels.dim(0), w = pixels.dim(1);
  if (patch_h == 0 || patch_w == 0 || h % patch_h != 0 || w % patch_w != 0) {
    throw DimensionError("patchify: " + shape_str(pixels.shape()) + " not divisible into " +
                         std::to_string(patch_h) + "x" + std::to_string(patch_w) + " patches");
  }
  const std::size_t cols = w / patch_w, psize = patch_h * patch_w;
  std::vector<double> out(h * w);
  const auto src = pixels.values();
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t p = (y / patch_h) * cols + x / patch_w;
      out[p * psize + (y % patch_h) * patch_w + x % patch_w] = src[y * w + x];
    }
  }
  return Tensor({h * w / psize, psize}, std::move(out));
}

Tensor unpatchify(const Tensor& patches, std::size_t height, std::size_t width,
                  std::size_t patch_h, std::size_t patch_w) {
  if (patch_h == 0 || patch_w == 0 || height % patch_h != 0 || width % patch_w != 0) {
    throw DimensionError("unpatchify: indivisible geometry");
  }
  const std::size_t cols = width / patch_w, psize = patch_h * patch_w;
  if (patches.shape() != Shape{height * width / psize, psize}) {
    throw DimensionError("unpatchify: got " + shape_str(patches.shape()));
  }
  std::vector<double> out(height * width);
  const auto src = patches.values();
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const std::size_t p = (y / patch_h) * cols + x / patch_w;
      out[y * width + x] = src[p * psize + (y % patch_h) * patch_w + x % patch_w];
    }
  }
  return Tensor({height, width}, std::move(out));
}

AttentionParams attention_params(const ParamSet& params, const std::string& prefix) {
  return AttentionParams{param(params, prefix + ".wq"), param(params, prefix + ".bq"),
                         param(params, prefix + ".wk"), param(params, prefix + ".bk"),
                         param(params, prefix + ".wv"), param(params, prefix + ".bv"),
                         param(params, prefix + ".wo"), param(params, prefix + ".bo")};
}

namespace {

// Attention from already-projected queries/keys/values.
Tensor attend(const Tensor& qp, const Tensor& kp, const Tensor& vp, std::size_t heads,
              std::span<const std::uint8_t> mask, const AttentionParams& p,
              std::vector<Tensor>* weights) {
  const std::size_t d = qp.dim(1);
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = slice(qp, 1, h * dh, dh);
    const Tensor kh = slice(kp, 1, h * dh, dh);
    const Tensor vh = slice(vp, 1, h * dh, dh);
    const Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    const Tensor w = mask.empty() ? softmax(scores, 1) : masked_softmax(scores, mask);
    if (weights) weights->push_back(w);
    outs.push_back(matmul(w, vh));
  }
  const Tensor merged = heads == 1 ? outs.front() : concat(outs, 1);
  return add_bias(matmul(merged, p.wo), p.bo);
}

Tensor project(const Tensor& x, const Tensor& w, const Tensor& b) { return add_bias(matmul(x, w), b); }

}  // namespace

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                            std::span<const std::uint8_t> mask, const AttentionParams& p,
                            std::vector<Tensor>* weights) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.dim(1) != k.dim(1) ||
      k.shape() != v.shape()) {
    throw DimensionError("attention: incompatible q " + shape_str(q.shape()) + ", k " +
                         shape_str(k.shape()) + ", v " + shape_str(v.shape()));
  }
  if (heads == 0 || q.dim(1) % heads != 0) {
    throw ConfigError("attention: width " + std::to_string(q.dim(1)) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  return attend(project(q, p.wq, p.bq), project(k, p.wk, p.bk), project(v, p.wv, p.bv), heads,
                mask, p, weights);
}

std::vector<std::uint8_t> causal_mask(std::size_t length) {
  std::vector<std::uint8_t> m(length * length, 0);
  for (std::size_t i = 0; i < length; ++i) {
    for (std::size_t j = 0; j <= i; ++j) m[i * length + j] = 1;
  }
  return m;
}

Tensor vit_encode(const Tensor& pixels, const ModelConfig& cfg, const ParamSet& params) {
  if (cfg.arch != Arch::vit_transformer) throw ConfigError("vit_encode on a non-transformer config");
  cfg.validate();
  if (pixels.shape() != Shape{cfg.image_h, cfg.image_w}) {
    throw DimensionError("vit_encode: expected " + shape_str({cfg.image_h, cfg.image_w}) + ", got " +
                         shape_str(pixels.shape()));
  }
  Tensor x = linear(patchify(pixels, cfg.patch_h, cfg.patch_w), params, "enc.patch_embed");
  x = add(x, param(params, "enc.pos_embed"));
  for (std::size_t i = 0; i < cfg.enc_layers; ++i) {
    const std::string p = layer("enc", i);
    const Tensor h = norm(x, params, p + ".ln1");
    x = add(x, multi_head_attention(h, h, h, cfg.enc_heads, {}, attention_params(params, p + ".attn")));
    x = add(x, mlp(norm(x, params, p + ".ln2"), params, p + ".mlp"));
  }
  return norm(x, params, "enc.ln_final");
}

Tensor cnn_encode(const Tensor& pixels, const ModelConfig& cfg, const ParamSet& params) {
  if (cfg.arch != Arch::cnn_lstm && cfg.arch != Arch::cnn_gru) {
    throw ConfigError("cnn_encode needs a cnn_lstm or cnn_gru config");
  }
  if (pixels.size() != cfg.image_h * cfg.image_w) {
    throw DimensionError("cnn_encode: expected " + shape_str({cfg.image_h, cfg.image_w}) + ", got " +
                         shape_str(pixels.shape()));
  }
  Tensor x = reshape(pixels, {cfg.image_h, cfg.image_w, 1});
  for (std::size_t i = 0; i < cfg.conv_channels.size(); ++i) {
    const std::string p = "enc.conv" + std::to_string(i + 1);
    x = maxpool2d(relu(conv2d(x, param(params, p + ".w"), param(params, p + ".b"))));
  }
  return reshape(relu(linear(row_vector(x), params, "enc.dense")), {cfg.cnn_dense});
}

Tensor bigimage_encode(const Tensor& pixels, const ModelConfig& cfg, const ParamSet& params) {
  if (cfg.arch != Arch::bigimage_lstm) throw ConfigError("bigimage_encode needs a bigimage_lstm config");
  const Shape expected{data::kBigImageSide, data::kBigImageSide, 3};
  if (pixels.shape() != expected) {
    throw DimensionError("bigimage_encode: expected " + shape_str(expected) + ", got " +
                         shape_str(pixels.shape()));
  }
  Tensor x = pixels;
  for (std::size_t i = 0; i < cfg.conv_channels.size(); ++i) {
    const std::string p = "enc.conv" + std::to_string(i + 1);
    x = relu(conv2d(x, param(params, p + ".w"), param(params, p + ".b"), 2));
  }
  const Tensor pooled = mean_rows(reshape(x, {x.dim(0) * x.dim(1), x.dim(2)}));
  return reshape(linear(row_vector(pooled), params, "enc.dense"), {cfg.cnn_dense});
}

Tensor image_tensor(const data::Image& image, const ModelConfig& cfg) {
  if (image.channels != 1 || image.height != cfg.image_h || image.width != cfg.image_w) {
    throw DimensionError("expected a " + std::to_string(cfg.image_w) + "x" +
                         std::to_string(cfg.image_h) + " grayscale image, got " +
                         std::to_string(image.width) + "x" + std::to_string(image.height) + "x" +
                         std::to_string(image.channels));
  }
  if (cfg.arch == Arch::bigimage_lstm) {
    const data::Image big = data::to_big_rgb(image);
    return Tensor({big.height, big.width, 3}, big.pixels);
  }
  return Tensor({image.height, image.width}, image.pixels);
}

Tensor encode(const Tensor& input, const ModelConfig& cfg, const ParamSet& params) {
  switch (cfg.arch) {
    case Arch::vit_transformer:
      return vit_encode(input, cfg, params);
    case Arch::bigimage_lstm:
      return bigimage_encode(input, cfg, params);
    default:
      return cnn_encode(input, cfg, params);
  }
}

RnnState zero_state(const ModelConfig& cfg) {
  return RnnState{Tensor({cfg.rnn_hidden}), Tensor({cfg.rnn_hidden})};
}

RnnStep rnn_decode_step(const Tensor& prev_token_embed, const Tensor& image_embed,
                        const RnnState& state, const ModelConfig& cfg, const ParamSet& params) {
  if (!is_recurrent(cfg.arch)) throw ConfigError("rnn_decode_step on a transformer config");
  const Tensor parts[] = {row_vector(prev_token_embed), row_vector(image_embed)};
  auto [h, c] = cell(concat(parts, 1), row_vector(state.h), row_vector(state.c), cfg, params);
  const Tensor logits = linear(h, params, "dec.out");
  return RnnStep{reshape(logits, {cfg.vocab_size}),
                 RnnState{reshape(h, {cfg.rnn_hidden}), reshape(c, {cfg.rnn_hidden})}};
}

Tensor transformer_decode(std::span<const int> ids, const Tensor& memory, const ModelConfig& cfg,
                          const ParamSet& params) {
  if (cfg.arch != Arch::vit_transformer) throw ConfigError("transformer_decode on a recurrent config");
  const std::size_t len = ids.size();
  if (len == 0) throw ContractError("transformer_decode: empty input");
  if (len > cfg.max_len) {
    throw LengthError("decoder input of " + std::to_string(len) + " tokens exceeds the " +
                          std::to_string(cfg.max_len) + "-position table",
                      len - cfg.max_len);
  }
  const std::vector<std::uint8_t> mask = causal_mask(len);
  Tensor x = add(embedding_lookup(param(params, "dec.tok_embed"), ids),
                 slice(param(params, "dec.pos_embed"), 0, 0, len));
  for (std::size_t i = 0; i < cfg.dec_layers; ++i) {
    const std::string p = layer("dec", i);
    const Tensor h = norm(x, params, p + ".ln1");
    x = add(x, multi_head_attention(h, h, h, cfg.dec_heads, mask,
                                    attention_params(params, p + ".self_attn")));
    x = add(x, multi_head_attention(norm(x, params, p + ".ln2"), memory, memory, cfg.dec_heads, {},
                                    attention_params(params, p + ".cross_attn")));
    x = add(x, mlp(norm(x, params, p + ".ln3"), params, p + ".mlp"));
  }
  return linear(norm(x, params, "dec.ln_final"), params, "dec.out");
}

Tensor decoder_logits(std::span<const int> ids, const Tensor& encoded, const ModelConfig& cfg,
                      const ParamSet& params) {
  if (!is_recurrent(cfg.arch)) return transformer_decode(ids, encoded, cfg, params);
  if (ids.empty()) throw ContractError("decoder_logits: empty input");
  const Tensor embeds = embedding_lookup(param(params, "dec.tok_embed"), ids);
  const Tensor image = row_vector(encoded);
  Tensor h({1, cfg.rnn_hidden}), c({1, cfg.rnn_hidden});
  std::vector<Tensor> hs;
  hs.reserve(ids.size());
  for (std::size_t t = 0; t < ids.size(); ++t) {
    const Tensor parts[] = {slice(embeds, 0, t, 1), image};
    std::tie(h, c) = cell(concat(parts, 1), h, c, cfg, params);
    hs.push_back(h);
  }
  return linear(concat(hs, 0), params, "dec.out");
}

namespace {

std::vector<double> to_vector(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

class RnnSession : public DecodeSession {
 public:
  RnnSession(const Model& model, Tensor image)
      : cfg_(model.config), params_(model.params), image_(std::move(image)), state_(zero_state(cfg_)) {}

  std::vector<double> feed(int token) override {
    const TapeScope no_grad(nullptr);
    const int id[] = {token};
    const Tensor embed = embedding_lookup(param(params_, "dec.tok_embed"), id);
    RnnStep step = rnn_decode_step(embed, image_, state_, cfg_, params_);
    state_ = std::move(step.state);
    return to_vector(step.logits);
  }

 private:
  const ModelConfig& cfg_;
  const ParamSet& params_;
  Tensor image_;
  RnnState state_;
};

// Incremental transformer decoding. Row-wise ops make each step reproduce the
// corresponding row of a full transformer_decode pass exactly.
class TransformerSession : public DecodeSession {
 public:
  TransformerSession(const Model& model, const Tensor& memory)
      : cfg_(model.config), params_(model.params) {
    for (std::size_t i = 0; i < cfg_.dec_layers; ++i) {
      const AttentionParams cross = attention_params(params_, layer("dec", i) + ".cross_attn");
      layers_.push_back(LayerCache{project(memory, cross.wk, cross.bk),
                                   project(memory, cross.wv, cross.bv), {}, {}});
    }
  }

  std::vector<double> feed(int token) override {
    const TapeScope no_grad(nullptr);
    if (pos_ >= cfg_.max_len) {
      throw LengthError("decode session exceeded " + std::to_string(cfg_.max_len) + " positions", 1);
    }
    const int id[] = {token};
    Tensor x = add(embedding_lookup(param(params_, "dec.tok_embed"), id),
                   slice(param(params_, "dec.pos_embed"), 0, pos_, 1));
    ++pos_;
    const std::vector<std::uint8_t> all(pos_, 1);
    for (std::size_t i = 0; i < cfg_.dec_layers; ++i) {
      const std::string p = layer("dec", i);
      LayerCache& cache = layers_[i];
      const AttentionParams self = attention_params(params_, p + ".self_attn");
      const Tensor h = norm(x, params_, p + ".ln1");
      append_row(cache.keys, project(h, self.wk, self.bk));
      append_row(cache.values, project(h, self.wv, self.bv));
      const Tensor keys(Shape{pos_, cfg_.d_model}, cache.keys);
      const Tensor values(Shape{pos_, cfg_.d_model}, cache.values);
      x = add(x, attend(project(h, self.wq, self.bq), keys, values, cfg_.dec_heads, all, self, nullptr));
      const AttentionParams cross = attention_params(params_, p + ".cross_attn");
      const Tensor q = project(norm(x, params_, p + ".ln2"), cross.wq, cross.bq);
      x = add(x, attend(q, cache.memory_keys, cache.memory_values, cfg_.dec_heads, {}, cross, nullptr));
      x = add(x, mlp(norm(x, params_, p + ".ln3"), params_, p + ".mlp"));
    }
    return to_vector(linear(norm(x, params_, "dec.ln_final"), params_, "dec.out"));
  }

 private:
  struct LayerCache {
    Tensor memory_keys;
    Tensor memory_values;
    std::vector<double> keys;
    std::vector<double> values;
  };

  static void append_row(std::vector<double>& dst, const Tensor& row) {
    dst.insert(dst.end(), row.values().begin(), row.values().end());
  }

  const ModelConfig& cfg_;
  const ParamSet& params_;
  std::vector<LayerCache> layers_;
  std::size_t pos_ = 0;
};

}  // namespace

std::unique_ptr<DecodeSession> start_session(const Model& model, const data::Image& image) {
  const TapeScope no_grad(nullptr);
  const Tensor encoded = encode(image_tensor(image, model.config), model.config, model.params);
  if (is_recurrent(model.config.arch)) return std::make_unique<RnnSession>(model, encoded);
  return std::make_unique<TransformerSession>(model, encoded);
}

text::TokenSequence greedy_decode(DecodeSession& session, std::size_t max_len) {
  text::TokenSequence seq;
  seq.ids.push_back(text::kStart);
  while (seq.ids.size() < max_len) {
    const std::vector<double> logits = session.feed(seq.ids.back());
    const int next = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    seq.ids.push_back(next);
    if (next == text::kEnd) break;
  }
  seq.true_len = seq.ids.size();
  seq.ids.resize(max_len, text::kPad);
  return seq;
}

text::TokenSequence greedy_decode(const Model& model, const data::Image& image) {
  auto session = start_session(model, image);
  return greedy_decode(*session, model.config.max_len);
}

}  // namespace im2tex::models
