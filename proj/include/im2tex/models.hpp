#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "im2tex/dataio.hpp"
#include "im2tex/tensor.hpp"
#include "im2tex/textproc.hpp"

namespace im2tex::models {

enum class Arch { cnn_lstm, cnn_gru, bigimage_lstm, vit_transformer };
enum class Preset { paper, desk };

std::string_view arch_name(Arch arch);
std::string_view preset_name(Preset preset);
// Throw ConfigError naming the valid values.
Arch parse_arch(std::string_view name);
Preset parse_preset(std::string_view name);

bool is_recurrent(Arch arch);

struct ModelConfig {
  Arch arch = Arch::vit_transformer;
  Preset preset = Preset::paper;
  std::size_t image_h = data::kImageHeight;
  std::size_t image_w = data::kImageWidth;

  // Vision transformer
  std::size_t patch_h = 10;
  std::size_t patch_w = 10;
  std::size_t enc_layers = 8;
  std::size_t enc_heads = 4;
  std::size_t mlp_hidden = 2048;
  std::size_t mlp_out = 1024;
  std::size_t d_model = 1024;
  std::size_t dec_layers = 4;
  std::size_t dec_heads = 8;

  // Convolutional encoders and recurrent decoders
  std::vector<std::size_t> conv_channels{32, 64, 128};
  std::size_t cnn_dense = 256;
  std::size_t rnn_hidden = 256;

  std::size_t token_embed_dim = 1024;
  std::size_t vocab_size = text::kDefaultVocabSize + text::kNumSpecials;
  std::size_t max_len = text::kDefaultMaxLen;

  std::size_t patch_rows() const { return image_h / patch_h; }
  std::size_t patch_cols() const { return image_w / patch_w; }
  std::size_t num_patches() const { return patch_rows() * patch_cols(); }
  std::size_t patch_size() const { return patch_h * patch_w; }

  // Throws ConfigError on any violated invariant.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

ModelConfig make_config(Arch arch, Preset preset, std::size_t vocab_size);

std::string config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(std::string_view json);

// Parameters keyed by path; std::map keeps sorted-name iteration.
using ParamSet = std::map<std::string, Tensor>;
using ShapeMap = std::map<std::string, Shape>;

ShapeMap parameter_shapes(const ModelConfig& cfg);
std::size_t parameter_count(const ModelConfig& cfg);
// Per-component parameter totals followed by the grand total.
std::string parameter_summary(const ModelConfig& cfg);

// Glorot-uniform matrices and kernels, N(0, 0.02) embeddings, zero biases,
// unit layernorm gains. Values are rounded to 32-bit reals.
ParamSet init_params(const ModelConfig& cfg, std::uint64_t seed);

struct Model {
  ModelConfig config;
  ParamSet params;
};

Model make_model(const ModelConfig& cfg, std::uint64_t seed);

// [H,W] pixels -> [num_patches, patch_h*patch_w], row-major at both levels.
Tensor patchify(const Tensor& pixels, std::size_t patch_h, std::size_t patch_w);
Tensor unpatchify(const Tensor& patches, std::size_t height, std::size_t width,
                  std::size_t patch_h, std::size_t patch_w);

// Parameter paths of one attention block, e.g. "enc.layer0.attn".
struct AttentionParams {
  const Tensor& wq;
  const Tensor& bq;
  const Tensor& wk;
  const Tensor& bk;
  const Tensor& wv;
  const Tensor& bv;
  const Tensor& wo;
  const Tensor& bo;
};
AttentionParams attention_params(const ParamSet& params, const std::string& prefix);

// mask (row-major Lq x Lk, nonzero = attendable) may be empty for full
// attention. When `weights` is non-null the per-head attention matrices
// [Lq,Lk] are appended to it.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                            std::span<const std::uint8_t> mask, const AttentionParams& p,
                            std::vector<Tensor>* weights = nullptr);

// Lower-triangular L x L mask including the diagonal.
std::vector<std::uint8_t> causal_mask(std::size_t length);

// Encoders. `pixels` is the grayscale [50,200] image (or [254,254,3] for the
// large-image encoder).
Tensor vit_encode(const Tensor& pixels, const ModelConfig& cfg, const ParamSet& params);
Tensor cnn_encode(const Tensor& pixels, const ModelConfig& cfg, const ParamSet& params);
Tensor bigimage_encode(const Tensor& pixels, const ModelConfig& cfg, const ParamSet& params);

// Converts a dataset image to the tensor the architecture's encoder expects
// and runs it.
Tensor image_tensor(const data::Image& image, const ModelConfig& cfg);
Tensor encode(const Tensor& input, const ModelConfig& cfg, const ParamSet& params);

struct RnnState {
  Tensor h;
  Tensor c;  // unused by the GRU
};
RnnState zero_state(const ModelConfig& cfg);

struct RnnStep {
  Tensor logits;  // [V]
  RnnState state;
};
// LSTM gates in order i,f,g,o over [x, h]; GRU with the reset gate applied to
// h before the candidate transform.
RnnStep rnn_decode_step(const Tensor& prev_token_embed, const Tensor& image_embed,
                        const RnnState& state, const ModelConfig& cfg, const ParamSet& params);

// Causal decoder over `ids` attending to `memory`; logits [L,V].
Tensor transformer_decode(std::span<const int> ids, const Tensor& memory, const ModelConfig& cfg,
                          const ParamSet& params);

// Teacher-forced logits [L,V] for decoder inputs `ids`, any architecture.
Tensor decoder_logits(std::span<const int> ids, const Tensor& encoded, const ModelConfig& cfg,
                      const ParamSet& params);

// Incremental next-token logits. feed(t) appends token t and returns the
// logits for the following position.
class DecodeSession {
 public:
  virtual ~DecodeSession() = default;
  virtual std::vector<double> feed(int token) = 0;
};

// Caches the encoder output (and, for the transformer, per-layer keys and
// values) so each step costs one position.
std::unique_ptr<DecodeSession> start_session(const Model& model, const data::Image& image);

// Starts from <start>, appends the argmax (lowest id on ties) until <end> or
// max_len ids.
text::TokenSequence greedy_decode(DecodeSession& session, std::size_t max_len);
text::TokenSequence greedy_decode(const Model& model, const data::Image& image);

// Checkpoint directory: manifest.json + params.bin (little-endian f32 in
// sorted-name order), plus optim.bin when optimizer moments are present.
struct Checkpoint {
  ModelConfig config;
  ParamSet params;
  ParamSet adam_m;
  ParamSet adam_v;
  std::uint64_t adam_step = 0;
};
void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace im2tex::models
