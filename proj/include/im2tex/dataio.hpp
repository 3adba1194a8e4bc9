#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "im2tex/textproc.hpp"

namespace im2tex::data {

inline constexpr std::size_t kImageHeight = 50;
inline constexpr std::size_t kImageWidth = 200;
// Input side of the large-image encoder.
inline constexpr std::size_t kBigImageSide = 254;

// Row-major HWC image with values in [0, 1]; 1.0 is white background.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::vector<double> pixels;

  static Image blank(std::size_t height, std::size_t width, std::size_t channels = 1,
                     double value = 1.0);
  double at(std::size_t y, std::size_t x, std::size_t c = 0) const {
    return pixels[(y * width + x) * channels + c];
  }
  double& at(std::size_t y, std::size_t x, std::size_t c = 0) {
    return pixels[(y * width + x) * channels + c];
  }
  bool operator==(const Image&) const = default;
};

struct ImageSample {
  Image image;
  text::TokenSequence target;
  std::size_t source_id = 0;
};

struct IndexEntry {
  std::string image_path;
  std::size_t formula_id = 0;
  bool operator==(const IndexEntry&) const = default;
};
using DatasetIndex = std::vector<IndexEntry>;

// Lines of "<path> <id>"; blank lines are skipped. Throws ParseError with the
// 1-based line number.
DatasetIndex parse_index(std::string_view text);
std::string serialize_index(const DatasetIndex& index);

// Binary PGM (P5, maxval 255). load_image additionally requires 200x50.
Image parse_pgm(std::string_view bytes);
std::string encode_pgm(const Image& image);
Image load_image(const std::filesystem::path& path);
void save_image(const std::filesystem::path& path, const Image& image);

// Replicates the single channel into three identical ones.
Image grayscale_to_rgb(const Image& gray);
// Nearest-neighbour resampling, applied per channel.
Image resize_nearest(const Image& image, std::size_t height, std::size_t width);
// grayscale -> RGB -> 254x254, the input the large-image encoder expects.
Image to_big_rgb(const Image& gray);

// Procedural 7x9 bitmaps, one per vocabulary id, hashed from the symbol text.
// Distinct symbols always receive distinct, non-empty bitmaps.
class GlyphAtlas {
 public:
  static constexpr std::size_t kWidth = 7;
  static constexpr std::size_t kHeight = 9;
  using Bitmap = std::array<std::uint8_t, kWidth * kHeight>;

  explicit GlyphAtlas(const text::Vocab& vocab);

  const Bitmap& glyph(int id) const { return glyphs_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return glyphs_.size(); }

 private:
  std::vector<Bitmap> glyphs_;
};

// Deterministic rendering of a token list onto a white 50x200 canvas.
// Glyphs run left to right with 1-3 px gaps and a -2..2 px baseline jitter,
// both drawn from `seed`. Throws LengthError when the row is wider than the
// canvas and InputError for symbols outside the vocabulary.
Image render_formula(std::span<const std::string> tokens, const text::Vocab& vocab,
                     const GlyphAtlas& atlas, std::uint64_t seed);
ImageSample render_synthetic(std::span<const std::string> tokens, const text::Vocab& vocab,
                             const GlyphAtlas& atlas, std::uint64_t seed,
                             std::size_t source_id = 0);

struct Batch {
  std::size_t size = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t max_len = 0;
  std::vector<std::size_t> sample_indices;
  std::vector<double> images;       // size x height x width
  std::vector<int> targets;         // size x max_len
  std::vector<std::uint8_t> mask;   // targets != pad
};

// Seeded shuffle followed by contiguous slicing.
std::vector<Batch> make_batches(std::span<const ImageSample> dataset, std::size_t batch_size,
                                std::uint64_t seed, bool drop_last);

// Symbols the synthetic generator draws from when no vocabulary is given.
std::vector<std::string> default_synthetic_symbols();

// `count` random formulas of 1..max_tokens symbols each.
std::vector<std::vector<std::string>> generate_formulas(std::span<const std::string> symbols,
                                                        std::size_t count, std::size_t max_tokens,
                                                        std::uint64_t seed);

// Seed used to render sample `i` of a dataset generated with `seed`.
std::uint64_t sample_seed(std::uint64_t seed, std::size_t i);

struct SyntheticSpec {
  std::size_t count = 0;
  std::uint64_t seed = 0;
  std::size_t max_tokens = 8;
  std::vector<std::string> symbols;
};

// Writes formulas.txt, vocab.tsv, index.txt, images/*.pgm and manifest.json.
void write_synthetic_dataset(const std::filesystem::path& dir, const SyntheticSpec& spec);

// In-memory twin of write_synthetic_dataset (same vocab, same pixels).
struct Dataset {
  text::Vocab vocab;
  std::vector<std::string> formulas;
  std::vector<ImageSample> samples;
};
Dataset make_synthetic_dataset(const SyntheticSpec& spec);

// Reads a dataset directory: index.txt + formulas.txt + vocab.tsv + PGMs,
// honouring file names from manifest.json when present.
Dataset load_dataset(const std::filesystem::path& dir, std::size_t max_len = text::kDefaultMaxLen);

}  // namespace im2tex::data
