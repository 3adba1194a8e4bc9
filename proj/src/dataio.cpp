#include "im2tex/dataio.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "im2tex/errors.hpp"
#include "im2tex/rng.hpp"
#include "json.hpp"

namespace im2tex::data {
namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

// Header tokenizer for PGM: whitespace-separated fields, '#' comments.
class PgmHeader {
 public:
  explicit PgmHeader(std::string_view bytes) : bytes_(bytes) {}

  std::string_view field(const std::string& name) {
    skip_space();
    const std::size_t start = pos_;
    while (pos_ < bytes_.size() && !is_space(bytes_[pos_])) ++pos_;
    if (start == pos_) throw FormatError(name, "missing");
    return bytes_.substr(start, pos_ - start);
  }

  std::size_t number(const std::string& name) {
    const std::string_view f = field(name);
    std::size_t v = 0;
    const auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
    if (ec != std::errc() || ptr != f.data() + f.size()) {
      throw FormatError(name, "'" + std::string(f) + "' is not a number");
    }
    return v;
  }

  // Exactly one whitespace byte separates maxval from the raster.
  std::size_t raster_start() {
    if (pos_ >= bytes_.size() || !is_space(bytes_[pos_])) throw FormatError("maxval", "no raster follows");
    return pos_ + 1;
  }

 private:
  static bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; }

  void skip_space() {
    while (pos_ < bytes_.size()) {
      if (is_space(bytes_[pos_])) {
        ++pos_;
      } else if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

Image Image::blank(std::size_t height, std::size_t width, std::size_t channels, double value) {
  return Image{height, width, channels, std::vector<double>(height * width * channels, value)};
}

DatasetIndex parse_index(std::string_view text) {
  DatasetIndex index;
  const auto lines = text::split_formula_lines(text);
  for (std::size_t n = 0; n < lines.size(); ++n) {
    const std::string& line = lines[n];
    if (line.empty()) continue;
    const auto sp = line.rfind(' ');
    if (sp == std::string::npos || sp == 0 || sp + 1 == line.size()) {
      throw ParseError("expected '<path> <id>', got '" + line + "'", n + 1);
    }
    const std::string_view id_text = std::string_view(line).substr(sp + 1);
    std::size_t id = 0;
    const auto [ptr, ec] = std::from_chars(id_text.data(), id_text.data() + id_text.size(), id);
    if (ec != std::errc() || ptr != id_text.data() + id_text.size()) {
      throw ParseError("formula id '" + std::string(id_text) + "' is not a non-negative integer", n + 1);
    }
    index.push_back({line.substr(0, sp), id});
  }
  return index;
}

std::string serialize_index(const DatasetIndex& index) {
  std::string out;
  for (const auto& e : index) out += e.image_path + " " + std::to_string(e.formula_id) + "\n";
  return out;
}

Image parse_pgm(std::string_view bytes) {
  PgmHeader header(bytes);
  const std::string_view magic = header.field("magic");
  if (magic != "P5") throw FormatError("magic", "expected P5, got '" + std::string(magic) + "'");
  const std::size_t width = header.number("width");
  const std::size_t height = header.number("height");
  const std::size_t maxval = header.number("maxval");
  if (width == 0) throw FormatError("width", "zero");
  if (height == 0) throw FormatError("height", "zero");
  if (maxval != 255) throw FormatError("maxval", "expected 255, got " + std::to_string(maxval));
  const std::size_t start = header.raster_start();
  if (bytes.size() - start < width * height) {
    throw FormatError("data", "raster holds " + std::to_string(bytes.size() - start) +
                                  " bytes, need " + std::to_string(width * height));
  }
  Image img = Image::blank(height, width, 1, 0.0);
  for (std::size_t i = 0; i < width * height; ++i) {
    img.pixels[i] = static_cast<unsigned char>(bytes[start + i]) / 255.0;
  }
  return img;
}

std::string encode_pgm(const Image& image) {
  if (image.channels != 1) throw DimensionError("encode_pgm: expected one channel");
  std::string out = "P5\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  for (double v : image.pixels) {
    const double clamped = std::clamp(v, 0.0, 1.0);
    out.push_back(static_cast<char>(static_cast<unsigned char>(clamped * 255.0 + 0.5)));
  }
  return out;
}

Image load_image(const std::filesystem::path& path) {
  Image img = parse_pgm(read_file(path));
  if (img.width != kImageWidth) {
    throw FormatError("width", path.string() + " is " + std::to_string(img.width) + " px wide, need 200");
  }
  if (img.height != kImageHeight) {
    throw FormatError("height", path.string() + " is " + std::to_string(img.height) + " px tall, need 50");
  }
  return img;
}

void save_image(const std::filesystem::path& path, const Image& image) {
  write_file(path, encode_pgm(image));
}

Image grayscale_to_rgb(const Image& gray) {
  if (gray.channels != 1) throw DimensionError("grayscale_to_rgb: input has " + std::to_string(gray.channels) + " channels");
  Image rgb = Image::blank(gray.height, gray.width, 3, 0.0);
  for (std::size_t i = 0; i < gray.pixels.size(); ++i) {
    for (std::size_t c = 0; c < 3; ++c) rgb.pixels[i * 3 + c] = gray.pixels[i];
  }
  return rgb;
}

Image resize_nearest(const Image& image, std::size_t height, std::size_t width) {
  Image out = Image::blank(height, width, image.channels, 0.0);
  for (std::size_t y = 0; y < height; ++y) {
    const std::size_t sy = y * image.height / height;
    for (std::size_t x = 0; x < width; ++x) {
      const std::size_t sx = x * image.width / width;
      for (std::size_t c = 0; c < image.channels; ++c) out.at(y, x, c) = image.at(sy, sx, c);
    }
  }
  return out;
}

Image to_big_rgb(const Image& gray) {
  return grayscale_to_rgb(resize_nearest(gray, kBigImageSide, kBigImageSide));
}

GlyphAtlas::GlyphAtlas(const text::Vocab& vocab) {
  std::set<Bitmap> taken;
  for (const auto& entry : vocab.entries()) {
    const std::uint64_t base = fnv1a(entry.symbol);
    for (std::uint64_t salt = 0;; ++salt) {
      const std::uint64_t bits = splitmix64(base ^ splitmix64(salt));
      Bitmap g{};
      std::size_t ink = 0;
      for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] = static_cast<std::uint8_t>((bits >> i) & 1u);
        ink += g[i];
      }
      if (ink >= 12 && ink <= 51 && taken.insert(g).second) {
        glyphs_.push_back(g);
        break;
      }
    }
  }
}

Image render_formula(std::span<const std::string> tokens, const text::Vocab& vocab,
                     const GlyphAtlas& atlas, std::uint64_t seed) {
  constexpr std::size_t kMargin = 2;
  Image img = Image::blank(kImageHeight, kImageWidth);
  Rng rng(seed);
  std::vector<int> ids;
  std::vector<std::size_t> xs;
  std::vector<int> jitter;
  std::size_t x = kMargin;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto id = vocab.find(tokens[i]);
    if (!id) throw InputError("render: symbol '" + tokens[i] + "' is not in the vocabulary");
    const std::size_t gap = 1 + static_cast<std::size_t>(rng.below(3));
    const int dy = static_cast<int>(rng.below(5)) - 2;
    if (i > 0) x += gap;
    ids.push_back(*id);
    xs.push_back(x);
    jitter.push_back(dy);
    x += GlyphAtlas::kWidth;
  }
  if (x > kImageWidth) {
    throw LengthError("rendered formula is " + std::to_string(x) + " px wide", x - kImageWidth);
  }
  const int top = static_cast<int>(kImageHeight - GlyphAtlas::kHeight) / 2;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto& g = atlas.glyph(ids[i]);
    for (std::size_t gy = 0; gy < GlyphAtlas::kHeight; ++gy) {
      const std::size_t y = static_cast<std::size_t>(top + jitter[i]) + gy;
      for (std::size_t gx = 0; gx < GlyphAtlas::kWidth; ++gx) {
        if (g[gy * GlyphAtlas::kWidth + gx]) img.at(y, xs[i] + gx) = 0.0;
      }
    }
  }
  return img;
}

ImageSample render_synthetic(std::span<const std::string> tokens, const text::Vocab& vocab,
                             const GlyphAtlas& atlas, std::uint64_t seed, std::size_t source_id) {
  return ImageSample{render_formula(tokens, vocab, atlas, seed), text::encode(tokens, vocab), source_id};
}

std::vector<Batch> make_batches(std::span<const ImageSample> dataset, std::size_t batch_size,
                                std::uint64_t seed, bool drop_last) {
  if (dataset.empty()) throw InputError("make_batches: empty dataset");
  if (batch_size == 0) throw ContractError("make_batches: batch size must be at least 1");
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));

  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, order.size() - start);
    if (n < batch_size && drop_last) break;
    Batch b;
    b.size = n;
    const ImageSample& first = dataset[order[start]];
    b.height = first.image.height;
    b.width = first.image.width;
    b.max_len = first.target.ids.size();
    for (std::size_t i = 0; i < n; ++i) {
      const ImageSample& s = dataset[order[start + i]];
      if (s.image.height != b.height || s.image.width != b.width || s.image.channels != 1 ||
          s.target.ids.size() != b.max_len) {
        throw DimensionError("make_batches: samples differ in geometry or sequence length");
      }
      b.sample_indices.push_back(order[start + i]);
      b.images.insert(b.images.end(), s.image.pixels.begin(), s.image.pixels.end());
      for (int id : s.target.ids) {
        b.targets.push_back(id);
        b.mask.push_back(id != text::kPad ? 1 : 0);
      }
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

std::vector<std::string> default_synthetic_symbols() {
  return {"0",      "1",     "2",      "3",   "4",      "5",      "6",     "7",
          "8",      "9",     "a",      "b",   "c",      "n",      "x",     "y",
          "z",      "+",     "-",      "=",   "(",      ")",      "^",     "_",
          "{",      "}",     "\\alpha", "\\beta", "\\pi", "\\theta", "\\sum", "\\int",
          "\\frac", "\\sqrt", "\\infty", "\\cdot", "\\leq", "\\sigma"};
}

std::uint64_t sample_seed(std::uint64_t seed, std::size_t i) {
  return splitmix64(seed ^ splitmix64(0xA5A5A5A5ULL + static_cast<std::uint64_t>(i)));
}

std::vector<std::vector<std::string>> generate_formulas(std::span<const std::string> symbols,
                                                        std::size_t count, std::size_t max_tokens,
                                                        std::uint64_t seed) {
  if (symbols.empty()) throw InputError("generate_formulas: no symbols to draw from");
  if (max_tokens == 0) throw InputError("generate_formulas: max_tokens must be at least 1");
  Rng rng(seed);
  std::vector<std::vector<std::string>> out(count);
  for (auto& f : out) {
    const std::size_t len = 1 + static_cast<std::size_t>(rng.below(max_tokens));
    for (std::size_t t = 0; t < len; ++t) f.push_back(symbols[rng.below(symbols.size())]);
  }
  return out;
}

namespace {

std::string join(const std::vector<std::string>& tokens) {
  std::string s;
  for (const auto& t : tokens) {
    if (!s.empty()) s += ' ';
    s += t;
  }
  return s;
}

}  // namespace

Dataset make_synthetic_dataset(const SyntheticSpec& spec) {
  const auto symbols = spec.symbols.empty() ? default_synthetic_symbols() : spec.symbols;
  auto token_lists = generate_formulas(symbols, spec.count, spec.max_tokens, spec.seed);
  Dataset ds;
  for (const auto& t : token_lists) ds.formulas.push_back(join(t));
  if (ds.formulas.empty()) throw InputError("synthetic dataset needs count >= 1");
  // Over-wide formulas are shortened until they fit, which can drop symbols,
  // so the vocabulary is counted afterwards.
  std::vector<Image> images;
  {
    const text::Vocab draft = text::Vocab::from_entries([&] {
      std::vector<text::Vocab::Entry> e;
      for (const auto& s : symbols) e.push_back({s, 0});
      return e;
    }());
    const GlyphAtlas draft_atlas(draft);
    for (std::size_t i = 0; i < token_lists.size(); ++i) {
      auto& toks = token_lists[i];
      for (;;) {
        try {
          render_formula(toks, draft, draft_atlas, sample_seed(spec.seed, i));
          break;
        } catch (const LengthError&) {
          toks.pop_back();
        }
      }
      ds.formulas[i] = join(toks);
    }
  }
  ds.vocab = text::Vocab::build(ds.formulas, text::kDefaultVocabSize);
  const GlyphAtlas atlas(ds.vocab);
  for (std::size_t i = 0; i < token_lists.size(); ++i) {
    ds.samples.push_back(render_synthetic(token_lists[i], ds.vocab, atlas, sample_seed(spec.seed, i), i));
  }
  return ds;
}

void write_synthetic_dataset(const std::filesystem::path& dir, const SyntheticSpec& spec) {
  const Dataset ds = make_synthetic_dataset(spec);
  std::filesystem::create_directories(dir / "images");
  std::string formulas;
  for (const auto& f : ds.formulas) formulas += f + "\n";
  write_file(dir / "formulas.txt", formulas);
  ds.vocab.save(dir / "vocab.tsv");
  DatasetIndex index;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "images/%05zu.pgm", i);
    save_image(dir / name, ds.samples[i].image);
    index.push_back({name, i});
  }
  write_file(dir / "index.txt", serialize_index(index));
  const nlohmann::json manifest = {{"seed", spec.seed},
                                   {"count", spec.count},
                                   {"vocab_file", "vocab.tsv"},
                                   {"formula_file", "formulas.txt"}};
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

Dataset load_dataset(const std::filesystem::path& dir, std::size_t max_len) {
  std::string vocab_file = "vocab.tsv", formula_file = "formulas.txt";
  if (std::filesystem::exists(dir / "manifest.json")) {
    nlohmann::json manifest;
    try {
      manifest = nlohmann::json::parse(read_file(dir / "manifest.json"));
      vocab_file = manifest.value("vocab_file", vocab_file);
      formula_file = manifest.value("formula_file", formula_file);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("manifest", e.what());
    }
  }
  Dataset ds;
  ds.vocab = text::Vocab::load(dir / vocab_file);
  ds.formulas = text::read_formula_file(dir / formula_file);
  const DatasetIndex index = parse_index(read_file(dir / "index.txt"));
  for (std::size_t n = 0; n < index.size(); ++n) {
    const IndexEntry& e = index[n];
    if (e.formula_id >= ds.formulas.size()) {
      throw InputError("index entry " + std::to_string(n) + " names formula " +
                       std::to_string(e.formula_id) + " but the formula file has " +
                       std::to_string(ds.formulas.size()) + " lines");
    }
    const auto tokens = text::tokenize(ds.formulas[e.formula_id]);
    ds.samples.push_back(
        ImageSample{load_image(dir / e.image_path), text::encode(tokens, ds.vocab, max_len), e.formula_id});
  }
  return ds;
}

}  // namespace im2tex::data
