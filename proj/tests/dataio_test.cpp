#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include "doctest.h"
#include "im2tex/dataio.hpp"
#include "im2tex/errors.hpp"
#include "im2tex/rng.hpp"

using namespace im2tex;
using namespace im2tex::data;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("im2tex_dataio_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write_bytes(const fs::path& p, const std::string& bytes) {
  std::ofstream(p, std::ios::binary) << bytes;
}

std::string pgm(std::size_t w, std::size_t h, unsigned char fill, unsigned maxval = 255) {
  return "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n" + std::to_string(maxval) +
         "\n" + std::string(w * h, static_cast<char>(fill));
}

}  // namespace

TEST_SUITE("index") {
  TEST_CASE("parse examples") {
    const auto idx = parse_index("img_001.pgm 17");
    REQUIRE(idx.size() == 1);
    CHECK(idx[0].image_path == "img_001.pgm");
    CHECK(idx[0].formula_id == 17);
    CHECK(parse_index("").empty());
    CHECK(parse_index("a.pgm 1\n\nb.pgm 2\n").size() == 2);
  }

  TEST_CASE("malformed lines report their number") {
    for (const char* bad : {"a.pgm x", "a.pgm -3", "a.pgm", "a.pgm 1x"}) {
      try {
        parse_index(std::string("ok.pgm 0\n") + bad);
        FAIL("expected ParseError");
      } catch (const ParseError& e) {
        CHECK(e.line() == 2);
      }
    }
    try {
      parse_index("a.pgm x");
    } catch (const ParseError& e) {
      CHECK(e.line() == 1);
    }
  }

  TEST_CASE("serialize then parse is the identity") {
    Rng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
      DatasetIndex idx;
      for (std::size_t i = 0; i < rng.below(20); ++i) {
        idx.push_back({"dir/img_" + std::to_string(rng.below(1000)) + ".pgm", rng.below(100000)});
      }
      CHECK(parse_index(serialize_index(idx)) == idx);
    }
  }
}

TEST_SUITE("pgm") {
  TEST_CASE("white, black and wrong geometry") {
    const fs::path dir = temp_dir("pgm");
    write_bytes(dir / "white.pgm", pgm(200, 50, 255));
    const Image white = load_image(dir / "white.pgm");
    CHECK(white.height == 50);
    CHECK(white.width == 200);
    for (double v : white.pixels) CHECK(v == 1.0);

    std::string ink = pgm(200, 50, 255);
    ink[ink.size() - 10000] = 0;
    write_bytes(dir / "ink.pgm", ink);
    CHECK(load_image(dir / "ink.pgm").pixels[0] == 0.0);

    const auto expect_field = [&](const std::string& bytes, const std::string& field) {
      write_bytes(dir / "bad.pgm", bytes);
      try {
        load_image(dir / "bad.pgm");
        FAIL("expected FormatError");
      } catch (const FormatError& e) {
        CHECK(e.field() == field);
      }
    };
    expect_field(pgm(199, 50, 255), "width");
    expect_field(pgm(200, 49, 255), "height");
    expect_field(pgm(200, 50, 255, 65535), "maxval");
    expect_field("P2\n200 50\n255\n", "magic");
    expect_field(pgm(200, 50, 255).substr(0, 500), "data");
  }

  TEST_CASE("header comments are skipped and encode round-trips") {
    const std::string bytes("P5 # comment\n2 1\n255\n\x00\xff", 23);
    const Image img = parse_pgm(bytes);
    CHECK(img.pixels == std::vector<double>{0.0, 1.0});
    CHECK(parse_pgm(encode_pgm(img)) == img);
  }
}

TEST_SUITE("channel adapter") {
  TEST_CASE("replication") {
    const Image one{1, 1, 1, {0.5}};
    const Image rgb = grayscale_to_rgb(one);
    CHECK(rgb.channels == 3);
    CHECK(rgb.pixels == std::vector<double>{0.5, 0.5, 0.5});

    Rng rng(1);
    Image g = Image::blank(50, 200);
    for (double& v : g.pixels) v = rng.uniform();
    const Image c = grayscale_to_rgb(g);
    for (std::size_t i = 0; i < g.pixels.size(); ++i) {
      for (std::size_t ch = 0; ch < 3; ++ch) CHECK(c.pixels[i * 3 + ch] == g.pixels[i]);
    }
  }

  TEST_CASE("resize-then-replicate equals replicate-then-resize at 254x254") {
    Rng rng(2);
    Image g = Image::blank(50, 200);
    for (double& v : g.pixels) v = std::round(rng.uniform() * 255.0) / 255.0;
    const Image a = grayscale_to_rgb(resize_nearest(g, 254, 254));
    const Image b = resize_nearest(grayscale_to_rgb(g), 254, 254);
    CHECK(a == b);
    CHECK(to_big_rgb(g) == a);
    // Channelwise nearest-neighbour oracle.
    for (std::size_t y = 0; y < 254; y += 17) {
      for (std::size_t x = 0; x < 254; x += 13) {
        const double src = g.at(y * 50 / 254, x * 200 / 254);
        for (std::size_t ch = 0; ch < 3; ++ch) CHECK(a.at(y, x, ch) == src);
      }
    }
  }
}

TEST_SUITE("render_synthetic") {
  const std::vector<std::string> symbols = default_synthetic_symbols();
  const text::Vocab vocab = [] {
    std::vector<text::Vocab::Entry> e;
    for (const auto& s : default_synthetic_symbols()) e.push_back({s, 1});
    return text::Vocab::from_entries(e);
  }();
  const GlyphAtlas atlas(vocab);

  TEST_CASE("determinism and degenerate input") {
    const std::vector<std::string> toks{"x", "^", "2", "+", "\\alpha"};
    const ImageSample a = render_synthetic(toks, vocab, atlas, 99);
    const ImageSample b = render_synthetic(toks, vocab, atlas, 99);
    CHECK(a.image == b.image);
    CHECK(a.target == b.target);
    const Image blank = render_formula({}, vocab, atlas, 5);
    for (double v : blank.pixels) CHECK(v == 1.0);
    CHECK(blank.height == 50);
    CHECK(blank.width == 200);
  }

  TEST_CASE("glyph atlas has no collisions and every single-token image is distinct") {
    std::set<GlyphAtlas::Bitmap> glyphs;
    for (std::size_t id = 0; id < atlas.size(); ++id) glyphs.insert(atlas.glyph(static_cast<int>(id)));
    CHECK(glyphs.size() == atlas.size());
    std::vector<Image> singles;
    for (const auto& s : symbols) {
      const std::vector<std::string> one{s};
      singles.push_back(render_formula(one, vocab, atlas, 7));
    }
    for (std::size_t i = 0; i < singles.size(); ++i) {
      for (std::size_t j = i + 1; j < singles.size(); ++j) CHECK(singles[i] != singles[j]);
    }
  }

  TEST_CASE("pixels are ink or background, within bounds") {
    const std::vector<std::string> toks(20, "\\pi");
    const Image img = render_formula(toks, vocab, atlas, 3);
    std::size_t ink = 0;
    for (double v : img.pixels) {
      CHECK((v == 0.0 || v == 1.0));
      ink += v == 0.0;
    }
    CHECK(ink > 0);
  }

  TEST_CASE("overflow and unknown symbols") {
    CHECK_THROWS_AS(render_formula(std::vector<std::string>(25, "x"), vocab, atlas, 1), LengthError);
    CHECK_THROWS_AS(render_formula(std::vector<std::string>{"\\zeta"}, vocab, atlas, 1), InputError);
  }
}

TEST_SUITE("batches") {
  std::vector<ImageSample> samples(std::size_t n) {
    const text::Vocab v = text::Vocab::from_entries({{"a", 1}, {"b", 1}});
    std::vector<ImageSample> out;
    for (std::size_t i = 0; i < n; ++i) {
      const std::vector<std::string> toks(i % 4, i % 2 ? "a" : "b");
      out.push_back({Image::blank(50, 200, 1, static_cast<double>(i) / 10.0), text::encode(toks, v), i});
    }
    return out;
  }

  TEST_CASE("floor and remainder arithmetic") {
    const auto ds = samples(10);
    CHECK(make_batches(ds, 4, 1, true).size() == 2);
    const auto b = make_batches(ds, 4, 1, false);
    REQUIRE(b.size() == 3);
    CHECK(b[2].size == 2);
    CHECK(b[2].images.size() == 2 * 50 * 200);
  }

  TEST_CASE("mask equals targets != pad, images follow their samples") {
    const auto ds = samples(10);
    for (const Batch& b : make_batches(ds, 3, 5, false)) {
      for (std::size_t i = 0; i < b.targets.size(); ++i) CHECK((b.mask[i] != 0) == (b.targets[i] != 0));
      for (std::size_t r = 0; r < b.size; ++r) {
        const ImageSample& s = ds[b.sample_indices[r]];
        CHECK(b.images[r * 50 * 200] == s.image.pixels[0]);
        CHECK(b.targets[r * 151 + 1] == s.target.ids[1]);
      }
    }
  }

  TEST_CASE("seeded shuffles: reproducible, seed-sensitive, roughly uniform") {
    const auto ds = samples(10);
    auto order = [&](std::uint64_t seed) {
      std::vector<std::size_t> o;
      for (const Batch& b : make_batches(ds, 10, seed, false)) {
        o.insert(o.end(), b.sample_indices.begin(), b.sample_indices.end());
      }
      return o;
    };
    CHECK(order(1) == order(1));
    CHECK(order(1) != order(2));
    // Over 100 seeds: consecutive seeds almost always disagree, and sample 0
    // visits every position with no position taking more than a third.
    std::size_t differing = 0;
    std::vector<std::size_t> position_hits(10, 0);
    for (std::uint64_t s = 0; s < 100; ++s) {
      const auto o = order(s);
      differing += o != order(s + 1000);
      position_hits[std::find(o.begin(), o.end(), 0u) - o.begin()]++;
    }
    CHECK(differing >= 99);
    for (std::size_t hits : position_hits) {
      CHECK(hits >= 1);
      CHECK(hits <= 33);
    }
  }

  TEST_CASE("empty dataset") {
    CHECK_THROWS_AS(make_batches(std::span<const ImageSample>{}, 4, 1, false), InputError);
  }
}

TEST_SUITE("synthetic dataset") {
  TEST_CASE("written directory loads back to the in-memory samples") {
    const fs::path dir = temp_dir("gen");
    const SyntheticSpec spec{12, 3, 8, {}};
    write_synthetic_dataset(dir, spec);
    const Dataset mem = make_synthetic_dataset(spec);
    const Dataset disk = load_dataset(dir);
    CHECK(disk.vocab.serialize() == mem.vocab.serialize());
    REQUIRE(disk.samples.size() == 12);
    for (std::size_t i = 0; i < 12; ++i) {
      CHECK(disk.samples[i].image == mem.samples[i].image);
      CHECK(disk.samples[i].target == mem.samples[i].target);
      CHECK(disk.samples[i].source_id == i);
    }
    CHECK(fs::exists(dir / "manifest.json"));
  }

  TEST_CASE("long formulas are shortened to fit the canvas") {
    const Dataset ds = make_synthetic_dataset(SyntheticSpec{20, 9, 40, {}});
    // At least 8 px per glyph after a 2 px margin leaves room for 24 tokens.
    std::size_t longest = 0;
    for (const auto& s : ds.samples) longest = std::max(longest, s.target.true_len);
    CHECK(longest <= 2 + 24);
    CHECK(longest > 2 + 8);
  }

  TEST_CASE("index pointing past the formula file") {
    const fs::path dir = temp_dir("badidx");
    write_synthetic_dataset(dir, SyntheticSpec{2, 1, 4, {}});
    write_bytes(dir / "index.txt", "images/00000.pgm 7\n");
    CHECK_THROWS_AS(load_dataset(dir), InputError);
  }
}
